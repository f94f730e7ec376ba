//! On-disk formats: SPG1 / CSV spectrograms, ATT1 / CSV attribution maps,
//! P6 heatmaps and model manifests. All binary data is little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::attrib::{AttributionMap, Method};
use crate::error::{Error, Result};
use crate::net::manifest::{load_model, save_model, weights_file};
use crate::net::{Model, Target};
use crate::pipeline::{Spectrogram, SPEC_HEIGHT};
use crate::tensor::Tensor;

pub const SPECTROGRAM_MAGIC: &[u8; 4] = b"SPG1";
pub const ATTRIBUTION_MAGIC: &[u8; 4] = b"ATT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Bin,
}

impl FileFormat {
    /// `.csv` files are text, everything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::Bin,
        }
    }
}

/// Writes through a temporary sibling and renames, so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn u32_at(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Magic, height, width, then `height * width` floats. Returns the values and
/// the offset just past them.
fn decode_grid(bytes: &[u8], magic: &[u8; 4], what: &str) -> Result<(usize, usize, Vec<f32>, usize)> {
    if bytes.get(..4) != Some(&magic[..]) {
        return Err(Error::Format(format!("{what}: bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    let h = u32_at(bytes, 4, what)? as usize;
    let w = u32_at(bytes, 8, what)? as usize;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| Error::Format(format!("{what}: {h}x{w} overflows")))?;
    let end = 12 + 4 * n;
    let body = bytes.get(12..end).ok_or_else(|| {
        Error::Format(format!("{what}: header declares {h}x{w} values but the file holds {}", (bytes.len().saturating_sub(12)) / 4))
    })?;
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(format!("{what}: element {i}")));
    }
    Ok((h, w, values, end))
}

fn encode_grid(magic: &[u8; 4], h: usize, w: usize, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * values.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_csv(text: &str, what: &str) -> Result<(usize, usize, Vec<f32>)> {
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (r, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let start = values.len();
        for cell in line.split(',') {
            let v: f32 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("{what}: line {}: bad number `{}`", r + 1, cell.trim())))?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue(format!("{what}: line {}", r + 1)));
            }
            values.push(v);
        }
        let n = values.len() - start;
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(Error::Format(format!("{what}: line {} has {n} values, expected {w}", r + 1)))
            }
            _ => {}
        }
        rows += 1;
    }
    Ok((rows, width.unwrap_or(0), values))
}

fn csv_text(rows: usize, width: usize, values: &[f32]) -> String {
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = values[r * width..(r + 1) * width].iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn decode_spectrogram(bytes: &[u8], format: FileFormat, source_id: &str) -> Result<Spectrogram> {
    let (h, w, values) = match format {
        FileFormat::Bin => {
            let (h, w, v, end) = decode_grid(bytes, SPECTROGRAM_MAGIC, "spectrogram")?;
            if end != bytes.len() {
                return Err(Error::Format(format!("spectrogram: {} trailing bytes", bytes.len() - end)));
            }
            (h, w, v)
        }
        FileFormat::Csv => {
            let text = std::str::from_utf8(bytes).map_err(|_| Error::Format("spectrogram csv is not UTF-8".into()))?;
            parse_csv(text, "spectrogram")?
        }
    };
    if h != SPEC_HEIGHT {
        return Err(Error::HeightNot48(h));
    }
    if w == 0 {
        return Err(Error::Format("spectrogram has no columns".into()));
    }
    Spectrogram::new(Tensor::from_vec(&[1, h, w], values)?, source_id)
}

pub fn read_spectrogram(path: &Path, format: FileFormat) -> Result<Spectrogram> {
    let bytes = fs::read(path)?;
    decode_spectrogram(&bytes, format, &path.display().to_string())
}

pub fn encode_spectrogram(spec: &Spectrogram, format: FileFormat) -> Vec<u8> {
    let v = spec.values();
    match format {
        FileFormat::Bin => encode_grid(SPECTROGRAM_MAGIC, SPEC_HEIGHT, spec.width(), v.data()),
        FileFormat::Csv => csv_text(SPEC_HEIGHT, spec.width(), v.data()).into_bytes(),
    }
}

pub fn write_spectrogram(spec: &Spectrogram, path: &Path, format: FileFormat) -> Result<()> {
    write_atomic(path, &encode_spectrogram(spec, format))
}

/// Rows and columns of a map laid out as a 2-D grid.
fn grid_dims(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&w, lead)) => (lead.iter().product(), w),
        None => (1, 1),
    }
}

fn trailer(map: &AttributionMap) -> String {
    let shape: Vec<String> = map.values.shape().iter().map(|d| d.to_string()).collect();
    let mut t = format!("method={}\ntarget={}\nshape={}\n", map.method, map.target, shape.join("x"));
    if let Some(id) = &map.baseline_id {
        t.push_str(&format!("baseline_id={id}\n"));
    }
    if let Some(gap) = map.completeness_gap {
        t.push_str(&format!("completeness_gap={gap:?}\n"));
    }
    t
}

/// ATT1 grid followed by a u32 length and a `key=value` text trailer.
pub fn encode_attribution(map: &AttributionMap) -> Vec<u8> {
    let (h, w) = grid_dims(map.values.shape());
    let mut out = encode_grid(ATTRIBUTION_MAGIC, h, w, map.values.data());
    let t = trailer(map);
    out.extend_from_slice(&(t.len() as u32).to_le_bytes());
    out.extend_from_slice(t.as_bytes());
    out
}

pub fn decode_attribution(bytes: &[u8]) -> Result<AttributionMap> {
    let (h, w, values, end) = decode_grid(bytes, ATTRIBUTION_MAGIC, "attribution")?;
    let len = u32_at(bytes, end, "attribution trailer")? as usize;
    let text = bytes
        .get(end + 4..end + 4 + len)
        .ok_or_else(|| Error::Format("attribution: truncated trailer".into()))?;
    if end + 4 + len != bytes.len() {
        return Err(Error::Format("attribution: trailing bytes after trailer".into()));
    }
    let text = std::str::from_utf8(text).map_err(|_| Error::Format("attribution trailer is not UTF-8".into()))?;
    let (mut method, mut target, mut shape, mut baseline_id, mut gap) = (None, None, None, None, None);
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("attribution trailer line `{line}`")))?;
        match k {
            "method" => method = Some(v.parse::<Method>()?),
            "target" => target = Some(v.parse::<Target>()?),
            "shape" => {
                shape = Some(
                    v.split('x')
                        .map(|d| d.parse::<usize>().map_err(|_| Error::Format(format!("bad shape `{v}`"))))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            "baseline_id" => baseline_id = Some(v.to_string()),
            "completeness_gap" => {
                gap = Some(v.parse::<f64>().map_err(|_| Error::Format(format!("bad gap `{v}`")))?)
            }
            // Unknown keys are tolerated so later writers can add fields.
            _ => {}
        }
    }
    let shape = shape.unwrap_or_else(|| vec![h, w]);
    if grid_dims(&shape) != (h, w) {
        return Err(Error::Format(format!("attribution: trailer shape {shape:?} disagrees with {h}x{w} header")));
    }
    Ok(AttributionMap {
        values: Tensor::from_vec(&shape, values)?,
        method: method.ok_or_else(|| Error::Format("attribution: trailer lacks method".into()))?,
        target: target.ok_or_else(|| Error::Format("attribution: trailer lacks target".into()))?,
        baseline_id,
        completeness_gap: gap,
    })
}

pub fn encode_attribution_csv(map: &AttributionMap) -> Vec<u8> {
    let (h, w) = grid_dims(map.values.shape());
    csv_text(h, w, map.values.data()).into_bytes()
}

pub fn write_attribution(map: &AttributionMap, path: &Path, format: FileFormat) -> Result<()> {
    let bytes = match format {
        FileFormat::Bin => encode_attribution(map),
        FileFormat::Csv => encode_attribution_csv(map),
    };
    write_atomic(path, &bytes)
}

/// Reads an ATT1 file.
pub fn read_attribution(path: &Path) -> Result<AttributionMap> {
    decode_attribution(&fs::read(path)?)
}

fn colour(v: f32, scale: f32) -> [u8; 3] {
    if scale == 0.0 {
        return [255, 255, 255];
    }
    let s = (v / scale).clamp(-1.0, 1.0);
    let fade = (255.0 * (1.0 - s.abs())).round() as u8;
    if s >= 0.0 {
        [255, fade, fade]
    } else {
        [fade, fade, 255]
    }
}

/// Binary PPM with a blue-white-red ramp scaled by max |value|.
/// Row 0 of the map (lowest frequency) becomes the bottom image row.
pub fn heatmap_ppm(map: &AttributionMap) -> Vec<u8> {
    let (h, w) = grid_dims(map.values.shape());
    let scale = map.values.max_abs();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = map.values.data();
    for r in (0..h).rev() {
        for &v in &data[r * w..(r + 1) * w] {
            out.extend_from_slice(&colour(v, scale));
        }
    }
    out
}

pub fn render_heatmap(map: &AttributionMap, path: &Path) -> Result<()> {
    write_atomic(path, &heatmap_ppm(map))
}

/// Default blob name next to a manifest: `model.json` -> `model.weights.bin`.
pub fn default_weights_path(manifest: &Path) -> PathBuf {
    let stem = manifest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    manifest.with_file_name(format!("{stem}.weights.bin"))
}

/// Loads a manifest and the weight blob it names (relative to the manifest).
pub fn read_model(manifest: &Path) -> Result<Model> {
    let text = fs::read_to_string(manifest)?;
    let blob = match weights_file(&text)? {
        Some(f) => manifest.parent().unwrap_or(Path::new(".")).join(f),
        None => default_weights_path(manifest),
    };
    load_model(&text, &fs::read(&blob)?)
}

/// Writes the manifest and its weight blob side by side.
pub fn write_model(model: &Model, manifest: &Path) -> Result<()> {
    let blob = default_weights_path(manifest);
    let name = blob.file_name().expect("has file name").to_string_lossy().into_owned();
    let saved = save_model(model, Some(&name));
    write_atomic(&blob, &saved.weights)?;
    write_atomic(manifest, saved.manifest.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrib::{integrated_gradients, PathConfig};
    use crate::net::init;

    fn map(shape: &[usize], data: Vec<f32>) -> AttributionMap {
        AttributionMap {
            values: Tensor::from_vec(shape, data).unwrap(),
            method: Method::DeepLift,
            target: Target::Feature(7),
            baseline_id: Some("00ff".into()),
            completeness_gap: Some(1.25e-9),
        }
    }

    #[test]
    fn csv_zeros() {
        let text = "0,0,0,0\n".repeat(48);
        let s = decode_spectrogram(text.as_bytes(), FileFormat::Csv, "z").unwrap();
        assert_eq!(s.values().shape(), &[1, 48, 4]);
        assert!(s.values().data().iter().all(|&v| v == 0.0));
        let short = "0,0\n".repeat(47);
        assert!(matches!(decode_spectrogram(short.as_bytes(), FileFormat::Csv, "z"), Err(Error::HeightNot48(47))));
        let nan = format!("{}NaN,0\n", "0,0\n".repeat(47));
        assert!(matches!(decode_spectrogram(nan.as_bytes(), FileFormat::Csv, "z"), Err(Error::NonFiniteValue(_))));
    }

    #[test]
    fn bin_spectrogram() {
        let data: Vec<f32> = (0..48 * 1300).map(|i| (i % 97) as f32 * 0.5).collect();
        let bytes = encode_grid(SPECTROGRAM_MAGIC, 48, 1300, &data);
        assert_eq!(bytes.len(), 12 + 4 * 62_400);
        let s = decode_spectrogram(&bytes, FileFormat::Bin, "s").unwrap();
        assert_eq!(s.width(), 1300);
        assert_eq!(s.values().data(), &data[..]);
        assert_eq!(encode_spectrogram(&s, FileFormat::Bin), bytes);

        let short = encode_grid(SPECTROGRAM_MAGIC, 48, 10, &[0.0; 5]);
        assert!(matches!(decode_spectrogram(&short, FileFormat::Bin, "s"), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"SPG2");
        assert!(matches!(decode_spectrogram(&bad, FileFormat::Bin, "s"), Err(Error::Format(_))));
        let mut inf = bytes.clone();
        inf[12..16].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_spectrogram(&inf, FileFormat::Bin, "s"), Err(Error::NonFiniteValue(_))));
        let tall = encode_grid(SPECTROGRAM_MAGIC, 40, 2, &[0.0; 80]);
        assert!(matches!(decode_spectrogram(&tall, FileFormat::Bin, "s"), Err(Error::HeightNot48(40))));
    }

    #[test]
    fn attribution_round_trip_is_bitwise() {
        let data: Vec<f32> = (0..2 * 48 * 3).map(|i| ((i as f32) * 0.37).sin() * 1e-3).collect();
        let m = map(&[2, 48, 3], data);
        let back = decode_attribution(&encode_attribution(&m)).unwrap();
        assert_eq!(back, m);
        let bits = |m: &AttributionMap| m.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));

        let mut other = m.clone();
        other.baseline_id = None;
        other.completeness_gap = None;
        other.target = Target::Head;
        assert_eq!(decode_attribution(&encode_attribution(&other)).unwrap(), other);
    }

    #[test]
    fn attribution_csv() {
        let text = String::from_utf8(encode_attribution_csv(&map(&[2, 2], vec![1.5, -2.0, 0.25, 0.0]))).unwrap();
        assert_eq!(text, "1.5,-2\n0.25,0\n");
    }

    #[test]
    fn linear_ig_trailer_records_zero_gap() {
        let m = init::linear_fixture();
        let x = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        let a = integrated_gradients(&m, &x, &b, Target::Feature(0), PathConfig::default()).unwrap();
        let bytes = encode_attribution(&a);
        let text = String::from_utf8_lossy(&bytes[12 + 8 + 4..]).into_owned();
        assert!(text.contains("completeness_gap=0.0\n"), "{text}");
    }

    #[test]
    fn heatmap_colours() {
        let zero = heatmap_ppm(&map(&[2, 3], vec![0.0; 6]));
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&zero[..header.len()], header);
        assert!(zero[header.len()..].iter().all(|&b| b == 255));

        let m = map(&[2, 2], vec![4.0, -1.0, 2.0, 0.0]);
        let img = heatmap_ppm(&m);
        let px = &img[header.len()..];
        // image row 0 is map row 1
        assert_eq!(&px[0..3], &[255, 128, 128]);
        assert_eq!(&px[3..6], &[255, 255, 255]);
        assert_eq!(&px[6..9], &[255, 0, 0]);
        assert_eq!(&px[9..12], &[191, 191, 255]);

        let neg = heatmap_ppm(&map(&[2, 2], m.values.neg().into_data()));
        for (a, b) in img[header.len()..].chunks(3).zip(neg[header.len()..].chunks(3)) {
            assert_eq!([a[0], a[1], a[2]], [b[2], b[1], b[0]]);
        }
    }

    #[test]
    fn model_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.json");
        let m = init::nisqa_like(3, 15, true);
        write_model(&m, &path).unwrap();
        assert!(dir.path().join("demo.weights.bin").exists());
        assert_eq!(read_model(&path).unwrap(), m);
    }
}
