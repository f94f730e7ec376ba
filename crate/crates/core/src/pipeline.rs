//! Whole-sample workflow: cut a spectrogram into centred segments, explain
//! each segment per feature, average the overlapping explanations back onto
//! the full time axis and summarise the features.

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::attrib::{
    conductance, deeplift_many, integrated_gradients_many, AttributionMap, Baseline, Method,
    PathConfig,
};
use crate::error::{Error, Result};
use crate::net::{Layer, Model, Target};
use crate::tensor::Tensor;

/// Number of frequency rows of every spectrogram.
pub const SPEC_HEIGHT: usize = 48;

/// L1 mass at or below which a per-segment map counts as empty.
pub const EMPTY_L1: f64 = 1e-9;

/// `[1, 48, T]` nonnegative magnitudes. Row 0 is the lowest frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Tensor,
    pub frame_rate: Option<f64>,
    pub source_id: String,
}

impl Spectrogram {
    /// Accepts `[48, T]` or `[1, 48, T]` values.
    pub fn new(values: Tensor, source_id: impl Into<String>) -> Result<Self> {
        let values = match *values.shape() {
            [h, t] => values.reshape(&[1, h, t])?,
            [1, _, _] => values,
            _ => {
                return Err(Error::Shape(format!(
                    "spectrogram must be [48, T] or [1, 48, T], got {:?}",
                    values.shape()
                )))
            }
        };
        if values.shape()[1] != SPEC_HEIGHT {
            return Err(Error::HeightNot48(values.shape()[1]));
        }
        if let Some(i) = values.data().iter().position(|&v| v < 0.0) {
            return Err(Error::Domain(format!("negative magnitude at element {i}")));
        }
        Ok(Self {
            values,
            frame_rate: None,
            source_id: source_id.into(),
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Window width (odd) and hop, in columns. Windows are zero padded by
/// `width / 2` columns on each side so that position `p` is centred on column `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SegmentConfig {
    pub width: usize,
    pub hop: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self { width: 15, hop: 1 }
    }
}

impl SegmentConfig {
    pub fn new(width: usize, hop: usize) -> Self {
        Self { width, hop }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width.is_multiple_of(2) {
            return Err(Error::Domain(format!("segment width {} must be odd", self.width)));
        }
        if self.hop == 0 {
            return Err(Error::Domain("segment hop must be >= 1".into()));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.width / 2
    }
}

/// floor((T + 2*pad - W) / hop) + 1.
pub fn segment_count(total: usize, cfg: &SegmentConfig) -> usize {
    (total + 2 * cfg.padding() - cfg.width) / cfg.hop + 1
}

/// Centre column of every segment.
pub fn segment_positions(total: usize, cfg: &SegmentConfig) -> Vec<usize> {
    (0..segment_count(total, cfg)).map(|k| k * cfg.hop).collect()
}

/// Columns `[position - width/2, position + width/2]` of a `[C, H, T]` tensor,
/// zero outside `0..T`, as a `[C, H, width]` buffer.
pub fn extract_segment(input: &Tensor, position: usize, width: usize) -> Vec<f64> {
    let shape = input.shape();
    let (rows, total) = (shape[0] * shape[1], shape[2]);
    let half = width / 2;
    let data = input.data();
    let mut out = vec![0.0; rows * width];
    for r in 0..rows {
        let src = &data[r * total..(r + 1) * total];
        let dst = &mut out[r * width..(r + 1) * width];
        for (j, d) in dst.iter_mut().enumerate() {
            let col = position as isize + j as isize - half as isize;
            if col >= 0 && (col as usize) < total {
                *d = f64::from(src[col as usize]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Column of the full spectrogram the segment is centred on.
    pub position: usize,
    pub tensor: Tensor,
}

pub fn segment(spec: &Spectrogram, cfg: &SegmentConfig) -> Result<Vec<Segment>> {
    cfg.validate()?;
    let shape = [1, SPEC_HEIGHT, cfg.width];
    segment_positions(spec.width(), cfg)
        .into_iter()
        .map(|position| {
            let data = extract_segment(spec.values(), position, cfg.width);
            Ok(Segment {
                position,
                tensor: Tensor::from_f64(&shape, &data)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainMethod {
    Ig,
    DeepLift,
}

impl std::str::FromStr for ExplainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ig" => Ok(ExplainMethod::Ig),
            "deeplift" => Ok(ExplainMethod::DeepLift),
            _ => Err(Error::Format(format!("pipeline method must be ig or deeplift, got `{s}`"))),
        }
    }
}

/// Explanations of one segment, one map per requested target.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentExplanation {
    pub position: usize,
    pub maps: Vec<AttributionMap>,
    pub l1: Vec<f64>,
    /// `true` where the map is empty, i.e. the feature is not present in the segment.
    pub empty: Vec<bool>,
}

fn segment_baseline(baseline: &Baseline, seg: &Segment) -> Result<Tensor> {
    match baseline {
        Baseline::Tensor(t) if t.shape() != seg.tensor.shape() && t.shape().len() == 3 => {
            let width = seg.tensor.shape()[2];
            Tensor::from_f64(seg.tensor.shape(), &extract_segment(t, seg.position, width))
        }
        other => other.resolve(seg.tensor.shape()),
    }
}

fn explain_one(
    model: &Model,
    seg: &Segment,
    method: ExplainMethod,
    targets: &[Target],
    baseline: &Baseline,
    path: PathConfig,
) -> Result<SegmentExplanation> {
    let base = segment_baseline(baseline, seg)?;
    let maps = match method {
        ExplainMethod::Ig => integrated_gradients_many(model, &seg.tensor, &base, targets, path)?,
        ExplainMethod::DeepLift => deeplift_many(model, &seg.tensor, &base, targets)?,
    };
    let l1: Vec<f64> = maps.iter().map(|m| m.values.l1()).collect();
    Ok(SegmentExplanation {
        position: seg.position,
        empty: l1.iter().map(|&v| v <= EMPTY_L1).collect(),
        maps,
        l1,
    })
}

/// Explains every segment with respect to every target.
///
/// A tensor baseline may be segment-shaped or a full spectrogram, in which
/// case each segment uses the matching window of it.
pub fn explain_segments(
    model: &Model,
    segments: &[Segment],
    method: ExplainMethod,
    targets: &[Target],
    baseline: &Baseline,
    path: PathConfig,
) -> Result<Vec<SegmentExplanation>> {
    segments
        .par_iter()
        .map(|seg| explain_one(model, seg, method, targets, baseline, path))
        .collect()
}

/// Streaming overlap average onto the full time axis.
#[derive(Debug, Clone)]
pub struct OverlapAccumulator {
    rows: usize,
    total: usize,
    width: usize,
    sums: Vec<f64>,
    coverage: Vec<u32>,
}

impl OverlapAccumulator {
    pub fn new(rows: usize, total: usize, width: usize) -> Self {
        Self {
            rows,
            total,
            width,
            sums: vec![0.0; rows * total],
            coverage: vec![0; total],
        }
    }

    /// Adds a `[rows, width]` map centred on `position`; padding columns are dropped.
    pub fn add(&mut self, position: usize, values: &[f32]) -> Result<()> {
        if position >= self.total {
            return Err(Error::PositionOutOfRange(position));
        }
        if values.len() != self.rows * self.width {
            return Err(Error::Shape(format!(
                "segment map has {} values, expected {}",
                values.len(),
                self.rows * self.width
            )));
        }
        let half = self.width / 2;
        for j in 0..self.width {
            let col = position as isize + j as isize - half as isize;
            if col < 0 || col as usize >= self.total {
                continue;
            }
            let col = col as usize;
            self.coverage[col] += 1;
            for r in 0..self.rows {
                self.sums[r * self.total + col] += f64::from(values[r * self.width + j]);
            }
        }
        Ok(())
    }

    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }

    /// Per-cell means; uncovered columns are zero.
    pub fn means(&self) -> Vec<f64> {
        let mut out = self.sums.clone();
        for r in 0..self.rows {
            for c in 0..self.total {
                let n = self.coverage[c];
                out[r * self.total + c] = if n == 0 { 0.0 } else { self.sums[r * self.total + c] / f64::from(n) };
            }
        }
        out
    }
}

/// Averages per-segment maps of one feature into a `[1, 48, T]` map.
///
/// Returns the map and the number of segments covering each column.
pub fn overlap_average(
    maps: &[AttributionMap],
    positions: &[usize],
    total: usize,
) -> Result<(AttributionMap, Vec<u32>)> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Shape("overlap_average needs at least one map".into()))?;
    if maps.len() != positions.len() {
        return Err(Error::Shape(format!(
            "{} maps but {} positions",
            maps.len(),
            positions.len()
        )));
    }
    let shape = first.values.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("segment maps must be rank 3, got {shape:?}")));
    }
    let (rows, width) = (shape[0] * shape[1], shape[2]);
    let mut acc = OverlapAccumulator::new(rows, total, width);
    for (map, &p) in maps.iter().zip(positions) {
        if map.values.shape() != shape {
            return Err(Error::Shape("segment maps differ in shape".into()));
        }
        acc.add(p, map.values.data())?;
    }
    let values = Tensor::from_f64(&[shape[0], shape[1], total], &acc.means())?;
    Ok((
        AttributionMap {
            values,
            method: first.method,
            target: first.target,
            baseline_id: first.baseline_id.clone(),
            completeness_gap: None,
        },
        acc.coverage,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Presence {
    Always,
    Sometimes,
    Never,
}

impl Presence {
    pub fn classify(ratio: f64) -> Self {
        if ratio > 0.9 {
            Presence::Always
        } else if ratio < 0.01 {
            Presence::Never
        } else {
            Presence::Sometimes
        }
    }
}

/// A Pearson coefficient, or "n/a" when one of the maps is constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation(pub Option<f64>);

impl Serialize for Correlation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(v) => s.serialize_f64(v),
            None => s.serialize_str("n/a"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureSummary {
    pub target: Target,
    pub presence_ratio: f64,
    pub presence: Presence,
    pub l1_mass: f64,
    /// Share of L1 mass per horizontal band, lowest frequencies first.
    pub band_profile: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvertedPair {
    pub a: Target,
    pub b: Target,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureReport {
    pub threshold: f64,
    pub bands: usize,
    pub segments: usize,
    pub features: Vec<FeatureSummary>,
    pub correlation: Vec<Vec<Correlation>>,
    pub inverted_pairs: Vec<InvertedPair>,
}

impl FeatureReport {
    pub fn correlation(&self, i: usize, j: usize) -> Option<f64> {
        self.correlation[i][j].0
    }
}

/// Correlation below which two features count as inverted copies.
pub const INVERTED_THRESHOLD: f64 = -0.9;

/// Normalized L1 mass per horizontal band of a `[C, H, W]` (or `[H, W]`) map.
pub fn band_profile(values: &Tensor, bands: usize) -> Result<Vec<f64>> {
    let shape = values.shape();
    let (lead, h, w) = match *shape {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Shape(format!("band profile needs a rank 2/3 map, got {shape:?}"))),
    };
    if bands == 0 || bands > h {
        return Err(Error::Domain(format!("band count {bands} must be in 1..={h}")));
    }
    let mut mass = vec![0.0f64; bands];
    let data = values.data();
    for c in 0..lead {
        for r in 0..h {
            let band = r * bands / h;
            let row = &data[(c * h + r) * w..(c * h + r + 1) * w];
            mass[band] += row.iter().fold(0.0, |acc, &v| acc + f64::from(v).abs());
        }
    }
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        for m in &mut mass {
            *m /= total;
        }
    }
    Ok(mass)
}

fn pearson(a: &[f32], b: &[f32]) -> Option<f64> {
    let n = a.len() as f64;
    let mean = |v: &[f32]| v.iter().fold(0.0, |acc, &x| acc + f64::from(x)) / n;
    let (ma, mb) = (mean(a), mean(b));
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (f64::from(x) - ma, f64::from(y) - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Presence, redundancy and band statistics of full-sample maps.
///
/// `segment_l1[s][f]` is the L1 mass of feature `f`'s map on segment `s`.
pub fn feature_report(
    full_maps: &[AttributionMap],
    segment_l1: &[Vec<f64>],
    threshold: f64,
    bands: usize,
) -> Result<FeatureReport> {
    let Some(first) = full_maps.first() else {
        return Err(Error::Shape("feature_report needs at least one map".into()));
    };
    if full_maps.iter().any(|m| m.values.shape() != first.values.shape()) {
        return Err(Error::Shape("full maps differ in shape".into()));
    }
    if segment_l1.iter().any(|row| row.len() != full_maps.len()) {
        return Err(Error::Shape("segment mass table width differs from map count".into()));
    }
    let n = full_maps.len();
    let segments = segment_l1.len();
    let features = full_maps
        .iter()
        .enumerate()
        .map(|(f, map)| {
            let present = segment_l1.iter().filter(|row| row[f] > threshold).count();
            let ratio = if segments == 0 { 0.0 } else { present as f64 / segments as f64 };
            Ok(FeatureSummary {
                target: map.target,
                presence_ratio: ratio,
                presence: Presence::classify(ratio),
                l1_mass: map.values.l1(),
                band_profile: band_profile(&map.values, bands)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut correlation = vec![vec![Correlation(None); n]; n];
    let mut inverted_pairs = Vec::new();
    for i in 0..n {
        let degenerate = pearson(full_maps[i].values.data(), full_maps[i].values.data()).is_none();
        correlation[i][i] = Correlation((!degenerate).then_some(1.0));
        for j in i + 1..n {
            let r = pearson(full_maps[i].values.data(), full_maps[j].values.data());
            correlation[i][j] = Correlation(r);
            correlation[j][i] = Correlation(r);
            if let Some(r) = r.filter(|&r| r < INVERTED_THRESHOLD) {
                inverted_pairs.push(InvertedPair {
                    a: full_maps[i].target,
                    b: full_maps[j].target,
                    correlation: r,
                });
            }
        }
    }
    Ok(FeatureReport {
        threshold,
        bands,
        segments,
        features,
        correlation,
        inverted_pairs,
    })
}

/// Default presence threshold: 1e-6 of a unit-valued segment's L1 mass.
pub fn default_presence_threshold(width: usize) -> f64 {
    1e-6 * (SPEC_HEIGHT * width) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionRow {
    pub filter: usize,
    pub mass: f64,
    pub band_profile: Vec<f64>,
    pub inactive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionTable {
    pub layer: usize,
    pub target: Target,
    pub bands: usize,
    pub rows: Vec<RegionRow>,
}

/// Band profile of each filter's conductance map at the output of a conv layer.
pub fn conductance_regions(
    model: &Model,
    segment: &Tensor,
    baseline: &Tensor,
    layer: usize,
    target: Target,
    bands: usize,
    path: PathConfig,
) -> Result<RegionTable> {
    model.check_layer(layer)?;
    if layer == 0 || !matches!(model.layers()[layer - 1], Layer::Conv2d(_)) {
        return Err(Error::Shape(format!(
            "activation {layer} is not the output of a conv2d layer"
        )));
    }
    let map = conductance(model, segment, baseline, layer, target, path)?;
    let shape = map.values.shape().to_vec();
    let plane = shape[1] * shape[2];
    let rows = map
        .values
        .data()
        .chunks_exact(plane)
        .enumerate()
        .map(|(filter, chunk)| {
            let t = Tensor::from_vec(&[shape[1], shape[2]], chunk.to_vec())?;
            let mass = t.l1();
            Ok(RegionRow {
                filter,
                mass,
                band_profile: band_profile(&t, bands)?,
                inactive: mass == 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RegionTable {
        layer,
        target,
        bands,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub segment: SegmentConfig,
    pub method: ExplainMethod,
    pub path: PathConfig,
    pub baseline: Baseline,
    /// Defaults to every feature of the model.
    pub targets: Option<Vec<Target>>,
    /// Defaults to [`default_presence_threshold`].
    pub presence_threshold: Option<f64>,
    pub bands: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            segment: SegmentConfig::default(),
            method: ExplainMethod::Ig,
            path: PathConfig::default(),
            baseline: Baseline::Zero,
            targets: None,
            presence_threshold: None,
            bands: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub positions: Vec<usize>,
    pub full_maps: Vec<AttributionMap>,
    pub coverage: Vec<u32>,
    /// L1 mass per (segment, target).
    pub segment_l1: Vec<Vec<f64>>,
    pub report: FeatureReport,
}

/// Segments processed concurrently before being folded into the averages.
const SEGMENT_CHUNK: usize = 64;

/// Segment, explain, average and report in one pass.
///
/// Segments are explained in parallel but folded into the running averages
/// in ascending position order, so the output does not depend on the worker count.
pub fn run_pipeline(model: &Model, spec: &Spectrogram, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.segment.validate()?;
    cfg.path.validate()?;
    let seg_shape = [1, SPEC_HEIGHT, cfg.segment.width];
    if model.input_shape() != seg_shape {
        return Err(Error::Shape(format!(
            "model input {:?} does not match segment shape {seg_shape:?}",
            model.input_shape()
        )));
    }
    let targets = cfg
        .targets
        .clone()
        .unwrap_or_else(|| (0..model.output_dim()).map(Target::Feature).collect());
    let total = spec.width();
    let positions = segment_positions(total, &cfg.segment);
    let mut accs = vec![OverlapAccumulator::new(SPEC_HEIGHT, total, cfg.segment.width); targets.len()];
    let mut segment_l1 = Vec::with_capacity(positions.len());
    let mut meta: Vec<Option<AttributionMap>> = vec![None; targets.len()];

    for chunk in positions.chunks(SEGMENT_CHUNK) {
        let explained = chunk
            .par_iter()
            .map(|&position| {
                let seg = Segment {
                    position,
                    tensor: Tensor::from_f64(
                        &seg_shape,
                        &extract_segment(spec.values(), position, cfg.segment.width),
                    )?,
                };
                explain_one(model, &seg, cfg.method, &targets, &cfg.baseline, cfg.path)
            })
            .collect::<Result<Vec<_>>>()?;
        for ex in explained {
            for (f, map) in ex.maps.iter().enumerate() {
                accs[f].add(ex.position, map.values.data())?;
                if meta[f].is_none() {
                    meta[f] = Some(map.clone());
                }
            }
            segment_l1.push(ex.l1);
        }
    }

    let coverage = accs[0].coverage().to_vec();
    let method = match cfg.method {
        ExplainMethod::Ig => Method::Ig,
        ExplainMethod::DeepLift => Method::DeepLift,
    };
    let full_maps = accs
        .iter()
        .zip(&targets)
        .zip(&meta)
        .map(|((acc, &target), first)| {
            Ok(AttributionMap {
                values: Tensor::from_f64(&[1, SPEC_HEIGHT, total], &acc.means())?,
                method,
                target,
                baseline_id: first.as_ref().and_then(|m| m.baseline_id.clone()),
                completeness_gap: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let threshold = cfg
        .presence_threshold
        .unwrap_or_else(|| default_presence_threshold(cfg.segment.width));
    let report = feature_report(&full_maps, &segment_l1, threshold, cfg.bands)?;
    Ok(PipelineOutput {
        positions,
        full_maps,
        coverage,
        segment_l1,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init;

    fn spec(t: usize, f: impl Fn(usize, usize) -> f32) -> Spectrogram {
        let data = (0..SPEC_HEIGHT * t).map(|i| f(i / t, i % t)).collect();
        Spectrogram::new(Tensor::from_vec(&[1, SPEC_HEIGHT, t], data).unwrap(), "test").unwrap()
    }

    #[test]
    fn segment_counts() {
        let cfg = SegmentConfig::new(15, 1);
        assert_eq!(segment_count(1300, &cfg), 1300);
        assert_eq!(segment(&spec(10, |_, _| 1.0), &SegmentConfig::new(15, 10)).unwrap().len(), 1);
        let segs = segment(&spec(30, |_, c| c as f32), &cfg).unwrap();
        assert_eq!(segs.len(), 30);
        // segment t is centred on column t
        for s in &segs {
            assert_eq!(s.tensor.data()[7], s.position as f32);
        }
        assert_eq!(segs[0].tensor.data()[..7], [0.0; 7]);
    }

    #[test]
    fn segment_config_validation() {
        assert!(SegmentConfig::new(14, 1).validate().is_err());
        assert!(SegmentConfig::new(15, 0).validate().is_err());
        let bad = Tensor::zeros(&[1, 40, 5]).unwrap();
        assert!(matches!(Spectrogram::new(bad, "x"), Err(Error::HeightNot48(40))));
        let neg = Tensor::new(&[48, 2], -1.0).unwrap();
        assert!(matches!(Spectrogram::new(neg, "x"), Err(Error::Domain(_))));
    }

    fn map_of(values: Tensor) -> AttributionMap {
        AttributionMap {
            values,
            method: Method::Ig,
            target: Target::Feature(0),
            baseline_id: None,
            completeness_gap: None,
        }
    }

    #[test]
    fn overlap_average_non_overlapping_is_concatenation() {
        let cfg = SegmentConfig::new(5, 5);
        let s = spec(15, |r, c| (r * 100 + c) as f32);
        let segs = segment(&s, &cfg).unwrap();
        assert_eq!(segs.iter().map(|s| s.position).collect::<Vec<_>>(), vec![0, 5, 10]);
        let maps: Vec<_> = segs.iter().map(|s| map_of(s.tensor.clone())).collect();
        let positions: Vec<_> = segs.iter().map(|s| s.position).collect();
        let (full, coverage) = overlap_average(&maps, &positions, 15).unwrap();
        // centred windows with hop == width leave the last two columns uncovered
        assert_eq!(coverage, vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0]);
        for c in 0..13 {
            assert_eq!(full.values.data()[c], s.values().data()[c]);
        }
    }

    #[test]
    fn overlap_average_constant_and_coverage() {
        let cfg = SegmentConfig::new(15, 1);
        let positions = segment_positions(1300, &cfg);
        let maps: Vec<_> = positions
            .iter()
            .map(|_| map_of(Tensor::new(&[1, 48, 15], 0.37).unwrap()))
            .collect();
        let (full, coverage) = overlap_average(&maps, &positions, 1300).unwrap();
        assert!(full.values.data().iter().all(|&v| v == 0.37f32));
        assert_eq!(coverage[0], 8);
        assert_eq!(coverage[7], 15);
        assert_eq!(coverage[650], 15);
        assert_eq!(coverage[1299], 8);
        assert!(matches!(
            overlap_average(&maps[..1], &[1300], 1300),
            Err(Error::PositionOutOfRange(1300))
        ));
    }

    #[test]
    fn restriction_round_trip() {
        let s = spec(40, |r, c| ((r * 7 + c * 3) % 11) as f32 * 0.25);
        for cfg in [SegmentConfig::new(15, 1), SegmentConfig::new(7, 3)] {
            let segs = segment(&s, &cfg).unwrap();
            let maps: Vec<_> = segs.iter().map(|s| map_of(s.tensor.clone())).collect();
            let positions: Vec<_> = segs.iter().map(|s| s.position).collect();
            let (full, coverage) = overlap_average(&maps, &positions, 40).unwrap();
            // Zero padding is part of the segment, so only compare fully interior columns.
            for (c, &cov) in coverage.iter().enumerate() {
                if cov == 0 {
                    continue;
                }
                for r in 0..48 {
                    assert_eq!(full.values.data()[r * 40 + c], s.values().data()[r * 40 + c]);
                }
            }
        }
    }

    #[test]
    fn band_profile_sums_to_one() {
        let mut data = vec![0.0f32; 48 * 3];
        data[0] = 1.0; // row 0, lowest band
        data[47 * 3] = -3.0; // row 47, top band
        let t = Tensor::from_vec(&[1, 48, 3], data).unwrap();
        assert_eq!(band_profile(&t, 4).unwrap(), vec![0.25, 0.0, 0.0, 0.75]);
        assert_eq!(band_profile(&Tensor::zeros(&[1, 48, 3]).unwrap(), 4).unwrap(), vec![0.0; 4]);
        assert!(band_profile(&t, 0).is_err());
    }

    #[test]
    fn report_classification_and_correlation() {
        let a = map_of(Tensor::from_vec(&[1, 48, 2], (0..96).map(|i| i as f32).collect()).unwrap());
        let mut b = map_of(a.values.neg());
        b.target = Target::Feature(1);
        let mut z = map_of(Tensor::zeros(&[1, 48, 2]).unwrap());
        z.target = Target::Feature(2);
        let l1 = vec![vec![1.0, 1.0, 0.0]; 10];
        let report = feature_report(&[a, b, z], &l1, 1e-3, 4).unwrap();
        assert_eq!(report.features[0].presence, Presence::Always);
        assert_eq!(report.features[2].presence, Presence::Never);
        assert_eq!(report.features[2].presence_ratio, 0.0);
        assert_eq!(report.correlation(0, 0), Some(1.0));
        assert!((report.correlation(0, 1).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(report.correlation(0, 2), None);
        assert_eq!(report.correlation(2, 2), None);
        assert_eq!(report.inverted_pairs.len(), 1);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"n/a\""));
    }

    #[test]
    fn explain_segments_grid_and_zero_input() {
        let model = init::nisqa_like(3, 15, false);
        let s = spec(30, |_, _| 0.0);
        let segs = segment(&s, &SegmentConfig::default()).unwrap();
        let targets: Vec<_> = (0..20).map(Target::Feature).collect();
        let out = explain_segments(&model, &segs, ExplainMethod::DeepLift, &targets, &Baseline::Zero, PathConfig::default()).unwrap();
        assert_eq!(out.len() * out[0].maps.len(), 600);
        assert!(out.iter().all(|e| e.empty.iter().all(|&x| x)));
    }

    #[test]
    fn conductance_regions_rows() {
        let model = init::nisqa_like(3, 15, false);
        let x = Tensor::new(&[1, 48, 15], 0.5).unwrap();
        let b = Tensor::zeros(&[1, 48, 15]).unwrap();
        let table = conductance_regions(&model, &x, &b, 1, Target::Feature(0), 4, PathConfig::trapezoid(16)).unwrap();
        assert_eq!(table.rows.len(), 8);
        for row in &table.rows {
            let s: f64 = row.band_profile.iter().sum();
            assert!(row.inactive || (s - 1.0).abs() < 1e-12);
        }
        assert!(conductance_regions(&model, &x, &b, 2, Target::Feature(0), 4, PathConfig::trapezoid(4)).is_err());
    }
}
