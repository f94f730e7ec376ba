use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AttributionMap, Method};
use crate::error::{Error, Result};
use crate::net::{Model, Target};
use crate::pipeline::{extract_segment, segment_positions, SegmentConfig};
use crate::tensor::Tensor;

/// Rectangular occluder geometry. Masks span every leading channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub mask_height: usize,
    pub mask_width: usize,
    pub stride_height: usize,
    pub stride_width: usize,
    pub fill: f32,
}

impl MaskConfig {
    pub fn new(mask: [usize; 2], stride: [usize; 2]) -> Self {
        Self {
            mask_height: mask[0],
            mask_width: mask[1],
            stride_height: stride[0],
            stride_width: stride[1],
            fill: 0.0,
        }
    }

    /// `size x size` square stepped by its own size.
    pub fn square(size: usize) -> Self {
        Self::new([size, size], [size, size])
    }

    /// Full-height column of `width` pixels, stepped by its width.
    pub fn vertical(height: usize, width: usize) -> Self {
        Self::new([height, width], [height, width])
    }

    /// Full-width band of `height` rows, stepped by its height.
    pub fn horizontal(height: usize, width: usize) -> Self {
        Self::new([height, width], [height, width])
    }

    pub fn with_fill(mut self, fill: f32) -> Self {
        self.fill = fill;
        self
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.mask_height == 0 || self.mask_width == 0 {
            return Err(Error::Domain("mask dimensions must be >= 1".into()));
        }
        if self.stride_height == 0 || self.stride_width == 0 {
            return Err(Error::Domain("mask strides must be >= 1".into()));
        }
        if !self.fill.is_finite() {
            return Err(Error::NonFiniteValue(format!("mask fill {}", self.fill)));
        }
        if self.mask_height > height || self.mask_width > width {
            return Err(Error::MaskTooLarge(format!(
                "mask {}x{} on input {height}x{width}",
                self.mask_height, self.mask_width
            )));
        }
        Ok(())
    }
}

/// Mask start offsets along one axis.
///
/// Starts step by `stride` from 0; the last mask is the first whose far edge
/// reaches the border, and it is clipped there. With `stride <= mask` every
/// pixel is covered.
pub fn mask_positions(extent: usize, mask: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut start = 0;
    loop {
        starts.push(start);
        if start + mask >= extent {
            break;
        }
        start += stride;
        if start >= extent {
            break;
        }
    }
    starts
}

/// Scores the explained input with and without a rectangular occluder.
pub trait OcclusionScorer: Sync {
    /// Shape of the input being occluded; the last two axes are masked.
    fn shape(&self) -> &[usize];
    fn base_score(&self) -> f64;
    fn masked_score(&self, rows: Range<usize>, cols: Range<usize>, fill: f32) -> Result<f64>;
}

/// Height and width of the masked plane; rank-1 inputs are a single row.
fn plane_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [w] => (1, 1, *w),
        _ => {
            let n = shape.len();
            let (h, w) = (shape[n - 2], shape[n - 1]);
            (shape[..n - 2].iter().product(), h, w)
        }
    }
}

fn apply_mask(data: &mut [f64], shape: &[usize], rows: &Range<usize>, cols: &Range<usize>, fill: f32) {
    let (lead, h, w) = plane_dims(shape);
    for c in 0..lead {
        for r in rows.clone() {
            let row = &mut data[(c * h + r) * w..(c * h + r + 1) * w];
            row[cols.clone()].fill(f64::from(fill));
        }
    }
}

/// Scores by running the model once on the whole (masked) input.
pub struct DirectScorer<'a> {
    model: &'a Model,
    input: Vec<f64>,
    shape: Vec<usize>,
    target: Target,
    base: f64,
}

impl<'a> DirectScorer<'a> {
    pub fn new(model: &'a Model, input: &Tensor, target: Target) -> Result<Self> {
        model.check_target(target)?;
        let (features, _) = model.forward(input)?;
        let base = model.target_value(&features, target)?;
        Ok(Self {
            model,
            input: input.to_f64(),
            shape: input.shape().to_vec(),
            target,
            base,
        })
    }
}

impl OcclusionScorer for DirectScorer<'_> {
    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn base_score(&self) -> f64 {
        self.base
    }

    fn masked_score(&self, rows: Range<usize>, cols: Range<usize>, fill: f32) -> Result<f64> {
        let mut data = self.input.clone();
        apply_mask(&mut data, &self.shape, &rows, &cols, fill);
        let trace = self.model.trace(data)?;
        self.model.target_value(trace.features(), self.target)
    }
}

/// Scores a wide spectrogram as the mean target value over its segments.
///
/// Masks are applied to the full input before segmentation; only segments
/// whose window overlaps the mask are re-evaluated, the rest reuse cached
/// values, and the mean is always summed in segment order.
pub struct SegmentedScorer<'a> {
    model: &'a Model,
    input: Tensor,
    cfg: SegmentConfig,
    target: Target,
    positions: Vec<usize>,
    segment_scores: Vec<f64>,
    base: f64,
}

impl<'a> SegmentedScorer<'a> {
    pub fn new(model: &'a Model, input: &Tensor, cfg: SegmentConfig, target: Target) -> Result<Self> {
        cfg.validate()?;
        model.check_target(target)?;
        let (shape, model_shape) = (input.shape(), model.input_shape());
        if shape.len() != 3
            || model_shape.len() != 3
            || shape[..2] != model_shape[..2]
            || model_shape[2] != cfg.width
        {
            return Err(Error::Shape(format!(
                "cannot segment input {shape:?} into model inputs {model_shape:?} of width {}",
                cfg.width
            )));
        }
        let positions = segment_positions(shape[2], &cfg);
        let segment_scores = positions
            .par_iter()
            .map(|&p| {
                let seg = extract_segment(input, p, cfg.width);
                let trace = model.trace(seg)?;
                model.target_value(trace.features(), target)
            })
            .collect::<Result<Vec<_>>>()?;
        let base = mean_in_order(&segment_scores);
        Ok(Self {
            model,
            input: input.clone(),
            cfg,
            target,
            positions,
            segment_scores,
            base,
        })
    }

    pub fn segment_count(&self) -> usize {
        self.positions.len()
    }
}

fn mean_in_order(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, &v| acc + v) / values.len() as f64
}

impl OcclusionScorer for SegmentedScorer<'_> {
    fn shape(&self) -> &[usize] {
        self.input.shape()
    }

    fn base_score(&self) -> f64 {
        self.base
    }

    fn masked_score(&self, rows: Range<usize>, cols: Range<usize>, fill: f32) -> Result<f64> {
        let half = self.cfg.width / 2;
        let mut scores = Vec::with_capacity(self.positions.len());
        for (&p, &cached) in self.positions.iter().zip(&self.segment_scores) {
            // Segment centred on column p spans original columns [p - half, p - half + width).
            let lo = p as isize - half as isize;
            let hi = lo + self.cfg.width as isize;
            if hi <= cols.start as isize || lo >= cols.end as isize {
                scores.push(cached);
                continue;
            }
            let mut seg = extract_segment(&self.input, p, self.cfg.width);
            let seg_shape = self.model.input_shape();
            let local_lo = (cols.start as isize - lo).max(0) as usize;
            let local_hi = ((cols.end as isize - lo) as usize).min(self.cfg.width);
            apply_mask(&mut seg, seg_shape, &rows, &(local_lo..local_hi), fill);
            let trace = self.model.trace(seg)?;
            scores.push(self.model.target_value(trace.features(), self.target)?);
        }
        Ok(mean_in_order(&scores))
    }
}

/// Result of sliding an occluder over the input.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionResult {
    pub row_starts: Vec<usize>,
    pub col_starts: Vec<usize>,
    /// `score(original) - score(masked)`, row-major over (row start, col start).
    pub influence: Vec<f64>,
    /// Number of masks covering each pixel of the masked plane.
    pub coverage: Vec<u32>,
    pub base_score: f64,
    /// Each pixel holds the mean influence of the masks covering it.
    pub map: AttributionMap,
}

impl OcclusionResult {
    pub fn evaluations(&self) -> usize {
        self.influence.len()
    }

    pub fn influence_at(&self, row: usize, col: usize) -> f64 {
        self.influence[row * self.col_starts.len() + col]
    }
}

pub fn occlusion_with(
    scorer: &dyn OcclusionScorer,
    cfg: &MaskConfig,
    target: Target,
) -> Result<OcclusionResult> {
    let shape = scorer.shape().to_vec();
    let (lead, h, w) = plane_dims(&shape);
    cfg.validate(h, w)?;
    let row_starts = mask_positions(h, cfg.mask_height, cfg.stride_height);
    let col_starts = mask_positions(w, cfg.mask_width, cfg.stride_width);
    let regions: Vec<(Range<usize>, Range<usize>)> = row_starts
        .iter()
        .flat_map(|&r| {
            col_starts.iter().map(move |&c| {
                (r..(r + cfg.mask_height).min(h), c..(c + cfg.mask_width).min(w))
            })
        })
        .collect();

    let base = scorer.base_score();
    let influence = regions
        .par_iter()
        .map(|(rows, cols)| Ok(base - scorer.masked_score(rows.clone(), cols.clone(), cfg.fill)?))
        .collect::<Result<Vec<f64>>>()?;

    let mut sums = vec![0.0f64; h * w];
    let mut coverage = vec![0u32; h * w];
    for ((rows, cols), &inf) in regions.iter().zip(&influence) {
        for r in rows.clone() {
            for c in cols.clone() {
                sums[r * w + c] += inf;
                coverage[r * w + c] += 1;
            }
        }
    }
    let plane: Vec<f64> = sums
        .iter()
        .zip(&coverage)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { s / f64::from(n) })
        .collect();
    let values: Vec<f64> = (0..lead).flat_map(|_| plane.iter().copied()).collect();
    if influence.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invariant("occlusion produced a non-finite score".into()));
    }
    Ok(OcclusionResult {
        row_starts,
        col_starts,
        influence,
        coverage,
        base_score: base,
        map: AttributionMap {
            values: Tensor::from_f64(&shape, &values)?,
            method: Method::Occlusion,
            target,
            baseline_id: None,
            completeness_gap: None,
        },
    })
}

/// Occlusion sensitivity of `target`.
///
/// Inputs matching the model's input shape are scored directly. A wider
/// `[channels, height, T]` spectrogram is scored as the mean over its
/// hop-1 segments of the model's width.
pub fn occlusion(
    model: &Model,
    input: &Tensor,
    cfg: &MaskConfig,
    target: Target,
) -> Result<OcclusionResult> {
    if input.shape() == model.input_shape() {
        let scorer = DirectScorer::new(model, input, target)?;
        return occlusion_with(&scorer, cfg, target);
    }
    let width = *model.input_shape().last().unwrap();
    let scorer = SegmentedScorer::new(model, input, SegmentConfig::new(width, 1), target)?;
    occlusion_with(&scorer, cfg, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init, Layer};

    #[test]
    fn positions_cover_with_clipping() {
        assert_eq!(mask_positions(48, 24, 24), vec![0, 24]);
        let cols = mask_positions(1300, 24, 24);
        assert_eq!(cols.len(), 55);
        assert_eq!(*cols.last().unwrap(), 1296);
        assert_eq!(mask_positions(1300, 13, 13).len(), 100);
        for (h, n) in [(2, 24), (4, 12), (6, 8), (8, 6)] {
            assert_eq!(mask_positions(48, h, h).len(), n);
        }
        assert_eq!(mask_positions(5, 5, 1), vec![0]);
        assert_eq!(mask_positions(5, 2, 1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn linear_fixture_single_cell() {
        let m = init::linear_fixture();
        let x = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let res = occlusion(&m, &x, &MaskConfig::new([1, 1], [1, 1]), Target::Feature(0)).unwrap();
        assert_eq!(res.evaluations(), 2);
        assert_eq!(res.influence, vec![2.0, 3.0]);
        assert_eq!(res.map.values.data(), &[2.0, 3.0]);
        assert_eq!(res.coverage, vec![1, 1]);
        assert_eq!(res.base_score, 5.0);
    }

    #[test]
    fn constant_model_has_no_influence() {
        let m = init::linear_model(&[0.0; 6], 1.5);
        let x = Tensor::new(&[6], 2.0).unwrap();
        let res = occlusion(&m, &x, &MaskConfig::new([1, 2], [1, 1]), Target::Feature(0)).unwrap();
        assert!(res.influence.iter().all(|&v| v == 0.0));
        assert_eq!(res.coverage, vec![1, 2, 2, 2, 2, 1]);
    }

    #[test]
    fn mask_too_large_and_bad_target() {
        let m = init::linear_fixture();
        let x = Tensor::zeros(&[2]).unwrap();
        assert!(matches!(
            occlusion(&m, &x, &MaskConfig::new([1, 3], [1, 1]), Target::Feature(0)),
            Err(Error::MaskTooLarge(_))
        ));
        assert!(matches!(
            occlusion(&m, &x, &MaskConfig::new([1, 1], [1, 1]), Target::Feature(1)),
            Err(Error::TargetOutOfRange(_))
        ));
    }

    #[test]
    fn segmented_scorer_matches_full_recompute() {
        let model = init::nisqa_like(12, 5, true);
        let data: Vec<f32> = (0..48 * 23).map(|i| ((i * 31) % 17) as f32 / 17.0).collect();
        let x = Tensor::from_vec(&[1, 48, 23], data).unwrap();
        let cfg = SegmentConfig::new(5, 1);
        let scorer = SegmentedScorer::new(&model, &x, cfg, Target::Head).unwrap();
        assert_eq!(scorer.segment_count(), 23);

        let rows = 4..20;
        let cols = 9..14;
        let mut masked = x.to_f64();
        apply_mask(&mut masked, x.shape(), &rows, &cols, 0.5);
        let masked = Tensor::from_f64(x.shape(), &masked).unwrap();
        let full = SegmentedScorer::new(&model, &masked, cfg, Target::Head).unwrap();
        let got = scorer.masked_score(rows, cols, 0.5).unwrap();
        assert_eq!(got.to_bits(), full.base_score().to_bits());
    }

    #[test]
    fn coverage_with_full_geometry() {
        let model = crate::net::Model::new(
            &[1, 48, 1300],
            vec![Layer::Flatten, Layer::Dense(init::random_dense(&mut init::Lcg::new(1), 62400, 1))],
            None,
        )
        .unwrap();
        let x = Tensor::new(&[1, 48, 1300], 0.5).unwrap();
        let res = occlusion(&model, &x, &MaskConfig::square(24), Target::Feature(0)).unwrap();
        assert_eq!(res.evaluations(), 110);
        assert!(res.coverage.iter().all(|&c| c == 1));
    }
}
