//! Segmentation and task metrics.
//!
//! [`weighted_fbeta`] is the weighted F-measure for foreground maps: errors are
//! first propagated from each background pixel's nearest foreground pixel,
//! smoothed with a Gaussian so that clustered errors count less than isolated
//! ones, then weighted by an importance term that grows with distance from the
//! foreground. Weighted precision and recall are combined as
//! `(1 + b^2) P R / (b^2 P + R)`.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// H x W binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask(pub Array2<bool>);

impl BinaryMask {
    pub fn from_probs(probs: ArrayView2<f64>, threshold: f64) -> Self {
        BinaryMask(probs.mapv(|p| p >= threshold))
    }

    pub fn from_fn(shape: (usize, usize), f: impl FnMut((usize, usize)) -> bool) -> Self {
        BinaryMask(Array2::from_shape_fn(shape, f))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.0.mapv(|b| if b { 1.0 } else { 0.0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub beta: f64,
    /// Standard deviation of the error-dependency Gaussian, in pixels.
    pub sigma: f64,
    /// Side of the square Gaussian window, in pixels (odd).
    pub window: usize,
    /// Importance decay rate; negative.
    pub alpha: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            sigma: 5.0,
            window: 7,
            alpha: 0.5f64.ln() / 5.0,
        }
    }
}

impl MetricConfig {
    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.sigma > 0.0 && self.alpha < 0.0)
            || self.window.is_multiple_of(2)
        {
            return Err(Error::Config(format!("invalid metric config {self:?}")));
        }
        Ok(())
    }

    /// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
    fn taps(&self) -> Vec<f64> {
        let half = (self.window / 2) as i64;
        let raw: Vec<f64> = (-half..=half)
            .map(|x| (-(x * x) as f64 / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

/// Nearest foreground pixel for every pixel: `(squared distance, flat index)`.
/// Ties go to the smallest row-major index.
fn nearest_foreground(gt: &Array2<bool>) -> Vec<(u64, usize)> {
    let (h, w) = gt.dim();
    let mut out = vec![(u64::MAX, usize::MAX); h * w];
    for r in 0..h {
        for c in 0..w {
            if gt[[r, c]] {
                out[r * w + c] = (0, r * w + c);
                continue;
            }
            let mut best = (u64::MAX, usize::MAX);
            let max_ring = h.max(w) as i64;
            for ring in 1..=max_ring {
                if (ring * ring) as u64 > best.0 {
                    break;
                }
                let mut consider = |rr: i64, cc: i64| {
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        return;
                    }
                    let (rr, cc) = (rr as usize, cc as usize);
                    if !gt[[rr, cc]] {
                        return;
                    }
                    let dr = rr as i64 - r as i64;
                    let dc = cc as i64 - c as i64;
                    let cand = ((dr * dr + dc * dc) as u64, rr * w + cc);
                    if cand < best {
                        best = cand;
                    }
                };
                let (r0, c0) = (r as i64, c as i64);
                for dc in -ring..=ring {
                    consider(r0 - ring, c0 + dc);
                    consider(r0 + ring, c0 + dc);
                }
                for dr in -ring + 1..ring {
                    consider(r0 + dr, c0 - ring);
                    consider(r0 + dr, c0 + ring);
                }
            }
            out[r * w + c] = best;
        }
    }
    out
}

/// Zero-padded "same" filtering with a separable kernel.
fn separable_filter(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let half = (taps.len() / 2) as i64;
    let mut rows = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let cc = c as i64 + k as i64 - half;
                if cc >= 0 && cc < w as i64 {
                    acc += t * x[[r, cc as usize]];
                }
            }
            rows[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let rr = r as i64 + k as i64 - half;
                if rr >= 0 && rr < h as i64 {
                    acc += t * rows[[rr as usize, c]];
                }
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Weighted F-beta of a probability (or binary) map against a ground-truth mask.
///
/// An empty ground truth scores 1 when the prediction is all zero, else 0.
pub fn weighted_fbeta(pred: ArrayView2<f64>, gt: &BinaryMask, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    if pred.dim() != gt.dim() {
        return Err(Error::Input(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.dim(),
            gt.dim()
        )));
    }
    if pred.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Input("prediction values must lie in [0, 1]".into()));
    }
    let fg = gt.count();
    if fg == 0 {
        return Ok(if pred.iter().all(|&p| p == 0.0) {
            1.0
        } else {
            0.0
        });
    }
    let (h, w) = gt.dim();
    let g = &gt.0;
    let err = Array2::from_shape_fn((h, w), |(r, c)| {
        (pred[[r, c]] - if g[[r, c]] { 1.0 } else { 0.0 }).abs()
    });
    let nearest = nearest_foreground(g);
    let propagated = Array2::from_shape_fn((h, w), |(r, c)| {
        let (_, idx) = nearest[r * w + c];
        err[[idx / w, idx % w]]
    });
    let smoothed = separable_filter(&propagated, &cfg.taps());

    let mut fg_weighted = 0.0;
    let mut bg_weighted = 0.0;
    for r in 0..h {
        for c in 0..w {
            let e = err[[r, c]];
            if g[[r, c]] {
                fg_weighted += e.min(smoothed[[r, c]]);
            } else {
                let dist = (nearest[r * w + c].0 as f64).sqrt();
                bg_weighted += e * (2.0 - (cfg.alpha * dist).exp());
            }
        }
    }
    let tp = fg as f64 - fg_weighted;
    let recall = 1.0 - fg_weighted / fg as f64;
    let precision = if tp + bg_weighted > 0.0 {
        tp / (tp + bg_weighted)
    } else {
        0.0
    };
    let b2 = cfg.beta * cfg.beta;
    let denom = b2 * precision + recall;
    Ok(if denom > 0.0 {
        (1.0 + b2) * precision * recall / denom
    } else {
        0.0
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScores {
    pub scores: Vec<f64>,
    pub average: f64,
}

/// One weighted F-beta per channel of a `(C, H, W)` probability map, plus
/// their unweighted mean. Predictions are thresholded when `threshold` is set.
pub fn per_affordance_scores(
    pred: ArrayView3<f64>,
    gt: &[BinaryMask],
    cfg: &MetricConfig,
    threshold: Option<f64>,
) -> Result<ChannelScores> {
    let channels = pred.dim().0;
    if channels != gt.len() {
        return Err(Error::Input(format!(
            "prediction has {channels} channels, ground truth {}",
            gt.len()
        )));
    }
    let mut scores = Vec::with_capacity(channels);
    for (c, mask) in gt.iter().enumerate() {
        let p = pred.index_axis(ndarray::Axis(0), c);
        let score = match threshold {
            Some(t) => weighted_fbeta(BinaryMask::from_probs(p, t).to_f64().view(), mask, cfg)?,
            None => weighted_fbeta(p, mask, cfg)?,
        };
        scores.push(score);
    }
    let average = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    Ok(ChannelScores { scores, average })
}

/// Confusion counts for plain pixel-level F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PixelCounts {
    pub fn accumulate(&mut self, pred: &BinaryMask, gt: &BinaryMask) {
        for (&p, &g) in pred.0.iter().zip(gt.0.iter()) {
            match (p, g) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                _ => {}
            }
        }
    }

    /// F1 over the accumulated counts; 1 when both prediction and truth are empty.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

pub fn pixel_f1(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let mut c = PixelCounts::default();
    c.accumulate(pred, gt);
    c.f1()
}

/// Split a `(C, H, W)` 0/1 array into channel masks.
pub fn masks_from_channels(labels: ArrayView3<u8>) -> Vec<BinaryMask> {
    labels
        .outer_iter()
        .map(|ch| BinaryMask(ch.mapv(|v| v > 0)))
        .collect()
}

pub fn threshold_map(probs: &Array3<f32>, threshold: f32) -> Vec<BinaryMask> {
    probs
        .outer_iter()
        .map(|ch| BinaryMask(ch.mapv(|v| v >= threshold)))
        .collect()
}

/// Planar placement error. `z` is ignored because the task is table-planar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionError {
    pub err: f64,
    pub x_err: f64,
    pub y_err: f64,
}

pub fn position_error(pred: &[f64; 3], truth: &[f64; 3]) -> PositionError {
    let dx = pred[0] - truth[0];
    let dy = pred[1] - truth[1];
    PositionError {
        err: dx.hypot(dy),
        x_err: dx.abs(),
        y_err: dy.abs(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square_gt() -> BinaryMask {
        BinaryMask::from_fn((12, 12), |(r, c)| {
            (3..8).contains(&r) && (4..9).contains(&c)
        })
    }

    #[test]
    fn perfect_map_scores_one() {
        let gt = square_gt();
        let s = weighted_fbeta(gt.to_f64().view(), &gt, &MetricConfig::default()).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn inverted_map_scores_low() {
        let gt = square_gt();
        let inv = gt.to_f64().mapv(|v| 1.0 - v);
        let s = weighted_fbeta(inv.view(), &gt, &MetricConfig::default()).unwrap();
        assert!(s < 0.05, "{s}");
    }

    #[test]
    fn empty_ground_truth_convention() {
        let gt = BinaryMask::from_fn((4, 4), |_| false);
        let zeros = Array2::<f64>::zeros((4, 4));
        let cfg = MetricConfig::default();
        assert_eq!(weighted_fbeta(zeros.view(), &gt, &cfg).unwrap(), 1.0);
        let mut one = zeros.clone();
        one[[1, 1]] = 0.3;
        assert_eq!(weighted_fbeta(one.view(), &gt, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let gt = square_gt();
        let p = Array2::<f64>::zeros((3, 3));
        assert!(matches!(
            weighted_fbeta(p.view(), &gt, &MetricConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn channel_average() {
        let gt = vec![square_gt(), square_gt()];
        let mut pred = Array3::<f64>::zeros((2, 12, 12));
        pred.index_axis_mut(ndarray::Axis(0), 0)
            .assign(&gt[0].to_f64());
        let s =
            per_affordance_scores(pred.view(), &gt, &MetricConfig::default(), Some(0.5)).unwrap();
        assert_eq!(s.scores.len(), 2);
        assert_eq!(s.scores[0], 1.0);
        assert!((s.average - (s.scores[0] + s.scores[1]) / 2.0).abs() < 1e-12);

        let seven: Vec<_> = (0..7).map(|_| square_gt()).collect();
        let mut p7 = Array3::<f64>::zeros((7, 12, 12));
        for c in 0..7 {
            p7.index_axis_mut(ndarray::Axis(0), c)
                .assign(&seven[c].to_f64());
        }
        let s = per_affordance_scores(p7.view(), &seven, &MetricConfig::default(), None).unwrap();
        assert_eq!(s.scores, vec![1.0; 7]);
        assert_eq!(s.average, 1.0);
    }

    #[test]
    fn pixel_f1_counts() {
        let gt = BinaryMask::from_fn((2, 2), |(r, _)| r == 0);
        let pred = BinaryMask::from_fn((2, 2), |(r, c)| r == 0 && c == 0 || r == 1 && c == 1);
        // tp 1, fp 1, fn 1
        assert!((pixel_f1(&pred, &gt) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn position_error_345() {
        let e = position_error(&[0.03, 0.04, 0.5], &[0.0, 0.0, 0.0]);
        assert!((e.x_err - 0.03).abs() < 1e-15);
        assert!((e.y_err - 0.04).abs() < 1e-15);
        assert!((e.err - 0.05).abs() < 1e-15);
        let z = position_error(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        assert_eq!((z.err, z.x_err, z.y_err), (0.0, 0.0, 0.0));
    }

    proptest! {
        #[test]
        fn position_error_properties(a in prop::array::uniform3(-5.0f64..5.0), b in prop::array::uniform3(-5.0f64..5.0), t in prop::array::uniform3(-5.0f64..5.0)) {
            let e = position_error(&a, &b);
            prop_assert!(e.err + 1e-12 >= e.x_err.max(e.y_err));
            let sym = position_error(&b, &a);
            prop_assert!((e.err - sym.err).abs() < 1e-12);
            let shift = |v: [f64; 3]| [v[0] + t[0], v[1] + t[1], v[2] + t[2]];
            let moved = position_error(&shift(a), &shift(b));
            prop_assert!((e.err - moved.err).abs() < 1e-9);
        }

        #[test]
        fn weighted_fbeta_in_unit_interval(bits in prop::collection::vec(any::<bool>(), 64), probs in prop::collection::vec(0.0f64..=1.0, 64)) {
            let gt = BinaryMask(Array2::from_shape_vec((8, 8), bits).unwrap());
            let pred = Array2::from_shape_vec((8, 8), probs).unwrap();
            let s = weighted_fbeta(pred.view(), &gt, &MetricConfig::default()).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            if gt.count() > 0 {
                let perfect = weighted_fbeta(gt.to_f64().view(), &gt, &MetricConfig::default()).unwrap();
                prop_assert_eq!(perfect, 1.0);
            }
        }
    }
}
