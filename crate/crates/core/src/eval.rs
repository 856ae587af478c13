//! Tracking and segmentation metrics plus the synthetic scene generator.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::{box_from_mask, BBox};
use crate::config::{ShapeKind, SyntheticConfig};
use crate::error::{Error, Result};
use crate::features::Frame;

pub const SUCCESS_THRESHOLDS: usize = 21;
pub const PRECISION_THRESHOLD_PX: f64 = 20.0;
pub const NORM_PRECISION_SAMPLES: usize = 51;
pub const NORM_PRECISION_MAX: f64 = 0.5;

/// Intersection over union of two boxes, by continuous area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Predictions and ground truth for one sequence. Frame 0 is the
/// initialization frame and frames without ground truth are not scored.
#[derive(Clone, Debug, Default)]
pub struct SequenceResult {
    pub pred_boxes: Vec<Option<BBox>>,
    pub gt_boxes: Vec<Option<BBox>>,
    pub pred_masks: Option<Vec<Array2<f64>>>,
    pub gt_masks: Option<Vec<Array2<f64>>>,
}

impl SequenceResult {
    pub fn new(pred_boxes: Vec<Option<BBox>>, gt_boxes: Vec<Option<BBox>>) -> Result<Self> {
        if pred_boxes.len() != gt_boxes.len() {
            return Err(Error::InvalidSequence(format!(
                "{} predictions for {} ground-truth boxes",
                pred_boxes.len(),
                gt_boxes.len()
            )));
        }
        Ok(Self {
            pred_boxes,
            gt_boxes,
            pred_masks: None,
            gt_masks: None,
        })
    }

    /// `(prediction, ground truth)` for every scored frame.
    pub fn scored(&self) -> impl Iterator<Item = (Option<&BBox>, &BBox)> {
        self.pred_boxes
            .iter()
            .zip(&self.gt_boxes)
            .skip(1)
            .filter_map(|(p, g)| g.as_ref().map(|g| (p.as_ref(), g)))
    }

    pub fn ious(&self) -> Vec<f64> {
        self.scored().map(|(p, g)| p.map_or(0.0, |p| iou(p, g))).collect()
    }

    fn center_errors(&self) -> Vec<(f64, f64)> {
        self.scored()
            .map(|(p, g)| match p {
                None => (f64::INFINITY, f64::INFINITY),
                Some(p) => {
                    let (pc, gc) = (p.center(), g.center());
                    let (dy, dx) = (pc[0] - gc[0], pc[1] - gc[1]);
                    let abs = (dy * dy + dx * dx).sqrt();
                    let norm = ((dy / g.h).powi(2) + (dx / g.w).powi(2)).sqrt();
                    (abs, norm)
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub success_curve: Vec<(f64, f64)>,
    pub norm_precision_curve: Vec<(f64, f64)>,
    pub mean_mask_iou: Option<f64>,
    pub frames: usize,
}

pub fn success_thresholds() -> Vec<f64> {
    (0..SUCCESS_THRESHOLDS).map(|i| i as f64 / (SUCCESS_THRESHOLDS - 1) as f64).collect()
}

/// Overlap-precision curve over the 21-point grid and its mean.
pub fn success_curve(ious: &[f64]) -> (f64, Vec<(f64, f64)>) {
    let curve: Vec<(f64, f64)> = success_thresholds()
        .into_iter()
        .map(|t| {
            let hits = ious.iter().filter(|&&v| v > t).count();
            (t, if ious.is_empty() { 0.0 } else { hits as f64 / ious.len() as f64 })
        })
        .collect();
    let auc = curve.iter().map(|(_, v)| v).sum::<f64>() / curve.len() as f64;
    (auc, curve)
}

pub fn success_auc(result: &SequenceResult) -> Result<(f64, Vec<(f64, f64)>)> {
    let ious = result.ious();
    if ious.is_empty() {
        return Err(Error::InvalidSequence("no scored frames".into()));
    }
    Ok(success_curve(&ious))
}

/// `(precision at 20 px, normalized precision AUC, normalized curve)`.
fn precision_from_errors(errors: &[(f64, f64)]) -> (f64, f64, Vec<(f64, f64)>) {
    let n = errors.len().max(1) as f64;
    let precision = errors.iter().filter(|e| e.0 <= PRECISION_THRESHOLD_PX).count() as f64 / n;
    let curve: Vec<(f64, f64)> = (0..NORM_PRECISION_SAMPLES)
        .map(|i| {
            let t = NORM_PRECISION_MAX * i as f64 / (NORM_PRECISION_SAMPLES - 1) as f64;
            (t, errors.iter().filter(|e| e.1 <= t).count() as f64 / n)
        })
        .collect();
    let auc = curve.iter().map(|(_, v)| v).sum::<f64>() / curve.len() as f64;
    (precision, auc, curve)
}

pub fn precision_metrics(result: &SequenceResult) -> Result<(f64, f64)> {
    let errors = result.center_errors();
    if errors.is_empty() {
        return Err(Error::InvalidSequence("no scored frames".into()));
    }
    let (p, np, _) = precision_from_errors(&errors);
    Ok((p, np))
}

/// Jaccard index of the thresholded masks; two empty masks score 1.
pub fn mask_iou(pred: &Array2<f64>, gt: &Array2<f64>, threshold: f64) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Config(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p >= threshold, g >= threshold);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Metrics pooled over the scored frames of all sequences.
pub fn evaluate(results: &[SequenceResult]) -> Result<MetricReport> {
    let ious: Vec<f64> = results.iter().flat_map(|r| r.ious()).collect();
    if ious.is_empty() {
        return Err(Error::InvalidSequence("no scored frames".into()));
    }
    let errors: Vec<(f64, f64)> = results.iter().flat_map(|r| r.center_errors()).collect();
    let (auc, success_curve) = success_curve(&ious);
    let (precision, norm_precision, norm_precision_curve) = precision_from_errors(&errors);
    let mut mask_scores = Vec::new();
    for r in results {
        if let (Some(p), Some(g)) = (&r.pred_masks, &r.gt_masks) {
            for (pm, gm) in p.iter().zip(g).skip(1) {
                mask_scores.push(mask_iou(pm, gm, 0.5)?);
            }
        }
    }
    let mean_mask_iou = if mask_scores.is_empty() {
        None
    } else {
        Some(mask_scores.iter().sum::<f64>() / mask_scores.len() as f64)
    };
    Ok(MetricReport {
        auc,
        precision,
        norm_precision,
        success_curve,
        norm_precision_curve,
        mean_mask_iou,
        frames: ious.len(),
    })
}

/// A rendered synthetic sequence with exact ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub frames: Vec<Frame>,
    pub masks: Vec<Array2<f64>>,
    pub boxes: Vec<Option<BBox>>,
    /// Unoccluded target center per frame, (row, col).
    pub centers: Vec<[f64; 2]>,
    pub distractor_centers: Vec<Option<[f64; 2]>>,
}

struct Palette {
    background: [[f64; 3]; 3],
    freqs: [[f64; 2]; 3],
    phases: [f64; 3],
    target: [f64; 3],
    stripe: [f64; 3],
}

fn palette(rng: &mut ChaCha8Rng) -> Palette {
    let mut color = |lo: f64, hi: f64| [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)];
    let background = [color(0.25, 0.6), color(-0.12, 0.12), color(-0.12, 0.12)];
    let target = color(0.75, 0.95);
    let stripe = color(0.05, 0.25);
    let freqs = [
        [rng.random_range(0.01..0.05), rng.random_range(0.01..0.05)],
        [rng.random_range(0.02..0.08), rng.random_range(-0.05..0.05)],
        [rng.random_range(-0.05..0.05), rng.random_range(0.02..0.08)],
    ];
    let phases = [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)];
    Palette {
        background,
        freqs,
        phases,
        target,
        stripe,
    }
}

fn inside(kind: ShapeKind, center: [f64; 2], size: [f64; 2], r: f64, c: f64) -> bool {
    let dy = (r - center[0]) / (size[0] / 2.0);
    let dx = (c - center[1]) / (size[1] / 2.0);
    match kind {
        ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
    }
}

/// Reflect `x` into `[lo, hi]`.
fn bounce(x: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    let t = (x - lo).rem_euclid(2.0 * span);
    lo + if t > span { 2.0 * span - t } else { t }
}

/// Target trajectory: constant velocity reflected inside the frame margins.
pub fn trajectory(cfg: &SyntheticConfig, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6a65_6374);
    let [h, w] = cfg.frame_size.map(|v| v as f64);
    let margin = |extent: f64, size: f64| {
        let m = size / 2.0 + 2.0 + if cfg.distractor { cfg.distractor_radius } else { 0.0 };
        (m.min(extent / 2.0), (extent - 1.0 - m).max(extent / 2.0))
    };
    let (r0, r1) = margin(h, cfg.target_size[0]);
    let (c0, c1) = margin(w, cfg.target_size[1]);
    let start = [rng.random_range(r0..=r1), rng.random_range(c0..=c1)];
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let v = [cfg.speed * angle.sin(), cfg.speed * angle.cos()];
    (0..cfg.length)
        .map(|t| {
            let t = t as f64;
            [bounce(start[0] + v[0] * t, r0, r1), bounce(start[1] + v[1] * t, c0, c1)]
        })
        .collect()
}

/// Render a scene; deterministic in `(cfg, seed)`.
pub fn gen_synthetic_sequence(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticSequence> {
    gen_with_trajectory(cfg, seed, &trajectory(cfg, seed))
}

/// Render a scene along a caller-supplied target trajectory.
pub fn gen_with_trajectory(cfg: &SyntheticConfig, seed: u64, centers: &[[f64; 2]]) -> Result<SyntheticSequence> {
    render(cfg, seed, seed, centers)
}

/// Scene whose colors and texture come from `appearance_seed` while the
/// trajectory, distractor orbit and noise come from `motion_seed`.
pub fn gen_scene(cfg: &SyntheticConfig, appearance_seed: u64, motion_seed: u64) -> Result<SyntheticSequence> {
    render(cfg, appearance_seed, motion_seed, &trajectory(cfg, motion_seed))
}

fn render(cfg: &SyntheticConfig, appearance_seed: u64, motion_seed: u64, centers: &[[f64; 2]]) -> Result<SyntheticSequence> {
    let pal = palette(&mut ChaCha8Rng::seed_from_u64(appearance_seed));
    let mut rng = ChaCha8Rng::seed_from_u64(motion_seed ^ 0x6d6f_7469_6f6e);
    let [h, w] = cfg.frame_size;
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid std");
    let orbit_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let orbit_rate = if rng.random_bool(0.5) { 0.04 } else { -0.04 };
    let stripe_period = 6.0;
    let background = Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
        let (r, c) = (r as f64, c as f64);
        let wave = |k: usize| (pal.freqs[k][0] * r + pal.freqs[k][1] * c + pal.phases[k]).sin();
        let base = pal.background[0][ch] + pal.background[1][ch] * wave(0) + pal.background[2][ch] * wave(1 + ch % 2);
        base.clamp(0.0, 1.0)
    });

    let mut out = SyntheticSequence {
        frames: Vec::with_capacity(centers.len()),
        masks: Vec::with_capacity(centers.len()),
        boxes: Vec::with_capacity(centers.len()),
        centers: centers.to_vec(),
        distractor_centers: Vec::with_capacity(centers.len()),
    };
    for (t, &center) in centers.iter().enumerate() {
        let occluded = cfg.occlusion.is_some_and(|[a, b]| t >= a && t < b);
        let distractor = cfg.distractor.then(|| {
            let a = orbit_phase + orbit_rate * t as f64;
            [center[0] + cfg.distractor_radius * a.sin(), center[1] + cfg.distractor_radius * a.cos()]
        });
        let mut pixels = background.clone();
        let mut mask = Array2::zeros((h, w));
        let mut paint = |shape_center: [f64; 2], is_target: bool, pixels: &mut Array3<f64>| {
            let (hh, hw) = (cfg.target_size[0] / 2.0 + 1.0, cfg.target_size[1] / 2.0 + 1.0);
            let r_lo = (shape_center[0] - hh).floor().max(0.0) as usize;
            let r_hi = ((shape_center[0] + hh).ceil().max(0.0) as usize).min(h.saturating_sub(1));
            let c_lo = (shape_center[1] - hw).floor().max(0.0) as usize;
            let c_hi = ((shape_center[1] + hw).ceil().max(0.0) as usize).min(w.saturating_sub(1));
            for r in r_lo..=r_hi {
                for c in c_lo..=c_hi {
                    if !inside(cfg.shape, shape_center, cfg.target_size, r as f64, c as f64) {
                        continue;
                    }
                    let local = (r as f64 - shape_center[0]) + (c as f64 - shape_center[1]);
                    let stripe = local.rem_euclid(stripe_period) < stripe_period / 2.0;
                    let color = if stripe { pal.stripe } else { pal.target };
                    for ch in 0..3 {
                        pixels[[r, c, ch]] = color[ch];
                    }
                    mask[[r, c]] = if is_target { 1.0 } else { 0.0 };
                }
            }
        };
        if let Some(d) = distractor {
            paint(d, false, &mut pixels);
        }
        if !occluded {
            paint(center, true, &mut pixels);
        }
        if cfg.noise > 0.0 {
            pixels.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
        out.boxes.push(box_from_mask(&mask, 0.5));
        out.masks.push(mask);
        out.frames.push(Frame::new(pixels, t)?);
        out.distractor_centers.push(distractor);
    }
    Ok(out)
}
