//! Online inference: initialization, per-frame tracking and the memory
//! update state machine.

use std::collections::VecDeque;

use ndarray::{Array2, Array3, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape};
pub use crate::bbox::{box_from_mask, BBox};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::features::{
    crop_map, crop_search_region, flip_vertical, gaussian_blur, translate, uncrop_map, Affine, Frame, SearchPatch,
};
use crate::fusion::probabilities;
use crate::inst::{
    cell_to_pixel, inst_model_apply_var, label_sigma, make_gaussian_label, peak_confidence, pixel_to_cell,
    solve_inst_model, ClfMemory, ClfModelParams, ClfSample,
};
use crate::model::Model;
use crate::seg::{seg_model_apply_var, solve_seg_model, Mask, SegMemory, SegModelParams, SegSample};

/// Probability mass below which no target state is estimated.
pub const MIN_PROB_MASS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateCase {
    /// Confident localization and a valid mask.
    A,
    /// Localization failed although a mask was produced.
    B,
    /// Confident localization but no valid mask.
    C,
    /// Neither branch succeeded.
    D,
}

impl UpdateCase {
    pub fn label(self) -> &'static str {
        match self {
            UpdateCase::A => "a",
            UpdateCase::B => "b",
            UpdateCase::C => "c",
            UpdateCase::D => "d",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateDecision {
    pub update_seg: bool,
    pub update_clf: bool,
    pub case: UpdateCase,
}

/// Which memories to extend given the score peak and mask validity.
/// `_t_ss` is accepted for symmetry; mask validity is already thresholded.
pub fn decide_update(peak: f64, mask_valid: bool, t_sc: f64, _t_ss: f64) -> UpdateDecision {
    let confident = peak >= t_sc;
    let case = match (confident, mask_valid) {
        (true, true) => UpdateCase::A,
        (false, true) => UpdateCase::B,
        (true, false) => UpdateCase::C,
        (false, false) => UpdateCase::D,
    };
    UpdateDecision {
        update_seg: case == UpdateCase::A,
        update_clf: matches!(case, UpdateCase::A | UpdateCase::C),
        case,
    }
}

/// Probability-weighted center and `size_factor`·std extent, mapped to image
/// coordinates. Sizes are clamped below at `min_size` pixels.
pub fn estimate_target_state(
    probs: &Array2<f64>,
    to_image: &Affine,
    size_factor: f64,
    min_size: f64,
) -> Option<([f64; 2], [f64; 2])> {
    let mass: f64 = probs.sum();
    if mass < MIN_PROB_MASS {
        return None;
    }
    let (mut mr, mut mc) = (0.0, 0.0);
    for ((r, c), &p) in probs.indexed_iter() {
        mr += p * r as f64;
        mc += p * c as f64;
    }
    let (mr, mc) = (mr / mass, mc / mass);
    let (mut vr, mut vc) = (0.0, 0.0);
    for ((r, c), &p) in probs.indexed_iter() {
        vr += p * (r as f64 - mr).powi(2);
        vc += p * (c as f64 - mc).powi(2);
    }
    let size = [
        (size_factor * (vr / mass).sqrt() * to_image.scale[0]).max(min_size),
        (size_factor * (vc / mass).sqrt() * to_image.scale[1]).max(min_size),
    ];
    Some((to_image.apply([mr, mc]), size))
}

/// First-frame target description.
#[derive(Clone, Debug)]
pub enum InitTarget {
    Mask(Mask),
    Box(BBox),
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub scale_history: VecDeque<[f64; 2]>,
    pub frame_counter: usize,
    pub seg_memory: SegMemory,
    pub clf_memory: ClfMemory,
    pub tau: SegModelParams,
    pub kappa: ClfModelParams,
    pub frames_since_refit: usize,
    pub seg_dirty: bool,
    pub clf_dirty: bool,
    /// Consecutive frames in which neither branch found the target.
    pub lost_frames: usize,
    pub tau_solves: usize,
    pub kappa_solves: usize,
}

/// Per-frame switches used by scripted experiments.
#[derive(Clone, Copy, Debug, Default)]
pub struct FrameScript {
    /// Replace the decoder output with an empty mask.
    pub suppress_seg: bool,
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    /// Full-resolution probabilities.
    pub mask: Mask,
    pub bbox: Option<BBox>,
    pub confidence: f64,
    pub decision: UpdateDecision,
    /// State after this frame.
    pub center: [f64; 2],
    pub size: [f64; 2],
    /// Score-map peak location, and its image position.
    pub peak_cell: (usize, usize),
    pub peak_position: [f64; 2],
    /// Image-pixel extent of one score cell (row, col).
    pub cell_size: [f64; 2],
}

/// A trained model plus the inference configuration.
pub struct Tracker<'m> {
    model: &'m Model,
    cfg: Config,
    lambda_s: f64,
}

struct Branches {
    seg_features: Array,
    clf_features: Array,
    scores: Array2<f64>,
    probs: Array2<f64>,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, cfg: Config) -> Self {
        Self {
            lambda_s: model.lambda_s(),
            model,
            cfg,
        }
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    fn crop(&self, frame: &Frame, center: [f64; 2], size: [f64; 2]) -> Result<SearchPatch> {
        crop_search_region(frame, center, size, self.cfg.crop.area_factor, self.cfg.crop.out_resolution)
    }

    /// Branch features of a patch, plus scores and mask when models are given.
    fn run(&self, patch: &SearchPatch, models: Option<(&SegModelParams, &ClfModelParams)>) -> Result<Branches> {
        let tape = Tape::new();
        let net = self.model.bind(&tape, false);
        let bb = net.backbone_patch(patch)?;
        let xs = net.seg_features(&bb)?;
        let xc = net.clf_features(&bb)?;
        let (mut scores, mut probs) = (Array2::zeros((0, 0)), Array2::zeros((0, 0)));
        if let Some((tau, kappa)) = models {
            let s = inst_model_apply_var(tape.constant(kappa.filter.clone()), xc);
            let x_m = seg_model_apply_var(tape.constant(tau.filter.clone()), xs);
            let x_f = if self.cfg.tracker.conditioning {
                net.fuse(x_m, net.encode_scores(s))?
            } else {
                let es = s.shape();
                let zero = tape.constant(Array::zeros(IxDyn(&[crate::fusion::SCORE_ENCODING_DIM, es[1], es[2]])));
                net.fuse(x_m, zero)?
            };
            let logits = net.decode(x_f, &bb)?;
            probs = probabilities(&logits.value());
            let sv = s.value();
            scores = sv
                .index_axis(Axis(0), 0)
                .to_owned()
                .into_dimensionality()
                .expect("2-D score map");
        }
        Ok(Branches {
            seg_features: (*xs.value()).clone(),
            clf_features: (*xc.value()).clone(),
            scores,
            probs,
        })
    }

    fn clf_label(&self, patch: &SearchPatch, center: [f64; 2], size: [f64; 2], grid: (usize, usize)) -> Array2<f64> {
        let stride = self.model.cfg.clf_source_stride;
        let cell = pixel_to_cell(patch.to_image.invert(center), stride);
        let patch_size = [size[0] / patch.to_image.scale[0], size[1] / patch.to_image.scale[1]];
        make_gaussian_label(cell, label_sigma(patch_size, stride, &self.cfg.inst), grid)
    }

    fn seg_sample(&self, features: Array, label: Array2<f64>) -> Result<SegSample> {
        let tape = Tape::new();
        let net = self.model.bind(&tape, false);
        Ok(net.make_seg_sample(features, Mask::new(label.mapv(|v| v.clamp(0.0, 1.0)))?))
    }

    pub fn initialize(&self, frame: &Frame, init: &InitTarget) -> Result<TrackerState> {
        let (h, w) = (frame.height(), frame.width());
        let mask = match init {
            InitTarget::Mask(m) => {
                if m.dim() != (h, w) {
                    return Err(Error::InvalidInit(format!("mask {:?} does not match frame {h}×{w}", m.dim())));
                }
                m.clone()
            }
            InitTarget::Box(b) => {
                if !b.is_finite() || b.w <= 0.0 || b.h <= 0.0 {
                    return Err(Error::InvalidInit(format!("box {b:?} has no area")));
                }
                Mask::new(b.fill(h, w))?
            }
        };
        let tight = box_from_mask(&mask.probs, 0.5)
            .ok_or_else(|| Error::InvalidInit("initial mask has no foreground".into()))?;
        let (center, size) = (tight.center(), tight.size());
        let patch = self.crop(frame, center, size)?;
        let [oh, ow] = self.cfg.crop.out_resolution;
        let label = crop_map(&mask.probs, &patch.to_image, oh, ow);
        let target_in_patch = patch.to_image.invert(center);

        let tc = &self.cfg.tracker;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut views = vec![(patch.pixels.clone(), label.clone(), target_in_patch)];
        for i in 0..tc.augmentations {
            let label3 = label.clone().insert_axis(Axis(2));
            let (img, lab, c): (Array3<f64>, Array3<f64>, [f64; 2]) = match i % 3 {
                0 => (
                    flip_vertical(&patch.pixels),
                    flip_vertical(&label3),
                    [oh as f64 - 1.0 - target_in_patch[0], target_in_patch[1]],
                ),
                1 => {
                    let max = |n: usize| ((tc.aug_translate * n as f64).round() as i64).max(1);
                    let dy = rng.random_range(-max(oh)..=max(oh)) as isize;
                    let dx = rng.random_range(-max(ow)..=max(ow)) as isize;
                    (
                        translate(&patch.pixels, dy, dx),
                        translate(&label3, dy, dx),
                        [target_in_patch[0] + dy as f64, target_in_patch[1] + dx as f64],
                    )
                }
                _ => {
                    let sigma = rng.random_range(tc.aug_blur_sigma[0]..=tc.aug_blur_sigma[1]);
                    (gaussian_blur(&patch.pixels, sigma), label3, target_in_patch)
                }
            };
            views.push((img, lab.index_axis_move(Axis(2), 0), c));
        }

        let stride = self.model.cfg.clf_source_stride;
        let patch_size = [size[0] / patch.to_image.scale[0], size[1] / patch.to_image.scale[1]];
        let sigma = label_sigma(patch_size, stride, &self.cfg.inst);
        let mut seg_samples = Vec::with_capacity(views.len());
        let mut clf_samples = Vec::with_capacity(views.len());
        for (img, lab, c) in views {
            let view = SearchPatch {
                pixels: img,
                to_image: patch.to_image,
            };
            let b = self.run(&view, None)?;
            let grid = (b.clf_features.shape()[1], b.clf_features.shape()[2]);
            clf_samples.push(ClfSample {
                label: make_gaussian_label(pixel_to_cell(c, stride), sigma, grid),
                features: b.clf_features,
            });
            seg_samples.push(self.seg_sample(b.seg_features, lab)?);
        }

        let mut seg_memory = SegMemory::new(self.cfg.seg.capacity, self.cfg.seg.learning_rate);
        seg_memory.insert_initial(seg_samples, frame.frame_index);
        let mut clf_memory = ClfMemory::new(self.cfg.inst.capacity, self.cfg.inst.learning_rate);
        clf_memory.insert_initial(clf_samples, frame.frame_index);

        let mc = &self.model.cfg;
        let tau = solve_seg_model(
            &seg_memory,
            &SegModelParams::zeros(mc.encoding_dim, mc.seg_channels, mc.seg_kernel),
            self.cfg.seg.iter_init,
            self.lambda_s,
        )?;
        let kappa = solve_inst_model(
            &clf_memory,
            &ClfModelParams::zeros(mc.clf_channels, mc.clf_kernel),
            self.cfg.inst.iter_init,
            self.cfg.inst.lambda_c,
            self.cfg.inst.fg_threshold,
        )?
        .kappa;

        Ok(TrackerState {
            center,
            size,
            scale_history: VecDeque::from([size]),
            frame_counter: 0,
            seg_memory,
            clf_memory,
            tau,
            kappa,
            frames_since_refit: 0,
            seg_dirty: false,
            clf_dirty: false,
            lost_frames: 0,
            tau_solves: 1,
            kappa_solves: 1,
        })
    }

    /// Median of the recent valid sizes, per side.
    fn robust_size(&self, state: &TrackerState) -> [f64; 2] {
        if state.scale_history.is_empty() {
            return state.size;
        }
        let median = |k: usize| {
            let mut v: Vec<f64> = state.scale_history.iter().map(|s| s[k]).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        };
        [median(0), median(1)]
    }

    /// Size used to place the search region.
    pub fn search_size(&self, state: &TrackerState) -> [f64; 2] {
        if state.lost_frames == 0 {
            return state.size;
        }
        let tc = &self.cfg.tracker;
        let growth = (1.0 + tc.lost_area_growth)
            .powf(state.lost_frames as f64 / 2.0)
            .min(tc.lost_growth_cap);
        self.robust_size(state).map(|s| s * growth)
    }

    pub fn track_frame(&self, state: &mut TrackerState, frame: &Frame, script: FrameScript) -> Result<FrameOutput> {
        if state.seg_memory.is_empty() || state.clf_memory.is_empty() {
            return Err(Error::InvalidState("tracker state is not initialized".into()));
        }
        let tc = self.cfg.tracker.clone();
        let patch = self.crop(frame, state.center, self.search_size(state))?;
        let b = self.run(&patch, Some((&state.tau, &state.kappa)))?;
        let probs = if script.suppress_seg {
            Array2::zeros(b.probs.dim())
        } else {
            b.probs
        };
        let (peak, cell) = peak_confidence(&b.scores);
        let mask_valid = probs.iter().any(|&p| p >= tc.t_ss);
        let decision = decide_update(peak, mask_valid, tc.t_sc, tc.t_ss);
        let stride = self.model.cfg.clf_source_stride;
        let peak_position = patch.to_image.apply(cell_to_pixel(cell, stride));

        if mask_valid {
            let confident = probs.mapv(|p| if p >= tc.t_ss { p } else { 0.0 });
            if let Some((center, size)) = estimate_target_state(&confident, &patch.to_image, tc.size_std_factor, tc.min_size) {
                let (lo, hi) = (1.0 - tc.max_scale_change, 1.0 / (1.0 - tc.max_scale_change));
                let base = state.size;
                state.center = center;
                state.size = [
                    size[0].clamp(base[0] * lo, base[0] * hi),
                    size[1].clamp(base[1] * lo, base[1] * hi),
                ];
            }
            state.lost_frames = 0;
        } else if decision.case == UpdateCase::C {
            if tc.fallback {
                state.center = peak_position;
            }
            state.lost_frames = 0;
        } else {
            state.lost_frames += 1;
        }
        if decision.case == UpdateCase::A {
            state.scale_history.push_back(state.size);
            while state.scale_history.len() > tc.scale_history {
                state.scale_history.pop_front();
            }
        }

        state.frame_counter += 1;
        let in_update_window = state.frame_counter < tc.init_phase || state.frame_counter.is_multiple_of(tc.update_interval);
        if in_update_window {
            if decision.update_seg {
                let sample = self.seg_sample(b.seg_features.clone(), probs.clone())?;
                state.seg_memory.insert(sample, frame.frame_index);
                state.seg_dirty = true;
            }
            if decision.update_clf {
                let grid = (b.clf_features.shape()[1], b.clf_features.shape()[2]);
                let label = self.clf_label(&patch, state.center, state.size, grid);
                state.clf_memory.insert(
                    ClfSample {
                        features: b.clf_features.clone(),
                        label,
                    },
                    frame.frame_index,
                );
                state.clf_dirty = true;
            }
        }
        state.frames_since_refit += 1;
        if state.frames_since_refit >= tc.refit_interval && (state.seg_dirty || state.clf_dirty) {
            if state.seg_dirty {
                state.tau = solve_seg_model(&state.seg_memory, &state.tau, self.cfg.seg.iter_update, self.lambda_s)?;
                state.tau_solves += 1;
            }
            if state.clf_dirty {
                state.kappa = solve_inst_model(
                    &state.clf_memory,
                    &state.kappa,
                    self.cfg.inst.iter_update,
                    self.cfg.inst.lambda_c,
                    self.cfg.inst.fg_threshold,
                )?
                .kappa;
                state.kappa_solves += 1;
            }
            state.frames_since_refit = 0;
            state.seg_dirty = false;
            state.clf_dirty = false;
        }

        let full = uncrop_map(&probs, &patch.to_image, frame.height(), frame.width());
        let bbox = box_from_mask(&full, tc.t_ss);
        Ok(FrameOutput {
            mask: Mask::new(full.mapv(|v| v.clamp(0.0, 1.0)))?,
            bbox,
            confidence: peak,
            decision,
            center: state.center,
            size: state.size,
            peak_cell: cell,
            peak_position,
            cell_size: [stride as f64 * patch.to_image.scale[0], stride as f64 * patch.to_image.scale[1]],
        })
    }

    /// Initialize on `frames[0]` and track the rest. `scripts[i]` applies to
    /// frame `i` when present.
    pub fn run_sequence(&self, frames: &[Frame], init: &InitTarget, scripts: &[FrameScript]) -> Result<Vec<FrameOutput>> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidSequence("no frames".into()))?;
        let mut state = self.initialize(first, init)?;
        let init_mask = match init {
            InitTarget::Mask(m) => m.clone(),
            InitTarget::Box(b) => Mask::new(b.fill(first.height(), first.width()))?,
        };
        let mut outputs = vec![FrameOutput {
            bbox: box_from_mask(&init_mask.probs, 0.5),
            mask: init_mask,
            confidence: 1.0,
            decision: decide_update(1.0, true, 0.0, 0.0),
            center: state.center,
            size: state.size,
            peak_cell: (0, 0),
            peak_position: state.center,
            cell_size: [0.0, 0.0],
        }];
        for (i, frame) in frames.iter().enumerate().skip(1) {
            let script = scripts.get(i).copied().unwrap_or_default();
            outputs.push(self.track_frame(&mut state, frame, script)?);
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::gen_synthetic_sequence;

    fn identity() -> Affine {
        Affine {
            scale: [1.0, 1.0],
            offset: [0.0, 0.0],
        }
    }

    #[test]
    fn rule_table() {
        let cases = [
            ((0.5, true), (true, true, UpdateCase::A)),
            ((0.5, false), (false, true, UpdateCase::C)),
            ((0.2, true), (false, false, UpdateCase::B)),
            ((0.2, false), (false, false, UpdateCase::D)),
        ];
        for ((peak, valid), (seg, clf, case)) in cases {
            let d = decide_update(peak, valid, 0.3, 0.5);
            assert_eq!((d.update_seg, d.update_clf, d.case), (seg, clf, case));
        }
        assert_eq!(decide_update(0.3, true, 0.3, 0.5).case, UpdateCase::A);
    }

    #[test]
    fn estimate_point_mass_and_uniform_rectangle() {
        let mut p = Array2::zeros((16, 16));
        p[[7, 9]] = 1.0;
        let (c, s) = estimate_target_state(&p, &identity(), 4.0, 2.0).unwrap();
        assert_eq!(c, [7.0, 9.0]);
        assert_eq!(s, [2.0, 2.0]);

        let mut p = Array2::zeros((64, 64));
        let (a, b) = (12usize, 30usize);
        p.slice_mut(ndarray::s![10..10 + a, 5..5 + b]).fill(0.8);
        let (_, s) = estimate_target_state(&p, &identity(), 4.0, 2.0).unwrap();
        // Discrete uniform variance is (n² − 1) / 12.
        let expected = |n: usize| 4.0 * (((n * n - 1) as f64) / 12.0).sqrt();
        assert!((s[0] - expected(a)).abs() < 1e-9 && (s[1] - expected(b)).abs() < 1e-9);
        assert!((s[1] / b as f64 - 4.0 / 12f64.sqrt()).abs() < 0.01);

        assert!(estimate_target_state(&Array2::zeros((4, 4)), &identity(), 4.0, 2.0).is_none());
    }

    fn small_config() -> Config {
        let mut cfg = Config::default();
        cfg.crop.out_resolution = [96, 96];
        cfg.synthetic.frame_size = [96, 96];
        cfg.synthetic.target_size = [16.0, 16.0];
        cfg.synthetic.length = 4;
        cfg.seg.iter_init = 2;
        cfg.inst.iter_init = 2;
        cfg
    }

    #[test]
    fn initialization_contract() {
        let cfg = small_config();
        let model = Model::new(&cfg.model, 0);
        let seq = gen_synthetic_sequence(&cfg.synthetic, 2).unwrap();
        let t = Tracker::new(&model, cfg.clone());
        let state = t.initialize(&seq.frames[0], &InitTarget::Box(BBox::new(10.0, 10.0, 40.0, 20.0))).unwrap();
        assert_eq!(state.seg_memory.len(), 4);
        assert_eq!(state.clf_memory.len(), 4);
        assert!(state.seg_memory.iter().all(|e| e.pinned));
        assert_eq!(state.center, BBox::new(10.0, 10.0, 40.0, 20.0).center());

        let mask = Mask::new(seq.masks[0].clone()).unwrap();
        let state = t.initialize(&seq.frames[0], &InitTarget::Mask(mask.clone())).unwrap();
        let stored = &state.seg_memory.entries()[0].sample.label;
        assert!(stored.probs.sum() > 0.0);
        assert_eq!(state.size, box_from_mask(&mask.probs, 0.5).unwrap().size());

        let empty = InitTarget::Mask(Mask::zeros(96, 96));
        assert!(matches!(t.initialize(&seq.frames[0], &empty), Err(Error::InvalidInit(_))));
        let flat = InitTarget::Box(BBox::new(3.0, 3.0, 0.0, 5.0));
        assert!(matches!(t.initialize(&seq.frames[0], &flat), Err(Error::InvalidInit(_))));
    }

    #[test]
    fn suppressed_mask_follows_score_peak() {
        let mut cfg = small_config();
        cfg.tracker.t_sc = -1.0;
        let model = Model::new(&cfg.model, 0);
        let seq = gen_synthetic_sequence(&cfg.synthetic, 2).unwrap();
        let t = Tracker::new(&model, cfg.clone());
        let mask = Mask::new(seq.masks[0].clone()).unwrap();
        let mut state = t.initialize(&seq.frames[0], &InitTarget::Mask(mask)).unwrap();
        let out = t.track_frame(&mut state, &seq.frames[1], FrameScript { suppress_seg: true }).unwrap();
        assert!(out.bbox.is_none());
        assert_eq!(out.decision.case, UpdateCase::C);
        assert_eq!(state.center, out.peak_position);
    }

    #[test]
    fn lost_target_keeps_state_and_grows_search() {
        let mut cfg = small_config();
        cfg.tracker.t_sc = f64::INFINITY;
        let model = Model::new(&cfg.model, 0);
        let seq = gen_synthetic_sequence(&cfg.synthetic, 2).unwrap();
        let t = Tracker::new(&model, cfg.clone());
        let mask = Mask::new(seq.masks[0].clone()).unwrap();
        let mut state = t.initialize(&seq.frames[0], &InitTarget::Mask(mask)).unwrap();
        let (c0, s0) = (state.center, state.size);
        let search0 = t.search_size(&state);
        let out = t.track_frame(&mut state, &seq.frames[1], FrameScript { suppress_seg: true }).unwrap();
        assert_eq!(out.decision.case, UpdateCase::D);
        assert_eq!((state.center, state.size), (c0, s0));
        assert!(t.search_size(&state)[0] > search0[0]);
        let seg_len = state.seg_memory.len();
        t.track_frame(&mut state, &seq.frames[2], FrameScript { suppress_seg: true }).unwrap();
        assert_eq!(state.seg_memory.len(), seg_len);
        state.lost_frames = 10_000;
        let capped = t.search_size(&state);
        assert!((capped[0] - 3.0 * s0[0]).abs() < 1e-9);
    }
}
