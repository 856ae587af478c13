//! Offline training: sequence losses, Adam, and the batched training step.
//!
//! Within a sequence, frame 0 seeds both memories from ground truth and
//! solves τ and κ. Every later frame is decoded with the current τ and the
//! fixed κ, scored against ground truth, and then fed back into the
//! segmentation memory with its (detached) predicted mask before τ is
//! refined. κ is never re-solved inside a sequence.

use std::collections::BTreeMap;

use ndarray::{Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape, Var};
use crate::bbox::box_from_mask;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{gen_scene, mask_iou, SyntheticSequence};
use crate::features::{crop_map, crop_search_region, Frame};
use crate::fusion::probabilities;
use crate::inst::{
    hinge_residual_var, inst_model_apply_var, label_sigma, make_gaussian_label, pixel_to_cell, ClfVarSample,
    InstLeastSquares, foreground,
};
use crate::memory::SampleMemory;
use crate::model::{Model, Net};
use crate::parallel::{self, ExecMode};
use crate::seg::{seg_model_apply_var, Mask, SegLeastSquares, SegVarSample};

#[derive(Clone, Debug)]
pub struct TrainFrame {
    pub frame: Frame,
    pub gt_mask: Mask,
    /// Target center (row, col) in image pixels.
    pub gt_center: [f64; 2],
    /// Target extent (h, w) in image pixels.
    pub gt_size: [f64; 2],
    /// Where the search region is placed; the ground truth by default.
    pub crop_center: [f64; 2],
    pub crop_size: [f64; 2],
}

impl TrainFrame {
    /// Center and size are taken from the tight box of the mask.
    pub fn from_mask(frame: Frame, gt_mask: Mask) -> Result<Self> {
        let b = box_from_mask(&gt_mask.probs, 0.5).ok_or_else(|| {
            Error::InvalidSequence(format!("frame {} has an empty ground-truth mask", frame.frame_index))
        })?;
        Ok(Self {
            frame,
            gt_mask,
            gt_center: b.center(),
            gt_size: b.size(),
            crop_center: b.center(),
            crop_size: b.size(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainSequence {
    frames: Vec<TrainFrame>,
}

impl TrainSequence {
    pub fn new(frames: Vec<TrainFrame>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidSequence(format!(
                "a training sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        if frames.windows(2).any(|w| w[1].frame.frame_index <= w[0].frame.frame_index) {
            return Err(Error::InvalidSequence("frame indices must be strictly increasing".into()));
        }
        Ok(Self { frames })
    }

    /// Pick `indices` out of a synthetic sequence.
    pub fn from_synthetic(seq: &SyntheticSequence, indices: &[usize]) -> Result<Self> {
        let frames = indices
            .iter()
            .map(|&i| {
                let frame = seq
                    .frames
                    .get(i)
                    .ok_or_else(|| Error::InvalidSequence(format!("frame {i} out of range")))?;
                TrainFrame::from_mask(frame.clone(), Mask::new(seq.masks[i].clone())?)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames)
    }

    /// Copy with the search regions of frames 1.. displaced by up to
    /// `center` target sizes and rescaled by up to `scale`. Frame 0 keeps the
    /// ground-truth placement, as at tracker initialization.
    pub fn jittered<R: Rng>(&self, rng: &mut R, center: f64, scale: f64) -> Self {
        let mut frames = self.frames.clone();
        for f in frames.iter_mut().skip(1) {
            let mut draw = |amp: f64| if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
            f.crop_center = [f.gt_center[0] + draw(center) * f.gt_size[0], f.gt_center[1] + draw(center) * f.gt_size[1]];
            let s = (1.0 + draw(scale)).max(0.1);
            f.crop_size = [f.gt_size[0] * s, f.gt_size[1] * s];
        }
        Self { frames }
    }

    pub fn frames(&self) -> &[TrainFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Everything the training losses and optimizer need besides weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub eta: f64,
    pub lambda_c: f64,
    pub fg_threshold: f64,
    /// Instance-learner iterations; the classification loss averages over
    /// all `n_iter + 1` iterates.
    pub n_iter: usize,
    pub seg_iter_init: usize,
    pub seg_iter_update: usize,
    pub seg_capacity: usize,
    pub seg_memory_lr: f64,
    pub area_factor: f64,
    pub out_resolution: [usize; 2],
    pub sigma_factor: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Hyperparams {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            eta: cfg.train.eta,
            lambda_c: cfg.inst.lambda_c,
            fg_threshold: cfg.inst.fg_threshold,
            n_iter: cfg.train.n_iter,
            seg_iter_init: cfg.train.seg_iter_init,
            seg_iter_update: cfg.train.seg_iter_update,
            seg_capacity: cfg.seg.capacity,
            seg_memory_lr: cfg.seg.learning_rate,
            area_factor: cfg.crop.area_factor,
            out_resolution: cfg.crop.out_resolution,
            sigma_factor: cfg.inst.sigma_factor,
            sigma_min: cfg.inst.sigma_min,
            sigma_max: cfg.inst.sigma_max,
            learning_rate: cfg.train.learning_rate,
            lr_decay: cfg.train.lr_decay,
            lr_milestones: cfg.train.lr_milestones.clone(),
            beta1: cfg.train.beta1,
            beta2: cfg.train.beta2,
            adam_eps: cfg.train.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta.is_nan() || self.eta < 0.0 {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.n_iter < 1 {
            return Err(Error::Config("n_iter must be >= 1".into()));
        }
        Ok(())
    }

    /// Step-decayed learning rate after `step` optimizer steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| step >= m).count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }

    fn inst_cfg(&self) -> crate::config::InstConfig {
        crate::config::InstConfig {
            sigma_factor: self.sigma_factor,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            ..Default::default()
        }
    }
}

/// Lovász hinge of decoder logits against a mask binarized at 0.5.
///
/// An empty ground truth has no Jaccard gradient to follow; every positive
/// prediction is then penalized through the mean soft-plus of the logits.
pub fn lovasz_loss<'t>(logits: Var<'t>, gt: &Array2<f64>) -> Var<'t> {
    let bin = gt.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    if bin.sum() == 0.0 {
        return logits.softplus().mean();
    }
    logits.lovasz_hinge(&bin.into_dyn())
}

/// Joint objective: segmentation loss plus weighted classification loss.
pub fn total_loss(seg: f64, clf: f64, eta: f64) -> f64 {
    seg + eta * clf
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameLoss {
    pub seg: f64,
    pub clf: f64,
    /// IoU of the predicted patch mask against ground truth.
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub seg_loss: f64,
    pub clf_loss: f64,
    pub total: f64,
    pub frames: Vec<FrameLoss>,
    pub mean_iou: f64,
    pub kappa_solves: usize,
    pub tau_solves: usize,
}

/// Switches for the forward pass over a sequence.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub conditioning: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { conditioning: true }
    }
}

/// Graph nodes of one sequence's losses.
pub struct SequenceGraph<'t> {
    pub seg_terms: Vec<Var<'t>>,
    pub clf_terms: Vec<Var<'t>>,
    pub ious: Vec<f64>,
    pub probs: Vec<Array2<f64>>,
    pub kappa_solves: usize,
    pub tau_solves: usize,
}

impl<'t> SequenceGraph<'t> {
    pub fn seg_loss(&self) -> Var<'t> {
        sum_vars(&self.seg_terms)
    }

    pub fn clf_loss(&self) -> Var<'t> {
        sum_vars(&self.clf_terms)
    }

    pub fn total(&self, eta: f64) -> Var<'t> {
        self.seg_loss().add(self.clf_loss().scale(eta))
    }

    pub fn report(&self, eta: f64) -> LossReport {
        let frames: Vec<FrameLoss> = self
            .seg_terms
            .iter()
            .zip(&self.clf_terms)
            .zip(&self.ious)
            .map(|((s, c), i)| FrameLoss {
                seg: s.item(),
                clf: c.item(),
                iou: *i,
            })
            .collect();
        let seg_loss = frames.iter().map(|f| f.seg).sum();
        let clf_loss = frames.iter().map(|f| f.clf).sum();
        LossReport {
            seg_loss,
            clf_loss,
            total: total_loss(seg_loss, clf_loss, eta),
            mean_iou: self.ious.iter().sum::<f64>() / self.ious.len().max(1) as f64,
            frames,
            kappa_solves: self.kappa_solves,
            tau_solves: self.tau_solves,
        }
    }
}

fn sum_vars<'t>(vars: &[Var<'t>]) -> Var<'t> {
    let (first, rest) = vars.split_first().expect("at least one term");
    rest.iter().fold(*first, |acc, v| acc.add(*v))
}

impl<'t> Net<'_, 't> {
    /// Run the within-sequence protocol and build every loss term.
    pub fn sequence_graph(&self, seq: &TrainSequence, hp: &Hyperparams, opts: ForwardOptions) -> Result<SequenceGraph<'t>> {
        hp.validate()?;
        let tape = self.tape();
        let [oh, ow] = hp.out_resolution;
        let inst_cfg = hp.inst_cfg();
        let clf_stride = self.cfg.clf_source_stride;

        struct Prepared<'t> {
            bb: crate::features::BackboneFeatures<'t>,
            xs: Var<'t>,
            xc: Var<'t>,
            gt: Array2<f64>,
            label: Array2<f64>,
        }
        let mut prepared = Vec::with_capacity(seq.len());
        for tf in seq.frames() {
            let patch = crop_search_region(&tf.frame, tf.crop_center, tf.crop_size, hp.area_factor, hp.out_resolution)?;
            let gt = crop_map(&tf.gt_mask.probs, &patch.to_image, oh, ow).mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            let bb = self.backbone_patch(&patch)?;
            let xs = self.seg_features(&bb)?;
            let xc = self.clf_features(&bb)?;
            let cs = xc.shape();
            let center = pixel_to_cell(patch.to_image.invert(tf.gt_center), clf_stride);
            let size = [tf.gt_size[0] / patch.to_image.scale[0], tf.gt_size[1] / patch.to_image.scale[1]];
            let sigma = label_sigma(size, clf_stride, &inst_cfg);
            let label = make_gaussian_label(center, sigma, (cs[1], cs[2]));
            prepared.push(Prepared { bb, xs, xc, gt, label });
        }

        let first = &prepared[0];
        let grid = (first.xs.shape()[1], first.xs.shape()[2]);
        let lambda_s = self.lambda_s();
        let k_s = self.cfg.seg_kernel;
        let (enc0, w0) = self.label_targets(&first.gt, grid);
        let mut memory = SampleMemory::new(hp.seg_capacity, hp.seg_memory_lr);
        memory.insert_initial(
            vec![SegVarSample {
                features: first.xs,
                encoding: enc0,
                weights: w0,
            }],
            0,
        );
        let solve_tau = |memory: &SampleMemory<SegVarSample<'t>>, tau: Var<'t>, n: usize| -> Result<Var<'t>> {
            let samples: Vec<_> = memory.iter().map(|e| (e.sample, e.weight)).collect();
            Ok(SegLeastSquares::new(&samples, lambda_s, k_s)?.solve(tau, n))
        };
        let tau0 = tape.constant(Array::zeros(IxDyn(&[
            self.cfg.encoding_dim,
            self.cfg.seg_channels,
            k_s,
            k_s,
        ])));
        let mut tau = solve_tau(&memory, tau0, hp.seg_iter_init)?;
        let mut tau_solves = 0;

        let k_c = self.cfg.clf_kernel;
        let clf_problem = InstLeastSquares::new(
            &[(
                ClfVarSample {
                    features: first.xc,
                    label: tape.constant(first.label.clone().into_dyn()),
                },
                1.0,
            )],
            hp.lambda_c,
            hp.fg_threshold,
            k_c,
        )?;
        let kappa0 = tape.constant(Array::zeros(IxDyn(&[1, self.cfg.clf_channels, k_c, k_c])));
        let iterates = clf_problem.solve(kappa0, hp.n_iter);
        let kappa = *iterates.last().expect("non-empty");

        let mut graph = SequenceGraph {
            seg_terms: Vec::new(),
            clf_terms: Vec::new(),
            ious: Vec::new(),
            probs: Vec::new(),
            kappa_solves: 1,
            tau_solves: 0,
        };
        for (j, p) in prepared.iter().enumerate().skip(1) {
            let label = tape.constant(p.label.clone().into_dyn().insert_axis(ndarray::Axis(0)));
            let fg = foreground(&label.value(), hp.fg_threshold);
            let cells = p.label.len() as f64;
            let clf_sum = sum_vars(
                &iterates
                    .iter()
                    .map(|k| {
                        let s = inst_model_apply_var(*k, p.xc);
                        hinge_residual_var(s, label, &fg).square().sum().scale(1.0 / cells)
                    })
                    .collect::<Vec<_>>(),
            );
            graph.clf_terms.push(clf_sum.scale(1.0 / hp.n_iter as f64));

            let scores = inst_model_apply_var(kappa, p.xc);
            let x_m = seg_model_apply_var(tau, p.xs);
            let x_f = if opts.conditioning {
                self.fuse(x_m, self.encode_scores(scores))?
            } else {
                x_m
            };
            let logits = self.decode(x_f, &p.bb)?;
            graph.seg_terms.push(lovasz_loss(logits, &p.gt));

            let probs = probabilities(&logits.value());
            graph.ious.push(mask_iou(&probs, &p.gt, 0.5)?);
            let (enc, w) = self.label_targets(&probs, grid);
            memory.insert(
                SegVarSample {
                    features: p.xs,
                    encoding: enc,
                    weights: w,
                },
                j,
            );
            tau = solve_tau(&memory, tau, hp.seg_iter_update)?;
            tau_solves += 1;
            graph.probs.push(probs);
        }
        graph.tau_solves = tau_solves;
        Ok(graph)
    }
}

/// Losses of one sequence without gradients.
pub fn sequence_losses(model: &Model, seq: &TrainSequence, hp: &Hyperparams) -> Result<LossReport> {
    let tape = Tape::new();
    let net = model.bind(&tape, false);
    Ok(net.sequence_graph(seq, hp, ForwardOptions::default())?.report(hp.eta))
}

pub fn seq_seg_loss(model: &Model, seq: &TrainSequence, hp: &Hyperparams) -> Result<f64> {
    Ok(sequence_losses(model, seq, hp)?.seg_loss)
}

pub fn seq_clf_loss(model: &Model, seq: &TrainSequence, hp: &Hyperparams) -> Result<f64> {
    Ok(sequence_losses(model, seq, hp)?.clf_loss)
}

pub type Grads = BTreeMap<String, Array>;

/// Losses and parameter gradients of the joint objective for one sequence.
pub fn sequence_gradients(model: &Model, seq: &TrainSequence, hp: &Hyperparams) -> Result<(LossReport, Grads)> {
    let tape = Tape::new();
    let net = model.bind(&tape, true);
    let graph = net.sequence_graph(seq, hp, ForwardOptions::default())?;
    let report = graph.report(hp.eta);
    if !report.total.is_finite() {
        return Ok((report, Grads::new()));
    }
    let grads = tape.backward(graph.total(hp.eta));
    Ok((report, net.p.gradients(&grads)))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Adam {
    pub step: usize,
    m: BTreeMap<String, Array>,
    v: BTreeMap<String, Array>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, model: &mut Model, grads: &Grads, hp: &Hyperparams) {
        let lr = hp.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (hp.beta1, hp.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, p) in model.params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Array::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *p)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + hp.adam_eps);
                });
        }
    }
}

/// One optimizer step on the batch-averaged joint loss.
///
/// A non-finite loss or gradient leaves the weights untouched and returns
/// [`Error::NonFinite`] with the per-sequence losses.
pub fn train_step(
    model: &mut Model,
    batch: &[TrainSequence],
    opt: &mut Adam,
    hp: &Hyperparams,
    mode: ExecMode,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::InvalidSequence("empty batch".into()));
    }
    let shared: &Model = model;
    let results = parallel::map(mode, batch, |seq| sequence_gradients(shared, seq, hp));
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let bad: Vec<String> = results
        .iter()
        .enumerate()
        .filter(|(_, (r, g))| !r.total.is_finite() || g.values().any(|a| a.iter().any(|v| !v.is_finite())))
        .map(|(i, (r, _))| format!("sequence {i}: seg {} clf {}", r.seg_loss, r.clf_loss))
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFinite(bad.join("; ")));
    }
    let mut grads = Grads::new();
    let mut report = LossReport::default();
    for (r, g) in results {
        for (name, a) in g {
            match grads.get_mut(&name) {
                Some(acc) => *acc += &a,
                None => {
                    grads.insert(name, a);
                }
            }
        }
        report.seg_loss += r.seg_loss / n;
        report.clf_loss += r.clf_loss / n;
        report.mean_iou += r.mean_iou / n;
        report.kappa_solves += r.kappa_solves;
        report.tau_solves += r.tau_solves;
        report.frames.extend(r.frames);
    }
    for a in grads.values_mut() {
        *a /= n;
    }
    report.total = total_loss(report.seg_loss, report.clf_loss, hp.eta);
    opt.update(model, &grads, hp);
    Ok(report)
}

/// Training sequences drawn from synthetic scenes with seeds
/// `cfg.seed .. cfg.seed + num_scenes`. With `shared_appearance` every scene
/// uses the appearance of `cfg.seed` and only the motion seed varies.
pub fn synthetic_pool(cfg: &Config) -> Result<Vec<TrainSequence>> {
    cfg.validate()?;
    let t = &cfg.train;
    if (t.seq_len - 1) * t.frame_gap >= cfg.synthetic.length {
        return Err(Error::Config(format!(
            "train: {} frames {} apart do not fit in synthetic.length = {}",
            t.seq_len, t.frame_gap, cfg.synthetic.length
        )));
    }
    let indices: Vec<usize> = (0..t.seq_len).map(|i| i * t.frame_gap).collect();
    (0..t.num_scenes as u64)
        .map(|i| {
            let motion = cfg.seed + i;
            let appearance = if t.shared_appearance { cfg.seed } else { motion };
            TrainSequence::from_synthetic(&gen_scene(&cfg.synthetic, appearance, motion)?, &indices)
        })
        .collect()
}

/// Outcome of a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainRun {
    pub reports: Vec<LossReport>,
    /// Steps dropped because the loss or a gradient was not finite.
    pub skipped: Vec<(usize, String)>,
    pub opt: Adam,
}

/// Run `cfg.train.steps` optimizer steps over `pool`, cycling through it in
/// batches and jittering the search regions with a generator seeded from
/// `cfg.seed`. Non-finite steps are skipped and recorded.
pub fn fit<F>(model: &mut Model, pool: &[TrainSequence], cfg: &Config, mode: ExecMode, mut on_step: F) -> Result<TrainRun>
where
    F: FnMut(usize, &LossReport),
{
    if pool.is_empty() {
        return Err(Error::InvalidSequence("empty training pool".into()));
    }
    let hp = Hyperparams::from_config(cfg);
    hp.validate()?;
    let t = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a69_7474_6572);
    let mut run = TrainRun::default();
    for step in 0..t.steps {
        let batch: Vec<TrainSequence> = (0..t.batch_size)
            .map(|b| pool[(step * t.batch_size + b) % pool.len()].jittered(&mut rng, t.center_jitter, t.scale_jitter))
            .collect();
        match train_step(model, &batch, &mut run.opt, &hp, mode) {
            Ok(report) => {
                on_step(step, &report);
                run.reports.push(report);
            }
            Err(Error::NonFinite(msg)) => run.skipped.push((step, msg)),
            Err(e) => return Err(e),
        }
    }
    Ok(run)
}
