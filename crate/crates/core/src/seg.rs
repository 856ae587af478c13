//! Segmentation branch: label encoder, sample-weight predictor, the few-shot
//! learner for the linear segmentation model, and that model itself.
//!
//! The learner minimizes
//!
//! ```text
//! 1/2 Σ_i w_i ‖W(y_i) · (T_τ(x_i) − E(y_i))‖² + λ_s/2 ‖τ‖²
//! ```
//!
//! by steepest descent with the exact step length of the quadratic,
//! `α = ‖g‖² / gᵀHg`, where `gᵀHg` is evaluated with one extra filter
//! application instead of forming `H`.

use ndarray::{Array2, IxDyn};
use rand::Rng;

use crate::autodiff::{Array, Im2Col, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::memory::SampleMemory;
use crate::model::Net;
use crate::nn::{conv, conv2d, expect_channels, ParamStore};

/// Steps with curvature below this are skipped.
pub const MIN_CURVATURE: f64 = 1e-12;

/// Per-pixel target probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub probs: Array2<f64>,
}

impl Mask {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::InvalidState("mask values must be finite and in [0, 1]".into()));
        }
        Ok(Self { probs })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            probs: Array2::zeros((h, w)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.probs.dim()
    }

    pub fn count_at_least(&self, threshold: f64) -> usize {
        self.probs.iter().filter(|&&p| p >= threshold).count()
    }

    pub fn binarized(&self, threshold: f64) -> Array2<f64> {
        self.probs.mapv(|p| if p >= threshold { 1.0 } else { 0.0 })
    }
}

/// Parameters τ of the linear segmentation model, `E × C_s × k × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModelParams {
    pub filter: Array,
}

impl SegModelParams {
    pub fn zeros(enc_dim: usize, channels: usize, kernel: usize) -> Self {
        Self {
            filter: Array::zeros(IxDyn(&[enc_dim, channels, kernel, kernel])),
        }
    }
}

/// Mask encoding x_m, `E × H_s × W_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskEncoding(pub Array);

/// One segmentation-memory sample: features, the mask it was labelled with,
/// and the label encoding / per-pixel weights derived from that mask.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub features: Array,
    pub label: Mask,
    pub encoding: Array,
    /// `H_s × W_s`, non-negative.
    pub weights: Array,
}

pub type SegMemory = SampleMemory<SegSample>;

/// Insert a sample, evicting the oldest unpinned entry when full.
pub fn seg_memory_insert(memory: &mut SegMemory, sample: SegSample, frame_index: usize) {
    memory.insert(sample, frame_index);
}

/// Block-average a patch-resolution mask down to `out_h × out_w`.
pub fn pool_label(label: &Array2<f64>, out_h: usize, out_w: usize) -> Array {
    let (h, w) = label.dim();
    let (sy, sx) = (h / out_h, w / out_w);
    let mut out = Array::zeros(IxDyn(&[1, out_h, out_w]));
    let norm = (sy * sx) as f64;
    for r in 0..out_h {
        for c in 0..out_w {
            let mut acc = 0.0;
            for y in r * sy..(r + 1) * sy {
                for x in c * sx..(c + 1) * sx {
                    acc += label[[y, x]];
                }
            }
            out[[0, r, c]] = acc / norm;
        }
    }
    out
}

fn inv_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

pub(crate) fn init_params<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let h = cfg.label_hidden;
    store.init_conv(rng, "label_enc.0", h, 1, 3, true, 1.0);
    store.init_conv(rng, "label_enc.1", cfg.encoding_dim, h, 3, true, 1.0);
    store.init_conv(rng, "label_weight.0", h, 1, 3, true, 1.0);
    store.init_conv(rng, "label_weight.1", 1, h, 3, true, 0.1);
    store
        .get_mut("label_weight.1.b")
        .expect("bias just created")
        .fill(inv_softplus(1.0));
    store.insert(
        "seg.lambda_raw",
        Array::from_elem(IxDyn(&[]), inv_softplus(cfg.init_lambda_s)),
    );
}

impl<'t> Net<'_, 't> {
    /// Label encoding E(y) from a pooled `1 × H_s × W_s` label.
    pub fn label_encoding(&self, pooled: Var<'t>) -> Var<'t> {
        let h = conv(&self.p, "label_enc.0", pooled, 1).relu();
        conv(&self.p, "label_enc.1", h, 1)
    }

    /// Non-negative per-pixel weights W(y), `1 × H_s × W_s`.
    pub fn label_weights(&self, pooled: Var<'t>) -> Var<'t> {
        let h = conv(&self.p, "label_weight.0", pooled, 1).relu();
        conv(&self.p, "label_weight.1", h, 1).softplus()
    }

    /// Learnable regularizer λ_s > 0.
    pub fn lambda_s(&self) -> Var<'t> {
        self.p.get("seg.lambda_raw").softplus()
    }

    /// Encoding and weights for a patch-resolution label at the given grid.
    pub fn label_targets(&self, label: &Array2<f64>, grid: (usize, usize)) -> (Var<'t>, Var<'t>) {
        let pooled = self.tape().constant(pool_label(label, grid.0, grid.1));
        (self.label_encoding(pooled), self.label_weights(pooled))
    }

    /// Build a memory sample from plain features and a label mask.
    pub fn make_seg_sample(&self, features: Array, label: Mask) -> SegSample {
        let grid = (features.shape()[1], features.shape()[2]);
        let (enc, w) = self.label_targets(&label.probs, grid);
        let weights = (*w.value())
            .clone()
            .into_shape_with_order(IxDyn(&[grid.0, grid.1]))
            .expect("weights are 1×H×W");
        SegSample {
            features,
            label,
            encoding: (*enc.value()).clone(),
            weights,
        }
    }
}

/// Apply T_τ: a same-size convolution of `x` (`C × H × W`) with `tau`.
pub fn seg_model_apply_var<'t>(tau: Var<'t>, x: Var<'t>) -> Var<'t> {
    let k = tau.shape()[2];
    conv2d(x, tau, None, Im2Col::same(k, 1))
}

pub fn seg_model_apply(tau: &SegModelParams, x_s: &Array) -> Result<MaskEncoding> {
    expect_channels("seg_model_apply", x_s, tau.filter.shape()[1])?;
    let tape = Tape::new();
    let out = seg_model_apply_var(tape.constant(tau.filter.clone()), tape.constant(x_s.clone()));
    Ok(MaskEncoding((*out.value()).clone()))
}

/// A memory sample placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SegVarSample<'t> {
    pub features: Var<'t>,
    pub encoding: Var<'t>,
    /// `1 × H × W` (or `H × W`) per-pixel weights.
    pub weights: Var<'t>,
}

/// Outcome of one steepest-descent step.
#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub alpha: f64,
    pub grad_norm_sq: f64,
    pub curvature: f64,
    pub skipped: bool,
}

/// The memory objective with all samples stacked column-wise.
pub struct SegLeastSquares<'t> {
    cols: Var<'t>,
    cols_t: Var<'t>,
    target: Var<'t>,
    weight_sq: Var<'t>,
    lambda: Var<'t>,
    filter_shape: [usize; 4],
}

impl<'t> SegLeastSquares<'t> {
    /// `samples` pairs each tape sample with its memory weight.
    pub fn new(samples: &[(SegVarSample<'t>, f64)], lambda: Var<'t>, kernel: usize) -> Result<Self> {
        let Some((first, _)) = samples.first() else {
            return Err(Error::EmptyMemory);
        };
        let fshape = first.features.shape();
        let enc_dim = first.encoding.shape()[0];
        let channels = fshape[0];
        let geom = Im2Col::same(kernel, 1);
        let mut cols = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        let mut weights = Vec::with_capacity(samples.len());
        for (s, w) in samples {
            let shape = s.features.shape();
            if shape[0] != channels {
                return Err(Error::Config(format!(
                    "memory sample has {} channels, expected {channels}",
                    shape[0]
                )));
            }
            let n = shape[1] * shape[2];
            cols.push(s.features.im2col(geom));
            targets.push(s.encoding.reshape(&[enc_dim, n]));
            weights.push(s.weights.square().reshape(&[1, n]).scale(*w));
        }
        let cols = Var::concat(&cols, 1);
        Ok(Self {
            cols_t: cols.t(),
            cols,
            target: Var::concat(&targets, 1),
            weight_sq: Var::concat(&weights, 1),
            lambda,
            filter_shape: [enc_dim, channels, kernel, kernel],
        })
    }

    fn rows(&self) -> usize {
        self.filter_shape[0]
    }

    fn row_len(&self) -> usize {
        self.filter_shape[1] * self.filter_shape[2] * self.filter_shape[3]
    }

    pub fn filter_shape(&self) -> [usize; 4] {
        self.filter_shape
    }

    fn residual(&self, tau_mat: Var<'t>) -> Var<'t> {
        tau_mat.matmul(self.cols).sub(self.target)
    }

    pub fn objective(&self, tau: Var<'t>) -> Var<'t> {
        let tau_mat = tau.reshape(&[self.rows(), self.row_len()]);
        let r = self.residual(tau_mat);
        let data = self.weight_sq.mul(r.square()).sum().scale(0.5);
        let reg = self.lambda.mul(tau.square().sum()).scale(0.5);
        data.add(reg)
    }

    pub fn gradient(&self, tau: Var<'t>) -> Var<'t> {
        let tau_mat = tau.reshape(&[self.rows(), self.row_len()]);
        let r = self.residual(tau_mat);
        self.weight_sq
            .mul(r)
            .matmul(self.cols_t)
            .add(self.lambda.mul(tau_mat))
            .reshape(&self.filter_shape)
    }

    pub fn step(&self, tau: Var<'t>) -> (Var<'t>, StepInfo) {
        let g = self.gradient(tau);
        let g_mat = g.reshape(&[self.rows(), self.row_len()]);
        let gg = g.square().sum();
        let hg = g_mat.matmul(self.cols);
        let ghg = self
            .weight_sq
            .mul(hg.square())
            .sum()
            .add(self.lambda.mul(gg));
        let (ggv, ghgv) = (gg.item(), ghg.item());
        if ggv == 0.0 || ghgv <= MIN_CURVATURE {
            let info = StepInfo {
                alpha: 0.0,
                grad_norm_sq: ggv,
                curvature: ghgv,
                skipped: true,
            };
            return (tau, info);
        }
        let alpha = gg.div(ghg);
        let info = StepInfo {
            alpha: alpha.item(),
            grad_norm_sq: ggv,
            curvature: ghgv,
            skipped: false,
        };
        (tau.sub(g.mul(alpha)), info)
    }

    pub fn solve(&self, tau0: Var<'t>, n_iter: usize) -> Var<'t> {
        (0..n_iter).fold(tau0, |tau, _| self.step(tau).0)
    }
}

fn memory_problem<'t>(tape: &'t Tape, memory: &SegMemory, lambda_s: f64, kernel: usize) -> Result<SegLeastSquares<'t>> {
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let samples: Vec<(SegVarSample<'t>, f64)> = memory
        .iter()
        .map(|e| {
            (
                SegVarSample {
                    features: tape.constant(e.sample.features.clone()),
                    encoding: tape.constant(e.sample.encoding.clone()),
                    weights: tape.constant(e.sample.weights.clone()),
                },
                e.weight,
            )
        })
        .collect();
    SegLeastSquares::new(&samples, tape.scalar(lambda_s), kernel)
}

pub fn seg_objective(tau: &SegModelParams, memory: &SegMemory, lambda_s: f64) -> Result<f64> {
    let tape = Tape::new();
    let problem = memory_problem(&tape, memory, lambda_s, tau.filter.shape()[2])?;
    Ok(problem.objective(tape.constant(tau.filter.clone())).item())
}

/// Run `n_iter` steepest-descent steps from `tau_init`.
pub fn solve_seg_model(
    memory: &SegMemory,
    tau_init: &SegModelParams,
    n_iter: usize,
    lambda_s: f64,
) -> Result<SegModelParams> {
    Ok(solve_seg_model_traced(memory, tau_init, n_iter, lambda_s)?.0)
}

/// As [`solve_seg_model`], also returning the objective before every step
/// and after the last one.
pub fn solve_seg_model_traced(
    memory: &SegMemory,
    tau_init: &SegModelParams,
    n_iter: usize,
    lambda_s: f64,
) -> Result<(SegModelParams, Vec<f64>)> {
    let tape = Tape::new();
    let problem = memory_problem(&tape, memory, lambda_s, tau_init.filter.shape()[2])?;
    if tau_init.filter.shape() != problem.filter_shape() {
        return Err(Error::Config(format!(
            "tau shape {:?} does not match memory {:?}",
            tau_init.filter.shape(),
            problem.filter_shape()
        )));
    }
    let mut tau = tape.constant(tau_init.filter.clone());
    let mut trace = vec![problem.objective(tau).item()];
    for _ in 0..n_iter {
        tau = problem.step(tau).0;
        trace.push(problem.objective(tau).item());
    }
    Ok((
        SegModelParams {
            filter: (*tau.value()).clone(),
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{max_rel_err, patch_rows, weighted_ridge};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn sample(features: Array, encoding: Array, weights: Array) -> SegSample {
        let (h, w) = (features.shape()[1], features.shape()[2]);
        SegSample {
            features,
            label: Mask::zeros(h, w),
            encoding,
            weights,
        }
    }

    fn memory_of(samples: Vec<SegSample>) -> SegMemory {
        let mut m = SegMemory::new(32, 0.1);
        m.insert_initial(samples, 0);
        m
    }

    fn scalar_instance() -> SegMemory {
        memory_of(vec![sample(
            array![[[2.0]]].into_dyn(),
            array![[[4.0]]].into_dyn(),
            array![[1.0]].into_dyn(),
        )])
    }

    #[test]
    fn zero_filter_and_zero_targets_give_zero_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array::from_shape_simple_fn(IxDyn(&[2, 3, 3]), || rng.random_range(-1.0..1.0));
        let m = memory_of(vec![sample(x, Array::zeros(IxDyn(&[2, 3, 3])), Array::ones(IxDyn(&[3, 3])))]);
        let tau = SegModelParams::zeros(2, 2, 3);
        assert_eq!(seg_objective(&tau, &m, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn scalar_objective_by_hand() {
        let m = scalar_instance();
        let tau = SegModelParams {
            filter: array![[[[1.0]]]].into_dyn(),
        };
        assert_eq!(seg_objective(&tau, &m, 0.0).unwrap(), 2.0);
    }

    #[test]
    fn regularizer_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x = Array::from_shape_simple_fn(IxDyn(&[3, 4, 4]), || rng.random_range(-1.0..1.0));
            let e = Array::from_shape_simple_fn(IxDyn(&[2, 4, 4]), || rng.random_range(-1.0..1.0));
            let w = Array::from_shape_simple_fn(IxDyn(&[4, 4]), || rng.random_range(0.0..2.0));
            let tau = SegModelParams {
                filter: Array::from_shape_simple_fn(IxDyn(&[2, 3, 3, 3]), || rng.random_range(-1.0..1.0)),
            };
            let lambda = rng.random_range(0.01..2.0);
            let obj = seg_objective(&tau, &memory_of(vec![sample(x, e, w)]), lambda).unwrap();
            let reg = 0.5 * lambda * tau.filter.iter().map(|v| v * v).sum::<f64>();
            assert!(obj >= reg);
        }
    }

    #[test]
    fn empty_memory_is_an_error() {
        let m = SegMemory::new(4, 0.1);
        let tau = SegModelParams::zeros(1, 1, 1);
        assert!(matches!(seg_objective(&tau, &m, 0.1), Err(Error::EmptyMemory)));
        assert!(matches!(solve_seg_model(&m, &tau, 3, 0.1), Err(Error::EmptyMemory)));
    }

    #[test]
    fn zero_iterations_is_identity() {
        let m = scalar_instance();
        let tau = SegModelParams {
            filter: array![[[[0.7]]]].into_dyn(),
        };
        assert_eq!(solve_seg_model(&m, &tau, 0, 0.0).unwrap(), tau);
    }

    #[test]
    fn scalar_instance_converges() {
        let m = scalar_instance();
        let tau = solve_seg_model(&m, &SegModelParams::zeros(1, 1, 1), 10, 0.0).unwrap();
        assert!((tau.filter[[0, 0, 0, 0]] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_curvature_skips_step() {
        // All-zero features: gradient is λτ and curvature is λ‖g‖²; with λ = 0
        // the gradient vanishes and the step is skipped.
        let m = memory_of(vec![sample(
            Array::zeros(IxDyn(&[1, 2, 2])),
            Array::ones(IxDyn(&[1, 2, 2])),
            Array::ones(IxDyn(&[2, 2])),
        )]);
        let tau0 = SegModelParams {
            filter: Array::from_elem(IxDyn(&[1, 1, 3, 3]), 0.3),
        };
        let tape = Tape::new();
        let p = memory_problem(&tape, &m, 0.0, 3).unwrap();
        let (tau, info) = p.step(tape.constant(tau0.filter.clone()));
        assert!(info.skipped);
        assert_eq!(*tau.value(), tau0.filter);
    }

    #[test]
    fn apply_scalar_linear_and_zero() {
        let tau = SegModelParams {
            filter: array![[[[3.0]]]].into_dyn(),
        };
        let out = seg_model_apply(&tau, &array![[[2.0]]].into_dyn()).unwrap();
        assert_eq!(out.0[[0, 0, 0]], 6.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand = |s: &[usize]| Array::from_shape_simple_fn(IxDyn(s), || rng.random_range(-1.0..1.0));
        let tau = SegModelParams { filter: rand(&[4, 3, 3, 3]) };
        let (x, y) = (rand(&[3, 5, 7]), rand(&[3, 5, 7]));
        let (a, b) = (0.7, -1.3);
        let lhs = seg_model_apply(&tau, &(&x * a + &y * b)).unwrap().0;
        let rhs = seg_model_apply(&tau, &x).unwrap().0 * a + seg_model_apply(&tau, &y).unwrap().0 * b;
        assert!(lhs.iter().zip(rhs.iter()).all(|(l, r)| (l - r).abs() < 1e-6));
        let zero = seg_model_apply(&SegModelParams::zeros(4, 3, 3), &x).unwrap().0;
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(matches!(seg_model_apply(&tau, &rand(&[2, 5, 7])), Err(Error::Config(_))));
    }

    #[test]
    fn pooling_averages_blocks() {
        let mut label = Array2::zeros((32, 32));
        label.slice_mut(ndarray::s![0..16, 0..8]).fill(1.0);
        let p = pool_label(&label, 2, 2);
        assert_eq!(p[[0, 0, 0]], 0.5);
        assert_eq!(p[[0, 1, 1]], 0.0);
    }

    #[test]
    fn label_weights_are_non_negative() {
        let model = crate::model::Model::new(&ModelConfig::default(), 5);
        let tape = Tape::new();
        let net = model.bind(&tape, false);
        let mut label = Array2::zeros((96, 160));
        label.slice_mut(ndarray::s![30..60, 50..90]).fill(1.0);
        let s = net.make_seg_sample(Array::zeros(IxDyn(&[16, 6, 10])), Mask::new(label).unwrap());
        assert_eq!(s.encoding.shape(), &[16, 6, 10]);
        assert!(s.weights.iter().all(|&w| w >= 0.0 && w.is_finite()));
        assert!(net.lambda_s().item() > 0.0);
    }

    fn random_instance(seed: u64) -> (SegMemory, usize, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, e, k) = (2, 2, 3);
        let n = 5;
        let samples = (0..n)
            .map(|_| {
                let mut rand = |s: &[usize], lo: f64| Array::from_shape_simple_fn(IxDyn(s), || rng.random_range(lo..1.0));
                sample(rand(&[c, 5, 5], -1.0), rand(&[e, 5, 5], -1.0), rand(&[5, 5], 0.2))
            })
            .collect();
        (memory_of(samples), k, 0.1)
    }

    fn ridge_oracle(m: &SegMemory, k: usize, lambda: f64) -> Vec<f64> {
        let enc_dim = m.entries()[0].sample.encoding.shape()[0];
        let mut out = Vec::new();
        for e in 0..enc_dim {
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            let mut weights = Vec::new();
            for entry in m.iter() {
                let s = &entry.sample;
                let enc = s.encoding.index_axis(ndarray::Axis(0), e);
                for ((row, t), w) in patch_rows(&s.features, k).into_iter().zip(enc.iter()).zip(s.weights.iter()) {
                    rows.push(row);
                    targets.push(*t);
                    weights.push(entry.weight * w * w);
                }
            }
            out.extend(weighted_ridge(&rows, &targets, &weights, lambda));
        }
        out
    }

    #[test]
    fn matches_weighted_ridge_closed_form() {
        for seed in 0..20 {
            let (m, k, lambda) = random_instance(seed);
            let tau = solve_seg_model(&m, &SegModelParams::zeros(2, 2, k), 50, lambda).unwrap();
            let got: Vec<f64> = tau.filter.iter().copied().collect();
            assert!(max_rel_err(&got, &ridge_oracle(&m, k, lambda)) < 1e-4, "seed {seed}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for seed in 0..5 {
            let (m, k, lambda) = random_instance(100 + seed);
            let tau = Array::from_shape_simple_fn(IxDyn(&[2, 2, k, k]), || rng.random_range(-1.0..1.0));
            let tape = Tape::new();
            let p = memory_problem(&tape, &m, lambda, k).unwrap();
            let g = p.gradient(tape.constant(tau.clone())).value();
            let eps = 1e-4;
            for idx in [[0, 0, 0, 0], [1, 1, 2, 1], [0, 1, 1, 1]] {
                let mut plus = tau.clone();
                plus[&idx[..]] += eps;
                let mut minus = tau.clone();
                minus[&idx[..]] -= eps;
                let f = |t: Array| seg_objective(&SegModelParams { filter: t }, &m, lambda).unwrap();
                let fd = (f(plus) - f(minus)) / (2.0 * eps);
                let an = g[&idx[..]];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "fd {fd} an {an}");
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]
        #[test]
        fn objective_never_increases(seed in 0u64..1_000_000) {
            let (m, k, lambda) = random_instance(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tau0 = SegModelParams {
                filter: Array::from_shape_simple_fn(IxDyn(&[2, 2, k, k]), || rng.random_range(-1.0..1.0)),
            };
            let (_, trace) = solve_seg_model_traced(&m, &tau0, 10, lambda).unwrap();
            for w in trace.windows(2) {
                proptest::prop_assert!(w[1] <= w[0] + 1e-9);
            }
        }
    }
}
