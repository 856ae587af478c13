//! Instance branch: Gaussian labels, the hinge-like residual, and the
//! Gauss-Newton few-shot learner for the linear instance model.
//!
//! The objective is
//!
//! ```text
//! L(κ) = Σ_i w_i Σ_p r_p(T_κ(x_i), y_i)² + λ_c/2 ‖κ‖²
//! ```
//!
//! with `r = s − y` on foreground cells (`y ≥ fg_threshold`) and
//! `r = max(0, s)` elsewhere. Writing `J = fg + bg·[s > 0]`, the residual is
//! `J·s − fg·y`, so each Gauss-Newton step is a weighted ridge step with `J`
//! frozen at the current iterate.

use ndarray::{Array2, IxDyn};

use crate::autodiff::{Array, Im2Col, Tape, Var};
use crate::config::InstConfig;
use crate::error::{Error, Result};
use crate::memory::SampleMemory;
use crate::nn::{conv2d, expect_channels};
use crate::seg::{StepInfo, MIN_CURVATURE};

/// Parameters κ of the linear instance model, `1 × C_c × k × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClfModelParams {
    pub filter: Array,
}

impl ClfModelParams {
    pub fn zeros(channels: usize, kernel: usize) -> Self {
        Self {
            filter: Array::zeros(IxDyn(&[1, channels, kernel, kernel])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClfSample {
    /// `C_c × H_c × W_c`.
    pub features: Array,
    /// Gaussian label, `H_c × W_c`.
    pub label: Array2<f64>,
}

pub type ClfMemory = SampleMemory<ClfSample>;

/// `exp(−‖p − center‖² / 2σ²)` on an `h × w` grid of cell coordinates.
pub fn make_gaussian_label(center: [f64; 2], sigma: f64, shape: (usize, usize)) -> Array2<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    Array2::from_shape_fn(shape, |(r, c)| {
        let (dr, dc) = (r as f64 - center[0], c as f64 - center[1]);
        (-(dr * dr + dc * dc) * inv).exp()
    })
}

/// Label width in cells for a target of `size` patch pixels.
pub fn label_sigma(size: [f64; 2], stride: usize, cfg: &InstConfig) -> f64 {
    let s = cfg.sigma_factor * (size[0] * size[1]).max(0.0).sqrt() / stride as f64;
    s.clamp(cfg.sigma_min, cfg.sigma_max)
}

/// Patch pixel position (index coordinates) to feature-cell coordinates.
pub fn pixel_to_cell(p: [f64; 2], stride: usize) -> [f64; 2] {
    let s = stride as f64;
    [(p[0] + 0.5) / s - 0.5, (p[1] + 0.5) / s - 0.5]
}

/// Center of feature cell `(r, c)` in patch pixels.
pub fn cell_to_pixel(cell: (usize, usize), stride: usize) -> [f64; 2] {
    let s = stride as f64;
    [(cell.0 as f64 + 0.5) * s - 0.5, (cell.1 as f64 + 0.5) * s - 0.5]
}

pub fn hinge_residual(s: &Array2<f64>, y: &Array2<f64>, fg_threshold: f64) -> Array2<f64> {
    assert_eq!(s.dim(), y.dim(), "score and label shapes differ");
    let mut out = s.clone();
    ndarray::Zip::from(&mut out).and(y).for_each(|r, &yv| {
        *r = if yv >= fg_threshold { *r - yv } else { r.max(0.0) };
    });
    out
}

/// Hinge residual on the tape; `fg` is the constant foreground indicator.
pub fn hinge_residual_var<'t>(s: Var<'t>, y: Var<'t>, fg: &Array) -> Var<'t> {
    let tape = s.tape();
    let bg = fg.mapv(|f| 1.0 - f);
    let fgv = tape.constant(fg.clone());
    fgv.mul(s.sub(y)).add(tape.constant(bg).mul(s.relu()))
}

pub fn foreground(y: &Array, fg_threshold: f64) -> Array {
    y.mapv(|v| if v >= fg_threshold { 1.0 } else { 0.0 })
}

/// Apply T_κ: a same-size convolution with one output channel.
pub fn inst_model_apply_var<'t>(kappa: Var<'t>, x: Var<'t>) -> Var<'t> {
    let k = kappa.shape()[2];
    conv2d(x, kappa, None, Im2Col::same(k, 1))
}

pub fn inst_model_apply(kappa: &ClfModelParams, x_c: &Array) -> Result<Array2<f64>> {
    expect_channels("inst_model_apply", x_c, kappa.filter.shape()[1])?;
    let tape = Tape::new();
    let out = inst_model_apply_var(tape.constant(kappa.filter.clone()), tape.constant(x_c.clone()));
    let (h, w) = (x_c.shape()[1], x_c.shape()[2]);
    Ok((*out.value()).clone().into_shape_with_order((h, w)).expect("1×H×W"))
}

/// Maximum value and its location; ties go to the smallest row, then column.
pub fn peak_confidence(s: &Array2<f64>) -> (f64, (usize, usize)) {
    let mut best = (f64::NEG_INFINITY, (0, 0));
    for ((r, c), &v) in s.indexed_iter() {
        if v > best.0 {
            best = (v, (r, c));
        }
    }
    best
}

/// A memory sample placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ClfVarSample<'t> {
    pub features: Var<'t>,
    /// `H × W` or `1 × H × W`.
    pub label: Var<'t>,
}

pub struct InstLeastSquares<'t> {
    cols: Var<'t>,
    cols_t: Var<'t>,
    label: Var<'t>,
    fg: Array,
    weight: Var<'t>,
    lambda: f64,
    filter_shape: [usize; 4],
}

/// One Gauss-Newton step with the quadratic model values around its start.
#[derive(Clone, Copy, Debug)]
pub struct GnStepInfo {
    pub step: StepInfo,
    pub model_before: f64,
    pub model_after: f64,
}

impl<'t> InstLeastSquares<'t> {
    pub fn new(
        samples: &[(ClfVarSample<'t>, f64)],
        lambda: f64,
        fg_threshold: f64,
        kernel: usize,
    ) -> Result<Self> {
        let Some((first, _)) = samples.first() else {
            return Err(Error::EmptyMemory);
        };
        let tape = first.features.tape();
        let channels = first.features.shape()[0];
        let geom = Im2Col::same(kernel, 1);
        let mut cols = Vec::new();
        let mut labels = Vec::new();
        let mut weights = Vec::new();
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
            labels.push(s.label.reshape(&[1, n]));
            weights.push(Array::from_elem(IxDyn(&[1, n]), *w));
        }
        let cols = Var::concat(&cols, 1);
        let label = Var::concat(&labels, 1);
        let fg = foreground(&label.value(), fg_threshold);
        let views: Vec<_> = weights.iter().map(|w| w.view()).collect();
        let weight = ndarray::concatenate(ndarray::Axis(1), &views).expect("same rank");
        Ok(Self {
            cols_t: cols.t(),
            cols,
            label,
            fg,
            weight: tape.constant(weight),
            lambda,
            filter_shape: [1, channels, kernel, kernel],
        })
    }

    fn row_len(&self) -> usize {
        self.filter_shape[1] * self.filter_shape[2] * self.filter_shape[3]
    }

    pub fn filter_shape(&self) -> [usize; 4] {
        self.filter_shape
    }

    fn scores(&self, kappa: Var<'t>) -> Var<'t> {
        kappa.reshape(&[1, self.row_len()]).matmul(self.cols)
    }

    pub fn objective(&self, kappa: Var<'t>) -> Var<'t> {
        let r = hinge_residual_var(self.scores(kappa), self.label, &self.fg);
        let reg = kappa.square().sum().scale(0.5 * self.lambda);
        self.weight.mul(r.square()).sum().add(reg)
    }

    fn active(&self, s: &Array) -> Array {
        let mut j = self.fg.clone();
        ndarray::Zip::from(&mut j).and(s).for_each(|j, &sv| {
            if *j == 0.0 && sv > 0.0 {
                *j = 1.0;
            }
        });
        j
    }

    /// One steepest-descent step on the Gauss-Newton model at `kappa`.
    pub fn step(&self, kappa: Var<'t>) -> (Var<'t>, GnStepInfo) {
        let tape = kappa.tape();
        let s = self.scores(kappa);
        let j = tape.constant(self.active(&s.value()));
        let fgy = tape.constant(self.fg.clone()).mul(self.label);
        let r = j.mul(s).sub(fgy);
        let k_mat = kappa.reshape(&[1, self.row_len()]);
        let loss = self
            .weight
            .mul(r.square())
            .sum()
            .add(kappa.square().sum().scale(0.5 * self.lambda));
        let g_mat = self
            .weight
            .mul(j)
            .mul(r)
            .matmul(self.cols_t)
            .scale(2.0)
            .add(k_mat.scale(self.lambda));
        let gg = g_mat.square().sum();
        let jq = j.mul(g_mat.matmul(self.cols));
        let ghg = self
            .weight
            .mul(jq.square())
            .sum()
            .scale(2.0)
            .add(gg.scale(self.lambda));
        let (lv, ggv, ghgv) = (loss.item(), gg.item(), ghg.item());
        if ggv == 0.0 || ghgv <= MIN_CURVATURE {
            let info = GnStepInfo {
                step: StepInfo {
                    alpha: 0.0,
                    grad_norm_sq: ggv,
                    curvature: ghgv,
                    skipped: true,
                },
                model_before: lv,
                model_after: lv,
            };
            return (kappa, info);
        }
        let alpha = gg.div(ghg);
        let a = alpha.item();
        let info = GnStepInfo {
            step: StepInfo {
                alpha: a,
                grad_norm_sq: ggv,
                curvature: ghgv,
                skipped: false,
            },
            model_before: lv,
            model_after: lv - a * ggv + 0.5 * a * a * ghgv,
        };
        let g = g_mat.reshape(&self.filter_shape);
        (kappa.sub(g.mul(alpha)), info)
    }

    /// All iterates κ_0 … κ_n.
    pub fn solve(&self, kappa0: Var<'t>, n_iter: usize) -> Vec<Var<'t>> {
        let mut iterates = vec![kappa0];
        for _ in 0..n_iter {
            let next = self.step(*iterates.last().expect("non-empty")).0;
            iterates.push(next);
        }
        iterates
    }
}

fn memory_problem<'t>(tape: &'t Tape, memory: &ClfMemory, lambda: f64, fg_threshold: f64, kernel: usize) -> Result<InstLeastSquares<'t>> {
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let samples: Vec<_> = memory
        .iter()
        .map(|e| {
            (
                ClfVarSample {
                    features: tape.constant(e.sample.features.clone()),
                    label: tape.constant(e.sample.label.clone().into_dyn()),
                },
                e.weight,
            )
        })
        .collect();
    InstLeastSquares::new(&samples, lambda, fg_threshold, kernel)
}

/// Objective of the instance learner at `kappa` over `memory`.
pub fn inst_objective(kappa: &ClfModelParams, memory: &ClfMemory, lambda_c: f64, fg_threshold: f64) -> Result<f64> {
    let tape = Tape::new();
    let p = memory_problem(&tape, memory, lambda_c, fg_threshold, kappa.filter.shape()[2])?;
    Ok(p.objective(tape.constant(kappa.filter.clone())).item())
}

/// Result of an instance-learner run.
#[derive(Clone, Debug)]
pub struct InstSolve {
    pub kappa: ClfModelParams,
    pub intermediates: Vec<ClfModelParams>,
    pub steps: Vec<GnStepInfo>,
}

pub fn solve_inst_model(
    memory: &ClfMemory,
    kappa_init: &ClfModelParams,
    n_iter: usize,
    lambda_c: f64,
    fg_threshold: f64,
) -> Result<InstSolve> {
    let tape = Tape::new();
    let p = memory_problem(&tape, memory, lambda_c, fg_threshold, kappa_init.filter.shape()[2])?;
    if kappa_init.filter.shape() != p.filter_shape() {
        return Err(Error::Config(format!(
            "kappa shape {:?} does not match memory {:?}",
            kappa_init.filter.shape(),
            p.filter_shape()
        )));
    }
    let mut kappa = tape.constant(kappa_init.filter.clone());
    let mut intermediates = vec![kappa_init.clone()];
    let mut steps = Vec::with_capacity(n_iter);
    for _ in 0..n_iter {
        let (next, info) = p.step(kappa);
        kappa = next;
        steps.push(info);
        intermediates.push(ClfModelParams {
            filter: (*kappa.value()).clone(),
        });
    }
    Ok(InstSolve {
        kappa: intermediates.last().expect("non-empty").clone(),
        intermediates,
        steps,
    })
}
