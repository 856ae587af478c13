//! Batch evaluation of a tracker over many sequences and the inference
//! ablation sweeps built on it.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport, SequenceResult, SyntheticSequence};
use crate::features::Frame;
use crate::model::Model;
use crate::parallel::{self, ExecMode};
use crate::seg::Mask;
use crate::tracker::{FrameOutput, InitTarget, Tracker};

/// A sequence with everything needed to score a tracker on it.
#[derive(Clone, Debug)]
pub struct EvalSequence {
    pub name: String,
    pub frames: Vec<Frame>,
    pub init: InitTarget,
    pub gt_boxes: Vec<Option<BBox>>,
    pub gt_masks: Option<Vec<Array2<f64>>>,
}

impl EvalSequence {
    /// Initialized from the first ground-truth mask.
    pub fn from_synthetic(name: impl Into<String>, seq: &SyntheticSequence) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            frames: seq.frames.clone(),
            init: InitTarget::Mask(Mask::new(seq.masks[0].clone())?),
            gt_boxes: seq.boxes.clone(),
            gt_masks: Some(seq.masks.clone()),
        })
    }
}

/// Track one sequence and pair the predictions with its ground truth.
pub fn track_one(model: &Model, cfg: &Config, seq: &EvalSequence) -> Result<(SequenceResult, Vec<FrameOutput>)> {
    let outputs = Tracker::new(model, cfg.clone()).run_sequence(&seq.frames, &seq.init, &[])?;
    let mut result = SequenceResult::new(outputs.iter().map(|o| o.bbox).collect(), seq.gt_boxes.clone())?;
    if let Some(gt) = &seq.gt_masks {
        result.pred_masks = Some(outputs.iter().map(|o| o.mask.probs.clone()).collect());
        result.gt_masks = Some(gt.clone());
    }
    Ok((result, outputs))
}

/// Track every sequence; sequences fan out across threads in parallel mode
/// and results keep input order.
pub fn track_all(model: &Model, cfg: &Config, seqs: &[EvalSequence], mode: ExecMode) -> Result<Vec<SequenceResult>> {
    parallel::map(mode, seqs, |s| track_one(model, cfg, s).map(|(r, _)| r))
        .into_iter()
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    Conditioning,
    Fallback,
    Tsc,
    Full,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditioning" => Ok(Self::Conditioning),
            "fallback" => Ok(Self::Fallback),
            "tsc" => Ok(Self::Tsc),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?}; expected conditioning, fallback, tsc or full"
            ))),
        }
    }
}

pub const TSC_GRID: [f64; 3] = [0.2, 0.3, 0.4];

/// One tracker configuration in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub conditioning: bool,
    pub fallback: bool,
    pub t_sc: f64,
}

impl Variant {
    pub fn apply(&self, cfg: &Config) -> Config {
        let mut c = cfg.clone();
        c.tracker.conditioning = self.conditioning;
        c.tracker.fallback = self.fallback;
        c.tracker.t_sc = self.t_sc;
        c
    }
}

/// Rows of a sweep. Axes other than the swept one keep `base` settings.
pub fn variants(axis: AblationAxis, base: &Config) -> Vec<Variant> {
    let b = Variant {
        conditioning: base.tracker.conditioning,
        fallback: base.tracker.fallback,
        t_sc: base.tracker.t_sc,
    };
    match axis {
        AblationAxis::Conditioning => [false, true].map(|conditioning| Variant { conditioning, ..b }).to_vec(),
        AblationAxis::Fallback => [false, true].map(|fallback| Variant { fallback, ..b }).to_vec(),
        AblationAxis::Tsc => TSC_GRID.map(|t_sc| Variant { t_sc, ..b }).to_vec(),
        AblationAxis::Full => {
            let mut v = Vec::new();
            for conditioning in [false, true] {
                for fallback in [false, true] {
                    for t_sc in TSC_GRID {
                        v.push(Variant {
                            conditioning,
                            fallback,
                            t_sc,
                        });
                    }
                }
            }
            v
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

impl AblationTable {
    /// Plain-text table, one row per variant, scores in percent.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:<8} {:>5} | {:>6} {:>6} {:>6}", "conditioning", "fallback", "t_sc", "AUC", "P", "NP");
        let _ = writeln!(s, "{}", "-".repeat(52));
        for r in &self.rows {
            let v = r.variant;
            let _ = writeln!(
                s,
                "{:<12} {:<8} {:>5.2} | {:>6.1} {:>6.1} {:>6.1}",
                mark(v.conditioning),
                mark(v.fallback),
                v.t_sc,
                100.0 * r.report.auc,
                100.0 * r.report.precision,
                100.0 * r.report.norm_precision
            );
        }
        s
    }
}

/// Evaluate every variant of `axis` on `seqs`.
pub fn run_ablation(
    model: &Model,
    base: &Config,
    seqs: &[EvalSequence],
    axis: AblationAxis,
    mode: ExecMode,
) -> Result<AblationTable> {
    if seqs.is_empty() {
        return Err(Error::InvalidSequence("no sequences to evaluate".into()));
    }
    let rows = variants(axis, base)
        .into_iter()
        .map(|variant| {
            let results = track_all(model, &variant.apply(base), seqs, mode)?;
            Ok(AblationRow {
                variant,
                report: evaluate(&results)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { axis, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::gen_synthetic_sequence;

    #[test]
    fn axes_and_row_counts() {
        let cfg = Config::default();
        assert_eq!("tsc".parse::<AblationAxis>().unwrap(), AblationAxis::Tsc);
        assert!("depth".parse::<AblationAxis>().is_err());
        let tsc = variants(AblationAxis::Tsc, &cfg);
        assert_eq!(tsc.iter().map(|v| v.t_sc).collect::<Vec<_>>(), vec![0.2, 0.3, 0.4]);
        assert!(tsc.iter().all(|v| v.fallback && v.conditioning));
        let fb = variants(AblationAxis::Fallback, &cfg);
        assert_eq!(fb.iter().map(|v| v.fallback).collect::<Vec<_>>(), vec![false, true]);
        assert!(fb.iter().all(|v| v.t_sc == 0.3));
        assert_eq!(variants(AblationAxis::Conditioning, &cfg).len(), 2);
        assert_eq!(variants(AblationAxis::Full, &cfg).len(), 12);
    }

    #[test]
    fn small_sweep_renders_one_line_per_row() {
        let mut cfg = Config::default();
        cfg.crop.out_resolution = [64, 64];
        cfg.synthetic.frame_size = [64, 64];
        cfg.synthetic.target_size = [12.0, 12.0];
        cfg.synthetic.length = 3;
        cfg.seg.iter_init = 1;
        cfg.inst.iter_init = 1;
        cfg.tracker.augmentations = 0;
        let model = Model::new(&cfg.model, 0);
        let seqs: Vec<EvalSequence> = (0..2)
            .map(|s| EvalSequence::from_synthetic(format!("s{s}"), &gen_synthetic_sequence(&cfg.synthetic, s).unwrap()).unwrap())
            .collect();
        let table = run_ablation(&model, &cfg, &seqs, AblationAxis::Tsc, ExecMode::Parallel).unwrap();
        assert_eq!(table.rows.len(), 3);
        let text = table.render();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(2).unwrap().contains("0.20"));
        assert!(table.rows.iter().all(|r| r.report.frames == 4 && r.report.mean_mask_iou.is_some()));

        let seq = track_all(&model, &cfg, &seqs, ExecMode::Sequential).unwrap();
        let par = track_all(&model, &cfg, &seqs, ExecMode::Parallel).unwrap();
        assert_eq!(seq.iter().map(|r| r.pred_boxes.clone()).collect::<Vec<_>>(), par.iter().map(|r| r.pred_boxes.clone()).collect::<Vec<_>>());
        assert!(run_ablation(&model, &cfg, &[], AblationAxis::Tsc, ExecMode::Sequential).is_err());
    }
}
