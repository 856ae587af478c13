use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use segtrack_core::ablation::{run_ablation, track_one, AblationAxis, EvalSequence};
use segtrack_core::checkpoint::Checkpoint;
use segtrack_core::config::Config;
use segtrack_core::eval::{evaluate, gen_synthetic_sequence, SequenceResult};
use segtrack_core::io::{self, SequenceDir};
use segtrack_core::model::Model;
use segtrack_core::parallel::ExecMode;
use segtrack_core::train::{fit, synthetic_pool, Hyperparams};

/// A required input that does not exist.
#[derive(Debug)]
struct MissingInput(String);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for MissingInput {}

const EXIT_MISSING_INPUT: u8 = 2;

#[derive(Parser)]
#[command(name = "segtrack", version, about = "Train, run and evaluate the segmentation-centric tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Clone)]
struct TrackerFlags {
    #[arg(long)]
    no_conditioning: bool,
    #[arg(long)]
    no_fallback: bool,
    /// Instance-score confidence threshold.
    #[arg(long)]
    tsc: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic scenes and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Track one sequence directory.
    Track {
        sequence: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrackerFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write per-frame mask images.
        #[arg(long, value_enum)]
        masks: Option<OnOff>,
    },
    /// Score tracker output against ground truth.
    Eval {
        results: PathBuf,
        gt: PathBuf,
        /// Where to write metrics; defaults to the results directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare inference variants: conditioning, fallback, tsc or full.
    Ablate {
        axis: String,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrackerFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory of sequence directories; synthetic scenes when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of synthetic scenes.
        #[arg(long, default_value_t = 4)]
        sequences: u64,
    },
    /// Write synthetic sequences in the sequence-directory layout.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(MissingInput(format!("{what} not found: {}", path.display())).into());
    }
    Ok(())
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => {
            require(p, "config")?;
            Config::load(p).with_context(|| format!("loading {}", p.display()))?
        }
        None => Config::default(),
    };
    cfg.apply_env(std::env::vars())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_flags(cfg: &mut Config, flags: &TrackerFlags) -> Result<()> {
    if flags.no_conditioning {
        cfg.tracker.conditioning = false;
    }
    if flags.no_fallback {
        cfg.tracker.fallback = false;
    }
    if let Some(t) = flags.tsc {
        cfg.tracker.t_sc = t;
    }
    cfg.validate()?;
    Ok(())
}

fn mode(common: &Common) -> ExecMode {
    if common.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

/// Model weights from a checkpoint; the architecture comes from the archive.
fn load_model(path: &Path, cfg: &mut Config) -> Result<Model> {
    require(path, "checkpoint")?;
    let model = Checkpoint::load(path)?.into_model();
    cfg.model = model.cfg.clone();
    Ok(model)
}

fn cmd_train(common: &Common, out: &Path, steps: Option<usize>, log_every: usize) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    fs::create_dir_all(out)?;
    let pool = synthetic_pool(&cfg)?;
    let mut model = Model::new(&cfg.model, cfg.seed);
    let mut log = String::from("step,total,seg,clf,iou\n");
    let run = fit(&mut model, &pool, &cfg, mode(common), |step, r| {
        log.push_str(&format!("{step},{},{},{},{}\n", r.total, r.seg_loss, r.clf_loss, r.mean_iou));
        if log_every > 0 && (step % log_every == 0 || step + 1 == cfg.train.steps) {
            eprintln!("step {step:>5}  total {:.4}  seg {:.4}  clf {:.4}  iou {:.3}", r.total, r.seg_loss, r.clf_loss, r.mean_iou);
        }
    })?;
    for (step, msg) in &run.skipped {
        eprintln!("skipped step {step}: {msg}");
    }
    Checkpoint::new(&model, &Hyperparams::from_config(&cfg), run.opt.step).save(&out.join("checkpoint.json"))?;
    fs::write(out.join("train_log.csv"), log)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    println!("wrote {}", out.join("checkpoint.json").display());
    Ok(())
}

#[derive(Serialize)]
struct FrameLog {
    frame: usize,
    confidence: f64,
    case: &'static str,
    update_seg: bool,
    update_clf: bool,
    bbox: String,
}

#[derive(Serialize)]
struct Manifest {
    config_hash: String,
    seed: u64,
    checkpoint: String,
    sequence: String,
    frames: Vec<FrameLog>,
}

fn cmd_track(
    sequence: &Path,
    common: &Common,
    flags: &TrackerFlags,
    checkpoint: &Path,
    out: &Path,
    masks: Option<OnOff>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_flags(&mut cfg, flags)?;
    if let Some(m) = masks {
        cfg.tracker.write_masks = matches!(m, OnOff::On);
    }
    let model = load_model(checkpoint, &mut cfg)?;
    require(sequence, "sequence directory")?;
    let dir = SequenceDir::load(sequence)?;
    let seq = EvalSequence {
        name: sequence.display().to_string(),
        gt_boxes: dir.groundtruth.clone().unwrap_or_else(|| vec![None; dir.frames.len()]),
        frames: dir.frames,
        init: dir.init,
        gt_masks: None,
    };
    if seq.gt_boxes.len() != seq.frames.len() {
        bail!("ground truth has {} boxes for {} frames", seq.gt_boxes.len(), seq.frames.len());
    }
    let (_, outputs) = track_one(&model, &cfg, &seq)?;

    fs::create_dir_all(out)?;
    let boxes: Vec<_> = outputs.iter().map(|o| o.bbox).collect();
    io::write_boxes(&out.join(io::BOXES_FILE), &boxes)?;
    if cfg.tracker.write_masks {
        let mdir = out.join(io::MASK_DIR);
        fs::create_dir_all(&mdir)?;
        for (i, o) in outputs.iter().enumerate() {
            io::save_mask(&mdir.join(format!("{i:05}.png")), &o.mask.probs, cfg.tracker.t_ss)?;
        }
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        checkpoint: checkpoint.display().to_string(),
        sequence: sequence.display().to_string(),
        frames: outputs
            .iter()
            .enumerate()
            .map(|(i, o)| FrameLog {
                frame: i,
                confidence: o.confidence,
                case: o.decision.case.label(),
                update_seg: o.decision.update_seg,
                update_clf: o.decision.update_clf,
                bbox: io::format_box(&o.bbox),
            })
            .collect(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    println!("tracked {} frames into {}", boxes.len(), out.display());
    Ok(())
}

/// `(name, dir)` pairs: the directory itself when it holds `file`, otherwise
/// its subdirectories that do.
fn collect_dirs(root: &Path, file: &str) -> Result<Vec<(String, PathBuf)>> {
    if root.join(file).is_file() {
        return Ok(vec![(String::new(), root.to_path_buf())]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let p = entry?.path();
        if p.join(file).is_file() {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            dirs.push((name, p));
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn load_masks(dir: &Path) -> Result<Option<Vec<ndarray::Array2<f64>>>> {
    let mdir = dir.join(io::MASK_DIR);
    if !mdir.is_dir() {
        return Ok(None);
    }
    Ok(Some(
        io::numbered_images(&mdir)?
            .iter()
            .map(|(_, p)| io::load_mask(p))
            .collect::<segtrack_core::Result<Vec<_>>>()?,
    ))
}

fn cmd_eval(results: &Path, gt: &Path, out: Option<&Path>) -> Result<()> {
    require(results, "results directory")?;
    require(gt, "ground-truth directory")?;
    let runs = collect_dirs(results, io::BOXES_FILE)?;
    if runs.is_empty() {
        bail!("no {} found under {}", io::BOXES_FILE, results.display());
    }
    let mut scored = Vec::new();
    for (name, dir) in &runs {
        let gt_dir = if name.is_empty() { gt.to_path_buf() } else { gt.join(name) };
        let gt_file = gt_dir.join(io::GROUNDTRUTH_FILE);
        require(&gt_file, "ground truth")?;
        let mut r = SequenceResult::new(io::read_boxes(&dir.join(io::BOXES_FILE))?, io::read_boxes(&gt_file)?)
            .with_context(|| format!("sequence {}", dir.display()))?;
        if let (Some(p), Some(g)) = (load_masks(dir)?, load_masks(&gt_dir)?) {
            if p.len() == g.len() && p.len() == r.pred_boxes.len() {
                r.pred_masks = Some(p);
                r.gt_masks = Some(g);
            }
        }
        scored.push(r);
    }
    let report = evaluate(&scored)?;
    print!("{}", io::format_metrics(&report));
    io::write_metrics(out.unwrap_or(results), &report)?;
    Ok(())
}

fn ablation_data(cfg: &Config, data: Option<&Path>, count: u64) -> Result<Vec<EvalSequence>> {
    match data {
        Some(root) => {
            require(root, "data directory")?;
            let mut seqs = Vec::new();
            for (name, dir) in collect_dirs(root, io::GROUNDTRUTH_FILE)? {
                let d = SequenceDir::load(&dir)?;
                let gt_masks = SequenceDir::load_gt_masks(&dir, d.frames.len())?;
                seqs.push(EvalSequence {
                    name,
                    gt_boxes: d.groundtruth.unwrap_or_default(),
                    frames: d.frames,
                    init: d.init,
                    gt_masks,
                });
            }
            if seqs.is_empty() {
                bail!("no sequences with {} under {}", io::GROUNDTRUTH_FILE, root.display());
            }
            Ok(seqs)
        }
        None => (0..count)
            .map(|i| {
                let seed = cfg.seed + i;
                Ok(EvalSequence::from_synthetic(format!("synthetic-{seed}"), &gen_synthetic_sequence(&cfg.synthetic, seed)?)?)
            })
            .collect(),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    axis: &str,
    common: &Common,
    flags: &TrackerFlags,
    checkpoint: &Path,
    out: Option<&Path>,
    data: Option<&Path>,
    count: u64,
) -> Result<()> {
    let axis: AblationAxis = axis.parse()?;
    let mut cfg = load_config(common)?;
    apply_flags(&mut cfg, flags)?;
    let model = load_model(checkpoint, &mut cfg)?;
    let seqs = ablation_data(&cfg, data, count)?;
    let table = run_ablation(&model, &cfg, &seqs, axis, mode(common))?;
    let text = table.render();
    print!("{text}");
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        fs::write(out.join("ablation.txt"), &text)?;
        fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    }
    Ok(())
}

fn cmd_gen(common: &Common, out: &Path, count: u64) -> Result<()> {
    let cfg = load_config(common)?;
    for i in 0..count {
        let seed = cfg.seed + i;
        let dir = if count == 1 { out.to_path_buf() } else { out.join(format!("seq{seed:03}")) };
        io::write_synthetic(&dir, &gen_synthetic_sequence(&cfg.synthetic, seed)?)?;
    }
    println!("wrote {count} sequence(s) to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            out,
            steps,
            log_every,
        } => cmd_train(&common, &out, steps, log_every),
        Command::Track {
            sequence,
            common,
            flags,
            checkpoint,
            out,
            masks,
        } => cmd_track(&sequence, &common, &flags, &checkpoint, &out, masks),
        Command::Eval { results, gt, out } => cmd_eval(&results, &gt, out.as_deref()),
        Command::Ablate {
            axis,
            common,
            flags,
            checkpoint,
            out,
            data,
            sequences,
        } => cmd_ablate(&axis, &common, &flags, &checkpoint, out.as_deref(), data.as_deref(), sequences),
        Command::Gen { common, out, count } => cmd_gen(&common, &out, count),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<MissingInput>().is_some() {
                ExitCode::from(EXIT_MISSING_INPUT)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
