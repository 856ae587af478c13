//! On-disk formats: image sequences, box files, mask images and metric
//! reports.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::eval::{MetricReport, SyntheticSequence};
use crate::features::Frame;
use crate::seg::Mask;
use crate::tracker::InitTarget;

pub const INIT_BOX_FILE: &str = "init.txt";
pub const INIT_MASK_FILE: &str = "init.png";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";
pub const BOXES_FILE: &str = "boxes.txt";
pub const MASK_DIR: &str = "masks";

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_frame(path: &Path, frame_index: usize) -> Result<Frame> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
        img.get_pixel(c as u32, r as u32)[ch] as f64 / 255.0
    });
    Frame::new(pixels, frame_index)
}

pub fn save_frame(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w, _) = frame.pixels.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let p = |ch: usize| to_u8(frame.pixels[[r as usize, c as usize, ch]]);
        Rgb([p(0), p(1), p(2)])
    });
    img.save(path)?;
    Ok(())
}

/// Binary mask from a grayscale image; pixels at or above 128 are foreground.
pub fn load_mask(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        if img.get_pixel(c as u32, r as u32)[0] >= 128 {
            1.0
        } else {
            0.0
        }
    }))
}

/// 8-bit mask image, 255 where `probs >= threshold` and 0 elsewhere.
pub fn save_mask(path: &Path, probs: &Array2<f64>, threshold: f64) -> Result<()> {
    let (h, w) = probs.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |c, r| {
        Luma([if probs[[r as usize, c as usize]] >= threshold { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

pub fn format_box(b: &Option<BBox>) -> String {
    match b {
        Some(b) => format!("{},{},{},{}", b.x, b.y, b.w, b.h),
        None => "nan,nan,nan,nan".into(),
    }
}

pub fn parse_box(line: &str) -> Result<Option<BBox>> {
    let vals: Vec<f64> = line
        .split([',', ' ', '\t'])
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidSequence(format!("bad box line {line:?}: {e}")))?;
    if vals.len() != 4 {
        return Err(Error::InvalidSequence(format!("bad box line {line:?}: expected 4 values")));
    }
    let b = BBox::new(vals[0], vals[1], vals[2], vals[3]);
    Ok(b.is_finite().then_some(b))
}

pub fn write_boxes(path: &Path, boxes: &[Option<BBox>]) -> Result<()> {
    let mut text = String::new();
    for b in boxes {
        text.push_str(&format_box(b));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_boxes(path: &Path) -> Result<Vec<Option<BBox>>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_box)
        .collect()
}

/// Files in `dir` whose stem is a number and whose extension is an image
/// type, sorted numerically.
pub fn numbered_images(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            continue;
        }
        if let Some(n) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<usize>().ok()) {
            out.push((n, path));
        }
    }
    out.sort();
    Ok(out)
}

/// A sequence directory: numbered frames, an init file and optional ground
/// truth.
pub struct SequenceDir {
    pub frames: Vec<Frame>,
    pub init: InitTarget,
    pub groundtruth: Option<Vec<Option<BBox>>>,
}

impl SequenceDir {
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::InvalidSequence(format!("{} is not a directory", dir.display())));
        }
        let frames = numbered_images(dir)?
            .into_iter()
            .enumerate()
            .map(|(i, (_, p))| load_frame(&p, i))
            .collect::<Result<Vec<_>>>()?;
        if frames.is_empty() {
            return Err(Error::InvalidSequence(format!("no numbered frames in {}", dir.display())));
        }
        let box_file = dir.join(INIT_BOX_FILE);
        let mask_file = dir.join(INIT_MASK_FILE);
        let init = if mask_file.is_file() {
            InitTarget::Mask(Mask::new(load_mask(&mask_file)?)?)
        } else if box_file.is_file() {
            let line = fs::read_to_string(&box_file)?;
            let b = parse_box(line.lines().next().unwrap_or(""))?
                .ok_or_else(|| Error::InvalidInit("initial box is not finite".into()))?;
            InitTarget::Box(b)
        } else {
            return Err(Error::InvalidSequence(format!(
                "{} has neither {INIT_BOX_FILE} nor {INIT_MASK_FILE}",
                dir.display()
            )));
        };
        let gt = dir.join(GROUNDTRUTH_FILE);
        let groundtruth = if gt.is_file() { Some(read_boxes(&gt)?) } else { None };
        Ok(Self {
            frames,
            init,
            groundtruth,
        })
    }

    /// Ground-truth masks stored as `masks/<n>.png`, when every frame has one.
    pub fn load_gt_masks(dir: &Path, frames: usize) -> Result<Option<Vec<Array2<f64>>>> {
        let mdir = dir.join(MASK_DIR);
        if !mdir.is_dir() {
            return Ok(None);
        }
        let files = numbered_images(&mdir)?;
        if files.len() != frames {
            return Ok(None);
        }
        files.iter().map(|(_, p)| load_mask(p)).collect::<Result<Vec<_>>>().map(Some)
    }
}

/// Write a synthetic scene in the sequence-directory layout.
pub fn write_synthetic(dir: &Path, seq: &SyntheticSequence) -> Result<()> {
    fs::create_dir_all(dir.join(MASK_DIR))?;
    for (i, (frame, mask)) in seq.frames.iter().zip(&seq.masks).enumerate() {
        save_frame(&dir.join(format!("{i:05}.png")), frame)?;
        save_mask(&dir.join(MASK_DIR).join(format!("{i:05}.png")), mask, 0.5)?;
    }
    save_mask(&dir.join(INIT_MASK_FILE), &seq.masks[0], 0.5)?;
    let init = seq.boxes.first().copied().flatten();
    fs::write(dir.join(INIT_BOX_FILE), format_box(&init) + "\n")?;
    write_boxes(&dir.join(GROUNDTRUTH_FILE), &seq.boxes)?;
    Ok(())
}

/// Flat `key=value` lines.
pub fn format_metrics(report: &MetricReport) -> String {
    let mut s = format!(
        "auc={}\nprecision={}\nnorm_precision={}\nframes={}\n",
        report.auc, report.precision, report.norm_precision, report.frames
    );
    if let Some(j) = report.mean_mask_iou {
        s.push_str(&format!("mask_iou={j}\n"));
    }
    s
}

pub fn format_curve(curve: &[(f64, f64)]) -> String {
    curve.iter().map(|(t, v)| format!("{t},{v}\n")).collect()
}

pub fn write_metrics(dir: &Path, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.txt"), format_metrics(report))?;
    fs::write(dir.join("success_curve.csv"), format_curve(&report.success_curve))?;
    fs::write(dir.join("norm_precision_curve.csv"), format_curve(&report.norm_precision_curve))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SyntheticConfig;
    use crate::eval::gen_synthetic_sequence;

    #[test]
    fn box_lines_round_trip() {
        let boxes = vec![Some(BBox::new(1.5, 2.0, 30.25, 4.0)), None, Some(BBox::new(0.1, 0.2, 0.3, 0.7))];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.txt");
        write_boxes(&p, &boxes).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().nth(1), Some("nan,nan,nan,nan"));
        assert_eq!(read_boxes(&p).unwrap(), boxes);
        assert!(parse_box("1,2,3").is_err());
        assert_eq!(parse_box("1 2 3 4").unwrap(), Some(BBox::new(1.0, 2.0, 3.0, 4.0)));
    }

    #[test]
    fn synthetic_directory_round_trip() {
        let cfg = SyntheticConfig {
            length: 3,
            frame_size: [48, 64],
            target_size: [12.0, 16.0],
            ..SyntheticConfig::default()
        };
        let seq = gen_synthetic_sequence(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(dir.path(), &seq).unwrap();
        let loaded = SequenceDir::load(dir.path()).unwrap();
        assert_eq!(loaded.frames.len(), 3);
        assert_eq!(loaded.frames[1].pixels.dim(), (48, 64, 3));
        let max_err = loaded.frames[2]
            .pixels
            .iter()
            .zip(seq.frames[2].pixels.iter())
            .map(|(a, b)| (a - b.clamp(0.0, 1.0)).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-12);
        match loaded.init {
            InitTarget::Mask(m) => assert_eq!(m.probs, seq.masks[0]),
            InitTarget::Box(_) => panic!("mask init expected"),
        }
        assert_eq!(loaded.groundtruth.unwrap(), seq.boxes);
        let masks = SequenceDir::load_gt_masks(dir.path(), 3).unwrap().unwrap();
        assert_eq!(masks[1], seq.masks[1]);
    }

    #[test]
    fn missing_init_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(SequenceDir::load(dir.path()).is_err());
        let seq = gen_synthetic_sequence(
            &SyntheticConfig {
                length: 2,
                frame_size: [32, 32],
                target_size: [8.0, 8.0],
                ..SyntheticConfig::default()
            },
            0,
        )
        .unwrap();
        save_frame(&dir.path().join("0.png"), &seq.frames[0]).unwrap();
        assert!(matches!(SequenceDir::load(dir.path()), Err(Error::InvalidSequence(_))));
        fs::write(dir.path().join(INIT_BOX_FILE), "2,3,10,12\n").unwrap();
        let loaded = SequenceDir::load(dir.path()).unwrap();
        assert!(matches!(loaded.init, InitTarget::Box(b) if b == BBox::new(2.0, 3.0, 10.0, 12.0)));
    }

    #[test]
    fn metrics_text_layout() {
        let report = MetricReport {
            auc: 0.5,
            precision: 1.0,
            norm_precision: 0.25,
            success_curve: vec![(0.0, 1.0), (0.05, 0.5)],
            norm_precision_curve: vec![],
            mean_mask_iou: None,
            frames: 4,
        };
        assert_eq!(format_metrics(&report), "auc=0.5\nprecision=1\nnorm_precision=0.25\nframes=4\n");
        assert_eq!(format_curve(&report.success_curve), "0,1\n0.05,0.5\n");
    }
}
