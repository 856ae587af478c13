//! Frames, search-region cropping, the backbone and the two branch feature heads.

use ndarray::{Array2, Array3, ArrayView3, IxDyn};
use rand::Rng;

use crate::autodiff::{Array, Var};
use crate::error::{Error, Result};
use crate::model::Net;
use crate::nn::{conv, ParamStore};

/// Largest stride in the backbone; patch sides must be multiples of it.
pub const MAX_STRIDE: usize = 32;

/// RGB image with values in `[0, 1]`, stored `H × W × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub pixels: Array3<f64>,
    pub frame_index: usize,
}

impl Frame {
    pub fn new(pixels: Array3<f64>, frame_index: usize) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h < 32 || w < 32 || c != 3 {
            return Err(Error::InvalidState(format!(
                "frame must be at least 32x32x3, got {h}x{w}x{c}"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidState("frame pixels must be finite and in [0, 1]".into()));
        }
        Ok(Self { pixels, frame_index })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

/// Per-axis scale and offset mapping patch pixel indices to image pixel
/// indices: `image = offset + scale * patch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub scale: [f64; 2],
    pub offset: [f64; 2],
}

impl Affine {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.offset[0] + self.scale[0] * p[0],
            self.offset[1] + self.scale[1] * p[1],
        ]
    }

    pub fn invert(&self, q: [f64; 2]) -> [f64; 2] {
        [
            (q[0] - self.offset[0]) / self.scale[0],
            (q[1] - self.offset[1]) / self.scale[1],
        ]
    }

    pub fn is_invertible(&self) -> bool {
        self.scale.iter().all(|s| s.is_finite() && *s != 0.0)
    }
}

/// Cropped and resampled search region.
#[derive(Clone, Debug)]
pub struct SearchPatch {
    pub pixels: Array3<f64>,
    pub to_image: Affine,
}

impl SearchPatch {
    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Crop rectangle in image pixel-edge coordinates: (top, left, bottom, right).
    pub fn crop_box(&self) -> [f64; 4] {
        let tl = self.to_image.apply([-0.5, -0.5]);
        let br = self
            .to_image
            .apply([self.height() as f64 - 0.5, self.width() as f64 - 0.5]);
        [tl[0] + 0.5, tl[1] + 0.5, br[0] + 0.5, br[1] + 0.5]
    }

    /// Pixels as a `3 × H × W` array.
    pub fn chw(&self) -> Array {
        self.pixels
            .view()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .into_owned()
            .into_dyn()
    }
}

/// Bilinear sample of `img` at continuous index coordinates, replicating
/// edge pixels outside the image.
fn sample_clamped(img: &ArrayView3<f64>, y: f64, x: f64, out: &mut [f64]) {
    let (h, w, c) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    for (ch, o) in out.iter_mut().enumerate().take(c) {
        let top = img[[y0, x0, ch]] * (1.0 - lx) + img[[y0, x1, ch]] * lx;
        let bottom = img[[y1, x0, ch]] * (1.0 - lx) + img[[y1, x1, ch]] * lx;
        *o = top * (1.0 - ly) + bottom * ly;
    }
}

/// Resample `img` (`H × W × C`) onto an `out_h × out_w` grid through `to_image`.
pub fn resample(img: ArrayView3<f64>, to_image: &Affine, out_h: usize, out_w: usize) -> Array3<f64> {
    let c = img.dim().2;
    let mut out = Array3::zeros((out_h, out_w, c));
    let mut px = vec![0.0; c];
    for r in 0..out_h {
        for col in 0..out_w {
            let q = to_image.apply([r as f64, col as f64]);
            sample_clamped(&img, q[0], q[1], &mut px);
            for ch in 0..c {
                out[[r, col, ch]] = px[ch];
            }
        }
    }
    out
}

/// Transform for a square crop of side `area_factor * max(size)` centered at
/// `center`, resized to `out_resolution`. The side is capped at the larger
/// image dimension.
pub fn crop_transform(
    image_hw: (usize, usize),
    center: [f64; 2],
    size: [f64; 2],
    area_factor: f64,
    out_resolution: [usize; 2],
) -> Result<Affine> {
    if center.iter().chain(size.iter()).any(|v| !v.is_finite()) || !area_factor.is_finite() {
        return Err(Error::InvalidState(format!(
            "non-finite crop request: center {center:?}, size {size:?}"
        )));
    }
    if size.iter().any(|&s| s <= 0.0) || area_factor <= 0.0 {
        return Err(Error::InvalidState(format!(
            "crop size and area factor must be positive: {size:?}, {area_factor}"
        )));
    }
    if out_resolution.iter().any(|&r| r == 0 || r % MAX_STRIDE != 0) {
        return Err(Error::Config(format!(
            "out_resolution {out_resolution:?} must be multiples of {MAX_STRIDE}"
        )));
    }
    let max_side = image_hw.0.max(image_hw.1) as f64;
    let side = (area_factor * size[0].max(size[1])).min(max_side);
    let scale = [side / out_resolution[0] as f64, side / out_resolution[1] as f64];
    let edge0 = [center[0] + 0.5 - side / 2.0, center[1] + 0.5 - side / 2.0];
    Ok(Affine {
        scale,
        offset: [
            edge0[0] + 0.5 * scale[0] - 0.5,
            edge0[1] + 0.5 * scale[1] - 0.5,
        ],
    })
}

pub fn crop_search_region(
    frame: &Frame,
    center: [f64; 2],
    size: [f64; 2],
    area_factor: f64,
    out_resolution: [usize; 2],
) -> Result<SearchPatch> {
    let to_image = crop_transform(
        (frame.height(), frame.width()),
        center,
        size,
        area_factor,
        out_resolution,
    )?;
    let pixels = resample(frame.pixels.view(), &to_image, out_resolution[0], out_resolution[1]);
    Ok(SearchPatch { pixels, to_image })
}

/// Crop a single-channel image-space map with the same geometry as a patch.
pub fn crop_map(map: &Array2<f64>, to_image: &Affine, out_h: usize, out_w: usize) -> Array2<f64> {
    let view = map.view().insert_axis(ndarray::Axis(2));
    resample(view, to_image, out_h, out_w).index_axis_move(ndarray::Axis(2), 0)
}

/// Warp a patch-space map back to image space; pixels outside the crop are 0.
pub fn uncrop_map(patch_map: &Array2<f64>, to_image: &Affine, img_h: usize, img_w: usize) -> Array2<f64> {
    let (ph, pw) = patch_map.dim();
    let view = patch_map.view().insert_axis(ndarray::Axis(2));
    let mut out = Array2::zeros((img_h, img_w));
    let mut px = [0.0];
    for r in 0..img_h {
        for c in 0..img_w {
            let p = to_image.invert([r as f64, c as f64]);
            if p[0] < -0.5 || p[1] < -0.5 || p[0] > ph as f64 - 0.5 || p[1] > pw as f64 - 0.5 {
                continue;
            }
            sample_clamped(&view, p[0], p[1], &mut px);
            out[[r, c]] = px[0];
        }
    }
    out
}

/// Backbone pyramid; levels sorted by stride.
#[derive(Clone, Debug)]
pub struct BackboneFeatures<'t> {
    pub levels: Vec<(usize, Var<'t>)>,
}

impl<'t> BackboneFeatures<'t> {
    pub fn level(&self, stride: usize) -> Option<Var<'t>> {
        self.levels.iter().find(|(s, _)| *s == stride).map(|(_, v)| *v)
    }

    pub fn require(&self, stride: usize) -> Result<Var<'t>> {
        self.level(stride)
            .ok_or_else(|| Error::Config(format!("backbone level with stride {stride} is missing")))
    }

    pub fn without(&self, stride: usize) -> Self {
        Self {
            levels: self.levels.iter().filter(|(s, _)| *s != stride).copied().collect(),
        }
    }
}

pub(crate) fn init_params<R: Rng>(store: &mut ParamStore, cfg: &crate::config::ModelConfig, rng: &mut R) {
    let [c0, c1, c2, c3] = cfg.backbone_channels;
    store.init_conv(rng, "backbone.stem", c0, 3, 3, false, 1.0);
    store.init_conv(rng, "backbone.s4", c0, c0, 3, false, 1.0);
    store.init_conv(rng, "backbone.s8", c1, c0, 3, false, 1.0);
    store.init_conv(rng, "backbone.s16", c2, c1, 3, false, 1.0);
    store.init_conv(rng, "backbone.s32", c3, c2, 3, false, 1.0);
    let src = |stride: usize| match stride {
        8 => c1,
        16 => c2,
        _ => c3,
    };
    store.init_conv(rng, "seg_feat", cfg.seg_channels, src(cfg.seg_source_stride), 3, true, 1.0);
    store.init_conv(rng, "clf_feat", cfg.clf_channels, src(cfg.clf_source_stride), 3, true, 1.0);
}

impl<'m, 't> Net<'m, 't> {
    /// Backbone over a `3 × H × W` patch variable.
    pub fn backbone(&self, patch: Var<'t>) -> Result<BackboneFeatures<'t>> {
        let s = patch.shape();
        if s.len() != 3 || !s[1].is_multiple_of(MAX_STRIDE) || !s[2].is_multiple_of(MAX_STRIDE) || s[1] == 0 || s[2] == 0 {
            return Err(Error::Config(format!(
                "patch {s:?} must be 3×H×W with H, W multiples of {MAX_STRIDE}"
            )));
        }
        let p = &self.p;
        let x = conv(p, "backbone.stem", patch, 2).relu();
        let s4 = conv(p, "backbone.s4", x, 2).relu();
        let s8 = conv(p, "backbone.s8", s4, 2).relu();
        let s16 = conv(p, "backbone.s16", s8, 2).relu();
        let s32 = conv(p, "backbone.s32", s16, 2).relu();
        Ok(BackboneFeatures {
            levels: vec![(2, x), (4, s4), (8, s8), (16, s16), (32, s32)],
        })
    }

    pub fn backbone_patch(&self, patch: &SearchPatch) -> Result<BackboneFeatures<'t>> {
        self.backbone(self.p.tape().constant(patch.chw()))
    }

    /// Segmentation features x_s.
    pub fn seg_features(&self, bb: &BackboneFeatures<'t>) -> Result<Var<'t>> {
        let src = bb.require(self.cfg.seg_source_stride)?;
        Ok(conv(&self.p, "seg_feat", src, 1).relu())
    }

    /// Instance features x_c.
    pub fn clf_features(&self, bb: &BackboneFeatures<'t>) -> Result<Var<'t>> {
        let src = bb.require(self.cfg.clf_source_stride)?;
        Ok(conv(&self.p, "clf_feat", src, 1).relu())
    }
}

/// Plain-array view of branch features.
pub fn features_to_array(v: Var<'_>) -> Array {
    (*v.value()).clone()
}

/// Vertical flip of an `H × W × C` image.
pub fn flip_vertical(img: &Array3<f64>) -> Array3<f64> {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(0));
    out.as_standard_layout().into_owned()
}

/// Integer shift with edge replication: `out[r, c] = img[r - dy, c - dx]`.
pub fn translate(img: &Array3<f64>, dy: isize, dx: isize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((h, w, c), |(r, col, ch)| {
        let sr = (r as isize - dy).clamp(0, h as isize - 1) as usize;
        let sc = (col as isize - dx).clamp(0, w as isize - 1) as usize;
        img[[sr, sc, ch]]
    })
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w, c) = img.dim();
    let pass = |src: &Array3<f64>, vertical: bool| {
        Array3::from_shape_fn((h, w, c), |(r, col, ch)| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let d = i as isize - radius;
                    let (sr, sc) = if vertical {
                        ((r as isize + d).clamp(0, h as isize - 1) as usize, col)
                    } else {
                        (r, (col as isize + d).clamp(0, w as isize - 1) as usize)
                    };
                    k * src[[sr, sc, ch]]
                })
                .sum()
        })
    };
    pass(&pass(img, true), false)
}

/// Features of an all-zero array with the given shape.
pub fn zeros(shape: &[usize]) -> Array {
    Array::zeros(IxDyn(shape))
}
