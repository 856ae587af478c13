//! Score encoder, conditioning of the mask encoding, and the U-shaped
//! segmentation decoder.

use ndarray::{Array2, IxDyn};
use rand::Rng;

use crate::autodiff::{Array, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::features::BackboneFeatures;
use crate::model::Net;
use crate::nn::{conv, ParamStore};

/// Decoder stages run at these strides, coarsest first.
pub const DECODER_STRIDES: [usize; 4] = [16, 8, 4, 2];

/// Output channels of the score encoder.
pub const SCORE_ENCODING_DIM: usize = 16;

fn skip_channels(cfg: &ModelConfig, stride: usize) -> usize {
    let [c0, c1, c2, _] = cfg.backbone_channels;
    match stride {
        2 | 4 => c0,
        8 => c1,
        _ => c2,
    }
}

pub(crate) fn init_params<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let c = cfg.score_encoder_channels;
    store.init_conv(rng, "score_enc.in", c, 1, 3, true, 1.0);
    for b in 0..2 {
        store.init_conv(rng, &format!("score_enc.res{b}.a"), c, c, 3, true, 1.0);
        store.init_conv(rng, &format!("score_enc.res{b}.b"), c, c, 3, true, 0.5);
    }
    store.init_conv(rng, "score_enc.out", SCORE_ENCODING_DIM, c, 3, true, 1.0);
    store.get_mut("score_enc.out.w").expect("just created").fill(0.0);

    let mut in_ch = cfg.encoding_dim;
    for (stride, &ch) in DECODER_STRIDES.iter().zip(&cfg.decoder_channels) {
        let name = format!("decoder.s{stride}");
        store.init_conv(rng, &format!("{name}.in"), ch, in_ch, 3, true, 1.0);
        store.init_conv(rng, &format!("{name}.skip"), ch, skip_channels(cfg, *stride), 1, true, 0.5);
        store.init_conv(rng, &format!("{name}.out"), ch, ch, 3, true, 1.0);
        in_ch = ch;
    }
    store.init_conv(rng, "decoder.final", 1, in_ch, 3, true, 1.0);
}

impl<'t> Net<'_, 't> {
    /// Encode a `1 × H_c × W_c` score map into `16 × H_c × W_c`.
    pub fn encode_scores(&self, scores: Var<'t>) -> Var<'t> {
        let p = &self.p;
        let mut h = conv(p, "score_enc.in", scores, 1).max_pool_same(3);
        for b in 0..2 {
            let r = conv(p, &format!("score_enc.res{b}.a"), h, 1).relu();
            let r = conv(p, &format!("score_enc.res{b}.b"), r, 1);
            h = h.add(r).relu();
        }
        conv(p, "score_enc.out", h, 1)
    }

    /// `x_m + upsample(enc)`.
    pub fn fuse(&self, x_m: Var<'t>, enc: Var<'t>) -> Result<Var<'t>> {
        fuse(x_m, enc)
    }

    /// Decode a fused encoding into full-resolution logits, `H × W`.
    pub fn decode(&self, x_f: Var<'t>, bb: &BackboneFeatures<'t>) -> Result<Var<'t>> {
        let p = &self.p;
        let mut h = x_f;
        for (i, stride) in DECODER_STRIDES.iter().enumerate() {
            let skip = bb.require(*stride)?;
            let name = format!("decoder.s{stride}");
            if i > 0 {
                let s = h.shape();
                h = h.resize_bilinear(s[1] * 2, s[2] * 2);
            }
            let (hs, ss) = (h.shape(), skip.shape());
            if hs[1..] != ss[1..] {
                return Err(Error::Config(format!(
                    "decoder stage at stride {stride}: input {hs:?} does not match skip {ss:?}"
                )));
            }
            h = conv(p, &format!("{name}.in"), h, 1).relu();
            h = h.add(conv(p, &format!("{name}.skip"), skip, 1));
            h = conv(p, &format!("{name}.out"), h, 1).relu();
        }
        let out = conv(p, "decoder.final", h, 1);
        let s = out.shape();
        Ok(out
            .resize_bilinear(s[1] * 2, s[2] * 2)
            .reshape(&[s[1] * 2, s[2] * 2]))
    }
}

/// Conditioning: add the bilinearly upsampled score encoding to `x_m`.
pub fn fuse<'t>(x_m: Var<'t>, enc: Var<'t>) -> Result<Var<'t>> {
    let (ms, es) = (x_m.shape(), enc.shape());
    if ms.len() != 3 || es.len() != 3 || ms[0] != es[0] || ms[1] != 2 * es[1] || ms[2] != 2 * es[2] {
        return Err(Error::Config(format!(
            "cannot fuse score encoding {es:?} into mask encoding {ms:?}"
        )));
    }
    Ok(x_m.add(enc.resize_bilinear(ms[1], ms[2])))
}

/// Probabilities from decoder logits.
pub fn probabilities(logits: &Array) -> Array2<f64> {
    let s = logits.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    logits
        .mapv(|v| 1.0 / (1.0 + (-v).exp()))
        .into_shape_with_order(IxDyn(&[h, w]))
        .expect("single-channel logits")
        .into_dimensionality()
        .expect("2-D")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::features::zeros;
    use crate::model::Model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        Model::new(&ModelConfig::default(), 7)
    }

    fn randomize_score_out(m: &mut Model) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = m.params.get_mut("score_enc.out.w").unwrap();
        w.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }

    #[test]
    fn score_encoder_shape_and_zero_init() {
        let m = model();
        let tape = Tape::new();
        let net = m.bind(&tape, false);
        let enc = net.encode_scores(tape.constant(zeros(&[1, 15, 26])));
        assert_eq!(enc.shape(), vec![16, 15, 26]);
        assert!(enc.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn score_encoder_translation_covariance() {
        let mut m = model();
        randomize_score_out(&mut m);
        let tape = Tape::new();
        let net = m.bind(&tape, false);
        let mut a = zeros(&[1, 15, 26]);
        a[[0, 7, 10]] = 1.0;
        let mut b = zeros(&[1, 15, 26]);
        b[[0, 7, 11]] = 1.0;
        let ea = net.encode_scores(tape.constant(a)).value();
        let eb = net.encode_scores(tape.constant(b)).value();
        for c in 0..16 {
            for r in 0..15 {
                for x in 0..25 {
                    let near_border = x < 1 || x + 1 >= 26;
                    if !near_border {
                        assert!((ea[[c, r, x]] - eb[[c, r, x + 1]]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn fuse_identities() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xm = Array::from_shape_simple_fn(IxDyn(&[16, 6, 10]), || rng.random_range(-1.0..1.0));
        let out = fuse(tape.constant(xm.clone()), tape.constant(zeros(&[16, 3, 5]))).unwrap();
        assert_eq!(*out.value(), xm);
        let mut enc = zeros(&[16, 3, 5]);
        for c in 0..16 {
            enc.index_axis_mut(ndarray::Axis(0), c).fill(c as f64 * 0.5);
        }
        let out = fuse(tape.constant(zeros(&[16, 6, 10])), tape.constant(enc)).unwrap();
        for ((c, _, _), &v) in (*out.value()).clone().into_dimensionality::<ndarray::Ix3>().unwrap().indexed_iter() {
            assert!((v - c as f64 * 0.5).abs() < 1e-12);
        }
        assert!(fuse(tape.constant(zeros(&[16, 6, 10])), tape.constant(zeros(&[16, 4, 5]))).is_err());
    }

    #[test]
    fn decoder_full_resolution_and_conditioning_identity() {
        let mut m = model();
        randomize_score_out(&mut m);
        let tape = Tape::new();
        let net = m.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let patch = Array::from_shape_simple_fn(IxDyn(&[3, 96, 160]), || rng.random_range(0.0..1.0));
        let bb = net.backbone(tape.constant(patch)).unwrap();
        let xm = Array::from_shape_simple_fn(IxDyn(&[16, 6, 10]), || rng.random_range(-1.0..1.0));
        let xm = tape.constant(xm);
        let plain = net.decode(xm, &bb).unwrap();
        assert_eq!(plain.shape(), vec![96, 160]);
        let xf = net.fuse(xm, tape.constant(zeros(&[16, 3, 5]))).unwrap();
        let cond = net.decode(xf, &bb).unwrap();
        assert_eq!(*plain.value(), *cond.value());
        let probs = probabilities(&plain.value());
        assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(matches!(net.decode(xm, &bb.without(4)), Err(Error::Config(_))));
    }
}
