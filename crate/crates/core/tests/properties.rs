use ndarray::{Array2, Array3, IxDyn};
use proptest::prelude::*;

use segtrack_core::autodiff::Tape;
use segtrack_core::config::Config;
use segtrack_core::eval::{gen_synthetic_sequence, success_auc, SequenceResult};
use segtrack_core::bbox::BBox;
use segtrack_core::features::Frame;
use segtrack_core::fusion::SCORE_ENCODING_DIM;
use segtrack_core::inst::{hinge_residual, make_gaussian_label, peak_confidence};
use segtrack_core::model::Model;
use segtrack_core::seg::Mask;
use segtrack_core::tracker::{FrameScript, InitTarget, Tracker};
use segtrack_core::train::total_loss;

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.crop.out_resolution = [64, 64];
    cfg.synthetic.frame_size = [64, 64];
    cfg.synthetic.target_size = [10.0, 10.0];
    cfg.synthetic.length = 8;
    cfg.tracker.augmentations = 1;
    cfg.seg.iter_init = 2;
    cfg.inst.iter_init = 2;
    cfg.tracker.refit_interval = 2;
    cfg
}

fn grid(max: usize) -> impl Strategy<Value = (usize, usize)> {
    (1..=max, 1..=max).prop_map(|(a, b)| (32 * a, 32 * b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn feature_and_logit_shapes_follow_strides((h, w) in grid(4), seed in 0u64..100) {
        let cfg = Config::default();
        let model = Model::new(&cfg.model, seed);
        let tape = Tape::new();
        let net = model.bind(&tape, false);
        let patch = tape.constant(ndarray::ArrayD::from_elem(IxDyn(&[3, h, w]), 0.5));
        let bb = net.backbone(patch).unwrap();
        let xs = net.seg_features(&bb).unwrap();
        let xc = net.clf_features(&bb).unwrap();
        prop_assert_eq!(&xs.shape()[1..], &[h / 16, w / 16]);
        prop_assert_eq!(&xc.shape()[1..], &[h / 32, w / 32]);
        let x_m = tape.constant(ndarray::ArrayD::zeros(IxDyn(&[SCORE_ENCODING_DIM, h / 16, w / 16])));
        let scores = tape.constant(ndarray::ArrayD::zeros(IxDyn(&[1, h / 32, w / 32])));
        let fused = net.fuse(x_m, net.encode_scores(scores)).unwrap();
        let logits = net.decode(fused, &bb).unwrap();
        prop_assert_eq!(logits.shape(), vec![h, w]);
        prop_assert!(logits.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tracker_runs_keep_pinned_samples_and_clamp_scale(seed in 0u64..50) {
        let cfg = small_config();
        let model = Model::new(&cfg.model, seed);
        let seq = gen_synthetic_sequence(&cfg.synthetic, seed).unwrap();
        let tracker = Tracker::new(&model, cfg.clone());
        let mut state = tracker.initialize(&seq.frames[0], &InitTarget::Mask(Mask::new(seq.masks[0].clone()).unwrap())).unwrap();
        let clamp = cfg.tracker.max_scale_change;
        for frame in &seq.frames[1..] {
            let before = state.size;
            let out = tracker.track_frame(&mut state, frame, FrameScript::default()).unwrap();
            prop_assert!(state.seg_memory.iter().any(|e| e.pinned && e.frame_index == 0));
            prop_assert!(state.clf_memory.iter().any(|e| e.pinned && e.frame_index == 0));
            prop_assert!(state.seg_memory.len() <= cfg.seg.capacity);
            prop_assert!(state.clf_memory.len() <= cfg.inst.capacity);
            prop_assert!(state.scale_history.len() <= cfg.tracker.scale_history);
            for (now, prev) in out.size.iter().zip(before) {
                let r = now / prev;
                prop_assert!(r >= 1.0 - clamp - 1e-12 && r <= 1.0 / (1.0 - clamp) + 1e-12, "ratio {}", r);
            }
            prop_assert_eq!(out.bbox.is_some(), out.mask.count_at_least(cfg.tracker.t_ss) > 0);
        }
    }
}

proptest! {
    #[test]
    fn background_residual_is_never_negative(vals in proptest::collection::vec(-3.0f64..3.0, 36), cy in 0.0f64..6.0, cx in 0.0f64..6.0) {
        let s = Array2::from_shape_vec((6, 6), vals).unwrap();
        let y = make_gaussian_label([cy, cx], 1.0, (6, 6));
        let r = hinge_residual(&s, &y, 0.05);
        for ((i, j), &v) in r.indexed_iter() {
            if y[[i, j]] < 0.05 {
                prop_assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn peak_location_transposes(vals in proptest::collection::vec(-1.0f64..1.0, 20)) {
        let s = Array2::from_shape_vec((4, 5), vals).unwrap();
        let (v, (r, c)) = peak_confidence(&s);
        let (vt, (rt, ct)) = peak_confidence(&s.t().to_owned());
        prop_assert_eq!(v, vt);
        prop_assert_eq!((r, c), (ct, rt));
    }

    #[test]
    fn gaussian_label_peaks_and_decays(cy in 0.0f64..8.0, cx in 0.0f64..8.0, sigma in 0.5f64..4.0) {
        let y = make_gaussian_label([cy, cx], sigma, (9, 9));
        let (r, c) = (cy.round() as usize, cx.round() as usize);
        let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
        prop_assert!((y[[r, c]] - (-d2 / (2.0 * sigma * sigma)).exp()).abs() < 1e-6);
        for i in r + 1..9 {
            prop_assert!(y[[i, c]] <= y[[i - 1, c]]);
        }
        for j in (0..c).rev() {
            prop_assert!(y[[r, j]] <= y[[r, j + 1]]);
        }
    }

    #[test]
    fn auc_ignores_frame_order(ious in proptest::collection::vec(0.0f64..1.0, 2..12), rot in 0usize..12) {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let boxes: Vec<Option<BBox>> = ious.iter().map(|&v| Some(BBox::new(0.0, 0.0, 10.0 * v, 10.0))).collect();
        let gts = vec![Some(gt); boxes.len() + 1];
        let mut pred = vec![Some(gt)];
        pred.extend(boxes.iter().copied());
        let mut shuffled = boxes.clone();
        shuffled.rotate_left(rot % boxes.len());
        shuffled.reverse();
        let mut pred2 = vec![Some(gt)];
        pred2.extend(shuffled);
        let a = success_auc(&SequenceResult::new(pred, gts.clone()).unwrap()).unwrap().0;
        let b = success_auc(&SequenceResult::new(pred2, gts).unwrap()).unwrap().0;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn total_is_weighted_sum(seg in 0.0f64..10.0, clf in 0.0f64..10.0, eta in 0.0f64..20.0) {
        prop_assert!((total_loss(seg, clf, eta) - (seg + eta * clf)).abs() < 1e-6);
    }
}

#[test]
fn same_config_and_seed_reproduce_every_output() {
    let cfg = small_config();
    let run = || {
        let model = Model::new(&cfg.model, cfg.seed);
        let seq = gen_synthetic_sequence(&cfg.synthetic, cfg.seed).unwrap();
        let init = InitTarget::Box(seq.boxes[0].unwrap());
        Tracker::new(&model, cfg.clone())
            .run_sequence(&seq.frames, &init, &[])
            .unwrap()
            .into_iter()
            .map(|o| (o.mask.probs, o.bbox, o.confidence))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn frames_outside_the_unit_range_are_rejected() {
    let mut px = Array3::from_elem((40, 40, 3), 0.5);
    assert!(Frame::new(px.clone(), 0).is_ok());
    px[[3, 3, 0]] = 1.5;
    assert!(Frame::new(px, 0).is_err());
}
