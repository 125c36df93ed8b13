use autograd::{Tape, Tensor};
use proptest::prelude::*;

use refertrack::chook::{repeat_in_time, AugmentConfig};
use refertrack::encoders::{BackboneConfig, FreezeSelector, VisualEncoder, TEXT_PREFIX, VISUAL_PREFIX};
use refertrack::layers::ParamBuilder;
use refertrack::model::{Model, ModelConfig};
use refertrack::objective::ObjectiveConfig;
use refertrack::synthdata::{generate_scenes, grammar_vocab, SceneConfig};
use refertrack::trainer::{train, TrainConfig, TrainOptions};

const TINY_WIDTHS: [usize; 4] = [4, 4, 8, 8];

fn tiny_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        channels: 16,
        slots: 8,
        ref_points: 2,
        vocab_size,
        backbone: BackboneConfig { widths: TINY_WIDTHS, ..Default::default() },
        text_layers: 1,
        ..Default::default()
    }
}

fn tiny_train(m: &ModelConfig) -> TrainConfig {
    TrainConfig {
        p: m.p,
        slots: m.slots,
        ref_points: m.ref_points,
        max_tokens: m.max_tokens,
        learning_rate: 1e-3,
        ..Default::default()
    }
}

fn frames(p: usize, h: usize, w: usize, seed: usize) -> Tensor<f32> {
    Tensor::from_fn(&[p, h, w, 3], |i| ((i * 37 + seed * 11) % 101) as f32 / 100.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // Level l has spatial size input / (4 * 2^l) when the input divides by 32.
    #[test]
    fn pyramid_levels_follow_the_strides(hk in 1usize..4, wk in 1usize..5, p in 1usize..3, coord in any::<bool>()) {
        let (h, w) = (32 * hk, 32 * wk);
        let mut store = autograd::ParamStore::new();
        let enc = VisualEncoder::new(
            &mut ParamBuilder::new(&mut store, 3),
            &BackboneConfig { widths: TINY_WIDTHS, bias: true, coord_channels: coord },
            16,
            (h, w),
        );
        let tape = Tape::no_grad(&store);
        let levels = enc.encode_frames(&tape, &frames(p, h, w, 0)).unwrap();
        prop_assert_eq!(levels.len(), 4);
        for (l, v) in levels.iter().enumerate() {
            let s = 4usize << l;
            prop_assert_eq!(v.shape(), vec![p, h / s, w / s, 16]);
        }
    }
}

#[test]
fn wrong_resolution_is_rejected() {
    let mut store = autograd::ParamStore::new();
    let enc = VisualEncoder::new(&mut ParamBuilder::new(&mut store, 0), &BackboneConfig::default(), 8, (64, 96));
    let tape = Tape::no_grad(&store);
    assert!(enc.encode_frames(&tape, &frames(1, 64, 64, 0)).is_err());
}

#[test]
fn frames_encode_independently_of_batching() {
    let (h, w) = (64, 96);
    let mut store = autograd::ParamStore::new();
    let enc = VisualEncoder::new(
        &mut ParamBuilder::new(&mut store, 1),
        &BackboneConfig { widths: TINY_WIDTHS, ..Default::default() },
        16,
        (h, w),
    );
    let batch = frames(3, h, w, 5);
    let tape = Tape::no_grad(&store);
    let together: Vec<Tensor<f32>> = enc.encode_frames(&tape, &batch).unwrap().iter().map(|v| (*v.value()).clone()).collect();
    let per = h * w * 3;
    for f in 0..3 {
        let single = Tensor::new(&[1, h, w, 3], batch.data()[f * per..(f + 1) * per].to_vec());
        let tape = Tape::no_grad(&store);
        for (l, v) in enc.encode_frames(&tape, &single).unwrap().iter().enumerate() {
            let one = v.value();
            let n = one.len();
            let slice = &together[l].data()[f * n..(f + 1) * n];
            let worst = one.data().iter().zip(slice).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(worst <= 1e-5, "frame {f} level {l}: max difference {worst}");
        }
    }
}

#[test]
fn reference_points_repeat_identically_in_time() {
    let tape = Tape::<f64>::detached(false);
    let refs = tape.constant(Tensor::from_fn(&[3, 5, 2], |i| (i as f64 * 0.37).sin()));
    let rep = repeat_in_time(refs, 4).value();
    assert_eq!(rep.shape(), &[4, 3, 5, 2]);
    let n = 3 * 5 * 2;
    for t in 0..4 {
        assert_eq!(&rep.data()[t * n..(t + 1) * n], refs.value().data());
    }
}

fn run_training(freeze: FreezeSelector, pos_fraction: f64, steps: usize) -> (autograd::ParamStore<f32>, autograd::ParamStore<f32>, Vec<f64>) {
    let vocab = grammar_vocab();
    let mc = tiny_model(vocab.size());
    let scenes = generate_scenes(&SceneConfig::default(), 40, 2, &vocab, mc.max_tokens).unwrap();
    let (model, mut params) = Model::new(mc.clone(), 9).unwrap();
    let before = params.clone();
    let cfg = TrainConfig { freeze, pos_fraction, ..tiny_train(&mc) };
    let report = train(
        &scenes,
        &model,
        &mut params,
        &vocab,
        &cfg,
        &AugmentConfig::default(),
        &ObjectiveConfig::default(),
        &TrainOptions { max_steps: Some(steps), ..Default::default() },
    )
    .unwrap();
    (before, params, report.log.iter().map(|r| r.focal).collect())
}

#[test]
fn frozen_encoders_receive_no_updates() {
    for (sel, frozen, free) in [
        (FreezeSelector::Visual, VISUAL_PREFIX, TEXT_PREFIX),
        (FreezeSelector::Text, TEXT_PREFIX, VISUAL_PREFIX),
    ] {
        let (before, after, _) = run_training(sel, 0.25, 3);
        let mut changed_free = false;
        for (a, b) in before.entries().zip(after.entries()) {
            let name = &a.name;
            let moved = a.value.data() != b.value.data();
            if name.starts_with(frozen) {
                assert!(!moved, "{sel:?}: frozen tensor {name} changed");
            } else if name.starts_with(free) {
                changed_free |= moved;
            }
        }
        assert!(changed_free, "{sel:?}: no trainable encoder tensor moved");
    }
}

#[test]
fn initial_focal_loss_is_near_chance() {
    // At p_t = 1/2 with balanced labels the focal loss is
    // mean(alpha_t) * (1/2)^gamma * ln 2.
    let obj = ObjectiveConfig::default();
    let chance = 0.5 * (obj.alpha_focal + (1.0 - obj.alpha_focal)) * 0.5f64.powf(obj.gamma_focal) * std::f64::consts::LN_2;
    let (_, _, focal) = run_training(FreezeSelector::None, 0.5, 1);
    let first = focal[0];
    assert!(first.is_finite());
    assert!(first > chance / 3.0 && first < chance * 3.0, "first-batch focal {first}, chance level {chance}");
}
