use ciffuse::autodiff::Tape;
use ciffuse::data::TaskSpec;
use ciffuse::encoders::{
    evaluate_masked, pretrain_mask_predict, AcousticConfig, AcousticEncoder, LinguisticConfig,
    LinguisticEncoder, PretrainConfig,
};
use ciffuse::nn::Ctx;
use ciffuse::params::ParamStore;
use ciffuse::training::LrSchedule;
use ciffuse::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn acoustic_shapes_hold_for_random_configs(
        feat_dim in 1usize..6,
        strides in prop::collection::vec(1usize..4, 1..3),
        heads in 1usize..3,
        per_head in 1usize..4,
        blocks in 0usize..3,
        t in 1usize..30,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AcousticConfig {
            feat_dim,
            strides: strides.clone(),
            content_dim: heads * per_head * 2 - 1,
            blocks,
            heads,
            ff_dim: 6,
            positional: true,
        };
        let mut store = ParamStore::new();
        let enc = AcousticEncoder::new(&mut store, cfg.clone(), &mut rng).unwrap();
        let tape = Tape::new();
        let frames = tape.constant(Tensor::normal(&[t, feat_dim], 1.0, &mut rng));
        let out = enc.encode(Ctx::new(&tape, &store), frames).unwrap();
        let expect_t = strides.iter().fold(t, |n, s| n.div_ceil(*s));
        prop_assert_eq!(out.shape(), vec![expect_t, cfg.width()]);
        prop_assert_eq!(expect_t, cfg.output_len(t));
    }

    #[test]
    fn linguistic_shapes_hold_for_random_configs(
        heads in 1usize..4,
        per_head in 1usize..4,
        blocks in 0usize..3,
        u in 1usize..10,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = LinguisticConfig { vocab_size: 7, dim: heads * per_head, blocks, heads, ff_dim: 5, positional: true };
        let mut store = ParamStore::new();
        let enc = LinguisticEncoder::new(&mut store, cfg.clone(), &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::normal(&[u, cfg.dim], 1.0, &mut rng));
        let out = enc.encode(Ctx::new(&tape, &store), x).unwrap();
        prop_assert_eq!(out.shape(), vec![u, cfg.dim]);
    }
}

#[test]
fn unpositioned_linguistic_encoder_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = LinguisticConfig {
        positional: false,
        ..LinguisticConfig::default()
    };
    let mut store = ParamStore::new();
    let enc = LinguisticEncoder::new(&mut store, cfg, &mut rng).unwrap();
    let x = Tensor::normal(&[5, 32], 1.0, &mut rng);
    let perm = [3, 0, 4, 1, 2];
    let px =
        Tensor::from_rows(&perm.iter().map(|&r| x.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let y = enc.encode(ctx, ctx.constant(x)).unwrap().value();
    let py = enc.encode(ctx, ctx.constant(px)).unwrap().value();
    for (i, &r) in perm.iter().enumerate() {
        for (a, b) in py.row(i).iter().zip(y.row(r)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn encoders_are_deterministic_given_a_seed() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let ac = AcousticEncoder::new(&mut store, AcousticConfig::default(), &mut rng).unwrap();
        let lm = LinguisticEncoder::new(&mut store, LinguisticConfig::default(), &mut rng).unwrap();
        let frames = Tensor::normal(&[13, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let a = ac.encode(ctx, ctx.constant(frames)).unwrap().value();
        let l = lm
            .encode(ctx, lm.embed(ctx, &[1, 5, 2]).unwrap())
            .unwrap()
            .value();
        ((*a).clone(), (*l).clone())
    };
    assert_eq!(run(), run());
}

fn bigram_corpus(count: usize, seed: u64) -> Vec<Vec<usize>> {
    let spec = TaskSpec {
        branching: 1,
        ..TaskSpec::default()
    };
    spec.build().unwrap().generate_text(count, seed)
}

/// Each token has a unique successor, so any masked position next to an
/// unmasked neighbour is fully determined by it.
#[test]
fn mask_predict_learns_a_deterministic_bigram_corpus() {
    let train = bigram_corpus(2000, 1);
    let heldout = bigram_corpus(300, 2);
    let mut store = ParamStore::new();
    let enc = LinguisticEncoder::new(
        &mut store,
        LinguisticConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let before = evaluate_masked(&enc, &store, &heldout, 0.15, 9).unwrap();
    let cfg = PretrainConfig {
        steps: 600,
        schedule: LrSchedule {
            warmup_steps: 50,
            peak_lr: 3e-3,
            hold_steps: 1000,
            decay_rate: 0.999,
        },
        ..PretrainConfig::default()
    };
    let losses = pretrain_mask_predict(&enc, &mut store, &train, &cfg).unwrap();
    assert_eq!(losses.len(), 600);
    let after = evaluate_masked(&enc, &store, &heldout, 0.15, 9).unwrap();
    assert!(
        after.accuracy > 0.9,
        "held-out masked accuracy {}",
        after.accuracy
    );
    assert!(
        after.loss <= 0.8 * before.loss,
        "{} -> {}",
        before.loss,
        after.loss
    );
}
