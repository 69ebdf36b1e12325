use ciffuse::autodiff::{softmax_cross_entropy, Tape};
use ciffuse::data::{generate, TaskSpec};
use ciffuse::fusion::FusionModel;
use ciffuse::nn::Ctx;
use ciffuse::training::{TrainConfig, Trainer};
use ciffuse::IGNORE_INDEX;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// At gold rate 1 with the highway switched off, the training CE is exactly the
/// linguistic encoder's loss on the unmasked gold sequence.
#[test]
fn full_gold_rate_reduces_to_the_language_model_loss() {
    let mut cfg = TrainConfig::default().model;
    cfg.fusion.lambda_ac = 0.0;
    cfg.fusion.lambda_lm = 1.0;
    let model = FusionModel::new(cfg, 3).unwrap();
    for utt in generate(&TaskSpec::default(), 5, 1).unwrap() {
        let tape = Tape::new();
        let out = model
            .forward_train(&tape, &utt, 1.0, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(out.replaced.iter().all(|&r| r));
        let lm = &model.linguistic;
        let ctx = Ctx::new(&tape, &model.store);
        let logits = lm
            .logits(
                ctx,
                lm.encode(ctx, lm.embed(ctx, &utt.tokens).unwrap()).unwrap(),
            )
            .unwrap();
        let direct = softmax_cross_entropy(logits, &utt.tokens, IGNORE_INDEX).unwrap();
        assert_eq!(out.ce.item(), direct.item());
    }
}

/// Anchors only enter through the linguistic input, so an utterance without any
/// anchor decodes identically with and without the threshold.
#[test]
fn anchors_change_only_anchored_utterances() {
    let spec = TaskSpec::default();
    let train = generate(&spec, 300, 1).unwrap();
    let dev = generate(&spec, 60, 2).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.batch_size = 8;
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer
        .run(&train, &[], 300, &mut Vec::new(), None)
        .unwrap();
    let model = &trainer.model;
    let mut anchored_utts = 0;
    for utt in &dev {
        let with = model.forward_infer(&utt.frames, 0.8).unwrap();
        let without = model.forward_infer(&utt.frames, 1.0).unwrap();
        assert!(!without.anchors.contains(&true));
        assert_eq!(with.tokens.len(), without.tokens.len());
        if with.anchors.contains(&true) {
            anchored_utts += 1;
        } else {
            assert_eq!(with.tokens, without.tokens, "{}", utt.id);
        }
    }
    assert!(
        anchored_utts > 0,
        "a trained model should be confident somewhere"
    );
}

#[test]
fn inference_is_deterministic() {
    let model = FusionModel::new(TrainConfig::default().model, 8).unwrap();
    let utt = &generate(&TaskSpec::default(), 1, 5).unwrap()[0];
    assert_eq!(
        model.forward_infer(&utt.frames, 0.8).unwrap(),
        model.forward_infer(&utt.frames, 0.8).unwrap()
    );
}
