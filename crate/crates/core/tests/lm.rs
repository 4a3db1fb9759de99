mod common;

use std::collections::BTreeMap;

use common::{
    desk_assistant, examples, numeric_grad, pattern_image, random_lm_inputs, randomize_lora,
    rel_err, tiny_assistant, without_lora, Mat,
};
use pathvlm::assistant::{apply_accumulated, train_stage, Assistant, StageConfig, VqaExample};
use pathvlm::connector::connect_cached_on;
use pathvlm::data::{build_alignment_qa, default_templates, Source};
use pathvlm::fixtures::labeled_pair_corpus;
use pathvlm::lm::{
    assemble, forward_logits, freeze_policy, merge_lora, sequence_loss_on, CONNECTOR, LM_BASE,
    LORA, VISION_ENCODER,
};
use pathvlm::nn::{GradSet, ParamGroup, ParamSet, Tape};
use pathvlm::optim::AdamW;
use pathvlm::schedules::ScheduleSpec;
use pathvlm::tokenizer::Tokenizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn adapters_at_init_change_nothing() {
    let model = desk_assistant(1);
    let base = without_lora(&model.params);
    let lm = &model.cfg.lm;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let (prefix, ids) = random_lm_inputs(&mut rng, 8, lm.dim);
        let with = forward_logits(
            &model.params,
            lm,
            Some(&model.cfg.lora),
            Some(&prefix),
            &ids,
        )
        .unwrap();
        let plain = forward_logits(&base, lm, None, Some(&prefix), &ids).unwrap();
        assert!(with
            .iter()
            .zip(plain.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn merged_weights_match_adapter_forward() {
    let mut model = desk_assistant(2);
    randomize_lora(&mut model, 5);
    let merged = merge_lora(&model.params, &model.cfg.lora);
    assert!(merged.group(LORA).is_none());
    let lm = &model.cfg.lm;
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (prefix, ids) = random_lm_inputs(&mut rng, 8, lm.dim);
        let a = forward_logits(
            &model.params,
            lm,
            Some(&model.cfg.lora),
            Some(&prefix),
            &ids,
        )
        .unwrap();
        let b = forward_logits(&merged, lm, None, Some(&prefix), &ids).unwrap();
        let plain =
            forward_logits(&without_lora(&model.params), lm, None, Some(&prefix), &ids).unwrap();
        assert!(
            (&a - &plain).iter().any(|v| v.abs() > 1e-3),
            "adapters should matter here"
        );
        worst = worst.max((&a - &b).iter().map(|v| v.abs()).fold(0.0, f64::max));
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn zero_alpha_disables_trained_adapters() {
    let mut model = desk_assistant(3);
    randomize_lora(&mut model, 6);
    let mut lora = model.cfg.lora.clone();
    lora.alpha = 0.0;
    let lm = &model.cfg.lm;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (prefix, ids) = random_lm_inputs(&mut rng, 8, lm.dim);
    let a = forward_logits(&model.params, lm, Some(&lora), Some(&prefix), &ids).unwrap();
    let b = forward_logits(&without_lora(&model.params), lm, None, Some(&prefix), &ids).unwrap();
    assert_eq!(a, b);
}

/// Sequence loss of one example as a function of a single parameter matrix.
fn loss_with(model: &Assistant, group: &str, name: &str, value: &Mat, ex: &VqaExample) -> f64 {
    let mut params = model.params.clone();
    *params.group_mut(group).unwrap().get_mut(name).unwrap() = value.clone();
    let tiles = model.encode_tiles(&ex.image).unwrap();
    let mut tape = Tape::inference(&params).with_lora(Some(model.cfg.lora.binding()));
    let prefix = connect_cached_on(&mut tape, &tiles, &model.cfg.connector).unwrap();
    let seq = assemble(
        &Mat::zeros((4, 16)),
        &ex.question,
        &ex.answer,
        &Tokenizer::new(),
        96,
    )
    .unwrap();
    let l = sequence_loss_on(&mut tape, &model.cfg.lm, prefix, &seq).unwrap();
    tape.g.scalar(l)
}

#[test]
fn model_gradients_match_finite_differences() {
    let mut model = tiny_assistant(4);
    randomize_lora(&mut model, 7);
    let ex = VqaExample {
        image: pattern_image(30, 20, 2),
        question: "what stain?".into(),
        answer: "h and e".into(),
    };
    let tiles = model.encode_tiles(&ex.image).unwrap();
    let seq = assemble(
        &Mat::zeros((4, 16)),
        &ex.question,
        &ex.answer,
        &Tokenizer::new(),
        96,
    )
    .unwrap();
    let mut tape =
        Tape::new(&model.params, [CONNECTOR, LORA]).with_lora(Some(model.cfg.lora.binding()));
    let prefix = connect_cached_on(&mut tape, &tiles, &model.cfg.connector).unwrap();
    let loss = sequence_loss_on(&mut tape, &model.cfg.lm, prefix, &seq).unwrap();
    let grads = tape.param_grads(&tape.g.backward(loss));
    assert!(!grads.contains_key(LM_BASE) && !grads.contains_key(VISION_ENCODER));
    for (group, name) in [
        (CONNECTOR, "queries"),
        (CONNECTOR, "proj2.weight"),
        (LORA, "layers.0.attn.v_proj.lora_b"),
        (LORA, "layers.0.attn.q_proj.lora_a"),
    ] {
        let x = model.params.get(group, name).unwrap().clone();
        let num = numeric_grad(&x, 1e-6, |v| loss_with(&model, group, name, v, &ex));
        let err = rel_err(&grads[group][name], &num);
        assert!(err < 1e-4, "{group}/{name}: {err}");
    }
}

fn alignment_examples(n: usize) -> Vec<VqaExample> {
    let corpus = labeled_pair_corpus(n, 3, Source::Quilt);
    let qa = build_alignment_qa(&corpus.records, &default_templates(), 1).unwrap();
    examples(&qa)
}

#[test]
fn stage_two_keeps_frozen_groups_bit_identical() {
    let mut model = desk_assistant(5);
    let before = model.params.hashes();
    let cfg = StageConfig::for_stage(2, 20, 2, 1, 0).unwrap();
    let cfg = StageConfig {
        schedules: cfg
            .schedules
            .into_iter()
            .map(|(g, s)| (g, ScheduleSpec { peak_lr: 1e-3, ..s }))
            .collect(),
        ..cfg
    };
    train_stage(&mut model, &alignment_examples(8), &cfg).unwrap();
    let after = model.params.hashes();
    for g in [VISION_ENCODER, LM_BASE] {
        assert_eq!(before[g], after[g], "{g}");
    }
    for g in [CONNECTOR, LORA] {
        assert_ne!(before[g], after[g], "{g}");
    }
}

#[test]
fn single_step_moves_connector_not_encoder() {
    let mut model = tiny_assistant(6);
    let before = model.params.hashes();
    let ex = VqaExample {
        image: pattern_image(20, 20, 1),
        question: "what?".into(),
        answer: "tissue".into(),
    };
    train_stage(
        &mut model,
        &[ex],
        &StageConfig::for_stage(2, 1, 1, 1, 0).unwrap(),
    )
    .unwrap();
    let after = model.params.hashes();
    assert_eq!(before[VISION_ENCODER], after[VISION_ENCODER]);
    assert_ne!(before[CONNECTOR], after[CONNECTOR]);
}

#[test]
fn freeze_policies_are_pinned() {
    for stage in [2, 3] {
        let p = freeze_policy(stage).unwrap();
        assert!(p.frozen.contains(VISION_ENCODER));
        assert!(p.frozen.contains(LM_BASE));
        assert!(p.trainable.contains(CONNECTOR));
        assert!(p.trainable.contains(LORA));
    }
    assert!(freeze_policy(1).is_err() && freeze_policy(4).is_err());
}

/// Gradient of the mean squared error of a linear probe over `rows`.
fn probe_grads(w: &Mat, xs: &Mat, ys: &[f64], rows: std::ops::Range<usize>) -> GradSet {
    let mut g = Mat::zeros(w.dim());
    let n = rows.len() as f64;
    for i in rows {
        let x = xs.row(i);
        let err = x.dot(&w.column(0)) - ys[i];
        for j in 0..w.nrows() {
            g[[j, 0]] += 2.0 * err * x[j] / n;
        }
    }
    let mut set = GradSet::new();
    set.entry("probe".into()).or_default().insert("w".into(), g);
    set
}

#[test]
fn accumulation_matches_one_large_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let xs = Mat::from_shape_fn((8, 5), |_| rng.gen_range(-1.0..1.0));
    let ys: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut group = ParamGroup::new();
    group.insert(
        "w",
        Mat::from_shape_fn((5, 1), |_| rng.gen_range(-1.0..1.0)),
    );
    let mut a = ParamSet::new();
    a.insert_group("probe", group);
    let mut b = a.clone();
    let mut opt_a = AdamW::new(0.01);
    let mut opt_b = AdamW::new(0.01);
    for _ in 0..5 {
        let wa = a.get("probe", "w").unwrap().clone();
        let micro: Vec<GradSet> = (0..4)
            .map(|k| probe_grads(&wa, &xs, &ys, 2 * k..2 * k + 2))
            .collect();
        apply_accumulated(&mut opt_a, &mut a, micro, |_| 0.05);
        let wb = b.get("probe", "w").unwrap().clone();
        apply_accumulated(
            &mut opt_b,
            &mut b,
            vec![probe_grads(&wb, &xs, &ys, 0..8)],
            |_| 0.05,
        );
    }
    let diff = (a.get("probe", "w").unwrap() - b.get("probe", "w").unwrap())
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-6, "{diff}");
}

fn custom_stage(stage: u8, steps: usize, micro: usize, peak: f64) -> StageConfig {
    let mut schedules = BTreeMap::new();
    for g in [CONNECTOR, LORA] {
        schedules.insert(
            g.to_string(),
            ScheduleSpec::cosine(peak / 10.0, peak, peak / 100.0, steps),
        );
    }
    StageConfig {
        schedules,
        ..StageConfig::for_stage(stage, steps, micro, 1, 0).unwrap()
    }
}

#[test]
fn one_pair_is_reproduced_verbatim_after_overfitting() {
    let mut model = desk_assistant(7);
    let ex = VqaExample {
        image: pattern_image(64, 64, 3),
        question: "What is shown?".into(),
        answer: "invasive ductal carcinoma".into(),
    };
    train_stage(
        &mut model,
        std::slice::from_ref(&ex),
        &custom_stage(3, 300, 1, 3e-3),
    )
    .unwrap();
    let a = model.generate(&ex.image, &ex.question, 32).unwrap();
    assert_eq!(a, ex.answer);
    assert_eq!(a, model.generate(&ex.image, &ex.question, 32).unwrap());
    let prefix = model.visual_prefix(&ex.image).unwrap();
    assert_eq!(
        model.generate_ids(&prefix, &ex.question, 1).unwrap().len(),
        1
    );
}

#[test]
fn stage_loss_decreases_within_one_hundred_steps() {
    let mut model = desk_assistant(8);
    let data = examples(&common::color_pairs(20, 4));
    let (_, log) = train_stage(&mut model, &data, &custom_stage(2, 100, 4, 2e-3)).unwrap();
    let mean = |r: std::ops::Range<usize>| {
        log[r.clone()].iter().map(|l| l.loss).sum::<f64>() / r.len() as f64
    };
    assert!(
        mean(90..100) < mean(0..10),
        "{} vs {}",
        mean(0..10),
        mean(90..100)
    );
    for (step, l) in log.iter().enumerate() {
        assert_eq!(
            l.lr[CONNECTOR],
            custom_stage(2, 100, 4, 2e-3).schedules[CONNECTOR]
                .lr(step)
                .unwrap()
        );
    }
}

#[test]
fn checkpoint_round_trip_gives_identical_generations() {
    let mut model = tiny_assistant(9);
    randomize_lora(&mut model, 8);
    let dir = tempfile::tempdir().unwrap();
    model
        .to_checkpoint(9, 0, BTreeMap::new())
        .save(dir.path())
        .unwrap();
    let back =
        Assistant::from_checkpoint(&pathvlm::checkpoint::Checkpoint::load(dir.path()).unwrap())
            .unwrap();
    let img = pattern_image(33, 47, 5);
    let p1 = model.visual_prefix(&img).unwrap();
    let p2 = back.visual_prefix(&img).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(
        model.generate_ids(&p1, "what?", 8).unwrap(),
        back.generate_ids(&p2, "what?", 8).unwrap()
    );
}
