//! Shared builders for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use pathvlm::assistant::{train_stage, Assistant, StageConfig, VqaExample};
use pathvlm::connector::ConnectorConfig;
use pathvlm::data::{PairRecord, Source, VqaRecord};
use pathvlm::eval::extract_choice;
use pathvlm::fixtures::color_vqa;
use pathvlm::image::{load_image, SynthSpec};
use pathvlm::lm::{LmConfig, LoraConfig, CONNECTOR, LORA};
use pathvlm::nn::ParamSet;
use pathvlm::plip::{PlipConfig, PlipModel};
use pathvlm::schedules::ScheduleSpec;
use pathvlm::tokenizer::VOCAB_SIZE;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Desk-profile assistant on top of an untrained image tower.
pub fn desk_assistant(seed: u64) -> Assistant {
    let plip = PlipModel::new(PlipConfig {
        seed,
        ..PlipConfig::desk()
    })
    .unwrap();
    Assistant::from_plip(
        &plip,
        ConnectorConfig {
            seed: seed + 1,
            ..ConnectorConfig::desk()
        },
        LmConfig {
            seed: seed + 2,
            ..LmConfig::desk()
        },
        LoraConfig {
            seed: seed + 3,
            ..LoraConfig::default()
        },
    )
    .unwrap()
}

/// `n` closed colour questions, balanced over the four colours.
pub fn color_pairs(n: usize, seed: u64) -> Vec<VqaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let spec = SynthSpec {
                style: (i % 4) as u32 + 4 * rng.gen_range(0..8),
                seed: rng.gen_range(0..1_000_000),
                height: rng.gen_range(40..=96),
                width: rng.gen_range(40..=96),
            };
            color_vqa(format!("c{i:02}"), &spec)
        })
        .collect()
}

pub fn examples(rows: &[VqaRecord]) -> Vec<VqaExample> {
    rows.iter()
        .map(|r| VqaExample {
            image: load_image(&r.image_ref, None).unwrap(),
            question: r.question.clone(),
            answer: r.answer.clone(),
        })
        .collect()
}

/// Closed-set accuracy of greedy generations scored by choice extraction.
pub fn closed_accuracy(model: &Assistant, rows: &[VqaRecord]) -> f64 {
    let correct = rows
        .iter()
        .filter(|r| {
            let image = load_image(&r.image_ref, None).unwrap();
            let gen = model.generate(&image, &r.question, 4).unwrap();
            let choices = r.choices.as_ref().unwrap();
            extract_choice(&gen, choices) == r.gold_letter()
        })
        .count();
    correct as f64 / rows.len() as f64
}

pub const OVERFIT_STEPS: usize = 300;

/// Trains connector + adapters on 20 colour questions; returns accuracy.
pub fn overfit(steps: usize) -> (f64, Vec<f64>) {
    let rows = color_pairs(20, 11);
    let data = examples(&rows);
    let mut model = desk_assistant(5);
    let mut schedules = BTreeMap::new();
    schedules.insert(
        CONNECTOR.to_string(),
        ScheduleSpec::cosine(1e-3, 3e-3, 1e-4, steps),
    );
    schedules.insert(
        LORA.to_string(),
        ScheduleSpec::cosine(1e-3, 3e-3, 1e-4, steps),
    );
    let cfg = StageConfig {
        schedules,
        ..StageConfig::for_stage(3, steps, 4, 1, 0).unwrap()
    };
    let (_, log) = train_stage(&mut model, &data, &cfg).unwrap();
    (
        closed_accuracy(&model, &rows),
        log.iter().map(|l| l.loss).collect(),
    )
}

pub type Mat = ndarray::Array2<f64>;

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Mat {
    let mut m = Mat::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    m
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE from explicit sums.
pub fn itc_oracle(img: &Mat, txt: &Mat, tau: f64) -> f64 {
    let n = img.nrows();
    let d = img.ncols();
    let s = |i: usize, j: usize| (0..d).map(|k| img[[i, k]] * txt[[j, k]]).sum::<f64>() / tau;
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| s(i, j)).collect();
        i2t += log_sum_exp(&row) - s(i, i);
        let col: Vec<f64> = (0..n).map(|j| s(j, i)).collect();
        t2i += log_sum_exp(&col) - s(i, i);
    }
    0.5 * (i2t / n as f64 + t2i / n as f64)
}

pub fn bce_oracle(logits: &[f64], labels: &[f64]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, y)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / logits.len() as f64
}

pub fn lm_oracle(logits: &Mat, targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for (t, row) in logits.rows().into_iter().enumerate() {
        if mask[t] {
            let v: Vec<f64> = row.to_vec();
            total += log_sum_exp(&v) - v[targets[t]];
            count += 1.0;
        }
    }
    total / count
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &Mat, h: f64, f: impl Fn(&Mat) -> f64) -> Mat {
    let mut g = Mat::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * h);
    }
    g
}

/// Max-norm relative error of `analytic` against `numeric`.
pub fn rel_err(analytic: &Mat, numeric: &Mat) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = numeric
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    diff / scale
}

/// Tiny assistant for gradient and adapter checks.
pub fn tiny_assistant(seed: u64) -> Assistant {
    let plip = PlipModel::new(PlipConfig {
        patch_size: 8,
        enc_dim: 8,
        enc_layers: 1,
        heads: 2,
        proj_dim: 4,
        crop_size: 16,
        seed,
        ..PlipConfig::default()
    })
    .unwrap();
    Assistant::from_plip(
        &plip,
        ConnectorConfig {
            tile_size: 16,
            max_tiles: 4,
            num_queries: 4,
            llm_dim: 16,
            heads: 1,
            seed: seed + 1,
        },
        LmConfig {
            dim: 16,
            layers: 1,
            heads: 2,
            context: 96,
            seed: seed + 2,
            ..LmConfig::default()
        },
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            seed: seed + 3,
            ..LoraConfig::default()
        },
    )
    .unwrap()
}

/// Float-log re-derivation of the tiling rule by enumerating every grid.
pub fn plan_oracle(h: usize, w: usize, tile: usize, max_tiles: usize) -> (usize, usize) {
    let mut grids = Vec::new();
    for r in 1..=max_tiles {
        for c in 1..=max_tiles {
            if r * c <= max_tiles {
                let bad = ((c as f64 * h as f64) / (r as f64 * w as f64)).ln().abs();
                grids.push((r, c, bad));
            }
        }
    }
    let best = grids.iter().map(|g| g.2).fold(f64::INFINITY, f64::min);
    let tied: Vec<(usize, usize)> = grids
        .iter()
        .filter(|g| g.2 - best <= 1e-12 * best.max(1.0))
        .map(|g| (g.0, g.1))
        .collect();
    let smallest = tied.iter().map(|(r, c)| r * c).min().unwrap();
    let area = h as f64 * w as f64;
    let mut ok: Vec<(usize, usize)> = tied
        .into_iter()
        .filter(|(r, c)| r * c == smallest || area > 0.5 * (tile * tile * r * c) as f64)
        .collect();
    ok.sort_by_key(|(r, c)| (std::cmp::Reverse(r * c), *r));
    ok[0]
}

/// Cheap deterministic image of any size.
pub fn pattern_image(h: usize, w: usize, seed: u64) -> pathvlm::image::ImageArray {
    let s = (seed % 97) as f64;
    pathvlm::image::ImageArray::from_fn(h, w, |y, x, c| {
        (((y as f64 * 0.37 + x as f64 * 0.11 + c as f64 + s) * 0.05).sin() + 1.0) * 0.5
    })
}

pub struct ConfusionOracle {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Confusion matrix with one extra column for "no class".
#[allow(clippy::needless_range_loop)]
pub fn confusion_oracle(items: &[(Option<String>, String)], classes: &[String]) -> ConfusionOracle {
    let k = classes.len();
    let mut m = vec![vec![0usize; k + 1]; k];
    for (pred, gold) in items {
        let g = classes.iter().position(|c| c == gold).unwrap();
        let p = pred
            .as_ref()
            .and_then(|p| classes.iter().position(|c| c == p))
            .unwrap_or(k);
        m[g][p] += 1;
    }
    let diag: usize = (0..k).map(|i| m[i][i]).sum();
    let mut recall = 0.0;
    let mut precision = 0.0;
    for c in 0..k {
        let row: usize = m[c].iter().sum();
        let col: usize = (0..k).map(|g| m[g][c]).sum();
        recall += if row == 0 {
            0.0
        } else {
            m[c][c] as f64 / row as f64
        };
        precision += if col == 0 {
            0.0
        } else {
            m[c][c] as f64 / col as f64
        };
    }
    ConfusionOracle {
        accuracy: diag as f64 / items.len() as f64,
        recall: recall / k as f64,
        precision: precision / k as f64,
    }
}

/// Random (prediction, gold) list with some missing and out-of-set predictions.
pub fn zero_shot_fixture(rng: &mut ChaCha8Rng) -> (Vec<(Option<String>, String)>, Vec<String>) {
    let k = rng.gen_range(2..=6);
    let classes: Vec<String> = (0..k)
        .map(|i| ((b'A' + i as u8) as char).to_string())
        .collect();
    let n = rng.gen_range(1..=40);
    let items = (0..n)
        .map(|_| {
            let gold = classes[rng.gen_range(0..k)].clone();
            let pred = match rng.gen_range(0..10) {
                0 => None,
                1 => Some("Z".to_string()),
                2..=4 => Some(gold.clone()),
                _ => Some(classes[rng.gen_range(0..k)].clone()),
            };
            (pred, gold)
        })
        .collect();
    (items, classes)
}

const WORDS: [&str; 12] = [
    "tissue",
    "murine",
    "stroma",
    "canine",
    "nuclei",
    "gland",
    "zebrafish",
    "cells",
    "mitosis",
    "fibrosis",
    "rat",
    "lumen",
];

pub fn fuzz_corpus(rng: &mut ChaCha8Rng, case: usize) -> Vec<PairRecord> {
    let n = rng.gen_range(0..30);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(1..35);
            let caption: Vec<&str> = (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect();
            let tag = if rng.gen_bool(0.2) { "xray_" } else { "img_" };
            let mut r = PairRecord::new(
                format!("{tag}{case}_{i}"),
                format!("synth:{}:{}:16x16", rng.gen_range(0..32), i),
                caption.join(" "),
                Source::Quilt,
            );
            if rng.gen_bool(0.1) {
                // Leading whitespace must not change the word count.
                r.caption = "   ".into();
                r.caption.push_str(&caption.join(" "));
            }
            r
        })
        .collect()
}

pub fn random_lm_inputs(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> (Mat, Vec<usize>) {
    let prefix = Mat::from_shape_fn((k, dim), |_| rng.gen_range(-1.0..1.0));
    let len = rng.gen_range(1..40);
    (
        prefix,
        (0..len).map(|_| rng.gen_range(0..VOCAB_SIZE)).collect(),
    )
}

pub fn without_lora(params: &ParamSet) -> ParamSet {
    let mut p = params.clone();
    p.remove_group(LORA);
    p
}

pub fn randomize_lora(model: &mut Assistant, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, m) in model.params.group_mut(LORA).unwrap().iter_mut() {
        m.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
    }
}
