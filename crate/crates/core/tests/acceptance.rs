//! One PASS/FAIL line per acceptance criterion. Exits non-zero on any failure.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use pathvlm::assistant::{train_stage, StageConfig};
use pathvlm::cli::RUN_MANIFEST;
use pathvlm::connector::{connect, plan_tiles, reassemble, tile_image, ConnectorConfig};
use pathvlm::data::{
    assemble_vqa_train, build_alignment_qa, default_templates, filter_min_words,
    filter_nonhuman_text, filter_nonpath_images, merge_stats, FilterOptions, FilterOutcome,
    ManifestStats, PairRecord, Source, VqaKind, VqaRecord, BACH_PROMPT, COLONPATH_PROMPT,
    OSCC_PROMPT,
};
use pathvlm::eval::{open_recall, zero_shot_metrics};
use pathvlm::fixtures::{labeled_pair_corpus, stage_dir, DESK_STAGES};
use pathvlm::judge::{FnJudge, JudgeClient, JudgeRequest, MockJudge, RetryPolicy};
use pathvlm::lm::{forward_logits, merge_lora, LM_BASE, VISION_ENCODER};
use pathvlm::losses::{
    itc_loss, itc_loss_with_grad, itm_labels, itm_loss, itm_loss_with_grad, lm_loss,
    lm_loss_with_grad,
};
use pathvlm::schedules::{plip_lr, warmup_cosine, ScheduleSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    }};
}

fn c1_losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_ln = 0.0f64;
    for n in [2usize, 4, 8] {
        let row = unit_rows(&mut rng, 1, 16);
        let e = Mat::from_shape_fn((n, 16), |(_, j)| row[[0, j]]);
        for tau in [0.07, 1.0] {
            let l = itc_loss(&e, &e, tau).map_err(|e| e.to_string())?;
            worst_ln = worst_ln.max((l - (n as f64).ln()).abs());
        }
    }
    ensure!(worst_ln < 1e-10, "ln N error {worst_ln:e}");

    let img = unit_rows(&mut rng, 6, 8);
    let txt = unit_rows(&mut rng, 6, 8);
    let (_, gi, gt) = itc_loss_with_grad(&img, &txt, 0.1).unwrap();
    let ni = numeric_grad(&img, 1e-6, |x| itc_loss(x, &txt, 0.1).unwrap());
    let nt = numeric_grad(&txt, 1e-6, |x| itc_loss(&img, x, 0.1).unwrap());
    let itc = rel_err(&gi, &ni).max(rel_err(&gt, &nt));

    let labels = itm_labels(6);
    let logits: Vec<f64> = (0..18).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let (_, g) = itm_loss_with_grad(&logits, &labels).unwrap();
    let x = Mat::from_shape_vec((18, 1), logits).unwrap();
    let num = numeric_grad(&x, 1e-6, |m| {
        itm_loss(m.as_slice().unwrap(), &labels).unwrap()
    });
    let itm = rel_err(&Mat::from_shape_vec((18, 1), g).unwrap(), &num);

    let logits = Mat::from_shape_fn((9, 13), |_| rng.gen_range(-3.0..3.0));
    let targets: Vec<usize> = (0..9).map(|_| rng.gen_range(0..13)).collect();
    let mask: Vec<bool> = (0..9).map(|i| i % 3 != 0).collect();
    let (_, g) = lm_loss_with_grad(&logits, &targets, &mask).unwrap();
    let num = numeric_grad(&logits, 1e-6, |m| lm_loss(m, &targets, &mask).unwrap());
    let lm = rel_err(&g, &num);

    let worst = itc.max(itm).max(lm);
    ensure!(
        worst < 1e-4,
        "gradient rel err itc {itc:e} itm {itm:e} lm {lm:e}"
    );
    Ok(format!(
        "ln N err {worst_ln:.1e}, worst grad rel err {worst:.1e}"
    ))
}

fn c2_connector() -> Outcome {
    let model = desk_assistant(102);
    let c = &model.cfg.connector;
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for i in 0..50 {
        let (h, w) = (rng.gen_range(32..=2048), rng.gen_range(32..=2048));
        let out = connect(
            &model.params,
            &pattern_image(h, w, i),
            VISION_ENCODER,
            &model.cfg.tower,
            c,
        )
        .map_err(|e| format!("{h}x{w}: {e}"))?;
        ensure!(
            out.dim() == (c.num_queries, c.llm_dim),
            "{h}x{w} gave {:?}",
            out.dim()
        );
    }
    for (tile, max_tiles) in [(224, 6), (c.tile_size, c.max_tiles)] {
        let cfg = ConnectorConfig {
            tile_size: tile,
            max_tiles,
            ..c.clone()
        };
        for _ in 0..1000 {
            let (h, w) = (rng.gen_range(1..=4096), rng.gen_range(1..=4096));
            let p = plan_tiles(h, w, &cfg).map_err(|e| e.to_string())?;
            let want = plan_oracle(h, w, tile, max_tiles);
            ensure!(
                (p.grid_rows, p.grid_cols) == want,
                "{h}x{w} tile {tile}: {:?} vs {want:?}",
                (p.grid_rows, p.grid_cols)
            );
        }
    }
    for i in 0..50 {
        let (h, w) = (rng.gen_range(8..900), rng.gen_range(8..900));
        let img = pattern_image(h, w, i);
        let (plan, tiles) = tile_image(&img, c).map_err(|e| e.to_string())?;
        let back = reassemble(&plan, &tiles);
        ensure!(
            back.data() == img.resize(plan.resized_h, plan.resized_w).data(),
            "{h}x{w} reassembly differs"
        );
    }
    Ok("50 shapes K×D, 2000 plans match oracle, 50 reassemblies exact".into())
}

fn c3_freezing() -> Outcome {
    let mut model = desk_assistant(103);
    let before = model.params.hashes();
    let corpus = labeled_pair_corpus(8, 3, Source::Quilt);
    let qa = build_alignment_qa(&corpus.records, &default_templates(), 1).unwrap();
    train_stage(
        &mut model,
        &examples(&qa),
        &StageConfig::for_stage(2, 20, 2, 1, 0).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    let after = model.params.hashes();
    for g in [VISION_ENCODER, LM_BASE] {
        ensure!(before[g] == after[g], "{g} changed during stage 2");
    }

    let fresh = desk_assistant(104);
    let lm = &fresh.cfg.lm;
    let base = without_lora(&fresh.params);
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for i in 0..100 {
        let (prefix, ids) = random_lm_inputs(&mut rng, 8, lm.dim);
        let a = forward_logits(
            &fresh.params,
            lm,
            Some(&fresh.cfg.lora),
            Some(&prefix),
            &ids,
        )
        .unwrap();
        let b = forward_logits(&base, lm, None, Some(&prefix), &ids).unwrap();
        ensure!(
            a.iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            "input {i}: init adapters changed logits"
        );
    }

    let mut trained = desk_assistant(105);
    randomize_lora(&mut trained, 5);
    let merged = merge_lora(&trained.params, &trained.cfg.lora);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (prefix, ids) = random_lm_inputs(&mut rng, 8, lm.dim);
        let a = forward_logits(
            &trained.params,
            lm,
            Some(&trained.cfg.lora),
            Some(&prefix),
            &ids,
        )
        .unwrap();
        let b = forward_logits(&merged, lm, None, Some(&prefix), &ids).unwrap();
        worst = worst.max((&a - &b).iter().map(|v| v.abs()).fold(0.0, f64::max));
    }
    ensure!(worst < 1e-6, "merged forward differs by {worst:e}");
    Ok(format!(
        "frozen hashes equal, init bitwise on 100, merged max diff {worst:.1e}"
    ))
}

fn c4_overfit() -> Outcome {
    let (acc, losses) = overfit(OVERFIT_STEPS);
    ensure!(OVERFIT_STEPS <= 500, "step budget exceeded");
    ensure!(
        acc >= 0.95,
        "closed accuracy {:.1}% after {OVERFIT_STEPS} steps",
        acc * 100.0
    );
    Ok(format!(
        "accuracy {:.0}% after {OVERFIT_STEPS} steps, loss {:.3} -> {:.3}",
        acc * 100.0,
        losses[0],
        losses[losses.len() - 1]
    ))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn c5_schedules() -> Outcome {
    let s = ScheduleSpec::plip(1234);
    let end = s.total_steps;
    let errs = [
        rel(plip_lr(0, &s).unwrap(), 1e-5),
        rel(plip_lr(1000, &s).unwrap(), 1e-4),
        rel(plip_lr(end, &s).unwrap(), 5e-5),
    ];
    ensure!(
        errs.iter().all(|e| *e < 1e-12),
        "plip endpoint errors {errs:?}"
    );
    for (spec, floor) in [
        (ScheduleSpec::alignment(800), 0.0),
        (ScheduleSpec::instruction_lora(800), 1e-6),
    ] {
        ensure!(
            warmup_cosine(0, &spec).unwrap() == spec.init_lr,
            "cosine start"
        );
        ensure!(
            warmup_cosine(spec.warmup_steps, &spec).unwrap() == spec.peak_lr,
            "cosine peak"
        );
        ensure!(
            warmup_cosine(800, &spec).unwrap() == floor,
            "cosine floor {floor}"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for spec in [
        s,
        ScheduleSpec::alignment(800),
        ScheduleSpec::instruction_connector(3000),
    ] {
        let walked = spec.trajectory().unwrap();
        let mut order: Vec<usize> = (0..=spec.total_steps).collect();
        order.shuffle(&mut rng);
        for step in order {
            ensure!(
                spec.lr(step).unwrap().to_bits() == walked[step].to_bits(),
                "step {step} differs"
            );
        }
    }
    Ok("plip endpoints, cosine endpoints and shuffled queries exact".into())
}

fn ids(rs: &[PairRecord]) -> std::collections::BTreeSet<String> {
    rs.iter().map(|r| r.id.clone()).collect()
}

fn conserved(input: usize, out: &FilterOutcome) -> bool {
    out.kept.len() + out.dropped.len() + out.quarantined.len() == input
}

fn c6_pipeline() -> Outcome {
    let corpus = labeled_pair_corpus(100, 42, Source::Quilt);
    let judge = MockJudge::default();
    let opts = FilterOptions::default();
    let a =
        filter_nonpath_images(corpus.records.clone(), &judge, &opts).map_err(|e| e.to_string())?;
    ensure!(
        ids(&a.dropped) == corpus.nonpath,
        "image filter disagrees with labels"
    );
    let b = filter_nonhuman_text(a.kept, &judge, &opts).map_err(|e| e.to_string())?;
    ensure!(
        ids(&b.dropped) == corpus.nonhuman,
        "text filter disagrees with labels"
    );
    let c = filter_min_words(b.kept, 20).map_err(|e| e.to_string())?;
    ensure!(
        ids(&c.dropped) == corpus.short,
        "length filter disagrees with labels"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let flaky = FnJudge(move |req: &JudgeRequest| {
        let h = req
            .record_id
            .bytes()
            .fold(7u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
        match h % 10 {
            0 => Err(pathvlm::Error::Judge("timeout".into())),
            1 => Ok("maybe".into()),
            _ => MockJudge::default().complete(req),
        }
    });
    let opts = FilterOptions {
        retry: RetryPolicy {
            retry_budget: 1,
            backoff_ms: 0,
        },
        ..FilterOptions::default()
    };
    for case in 0..1000 {
        let records = fuzz_corpus(&mut rng, case);
        let n = records.len();
        let a = filter_nonpath_images(records, &flaky, &opts).map_err(|e| e.to_string())?;
        ensure!(conserved(n, &a), "case {case}: image stage lost records");
        let n = a.kept.len();
        let b = filter_nonhuman_text(a.kept, &flaky, &opts).map_err(|e| e.to_string())?;
        ensure!(conserved(n, &b), "case {case}: text stage lost records");
        let n = b.kept.len();
        let c = filter_min_words(b.kept, 20).map_err(|e| e.to_string())?;
        ensure!(conserved(n, &c), "case {case}: length stage lost records");
    }

    let merged = merge_stats(&[
        ManifestStats::for_source("quilt", 584_195, 584_195),
        ManifestStats::for_source("pmc_oa", 110_233, 110_233),
        ManifestStats::for_source("pubmedvision", 132_973, 132_973),
    ]);
    ensure!(
        merged.total_output == 827_401,
        "pretraining total {}",
        merged.total_output
    );
    let row = |i: usize| VqaRecord {
        id: format!("{i}"),
        image_ref: "synth:0:0:8x8".into(),
        question: "Is this normal?".into(),
        answer: "yes".into(),
        kind: VqaKind::Closed,
        choices: Some(BTreeMap::from([
            ("A".into(), "yes".into()),
            ("B".into(), "no".into()),
        ])),
        source: None,
    };
    let (rows, _) = assemble_vqa_train(
        (0..19_755).map(row).collect(),
        (0..15_788).map(row).collect(),
    )
    .map_err(|e| e.to_string())?;
    ensure!(rows.len() == 35_543, "instruction total {}", rows.len());
    Ok("labels matched, 1000 corpora conserved, 827,401 and 35,543".into())
}

fn c7_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for i in 0..1000 {
        let (items, classes) = zero_shot_fixture(&mut rng);
        let got = zero_shot_metrics(&items, &classes).map_err(|e| e.to_string())?;
        let want = confusion_oracle(&items, &classes);
        ensure!(
            got.accuracy == want.accuracy
                && got.recall == want.recall
                && got.precision == want.precision,
            "fixture {i} differs"
        );
    }
    let mut cases = 0;
    for line in include_str!("fixtures/open_recall.tsv")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
    {
        let cols: Vec<&str> = line.split('\t').collect();
        let (num, den) = cols[2].split_once('/').ok_or("bad fixture line")?;
        let want = num.parse::<f64>().unwrap() / den.parse::<f64>().unwrap();
        let got = open_recall(cols[0], cols[1]).map_err(|e| e.to_string())?;
        ensure!(got == want, "{line:?}: {got} vs {want}");
        cases += 1;
    }
    ensure!(cases == 30, "fixture has {cases} cases");
    let prompts: Vec<&str> = include_str!("fixtures/zero_shot_prompts.txt")
        .lines()
        .collect();
    ensure!(
        prompts == [BACH_PROMPT, OSCC_PROMPT, COLONPATH_PROMPT],
        "zero-shot prompts differ"
    );
    Ok("1000 confusion fixtures, 30 recall cases, 3 prompts exact".into())
}

fn pathvlm(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_pathvlm"))
        .args(args)
        .env_remove("PATHVLM_JUDGE_ENDPOINT")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    Ok(())
}

/// Runs fixtures and every stage; returns each stage's manifest bytes.
fn desk_pipeline(root: &Path, seed: u64) -> Result<Vec<(String, Vec<u8>)>, String> {
    let r = root.to_str().unwrap();
    pathvlm(&["fixtures", "--out", r, "--seed", &seed.to_string()])?;
    let mut manifests = Vec::new();
    for (command, config) in DESK_STAGES {
        let config = root.join("configs").join(config);
        let out = stage_dir(root, command);
        pathvlm(&[
            command,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])?;
        let bytes = fs::read(out.join(RUN_MANIFEST)).map_err(|e| e.to_string())?;
        manifests.push((command.to_string(), bytes));
    }
    Ok(manifests)
}

fn c8_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = desk_pipeline(&dir.path().join("a"), 7)?;
    let b = desk_pipeline(&dir.path().join("b"), 7)?;
    let mut files = 0;
    for ((cmd, x), (_, y)) in a.iter().zip(&b) {
        ensure!(x == y, "{cmd}: run manifests differ");
        let m: pathvlm::cli::RunManifest = serde_json::from_slice(x).map_err(|e| e.to_string())?;
        ensure!(!m.outputs.is_empty(), "{cmd}: no outputs recorded");
        files += m.outputs.len();
    }
    Ok(format!("6 stages, {files} output hashes identical"))
}

struct Criterion {
    id: u8,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "loss correctness",
            limit: Some(Duration::from_secs(10)),
            run: c1_losses,
        },
        Criterion {
            id: 2,
            name: "connector invariance",
            limit: Some(Duration::from_secs(60)),
            run: c2_connector,
        },
        Criterion {
            id: 3,
            name: "freezing and adapters",
            limit: None,
            run: c3_freezing,
        },
        Criterion {
            id: 4,
            name: "desk overfit",
            limit: Some(Duration::from_secs(300)),
            run: c4_overfit,
        },
        Criterion {
            id: 5,
            name: "schedules",
            limit: None,
            run: c5_schedules,
        },
        Criterion {
            id: 6,
            name: "pipeline accounting",
            limit: None,
            run: c6_pipeline,
        },
        Criterion {
            id: 7,
            name: "metric oracles",
            limit: None,
            run: c7_metrics,
        },
        Criterion {
            id: 8,
            name: "end-to-end determinism",
            limit: Some(Duration::from_secs(600)),
            run: c8_determinism,
        },
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took longer than {limit:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS {} {}: {detail} ({:.2?})", c.id, c.name, elapsed),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {}: {detail} ({:.2?})", c.id, c.name, elapsed);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
