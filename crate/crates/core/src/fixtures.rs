//! Synthetic corpora with known labels, in the same schemas as the real
//! datasets. Images are procedural `synth:` references, so fixtures are a
//! few kilobytes of JSON.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    write_jsonl, ClassificationSpec, LabeledImage, PairRecord, Source, VqaKind, VqaRecord,
};
use crate::error::{Error, Result};
use crate::image::{SynthSpec, SYNTH_COLORS, SYNTH_ORIENTATIONS};

const STAININGS: [&str; 3] = [
    "Hematoxylin and eosin stained",
    "Routine H&E",
    "Formalin fixed and stained",
];
const SITES: [&str; 5] = ["breast", "colon", "oral mucosa", "liver", "skin"];
const ORGANISMS: [&str; 5] = ["murine", "canine", "porcine", "zebrafish", "rat"];

fn random_spec(rng: &mut ChaCha8Rng, style: Option<u32>) -> SynthSpec {
    SynthSpec {
        style: style.unwrap_or_else(|| rng.gen_range(0..32)),
        seed: rng.gen_range(0..1_000_000),
        height: rng.gen_range(40..=96),
        width: rng.gen_range(40..=96),
    }
}

/// A caption of at least 20 words describing the rendered pattern.
pub fn long_caption(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> String {
    format!(
        "{} section of human {} showing {} tissue with {} {} stripes across the field, \
         examined under the light microscope at moderate magnification with well preserved architecture.",
        STAININGS.choose(rng).expect("non-empty"),
        SITES.choose(rng).expect("non-empty"),
        spec.color(),
        spec.orientation(),
        spec.texture(),
    )
}

/// Records plus the ids each filter is expected to drop.
#[derive(Clone, Debug, Default)]
pub struct LabeledCorpus {
    pub records: Vec<PairRecord>,
    pub nonpath: BTreeSet<String>,
    pub nonhuman: BTreeSet<String>,
    pub short: BTreeSet<String>,
}

/// `n` records: roughly 15% non-pathology images (ids tagged `xray_`),
/// 15% non-human captions, 15% short captions, the rest clean. A record
/// carries at most one defect.
pub fn labeled_pair_corpus(n: usize, seed: u64, source: Source) -> LabeledCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LabeledCorpus::default();
    for i in 0..n {
        let spec = random_spec(&mut rng, None);
        let roll: f64 = rng.gen();
        let mut caption = long_caption(&spec, &mut rng);
        let id;
        if roll < 0.15 {
            id = format!("xray_{i:05}");
            out.nonpath.insert(id.clone());
        } else if roll < 0.30 {
            id = format!("img_{i:05}");
            let org = ORGANISMS.choose(&mut rng).expect("non-empty");
            caption = caption.replacen("section of human", &format!("section of {org}"), 1);
            out.nonhuman.insert(id.clone());
        } else if roll < 0.45 {
            id = format!("img_{i:05}");
            caption = format!(
                "{} {} tissue, {} stripes.",
                spec.color(),
                spec.texture(),
                spec.orientation()
            );
            out.short.insert(id.clone());
        } else {
            id = format!("img_{i:05}");
        }
        out.records
            .push(PairRecord::new(id, spec.to_ref(), caption, source));
    }
    out
}

fn letters(options: &[&str]) -> BTreeMap<String, String> {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| (((b'A' + i as u8) as char).to_string(), o.to_string()))
        .collect()
}

pub fn color_question() -> String {
    let opts: Vec<String> = SYNTH_COLORS
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}:{c}", (b'A' + i as u8) as char))
        .collect();
    format!("What color is the tissue? {}", opts.join(" "))
}

/// A closed colour question about one image, answered by its letter.
pub fn color_vqa(id: String, spec: &SynthSpec) -> VqaRecord {
    let choices = letters(&SYNTH_COLORS);
    let letter = ((b'A' + (spec.style % 4) as u8) as char).to_string();
    VqaRecord {
        id,
        image_ref: spec.to_ref(),
        question: color_question(),
        answer: letter,
        kind: VqaKind::Closed,
        choices: Some(choices),
        source: None,
    }
}

/// Mixed closed (colour, orientation) and open (texture) questions.
pub fn synth_vqa_set(n: usize, seed: u64, prefix: &str) -> Vec<VqaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let spec = random_spec(&mut rng, None);
            let id = format!("{prefix}{i:04}");
            match i % 3 {
                0 => color_vqa(id, &spec),
                1 => VqaRecord {
                    id,
                    image_ref: spec.to_ref(),
                    question: "Are the stripes horizontal or vertical? A:horizontal B:vertical"
                        .into(),
                    answer: if spec.orientation() == SYNTH_ORIENTATIONS[0] {
                        "A"
                    } else {
                        "B"
                    }
                    .into(),
                    kind: VqaKind::Closed,
                    choices: Some(letters(&SYNTH_ORIENTATIONS)),
                    source: None,
                },
                _ => VqaRecord {
                    id,
                    image_ref: spec.to_ref(),
                    question: "Describe the stripe pattern.".into(),
                    answer: format!("{} {} stripes", spec.texture(), spec.orientation()),
                    kind: VqaKind::Open,
                    choices: None,
                    source: None,
                },
            }
        })
        .collect()
}

/// A BACH-style dataset whose class is the image colour.
pub fn synth_classification(name: &str, n: usize, seed: u64) -> ClassificationSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = ["A", "B", "C", "D"];
    ClassificationSpec {
        name: name.to_string(),
        prompt: None,
        classes: Vec::new(),
        images: (0..n)
            .map(|i| {
                let style = (i % 4) as u32 + 4 * rng.gen_range(0..8);
                let spec = random_spec(&mut rng, Some(style));
                LabeledImage {
                    id: Some(format!("{i:04}")),
                    image_ref: spec.to_ref(),
                    label: classes[i % 4].to_string(),
                }
            })
            .collect(),
    }
}

/// Stage configs written by [`write_desk_fixtures`], in pipeline order.
pub const DESK_STAGES: [(&str, &str); 6] = [
    ("clean", "clean.toml"),
    ("train-plip", "train_plip.toml"),
    ("align", "align.toml"),
    ("finetune", "finetune.toml"),
    ("eval", "eval.toml"),
    ("zeroshot", "zeroshot.toml"),
];

/// Run directory of each stage under the fixture root.
pub fn stage_dir(root: &Path, command: &str) -> std::path::PathBuf {
    root.join("runs").join(command)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes source manifests, VQA sets, a zero-shot dataset and one config
/// per pipeline stage. Each config reads the previous stage's outputs from
/// `runs/<command>/`.
pub fn write_desk_fixtures(root: &Path, seed: u64) -> Result<()> {
    let quilt = labeled_pair_corpus(48, seed, Source::Quilt);
    let pmc = labeled_pair_corpus(24, seed + 1, Source::PmcOa);
    // Added after cleaning, so only defect-free rows.
    let pv = labeled_pair_corpus(16, seed + 2, Source::Pubmedvision);
    let mut pubmedvision = pv.records.clone();
    pubmedvision.retain(|r| {
        !pv.nonpath.contains(&r.id) && !pv.nonhuman.contains(&r.id) && !pv.short.contains(&r.id)
    });
    write_jsonl(&root.join("sources/quilt.jsonl"), &quilt.records)?;
    write_jsonl(&root.join("sources/pmc_oa.jsonl"), &pmc.records)?;
    write_jsonl(&root.join("sources/pubmedvision.jsonl"), &pubmedvision)?;
    write_jsonl(
        &root.join("vqa/pathvqa.jsonl"),
        &synth_vqa_set(18, seed + 3, "pv"),
    )?;
    write_jsonl(
        &root.join("vqa/pmc_vqa.jsonl"),
        &synth_vqa_set(12, seed + 4, "pm"),
    )?;
    write_jsonl(
        &root.join("vqa/test.jsonl"),
        &synth_vqa_set(12, seed + 5, "test"),
    )?;
    let bach = synth_classification("BACH", 12, seed + 6);
    write(
        &root.join("zeroshot/bach.json"),
        &serde_json::to_string_pretty(&bach)?,
    )?;

    let configs = [
        (
            "clean.toml",
            r#"min_words = 20
max_quarantine_fraction = 0.05

[[sources]]
path = "../sources/quilt.jsonl"

[[sources]]
path = "../sources/pmc_oa.jsonl"

[[sources]]
path = "../sources/pubmedvision.jsonl"
clean = false

[judge]
kind = "mock"
"#,
        ),
        (
            "train_plip.toml",
            r#"manifest = "../runs/clean/manifest.jsonl"
steps = 40

[train]
batch_size = 8
"#,
        ),
        (
            "align.toml",
            r#"plip_checkpoint = "../runs/train-plip/checkpoint"
manifest = "../runs/clean/manifest.jsonl"
steps = 30
micro_batch = 2
accum = 2
"#,
        ),
        (
            "finetune.toml",
            r#"checkpoint = "../runs/align/checkpoint"
pathvqa = "../vqa/pathvqa.jsonl"
pmc_vqa = "../vqa/pmc_vqa.jsonl"
steps = 40
micro_batch = 2
accum = 2
"#,
        ),
        (
            "eval.toml",
            r#"checkpoint = "../runs/finetune/checkpoint"
records = "../vqa/test.jsonl"
max_new_tokens = 12
judge_scores = true

[judge]
kind = "mock"
"#,
        ),
        (
            "zeroshot.toml",
            r#"checkpoint = "../runs/finetune/checkpoint"
dataset = "../zeroshot/bach.json"
max_new_tokens = 4
"#,
        ),
    ];
    for (name, text) in configs {
        write(
            &root.join("configs").join(name),
            &format!("seed = {seed}\n{text}"),
        )?;
    }
    Ok(())
}
