//! Dataset curation: manifest records, judge-based and length filters,
//! source merging with count accounting, alignment-QA construction, VQA
//! assembly and classification → multiple-choice conversion.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::judge::{
    ask_verdict, JudgeClient, JudgeRequest, JudgeTask, RetryPolicy, Verdict, IMAGE_JUDGE_PROMPT,
    TEXT_JUDGE_PROMPT,
};

pub const STAGE_NONPATH_IMAGE: &str = "nonpath_image";
pub const STAGE_NONHUMAN_TEXT: &str = "nonhuman_text";
pub const STAGE_MIN_WORDS: &str = "min_words";
pub const DEFAULT_MIN_WORDS: usize = 20;

/// The ten alignment question templates shipped with the crate.
pub const ALIGNMENT_TEMPLATES: &str = include_str!("../data/alignment_questions.txt");

pub fn default_templates() -> Vec<String> {
    ALIGNMENT_TEMPLATES
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Quilt,
    PmcOa,
    Pubmedvision,
    Other,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Quilt => "quilt",
            Source::PmcOa => "pmc_oa",
            Source::Pubmedvision => "pubmedvision",
            Source::Other => "other",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStep {
    pub stage: String,
    /// `kept`, `dropped` or `quarantined`.
    pub verdict: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    pub image_ref: String,
    pub caption: String,
    pub source: Source,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub filter_trail: Vec<FilterStep>,
}

impl PairRecord {
    pub fn new(
        id: impl Into<String>,
        image_ref: impl Into<String>,
        caption: impl Into<String>,
        source: Source,
    ) -> Self {
        Self {
            id: id.into(),
            image_ref: image_ref.into(),
            caption: caption.into(),
            source,
            split: Split::Train,
            filter_trail: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(invalid!("record with empty id"));
        }
        if self.image_ref.trim().is_empty() {
            return Err(invalid!("record `{}` has no image reference", self.id));
        }
        if self.caption.trim().is_empty() {
            return Err(invalid!("record `{}` has an empty caption", self.id));
        }
        Ok(())
    }

    fn trail(&mut self, stage: &str, verdict: &str, note: Option<String>) {
        self.filter_trail.push(FilterStep {
            stage: stage.to_string(),
            verdict: verdict.to_string(),
            note,
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqaKind {
    Open,
    Closed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaRecord {
    pub id: String,
    pub image_ref: String,
    pub question: String,
    pub answer: String,
    pub kind: VqaKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

fn collapse(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Letter of `answer` within `choices`: the answer may be a letter (with an
/// optional `:`, `.` or `)`), start with such a letter, or equal a choice text.
pub fn answer_letter(answer: &str, choices: &BTreeMap<String, String>) -> Option<String> {
    let a = answer.trim();
    let bare = a.trim_end_matches([':', '.', ')']);
    if let Some(k) = choices.keys().find(|k| k.eq_ignore_ascii_case(bare)) {
        return Some(k.clone());
    }
    for k in choices.keys() {
        for sep in [':', '.', ')'] {
            if let Some(rest) = a.strip_prefix(k.as_str()) {
                if rest.starts_with(sep) {
                    return Some(k.clone());
                }
            }
        }
    }
    let norm = collapse(a);
    choices
        .iter()
        .find(|(_, text)| collapse(text) == norm)
        .map(|(k, _)| k.clone())
}

impl VqaRecord {
    pub fn gold_letter(&self) -> Option<String> {
        answer_letter(&self.answer, self.choices.as_ref()?)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.id;
        if id.trim().is_empty() {
            return Err(invalid!("VQA row with empty id"));
        }
        if self.image_ref.trim().is_empty() {
            return Err(invalid!("VQA row `{id}` has no image reference"));
        }
        if self.question.trim().is_empty() {
            return Err(invalid!("VQA row `{id}` has an empty question"));
        }
        if self.answer.trim().is_empty() {
            return Err(invalid!("VQA row `{id}` has an empty answer"));
        }
        match (self.kind, &self.choices) {
            (VqaKind::Open, Some(_)) => Err(invalid!("open VQA row `{id}` must not carry choices")),
            (VqaKind::Closed, None) => Err(invalid!("closed VQA row `{id}` is missing choices")),
            (VqaKind::Closed, Some(c)) if c.is_empty() => {
                Err(invalid!("closed VQA row `{id}` has no choices"))
            }
            (VqaKind::Closed, Some(_)) if self.gold_letter().is_none() => Err(invalid!(
                "closed VQA row `{id}`: answer `{}` is not one of its choices",
                self.answer
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<PairRecord>,
    pub dropped: Vec<PairRecord>,
    pub quarantined: Vec<PairRecord>,
}

impl FilterOutcome {
    pub fn total(&self) -> usize {
        self.kept.len() + self.dropped.len() + self.quarantined.len()
    }

    fn sort(&mut self) {
        for v in [&mut self.kept, &mut self.dropped, &mut self.quarantined] {
            v.sort_by(|a, b| a.id.cmp(&b.id));
        }
    }

    /// Fails when more than `limit` (a fraction) of the records were quarantined.
    pub fn check_quorum(&self, limit: f64) -> Result<()> {
        let total = self.total();
        if total > 0 && self.quarantined.len() as f64 > limit * total as f64 {
            return Err(Error::JudgeQuorum {
                quarantined: self.quarantined.len(),
                total,
                limit,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterOptions {
    pub retry: RetryPolicy,
    /// Maximum judge calls in flight.
    pub workers: usize,
    pub image_prompt: String,
    pub text_prompt: String,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            workers: 4,
            image_prompt: IMAGE_JUDGE_PROMPT.to_string(),
            text_prompt: TEXT_JUDGE_PROMPT.to_string(),
        }
    }
}

/// Maps `f` over `items` on up to `workers` threads, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .expect("every slot filled")
        })
        .collect()
}

enum Decision {
    Keep,
    Drop,
    Quarantine(String),
}

fn judge_filter(
    records: Vec<PairRecord>,
    judge: &dyn JudgeClient,
    stage: &str,
    task: JudgeTask,
    prompt: &str,
    opts: &FilterOptions,
) -> Result<FilterOutcome> {
    for r in &records {
        r.validate()?;
    }
    let decisions = parallel_map(&records, opts.workers, |r| {
        let req = JudgeRequest {
            task,
            record_id: r.id.clone(),
            prompt: prompt.to_string(),
            text: (task == JudgeTask::NonHumanText).then(|| r.caption.clone()),
            reference: None,
            image_ref: (task == JudgeTask::NonPathImage).then(|| r.image_ref.clone()),
        };
        match ask_verdict(judge, &req, &opts.retry) {
            Ok((Verdict::Yes, _)) => Decision::Drop,
            Ok((Verdict::No, _)) => Decision::Keep,
            Err(e) => Decision::Quarantine(e.to_string()),
        }
    });
    let mut out = FilterOutcome::default();
    for (mut r, d) in records.into_iter().zip(decisions) {
        match d {
            Decision::Keep => {
                r.trail(stage, "kept", None);
                out.kept.push(r);
            }
            Decision::Drop => {
                r.trail(stage, "dropped", None);
                out.dropped.push(r);
            }
            Decision::Quarantine(why) => {
                r.trail(stage, "quarantined", Some(why));
                out.quarantined.push(r);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Drops every record whose image the judge calls non-pathological.
pub fn filter_nonpath_images(
    records: Vec<PairRecord>,
    judge: &dyn JudgeClient,
    opts: &FilterOptions,
) -> Result<FilterOutcome> {
    judge_filter(
        records,
        judge,
        STAGE_NONPATH_IMAGE,
        JudgeTask::NonPathImage,
        &opts.image_prompt,
        opts,
    )
}

/// Drops every record whose caption the judge says involves non-human organisms.
pub fn filter_nonhuman_text(
    records: Vec<PairRecord>,
    judge: &dyn JudgeClient,
    opts: &FilterOptions,
) -> Result<FilterOutcome> {
    judge_filter(
        records,
        judge,
        STAGE_NONHUMAN_TEXT,
        JudgeTask::NonHumanText,
        &opts.text_prompt,
        opts,
    )
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps captions with at least `threshold` whitespace-separated words.
pub fn filter_min_words(records: Vec<PairRecord>, threshold: usize) -> Result<FilterOutcome> {
    if threshold == 0 {
        return Err(Error::Config("word threshold must be >= 1".into()));
    }
    let mut out = FilterOutcome::default();
    for mut r in records {
        if word_count(&r.caption) >= threshold {
            r.trail(STAGE_MIN_WORDS, "kept", None);
            out.kept.push(r);
        } else {
            r.trail(STAGE_MIN_WORDS, "dropped", None);
            out.dropped.push(r);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub input: usize,
    pub output: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub stage: String,
    pub input: usize,
    pub dropped: usize,
    pub quarantined: usize,
    pub output: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub sources: BTreeMap<String, Counts>,
    pub stages: Vec<StageCounts>,
    pub total_input: usize,
    pub total_output: usize,
}

impl ManifestStats {
    /// Stats of one source that entered with `input` rows and left with `output`.
    pub fn for_source(source: &str, input: usize, output: usize) -> Self {
        Self {
            sources: BTreeMap::from([(source.to_string(), Counts { input, output })]),
            stages: Vec::new(),
            total_input: input,
            total_output: output,
        }
    }

    pub fn record_stage(&mut self, stage: &str, outcome: &FilterOutcome) {
        self.stages.push(StageCounts {
            stage: stage.to_string(),
            input: outcome.total(),
            dropped: outcome.dropped.len(),
            quarantined: outcome.quarantined.len(),
            output: outcome.kept.len(),
        });
    }

    /// Checks the accounting identities.
    pub fn check(&self) -> Result<()> {
        for s in &self.stages {
            if s.output + s.dropped + s.quarantined != s.input {
                return Err(invalid!(
                    "stage `{}`: {} in but {} kept + {} dropped + {} quarantined",
                    s.stage,
                    s.input,
                    s.output,
                    s.dropped,
                    s.quarantined
                ));
            }
        }
        let out: usize = self.sources.values().map(|c| c.output).sum();
        let inp: usize = self.sources.values().map(|c| c.input).sum();
        if out != self.total_output || inp != self.total_input {
            return Err(invalid!(
                "totals {}/{} disagree with per-source sums {inp}/{out}",
                self.total_input,
                self.total_output
            ));
        }
        Ok(())
    }
}

/// Sums per-source counts; sources appearing in several parts add up.
pub fn merge_stats(parts: &[ManifestStats]) -> ManifestStats {
    let mut out = ManifestStats::default();
    for p in parts {
        for (src, c) in &p.sources {
            let e = out.sources.entry(src.clone()).or_default();
            e.input += c.input;
            e.output += c.output;
        }
        out.stages.extend(p.stages.iter().cloned());
    }
    out.total_input = out.sources.values().map(|c| c.input).sum();
    out.total_output = out.sources.values().map(|c| c.output).sum();
    out
}

/// Concatenates manifests, prefixing every id with `<source>:`. Output is
/// sorted by id; a repeated id is an error.
pub fn merge_sources(manifests: Vec<Vec<PairRecord>>) -> Result<(Vec<PairRecord>, ManifestStats)> {
    let mut seen = BTreeSet::new();
    let mut merged = Vec::new();
    let mut parts = Vec::new();
    for m in manifests {
        let mut per_source: BTreeMap<&'static str, usize> = BTreeMap::new();
        for mut r in m {
            let prefix = format!("{}:", r.source.as_str());
            if !r.id.starts_with(&prefix) {
                r.id = format!("{prefix}{}", r.id);
            }
            if !seen.insert(r.id.clone()) {
                return Err(invalid!(
                    "duplicate record id `{}` after source prefixing",
                    r.id
                ));
            }
            *per_source.entry(r.source.as_str()).or_default() += 1;
            merged.push(r);
        }
        parts.extend(
            per_source
                .into_iter()
                .map(|(s, n)| ManifestStats::for_source(s, n, n)),
        );
    }
    merged.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((merged, merge_stats(&parts)))
}

/// One open question per record: a seeded uniform template draw, answered
/// by the record's caption.
pub fn build_alignment_qa(
    records: &[PairRecord],
    templates: &[String],
    seed: u64,
) -> Result<Vec<VqaRecord>> {
    if templates.is_empty() {
        return Err(Error::Config("alignment question set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records
        .iter()
        .map(|r| {
            r.validate()?;
            let q = &templates[rng.gen_range(0..templates.len())];
            Ok(VqaRecord {
                id: format!("align:{}", r.id),
                image_ref: r.image_ref.clone(),
                question: q.clone(),
                answer: r.caption.clone(),
                kind: VqaKind::Open,
                choices: None,
                source: Some("alignment".into()),
            })
        })
        .collect()
}

/// Source-tagged concatenation of the two instruction sets.
pub fn assemble_vqa_train(
    pathvqa: Vec<VqaRecord>,
    pmc: Vec<VqaRecord>,
) -> Result<(Vec<VqaRecord>, ManifestStats)> {
    let mut out = Vec::with_capacity(pathvqa.len() + pmc.len());
    let mut seen = BTreeSet::new();
    let mut parts = Vec::new();
    for (tag, rows) in [("pathvqa", pathvqa), ("pmc_vqa", pmc)] {
        let n = rows.len();
        for mut r in rows {
            r.validate()
                .map_err(|e| invalid!("{tag} row `{}` rejected: {e}", r.id))?;
            let prefix = format!("{tag}:");
            if !r.id.starts_with(&prefix) {
                r.id = format!("{prefix}{}", r.id);
            }
            if !seen.insert(r.id.clone()) {
                return Err(invalid!("duplicate VQA id `{}`", r.id));
            }
            r.source = Some(tag.to_string());
            out.push(r);
        }
        parts.push(ManifestStats::for_source(tag, n, n));
    }
    Ok((out, merge_stats(&parts)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassChoice {
    pub letter: String,
    pub text: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledImage {
    #[serde(default)]
    pub id: Option<String>,
    pub image_ref: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationSpec {
    pub name: String,
    /// Required for datasets without a built-in prompt.
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub classes: Vec<ClassChoice>,
    pub images: Vec<LabeledImage>,
}

pub const BACH_PROMPT: &str = "What choice best describes this breast tissue? Just give your choice: A:Normal tissue  B: Benign tumors C: In situ cancer D: Invasive cancer";
pub const OSCC_PROMPT: &str = "What choice best describes this oral epithelium tissue? Just give your choice: A:Normal oral epithelium  B:Oral squamous cell carcinoma";
pub const COLONPATH_PROMPT: &str = "What choice best describes this colon tissue? Just give your choice: A:Normal tissue B:Tumor tissue";

fn choice(letter: &str, text: &str, aliases: &[&str]) -> ClassChoice {
    ClassChoice {
        letter: letter.into(),
        text: text.into(),
        aliases: aliases.iter().map(|s| s.to_string()).collect(),
    }
}

/// Prompt and classes of the three built-in zero-shot datasets.
pub fn builtin_dataset(name: &str) -> Option<(&'static str, Vec<ClassChoice>)> {
    match name.to_ascii_lowercase().as_str() {
        "bach" => Some((
            BACH_PROMPT,
            vec![
                choice("A", "Normal tissue", &["normal"]),
                choice("B", "Benign tumors", &["benign"]),
                choice("C", "In situ cancer", &["in situ", "insitu", "in_situ"]),
                choice("D", "Invasive cancer", &["invasive"]),
            ],
        )),
        "oscc" => Some((
            OSCC_PROMPT,
            vec![
                choice("A", "Normal oral epithelium", &["normal"]),
                choice(
                    "B",
                    "Oral squamous cell carcinoma",
                    &["oscc", "carcinoma", "tumor"],
                ),
            ],
        )),
        "colonpath" => Some((
            COLONPATH_PROMPT,
            vec![
                choice("A", "Normal tissue", &["normal"]),
                choice("B", "Tumor tissue", &["tumor"]),
            ],
        )),
        _ => None,
    }
}

fn resolve_label(label: &str, classes: &[ClassChoice]) -> Option<String> {
    let l = collapse(label);
    classes
        .iter()
        .find(|c| {
            c.letter.eq_ignore_ascii_case(label.trim())
                || collapse(&c.text) == l
                || c.aliases.iter().any(|a| collapse(a) == l)
        })
        .map(|c| c.letter.clone())
}

/// One closed multiple-choice record per image, answered by the gold letter.
pub fn classification_to_vqa(spec: &ClassificationSpec) -> Result<Vec<VqaRecord>> {
    let (prompt, classes) = match (builtin_dataset(&spec.name), &spec.prompt) {
        (_, Some(p)) if !spec.classes.is_empty() => (p.clone(), spec.classes.clone()),
        (Some((p, c)), _) => (
            p.to_string(),
            if spec.classes.is_empty() {
                c
            } else {
                spec.classes.clone()
            },
        ),
        (None, _) => {
            return Err(Error::Config(format!(
                "dataset `{}` has no built-in prompt; give both `prompt` and `classes`",
                spec.name
            )))
        }
    };
    let choices: BTreeMap<String, String> = classes
        .iter()
        .map(|c| (c.letter.clone(), c.text.clone()))
        .collect();
    let source = spec.name.to_ascii_lowercase();
    spec.images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let letter = resolve_label(&img.label, &classes).ok_or_else(|| {
                invalid!(
                    "image {} of `{}` has label `{}` outside the declared classes",
                    img.id.clone().unwrap_or_else(|| i.to_string()),
                    spec.name,
                    img.label
                )
            })?;
            let local = img.id.clone().unwrap_or_else(|| format!("{i:06}"));
            Ok(VqaRecord {
                id: format!("{source}:{local}"),
                image_ref: img.image_ref.clone(),
                question: prompt.clone(),
                answer: letter,
                kind: VqaKind::Closed,
                choices: Some(choices.clone()),
                source: Some(source.clone()),
            })
        })
        .collect()
}

/// Reads one JSON value per non-empty line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Validation {
                field: format!("{}:{}", path.display(), i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
