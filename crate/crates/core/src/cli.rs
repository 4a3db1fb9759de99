//! Command-line front end. Every command reads one declarative config
//! (TOML, JSON, or a previous run manifest), writes its artifacts to
//! `--out`, and finishes with a `run_manifest.json` that records the
//! effective config, the seed and content hashes of inputs and outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::assistant::{train_stage, Assistant, StageConfig, VqaExample};
use crate::checkpoint::Checkpoint;
use crate::connector::ConnectorConfig;
use crate::data::{
    self, assemble_vqa_train, build_alignment_qa, classification_to_vqa, filter_min_words,
    filter_nonhuman_text, filter_nonpath_images, merge_sources, merge_stats, read_jsonl,
    write_jsonl, ClassificationSpec, FilterOptions, ManifestStats, PairRecord, VqaRecord,
    STAGE_MIN_WORDS, STAGE_NONHUMAN_TEXT, STAGE_NONPATH_IMAGE,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_vqa, judge_alignment_score, Generation, ZeroShotReport};
use crate::image::load_image;
use crate::judge::{JudgeClient, MockJudge, RemoteJudge, RetryPolicy};
use crate::lm::{LmConfig, LoraConfig};
use crate::plip::{train_plip, PlipConfig, PlipModel, PlipTrainOptions};
use crate::schedules::{ScheduleKind, ScheduleSpec};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "pathvlm",
    version,
    about = "Desk-scale pathology vision-language assistant"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Judge-filter, length-filter and merge image-caption manifests.
    Clean(RunArgs),
    /// Contrastive + matching pretraining of the image/text towers.
    TrainPlip(RunArgs),
    /// Caption-generation alignment of the connector and adapters.
    Align(RunArgs),
    /// VQA instruction tuning of the connector and adapters.
    Finetune(RunArgs),
    /// Generate answers for a VQA set and score them.
    Eval(RunArgs),
    /// Multiple-choice classification of a labeled image set.
    Zeroshot(RunArgs),
    /// Write synthetic fixtures plus one config per pipeline stage.
    Fixtures(FixtureArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Clean(_) => "clean",
            Command::TrainPlip(_) => "train-plip",
            Command::Align(_) => "align",
            Command::Finetune(_) => "finetune",
            Command::Eval(_) => "eval",
            Command::Zeroshot(_) => "zeroshot",
            Command::Fixtures(_) => "fixtures",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Stage config (TOML or JSON) or a run manifest to replay.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Model-size defaults for sections the config leaves out.
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Overrides the config's judge kind.
    #[arg(long, value_enum)]
    pub judge: Option<JudgeKind>,
}

#[derive(Debug, Clone, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    Mock,
    Remote,
}

/// 2 for bad configs, 3 for judge failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation { .. } | Error::Config(_) => 2,
        Error::JudgeQuorum { .. } | Error::Judge(_) => 3,
        _ => 1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub profile: Profile,
    pub seed: u64,
    /// Effective config; paths are relative to the manifest's directory.
    pub config: Value,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeConfig {
    pub kind: JudgeKind,
    /// Used when the endpoint environment variable is unset.
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub mock: MockJudge,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            kind: JudgeKind::Mock,
            endpoint: None,
            model: "judge".into(),
            timeout_secs: 30,
            mock: MockJudge::default(),
        }
    }
}

impl JudgeConfig {
    fn build(&self, base_dir: Option<PathBuf>) -> Result<Box<dyn JudgeClient>> {
        Ok(match self.kind {
            JudgeKind::Mock => Box::new(self.mock.clone()),
            JudgeKind::Remote => Box::new(RemoteJudge::from_env(
                self.endpoint.as_deref(),
                &self.model,
                Duration::from_secs(self.timeout_secs),
                base_dir,
            )?),
        })
    }
}

fn default_true() -> bool {
    true
}

fn default_min_words() -> usize {
    data::DEFAULT_MIN_WORDS
}

fn default_quarantine() -> f64 {
    0.05
}

fn default_one() -> usize {
    1
}

fn default_micro_batch() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub path: PathBuf,
    /// Sources added after cleaning set this to false.
    #[serde(default = "default_true")]
    pub clean: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleanConfig {
    #[serde(default)]
    pub seed: u64,
    pub sources: Vec<SourceEntry>,
    #[serde(default = "default_min_words")]
    pub min_words: usize,
    #[serde(default = "default_quarantine")]
    pub max_quarantine_fraction: f64,
    #[serde(default)]
    pub filter: FilterOptions,
    #[serde(default)]
    pub judge: JudgeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlipConfig {
    #[serde(default)]
    pub seed: u64,
    pub manifest: PathBuf,
    pub steps: usize,
    pub model: PlipConfig,
    #[serde(default)]
    pub train: PlipTrainOptions,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    #[serde(default)]
    pub seed: u64,
    pub plip_checkpoint: PathBuf,
    pub manifest: PathBuf,
    #[serde(default)]
    pub templates: Option<PathBuf>,
    pub steps: usize,
    #[serde(default = "default_micro_batch")]
    pub micro_batch: usize,
    #[serde(default = "default_one")]
    pub accum: usize,
    #[serde(default = "default_one")]
    pub workers: usize,
    #[serde(default)]
    pub weight_decay: f64,
    pub connector: ConnectorConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
    #[serde(default)]
    pub schedules: Option<BTreeMap<String, ScheduleSpec>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default)]
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub pathvqa: PathBuf,
    pub pmc_vqa: PathBuf,
    pub steps: usize,
    #[serde(default = "default_micro_batch")]
    pub micro_batch: usize,
    #[serde(default = "default_one")]
    pub accum: usize,
    #[serde(default = "default_one")]
    pub workers: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedules: Option<BTreeMap<String, ScheduleSpec>>,
}

fn default_max_new_tokens() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub records: PathBuf,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "default_one")]
    pub workers: usize,
    /// Also score open answers with the judge (1..10).
    #[serde(default)]
    pub judge_scores: bool,
    #[serde(default)]
    pub judge: JudgeConfig,
    #[serde(default)]
    pub retry: RetryPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroshotConfig {
    #[serde(default)]
    pub seed: u64,
    pub checkpoint: PathBuf,
    /// Classification spec (JSON).
    pub dataset: PathBuf,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "default_one")]
    pub workers: usize,
}

/// Path fields of a config, named by their dotted config path.
trait HasPaths {
    fn paths_mut(&mut self) -> Vec<(String, &mut PathBuf)>;
}

impl HasPaths for CleanConfig {
    fn paths_mut(&mut self) -> Vec<(String, &mut PathBuf)> {
        self.sources
            .iter_mut()
            .enumerate()
            .map(|(i, s)| (format!("sources[{i}].path"), &mut s.path))
            .collect()
    }
}

impl HasPaths for TrainPlipConfig {
    fn paths_mut(&mut self) -> Vec<(String, &mut PathBuf)> {
        vec![("manifest".into(), &mut self.manifest)]
    }
}

impl HasPaths for AlignConfig {
    fn paths_mut(&mut self) -> Vec<(String, &mut PathBuf)> {
        let mut v = vec![
            ("plip_checkpoint".to_string(), &mut self.plip_checkpoint),
            ("manifest".to_string(), &mut self.manifest),
        ];
        if let Some(t) = self.templates.as_mut() {
            v.push(("templates".into(), t));
        }
        v
    }
}

impl HasPaths for FinetuneConfig {
    fn paths_mut(&mut self) -> Vec<(String, &mut PathBuf)> {
        vec![
            ("checkpoint".into(), &mut self.checkpoint),
            ("pathvqa".into(), &mut self.pathvqa),
            ("pmc_vqa".into(), &mut self.pmc_vqa),
        ]
    }
}

impl HasPaths for EvalConfig {
    fn paths_mut(&mut self) -> Vec<(String, &mut PathBuf)> {
        vec![
            ("checkpoint".into(), &mut self.checkpoint),
            ("records".into(), &mut self.records),
        ]
    }
}

impl HasPaths for ZeroshotConfig {
    fn paths_mut(&mut self) -> Vec<(String, &mut PathBuf)> {
        vec![
            ("checkpoint".into(), &mut self.checkpoint),
            ("dataset".into(), &mut self.dataset),
        ]
    }
}

/// Raw config as JSON plus where its relative paths resolve from.
struct RawConfig {
    value: Value,
    base_dir: PathBuf,
    seed: Option<u64>,
    profile: Option<Profile>,
}

fn validation(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Validation {
        field: field.into(),
        message: message.into(),
    }
}

fn read_raw_config(path: &Path, command: &str) -> Result<RawConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let is_json = path.extension().is_some_and(|e| e == "json");
    let value: Value = if is_json {
        serde_json::from_str(&text)
            .map_err(|e| validation(path.display().to_string(), e.to_string()))?
    } else {
        let t: toml::Value = toml::from_str(&text)
            .map_err(|e| validation(path.display().to_string(), e.to_string()))?;
        serde_json::to_value(t)?
    };
    if value.get("command").is_some() && value.get("config").is_some() {
        let m: RunManifest = typed(value)?;
        if m.command != command {
            return Err(validation(
                "command",
                format!("run manifest is for `{}`, not `{command}`", m.command),
            ));
        }
        return Ok(RawConfig {
            value: m.config,
            base_dir,
            seed: Some(m.seed),
            profile: Some(m.profile),
        });
    }
    if !value.is_object() {
        return Err(validation(".", "config must be a table"));
    }
    Ok(RawConfig {
        value,
        base_dir,
        seed: None,
        profile: None,
    })
}

/// Deserializes with the dotted path of the offending field in errors.
fn typed<T: DeserializeOwned>(value: Value) -> Result<T> {
    static MISSING: OnceLock<Regex> = OnceLock::new();
    let missing =
        MISSING.get_or_init(|| Regex::new(r"missing field `([^`]+)`").expect("static regex"));
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        let field = match missing.captures(&message) {
            Some(c) if path == "." => c[1].to_string(),
            Some(c) => format!("{path}.{}", &c[1]),
            None => path,
        };
        validation(field, message)
    })
}

fn deep_merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve_paths<C: HasPaths>(cfg: &mut C, base_dir: &Path) -> Result<()> {
    for (field, p) in cfg.paths_mut() {
        let full = if p.is_absolute() {
            p.clone()
        } else {
            base_dir.join(&*p)
        };
        let canon = full.canonicalize().map_err(|_| {
            validation(
                field.clone(),
                format!("path does not exist: {}", full.display()),
            )
        })?;
        *p = canon;
    }
    Ok(())
}

/// `target` relative to `base`; both must be absolute and canonical.
fn relative_path(target: &Path, base: &Path) -> PathBuf {
    let t: Vec<Component> = target.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    if out.as_os_str().is_empty() {
        out.push(".");
    }
    out
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn list_files(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if root.is_file() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(root, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for e in entries {
        list_files(&e, out)?;
    }
    Ok(())
}

/// Hashes every file under `root`, keyed by path relative to `rel_base`.
pub fn hash_tree(root: &Path, rel_base: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    list_files(root, &mut files)?;
    files
        .into_iter()
        .map(|f| {
            let key = relative_path(&f, rel_base)
                .to_string_lossy()
                .replace('\\', "/");
            Ok((key, sha256_file(&f)?))
        })
        .collect()
}

fn canonical_json_hash(v: &Value) -> String {
    hex::encode(Sha256::digest(
        serde_json::to_string(v).expect("json value").as_bytes(),
    ))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Scales every rate of a schedule (desk runs are much shorter).
fn scaled(mut s: ScheduleSpec, factor: f64) -> ScheduleSpec {
    s.init_lr *= factor;
    s.peak_lr *= factor;
    s.floor_lr *= factor;
    s
}

/// Learning-rate multiplier applied to default schedules per profile.
pub fn profile_lr_scale(profile: Profile) -> f64 {
    match profile {
        Profile::Desk => 10.0,
        Profile::Full => 1.0,
    }
}

/// Default pretraining schedule: the interval-decay shape over `steps`,
/// one decay interval per epoch.
pub fn default_plip_schedule(
    profile: Profile,
    steps: usize,
    steps_per_epoch: usize,
) -> ScheduleSpec {
    match profile {
        Profile::Full => {
            let s = ScheduleSpec::plip(steps_per_epoch.max(1));
            if s.total_steps == steps {
                s
            } else {
                s.rescaled(steps)
            }
        }
        Profile::Desk => {
            let warmup = (steps / 10).max(1).min(steps.saturating_sub(1));
            ScheduleSpec {
                kind: ScheduleKind::WarmupIntervalDecay,
                init_lr: 1e-4,
                peak_lr: 1e-3,
                floor_lr: 5e-4,
                warmup_steps: warmup,
                total_steps: steps,
                interval_steps: Some(((steps - warmup) / 5).max(1)),
            }
        }
    }
}

struct Ctx {
    command: &'static str,
    out: PathBuf,
    profile: Profile,
    seed: u64,
}

fn profile_defaults(command: &str, profile: Profile) -> Value {
    let (plip, connector, lm) = match profile {
        Profile::Desk => (
            PlipConfig::desk(),
            ConnectorConfig::desk(),
            LmConfig::desk(),
        ),
        Profile::Full => (
            PlipConfig::default(),
            ConnectorConfig::default(),
            LmConfig::default(),
        ),
    };
    match command {
        "train-plip" => serde_json::json!({ "model": plip }),
        "align" => {
            serde_json::json!({ "connector": connector, "lm": lm, "lora": LoraConfig::default() })
        }
        _ => serde_json::json!({}),
    }
}

fn load<C>(args: &RunArgs, command: &'static str) -> Result<(C, Ctx)>
where
    C: DeserializeOwned + Serialize + HasPaths + Clone + SeedField,
{
    let raw = read_raw_config(&args.config, command)?;
    let profile = args.profile.or(raw.profile).unwrap_or_default();
    let mut value = profile_defaults(command, profile);
    deep_merge(&mut value, raw.value);
    let mut cfg: C = typed(value)?;
    let seed = args.seed.or(raw.seed).unwrap_or_else(|| cfg.seed());
    cfg.set_seed(seed);
    resolve_paths(&mut cfg, &raw.base_dir)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let out = args
        .out
        .canonicalize()
        .map_err(|e| Error::io(&args.out, e))?;
    Ok((
        cfg,
        Ctx {
            command,
            out,
            profile,
            seed,
        },
    ))
}

trait SeedField {
    fn seed(&self) -> u64;
    fn set_seed(&mut self, seed: u64);
}

macro_rules! seed_field {
    ($($t:ty),*) => {$(
        impl SeedField for $t {
            fn seed(&self) -> u64 {
                self.seed
            }
            fn set_seed(&mut self, seed: u64) {
                self.seed = seed;
            }
        }
    )*};
}
seed_field!(
    CleanConfig,
    TrainPlipConfig,
    AlignConfig,
    FinetuneConfig,
    EvalConfig,
    ZeroshotConfig
);

fn finish<C: Serialize + HasPaths + Clone>(ctx: &Ctx, cfg: &C) -> Result<RunManifest> {
    let mut recorded = cfg.clone();
    let mut inputs = BTreeMap::new();
    for (_, p) in recorded.paths_mut() {
        inputs.extend(hash_tree(p, &ctx.out)?);
        *p = relative_path(p, &ctx.out);
    }
    let config = serde_json::to_value(&recorded)?;
    let mut outputs = hash_tree(&ctx.out, &ctx.out)?;
    outputs.remove(RUN_MANIFEST);
    let manifest = RunManifest {
        command: ctx.command.to_string(),
        profile: ctx.profile,
        seed: ctx.seed,
        config_hash: canonical_json_hash(&config),
        config,
        inputs,
        outputs,
    };
    write_json(&ctx.out.join(RUN_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn run(cli: Cli) -> Result<Option<RunManifest>> {
    match cli.command {
        Command::Clean(a) => cmd_clean(&a).map(Some),
        Command::TrainPlip(a) => cmd_train_plip(&a).map(Some),
        Command::Align(a) => cmd_align(&a).map(Some),
        Command::Finetune(a) => cmd_finetune(&a).map(Some),
        Command::Eval(a) => cmd_eval(&a).map(Some),
        Command::Zeroshot(a) => cmd_zeroshot(&a).map(Some),
        Command::Fixtures(a) => crate::fixtures::write_desk_fixtures(&a.out, a.seed).map(|_| None),
    }
}

type FilterStep<'a> = Box<dyn Fn(Vec<PairRecord>) -> Result<data::FilterOutcome> + 'a>;

pub fn cmd_clean(args: &RunArgs) -> Result<RunManifest> {
    let (mut cfg, ctx) = load::<CleanConfig>(args, "clean")?;
    if let Some(k) = args.judge {
        cfg.judge.kind = k;
    }
    if cfg.sources.is_empty() {
        return Err(validation(
            "sources",
            "at least one source manifest is required",
        ));
    }
    if !(0.0..=1.0).contains(&cfg.max_quarantine_fraction) {
        return Err(validation("max_quarantine_fraction", "must lie in [0, 1]"));
    }
    if cfg.min_words == 0 {
        return Err(validation("min_words", "must be >= 1"));
    }
    let judge = cfg.judge.build(None)?;
    let mut kept_lists = Vec::new();
    let mut dropped = Vec::new();
    let mut quarantined = Vec::new();
    let mut parts = Vec::new();
    let mut stages = Vec::new();
    for src in &cfg.sources {
        let records: Vec<PairRecord> = read_jsonl(&src.path)?;
        let mut raw_counts: BTreeMap<&'static str, usize> = BTreeMap::new();
        for r in &records {
            *raw_counts.entry(r.source.as_str()).or_default() += 1;
        }
        let mut current = records;
        if src.clean {
            let name = src
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let steps: [(&str, FilterStep); 3] = [
                (
                    STAGE_NONPATH_IMAGE,
                    Box::new(|r| filter_nonpath_images(r, judge.as_ref(), &cfg.filter)),
                ),
                (
                    STAGE_NONHUMAN_TEXT,
                    Box::new(|r| filter_nonhuman_text(r, judge.as_ref(), &cfg.filter)),
                ),
                (
                    STAGE_MIN_WORDS,
                    Box::new(|r| filter_min_words(r, cfg.min_words)),
                ),
            ];
            for (stage, f) in steps.iter() {
                let outcome = f(current)?;
                outcome.check_quorum(cfg.max_quarantine_fraction)?;
                let mut s = ManifestStats::default();
                s.record_stage(&format!("{name}/{stage}"), &outcome);
                stages.extend(s.stages);
                dropped.extend(outcome.dropped);
                quarantined.extend(outcome.quarantined);
                current = outcome.kept;
            }
        }
        let mut kept_counts: BTreeMap<&'static str, usize> = BTreeMap::new();
        for r in &current {
            *kept_counts.entry(r.source.as_str()).or_default() += 1;
        }
        for (s, n) in raw_counts {
            parts.push(ManifestStats::for_source(
                s,
                n,
                kept_counts.get(s).copied().unwrap_or(0),
            ));
        }
        kept_lists.push(current);
    }
    let (merged, _) = merge_sources(kept_lists)?;
    let mut stats = merge_stats(&parts);
    stats.stages = stages;
    stats.check()?;
    dropped.sort_by(|a, b| a.id.cmp(&b.id));
    quarantined.sort_by(|a, b| a.id.cmp(&b.id));
    write_jsonl(&ctx.out.join("manifest.jsonl"), &merged)?;
    write_jsonl(&ctx.out.join("dropped.jsonl"), &dropped)?;
    write_jsonl(&ctx.out.join("quarantine.jsonl"), &quarantined)?;
    write_json(&ctx.out.join("stats.json"), &stats)?;
    finish(&ctx, &cfg)
}

pub fn cmd_train_plip(args: &RunArgs) -> Result<RunManifest> {
    let (mut cfg, ctx) = load::<TrainPlipConfig>(args, "train-plip")?;
    if cfg.steps == 0 {
        return Err(validation("steps", "must be >= 1"));
    }
    cfg.model.seed = ctx.seed;
    cfg.model
        .validate()
        .map_err(|e| validation("model", e.to_string()))?;
    let manifest: Vec<PairRecord> = read_jsonl(&cfg.manifest)?;
    let spe = manifest.len().div_ceil(cfg.train.batch_size.max(1));
    let sched = cfg
        .schedule
        .clone()
        .unwrap_or_else(|| default_plip_schedule(ctx.profile, cfg.steps, spe));
    sched
        .validate()
        .map_err(|e| validation("schedule", e.to_string()))?;
    if sched.total_steps != cfg.steps {
        return Err(validation(
            "schedule.total_steps",
            format!("must equal steps ({})", cfg.steps),
        ));
    }
    cfg.schedule = Some(sched.clone());
    let base = cfg.manifest.parent().map(Path::to_path_buf);
    let (ck, log) = train_plip(&manifest, &cfg.model, &sched, &cfg.train, base.as_deref())?;
    ck.save(&ctx.out.join("checkpoint"))?;
    write_jsonl(&ctx.out.join("train_log.jsonl"), &log)?;
    finish(&ctx, &cfg)
}

fn stage_schedules(
    stage: u8,
    given: &Option<BTreeMap<String, ScheduleSpec>>,
    profile: Profile,
    steps: usize,
) -> Result<BTreeMap<String, ScheduleSpec>> {
    match given {
        Some(s) => Ok(s.clone()),
        None => Ok(StageConfig::for_stage(stage, steps, 1, 1, 0)?
            .schedules
            .into_iter()
            .map(|(g, s)| (g, scaled(s, profile_lr_scale(profile))))
            .collect()),
    }
}

fn load_examples(rows: &[VqaRecord], base: Option<&Path>) -> Result<Vec<VqaExample>> {
    let mut cache: BTreeMap<&str, crate::image::ImageArray> = BTreeMap::new();
    rows.iter()
        .map(|r| {
            if !cache.contains_key(r.image_ref.as_str()) {
                cache.insert(&r.image_ref, load_image(&r.image_ref, base)?);
            }
            Ok(VqaExample {
                image: cache[r.image_ref.as_str()].clone(),
                question: r.question.clone(),
                answer: r.answer.clone(),
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    stage: u8,
    model: &mut Assistant,
    examples: &[VqaExample],
    steps: usize,
    micro_batch: usize,
    accum: usize,
    workers: usize,
    weight_decay: f64,
    schedules: BTreeMap<String, ScheduleSpec>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let sc = StageConfig {
        stage,
        steps,
        micro_batch,
        accum,
        workers,
        weight_decay,
        schedules,
        seed,
    };
    sc.effective_batch()
        .map_err(|e| validation("micro_batch", e.to_string()))?;
    let (ck, log) = train_stage(model, examples, &sc)?;
    ck.save(&out.join("checkpoint"))?;
    write_jsonl(&out.join("train_log.jsonl"), &log)
}

pub fn cmd_align(args: &RunArgs) -> Result<RunManifest> {
    let (mut cfg, ctx) = load::<AlignConfig>(args, "align")?;
    if cfg.steps == 0 {
        return Err(validation("steps", "must be >= 1"));
    }
    cfg.connector.seed = ctx.seed.wrapping_add(1);
    cfg.lm.seed = ctx.seed.wrapping_add(2);
    cfg.lora.seed = ctx.seed.wrapping_add(3);
    let plip = PlipModel::from_checkpoint(&Checkpoint::load(&cfg.plip_checkpoint)?)?;
    let mut model = Assistant::from_plip(
        &plip,
        cfg.connector.clone(),
        cfg.lm.clone(),
        cfg.lora.clone(),
    )
    .map_err(|e| validation("connector", e.to_string()))?;
    let templates = match &cfg.templates {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
        None => data::default_templates(),
    };
    let records: Vec<PairRecord> = read_jsonl(&cfg.manifest)?;
    let qa = build_alignment_qa(&records, &templates, ctx.seed)?;
    write_jsonl(&ctx.out.join("qa.jsonl"), &qa)?;
    let examples = load_examples(&qa, cfg.manifest.parent())?;
    let schedules = stage_schedules(2, &cfg.schedules, ctx.profile, cfg.steps)?;
    cfg.schedules = Some(schedules.clone());
    run_stage(
        2,
        &mut model,
        &examples,
        cfg.steps,
        cfg.micro_batch,
        cfg.accum,
        cfg.workers,
        cfg.weight_decay,
        schedules,
        ctx.seed,
        &ctx.out,
    )?;
    finish(&ctx, &cfg)
}

pub fn cmd_finetune(args: &RunArgs) -> Result<RunManifest> {
    let (mut cfg, ctx) = load::<FinetuneConfig>(args, "finetune")?;
    if cfg.steps == 0 {
        return Err(validation("steps", "must be >= 1"));
    }
    let mut model = Assistant::from_checkpoint(&Checkpoint::load(&cfg.checkpoint)?)?;
    let pathvqa: Vec<VqaRecord> = read_jsonl(&cfg.pathvqa)?;
    let pmc: Vec<VqaRecord> = read_jsonl(&cfg.pmc_vqa)?;
    let base_pv = cfg.pathvqa.parent().map(Path::to_path_buf);
    let base_pmc = cfg.pmc_vqa.parent().map(Path::to_path_buf);
    let n_pv = pathvqa.len();
    let (train, stats) = assemble_vqa_train(pathvqa, pmc)?;
    write_jsonl(&ctx.out.join("train.jsonl"), &train)?;
    write_json(&ctx.out.join("stats.json"), &stats)?;
    let mut examples = load_examples(&train[..n_pv], base_pv.as_deref())?;
    examples.extend(load_examples(&train[n_pv..], base_pmc.as_deref())?);
    let schedules = stage_schedules(3, &cfg.schedules, ctx.profile, cfg.steps)?;
    cfg.schedules = Some(schedules.clone());
    run_stage(
        3,
        &mut model,
        &examples,
        cfg.steps,
        cfg.micro_batch,
        cfg.accum,
        cfg.workers,
        cfg.weight_decay,
        schedules,
        ctx.seed,
        &ctx.out,
    )?;
    finish(&ctx, &cfg)
}

fn generate_all(
    model: &Assistant,
    rows: &[VqaRecord],
    base: Option<&Path>,
    max_new_tokens: usize,
    workers: usize,
) -> Result<Vec<Generation>> {
    if max_new_tokens == 0 {
        return Err(validation("max_new_tokens", "must be >= 1"));
    }
    data::parallel_map(rows, workers, |r| {
        let image = load_image(&r.image_ref, base)?;
        Ok(Generation {
            id: r.id.clone(),
            generation: model.generate(&image, &r.question, max_new_tokens)?,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub id: String,
    pub score: u8,
}

pub fn cmd_eval(args: &RunArgs) -> Result<RunManifest> {
    let (mut cfg, ctx) = load::<EvalConfig>(args, "eval")?;
    if let Some(k) = args.judge {
        cfg.judge.kind = k;
    }
    let model = Assistant::from_checkpoint(&Checkpoint::load(&cfg.checkpoint)?)?;
    let rows: Vec<VqaRecord> = read_jsonl(&cfg.records)?;
    let base = cfg.records.parent().map(Path::to_path_buf);
    let gens = generate_all(
        &model,
        &rows,
        base.as_deref(),
        cfg.max_new_tokens,
        cfg.workers,
    )?;
    write_jsonl(&ctx.out.join("generations.jsonl"), &gens)?;
    let by_id: BTreeMap<String, String> = gens
        .iter()
        .map(|g| (g.id.clone(), g.generation.clone()))
        .collect();
    let report = evaluate_vqa(&rows, &by_id)?;
    write_json(&ctx.out.join("report.json"), &report)?;
    let mut table = report.table();
    if cfg.judge_scores {
        let judge = cfg.judge.build(base.clone())?;
        let open: Vec<&VqaRecord> = rows
            .iter()
            .filter(|r| r.kind == data::VqaKind::Open)
            .collect();
        let scores = data::parallel_map(&open, cfg.workers, |r| {
            judge_alignment_score(&by_id[&r.id], &r.answer, judge.as_ref(), &cfg.retry, None).map(
                |score| JudgeScore {
                    id: r.id.clone(),
                    score,
                },
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        if !scores.is_empty() {
            let mean = scores.iter().map(|s| s.score as f64).sum::<f64>() / scores.len() as f64;
            table.push_str(&format!(
                "\nJudge score (1-10) over {} open items: {mean:.2}\n",
                scores.len()
            ));
        }
        write_jsonl(&ctx.out.join("judge_scores.jsonl"), &scores)?;
    }
    write_text(&ctx.out.join("report.md"), &table)?;
    finish(&ctx, &cfg)
}

pub fn cmd_zeroshot(args: &RunArgs) -> Result<RunManifest> {
    let (cfg, ctx) = load::<ZeroshotConfig>(args, "zeroshot")?;
    let model = Assistant::from_checkpoint(&Checkpoint::load(&cfg.checkpoint)?)?;
    let text = fs::read_to_string(&cfg.dataset).map_err(|e| Error::io(&cfg.dataset, e))?;
    let spec: ClassificationSpec = typed(serde_json::from_str(&text)?)?;
    let rows = classification_to_vqa(&spec)?;
    write_jsonl(&ctx.out.join("records.jsonl"), &rows)?;
    let base = cfg.dataset.parent().map(Path::to_path_buf);
    let gens = generate_all(
        &model,
        &rows,
        base.as_deref(),
        cfg.max_new_tokens,
        cfg.workers,
    )?;
    write_jsonl(&ctx.out.join("generations.jsonl"), &gens)?;
    let by_id: BTreeMap<String, String> = gens.into_iter().map(|g| (g.id, g.generation)).collect();
    let report = ZeroShotReport::from_records(&spec.name, &rows, &by_id)?;
    write_json(&ctx.out.join("report.json"), &report)?;
    write_text(&ctx.out.join("report.md"), &report.table())?;
    finish(&ctx, &cfg)
}
