//! Toy causal decoder with low-rank adapters, prompt assembly around a
//! visual prefix, greedy decoding and the per-stage freezing policy.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{self, LoraBinding, ParamGroup, ParamSet, Tape};
use crate::tokenizer::{Tokenizer, BOS, EOS, SEP};

pub const LM_BASE: &str = "lm_base";
pub const LORA: &str = "lora";
pub const VISION_ENCODER: &str = "vision_encoder";
pub const CONNECTOR: &str = crate::connector::CONNECTOR;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub vocab: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            layers: 4,
            heads: 4,
            context: 512,
            vocab: crate::tokenizer::VOCAB_SIZE,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn desk() -> Self {
        Self {
            dim: 64,
            layers: 2,
            context: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.layers == 0
            || self.heads == 0
            || self.context == 0
            || self.mlp_ratio == 0
        {
            return Err(Error::Config(
                "lm dim, layers, heads, context and mlp_ratio must be >= 1".into(),
            ));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "lm dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.vocab < crate::tokenizer::VOCAB_SIZE {
            return Err(Error::Config(format!(
                "lm vocab {} is smaller than the tokenizer's {}",
                self.vocab,
                crate::tokenizer::VOCAB_SIZE
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Regexes over linear layer names, e.g. `layers.0.attn.q_proj`.
    pub targets: Vec<String>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            targets: vec![r"attn\.(q|k|v|o)_proj$".to_string()],
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn binding(&self) -> LoraBinding {
        LoraBinding {
            base_group: LM_BASE.to_string(),
            group: LORA.to_string(),
            scale: self.scale(),
        }
    }
}

pub fn init_lm(cfg: &LmConfig) -> ParamGroup {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = ParamGroup::new();
    g.insert("tok_embed", nn::uniform(&mut rng, cfg.vocab, cfg.dim, 0.5));
    g.insert(
        "pos_embed",
        nn::uniform(&mut rng, cfg.context, cfg.dim, 0.1),
    );
    for i in 0..cfg.layers {
        nn::init_block(
            &mut g,
            &mut rng,
            &format!("layers.{i}"),
            cfg.dim,
            cfg.mlp_ratio,
        );
    }
    nn::init_layer_norm(&mut g, "ln_f", cfg.dim);
    nn::init_linear(&mut g, &mut rng, "lm_head", cfg.dim, cfg.vocab);
    g
}

/// Adds a zero-delta adapter pair to every `lm_base` linear layer whose name
/// matches one of the target patterns. Returns the adapted layer names.
pub fn attach_lora(params: &mut ParamSet, cfg: &LoraConfig) -> Result<Vec<String>> {
    if cfg.rank == 0 {
        return Err(Error::Config("lora rank must be >= 1".into()));
    }
    let patterns = cfg
        .targets
        .iter()
        .map(|t| Regex::new(t).map_err(|e| Error::Config(format!("lora target `{t}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let base = params
        .group(LM_BASE)
        .ok_or_else(|| Error::Config("model has no lm_base group".into()))?;
    let layers: Vec<(String, usize, usize)> = base
        .iter()
        .filter_map(|(name, w)| {
            let layer = name.strip_suffix(".weight")?;
            patterns
                .iter()
                .any(|p| p.is_match(layer))
                .then(|| (layer.to_string(), w.nrows(), w.ncols()))
        })
        .collect();
    if layers.is_empty() {
        return Err(Error::Config(format!(
            "lora targets {:?} match no layer",
            cfg.targets
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = ParamGroup::new();
    for (layer, d_in, d_out) in &layers {
        let a = 1.0 / (*d_in as f64).sqrt();
        g.insert(
            format!("{layer}.lora_a"),
            nn::uniform(&mut rng, cfg.rank, *d_in, a),
        );
        g.insert(format!("{layer}.lora_b"), Array2::zeros((*d_out, cfg.rank)));
    }
    params.insert_group(LORA, g);
    Ok(layers.into_iter().map(|l| l.0).collect())
}

/// Folds every adapter into its base weight: `W + (α/r)·(B·A)ᵀ` in the
/// `x·W` convention used here. Returns a set without a `lora` group.
pub fn merge_lora(params: &ParamSet, cfg: &LoraConfig) -> ParamSet {
    let mut out = params.clone();
    let Some(lora) = out.remove_group(LORA) else {
        return out;
    };
    let base = out.group_mut(LM_BASE).expect("lm_base present");
    for (name, a) in lora.iter() {
        let Some(layer) = name.strip_suffix(".lora_a") else {
            continue;
        };
        let b = lora
            .get(&format!("{layer}.lora_b"))
            .expect("paired adapter");
        let w = base
            .get_mut(&format!("{layer}.weight"))
            .expect("adapted layer");
        let delta = b.dot(a).reversed_axes() * cfg.scale();
        *w += &delta;
    }
    out
}

/// Final hidden states for `[prefix | embed(ids)]`.
pub fn hidden_on(
    tape: &mut Tape,
    cfg: &LmConfig,
    prefix: Option<Var>,
    ids: &[usize],
) -> Result<Var> {
    let k = prefix.map_or(0, |p| tape.g.value(p).nrows());
    let t = k + ids.len();
    if t == 0 {
        return Err(invalid!("empty input sequence"));
    }
    if t > cfg.context {
        return Err(Error::ContextOverflow {
            required: t,
            context: cfg.context,
        });
    }
    if let Some(bad) = ids.iter().find(|i| **i >= cfg.vocab) {
        return Err(invalid!("token id {bad} outside vocabulary {}", cfg.vocab));
    }
    let mut parts = Vec::with_capacity(2);
    if let Some(p) = prefix {
        if tape.g.value(p).ncols() != cfg.dim {
            return Err(invalid!(
                "visual prefix width {} does not match lm dim {}",
                tape.g.value(p).ncols(),
                cfg.dim
            ));
        }
        parts.push(p);
    }
    if !ids.is_empty() {
        let table = tape.p(LM_BASE, "tok_embed");
        parts.push(tape.g.gather_rows(table, ids));
    }
    let x = if parts.len() == 1 {
        parts[0]
    } else {
        tape.g.concat_rows(&parts)
    };
    let pos_table = tape.p(LM_BASE, "pos_embed");
    let positions: Vec<usize> = (0..t).collect();
    let pos = tape.g.gather_rows(pos_table, &positions);
    let mut h = tape.g.add(x, pos);
    for i in 0..cfg.layers {
        h = tape.block(LM_BASE, &format!("layers.{i}"), h, cfg.heads, true);
    }
    Ok(tape.layer_norm(LM_BASE, "ln_f", h))
}

pub fn logits_on(tape: &mut Tape, hidden: Var) -> Var {
    tape.linear(LM_BASE, "lm_head", hidden)
}

/// Plain forward to full logits, with adapters when `lora` is given.
pub fn forward_logits(
    params: &ParamSet,
    cfg: &LmConfig,
    lora: Option<&LoraConfig>,
    prefix: Option<&Mat>,
    ids: &[usize],
) -> Result<Mat> {
    let mut tape = Tape::inference(params).with_lora(lora.map(LoraConfig::binding));
    let p = prefix.map(|m| tape.constant(m.clone()));
    let h = hidden_on(&mut tape, cfg, p, ids)?;
    let l = logits_on(&mut tape, h);
    Ok(tape.g.value(l).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledSequence {
    pub visual_prefix: Mat,
    pub prompt_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
    /// One entry per text position (prompt then answer); set on answers only.
    pub loss_mask: Vec<bool>,
}

impl AssembledSequence {
    pub fn text_ids(&self) -> Vec<usize> {
        let mut ids = self.prompt_ids.clone();
        ids.extend_from_slice(&self.answer_ids);
        ids
    }

    pub fn total_len(&self) -> usize {
        self.visual_prefix.nrows() + self.prompt_ids.len() + self.answer_ids.len()
    }
}

/// Prompt tokens: `BOS question SEP`.
pub fn prompt_ids(tokenizer: &Tokenizer, question: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(tokenizer.encode(question));
    ids.push(SEP);
    ids
}

/// Layout `[visual_prefix | BOS question SEP | answer EOS]`. An empty
/// answer (inference) contributes no tokens and no loss positions.
pub fn assemble(
    visual_prefix: &Mat,
    question: &str,
    answer: &str,
    tokenizer: &Tokenizer,
    context: usize,
) -> Result<AssembledSequence> {
    if question.trim().is_empty() {
        return Err(invalid!("question is empty"));
    }
    let prompt = prompt_ids(tokenizer, question);
    let mut answer_ids = Vec::new();
    if !answer.is_empty() {
        answer_ids = tokenizer.encode(answer);
        answer_ids.push(EOS);
    }
    let seq = AssembledSequence {
        visual_prefix: visual_prefix.clone(),
        loss_mask: prompt
            .iter()
            .map(|_| false)
            .chain(answer_ids.iter().map(|_| true))
            .collect(),
        prompt_ids: prompt,
        answer_ids,
    };
    if seq.total_len() > context {
        return Err(Error::ContextOverflow {
            required: seq.total_len(),
            context,
        });
    }
    Ok(seq)
}

/// Mean next-token loss over the answer tokens of one sequence. Only the
/// rows that predict answer tokens go through the output head.
pub fn sequence_loss_on(
    tape: &mut Tape,
    cfg: &LmConfig,
    prefix: Var,
    seq: &AssembledSequence,
) -> Result<Var> {
    if seq.answer_ids.is_empty() {
        return Err(invalid!("training sequence has no answer tokens"));
    }
    let ids = seq.text_ids();
    let h = hidden_on(tape, cfg, Some(prefix), &ids)?;
    let start = seq.visual_prefix.nrows() + seq.prompt_ids.len() - 1;
    let rows = tape.g.slice_rows(h, start, start + seq.answer_ids.len());
    let logits = logits_on(tape, rows);
    let weights = vec![1.0; seq.answer_ids.len()];
    Ok(tape.g.cross_entropy(logits, &seq.answer_ids, &weights))
}

/// Greedy decoding after `prompt`. Ties pick the lowest id; stops at EOS,
/// after `max_new_tokens`, or when the context is full. A generated EOS is
/// kept as the last id.
pub fn greedy_decode(
    params: &ParamSet,
    cfg: &LmConfig,
    lora: Option<&LoraConfig>,
    prefix: &Mat,
    prompt: &[usize],
    max_new_tokens: usize,
) -> Result<Vec<usize>> {
    if max_new_tokens < 1 {
        return Err(invalid!("max_new_tokens must be >= 1"));
    }
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    let binding = lora.map(LoraConfig::binding);
    while out.len() < max_new_tokens && prefix.nrows() + ids.len() < cfg.context {
        let mut tape = Tape::inference(params).with_lora(binding.clone());
        let p = tape.constant(prefix.clone());
        let h = hidden_on(&mut tape, cfg, Some(p), &ids)?;
        let last = tape.g.value(h).nrows() - 1;
        let row = tape.g.slice_rows(h, last, last + 1);
        let logits = logits_on(&mut tape, row);
        let next = argmax(tape.g.value(logits).row(0).iter().copied());
        out.push(next);
        if next == EOS {
            break;
        }
        ids.push(next);
    }
    Ok(out)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub stage: u8,
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

/// Stages 2 and 3 both train only the connector and the adapters.
pub fn freeze_policy(stage: u8) -> Result<FreezePlan> {
    match stage {
        2 | 3 => Ok(FreezePlan {
            stage,
            trainable: [CONNECTOR, LORA].into_iter().map(String::from).collect(),
            frozen: [VISION_ENCODER, LM_BASE]
                .into_iter()
                .map(String::from)
                .collect(),
        }),
        other => Err(Error::Config(format!(
            "no freezing policy for stage {other}; expected 2 or 3"
        ))),
    }
}
