//! Metrics for generated answers: closed-set accuracy, open-set token
//! recall, choice extraction, zero-shot classification metrics and judge
//! scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::{answer_letter, VqaKind, VqaRecord};
use crate::error::{invalid, Result};
use crate::judge::{ask_score, JudgeClient, JudgeRequest, JudgeTask, RetryPolicy, SCORE_PROMPT};

/// Multiset of lowercase alphanumeric tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSet(pub BTreeMap<String, usize>);

impl TokenSet {
    pub fn len(&self) -> usize {
        self.0.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tokens joined by single spaces in sorted order, multiplicity kept.
    pub fn join(&self) -> String {
        let mut parts = Vec::with_capacity(self.len());
        for (t, n) in &self.0 {
            parts.extend(std::iter::repeat_n(t.as_str(), *n));
        }
        parts.join(" ")
    }

    /// Size of the multiset intersection.
    pub fn overlap(&self, other: &TokenSet) -> usize {
        self.0
            .iter()
            .map(|(t, n)| (*n).min(other.0.get(t).copied().unwrap_or(0)))
            .sum()
    }

    pub fn is_subset_of(&self, other: &TokenSet) -> bool {
        self.overlap(other) == self.len()
    }
}

/// Lowercases, turns every non-alphanumeric character into a space and
/// splits on whitespace.
pub fn normalize(text: &str) -> TokenSet {
    let mut m = BTreeMap::new();
    let lower = text.to_lowercase();
    for tok in lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        *m.entry(tok.to_string()).or_insert(0) += 1;
    }
    TokenSet(m)
}

/// Fraction of ground-truth tokens found in the prediction, each counted
/// at most as often as it occurs in the ground truth.
pub fn open_recall(pred: &str, gt: &str) -> Result<f64> {
    let g = normalize(gt);
    if g.is_empty() {
        return Err(invalid!("ground truth `{gt}` has no tokens"));
    }
    Ok(g.overlap(&normalize(pred)) as f64 / g.len() as f64)
}

fn key_for(letter: &str, choices: &BTreeMap<String, String>) -> Option<String> {
    choices
        .keys()
        .find(|k| k.eq_ignore_ascii_case(letter))
        .cloned()
}

fn collapse(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Letter chosen by a generation: a leading standalone letter, else an
/// "answer is X" phrase, else the one choice whose text appears in it.
pub fn extract_choice(generated: &str, choices: &BTreeMap<String, String>) -> Option<String> {
    static LEAD: OnceLock<Regex> = OnceLock::new();
    static PHRASE: OnceLock<Regex> = OnceLock::new();
    let lead =
        LEAD.get_or_init(|| Regex::new(r"^\s*\(?([A-Za-z])(?:$|[\s:.)])").expect("static regex"));
    let phrase = PHRASE.get_or_init(|| {
        Regex::new(r"(?i)answer\s+is\s*:?\s*\(?([A-Za-z])\b").expect("static regex")
    });

    if let Some(k) = lead
        .captures(generated)
        .and_then(|c| key_for(&c[1], choices))
    {
        return Some(k);
    }
    if let Some(k) = phrase
        .captures(generated)
        .and_then(|c| key_for(&c[1], choices))
    {
        return Some(k);
    }
    let hay = format!(
        " {} ",
        collapse(&generated.replace(|c: char| !c.is_alphanumeric() && !c.is_whitespace(), " "))
    );
    let hits: Vec<&String> = choices
        .iter()
        .filter(|(_, text)| {
            let t =
                collapse(&text.replace(|c: char| !c.is_alphanumeric() && !c.is_whitespace(), " "));
            !t.is_empty() && hay.contains(&format!(" {t} "))
        })
        .map(|(k, _)| k)
        .collect();
    match hits.as_slice() {
        [one] => Some((*one).clone()),
        _ => None,
    }
}

/// Both readings of a closed-set answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedVerdict {
    /// Letter pulled from the generation, when choices exist.
    pub extracted: Option<String>,
    /// Letter match (or containment for letterless golds).
    pub correct: bool,
    /// Every normalized gold token appears in the prediction.
    pub containment: bool,
}

pub fn closed_verdict(
    pred: &str,
    gold: &str,
    choices: Option<&BTreeMap<String, String>>,
) -> Result<ClosedVerdict> {
    match choices {
        Some(c) => {
            let letter = answer_letter(gold, c)
                .ok_or_else(|| invalid!("gold answer `{gold}` is not among the choices"))?;
            let extracted = extract_choice(pred, c);
            let gold_text = normalize(&c[&letter]);
            Ok(ClosedVerdict {
                correct: extracted.as_deref() == Some(letter.as_str()),
                containment: !gold_text.is_empty() && gold_text.is_subset_of(&normalize(pred)),
                extracted,
            })
        }
        None => {
            let g = normalize(gold);
            if g.is_empty() {
                return Err(invalid!("gold answer `{gold}` has no tokens"));
            }
            let contained = g.is_subset_of(&normalize(pred));
            Ok(ClosedVerdict {
                extracted: None,
                correct: contained,
                containment: contained,
            })
        }
    }
}

pub fn closed_accuracy(
    pred: &str,
    gold: &str,
    choices: Option<&BTreeMap<String, String>>,
) -> Result<u8> {
    Ok(u8::from(closed_verdict(pred, gold, choices)?.correct))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: usize,
    pub predicted: usize,
    pub true_positive: usize,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotMetrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Micro accuracy and macro recall/precision. A missing prediction is
/// wrong; classes never predicted (or never present) contribute 0.
pub fn zero_shot_metrics(
    items: &[(Option<String>, String)],
    classes: &[String],
) -> Result<ZeroShotMetrics> {
    if items.is_empty() {
        return Err(invalid!("no items to score"));
    }
    if classes.is_empty() {
        return Err(invalid!("no classes declared"));
    }
    let known: BTreeSet<&str> = classes.iter().map(String::as_str).collect();
    let mut support = vec![0usize; classes.len()];
    let mut predicted = vec![0usize; classes.len()];
    let mut tp = vec![0usize; classes.len()];
    let index = |c: &str| classes.iter().position(|k| k == c);
    let mut correct = 0usize;
    for (pred, gold) in items {
        if !known.contains(gold.as_str()) {
            return Err(invalid!("gold label `{gold}` is not a declared class"));
        }
        let g = index(gold).expect("checked");
        support[g] += 1;
        if let Some(p) = pred.as_deref().and_then(index) {
            predicted[p] += 1;
            if p == g {
                tp[g] += 1;
                correct += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassMetrics> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| ClassMetrics {
            class: c.clone(),
            support: support[i],
            predicted: predicted[i],
            true_positive: tp[i],
            recall: ratio(tp[i], support[i]),
            precision: ratio(tp[i], predicted[i]),
        })
        .collect();
    let k = classes.len() as f64;
    Ok(ZeroShotMetrics {
        accuracy: correct as f64 / items.len() as f64,
        recall: per_class.iter().map(|c| c.recall).sum::<f64>() / k,
        precision: per_class.iter().map(|c| c.precision).sum::<f64>() / k,
        per_class,
    })
}

/// Judge score of a response against its reference caption, in `1..=10`.
pub fn judge_alignment_score(
    response: &str,
    reference: &str,
    judge: &dyn JudgeClient,
    policy: &RetryPolicy,
    prompt: Option<&str>,
) -> Result<u8> {
    let req = JudgeRequest {
        task: JudgeTask::AlignmentScore,
        record_id: String::new(),
        prompt: prompt.unwrap_or(SCORE_PROMPT).to_string(),
        text: Some(response.to_string()),
        reference: Some(reference.to_string()),
        image_ref: None,
    };
    ask_score(judge, &req, policy)
}

/// A model output keyed by record id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub id: String,
    pub generation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub kind: VqaKind,
    pub gold: String,
    pub generation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted: Option<String>,
    /// Closed items: letter-match (or containment for letterless) verdict.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_containment: Option<bool>,
    /// Open items: token recall.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub open_recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub closed_count: usize,
    pub open_count: usize,
    /// Percentages.
    pub closed_acc: f64,
    pub closed_containment_acc: f64,
    pub open_recall: f64,
    /// Mean of the closed and open columns.
    pub overall_column_mean: f64,
    /// Mean over all items pooled together.
    pub overall_pooled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: Vec<EvalItem>,
    pub aggregates: Aggregates,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn aggregate(items: &[EvalItem]) -> Aggregates {
    let closed: Vec<&EvalItem> = items.iter().filter(|i| i.kind == VqaKind::Closed).collect();
    let open: Vec<&EvalItem> = items.iter().filter(|i| i.kind == VqaKind::Open).collect();
    let b = |v: Option<bool>| if v == Some(true) { 1.0 } else { 0.0 };
    let closed_acc = mean(closed.iter().map(|i| b(i.closed_correct)));
    let open_rec = mean(open.iter().map(|i| i.open_recall.unwrap_or(0.0)));
    let columns: Vec<f64> = [
        (!closed.is_empty()).then_some(closed_acc),
        (!open.is_empty()).then_some(open_rec),
    ]
    .into_iter()
    .flatten()
    .collect();
    let pooled = mean(items.iter().map(|i| match i.kind {
        VqaKind::Closed => b(i.closed_correct),
        VqaKind::Open => i.open_recall.unwrap_or(0.0),
    }));
    Aggregates {
        closed_count: closed.len(),
        open_count: open.len(),
        closed_acc: 100.0 * closed_acc,
        closed_containment_acc: 100.0 * mean(closed.iter().map(|i| b(i.closed_containment))),
        open_recall: 100.0 * open_rec,
        overall_column_mean: 100.0 * mean(columns.into_iter()),
        overall_pooled: 100.0 * pooled,
    }
}

/// Scores every record against its generation (missing generations count
/// as empty strings).
pub fn evaluate_vqa(
    records: &[VqaRecord],
    generations: &BTreeMap<String, String>,
) -> Result<EvalReport> {
    let mut items = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        let generation = generations.get(&r.id).cloned().unwrap_or_default();
        let mut item = EvalItem {
            id: r.id.clone(),
            kind: r.kind,
            gold: r.answer.clone(),
            generation: generation.clone(),
            extracted: None,
            closed_correct: None,
            closed_containment: None,
            open_recall: None,
        };
        match r.kind {
            VqaKind::Closed => {
                let v = closed_verdict(&generation, &r.answer, r.choices.as_ref())?;
                item.extracted = v.extracted;
                item.closed_correct = Some(v.correct);
                item.closed_containment = Some(v.containment);
            }
            VqaKind::Open => item.open_recall = Some(open_recall(&generation, &r.answer)?),
        }
        items.push(item);
    }
    let aggregates = aggregate(&items);
    Ok(EvalReport { items, aggregates })
}

impl EvalReport {
    pub fn table(&self) -> String {
        let a = &self.aggregates;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "| Closed Acc. | Open Rec. | Overall (column mean) | Overall (pooled) |"
        );
        let _ = writeln!(s, "|---|---|---|---|");
        let _ = writeln!(
            s,
            "| {:.2} | {:.2} | {:.2} | {:.2} |",
            a.closed_acc, a.open_recall, a.overall_column_mean, a.overall_pooled
        );
        let _ = writeln!(
            s,
            "\n{} closed items ({:.2} by token containment), {} open items",
            a.closed_count, a.closed_containment_acc, a.open_count
        );
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotItem {
    pub id: String,
    pub gold: String,
    pub predicted: Option<String>,
    pub generation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub dataset: String,
    pub items: Vec<ZeroShotItem>,
    pub metrics: ZeroShotMetrics,
}

impl ZeroShotReport {
    pub fn from_records(
        dataset: &str,
        records: &[VqaRecord],
        generations: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| invalid!("no records to score"))?;
        let choices = first
            .choices
            .clone()
            .ok_or_else(|| invalid!("zero-shot record `{}` has no choices", first.id))?;
        let classes: Vec<String> = choices.keys().cloned().collect();
        let mut items = Vec::with_capacity(records.len());
        for r in records {
            r.validate()?;
            let gold = r
                .gold_letter()
                .ok_or_else(|| invalid!("record `{}` has no gold letter", r.id))?;
            let generation = generations.get(&r.id).cloned().unwrap_or_default();
            let c = r.choices.as_ref().expect("validated closed record");
            items.push(ZeroShotItem {
                id: r.id.clone(),
                gold,
                predicted: extract_choice(&generation, c),
                generation,
            });
        }
        let pairs: Vec<(Option<String>, String)> = items
            .iter()
            .map(|i| (i.predicted.clone(), i.gold.clone()))
            .collect();
        Ok(Self {
            dataset: dataset.to_string(),
            metrics: zero_shot_metrics(&pairs, &classes)?,
            items,
        })
    }

    pub fn table(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        let _ = writeln!(s, "| Dataset | Acc. | Rec. | Pre. |");
        let _ = writeln!(s, "|---|---|---|---|");
        let _ = writeln!(
            s,
            "| {} | {:.2} | {:.2} | {:.2} |",
            self.dataset,
            100.0 * m.accuracy,
            100.0 * m.recall,
            100.0 * m.precision
        );
        let _ = writeln!(s, "\n| Class | Support | Predicted | Rec. | Pre. |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for c in &m.per_class {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.2} | {:.2} |",
                c.class,
                c.support,
                c.predicted,
                100.0 * c.recall,
                100.0 * c.precision
            );
        }
        s
    }
}
