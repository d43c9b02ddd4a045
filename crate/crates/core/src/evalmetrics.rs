//! Surrogate toxicity, log perplexity and token-overlap F1, and the report
//! that puts them side by side for several runs.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{fmt_sig, write_bytes, write_json, PromptRecord};
use crate::model::{forward_hooked, generate_greedy_hooked, ForwardHook, ModelBundle, NoHook};
use crate::numerics::{log_softmax, sigmoid};
use crate::probe::{mean_final_residual, Probe};

pub const DEFAULT_N_NEW: usize = 20;

/// A linear probe used only for scoring, applied to residuals of a fixed
/// scoring bundle.
#[derive(Debug, Clone)]
pub struct SurrogateScorer {
    pub probe: Probe,
    pub note: String,
}

impl SurrogateScorer {
    pub fn new(probe: Probe, note: impl Into<String>) -> Result<Self> {
        probe.validate()?;
        Ok(Self { probe, note: note.into() })
    }

    /// `σ(w · x̄ + b)` with `x̄` the mean final residual of `ids` under `scoring`.
    pub fn score(&self, scoring: &ModelBundle, ids: &[u32]) -> Result<f64> {
        let feat = mean_final_residual(scoring, ids, &NoHook)?;
        if feat.len() != self.probe.direction.len() {
            return Err(Error::ShapeMismatch(format!(
                "scorer of length {} vs d_model {}",
                self.probe.direction.len(),
                feat.len()
            )));
        }
        Ok(self.probe.probability(&feat))
    }
}

/// A bundle plus an optional intervention, evaluated as one system.
pub struct Subject<'a> {
    pub bundle: &'a ModelBundle,
    pub hook: &'a dyn ForwardHook,
}

impl<'a> Subject<'a> {
    pub fn plain(bundle: &'a ModelBundle) -> Self {
        Self { bundle, hook: &NoHook }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub id: String,
    pub continuation: Vec<u32>,
    pub toxicity: f64,
}

/// Mean scorer probability over greedy continuations of each prompt.
pub fn toxicity_score(
    scorer: &SurrogateScorer,
    scoring: &ModelBundle,
    subject: &Subject,
    prompts: &[(String, Vec<u32>)],
    n_new: usize,
) -> Result<(f64, Vec<PromptScore>)> {
    if prompts.is_empty() {
        return Err(Error::EmptyPromptSet);
    }
    let mut rows = Vec::with_capacity(prompts.len());
    for (id, ids) in prompts {
        let (continuation, _) = generate_greedy_hooked(subject.bundle, ids, n_new, subject.hook)?;
        let toxicity = scorer.score(scoring, &continuation)?;
        rows.push(PromptScore { id: id.clone(), continuation, toxicity });
    }
    let mean = rows.iter().map(|r| r.toxicity).sum::<f64>() / rows.len() as f64;
    Ok((mean, rows))
}

/// Mean of `−log p(token | prefix)` over every predicted position of every
/// sequence (the first token of each sequence is context only).
pub fn log_perplexity(subject: &Subject, corpus: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ids in corpus.iter().filter(|s| s.len() >= 2) {
        let trace = forward_hooked(subject.bundle, ids, subject.hook)?;
        for pos in 1..ids.len() {
            let logits: Vec<f64> = trace.logits(pos - 1).iter().map(|&v| v as f64).collect();
            total -= log_softmax(&logits)[ids[pos] as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("corpus has no sequence of length >= 2".into()));
    }
    Ok(total / count as f64)
}

/// Multiset token-overlap F1.
pub fn f1_overlap<T: std::hash::Hash + Eq>(pred: &[T], reference: &[T]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Splits each sentence in half, continues the first half greedily for as
/// many tokens as the second half has, and averages the F1 against it.
pub fn continuation_f1(subject: &Subject, corpus: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for ids in corpus.iter().filter(|s| s.len() >= 2) {
        let cut = ids.len() / 2;
        let (prefix, suffix) = ids.split_at(cut);
        let (pred, _) = generate_greedy_hooked(subject.bundle, prefix, suffix.len(), subject.hook)?;
        total += f1_overlap(&pred, suffix);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("corpus has no sequence of length >= 2".into()));
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub toxicity: f64,
    pub log_ppl: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub label: String,
    pub prompt_id: String,
    pub continuation: String,
    pub toxicity: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub detail: Vec<DetailRow>,
    /// Free-form provenance entries (paths and hashes).
    pub provenance: Vec<(String, String)>,
}

pub struct EvalInputs<'a> {
    pub scorer: &'a SurrogateScorer,
    pub scoring: &'a ModelBundle,
    pub prompts: &'a [(String, Vec<u32>)],
    pub corpus: &'a [Vec<u32>],
    pub n_new: usize,
}

pub fn evaluate_subject(label: &str, subject: &Subject, inputs: &EvalInputs) -> Result<(ReportRow, Vec<DetailRow>)> {
    let (toxicity, per_prompt) = toxicity_score(inputs.scorer, inputs.scoring, subject, inputs.prompts, inputs.n_new)?;
    let log_ppl = log_perplexity(subject, inputs.corpus)?;
    let f1 = continuation_f1(subject, inputs.corpus)?;
    let detail = per_prompt
        .into_iter()
        .map(|p| DetailRow {
            label: label.to_string(),
            prompt_id: p.id,
            continuation: subject.bundle.vocab.decode(&p.continuation),
            toxicity: p.toxicity,
        })
        .collect();
    Ok((
        ReportRow {
            label: label.to_string(),
            toxicity,
            log_ppl,
            f1,
        },
        detail,
    ))
}

pub fn build_report(runs: &[(String, Subject)], inputs: &EvalInputs) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (label, subject) in runs {
        let (row, detail) = evaluate_subject(label, subject, inputs)?;
        report.rows.push(row);
        report.detail.extend(detail);
    }
    Ok(report)
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,toxicity,log_ppl,f1\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(&r.label),
                fmt_sig(r.toxicity, 6),
                fmt_sig(r.log_ppl, 6),
                fmt_sig(r.f1, 6)
            ));
        }
        s
    }

    pub fn detail_csv(&self) -> String {
        let mut s = String::from("label,prompt_id,toxicity,continuation\n");
        for d in &self.detail {
            s.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(&d.label),
                csv_field(&d.prompt_id),
                fmt_sig(d.toxicity, 6),
                csv_field(&d.continuation)
            ));
        }
        s
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>.detail.csv` next to `csv_path`.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        write_bytes(csv_path, self.to_csv().as_bytes())?;
        write_json(&csv_path.with_extension("json"), &self.rounded())?;
        write_bytes(&csv_path.with_extension("detail.csv"), self.detail_csv().as_bytes())
    }

    /// Copy with every metric rounded to 6 significant digits.
    pub fn rounded(&self) -> EvalReport {
        let r6 = |x: f64| fmt_sig(x, 6).parse::<f64>().unwrap_or(x);
        EvalReport {
            rows: self
                .rows
                .iter()
                .map(|r| ReportRow {
                    label: r.label.clone(),
                    toxicity: r6(r.toxicity),
                    log_ppl: r6(r.log_ppl),
                    f1: r6(r.f1),
                })
                .collect(),
            detail: self
                .detail
                .iter()
                .map(|d| DetailRow { toxicity: r6(d.toxicity), ..d.clone() })
                .collect(),
            provenance: self.provenance.clone(),
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Encodes prompt records, rejecting empty ones.
pub fn encode_prompts(bundle: &ModelBundle, records: &[PromptRecord]) -> Result<Vec<(String, Vec<u32>)>> {
    records
        .iter()
        .map(|r| {
            let ids = bundle.vocab.encode(&r.text)?;
            if ids.is_empty() {
                return Err(Error::EmptyText);
            }
            Ok((r.id.clone(), ids))
        })
        .collect()
}

/// Scorer probability for an already-computed mean residual.
pub fn score_residual(scorer: &SurrogateScorer, residual: &[f64]) -> f64 {
    sigmoid(scorer.probe.logit(residual))
}
