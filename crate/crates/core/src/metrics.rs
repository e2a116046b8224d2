//! Corpus BLEU, Distinct-n, n-gram entropy, and perplexity.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{prefix_key, Dialogue, Vocab, PAD};
use crate::distill::{dialogue_nll, nll_loss};
use crate::tensor::Mat;
use crate::error::{Error, Result};
use crate::infer::{generate, GenerationRequest};
use crate::model::DialogModel;

/// Added to zero n-gram precisions so the geometric mean stays finite.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngrams<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut m = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-n in percent with max-over-references clipping and a
/// closest-reference brevity penalty.
pub fn bleu_n<T: Ord + Clone>(hyps: &[Vec<T>], refs: &[Vec<Vec<T>>], n: usize) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::arg("no hypotheses"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::arg(format!("{} hypotheses but {} reference sets", hyps.len(), refs.len())));
    }
    if n == 0 {
        return Err(Error::arg("BLEU order must be at least 1"));
    }
    if refs.iter().any(Vec::is_empty) {
        return Err(Error::arg("every hypothesis needs at least one reference"));
    }
    let mut matches = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, rs) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        // closest reference length; ties go to the shorter one
        ref_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .expect("non-empty reference set");
        for m in 1..=n {
            let hc = ngrams(h, m);
            let mut max_ref: BTreeMap<&[T], usize> = BTreeMap::new();
            for r in rs {
                for (g, c) in ngrams(r, m) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in hc {
                totals[m - 1] += c;
                matches[m - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let log_mean = (0..n)
        .map(|i| {
            let p = if totals[i] == 0 { 0.0 } else { matches[i] as f64 / totals[i] as f64 };
            if p == 0.0 { BLEU_EPSILON } else { p }.ln()
        })
        .sum::<f64>()
        / n as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_mean.exp())
}

/// Percentage of unique n-grams among all n-grams of all hypotheses.
pub fn distinct_n<T: Ord + Clone>(hyps: &[Vec<T>], n: usize) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::arg("no hypotheses"));
    }
    let mut unique = BTreeSet::new();
    let mut total = 0usize;
    for h in hyps {
        if n > 0 && h.len() >= n {
            for w in h.windows(n) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        log::warn!("no {n}-grams in the hypotheses; distinct-{n} is 0");
        return Ok(0.0);
    }
    Ok(100.0 * unique.len() as f64 / total as f64)
}

/// Entropy (nats) of the pooled n-gram distribution.
pub fn entropy_n<T: Ord + Clone>(hyps: &[Vec<T>], n: usize) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::arg("no hypotheses"));
    }
    let mut counts: BTreeMap<&[T], usize> = BTreeMap::new();
    for h in hyps {
        for (g, c) in ngrams(h, n) {
            *counts.entry(g).or_insert(0) += c;
        }
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        log::warn!("no {n}-grams in the hypotheses; entropy-{n} is 0");
        return Ok(0.0);
    }
    let total = total as f64;
    Ok(-counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            p * p.ln()
        })
        .sum::<f64>())
}

/// `exp` of the token-weighted mean NLL over `(log-distributions, target)`
/// pairs; pad targets are skipped.
pub fn perplexity_from_log_dists(items: &[(Mat<f64>, Vec<u32>)]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::arg("perplexity needs at least one sequence"));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (dists, target) in items {
        let count = target.iter().filter(|&&t| t != PAD).count();
        sum += nll_loss(dists, target)? * count as f64;
        n += count;
    }
    Ok((sum / n as f64).exp())
}

/// `exp` of the mean per-token NLL under expectation mixup.
pub fn perplexity(model: &DialogModel, dialogues: &[Dialogue]) -> Result<f64> {
    if dialogues.is_empty() {
        return Err(Error::arg("perplexity needs at least one dialogue"));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for d in dialogues {
        let (s, c) = dialogue_nll(model, d)?;
        sum += s;
        n += c;
    }
    Ok((sum / n as f64).exp())
}

/// Share (percent) of responses that are a known continuation of their context.
pub fn continuation_rate<S: AsRef<str>>(
    contexts: &[Vec<S>],
    responses: &[String],
    continuations: &BTreeMap<String, Vec<String>>,
) -> Result<f64> {
    if contexts.len() != responses.len() || contexts.is_empty() {
        return Err(Error::arg("need one response per context"));
    }
    let hits = contexts
        .iter()
        .zip(responses)
        .filter(|(c, r)| continuations.get(&prefix_key(c)).is_some_and(|set| set.contains(r)))
        .count();
    Ok(100.0 * hits as f64 / contexts.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: [f64; 4],
    pub distinct: [f64; 2],
    pub entropy4: f64,
    pub ppl: f64,
    pub hypotheses: usize,
    pub references: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "bleu1,bleu2,bleu3,bleu4,distinct1,distinct2,entropy4,ppl,hypotheses,references";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.distinct[0],
            self.distinct[1],
            self.entropy4,
            self.ppl,
            self.hypotheses,
            self.references
        )
    }

    /// Scores token lists against reference sets; `ppl` is supplied.
    pub fn score<T: Ord + Clone>(hyps: &[Vec<T>], refs: &[Vec<Vec<T>>], ppl: f64) -> Result<Self> {
        Ok(Self {
            bleu: [
                bleu_n(hyps, refs, 1)?,
                bleu_n(hyps, refs, 2)?,
                bleu_n(hyps, refs, 3)?,
                bleu_n(hyps, refs, 4)?,
            ],
            distinct: [distinct_n(hyps, 1)?, distinct_n(hyps, 2)?],
            entropy4: entropy_n(hyps, 4)?,
            ppl,
            hypotheses: hyps.len(),
            references: refs.iter().map(Vec::len).sum(),
        })
    }
}

/// Generates one response per dialogue context and scores it against the
/// gold response plus any alternative references.
pub fn evaluate(
    model: &DialogModel,
    vocab: &Vocab,
    dialogues: &[Dialogue],
    template: &GenerationRequest,
) -> Result<(EvalReport, Vec<String>)> {
    let mut hyps = Vec::with_capacity(dialogues.len());
    let mut refs = Vec::with_capacity(dialogues.len());
    let mut texts = Vec::with_capacity(dialogues.len());
    for (i, d) in dialogues.iter().enumerate() {
        let req = GenerationRequest {
            context: d.context().to_vec(),
            seed: template.seed + i as u64,
            ..template.clone()
        };
        let out = generate(model, &req)?;
        texts.push(vocab.decode(&out.tokens));
        hyps.push(out.tokens);
        let mut r = vec![d.response().tokens.clone()];
        r.extend(d.alt_responses.iter().map(|u| u.tokens.clone()));
        refs.push(r);
    }
    let ppl = perplexity(model, dialogues)?;
    Ok((EvalReport::score(&hyps, &refs, ppl)?, texts))
}
