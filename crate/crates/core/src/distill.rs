//! Training objective (contrastive mapping + NLL + path self-distillation)
//! and the optimization loop.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{marginal_coefficients, standard_noise, DEFAULT_DELTA};
use crate::checkpoint;
use crate::corpus::{Dialogue, Vocab, PAD};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mapper::{contrastive_loss, Triplet};
use crate::metrics::perplexity;
use crate::model::DialogModel;
use crate::optim::{inverse_sqrt_lr, Adam, AdamConfig};
use crate::seed::{stream_rng, streams, StreamRng};
use crate::seq2seq::{teacher_forcing, Fwd, MixInputs, ModelConfig, SegmentedContext};
use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub beta: f64,
    pub nll: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            nll: 1.0,
            kl: 1.0,
        }
    }
}

/// How student latents are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    /// Reparameterized draws from the bridge on the dialogue's endpoints.
    #[default]
    Sampled,
    /// Student latents are the expectations themselves (a diagnostic).
    Expectation,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub k: usize,
    pub delta: f64,
    pub weights: LossWeights,
    pub path_mode: PathMode,
    pub block_teacher: bool,
    pub dropout: bool,
    pub triplets_per_dialogue: usize,
    /// Off: a plain transformer trained on NLL alone (the ablation anchor).
    pub mixup: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            k: 1,
            delta: DEFAULT_DELTA,
            weights: LossWeights::default(),
            path_mode: PathMode::Sampled,
            block_teacher: true,
            dropout: true,
            triplets_per_dialogue: 4,
            mixup: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l_beta: f64,
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
}

/// Mean negative log-likelihood of `target` under per-position
/// log-distributions; pad targets are skipped.
pub fn nll_loss(log_dists: &Mat<f64>, target: &[u32]) -> Result<f64> {
    if log_dists.rows != target.len() {
        return Err(Error::arg(format!(
            "{} positions for {} targets",
            log_dists.rows,
            target.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, &t) in target.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let t = t as usize;
        if t >= log_dists.cols {
            return Err(Error::arg(format!("target {t} outside the distribution")));
        }
        sum -= log_dists.get(r, t);
        n += 1;
    }
    if n == 0 {
        return Err(Error::arg("no non-pad targets"));
    }
    Ok(sum / n as f64)
}

/// `KL(p ‖ q)` for two log-distributions over the same support.
pub fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .filter(|(lp, _)| lp.is_finite())
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum()
}

/// Mean over positions of row-wise `KL(teacher ‖ student)`.
pub fn distill_kl(teacher: &Mat<f64>, student: &Mat<f64>) -> Result<f64> {
    if teacher.shape() != student.shape() || teacher.rows == 0 {
        return Err(Error::arg("teacher and student distributions differ in shape"));
    }
    let total: f64 = (0..teacher.rows).map(|r| kl_divergence(teacher.row(r), student.row(r))).sum();
    Ok(total / teacher.rows as f64)
}

fn token_lists(d: &Dialogue) -> Vec<&[u32]> {
    d.utterances.iter().map(|u| u.tokens.as_slice()).collect()
}

fn response_pair(d: &Dialogue, cfg: &ModelConfig) -> (Vec<u32>, Vec<u32>) {
    let resp = &d.response().tokens;
    let keep = resp.len().min(cfg.max_len.saturating_sub(1));
    teacher_forcing(&resp[..keep])
}

/// Nodes of one dialogue's loss on a shared tape.
pub struct DialogueVars {
    pub mus: Var,
    pub teacher_log_probs: Var,
    /// Summed (not averaged) target NLL.
    pub nll_sum: Var,
    pub n_targets: usize,
    /// Mean over paths of the position-averaged KL, when requested.
    pub kl: Option<Var>,
}

/// Builds the teacher branch (expectation mixup) and `k` student branches
/// (path mixup) for one dialogue.
#[allow(clippy::too_many_arguments)]
pub fn dialogue_vars<T: Real>(
    g: &mut Graph<T>,
    model: &DialogModel,
    d: &Dialogue,
    opts: &LossOptions,
    with_kl: bool,
    path_rng: &mut StreamRng,
    dropout_rng: &mut StreamRng,
) -> Result<DialogueVars> {
    let cfg = &model.cfg;
    let horizon = d.horizon();
    let p_drop = if opts.dropout { cfg.dropout } else { 0.0 };
    let ctx = SegmentedContext::new(d.context(), cfg.max_len)?;
    let (prefix, target) = response_pair(d, cfg);
    let target_cols: Vec<usize> = target.iter().map(|&t| t as usize).collect();

    let mus = model.mus_var(g, &token_lists(d))?;
    let ctx_mus = g.gather_rows(mus, (0..horizon).collect::<Vec<_>>());
    let resp_mu = g.gather_rows(mus, vec![horizon]);

    let teacher_logits = {
        let mut f = Fwd::new(g, &model.store).with_dropout(p_drop, dropout_rng);
        let mix = opts.mixup.then_some(MixInputs {
            context: ctx_mus,
            response: resp_mu,
        });
        model.seq2seq.forward(&mut f, &ctx, &prefix, mix)?
    };
    let teacher = g.log_softmax(teacher_logits, None);
    let picked = g.pick(teacher, target_cols);
    let nll_sum = g.sum(picked);
    let nll_sum = g.scale(nll_sum, -T::one());

    let kl = if with_kl && opts.mixup && opts.k > 0 {
        let target_dist = if opts.block_teacher { g.detach(teacher) } else { teacher };
        let p = g.exp(target_dist);
        let mut per_path = Vec::with_capacity(opts.k);
        for _ in 0..opts.k {
            let zs = match opts.path_mode {
                PathMode::Expectation => mus,
                PathMode::Sampled => {
                    let dim = cfg.d_model;
                    let noise = standard_noise(horizon, dim, path_rng);
                    let mut mix = Mat::zeros(horizon + 1, horizon + 1);
                    let mut jitter = Mat::zeros(horizon + 1, dim);
                    for (t, eps) in noise.iter().enumerate() {
                        let c = marginal_coefficients(t, horizon, opts.delta)?;
                        mix.set(t, 0, T::of(c.w_start));
                        let prev = mix.get(t, horizon);
                        mix.set(t, horizon, prev + T::of(c.w_end));
                        for (j, &e) in eps.iter().enumerate() {
                            jitter.set(t, j, T::of(c.std * e));
                        }
                    }
                    let mix = g.constant(mix);
                    let mean = g.matmul(mix, mus);
                    let jitter = g.constant(jitter);
                    g.add(mean, jitter)
                }
            };
            let z_ctx = g.gather_rows(zs, (0..horizon).collect::<Vec<_>>());
            let z_resp = g.gather_rows(zs, vec![horizon]);
            let logits = {
                let mut f = Fwd::new(g, &model.store).with_dropout(p_drop, dropout_rng);
                model.seq2seq.forward(
                    &mut f,
                    &ctx,
                    &prefix,
                    Some(MixInputs {
                        context: z_ctx,
                        response: z_resp,
                    }),
                )?
            };
            let student = g.log_softmax(logits, None);
            let diff = g.sub(target_dist, student);
            let terms = g.mul(p, diff);
            per_path.push(g.sum(terms));
        }
        let total = if per_path.len() == 1 {
            per_path[0]
        } else {
            g.concat_rows(&per_path)
        };
        let total = g.sum(total);
        let denom = (opts.k * target.len()) as f64;
        Some(g.scale(total, T::one() / T::of(denom)))
    } else {
        None
    };

    Ok(DialogueVars {
        mus,
        teacher_log_probs: teacher,
        nll_sum,
        n_targets: target.len(),
        kl,
    })
}

/// Teacher-branch log-distributions and expectations, without dropout.
pub fn teacher_forward(model: &DialogModel, d: &Dialogue) -> Result<(Mat<f64>, Vec<Vec<f64>>)> {
    let mut g: Graph = Graph::new();
    let opts = LossOptions {
        dropout: false,
        ..LossOptions::default()
    };
    let mut rng = stream_rng(0, streams::PATHS, 0);
    let mut rng2 = stream_rng(0, streams::DROPOUT, 0);
    let v = dialogue_vars(&mut g, model, d, &opts, false, &mut rng, &mut rng2)?;
    let m = g.value(v.mus);
    let mus = (0..m.rows).map(|r| m.row(r).to_vec()).collect();
    Ok((g.value(v.teacher_log_probs).clone(), mus))
}

/// Summed target NLL and target count under expectation mixup, no dropout.
pub fn dialogue_nll(model: &DialogModel, d: &Dialogue) -> Result<(f64, usize)> {
    let (log_dists, _) = teacher_forward(model, d)?;
    let (_, target) = response_pair(d, &model.cfg);
    let n = target.len();
    Ok((nll_loss(&log_dists, &target)? * n as f64, n))
}

fn index_seed(step: u64, item: usize) -> u64 {
    (step << 20) ^ item as u64
}

/// Triplets over batch rows: every ordered triple for short dialogues,
/// otherwise `per_dialogue` distinct random triples.
pub fn batch_triplets(batch: &[Dialogue], per_dialogue: usize, rng: &mut impl Rng) -> Vec<Triplet> {
    let mut out = Vec::new();
    let mut offset = 0;
    for d in batch {
        let n = d.utterances.len();
        let mut push = |i: usize, j: usize, k: usize| {
            out.push(Triplet {
                rows: [offset + i, offset + j, offset + k],
                times: [i, j, k],
            })
        };
        if n <= 5 {
            for i in 0..n {
                for j in i + 1..n {
                    for k in j + 1..n {
                        push(i, j, k);
                    }
                }
            }
        } else {
            let mut chosen = BTreeSet::new();
            let mut idx: Vec<usize> = (0..n).collect();
            while chosen.len() < per_dialogue {
                idx.shuffle(rng);
                let mut t = [idx[0], idx[1], idx[2]];
                t.sort_unstable();
                chosen.insert(t);
            }
            for [i, j, k] in chosen {
                push(i, j, k);
            }
        }
        offset += n;
    }
    out
}

/// Loss terms and, when `grads` is set, parameter gradients for one batch.
/// Randomness (triplets, paths, dropout) derives from `(seed, step)`.
pub fn batch_loss<T: Real>(
    model: &DialogModel,
    batch: &[Dialogue],
    opts: &LossOptions,
    seed: u64,
    step: u64,
    grads: bool,
) -> Result<(LossTerms, Option<Vec<Mat<f64>>>)> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let w = opts.weights;
    let mut terms = LossTerms::default();
    let mut acc = grads.then(|| model.store.zero_grads());

    if w.beta != 0.0 && opts.mixup {
        let mut g: Graph<T> = Graph::new();
        let lists: Vec<&[u32]> = batch.iter().flat_map(token_lists).collect();
        let mus = model.mus_var(&mut g, &lists)?;
        let triplets = batch_triplets(batch, opts.triplets_per_dialogue, &mut stream_rng(seed, streams::TRIPLETS, step));
        if let Some(l) = contrastive_loss(&mut g, mus, &triplets)? {
            terms.l_beta = g.scalar(l).as_f64();
            if let Some(acc) = acc.as_mut() {
                let scaled = g.scale(l, T::of(w.beta));
                g.backward(scaled).accumulate_into(acc);
            }
        }
    }

    let total_targets: usize = batch.iter().map(|d| response_pair(d, &model.cfg).1.len()).sum();
    let with_kl = w.kl != 0.0 && opts.mixup;
    let per_dialogue: Vec<(f64, f64, Option<Vec<Mat<f64>>>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let mut g: Graph<T> = Graph::new();
            let mut path_rng = stream_rng(seed, streams::PATHS, index_seed(step, i));
            let mut drop_rng = stream_rng(seed, streams::DROPOUT, index_seed(step, i));
            let v = dialogue_vars(&mut g, model, d, opts, with_kl, &mut path_rng, &mut drop_rng)?;
            let nll = g.scalar(v.nll_sum).as_f64() / total_targets as f64;
            let kl = v.kl.map_or(0.0, |k| g.scalar(k).as_f64()) / batch.len() as f64;
            let grads = if grads {
                let mut loss = g.scale(v.nll_sum, T::of(w.nll / total_targets as f64));
                if let Some(k) = v.kl {
                    let k = g.scale(k, T::of(w.kl / batch.len() as f64));
                    loss = g.add(loss, k);
                }
                let mut buf = model.store.zero_grads();
                g.backward(loss).accumulate_into(&mut buf);
                Some(buf)
            } else {
                None
            };
            Ok((nll, kl, grads))
        })
        .collect::<Result<_>>()?;

    for (nll, kl, gr) in per_dialogue {
        terms.nll += nll;
        terms.kl += kl;
        if let (Some(acc), Some(gr)) = (acc.as_mut(), gr) {
            for (a, b) in acc.iter_mut().zip(&gr) {
                a.add_assign(b);
            }
        }
    }
    terms.total = w.beta * terms.l_beta + w.nll * terms.nll + w.kl * terms.kl;
    let grads_finite = acc.as_ref().is_none_or(|a| a.iter().all(Mat::is_finite));
    if !terms.total.is_finite() || !grads_finite {
        return Err(Error::Numerical(format!(
            "non-finite loss at step {step}: l_beta={} nll={} kl={} (gradients finite: {grads_finite})",
            terms.l_beta, terms.nll, terms.kl
        )));
    }
    Ok((terms, acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Paths per dialogue.
    pub k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub delta: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub block_teacher: bool,
    pub path_mode: PathMode,
    pub triplets_per_dialogue: usize,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Off: train the plain transformer baseline.
    pub mixup: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            k: 2,
            lr: 1e-3,
            batch_size: 16,
            warmup: 4000,
            beta1: 0.9,
            beta2: 0.98,
            delta: DEFAULT_DELTA,
            max_steps: 1000,
            seed: 0,
            weights: LossWeights::default(),
            block_teacher: true,
            path_mode: PathMode::Sampled,
            triplets_per_dialogue: 4,
            checkpoint_every: 0,
            patience: 10,
            mixup: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: &str| Err(Error::arg(format!("train config: {m}")));
        if self.k < 1 {
            return fail("k must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            // the horizon can be 1, and δ must stay below it
            return fail("delta must lie in (0, 1)");
        }
        if self.triplets_per_dialogue < 1 {
            return fail("triplets_per_dialogue must be at least 1");
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            k: self.k,
            delta: self.delta,
            weights: self.weights,
            path_mode: self.path_mode,
            block_teacher: self.block_teacher,
            dropout: true,
            triplets_per_dialogue: self.triplets_per_dialogue,
            mixup: self.mixup,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: DialogModel,
    pub adam: Adam,
    pub step: u64,
    pub best_valid: Option<f64>,
    pub bad_epochs: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = DialogModel::new(&cfg.model, cfg.seed)?;
        let adam = Adam::new(
            AdamConfig {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                ..AdamConfig::default()
            },
            &model.store,
        );
        Ok(Self {
            cfg: cfg.clone(),
            model,
            adam,
            step: 0,
            best_valid: None,
            bad_epochs: 0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub l_beta: f64,
    pub nll: f64,
    pub kl: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,l_beta,nll,kl,lr";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.l_beta, self.nll, self.kl, self.lr)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    /// Validation perplexity after each completed epoch.
    pub valid_ppl: Vec<f64>,
    pub early_stopped: bool,
}

/// Where and how often the loop persists state.
#[derive(Clone, Copy, Debug, Default)]
pub struct CheckpointSink<'a> {
    pub dir: Option<&'a Path>,
    pub vocab: Option<&'a Vocab>,
}

/// Epoch-local batch order, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, streams::DATA_ORDER, epoch));
    idx
}

/// Trains until `state.cfg.max_steps` or early stop. Resuming from a
/// checkpoint continues the exact batch sequence of an uninterrupted run.
pub fn train(
    state: &mut TrainState,
    data: &[Dialogue],
    valid: &[Dialogue],
    sink: CheckpointSink<'_>,
) -> Result<TrainReport> {
    let cfg = state.cfg.clone();
    cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.max_steps > state.step && data.is_empty() {
        return Err(Error::arg("cannot train on an empty corpus"));
    }
    let opts = cfg.loss_options();
    let per_epoch = data.len().div_ceil(cfg.batch_size).max(1) as u64;
    let mut order: Option<(u64, Vec<usize>)> = None;

    while state.step < cfg.max_steps {
        let epoch = state.step / per_epoch;
        let offset = (state.step % per_epoch) as usize;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(data.len(), cfg.seed, epoch)));
        }
        let idx = &order.as_ref().expect("order set above").1;
        let lo = offset * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(data.len());
        let batch: Vec<Dialogue> = idx[lo..hi].iter().map(|&i| data[i].clone()).collect();

        let (terms, grads) = batch_loss::<f64>(&state.model, &batch, &opts, cfg.seed, state.step, true)?;
        let lr = inverse_sqrt_lr(cfg.lr, cfg.warmup, state.step + 1);
        state.adam.step(&mut state.model.store, &grads.expect("gradients requested"), lr)?;
        state.step += 1;
        report.log.push(StepLog {
            step: state.step,
            l_beta: terms.l_beta,
            nll: terms.nll,
            kl: terms.kl,
            lr,
        });
        log::debug!(
            "step {} l_beta {:.4} nll {:.4} kl {:.4} lr {:.2e}",
            state.step,
            terms.l_beta,
            terms.nll,
            terms.kl,
            lr
        );

        if let Some(dir) = sink.dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                checkpoint::save(dir, state, sink.vocab)?;
            }
        }

        if state.step % per_epoch == 0 && !valid.is_empty() {
            let ppl = perplexity(&state.model, valid)?;
            report.valid_ppl.push(ppl);
            log::info!("epoch {} valid ppl {ppl:.4}", state.step / per_epoch);
            if state.best_valid.is_none_or(|b| ppl < b) {
                state.best_valid = Some(ppl);
                state.bad_epochs = 0;
            } else {
                state.bad_epochs += 1;
                if state.bad_epochs >= cfg.patience {
                    report.early_stopped = true;
                    break;
                }
            }
        }
    }
    if let Some(dir) = sink.dir {
        checkpoint::save(dir, state, sink.vocab)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthSpec};
    use approx::assert_abs_diff_eq;

    pub(crate) fn tiny_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff_mult: 2,
            mapper_hidden: 8,
            max_len: 32,
            dropout: 0.1,
            encode_per_utterance: false,
        }
    }

    fn corpus() -> (Vec<Dialogue>, usize) {
        let c = synth_corpus(&SynthSpec {
            templates: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        (c.train, c.vocab.len())
    }

    #[test]
    fn nll_examples() {
        let perfect = Mat::from_rows(&[[f64::NEG_INFINITY, 0.0], [f64::NEG_INFINITY, 0.0]]);
        assert_eq!(nll_loss(&perfect, &[1, 1]).unwrap(), 0.0);
        let uniform = Mat::filled(3, 8, -(8f64.ln()));
        assert_abs_diff_eq!(nll_loss(&uniform, &[4, 5, 6]).unwrap(), 8f64.ln(), epsilon = 1e-15);
        let two = Mat::from_rows(&[
            [0.25f64.ln(), 0.5f64.ln(), 0.25f64.ln()],
            [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()],
        ]);
        // gold probabilities 0.5 and 0.25: (ln 2 + ln 4) / 2
        assert_abs_diff_eq!(nll_loss(&two, &[1, 1]).unwrap(), 1.5 * 2f64.ln(), epsilon = 1e-15);
        assert!(nll_loss(&two, &[1]).is_err());
        // pads are skipped
        assert_abs_diff_eq!(nll_loss(&two, &[1, PAD]).unwrap(), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn kl_examples() {
        let t = [0.75f64.ln(), 0.25f64.ln()];
        let s = [0.5f64.ln(), 0.5f64.ln()];
        // 0.75 ln 1.5 + 0.25 ln 0.5
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert_abs_diff_eq!(kl_divergence(&t, &s), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.1308, epsilon = 1e-4);
        assert_eq!(kl_divergence(&t, &t), 0.0);
        let a = Mat::from_rows(&[t, s]);
        let b = Mat::from_rows(&[s, s]);
        assert_abs_diff_eq!(distill_kl(&a, &b).unwrap(), expected / 2.0, epsilon = 1e-15);
        assert!(distill_kl(&a, &Mat::zeros(1, 2)).is_err());
    }

    #[test]
    fn triplet_policy() {
        let (data, _) = corpus();
        let mut rng = stream_rng(0, streams::TRIPLETS, 0);
        // 4 utterances: C(4,3) ordered triples each
        let t = batch_triplets(&data[..2], 4, &mut rng);
        assert_eq!(t.len(), 8);
        assert_eq!(t[4].rows, [4, 5, 6]);
        let vocab = Vocab::from_words(["a"]);
        let long = Dialogue::from_texts(&["a"; 7], &vocab).unwrap();
        let t = batch_triplets(&[long], 4, &mut rng);
        assert_eq!(t.len(), 4);
        assert!(t.iter().all(|x| x.times[0] < x.times[1] && x.times[1] < x.times[2]));
    }

    #[test]
    fn expectation_paths_give_zero_kl() {
        let (data, v) = corpus();
        let model = DialogModel::new(&tiny_cfg(v), 1).unwrap();
        let opts = LossOptions {
            k: 3,
            path_mode: PathMode::Expectation,
            dropout: false,
            ..LossOptions::default()
        };
        let (terms, _) = batch_loss::<f64>(&model, &data[..4], &opts, 0, 0, false).unwrap();
        assert_eq!(terms.kl, 0.0);
        let sampled = LossOptions {
            path_mode: PathMode::Sampled,
            ..opts
        };
        let (terms, _) = batch_loss::<f64>(&model, &data[..4], &sampled, 0, 0, false).unwrap();
        assert!(terms.kl >= 0.0);
    }

    #[test]
    fn weight_gating() {
        let (data, v) = corpus();
        let model = DialogModel::new(&tiny_cfg(v), 1).unwrap();
        let full = LossOptions::default();
        let (a, _) = batch_loss::<f64>(&model, &data[..3], &full, 5, 2, false).unwrap();
        let gated = LossOptions {
            weights: LossWeights {
                kl: 0.0,
                ..LossWeights::default()
            },
            ..full
        };
        let (b, _) = batch_loss::<f64>(&model, &data[..3], &gated, 5, 2, false).unwrap();
        assert_eq!(b.kl, 0.0);
        assert_abs_diff_eq!(b.total, a.l_beta + a.nll, epsilon = 1e-12);
    }

    #[test]
    fn no_mixup_is_the_plain_transformer() {
        let (data, v) = corpus();
        let mut model = DialogModel::new(&tiny_cfg(v), 1).unwrap();
        // gates far from identity would change the loss if they were used
        for p in model.store.iter_mut() {
            if p.name.starts_with("mix.") {
                p.value.data.iter_mut().for_each(|x| *x += 0.7);
            }
        }
        let opts = LossOptions {
            mixup: false,
            dropout: false,
            ..LossOptions::default()
        };
        let (terms, grads) = batch_loss::<f64>(&model, &data[..3], &opts, 0, 0, true).unwrap();
        assert_eq!((terms.l_beta, terms.kl), (0.0, 0.0));
        let (n, count): (f64, usize) = data[..3]
            .iter()
            .map(|d| {
                let (tf_in, target) = response_pair(d, &model.cfg);
                let ctx = SegmentedContext::new(d.context(), model.cfg.max_len).unwrap();
                let mut g: Graph = Graph::new();
                let mut f = Fwd::new(&mut g, &model.store);
                let logits = model.seq2seq.forward(&mut f, &ctx, &tf_in, None).unwrap();
                let lp = g.log_softmax(logits, None);
                (nll_loss(g.value(lp), &target).unwrap() * target.len() as f64, target.len())
            })
            .fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
        assert_abs_diff_eq!(terms.nll, n / count as f64, epsilon = 1e-12);
        let grads = grads.unwrap();
        for ((_, p), g) in model.store.iter().zip(&grads) {
            if p.name.starts_with("mix.") || p.group == crate::params::ParamGroup::Mapper {
                assert!(g.data.iter().all(|&x| x == 0.0), "{} received gradient", p.name);
            }
        }
    }

    #[test]
    fn teacher_is_blocked_from_kl() {
        let (data, v) = corpus();
        let model = DialogModel::new(&tiny_cfg(v), 1).unwrap();
        let opts = LossOptions {
            k: 2,
            dropout: false,
            ..LossOptions::default()
        };
        let mut g: Graph = Graph::new();
        let mut r1 = stream_rng(0, streams::PATHS, 0);
        let mut r2 = stream_rng(0, streams::DROPOUT, 0);
        let v = dialogue_vars(&mut g, &model, &data[0], &opts, true, &mut r1, &mut r2).unwrap();
        let grads = g.backward(v.kl.unwrap());
        assert!(grads.of(v.teacher_log_probs).is_none_or(|m| m.data.iter().all(|&x| x == 0.0)));

        let unblocked = LossOptions {
            block_teacher: false,
            ..opts
        };
        let mut g: Graph = Graph::new();
        let mut r1 = stream_rng(0, streams::PATHS, 0);
        let mut r2 = stream_rng(0, streams::DROPOUT, 0);
        let v = dialogue_vars(&mut g, &model, &data[0], &unblocked, true, &mut r1, &mut r2).unwrap();
        let grads = g.backward(v.kl.unwrap());
        assert!(grads.of(v.teacher_log_probs).is_some_and(|m| m.data.iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let (data, v) = corpus();
        let cfg = TrainConfig {
            model: tiny_cfg(v),
            max_steps: 0,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&cfg).unwrap();
        let before = state.clone();
        let report = train(&mut state, &data, &[], CheckpointSink::default()).unwrap();
        assert!(report.log.is_empty());
        assert_eq!(state, before);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (data, v) = corpus();
        let cfg = TrainConfig {
            model: tiny_cfg(v),
            max_steps: 6,
            batch_size: 4,
            warmup: 2,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let run = |cfg: &TrainConfig| {
            let mut s = TrainState::new(cfg).unwrap();
            let r = train(&mut s, &data, &[], CheckpointSink::default()).unwrap();
            (s, r)
        };
        let (a, ra) = run(&cfg);
        let (b, rb) = run(&cfg);
        assert_eq!(ra, rb);
        assert_eq!(a.model.store, b.model.store);

        let dir = tempfile::tempdir().unwrap();
        let mut half = TrainState::new(&TrainConfig { max_steps: 3, ..cfg.clone() }).unwrap();
        train(
            &mut half,
            &data,
            &[],
            CheckpointSink {
                dir: Some(dir.path()),
                vocab: None,
            },
        )
        .unwrap();
        let (mut resumed, _) = checkpoint::load(dir.path()).unwrap();
        resumed.cfg.max_steps = 6;
        let rr = train(&mut resumed, &data, &[], CheckpointSink::default()).unwrap();
        assert_eq!(rr.log[..], ra.log[3..]);
        assert_eq!(resumed.model.store, a.model.store);
    }
}
