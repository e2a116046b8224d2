//! Response generation with expectation or sampled-path mixup.

use std::collections::BTreeMap;

use crate::bridge::{infer_final_mu, path_from_noise, standard_noise, BridgeParams, DEFAULT_DELTA};
use crate::corpus::{Utterance, BOS, PAD};
use crate::decode::{decoders, DecodeStrategy, Registry};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::DialogModel;
use crate::seed::{stream_rng, streams, StreamRng};
use crate::seq2seq::{Fwd, SegmentedContext};
use crate::tensor::Mat;

/// Expectations of the context utterances and the inferred response one.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextMus {
    pub context: Vec<Vec<f64>>,
    pub response: Vec<f64>,
    /// Set when the context had one utterance and `μ_T = μ_0` was used.
    pub fallback: bool,
}

impl ContextMus {
    pub fn horizon(&self) -> usize {
        self.context.len()
    }
}

/// `μ_T` from the first and last context expectations; a single-utterance
/// context has nothing to extrapolate from and reuses `μ_0`.
pub fn final_mu(context: &[Vec<f64>]) -> Result<(Vec<f64>, bool)> {
    match context {
        [] => Err(Error::arg("empty context")),
        [only] => Ok((only.clone(), true)),
        [first, .., last] => Ok((infer_final_mu(first, last, context.len())?, false)),
    }
}

pub fn context_mus(model: &DialogModel, context: &[Utterance]) -> Result<ContextMus> {
    if context.is_empty() {
        return Err(Error::arg("empty context"));
    }
    let mus = model.mus(context)?;
    let (response, fallback) = final_mu(&mus)?;
    Ok(ContextMus {
        context: mus,
        response,
        fallback,
    })
}

/// Where the mixup latents come from at inference.
pub trait LatentSource: Send + Sync {
    fn name(&self) -> &'static str;
    /// Latents for the context utterances and for the response.
    fn latents(&self, mus: &ContextMus, delta: f64, noise_scale: f64, rng: &mut StreamRng)
        -> Result<(Vec<Vec<f64>>, Vec<f64>)>;
}

pub struct ExpectationSource;

impl LatentSource for ExpectationSource {
    fn name(&self) -> &'static str {
        "expectation"
    }

    fn latents(&self, mus: &ContextMus, _: f64, _: f64, _: &mut StreamRng) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        Ok((mus.context.clone(), mus.response.clone()))
    }
}

/// One path over the bridge from `μ_0` to the inferred `μ_T`; interior
/// means are the interpolant, endpoints use the extended spread.
pub struct SampledSource;

impl LatentSource for SampledSource {
    fn name(&self) -> &'static str {
        "sampled"
    }

    fn latents(
        &self,
        mus: &ContextMus,
        delta: f64,
        noise_scale: f64,
        rng: &mut StreamRng,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let horizon = mus.horizon();
        let p = BridgeParams::from_endpoints(&mus.context[0], &mus.response, horizon, delta)?;
        let noise = standard_noise(horizon, p.dim(), rng);
        let mut zs = path_from_noise(&p, &noise, noise_scale)?;
        let last = zs.pop().expect("path has T+1 points");
        Ok((zs, last))
    }
}

pub fn latent_sources() -> Registry<dyn LatentSource> {
    let mut r: Registry<dyn LatentSource> = Registry::default();
    r.register("expectation", |arg| match arg {
        None => Ok(Box::new(ExpectationSource)),
        Some(_) => Err(Error::arg("expectation mode takes no argument")),
    });
    r.register("sampled", |arg| match arg {
        None => Ok(Box::new(SampledSource)),
        Some(_) => Err(Error::arg("sampled mode takes no argument")),
    });
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub context: Vec<Utterance>,
    /// `expectation` or `sampled`.
    pub mode: String,
    /// `greedy`, `beam:<width>` or `topk:<k>`.
    pub decoding: String,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub delta: f64,
    /// Multiplies every path standard deviation; 1 is the bridge law.
    pub noise_scale: f64,
}

impl GenerationRequest {
    pub fn new(context: Vec<Utterance>, mode: &str, decoding: &str) -> Self {
        Self {
            context,
            mode: mode.into(),
            decoding: decoding.into(),
            max_new_tokens: 20,
            seed: 0,
            delta: DEFAULT_DELTA,
            noise_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub fallback: bool,
}

fn build_strategy(spec: &str) -> Result<Box<dyn DecodeStrategy>> {
    decoders().build(spec)
}

pub fn generate(model: &DialogModel, req: &GenerationRequest) -> Result<Generation> {
    if req.max_new_tokens == 0 {
        return Err(Error::arg("max_new_tokens must be at least 1"));
    }
    let source = latent_sources().build(&req.mode)?;
    let strategy = build_strategy(&req.decoding)?;
    let mus = context_mus(model, &req.context)?;
    let mut path_rng = stream_rng(req.seed, streams::PATHS, 0);
    let (z_ctx, z_resp) = source.latents(&mus, req.delta, req.noise_scale, &mut path_rng)?;

    let cfg = &model.cfg;
    let ctx = SegmentedContext::new(&req.context, cfg.max_len)?;
    let memory: Mat<f64> = {
        let mut g: Graph = Graph::new();
        let mut f = Fwd::new(&mut g, &model.store);
        let e = model.seq2seq.encode(&mut f, &ctx)?;
        let zs = f.g.constant(Mat::from_rows(&z_ctx));
        let ehat = model.seq2seq.mixup_encoder(&mut f, e, &ctx, zs)?;
        g.value(ehat).clone()
    };
    let z_resp = Mat::row_vector(&z_resp);
    let max_new = req.max_new_tokens.min(cfg.max_len - 1);
    let mut step = |prefix: &[u32]| -> Result<Vec<f64>> {
        debug_assert_eq!(prefix.first(), Some(&BOS));
        let mut g: Graph = Graph::new();
        let mut f = Fwd::new(&mut g, &model.store);
        let mem = f.g.constant(memory.clone());
        let z = f.g.constant(z_resp.clone());
        let logits = model.seq2seq.decode(&mut f, prefix, mem, Some(z))?;
        let lp = g.log_softmax(logits, None);
        let m = g.value(lp);
        let mut last = m.row(m.rows - 1).to_vec();
        // never emit structural tokens mid-sequence
        last[PAD as usize] = f64::NEG_INFINITY;
        last[BOS as usize] = f64::NEG_INFINITY;
        Ok(last)
    };
    let mut decode_rng = stream_rng(req.seed, streams::DECODE, 0);
    let out = strategy.decode(&mut step, max_new, &mut decode_rng)?;
    Ok(Generation {
        tokens: out.tokens,
        logprob: out.logprob,
        fallback: mus.fallback,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResponseCount {
    pub tokens: Vec<u32>,
    pub count: usize,
}

/// `n` generations with seeds `base..base+n`, deduplicated and ordered by
/// count (ties: first occurrence first).
pub fn diverse_generate(model: &DialogModel, req: &GenerationRequest, n: usize) -> Result<Vec<ResponseCount>> {
    if n == 0 {
        return Err(Error::arg("n must be at least 1"));
    }
    let mut counts: BTreeMap<Vec<u32>, (usize, usize)> = BTreeMap::new();
    for i in 0..n {
        let r = GenerationRequest {
            seed: req.seed + i as u64,
            ..req.clone()
        };
        let out = generate(model, &r)?;
        let e = counts.entry(out.tokens).or_insert((0, i));
        e.0 += 1;
    }
    let mut v: Vec<(Vec<u32>, usize, usize)> = counts.into_iter().map(|(t, (c, first))| (t, c, first)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    Ok(v.into_iter().map(|(tokens, count, _)| ResponseCount { tokens, count }).collect())
}
