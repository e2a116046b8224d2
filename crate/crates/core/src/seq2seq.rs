//! Pre-norm encoder–decoder transformer with latent mixup.
//!
//! Mixup is an elementwise affine gate `W_x ⊙ h + W_z ⊙ z`. It is applied
//! once to the final encoder outputs (with the latent of each token's source
//! utterance) and in every decoder layer right after self-attention (with
//! the response latent). The mixed decoder state is the cross-attention
//! query; the mixed encoder states are its keys and values. With `W_x = 1`
//! and `W_z = 0` the model is exactly a vanilla transformer.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Utterance, BOS, EOS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mask, Var};
use crate::mapper::Linear;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::seed::StreamRng;
use crate::tensor::{Mat, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Shared width of token states and latents.
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_mult: usize,
    pub mapper_hidden: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Restrict encoder self-attention to tokens of the same utterance.
    #[serde(default)]
    pub encode_per_utterance: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff_mult: 4,
            mapper_hidden: 32,
            max_len: 64,
            dropout: 0.1,
            encode_per_utterance: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::arg(format!("model config: {m}")));
        if self.vocab_size < 5 {
            return fail("vocab_size must cover the reserved tokens plus one word".into());
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.dec_layers == 0 {
            return fail("at least one decoder layer is required".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2".into());
        }
        Ok(())
    }
}

/// Flattened context: utterances each terminated by `<eos>`, with the source
/// utterance index of every token.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedContext {
    pub tokens: Vec<u32>,
    pub segments: Vec<usize>,
    /// Number of context utterances the segments index into.
    pub num_segments: usize,
    /// Tokens dropped from the left to respect `max_len`.
    pub truncated: usize,
}

impl SegmentedContext {
    pub fn new(utterances: &[Utterance], max_len: usize) -> Result<Self> {
        Self::from_token_lists(&utterances.iter().map(|u| u.tokens.as_slice()).collect::<Vec<_>>(), max_len)
    }

    pub fn from_token_lists(utterances: &[&[u32]], max_len: usize) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::arg("empty context"));
        }
        let mut tokens = Vec::new();
        let mut segments = Vec::new();
        for (t, u) in utterances.iter().enumerate() {
            for &tok in u.iter().chain(std::iter::once(&EOS)) {
                tokens.push(tok);
                segments.push(t);
            }
        }
        let truncated = tokens.len().saturating_sub(max_len);
        if truncated > 0 {
            log::debug!("context truncated by {truncated} tokens");
            tokens.drain(..truncated);
            segments.drain(..truncated);
        }
        Ok(Self {
            tokens,
            segments,
            num_segments: utterances.len(),
            truncated,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Latents for one forward pass: one row per context utterance plus the
/// response latent.
#[derive(Clone, Copy, Debug)]
pub struct MixInputs {
    pub context: Var,
    pub response: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), ParamGroup::LayerNorm, Mat::filled(1, d, 1.0)),
            bias: store.add(format!("{name}.bias"), ParamGroup::LayerNorm, Mat::zeros(1, d)),
        }
    }

    fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Var {
        let g = f.g.param(f.store, self.gain);
        let b = f.g.param(f.store, self.bias);
        f.g.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let mut lin = |s: &str| Linear::new(store, &format!("{name}.{s}"), ParamGroup::Attention, d, d, rng);
        Self {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
        }
    }

    fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, query: Var, memory: Var, mask: Option<Rc<Mask>>, heads: usize) -> Var {
        let q = self.q.forward(f.g, f.store, query);
        let k = self.k.forward(f.g, f.store, memory);
        let v = self.v.forward(f.g, f.store, memory);
        let d = f.g.value(q).cols;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = f.g.slice_cols(q, h * dh, dh);
            let kh = f.g.slice_cols(k, h * dh, dh);
            let vh = f.g.slice_cols(v, h * dh, dh);
            let s = f.g.matmul_nt(qh, kh);
            let s = f.g.scale(s, scale);
            let p = f.g.softmax(s, mask.clone());
            let p = f.dropout(p);
            outs.push(f.g.matmul(p, vh));
        }
        let cat = if heads == 1 { outs[0] } else { f.g.concat_cols(&outs) };
        self.o.forward(f.g, f.store, cat)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), ParamGroup::FeedForward, d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), ParamGroup::FeedForward, hidden, d, rng),
        }
    }

    fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Var {
        let h = self.up.forward(f.g, f.store, x);
        let h = f.g.relu(h);
        let h = f.dropout(h);
        self.down.forward(f.g, f.store, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub norm_attn: Norm,
    pub attn: Attention,
    pub norm_ff: Norm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub norm_self: Norm,
    pub self_attn: Attention,
    pub norm_cross: Norm,
    pub cross_attn: Attention,
    pub norm_ff: Norm,
    pub ff: FeedForward,
    pub mix_x: ParamId,
    pub mix_z: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq {
    pub cfg: ModelConfig,
    pub embed: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: Norm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: Norm,
    pub mix_enc_x: ParamId,
    pub mix_enc_z: ParamId,
}

/// Forward-pass context: the tape, the parameters, and (in training) the
/// dropout stream.
pub struct Fwd<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore,
    pub dropout: Option<(f64, &'a mut StreamRng)>,
}

impl<'a, T: Real> Fwd<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore) -> Self {
        Self { g, store, dropout: None }
    }

    pub fn with_dropout(mut self, p: f64, rng: &'a mut StreamRng) -> Self {
        if p > 0.0 {
            self.dropout = Some((p, rng));
        }
        self
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let p = *p;
        let (r, c) = self.g.shape(x);
        let keep = T::of(1.0 / (1.0 - p));
        let mask = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = self.g.constant(Mat::from_vec(r, c, mask));
        self.g.mul(x, m)
    }
}

/// `W_x ⊙ x + W_z ⊙ z`, broadcasting the `1×d` gates over rows.
pub fn mixup<T: Real>(g: &mut Graph<T>, x: Var, w_x: Var, w_z: Var, z: Var) -> Var {
    let a = g.mul(x, w_x);
    let b = g.mul(z, w_z);
    g.add(a, b)
}

pub fn sinusoidal_positions(n: usize, d: usize) -> Mat<f64> {
    let mut m = Mat::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

impl Seq2Seq {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut StreamRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("positive std");
        let table = (0..cfg.vocab_size * d).map(|_| normal.sample(rng)).collect();
        let embed = store.add("embed", ParamGroup::Embedding, Mat::from_vec(cfg.vocab_size, d, table));
        let hidden = d * cfg.ff_mult;
        let encoder = (0..cfg.enc_layers)
            .map(|i| {
                let n = format!("enc.{i}");
                EncoderLayer {
                    norm_attn: Norm::new(store, &format!("{n}.norm_attn"), d),
                    attn: Attention::new(store, &format!("{n}.attn"), d, rng),
                    norm_ff: Norm::new(store, &format!("{n}.norm_ff"), d),
                    ff: FeedForward::new(store, &format!("{n}.ff"), d, hidden, rng),
                }
            })
            .collect();
        let enc_norm = Norm::new(store, "enc.norm", d);
        let mix_enc_x = store.add("mix.enc.x", ParamGroup::MixEncX, Mat::filled(1, d, 1.0));
        let mix_enc_z = store.add("mix.enc.z", ParamGroup::MixEncZ, Mat::zeros(1, d));
        let decoder = (0..cfg.dec_layers)
            .map(|i| {
                let n = format!("dec.{i}");
                DecoderLayer {
                    norm_self: Norm::new(store, &format!("{n}.norm_self"), d),
                    self_attn: Attention::new(store, &format!("{n}.self_attn"), d, rng),
                    norm_cross: Norm::new(store, &format!("{n}.norm_cross"), d),
                    cross_attn: Attention::new(store, &format!("{n}.cross_attn"), d, rng),
                    norm_ff: Norm::new(store, &format!("{n}.norm_ff"), d),
                    ff: FeedForward::new(store, &format!("{n}.ff"), d, hidden, rng),
                    mix_x: store.add(format!("mix.dec.{i}.x"), ParamGroup::MixDecX, Mat::filled(1, d, 1.0)),
                    mix_z: store.add(format!("mix.dec.{i}.z"), ParamGroup::MixDecZ, Mat::zeros(1, d)),
                }
            })
            .collect();
        let dec_norm = Norm::new(store, "dec.norm", d);
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            mix_enc_x,
            mix_enc_z,
        })
    }

    fn embed_tokens<T: Real>(&self, f: &mut Fwd<'_, T>, tokens: &[u32]) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::arg(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        let table = f.g.param(f.store, self.embed);
        let rows = f.g.gather_rows(table, tokens.iter().map(|&t| t as usize).collect::<Vec<_>>());
        let rows = f.g.scale(rows, T::of(self.cfg.d_model as f64).sqrt());
        let pos = f.g.constant(sinusoidal_positions(tokens.len(), self.cfg.d_model).cast());
        Ok(f.g.add(rows, pos))
    }

    /// Final (layer-normed) encoder states, one row per context token.
    pub fn encode<T: Real>(&self, f: &mut Fwd<'_, T>, ctx: &SegmentedContext) -> Result<Var> {
        if ctx.len() > self.cfg.max_len {
            return Err(Error::arg(format!("context of {} tokens exceeds max_len {}", ctx.len(), self.cfg.max_len)));
        }
        let mut h = self.embed_tokens(f, &ctx.tokens)?;
        let mask = self.cfg.encode_per_utterance.then(|| {
            let segs = ctx.segments.clone();
            Rc::new(Mask::from_fn(segs.len(), segs.len(), |r, c| segs[r] == segs[c]))
        });
        for layer in &self.encoder {
            let x = layer.norm_attn.forward(f, h);
            let a = layer.attn.forward(f, x, x, mask.clone(), self.cfg.heads);
            h = f.g.add(h, a);
            let x = layer.norm_ff.forward(f, h);
            let m = layer.ff.forward(f, x);
            h = f.g.add(h, m);
        }
        Ok(self.enc_norm.forward(f, h))
    }

    /// Mixes each token state with the latent of its source utterance.
    pub fn mixup_encoder<T: Real>(&self, f: &mut Fwd<'_, T>, e: Var, ctx: &SegmentedContext, zs: Var) -> Result<Var> {
        let (rows, cols) = f.g.shape(zs);
        if cols != self.cfg.d_model {
            return Err(Error::arg(format!("latent width {cols} differs from d_model {}", self.cfg.d_model)));
        }
        if let Some(&s) = ctx.segments.iter().find(|&&s| s >= rows) {
            return Err(Error::arg(format!("no latent for context utterance {s}")));
        }
        let z = f.g.gather_rows(zs, ctx.segments.clone());
        let wx = f.g.param(f.store, self.mix_enc_x);
        let wz = f.g.param(f.store, self.mix_enc_z);
        Ok(mixup(f.g, e, wx, wz, z))
    }

    /// Teacher-forced decoder logits for `prefix` (which starts with `<bos>`).
    /// `response_latent` enables the per-layer mixup.
    pub fn decode<T: Real>(
        &self,
        f: &mut Fwd<'_, T>,
        prefix: &[u32],
        memory: Var,
        response_latent: Option<Var>,
    ) -> Result<Var> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::arg("decoder prefix must start with <bos>"));
        }
        if prefix.len() > self.cfg.max_len {
            return Err(Error::arg(format!("decoder prefix of {} exceeds max_len {}", prefix.len(), self.cfg.max_len)));
        }
        let n = prefix.len();
        let causal = Rc::new(Mask::causal(n));
        let mut h = self.embed_tokens(f, prefix)?;
        for layer in &self.decoder {
            let x = layer.norm_self.forward(f, h);
            let a = layer.self_attn.forward(f, x, x, Some(causal.clone()), self.cfg.heads);
            h = f.g.add(h, a);
            if let Some(z) = response_latent {
                let wx = f.g.param(f.store, layer.mix_x);
                let wz = f.g.param(f.store, layer.mix_z);
                h = mixup(f.g, h, wx, wz, z);
            }
            let x = layer.norm_cross.forward(f, h);
            let c = layer.cross_attn.forward(f, x, memory, None, self.cfg.heads);
            h = f.g.add(h, c);
            let x = layer.norm_ff.forward(f, h);
            let m = layer.ff.forward(f, x);
            h = f.g.add(h, m);
        }
        let h = self.dec_norm.forward(f, h);
        let table = f.g.param(f.store, self.embed);
        Ok(f.g.matmul_nt(h, table))
    }

    /// Full pass: encode, optionally mix, decode. `mix = None` is the vanilla
    /// transformer.
    pub fn forward<T: Real>(
        &self,
        f: &mut Fwd<'_, T>,
        ctx: &SegmentedContext,
        prefix: &[u32],
        mix: Option<MixInputs>,
    ) -> Result<Var> {
        let e = self.encode(f, ctx)?;
        match mix {
            Some(m) => {
                let ehat = self.mixup_encoder(f, e, ctx, m.context)?;
                self.decode(f, prefix, ehat, Some(m.response))
            }
            None => self.decode(f, prefix, e, None),
        }
    }
}

/// Teacher-forcing pair for a response: decoder input `<bos> x` and target `x <eos>`.
pub fn teacher_forcing(response: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut prefix = Vec::with_capacity(response.len() + 1);
    prefix.push(BOS);
    prefix.extend_from_slice(response);
    let mut target = response.to_vec();
    target.push(EOS);
    (prefix, target)
}

/// Row-wise log-softmax of plain logits; non-finite input is an error.
pub fn log_softmax(logits: &Mat<f64>) -> Result<Mat<f64>> {
    if !logits.is_finite() {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    let mut g: Graph = Graph::new();
    let x = g.constant(logits.clone());
    let y = g.log_softmax(x, None);
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;
    use approx::assert_abs_diff_eq;

    fn tiny() -> (ParamStore, Seq2Seq) {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            heads: 2,
            max_len: 16,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let m = Seq2Seq::new(&mut store, &cfg, &mut stream_rng(1, "init", 0)).unwrap();
        (store, m)
    }

    fn ctx(lists: &[&[u32]]) -> SegmentedContext {
        SegmentedContext::from_token_lists(lists, 16).unwrap()
    }

    #[test]
    fn segmented_context_layout() {
        let c = ctx(&[&[5, 6], &[7]]);
        assert_eq!(c.tokens, vec![5, 6, EOS, 7, EOS]);
        assert_eq!(c.segments, vec![0, 0, 0, 1, 1]);
        let t = SegmentedContext::from_token_lists(&[&[5, 6], &[7]], 3).unwrap();
        assert_eq!(t.tokens, vec![EOS, 7, EOS]);
        assert_eq!(t.segments, vec![0, 1, 1]);
        assert_eq!(t.truncated, 2);
        assert!(SegmentedContext::from_token_lists(&[], 3).is_err());
    }

    #[test]
    fn encoder_shape_and_order_sensitivity() {
        let (store, m) = tiny();
        let mut g: Graph = Graph::new();
        let mut f = Fwd::new(&mut g, &store);
        let a = m.encode(&mut f, &ctx(&[&[5, 6], &[7, 8]])).unwrap();
        let b = m.encode(&mut f, &ctx(&[&[7, 8], &[5, 6]])).unwrap();
        assert_eq!(g.shape(a), (6, 8));
        assert_ne!(g.value(a), g.value(b));
    }

    #[test]
    fn mixup_examples() {
        let mut g: Graph = Graph::new();
        let e = g.constant(Mat::from_rows(&[[1.0, 1.0]]));
        let z = g.constant(Mat::from_rows(&[[1.0, 1.0]]));
        let wx = g.constant(Mat::row_vector(&[2.0, 0.0]));
        let wz = g.constant(Mat::row_vector(&[0.0, 3.0]));
        let out = mixup(&mut g, e, wx, wz, z);
        assert_eq!(g.value(out).data, vec![2.0, 3.0]);

        let zero = g.constant(Mat::zeros(1, 2));
        let out = mixup(&mut g, e, wx, zero, z);
        assert_eq!(g.value(out).data, vec![2.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn mixup_is_linear_in_inputs(
            e in proptest::collection::vec(-5.0f64..5.0, 3),
            z in proptest::collection::vec(-5.0f64..5.0, 3),
            wx in proptest::collection::vec(-2.0f64..2.0, 3),
            wz in proptest::collection::vec(-2.0f64..2.0, 3),
            a in -4.0f64..4.0,
        ) {
            let mut g: Graph = Graph::new();
            let (wxv, wzv) = (g.constant(Mat::row_vector(&wx)), g.constant(Mat::row_vector(&wz)));
            let (ev, zv) = (g.constant(Mat::row_vector(&e)), g.constant(Mat::row_vector(&z)));
            let base = mixup(&mut g, ev, wxv, wzv, zv);
            let (es, zs) = (g.scale(ev, a), g.scale(zv, a));
            let scaled = mixup(&mut g, es, wxv, wzv, zs);
            for (s, b) in g.value(scaled).data.iter().zip(&g.value(base).data) {
                proptest::prop_assert!((s - a * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_mixup_broadcasts_per_segment() {
        let (mut store, m) = tiny();
        *store.value_mut(m.mix_enc_z) = Mat::filled(1, 8, 1.0);
        let c = ctx(&[&[5], &[6, 7]]);
        let mut g: Graph = Graph::new();
        let mut f = Fwd::new(&mut g, &store);
        let e = f.g.constant(Mat::zeros(c.len(), 8));
        let zs = f.g.constant(Mat::from_rows(&[[1.0; 8], [2.0; 8]]));
        let out = m.mixup_encoder(&mut f, e, &c, zs).unwrap();
        for (r, &s) in c.segments.iter().enumerate() {
            assert!(g.value(out).row(r).iter().all(|&v| v == (s + 1) as f64));
        }
        let mut f = Fwd::new(&mut g, &store);
        let one = f.g.constant(Mat::zeros(1, 8));
        let e = f.g.constant(Mat::zeros(c.len(), 8));
        assert!(m.mixup_encoder(&mut f, e, &c, one).is_err());
    }

    #[test]
    fn causality() {
        let (store, m) = tiny();
        let c = ctx(&[&[5, 6]]);
        let mut g: Graph = Graph::new();
        let mut f = Fwd::new(&mut g, &store);
        let a = m.forward(&mut f, &c, &[BOS, 7, 8, 9], None).unwrap();
        let b = m.forward(&mut f, &c, &[BOS, 7, 4, 4], None).unwrap();
        assert_eq!(g.value(a).row(0), g.value(b).row(0));
        assert_eq!(g.value(a).row(1), g.value(b).row(1));
        assert_ne!(g.value(a).row(2), g.value(b).row(2));
    }

    #[test]
    fn response_latent_sensitivity() {
        let (mut store, m) = tiny();
        let c = ctx(&[&[5, 6]]);
        let run = |store: &ParamStore, zval: f64| {
            let mut g: Graph = Graph::new();
            let mut f = Fwd::new(&mut g, store);
            let zs = f.g.constant(Mat::zeros(1, 8));
            let zr = f.g.constant(Mat::filled(1, 8, zval));
            let out = m
                .forward(&mut f, &c, &[BOS, 7], Some(MixInputs { context: zs, response: zr }))
                .unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(&store, 0.0), run(&store, 1.0));
        *store.value_mut(m.decoder[0].mix_z) = Mat::filled(1, 8, 0.5);
        assert_ne!(run(&store, 0.0), run(&store, 1.0));
    }

    #[test]
    fn prefix_checks() {
        let (store, m) = tiny();
        let c = ctx(&[&[5]]);
        let mut g: Graph = Graph::new();
        let mut f = Fwd::new(&mut g, &store);
        assert!(m.forward(&mut f, &c, &[7], None).is_err());
        assert!(m.forward(&mut f, &c, &[BOS; 17], None).is_err());
        assert!(m.forward(&mut f, &c, &[BOS, 40], None).is_err());
    }

    #[test]
    fn per_utterance_encoding_blocks_cross_attention() {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            heads: 2,
            max_len: 16,
            dropout: 0.0,
            encode_per_utterance: true,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let m = Seq2Seq::new(&mut store, &cfg, &mut stream_rng(1, "init", 0)).unwrap();
        let mut g: Graph = Graph::new();
        let mut f = Fwd::new(&mut g, &store);
        let a = m.encode(&mut f, &ctx(&[&[5, 6], &[7]])).unwrap();
        let b = m.encode(&mut f, &ctx(&[&[5, 6], &[9]])).unwrap();
        // the first utterance's states do not see the second utterance
        for r in 0..3 {
            assert_eq!(g.value(a).row(r), g.value(b).row(r));
        }
    }

    #[test]
    fn log_softmax_examples() {
        let u = log_softmax(&Mat::zeros(1, 8)).unwrap();
        for &v in &u.data {
            assert_abs_diff_eq!(v, -(8f64.ln()), epsilon = 1e-15);
        }
        let p = log_softmax(&Mat::row_vector(&[0.0, 3f64.ln()])).unwrap();
        assert_abs_diff_eq!(p.data[0].exp(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p.data[1].exp(), 0.75, epsilon = 1e-15);
        let shifted = log_softmax(&Mat::row_vector(&[5.0, 5.0 + 3f64.ln()])).unwrap();
        assert_abs_diff_eq!(shifted.data[0], p.data[0], epsilon = 1e-14);
        assert!(log_softmax(&Mat::row_vector(&[f64::NAN, 0.0])).is_err());
        let rows = log_softmax(&Mat::from_rows(&[[1.0, -2.0, 0.5], [3.0, 3.0, -1.0]])).unwrap();
        for r in 0..2 {
            let s: f64 = rows.row(r).iter().map(|v| v.exp()).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }
}
