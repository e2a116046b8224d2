//! Autoregressive decoding strategies behind a common trait, selected by
//! name at runtime.

use std::collections::BTreeMap;

use rand::Rng;

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::seed::StreamRng;

/// Next-token log-probabilities given a prefix that starts with `<bos>`.
pub type StepFn<'a> = dyn FnMut(&[u32]) -> Result<Vec<f64>> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Generated tokens without `<bos>` or the closing `<eos>`.
    pub tokens: Vec<u32>,
    /// Summed log-probability of every emitted token, `<eos>` included.
    pub logprob: f64,
}

pub trait DecodeStrategy: Send + Sync {
    fn name(&self) -> String;
    fn decode(&self, step: &mut StepFn<'_>, max_new: usize, rng: &mut StreamRng) -> Result<Decoded>;
}

/// Name → factory table; the optional argument is the `:n` suffix of a spec
/// such as `beam:5`.
pub struct Registry<S: ?Sized> {
    entries: BTreeMap<&'static str, fn(Option<usize>) -> Result<Box<S>>>,
}

impl<S: ?Sized> Default for Registry<S> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

impl<S: ?Sized> Registry<S> {
    pub fn register(&mut self, name: &'static str, factory: fn(Option<usize>) -> Result<Box<S>>) {
        self.entries.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn build(&self, spec: &str) -> Result<Box<S>> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => {
                let v = a
                    .parse::<usize>()
                    .map_err(|_| Error::arg(format!("bad argument {a:?} in {spec:?}")))?;
                (n, Some(v))
            }
            None => (spec, None),
        };
        let factory = self.entries.get(name).ok_or_else(|| {
            Error::arg(format!("unknown strategy {name:?}; known: {}", self.names().join(", ")))
        })?;
        factory(arg)
    }
}

pub fn decoders() -> Registry<dyn DecodeStrategy> {
    let mut r: Registry<dyn DecodeStrategy> = Registry::default();
    r.register("greedy", |arg| match arg {
        None => Ok(Box::new(Greedy)),
        Some(_) => Err(Error::arg("greedy takes no argument")),
    });
    r.register("beam", |arg| Ok(Box::new(Beam::new(arg.unwrap_or(5))?)));
    r.register("topk", |arg| Ok(Box::new(TopK::new(arg.unwrap_or(5))?)));
    r
}

fn check_max(max_new: usize) -> Result<()> {
    if max_new == 0 {
        return Err(Error::arg("max new tokens must be at least 1"));
    }
    Ok(())
}

fn expect_finite_len(lp: &[f64]) -> Result<()> {
    if lp.is_empty() || lp.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("invalid next-token distribution".into()));
    }
    Ok(())
}

/// Highest log-probability; ties go to the lowest token id.
fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

pub struct Greedy;

impl DecodeStrategy for Greedy {
    fn name(&self) -> String {
        "greedy".into()
    }

    fn decode(&self, step: &mut StepFn<'_>, max_new: usize, _rng: &mut StreamRng) -> Result<Decoded> {
        check_max(max_new)?;
        let mut prefix = vec![BOS];
        let mut logprob = 0.0;
        for _ in 0..max_new {
            let lp = step(&prefix)?;
            expect_finite_len(&lp)?;
            let t = argmax(&lp);
            logprob += lp[t];
            if t as u32 == EOS {
                break;
            }
            prefix.push(t as u32);
        }
        Ok(Decoded {
            tokens: prefix[1..].to_vec(),
            logprob,
        })
    }
}

/// Beam search; finished hypotheses are ranked by mean per-token log-prob.
pub struct Beam {
    pub width: usize,
}

impl Beam {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::arg("beam width must be at least 1"));
        }
        Ok(Self { width })
    }
}

struct Hyp {
    tokens: Vec<u32>,
    score: f64,
}

impl Hyp {
    fn averaged(&self) -> f64 {
        self.score / (self.tokens.len() - 1).max(1) as f64
    }
}

impl DecodeStrategy for Beam {
    fn name(&self) -> String {
        format!("beam:{}", self.width)
    }

    fn decode(&self, step: &mut StepFn<'_>, max_new: usize, _rng: &mut StreamRng) -> Result<Decoded> {
        check_max(max_new)?;
        let mut alive = vec![Hyp {
            tokens: vec![BOS],
            score: 0.0,
        }];
        let mut finished: Vec<Hyp> = Vec::new();
        for _ in 0..max_new {
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (h, hyp) in alive.iter().enumerate() {
                let lp = step(&hyp.tokens)?;
                expect_finite_len(&lp)?;
                cands.extend(lp.iter().enumerate().map(|(t, &v)| (hyp.score + v, h, t)));
            }
            // ties resolve to the earlier hypothesis, then the lower token
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(self.width);
            for &(score, h, t) in cands.iter().take(self.width) {
                let mut tokens = alive[h].tokens.clone();
                tokens.push(t as u32);
                let hyp = Hyp { tokens, score };
                if t as u32 == EOS {
                    finished.push(hyp);
                } else {
                    next.push(hyp);
                }
            }
            alive = next;
            if alive.is_empty() || finished.len() >= self.width {
                break;
            }
        }
        finished.extend(alive);
        let best = finished
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.averaged().total_cmp(&b.averaged()).then(j.cmp(i)))
            .map(|(_, h)| h)
            .expect("at least one hypothesis");
        let mut tokens = best.tokens[1..].to_vec();
        if tokens.last() == Some(&EOS) {
            tokens.pop();
        }
        Ok(Decoded {
            tokens,
            logprob: best.score,
        })
    }
}

/// Samples from the `k` most likely tokens, renormalized.
pub struct TopK {
    pub k: usize,
}

impl TopK {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::arg("top-k needs k >= 1"));
        }
        Ok(Self { k })
    }
}

impl DecodeStrategy for TopK {
    fn name(&self) -> String {
        format!("topk:{}", self.k)
    }

    fn decode(&self, step: &mut StepFn<'_>, max_new: usize, rng: &mut StreamRng) -> Result<Decoded> {
        check_max(max_new)?;
        let mut prefix = vec![BOS];
        let mut logprob = 0.0;
        for _ in 0..max_new {
            let lp = step(&prefix)?;
            expect_finite_len(&lp)?;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            order.truncate(self.k);
            let top = lp[order[0]];
            let weights: Vec<f64> = order.iter().map(|&t| (lp[t] - top).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = order[order.len() - 1];
            for (&t, &w) in order.iter().zip(&weights) {
                if u < w {
                    pick = t;
                    break;
                }
                u -= w;
            }
            logprob += lp[pick];
            if pick as u32 == EOS {
                break;
            }
            prefix.push(pick as u32);
        }
        Ok(Decoded {
            tokens: prefix[1..].to_vec(),
            logprob,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;
    use proptest::prelude::*;

    /// A toy language model: the next-token table depends on the last token.
    fn table_lm(table: Vec<Vec<f64>>) -> impl FnMut(&[u32]) -> Result<Vec<f64>> {
        move |prefix: &[u32]| {
            let row = &table[*prefix.last().unwrap() as usize];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            Ok(row.iter().map(|v| v - z).collect())
        }
    }

    fn rng() -> StreamRng {
        stream_rng(0, "decode", 0)
    }

    #[test]
    fn registry_lookup() {
        let r = decoders();
        assert_eq!(r.names(), vec!["beam", "greedy", "topk"]);
        assert_eq!(r.build("beam:3").unwrap().name(), "beam:3");
        assert_eq!(r.build("topk").unwrap().name(), "topk:5");
        assert!(r.build("nucleus").is_err());
        assert!(r.build("beam:0").is_err());
        assert!(r.build("beam:x").is_err());
        assert!(r.build("greedy:2").is_err());
    }

    #[test]
    fn greedy_follows_the_argmax_chain() {
        // 0 pad, 1 bos, 2 eos, 3, 4
        let mut lm = table_lm(vec![
            vec![0.0; 5],
            vec![0.0, 0.0, 0.0, 2.0, 1.0],
            vec![0.0; 5],
            vec![0.0, 0.0, 1.0, 0.0, 3.0],
            vec![0.0, 0.0, 5.0, 0.0, 0.0],
        ]);
        let out = Greedy.decode(&mut lm, 10, &mut rng()).unwrap();
        assert_eq!(out.tokens, vec![3, 4]);
        let out = Greedy.decode(&mut lm, 1, &mut rng()).unwrap();
        assert_eq!(out.tokens, vec![3]);
    }

    #[test]
    fn beam_finds_a_better_path_than_greedy() {
        // greedy takes 3 (then a flat tail); beam sees that 4 leads to a sure eos
        let mut lm = table_lm(vec![
            vec![0.0; 5],
            vec![-9.0, -9.0, -9.0, 1.0, 0.9],
            vec![0.0; 5],
            vec![0.0, 0.0, 0.0, 0.0, 0.0],
            vec![-9.0, -9.0, 9.0, -9.0, -9.0],
        ]);
        let g = Greedy.decode(&mut lm, 2, &mut rng()).unwrap();
        let b = Beam::new(3).unwrap().decode(&mut lm, 2, &mut rng()).unwrap();
        assert_eq!(g.tokens[0], 3);
        assert_eq!(b.tokens, vec![4]);
        assert!(b.logprob > g.logprob);
    }

    #[test]
    fn topk_one_is_greedy() {
        let mut lm = table_lm(vec![
            vec![0.0; 5],
            vec![0.0, 0.0, 0.0, 2.0, 1.0],
            vec![0.0; 5],
            vec![0.0, 0.0, 1.0, 0.0, 3.0],
            vec![0.0, 0.0, 5.0, 0.0, 0.0],
        ]);
        let a = TopK::new(1).unwrap().decode(&mut lm, 10, &mut rng()).unwrap();
        let b = Greedy.decode(&mut lm, 10, &mut rng()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn beam_width_one_is_greedy(
            rows in proptest::collection::vec(proptest::collection::vec(-3i32..3, 6), 6),
            max_new in 1usize..8,
        ) {
            // small integer logits make ties common
            let table: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
            let mut lm = table_lm(table);
            let g = Greedy.decode(&mut lm, max_new, &mut rng()).unwrap();
            let b = Beam::new(1).unwrap().decode(&mut lm, max_new, &mut rng()).unwrap();
            prop_assert_eq!(g, b);
        }
    }
}
