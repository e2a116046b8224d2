//! The trainable bundle: shared parameter store, transformer, and mapper.

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mapper::{embed_utterances, MapperNet};
use crate::params::{ParamGroup, ParamStore};
use crate::seed::{stream_rng, streams};
use crate::seq2seq::{ModelConfig, Seq2Seq};
use crate::tensor::{Mat, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct DialogModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub seq2seq: Seq2Seq,
    pub mapper: MapperNet,
}

impl DialogModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, streams::INIT, 0);
        let mut store = ParamStore::new();
        let seq2seq = Seq2Seq::new(&mut store, cfg, &mut rng)?;
        let mapper = MapperNet::new(&mut store, cfg.d_model, cfg.mapper_hidden, cfg.d_model, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            seq2seq,
            mapper,
        })
    }

    /// `[n, d_z]` expectations, one row per utterance.
    pub fn mus_var<T: Real>(&self, g: &mut Graph<T>, utterances: &[&[u32]]) -> Result<Var> {
        let table = g.param(&self.store, self.seq2seq.embed);
        let u = embed_utterances(g, table, utterances)?;
        Ok(self.mapper.forward(g, &self.store, u))
    }

    pub fn mus(&self, utterances: &[Utterance]) -> Result<Vec<Vec<f64>>> {
        if utterances.is_empty() {
            return Err(Error::arg("no utterances to map"));
        }
        let lists: Vec<&[u32]> = utterances.iter().map(|u| u.tokens.as_slice()).collect();
        let mut g: Graph = Graph::new();
        let v = self.mus_var(&mut g, &lists)?;
        let m = g.value(v);
        Ok((0..m.rows).map(|r| m.row(r).to_vec()).collect())
    }

    /// Sets every latent gate to the vanilla-transformer identity.
    pub fn reset_mix_gates(&mut self) {
        for p in self.store.iter_mut() {
            match p.group {
                ParamGroup::MixEncX | ParamGroup::MixDecX => p.value = Mat::filled(1, p.value.cols, 1.0),
                ParamGroup::MixEncZ | ParamGroup::MixDecZ => p.value = Mat::zeros(1, p.value.cols),
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;
    use crate::mapper::{embed_utterance, map_to_mu};

    #[test]
    fn batched_mus_match_plain_forward() {
        let cfg = ModelConfig {
            vocab_size: 10,
            d_model: 8,
            mapper_hidden: 6,
            ..ModelConfig::default()
        };
        let m = DialogModel::new(&cfg, 3).unwrap();
        let vocab = Vocab::from_words(["a", "b", "c", "d", "e", "f"]);
        let us = [Utterance::new("a b", &vocab).unwrap(), Utterance::new("c d e", &vocab).unwrap()];
        let batched = m.mus(&us).unwrap();
        for (u, row) in us.iter().zip(&batched) {
            let e = embed_utterance(&u.tokens, m.store.value(m.seq2seq.embed)).unwrap();
            let plain = map_to_mu(&e, &m.mapper, &m.store).unwrap();
            for (a, b) in plain.iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(DialogModel::new(&cfg, 3).unwrap(), m);
        assert_ne!(DialogModel::new(&cfg, 4).unwrap().store, m.store);
    }
}
