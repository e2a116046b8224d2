//! Utterance → bridge expectation mapping and its contrastive objective.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mask, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Mat, Real};

pub const MAPPER_LAYERS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), group, fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.bias"), group, Mat::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add(y, b)
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).rows
    }
}

/// Four fully connected layers with ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct MapperNet {
    pub layers: Vec<Linear>,
}

impl MapperNet {
    pub fn new(store: &mut ParamStore, d_in: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let dims = [d_in, hidden, hidden, hidden, d_out];
        let layers = (0..MAPPER_LAYERS)
            .map(|i| Linear::new(store, &format!("mapper.{i}"), ParamGroup::Mapper, dims[i], dims[i + 1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        self.layers[0].in_dim(store)
    }
}

/// Mean of the token embeddings; no position information.
pub fn embed_utterance(tokens: &[u32], table: &Mat<f64>) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::arg("cannot embed an empty utterance"));
    }
    let mut acc = vec![0.0; table.cols];
    for &t in tokens {
        let row = table
            .data
            .get(t as usize * table.cols..(t as usize + 1) * table.cols)
            .ok_or_else(|| Error::arg(format!("token id {t} outside the embedding table")))?;
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let n = tokens.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Averaged embeddings for several utterances at once: `[n_utt, d_e]`.
pub fn embed_utterances<T: Real>(g: &mut Graph<T>, table: Var, utterances: &[&[u32]]) -> Result<Var> {
    let total: usize = utterances.iter().map(|u| u.len()).sum();
    if utterances.iter().any(|u| u.is_empty()) {
        return Err(Error::arg("cannot embed an empty utterance"));
    }
    let ids: Vec<usize> = utterances.iter().flat_map(|u| u.iter().map(|&t| t as usize)).collect();
    let vocab = g.value(table).rows;
    if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::arg(format!("token id {bad} outside the embedding table")));
    }
    let rows = g.gather_rows(table, ids);
    let mut avg = Mat::zeros(utterances.len(), total);
    let mut off = 0;
    for (i, u) in utterances.iter().enumerate() {
        let w = T::one() / T::of(u.len() as f64);
        for j in off..off + u.len() {
            avg.set(i, j, w);
        }
        off += u.len();
    }
    let avg = g.constant(avg);
    Ok(g.matmul(avg, rows))
}

/// Plain forward pass of the mapper on one vector.
pub fn map_to_mu(u_vec: &[f64], net: &MapperNet, store: &ParamStore) -> Result<Vec<f64>> {
    if u_vec.len() != net.in_dim(store) {
        return Err(Error::arg(format!(
            "mapper expects dimension {}, got {}",
            net.in_dim(store),
            u_vec.len()
        )));
    }
    let mut g: Graph = Graph::new();
    let x = g.constant(Mat::row_vector(u_vec));
    let y = net.forward(&mut g, store, x);
    Ok(g.value(y).data.clone())
}

/// Interpolation weight of the right anchor and the bridge variance at the
/// middle point, with times measured from `t0`.
fn triplet_geometry(t0: usize, t1: usize, t2: usize) -> Result<(f64, f64)> {
    if !(t0 < t1 && t1 < t2) {
        return Err(Error::arg(format!("triplet times must increase, got {t0}, {t1}, {t2}")));
    }
    let (a, b) = ((t1 - t0) as f64, (t2 - t0) as f64);
    Ok((a / b, a * (b - a) / b))
}

/// `−‖μ_t1 − (1−α)μ_t0 − αμ_t2‖² / (2σ²)` with `α = (t1−t0)/(t2−t0)` and
/// `σ² = (t1−t0)(t2−t1)/(t2−t0)`. Never positive.
pub fn triplet_distance(mu0: &[f64], mu1: &[f64], mu2: &[f64], t0: usize, t1: usize, t2: usize) -> Result<f64> {
    let (alpha, var) = triplet_geometry(t0, t1, t2)?;
    let sq: f64 = mu1
        .iter()
        .zip(mu0.iter().zip(mu2))
        .map(|(&m, (&a, &b))| {
            let r = m - (1.0 - alpha) * a - alpha * b;
            r * r
        })
        .sum();
    Ok(-sq / (2.0 * var))
}

/// Euclidean distance of the middle point from its interpolant.
pub fn triplet_residual(mu0: &[f64], mu1: &[f64], mu2: &[f64], t0: usize, t1: usize, t2: usize) -> Result<f64> {
    let (alpha, _) = triplet_geometry(t0, t1, t2)?;
    Ok(mu1
        .iter()
        .zip(mu0.iter().zip(mu2))
        .map(|(&m, (&a, &b))| (m - (1.0 - alpha) * a - alpha * b).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// `log(1 + Σ exp(d_neg) / exp(d_pos))`, computed stably.
pub fn contrastive_term(d_pos: f64, d_negs: &[f64]) -> f64 {
    let shifted: Vec<f64> = d_negs.iter().map(|d| d - d_pos).collect();
    let max = shifted.iter().copied().fold(0.0f64, f64::max);
    let s = (-max).exp() + shifted.iter().map(|x| (x - max).exp()).sum::<f64>();
    max + s.ln()
}

/// An ordered triplet referring to rows of a batch-wide expectation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub rows: [usize; 3],
    pub times: [usize; 3],
}

/// Mean contrastive loss over triplets whose middle point is replaced by
/// every other batch row not belonging to the triplet.
///
/// `mus` is `[n_rows, d_z]`. Returns `None` when no triplet has a negative.
pub fn contrastive_loss<T: Real>(g: &mut Graph<T>, mus: Var, triplets: &[Triplet]) -> Result<Option<Var>> {
    let n_rows = g.value(mus).rows;
    let usable: Vec<&Triplet> = triplets.iter().filter(|_| n_rows > 3).collect();
    if usable.is_empty() {
        return Ok(None);
    }
    let mut alphas = Vec::with_capacity(usable.len());
    let mut inv_two_var = Vec::with_capacity(usable.len());
    for tr in &usable {
        if tr.rows.iter().any(|&r| r >= n_rows) {
            return Err(Error::arg("triplet row outside the expectation matrix"));
        }
        let (a, v) = triplet_geometry(tr.times[0], tr.times[1], tr.times[2])?;
        alphas.push(a);
        inv_two_var.push(-1.0 / (2.0 * v));
    }
    let n = usable.len();
    let col = |vals: &[f64]| Mat::from_vec(vals.len(), 1, vals.iter().map(|&v| T::of(v)).collect());

    let left = g.gather_rows(mus, usable.iter().map(|t| t.rows[0]).collect::<Vec<_>>());
    let right = g.gather_rows(mus, usable.iter().map(|t| t.rows[2]).collect::<Vec<_>>());
    let wl = g.constant(col(&alphas.iter().map(|a| 1.0 - a).collect::<Vec<_>>()));
    let wr = g.constant(col(&alphas));
    let left = g.mul(left, wl);
    let right = g.mul(right, wr);
    let interp = g.add(left, right);

    // ‖μ_j − c_i‖² = ‖c_i‖² − 2 c_i·μ_j + ‖μ_j‖²
    let cross = g.matmul_nt(interp, mus);
    let cross = g.scale(cross, T::of(-2.0));
    let c_sq = g.mul(interp, interp);
    let c_norm = g.sum_rows(c_sq);
    let m_sq = g.mul(mus, mus);
    let d = g.value(mus).cols;
    let ones = g.constant(Mat::filled(1, d, T::one()));
    let m_norm = g.matmul_nt(ones, m_sq);
    let sq = g.add(cross, c_norm);
    let sq = g.add(sq, m_norm);
    let scale = g.constant(col(&inv_two_var));
    let scores = g.mul(sq, scale);

    let mask = Mask::from_fn(n, n_rows, |i, j| {
        let tr = usable[i];
        j == tr.rows[1] || (j != tr.rows[0] && j != tr.rows[2])
    });
    let log_p = g.log_softmax(scores, Some(Rc::new(mask)));
    let picked = g.pick(log_p, usable.iter().map(|t| t.rows[1]).collect::<Vec<_>>());
    let mean = g.mean(picked);
    Ok(Some(g.scale(mean, T::of(-1.0))))
}
