//! The extended Brownian bridge over utterance expectations.
//!
//! Interior times follow the classical bridge pinned at `μ_0` and `μ_T`.
//! The endpoints are themselves Gaussian around `μ_0` / `μ_T` with variance
//! `2δ(T−δ)/T`, which makes the first utterance and the response samplable.
//! Variances are scalar and apply independently to every latent dimension.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::StreamRng;

pub const DEFAULT_DELTA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeParams {
    mus: Vec<Vec<f64>>,
    delta: f64,
}

impl BridgeParams {
    /// `mus` holds `μ_0..μ_T`; only `μ_0` and `μ_T` shape the marginals.
    pub fn new(mus: Vec<Vec<f64>>, delta: f64) -> Result<Self> {
        if mus.len() < 2 {
            return Err(Error::arg("bridge needs T >= 1 (at least two expectations)"));
        }
        let horizon = (mus.len() - 1) as f64;
        if !(delta > 0.0 && delta < horizon) {
            return Err(Error::arg(format!("delta must lie in (0, {horizon}), got {delta}")));
        }
        let dim = mus[0].len();
        if dim == 0 || mus.iter().any(|m| m.len() != dim) {
            return Err(Error::arg("expectations must share a nonzero dimension"));
        }
        if mus.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::arg("expectations must be finite"));
        }
        Ok(Self { mus, delta })
    }

    /// Bridge whose interior expectations are the straight-line interpolant.
    pub fn from_endpoints(mu0: &[f64], mu_t: &[f64], horizon: usize, delta: f64) -> Result<Self> {
        if mu0.len() != mu_t.len() {
            return Err(Error::arg("endpoint dimension mismatch"));
        }
        let mus = (0..=horizon)
            .map(|t| interpolate(mu0, mu_t, t as f64, horizon as f64))
            .collect();
        Self::new(mus, delta)
    }

    pub fn horizon(&self) -> usize {
        self.mus.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.mus[0].len()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn mus(&self) -> &[Vec<f64>] {
        &self.mus
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IsotropicGaussian {
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// `μ_0 + (t/T)(μ_T − μ_0)`
pub fn interpolate(mu0: &[f64], mu_t: &[f64], t: f64, horizon: f64) -> Vec<f64> {
    let w = t / horizon;
    mu0.iter().zip(mu_t).map(|(&a, &b)| a + w * (b - a)).collect()
}

pub fn endpoint_variance(horizon: usize, delta: f64) -> f64 {
    let h = horizon as f64;
    2.0 * delta * (h - delta) / h
}

pub fn interior_variance(t: usize, horizon: usize) -> f64 {
    let (t, h) = (t as f64, horizon as f64);
    t * (h - t) / h
}

/// A marginal written as `w_start·μ_0 + w_end·μ_T + std·ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginalCoefficients {
    pub w_start: f64,
    pub w_end: f64,
    pub std: f64,
}

pub fn marginal_coefficients(t: usize, horizon: usize, delta: f64) -> Result<MarginalCoefficients> {
    if t > horizon {
        return Err(Error::arg(format!("time {t} outside [0, {horizon}]")));
    }
    let ev = endpoint_variance(horizon, delta).sqrt();
    Ok(if t == 0 {
        MarginalCoefficients {
            w_start: 1.0,
            w_end: 0.0,
            std: ev,
        }
    } else if t == horizon {
        MarginalCoefficients {
            w_start: 0.0,
            w_end: 1.0,
            std: ev,
        }
    } else {
        let w = t as f64 / horizon as f64;
        MarginalCoefficients {
            w_start: 1.0 - w,
            w_end: w,
            std: interior_variance(t, horizon).sqrt(),
        }
    })
}

pub fn marginal(t: usize, p: &BridgeParams) -> Result<IsotropicGaussian> {
    let c = marginal_coefficients(t, p.horizon(), p.delta)?;
    let (mu0, mu_t) = (&p.mus[0], &p.mus[p.horizon()]);
    Ok(IsotropicGaussian {
        mean: mu0
            .iter()
            .zip(mu_t)
            .map(|(&a, &b)| c.w_start * a + c.w_end * b)
            .collect(),
        variance: c.std * c.std,
    })
}

/// Per-dimension covariance of the classical bridge between interior times.
pub fn interior_covariance(t1: usize, t2: usize, horizon: usize) -> Result<f64> {
    if !(0 < t1 && t1 < t2 && t2 < horizon) {
        return Err(Error::arg(format!(
            "need 0 < t1 < t2 < T, got t1={t1} t2={t2} T={horizon}"
        )));
    }
    Ok(t1 as f64 * (horizon - t2) as f64 / horizon as f64)
}

/// `μ_T = T/(T−1)·μ_{T−1} − 1/(T−1)·μ_0`: the final expectation that keeps
/// `μ_{T−1}` on the bridge from `μ_0`. Fails for `T < 2`.
pub fn infer_final_mu(mu0: &[f64], mu_prev: &[f64], horizon: usize) -> Result<Vec<f64>> {
    if horizon < 2 {
        return Err(Error::arg(format!("cannot extrapolate the final expectation with T={horizon}")));
    }
    if mu0.len() != mu_prev.len() {
        return Err(Error::arg("expectation dimension mismatch"));
    }
    let h = horizon as f64;
    Ok(mu0
        .iter()
        .zip(mu_prev)
        .map(|(&a, &b)| h / (h - 1.0) * b - a / (h - 1.0))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPath {
    pub zs: Vec<Vec<f64>>,
    pub index: usize,
}

/// Standard normal draws shaped like a path: `(T+1) × dim`.
pub fn standard_noise(horizon: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..=horizon)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Deterministic path from pre-drawn standard noise; `noise_scale` multiplies
/// every standard deviation (1 for the bridge law, 0 for the expectations).
pub fn path_from_noise(p: &BridgeParams, noise: &[Vec<f64>], noise_scale: f64) -> Result<Vec<Vec<f64>>> {
    if noise.len() != p.horizon() + 1 || noise.iter().any(|n| n.len() != p.dim()) {
        return Err(Error::arg("noise shape does not match the bridge"));
    }
    (0..=p.horizon())
        .map(|t| {
            let m = marginal(t, p)?;
            let sd = m.variance.sqrt() * noise_scale;
            Ok(m.mean.iter().zip(&noise[t]).map(|(&mu, &e)| mu + sd * e).collect())
        })
        .collect()
}

/// One independent draw per time from its marginal.
pub fn sample_path(p: &BridgeParams, rng: &mut impl Rng) -> LatentPath {
    sample_path_scaled(p, rng, 1.0)
}

pub fn sample_path_scaled(p: &BridgeParams, rng: &mut impl Rng, noise_scale: f64) -> LatentPath {
    let noise = standard_noise(p.horizon(), p.dim(), rng);
    LatentPath {
        zs: path_from_noise(p, &noise, noise_scale).expect("noise shaped from params"),
        index: 0,
    }
}

/// `k` paths, path `i` drawn from its own stream seeded with `seed + i`.
pub fn sample_paths(p: &BridgeParams, k: usize, seed: u64) -> Vec<LatentPath> {
    (0..k)
        .map(|i| {
            let mut rng = StreamRng::seed_from_u64(seed.wrapping_add(i as u64));
            LatentPath {
                index: i,
                ..sample_path(p, &mut rng)
            }
        })
        .collect()
}

/// Writes `path,t,dim0,...` rows. With `normalize`, each dimension is
/// min-max scaled to [0, 1] over all emitted values.
pub fn write_paths_csv(out: &mut impl Write, paths: &[LatentPath], normalize: bool) -> std::io::Result<()> {
    let dim = paths.first().and_then(|p| p.zs.first()).map_or(0, Vec::len);
    let mut header = String::from("path,t");
    for d in 0..dim {
        header.push_str(&format!(",dim{d}"));
    }
    writeln!(out, "{header}")?;
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for z in paths.iter().flat_map(|p| &p.zs) {
        for d in 0..dim {
            lo[d] = lo[d].min(z[d]);
            hi[d] = hi[d].max(z[d]);
        }
    }
    for p in paths {
        for (t, z) in p.zs.iter().enumerate() {
            let mut line = format!("{},{}", p.index, t);
            for d in 0..dim {
                let v = if normalize {
                    let span = hi[d] - lo[d];
                    if span > 0.0 {
                        ((z[d] - lo[d]) / span).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                } else {
                    z[d]
                };
                line.push_str(&format!(",{v}"));
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}
