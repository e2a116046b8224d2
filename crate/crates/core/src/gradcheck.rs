//! Central-difference verification of the full training loss gradient,
//! reported per parameter group.

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::Dialogue;
use crate::distill::{batch_loss, LossOptions};
use crate::error::{Error, Result};
use crate::model::DialogModel;
use crate::params::ParamGroup;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so gradients that are
    /// zero up to rounding do not divide by zero.
    pub floor: f64,
    pub precision: Precision,
    pub loss: LossOptions,
    pub seed: u64,
    pub step: u64,
    /// Check only the first `n` entries of every tensor.
    pub max_per_tensor: Option<usize>,
    /// Test hook: perturb the analytic gradient of one group.
    pub corrupt: Option<ParamGroup>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            precision: Precision::F64,
            // a stop-gradient is not a derivative of the loss value, so the
            // check runs on the unblocked objective
            loss: LossOptions {
                k: 2,
                dropout: false,
                block_teacher: false,
                ..LossOptions::default()
            },
            seed: 0,
            step: 0,
            max_per_tensor: None,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub precision: Precision,
    pub tol: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn loss_at<T: Real>(model: &DialogModel, batch: &[Dialogue], o: &GradcheckOptions) -> Result<f64> {
    Ok(batch_loss::<T>(model, batch, &o.loss, o.seed, o.step, false)?.0.total)
}

pub fn gradcheck(model: &DialogModel, batch: &[Dialogue], o: &GradcheckOptions) -> Result<GradcheckReport> {
    match o.precision {
        Precision::F64 => run::<f64>(model, batch, o),
        Precision::F32 => run::<f32>(model, batch, o),
    }
}

fn run<T: Real>(model: &DialogModel, batch: &[Dialogue], o: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(o.h > 0.0) {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    let (_, grads) = batch_loss::<T>(model, batch, &o.loss, o.seed, o.step, true)?;
    let mut grads = grads.expect("gradients requested");
    if let Some(bad) = o.corrupt {
        for ((_, p), g) in model.store.iter().zip(grads.iter_mut()) {
            if p.group == bad {
                for v in g.data.iter_mut() {
                    *v = *v * 1.1 + 1e-3;
                }
            }
        }
    }

    let coords: Vec<(usize, usize)> = model
        .store
        .iter()
        .flat_map(|(id, p)| {
            let n = o.max_per_tensor.map_or(p.value.data.len(), |m| m.min(p.value.data.len()));
            (0..n).map(move |j| (id.0, j))
        })
        .collect();
    let chunk = coords.len().div_ceil(rayon::current_num_threads() * 4).max(1);
    let errors: Vec<(usize, f64)> = coords
        .par_chunks(chunk)
        .map(|part| -> Result<Vec<(usize, f64)>> {
            let mut m = model.clone();
            let mut out = Vec::with_capacity(part.len());
            for &(i, j) in part {
                let id = crate::params::ParamId(i);
                let orig = m.store.value(id).data[j];
                m.store.value_mut(id).data[j] = orig + o.h;
                let up = loss_at::<T>(&m, batch, o)?;
                m.store.value_mut(id).data[j] = orig - o.h;
                let down = loss_at::<T>(&m, batch, o)?;
                m.store.value_mut(id).data[j] = orig;
                let numeric = (up - down) / (2.0 * o.h);
                out.push((i, relative_error(grads[i].data[j], numeric, o.floor)));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut groups = Vec::new();
    for group in ParamGroup::ALL {
        let errs: Vec<f64> = errors
            .iter()
            .filter(|(i, _)| model.store.get(crate::params::ParamId(*i)).group == group)
            .map(|&(_, e)| e)
            .collect();
        if errs.is_empty() {
            continue;
        }
        let max_rel_err = errs.iter().cloned().fold(0.0, f64::max);
        groups.push(GroupReport {
            group,
            checked: errs.len(),
            max_rel_err,
            pass: max_rel_err < o.tol,
        });
    }
    Ok(GradcheckReport {
        precision: o.precision,
        tol: o.tol,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthSpec};
    use crate::seq2seq::ModelConfig;

    fn setup() -> (DialogModel, Vec<Dialogue>) {
        let c = synth_corpus(&SynthSpec {
            templates: 1,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            vocab_size: c.vocab.len(),
            d_model: 4,
            heads: 2,
            ff_mult: 2,
            mapper_hidden: 4,
            max_len: 24,
            ..ModelConfig::default()
        };
        let mut model = DialogModel::new(&cfg, 5).unwrap();
        // move the gates off their initial values so every path carries signal
        for p in model.store.iter_mut() {
            if p.name.starts_with("mix.") {
                p.value.data.iter_mut().enumerate().for_each(|(i, v)| *v += 0.1 * (i as f64 + 1.0));
            }
        }
        (model, c.train[..2].to_vec())
    }

    #[test]
    fn small_model_passes_and_corruption_is_localized() {
        let (model, batch) = setup();
        let opts = GradcheckOptions {
            max_per_tensor: Some(6),
            ..GradcheckOptions::default()
        };
        let report = gradcheck(&model, &batch, &opts).unwrap();
        assert_eq!(report.groups.len(), ParamGroup::ALL.len());
        assert!(report.pass(), "{report:#?}");

        let bad = gradcheck(
            &model,
            &batch,
            &GradcheckOptions {
                corrupt: Some(ParamGroup::MixDecZ),
                ..opts
            },
        )
        .unwrap();
        let failed: Vec<_> = bad.groups.iter().filter(|g| !g.pass).map(|g| g.group).collect();
        assert_eq!(failed, vec![ParamGroup::MixDecZ]);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert_eq!(relative_error(1e-9, 0.0, 1e-6), 1e-3);
    }
}
