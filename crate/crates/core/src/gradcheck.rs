//! Central-difference gradient checks against the tape.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gaussian_init, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Entries checked per input; larger inputs are subsampled with `seed`.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: 64,
            seed: 0,
        }
    }
}

/// Worst relative error for one input.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)` where the floor is `1e-3 * max|n|`, so entries
/// whose true derivative is essentially zero do not dominate through cancellation noise.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Reduces a tensor-valued output to a scalar with a fixed random projection `sum(out * r)`.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let r = gaussian_init(g.value(out).shape().to_vec(), 1.0, seed)?;
    let r = g.input(r);
    let p = g.mul(out, r)?;
    g.sum(p)
}

/// Compares tape gradients of the scalar built by `f` against central differences for every
/// input tensor.
pub fn grad_check<F>(inputs: &[Tensor<f64>], cfg: GradCheck, f: F) -> Result<Vec<InputReport>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item().ok_or_else(|| Error::NonScalarLoss(g.value(out).shape().to_vec()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let n = input.numel();
        let picks: Vec<usize> = if n <= cfg.max_entries {
            (0..n).collect()
        } else {
            let mut p = sample(&mut rng, n, cfg.max_entries).into_vec();
            p.sort_unstable();
            p
        };
        let mut a = Vec::with_capacity(picks.len());
        let mut num = Vec::with_capacity(picks.len());
        let mut values = inputs.to_vec();
        for &j in &picks {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + cfg.step;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - cfg.step;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            num.push((plus - minus) / (2.0 * cfg.step));
            a.push(analytic.data()[j]);
        }
        reports.push(InputReport {
            index: i,
            checked: picks.len(),
            max_rel_err: relative_error(&a, &num),
        });
    }
    Ok(reports)
}

/// Largest relative error across all inputs of a report.
pub fn worst(reports: &[InputReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}
