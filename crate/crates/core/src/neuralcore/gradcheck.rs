use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{NnError, Parameterized};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Entries sampled per parameter tensor; small tensors are checked fully.
    pub samples_per_group: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            samples_per_group: 25,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(index, analytic, numeric)` of the worst entry.
    pub worst_entry: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub groups: Vec<GroupReport>,
}

/// Compares analytic gradients with central finite differences.
///
/// `backward` must zero-initialized-accumulate gradients for the fixed batch
/// and may return the loss; `loss` must be a pure forward evaluation of the
/// same batch. Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check<M, B, L>(
    model: &mut M,
    backward: B,
    loss: L,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NnError>
where
    M: Parameterized,
    B: FnMut(&mut M) -> f64,
    L: Fn(&M) -> f64,
{
    gradient_check_terms(model, backward, |m| vec![loss(m)], cfg)
}

/// [`gradient_check`] for a loss that is a sum of terms. Each term is
/// differenced separately before summing, so the roundoff in the difference
/// scales with the individual terms rather than with the total.
pub fn gradient_check_terms<M, B, L>(
    model: &mut M,
    mut backward: B,
    loss_terms: L,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NnError>
where
    M: Parameterized,
    B: FnMut(&mut M) -> f64,
    L: Fn(&M) -> Vec<f64>,
{
    if !(cfg.eps > 0.0) {
        return Err(NnError::DegenerateStep);
    }
    model.zero_grad();
    backward(model);
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    model.zero_grad();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut groups = Vec::with_capacity(analytic.len());
    for (g, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let picks: Vec<usize> = if n <= cfg.samples_per_group {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, cfg.samples_per_group).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = 0.0f64;
        let mut worst_entry = None;
        for &k in &picks {
            let orig = model.params()[g].value[k];
            let (hi, lo) = (orig + cfg.eps, orig - cfg.eps);
            model.params_mut()[g].value[k] = hi;
            let up = loss_terms(model);
            model.params_mut()[g].value[k] = lo;
            let down = loss_terms(model);
            model.params_mut()[g].value[k] = orig;
            if up.len() != down.len() {
                return Err(NnError::InvalidConfig(
                    "loss term count changed between evaluations".into(),
                ));
            }
            // divide by the step actually taken after rounding
            let numeric = up.iter().zip(&down).map(|(u, d)| u - d).sum::<f64>() / (hi - lo);
            let a = grads[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if worst_entry.is_none() || rel > worst {
                worst = rel;
                worst_entry = Some((k, a, numeric));
            }
        }
        groups.push(GroupReport {
            name: model.params()[g].name.clone(),
            checked: picks.len(),
            max_rel_error: worst,
            worst_entry,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        groups,
    })
}
