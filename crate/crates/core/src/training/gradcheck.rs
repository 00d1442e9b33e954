//! Finite-difference check of the full model backward pass.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Mode, NormKind};
use crate::model::{build_model, forward, ModelConfig, ModelParams};
use crate::multiscale::build_pyramid;
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub checked_entries: usize,
    pub max_rel_err: f64,
    pub worst_path: String,
    pub worst_index: usize,
    pub eps: f64,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradcheck: {} entries, max rel err {:.3e} at {}[{}] (eps {:.1e}, tol {:.1e}) -> {}",
            self.checked_entries,
            self.max_rel_err,
            self.worst_path,
            self.worst_index,
            self.eps,
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Perturbs every learnable parameter entry (or a seeded subsample of at
/// least `min_subsample` entries) and compares central differences of a
/// fixed random functional of the outputs against the analytic gradients.
///
/// Requires a 64-bit, dropout-free, normalization-passthrough configuration
/// so the functional is smooth and deterministic.
pub fn gradcheck_model(
    cfg: &ModelConfig,
    seed: u64,
    eps: f64,
    tol: f64,
    subsample: Option<usize>,
) -> Result<GradcheckReport> {
    cfg.validate()?;
    if cfg.dropout != 0.0 {
        return Err(Error::Config("gradcheck requires dropout 0".into()));
    }
    if cfg.norm != NormKind::Passthrough {
        return Err(Error::Config(
            "gradcheck requires normalization passthrough".into(),
        ));
    }

    let mut params: ModelParams<f64> = build_model(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let k0 = cfg.node_counts()[0];
    let t = cfg.t_total();
    let input = Matrix::from_fn(k0, t, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
    let pyramid = build_pyramid(&input, &cfg.active_grouping())?;
    let grouping = cfg.active_grouping();
    let weights: Vec<Matrix<f64>> = grouping.node_counts()[..cfg.levels]
        .iter()
        .map(|&k| Matrix::from_fn(k, t, |_, _| rng.gen::<f64>() * 2.0 - 1.0))
        .collect();

    let objective = |params: &ModelParams<f64>| -> Result<f64> {
        let pass = forward(params, cfg, std::slice::from_ref(&pyramid), Mode::Train, None, false)?;
        let out = &pass.outputs()[0];
        Ok(out
            .scales
            .iter()
            .zip(&weights)
            .map(|(m, w)| {
                m.data()
                    .iter()
                    .zip(w.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum())
    };

    // Analytic gradients via the tape.
    let pass = forward(&params, cfg, std::slice::from_ref(&pyramid), Mode::Train, None, false)?;
    let seeds = vec![weights.iter().map(|w| Some(w.clone())).collect::<Vec<_>>()];
    pass.backward(&mut params, &seeds)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .entries()
        .iter()
        .filter(|e| e.learnable)
        .map(|e| {
            let g = e
                .value
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; e.value.len()]);
            (e.path.clone(), g)
        })
        .collect();

    // Entries to perturb: everything, or a seeded subsample.
    let mut targets: Vec<(usize, usize)> = Vec::new();
    let learnable_ids: Vec<usize> = params
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.learnable)
        .map(|(i, _)| i)
        .collect();
    for (slot, &id) in learnable_ids.iter().enumerate() {
        for e in 0..params.entries()[id].value.len() {
            targets.push((slot, e));
        }
    }
    let total = targets.len();
    if let Some(n) = subsample {
        let n = n.max(500).min(total);
        let mut pick_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ab5);
        let mut picked = Vec::with_capacity(n);
        for _ in 0..n {
            picked.push(targets[pick_rng.gen_range(0..total)]);
        }
        targets = picked;
    }

    let mut worst = 0.0f64;
    let mut worst_path = String::new();
    let mut worst_index = 0usize;
    for (slot, e) in &targets {
        let id = learnable_ids[*slot];
        let original = params.entries()[id].value.data()[*e];
        params.entry_mut(id).value.data_mut()[*e] = original + eps;
        let plus = objective(&params)?;
        params.entry_mut(id).value.data_mut()[*e] = original - eps;
        let minus = objective(&params)?;
        params.entry_mut(id).value.data_mut()[*e] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[*slot].1[*e];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if err > worst {
            worst = err;
            worst_path = analytic[*slot].0.clone();
            worst_index = *e;
        }
    }

    Ok(GradcheckReport {
        checked_entries: targets.len(),
        max_rel_err: worst,
        worst_path,
        worst_index,
        eps,
        tol,
    })
}
