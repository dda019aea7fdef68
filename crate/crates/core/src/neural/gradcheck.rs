//! Central finite-difference check of the analytic joint-loss gradient.

use rand::Rng;

use super::model::{Batch, BatchItem, PivotModel};
use super::params::ParamSet;
use super::{ModelConfig, PoolMode};
use crate::error::Result;
use crate::util;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-block relative error `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
    pub max_rel_err: f64,
    pub worst_block: Option<String>,
    /// Largest single-coordinate relative error with the same floor. This is
    /// dominated by the O(ε²) truncation of the difference quotient on
    /// coordinates whose gradient is near zero, so it is diagnostic only.
    pub max_coord_rel_err: f64,
    pub worst_coord: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates where a ReLU flipped inside `[θ−ε, θ+ε]`, so the
    /// difference quotient straddles a kink and says nothing about the gradient.
    pub skipped_kinks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Lower bound on relative-error denominators. Blocks whose gradient is
    /// exactly zero (the key bias, for one) otherwise divide roundoff noise
    /// of order `1e-16·|L|/ε` by itself.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            floor: 1e-6,
        }
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` against central differences of the evaluation-mode
/// joint loss of `model` on `batch`, coordinate by coordinate.
pub fn check_against(
    model: &PivotModel,
    batch: &Batch,
    analytic: &dyn ParamSet,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut probe = model.clone();
    let base_sig = model.forward(batch, None)?.relu_signature();
    let grads = analytic.blocks();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_block: None,
        max_coord_rel_err: 0.0,
        worst_coord: None,
        checked: 0,
        skipped_kinks: 0,
    };
    for (bi, (name, g)) in grads.iter().enumerate() {
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in 0..g.len() {
            let orig = probe.blocks()[bi].1[i];
            probe.blocks_mut()[bi].1[i] = orig + opts.eps;
            let plus = probe.forward(batch, None)?;
            probe.blocks_mut()[bi].1[i] = orig - opts.eps;
            let minus = probe.forward(batch, None)?;
            probe.blocks_mut()[bi].1[i] = orig;
            if plus.relu_signature() != base_sig || minus.relu_signature() != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.losses.joint - minus.losses.joint) / (2.0 * opts.eps);
            report.checked += 1;
            diff2 += (g[i] - numeric).powi(2);
            a2 += g[i] * g[i];
            n2 += numeric * numeric;
            let err = relative_error(g[i], numeric, opts.floor);
            if err > report.max_coord_rel_err || report.worst_coord.is_none() {
                report.max_coord_rel_err = err;
                report.worst_coord = Some((name.clone(), i));
            }
        }
        let err = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(opts.floor);
        if err > report.max_rel_err || report.worst_block.is_none() {
            report.max_rel_err = err;
            report.worst_block = Some(name.clone());
        }
    }
    Ok(report)
}

/// Tiny model and batch used for gradient checking.
pub fn check_setup(pool: PoolMode, seed: u64) -> Result<(PivotModel, Batch)> {
    let dim = 8;
    let config = ModelConfig {
        dim,
        heads: 2,
        ff_dim: 16,
        head_hidden: 8,
        pool,
        num_steps: 5,
        level_sizes: vec![2, 3],
        max_seq_len: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = PivotModel::new(config, seed)?;
    let mut rng = util::stream(&[seed, 0x67c4]);
    // second video one clip shorter, so padding is exercised
    let lens = [3usize, 2];
    let clips: Vec<Vec<Vec<f64>>> = lens
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        })
        .collect();
    let items: Vec<BatchItem> = clips
        .iter()
        .map(|v| BatchItem {
            clips: v.iter().map(|c| c.as_slice()).collect(),
            step_targets: v
                .iter()
                .map(|_| {
                    let active: Vec<usize> = (0..5).filter(|_| rng.random_bool(0.3)).collect();
                    Some(active)
                })
                .collect(),
            path_targets: vec![Some(rng.random_range(0..2)), Some(rng.random_range(0..3))],
        })
        .collect();
    let batch = Batch::from_items(&items, dim)?;
    Ok((model, batch))
}

/// Gradient check at d=8, two heads, three positions, two videos.
pub fn grad_check(pool: PoolMode, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (model, batch) = check_setup(pool, seed)?;
    let (_, grads) = model.gradients(&batch, None)?;
    check_against(&model, &batch, &grads, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradient_matches_differences() {
        for pool in [PoolMode::Mean, PoolMode::Tfenc] {
            let r = grad_check(pool, 1, GradCheckOptions::default()).unwrap();
            eprintln!("{pool}: {r:?}");
            assert!(r.max_rel_err < 1e-4, "{pool}: {r:?}");
            assert!(r.checked > 10 * r.skipped_kinks);
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (model, batch) = check_setup(PoolMode::Tfenc, 2).unwrap();
        let (_, mut grads) = model.gradients(&batch, None).unwrap();
        grads.encoder.layer1.wv *= 1.01;
        let r = check_against(&model, &batch, &grads, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_err > 5e-3);
        assert_eq!(r.worst_block.as_deref(), Some("enc.l1.wv"));
    }
}
