//! Training objective: grid MSE reconstruction plus the KL divergence of the
//! conditional latent law from the unit-variance GP marginal at `t'`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::basis::Curve;
use crate::error::{Error, Result};
use crate::model::{LatentGpState, LatentNodes};
use crate::tensor::Tensor;

/// Variance floor applied before taking logarithms.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlEstimator {
    /// Analytic Gaussian KL.
    #[default]
    Closed,
    /// `log q(z') - log p(z')` at the sampled `z'`.
    Sample,
}

/// Reference distribution of `z_k(t')` in the KL term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlPrior {
    /// The learned GP marginal `N(μ_k, 1)`.
    #[default]
    Gp,
    /// `N(0, 1)`, as in a standard variational autoencoder.
    Standard,
}

impl FromStr for KlPrior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gp" => Ok(KlPrior::Gp),
            "standard" => Ok(KlPrior::Standard),
            other => Err(Error::Config(format!("unknown KL prior '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub kl_weight: f64,
    pub estimator: KlEstimator,
    pub prior: KlPrior,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kl_weight: 1.0,
            estimator: KlEstimator::Closed,
            prior: KlPrior::Gp,
        }
    }
}

impl FromStr for KlEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "closed" => Ok(KlEstimator::Closed),
            "sample" => Ok(KlEstimator::Sample),
            other => Err(Error::Config(format!("unknown KL estimator '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub kl_weight: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, kl: f64, kl_weight: f64) -> Self {
        LossBreakdown {
            recon,
            kl,
            total: recon + kl_weight * kl,
            kl_weight,
        }
    }
}

/// Mean squared difference over the grid.
pub fn recon_loss(target: &Curve, generated: &Curve) -> Result<f64> {
    if !target.same_grid(generated) {
        return Err(Error::Contract("reconstruction on different grids".into()));
    }
    let n = target.len() as f64;
    Ok(target
        .values()
        .iter()
        .zip(generated.values())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}

/// `KL(N(m, v) || N(μ, 1))` for one process, with `v` floored at [`VAR_FLOOR`].
pub fn kl_term(cond_mean: f64, cond_var: f64, mean: f64) -> Result<f64> {
    let v = cond_var.max(VAR_FLOOR);
    if !(v > 0.0) {
        return Err(Error::Numerical(format!("conditional variance {cond_var}")));
    }
    Ok(-0.5 * v.ln() + 0.5 * (v + (cond_mean - mean).powi(2)) - 0.5)
}

pub fn kl_divergence(states: &[LatentGpState]) -> Result<f64> {
    states
        .iter()
        .map(|s| kl_term(s.cond_mean, s.cond_var, s.mean))
        .sum()
}

pub fn total_loss(
    target: &Curve,
    generated: &Curve,
    states: &[LatentGpState],
    kl_weight: f64,
) -> Result<LossBreakdown> {
    if !(kl_weight >= 0.0) {
        return Err(Error::Contract(format!(
            "kl_weight {kl_weight} is negative"
        )));
    }
    Ok(LossBreakdown::new(
        recon_loss(target, generated)?,
        kl_divergence(states)?,
        kl_weight,
    ))
}

/// Graph nodes of a batched loss. Each is a `[1, 1]` batch average.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub recon: NodeId,
    pub kl: NodeId,
}

/// Sum over all entries divided by the number of rows.
fn row_mean_sum(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let rows = g.value(x).rows() as f64;
    let s = g.sum(x)?;
    g.scale(s, 1.0 / rows)
}

/// Batch-mean reconstruction loss, each row averaged over its `M` points.
pub fn graph_recon(g: &mut Graph, generated: NodeId, target: NodeId) -> Result<NodeId> {
    let diff = g.sub(generated, target)?;
    let sq = g.square(diff)?;
    let cols = g.value(sq).cols() as f64;
    let per_row = row_mean_sum(g, sq)?;
    g.scale(per_row, 1.0 / cols)
}

/// Batch-mean KL summed over processes.
pub fn graph_kl(
    g: &mut Graph,
    latent: &LatentNodes,
    estimator: KlEstimator,
    prior: KlPrior,
) -> Result<NodeId> {
    let centre = match prior {
        KlPrior::Gp => latent.mean,
        KlPrior::Standard => g.constant(Tensor::scalar(0.0)),
    };
    let v = g.clamp_min(latent.cond_var, VAR_FLOOR)?;
    let logv = g.ln(v)?;
    let log_term = g.scale(logv, -0.5)?;
    let log_part = row_mean_sum(g, log_term)?;
    let k = g.value(latent.mean).cols() as f64;
    match estimator {
        KlEstimator::Closed => {
            let dev = g.sub(latent.cond_mean, centre)?;
            let dev2 = g.square(dev)?;
            let var_part = row_mean_sum(g, v)?;
            let dev_part = row_mean_sum(g, dev2)?;
            let quad = g.add(var_part, dev_part)?;
            let quad = g.scale(quad, 0.5)?;
            let s = g.add(log_part, quad)?;
            let offset = g.constant(Tensor::scalar(-0.5 * k));
            g.add(s, offset)
        }
        KlEstimator::Sample => {
            // log q - log p with q = N(m, v), p = N(μ, 1) at z' = m + √v ε
            let eps2 = g.square(latent.posterior_noise)?;
            let eps_part = row_mean_sum(g, eps2)?;
            let eps_part = g.scale(eps_part, -0.5)?;
            let dev = g.sub(latent.posterior_draw, centre)?;
            let dev2 = g.square(dev)?;
            let dev_part = row_mean_sum(g, dev2)?;
            let dev_part = g.scale(dev_part, 0.5)?;
            let s = g.add(log_part, eps_part)?;
            g.add(s, dev_part)
        }
    }
}

pub fn graph_loss(
    g: &mut Graph,
    generated: NodeId,
    target: NodeId,
    latent: &LatentNodes,
    objective: &ObjectiveConfig,
) -> Result<LossNodes> {
    let recon = graph_recon(g, generated, target)?;
    let kl = graph_kl(g, latent, objective.estimator, objective.prior)?;
    let weighted = g.scale(kl, objective.kl_weight)?;
    let total = g.add(recon, weighted)?;
    Ok(LossNodes { total, recon, kl })
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph, kl_weight: f64) -> LossBreakdown {
        LossBreakdown {
            recon: g.value(self.recon).data()[0],
            kl: g.value(self.kl).data()[0],
            total: g.value(self.total).data()[0],
            kl_weight,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::Grid;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn state(mean: f64, cond_mean: f64, cond_var: f64) -> LatentGpState {
        LatentGpState {
            mean,
            length_scale: 1.0,
            prior_draw: mean,
            cond_mean,
            cond_var,
            posterior_draw: cond_mean,
            t: 0.0,
            t_prime: 0.5,
        }
    }

    fn grid(m: usize) -> Arc<Grid> {
        Arc::new(Grid::uniform(0.0, 1.0, m).unwrap())
    }

    #[test]
    fn recon_examples() {
        let g = grid(3);
        let a = Curve::new(g.clone(), vec![1.0, 2.0, 3.0]).unwrap();
        let b = Curve::constant(g.clone(), 1.0).unwrap();
        assert_eq!(recon_loss(&a, &a).unwrap(), 0.0);
        let direct: f64 = [0.0, 1.0, 4.0].iter().sum::<f64>() / 3.0;
        assert!((recon_loss(&a, &b).unwrap() - direct).abs() < 1e-15);
        assert!((recon_loss(&a, &b).unwrap() - 5.0 / 3.0).abs() < 1e-15);

        let g7 = grid(7);
        let x = Curve::from_fn(g7.clone(), |u| u * u).unwrap();
        let y = Curve::from_fn(g7.clone(), |u| u * u + 0.1).unwrap();
        assert!((recon_loss(&x, &y).unwrap() - 0.01).abs() < 1e-15);

        let other = Curve::constant(grid(4), 0.0).unwrap();
        assert!(matches!(recon_loss(&a, &other), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[state(0.3, 0.3, 1.0)]).unwrap(), 0.0);
        assert!((kl_divergence(&[state(0.0, 1.0, 1.0)]).unwrap() - 0.5).abs() < 1e-15);
        let one = kl_divergence(&[state(0.1, -0.4, 0.3)]).unwrap();
        let four = kl_divergence(&[state(0.1, -0.4, 0.3); 4]).unwrap();
        assert!((four - 4.0 * one).abs() < 1e-12);
    }

    #[test]
    fn kl_with_collapsed_variance_is_finite() {
        let kl = kl_divergence(&[state(0.0, 0.0, 0.0)]).unwrap();
        assert!(kl.is_finite() && kl > 0.0);
    }

    #[test]
    fn total_examples() {
        let l = LossBreakdown::new(0.02, 0.5, 0.5);
        assert!((l.total - 0.27).abs() < 1e-15);
        let g = grid(5);
        let c = Curve::constant(g, 2.0).unwrap();
        let t = total_loss(&c, &c, &[state(1.0, 1.0, 1.0)], 1.0).unwrap();
        assert_eq!(t.total, 0.0);
    }

    #[test]
    fn graph_loss_matches_scalar_path() {
        let mut g = Graph::new();
        let mean = g.constant(Tensor::matrix(2, 2, vec![0.1, -0.3, 0.5, 0.0]).unwrap());
        let cm = g.constant(Tensor::matrix(2, 2, vec![0.4, -0.1, 0.2, 0.9]).unwrap());
        let cv = g.constant(Tensor::matrix(2, 2, vec![0.5, 0.8, 0.1, 0.3]).unwrap());
        let latent = LatentNodes {
            mean,
            length_scale: mean,
            prior_draw: mean,
            cond_mean: cm,
            cond_var: cv,
            posterior_draw: cm,
            posterior_noise: mean,
        };
        let kl = graph_kl(&mut g, &latent, KlEstimator::Closed, KlPrior::Gp).unwrap();
        let expected = (kl_divergence(&[state(0.1, 0.4, 0.5), state(-0.3, -0.1, 0.8)]).unwrap()
            + kl_divergence(&[state(0.5, 0.2, 0.1), state(0.0, 0.9, 0.3)]).unwrap())
            / 2.0;
        assert!((g.value(kl).data()[0] - expected).abs() < 1e-12);

        let gen = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let tgt = g.constant(Tensor::matrix(2, 3, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.3]).unwrap());
        let r = graph_recon(&mut g, gen, tgt).unwrap();
        let expected = (5.0 / 3.0 + 0.09 / 3.0) / 2.0;
        assert!((g.value(r).data()[0] - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kl_nonnegative(mu in -3.0..3.0f64, m in -3.0..3.0f64, v in 1e-6..3.0f64) {
            let kl = kl_term(m, v, mu).unwrap();
            prop_assert!(kl >= -1e-15);
        }

        #[test]
        fn recon_symmetric_and_scales(
            xs in prop::collection::vec(-5.0..5.0f64, 9),
            ys in prop::collection::vec(-5.0..5.0f64, 9),
            a in -4.0..4.0f64,
        ) {
            let g = grid(9);
            let x = Curve::new(g.clone(), xs.clone()).unwrap();
            let y = Curve::new(g.clone(), ys.clone()).unwrap();
            let r = recon_loss(&x, &y).unwrap();
            prop_assert!((r - recon_loss(&y, &x).unwrap()).abs() < 1e-12);
            let ax = Curve::new(g.clone(), xs.iter().map(|v| a * v).collect()).unwrap();
            let ay = Curve::new(g.clone(), ys.iter().map(|v| a * v).collect()).unwrap();
            let scaled = recon_loss(&ax, &ay).unwrap();
            prop_assert!((scaled - a * a * r).abs() <= 1e-10 * (1.0 + scaled.abs()));
        }
    }
}
