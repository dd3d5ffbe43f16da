//! Synthetic panels drawn from latent squared-exponential GPs pushed through a
//! fixed random network.
//!
//! Latent paths live on the same normalized time axis as the model,
//! `u_t = t / (T - 1)`. The first `⌈T/2⌉` points of each path are drawn
//! jointly; the rest are filled one at a time from the exact conditional
//! given every earlier point.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::Grid;
use crate::checkpoint::{read_tagged, write_tagged};
use crate::dataio::FtsDataset;
use crate::error::{Error, Result};
use crate::model::se_kernel;
use crate::seed;
use crate::tensor::Tensor;

pub const TRUTH_TAG: &str = "profnet-simtruth-v1";

const JITTERS: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub latent_gps: usize,
    pub regions: usize,
    pub times: usize,
    pub grid_size: usize,
    /// Standard deviation of the GP means.
    pub mean_scale: f64,
    /// Gamma shape for the length-scales.
    pub gamma_shape: f64,
    /// Gamma rate for the length-scales.
    pub gamma_rate: f64,
    pub spatial_dim: usize,
    pub width: usize,
    /// When set, outputs are `scale * tanh(linear)`.
    pub output_scale: Option<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            latent_gps: 8,
            regions: 10,
            times: 50,
            grid_size: 51,
            mean_scale: 1.0,
            gamma_shape: 2.0,
            gamma_rate: 1.0,
            spatial_dim: 4,
            width: 32,
            output_scale: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_gps == 0 || self.regions == 0 || self.spatial_dim == 0 || self.width == 0 {
            return Err(Error::Config("simulation sizes must be at least 1".into()));
        }
        if self.times < 2 {
            return Err(Error::Config(format!(
                "T={} leaves no posterior half; need at least 2 time points",
                self.times
            )));
        }
        if self.grid_size < 2 {
            return Err(Error::Config("grid needs at least 2 points".into()));
        }
        if !(self.mean_scale >= 0.0) || !(self.gamma_shape > 0.0) || !(self.gamma_rate > 0.0) {
            return Err(Error::Config("need s >= 0 and a, b > 0".into()));
        }
        if let Some(c) = self.output_scale {
            if !(c > 0.0) {
                return Err(Error::Config("output scale must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpParams {
    pub means: Vec<f64>,
    pub length_scales: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub config: SimConfig,
    pub gp: GpParams,
    /// `K` rows of `T` latent values.
    pub latent: Vec<Vec<f64>>,
    /// `H x L_h`.
    pub embeddings: Tensor,
    /// `(weight, bias)` per layer, last one linear.
    pub generator: Vec<(Tensor, Tensor)>,
}

/// `μ_k ~ N(0, s²)`, `ρ_k ~ Gamma(shape a, rate b)`.
pub fn sample_gp_params<R: Rng + ?Sized>(
    k: usize,
    s: f64,
    a: f64,
    b: f64,
    rng: &mut R,
) -> Result<GpParams> {
    if !(s >= 0.0) || !(a > 0.0) || !(b > 0.0) {
        return Err(Error::Config(format!(
            "invalid GP hyperparameters s={s}, a={a}, b={b}"
        )));
    }
    let normal = Normal::new(0.0, s).map_err(|e| Error::Config(e.to_string()))?;
    let gamma = Gamma::new(a, 1.0 / b).map_err(|e| Error::Config(e.to_string()))?;
    let means = (0..k).map(|_| normal.sample(rng)).collect();
    let length_scales = (0..k).map(|_| gamma.sample(rng)).collect();
    Ok(GpParams {
        means,
        length_scales,
    })
}

fn kernel_matrix(u: &[f64], rho: f64, jitter: f64) -> DMatrix<f64> {
    let n = u.len();
    DMatrix::from_fn(n, n, |i, j| {
        se_kernel(u[i], u[j], rho) + if i == j { jitter } else { 0.0 }
    })
}

/// Cholesky factor of the jittered kernel matrix, escalating the jitter on failure.
fn factor(u: &[f64], rho: f64) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    for &j in &JITTERS {
        if let Some(c) = kernel_matrix(u, rho, j).cholesky() {
            return Ok((c, j));
        }
    }
    Err(Error::Numerical(format!(
        "kernel matrix with length-scale {rho} is not positive definite even with jitter 1e-4"
    )))
}

fn sample_path<R: Rng + ?Sized>(t: usize, mu: f64, rho: f64, rng: &mut R) -> Result<Vec<f64>> {
    let u: Vec<f64> = (0..t).map(|i| i as f64 / (t - 1) as f64).collect();
    let n0 = t.div_ceil(2);
    let (chol, _) = factor(&u[..n0], rho)?;
    let eps = DVector::from_fn(n0, |_, _| rng.sample::<f64, _>(StandardNormal));
    let joint = chol.l() * eps;
    let mut z: Vec<f64> = joint.iter().map(|v| mu + v).collect();

    for i in n0..t {
        let (chol, jitter) = factor(&u[..i], rho)?;
        let kstar = DVector::from_fn(i, |j, _| se_kernel(u[i], u[j], rho));
        let dev = DVector::from_fn(i, |j, _| z[j] - mu);
        let alpha = chol.solve(&kstar);
        let mean = mu + alpha.dot(&dev);
        let var = (1.0 + jitter - alpha.dot(&kstar)).max(0.0);
        let e: f64 = rng.sample(StandardNormal);
        z.push(mean + var.sqrt() * e);
    }
    Ok(z)
}

/// `K x T` latent paths.
pub fn simulate_latent<R: Rng + ?Sized>(
    t: usize,
    params: &GpParams,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if t < 2 {
        return Err(Error::Config(format!("need T >= 2, got {t}")));
    }
    params
        .means
        .iter()
        .zip(&params.length_scales)
        .map(|(&mu, &rho)| {
            if !(rho > 0.0) {
                return Err(Error::Contract(format!(
                    "length-scale {rho} must be positive"
                )));
            }
            sample_path(t, mu, rho, rng)
        })
        .collect()
}

fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-b..=b))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("glorot shape")
}

impl SimTruth {
    /// The generating network applied to `[z, W_h]`.
    pub fn curve_values(&self, z: &[f64], h: usize) -> Result<Vec<f64>> {
        let mut input = z.to_vec();
        input.extend_from_slice(self.embeddings.row_slice(h));
        let mut x = Tensor::row(input);
        let last = self.generator.len() - 1;
        for (i, (w, b)) in self.generator.iter().enumerate() {
            x = x.matmul(w)?;
            for (v, bb) in x.data_mut().iter_mut().zip(b.data()) {
                *v += bb;
            }
            if i < last {
                x = x.map(f64::tanh);
            } else if let Some(c) = self.config.output_scale {
                x = x.map(|v| c * v.tanh());
            }
        }
        Ok(x.into_data())
    }

    pub fn latent_at(&self, t: usize) -> Vec<f64> {
        self.latent.iter().map(|row| row[t]).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tagged(path, TRUTH_TAG, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_tagged(path, TRUTH_TAG)
    }
}

pub fn simulate_dataset<R: Rng + ?Sized>(
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<(FtsDataset, SimTruth)> {
    cfg.validate()?;
    let gp = sample_gp_params(
        cfg.latent_gps,
        cfg.mean_scale,
        cfg.gamma_shape,
        cfg.gamma_rate,
        rng,
    )?;
    let latent = simulate_latent(cfg.times, &gp, rng)?;
    let emb: Vec<f64> = (0..cfg.regions * cfg.spatial_dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let embeddings = Tensor::matrix(cfg.regions, cfg.spatial_dim, emb)?;
    let dims = [
        cfg.latent_gps + cfg.spatial_dim,
        cfg.width,
        cfg.width,
        cfg.grid_size,
    ];
    let generator = dims
        .windows(2)
        .map(|w| (glorot(w[0], w[1], rng), Tensor::zeros(1, w[1])))
        .collect();
    let truth = SimTruth {
        config: cfg.clone(),
        gp,
        latent,
        embeddings,
        generator,
    };

    let grid = Arc::new(Grid::uniform(0.0, 1.0, cfg.grid_size)?);
    let mut values = Vec::with_capacity(cfg.regions * cfg.times * cfg.grid_size);
    for h in 0..cfg.regions {
        for t in 0..cfg.times {
            values.extend(truth.curve_values(&truth.latent_at(t), h)?);
        }
    }
    let ds = FtsDataset::from_cube(cfg.regions, cfg.times, grid, values)?;
    Ok((ds, truth))
}

/// [`simulate_dataset`] on the simulation stream of `cfg.seed`.
pub fn simulate_seeded(cfg: &SimConfig) -> Result<(FtsDataset, SimTruth)> {
    let mut rng = seed::stream(cfg.seed, seed::SIM);
    simulate_dataset(cfg, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn degenerate_mean_scale() {
        let p = sample_gp_params(5, 0.0, 2.0, 1.0, &mut rng(1)).unwrap();
        assert!(p.means.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn parameter_moments() {
        let n = 100_000;
        let p = sample_gp_params(n, 1.0, 2.0, 1.0, &mut rng(2)).unwrap();
        let mean = p.means.iter().sum::<f64>() / n as f64;
        let var = p.means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.02);
        let gm = p.length_scales.iter().sum::<f64>() / n as f64;
        assert!((gm / 2.0 - 1.0).abs() < 0.02);
        // rate, not scale: Gamma(2, 4) has mean 0.5
        let q = sample_gp_params(n, 1.0, 2.0, 4.0, &mut rng(3)).unwrap();
        let qm = q.length_scales.iter().sum::<f64>() / n as f64;
        assert!((qm / 0.5 - 1.0).abs() < 0.02);
    }

    #[test]
    fn long_length_scale_gives_flat_path() {
        let p = GpParams {
            means: vec![0.4],
            length_scales: vec![1e6],
        };
        let z = simulate_latent(50, &p, &mut rng(4)).unwrap();
        assert!(z[0].iter().all(|v| (v - z[0][0]).abs() < 0.01));
    }

    #[test]
    fn two_point_correlation() {
        let rho = 0.8;
        let p = GpParams {
            means: vec![0.0],
            length_scales: vec![rho],
        };
        let mut r = rng(5);
        let n = 10_000;
        let (mut sxy, mut sxx, mut syy, mut sx, mut sy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let z = simulate_latent(2, &p, &mut r).unwrap();
            let (x, y) = (z[0][0], z[0][1]);
            sx += x;
            sy += y;
            sxy += x * y;
            sxx += x * x;
            syy += y * y;
        }
        let nf = n as f64;
        let cov = sxy / nf - sx * sy / nf / nf;
        let corr = cov / ((sxx / nf - (sx / nf).powi(2)) * (syy / nf - (sy / nf).powi(2))).sqrt();
        assert!((corr - se_kernel(0.0, 1.0, rho)).abs() < 0.03, "{corr}");
    }

    #[test]
    fn unit_marginal_variance() {
        let p = GpParams {
            means: vec![0.0],
            length_scales: vec![0.2],
        };
        let mut r = rng(6);
        let reps = 4000;
        let t = 9;
        let mut sq = vec![0.0; t];
        for _ in 0..reps {
            let z = simulate_latent(t, &p, &mut r).unwrap();
            for (s, v) in sq.iter_mut().zip(&z[0]) {
                *s += v * v;
            }
        }
        for s in sq {
            assert!((s / reps as f64 - 1.0).abs() < 0.075, "{}", s / reps as f64);
        }
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let cfg = SimConfig {
            regions: 3,
            times: 6,
            grid_size: 11,
            seed: 9,
            ..SimConfig::default()
        };
        let (a, ta) = simulate_seeded(&cfg).unwrap();
        let (b, tb) = simulate_seeded(&cfg).unwrap();
        assert_eq!(a.dims(), (3, 6, 11));
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(matches!(
            simulate_seeded(&SimConfig { times: 1, ..cfg }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identical_embeddings_identical_curves() {
        let cfg = SimConfig {
            regions: 2,
            times: 5,
            grid_size: 7,
            ..SimConfig::default()
        };
        let (_, mut truth) = simulate_seeded(&cfg).unwrap();
        let row0 = truth.embeddings.row_slice(0).to_vec();
        for (j, v) in row0.into_iter().enumerate() {
            truth.embeddings.set(1, j, v);
        }
        for t in 0..5 {
            let z = truth.latent_at(t);
            assert_eq!(
                truth.curve_values(&z, 0).unwrap(),
                truth.curve_values(&z, 1).unwrap()
            );
        }
    }

    #[test]
    fn tanh_output_is_bounded() {
        let cfg = SimConfig {
            regions: 2,
            times: 8,
            grid_size: 9,
            output_scale: Some(1.5),
            mean_scale: 5.0,
            ..SimConfig::default()
        };
        let (ds, _) = simulate_seeded(&cfg).unwrap();
        assert!(ds.values().iter().all(|v| v.abs() <= 1.5));
    }

    #[test]
    fn truth_round_trip() {
        let cfg = SimConfig {
            regions: 2,
            times: 4,
            grid_size: 5,
            ..SimConfig::default()
        };
        let (_, truth) = simulate_seeded(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("truth.json");
        truth.save(&p).unwrap();
        assert_eq!(SimTruth::load(&p).unwrap(), truth);
    }
}
