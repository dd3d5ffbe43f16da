//! The probabilistic functional network.
//!
//! A forward pass maps a source curve `x_{t,h}` and region `h` to a generated
//! curve for target region `h'` at time `t' >= t`:
//!
//! 1. functional encoder: inner products `⟨φ_d, x⟩`, a functional layer with
//!    coefficients `ω_dl`, then dense tanh layers, giving `W_x`;
//! 2. spatial encoder: embedding lookup plus dense layers, giving `W_h`;
//! 3. GP parameter heads on `[W_x, W_h]`: constant means `μ_k` and
//!    squared-exponential length-scales `ρ_k = softplus(·) + ρ_floor`;
//! 4. latent sampling: a prior draw `z_k(t)` and a reparametrized draw of
//!    `z_k(t')` from the bivariate Gaussian conditional;
//! 5. generator: dense tanh layers on `z(t')`, concatenated with `W_{h'}`,
//!    then a linear map to the `M` grid values.
//!
//! All graph-building methods are batched over rows and broadcast single-row
//! operands, so one encoded source can drive an ensemble of noise draws.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::basis::{make_basis, same_grid, BasisKind, BasisSystem, Curve, Grid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the source-time latent `z_k(t)` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorDraw {
    /// `z_k(t) = μ_k + ε`, a draw from the unit-variance GP marginal.
    Sampled,
    /// `z_k(t) = μ_k`; only the conditional step is random.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of latent Gaussian processes `K`.
    pub latent_gps: usize,
    /// `L_x`.
    pub functional_dim: usize,
    /// `L_h`.
    pub spatial_dim: usize,
    pub basis_kind: BasisKind,
    /// `D`.
    pub basis_size: usize,
    pub encoder_layers: usize,
    pub param_layers: usize,
    pub generator_layers: usize,
    pub hidden: usize,
    /// `H`.
    pub regions: usize,
    /// `M`.
    pub grid_size: usize,
    /// Length of the time axis used to map indices onto `[0, 1]`.
    pub time_points: usize,
    pub rho_floor: f64,
    pub prior_draw: PriorDraw,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_gps: 8,
            functional_dim: 8,
            spatial_dim: 4,
            basis_kind: BasisKind::Bspline,
            basis_size: 15,
            encoder_layers: 2,
            param_layers: 2,
            generator_layers: 2,
            hidden: 32,
            regions: 1,
            grid_size: 51,
            time_points: 50,
            rho_floor: 1e-3,
            prior_draw: PriorDraw::Sampled,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("latent_gps", self.latent_gps),
            ("functional_dim", self.functional_dim),
            ("spatial_dim", self.spatial_dim),
            ("encoder_layers", self.encoder_layers),
            ("param_layers", self.param_layers),
            ("generator_layers", self.generator_layers),
            ("hidden", self.hidden),
            ("regions", self.regions),
            ("grid_size", self.grid_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.basis_size < 4 {
            return Err(Error::Config(format!(
                "basis_size {} must be at least 4",
                self.basis_size
            )));
        }
        if self.time_points < 2 {
            return Err(Error::Config("time_points must be at least 2".into()));
        }
        if !(self.rho_floor > 0.0) {
            return Err(Error::Config("rho_floor must be positive".into()));
        }
        Ok(())
    }

    /// `L = L_x + L_h`.
    pub fn latent_dim(&self) -> usize {
        self.functional_dim + self.spatial_dim
    }

    /// Zero-based time index mapped to `[0, 1]`.
    pub fn normalized_time(&self, index: usize) -> f64 {
        index as f64 / (self.time_points - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameter ids for every block, derived deterministically from the config.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub functional: Dense,
    pub encoder: Vec<Dense>,
    pub embedding: ParamId,
    pub spatial: Vec<Dense>,
    pub mean_head: Vec<Dense>,
    pub kernel_head: Vec<Dense>,
    pub generator: Vec<Dense>,
    pub output: Dense,
}

fn stack_dims(input: usize, hidden: usize, output: usize, layers: usize) -> Vec<(usize, usize)> {
    (0..layers)
        .map(|i| {
            let a = if i == 0 { input } else { hidden };
            let b = if i + 1 == layers { output } else { hidden };
            (a, b)
        })
        .collect()
}

/// Parameter shapes in insertion order, shared by initialization and loading.
fn parameter_plan(c: &ModelConfig) -> Vec<(String, usize, usize, bool)> {
    let mut plan = Vec::new();
    let dense = |plan: &mut Vec<_>, name: String, a: usize, b: usize| {
        plan.push((format!("{name}.weight"), a, b, true));
        plan.push((format!("{name}.bias"), 1, b, false));
    };
    // functional layer + J_enc - 1 dense layers ending at L_x
    let enc = stack_dims(c.basis_size, c.hidden, c.functional_dim, c.encoder_layers);
    for (i, (a, b)) in enc.iter().enumerate() {
        let name = if i == 0 {
            "encoder.functional".to_string()
        } else {
            format!("encoder.dense{i}")
        };
        dense(&mut plan, name, *a, *b);
    }
    plan.push(("spatial.embedding".into(), c.regions, c.spatial_dim, true));
    for i in 1..c.encoder_layers {
        dense(
            &mut plan,
            format!("spatial.dense{i}"),
            c.spatial_dim,
            c.spatial_dim,
        );
    }
    for head in ["gp.mean", "gp.kernel"] {
        for (i, (a, b)) in stack_dims(c.latent_dim(), c.hidden, c.latent_gps, c.param_layers)
            .into_iter()
            .enumerate()
        {
            dense(&mut plan, format!("{head}{i}"), a, b);
        }
    }
    for (i, (a, b)) in stack_dims(c.latent_gps, c.hidden, c.functional_dim, c.generator_layers)
        .into_iter()
        .enumerate()
    {
        dense(&mut plan, format!("generator.dense{i}"), a, b);
    }
    dense(
        &mut plan,
        "generator.output".into(),
        c.latent_dim(),
        c.grid_size,
    );
    plan
}

fn layout_from_store(c: &ModelConfig, store: &ParamStore) -> Result<Layout> {
    let id = |name: &str| {
        store
            .find(name)
            .ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))
    };
    let dense = |name: &str| -> Result<Dense> {
        Ok(Dense {
            weight: id(&format!("{name}.weight"))?,
            bias: id(&format!("{name}.bias"))?,
        })
    };
    let head = |name: &str| -> Result<Vec<Dense>> {
        (0..c.param_layers)
            .map(|i| dense(&format!("{name}{i}")))
            .collect()
    };
    Ok(Layout {
        functional: dense("encoder.functional")?,
        encoder: (1..c.encoder_layers)
            .map(|i| dense(&format!("encoder.dense{i}")))
            .collect::<Result<_>>()?,
        embedding: id("spatial.embedding")?,
        spatial: (1..c.encoder_layers)
            .map(|i| dense(&format!("spatial.dense{i}")))
            .collect::<Result<_>>()?,
        mean_head: head("gp.mean")?,
        kernel_head: head("gp.kernel")?,
        generator: (0..c.generator_layers)
            .map(|i| dense(&format!("generator.dense{i}")))
            .collect::<Result<_>>()?,
        output: dense("generator.output")?,
    })
}

/// All trainable weights of a network together with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfnetParams {
    store: ParamStore,
    layout: Layout,
}

impl ProfnetParams {
    /// Glorot-uniform weights (embedding table included), zero biases.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, a, b, random) in parameter_plan(config) {
            if random {
                store.insert_glorot(name, a, b, rng);
            } else {
                store.insert_zeros(name, a, b);
            }
        }
        let layout = layout_from_store(config, &store)?;
        Ok(ProfnetParams { store, layout })
    }

    /// Adopt an existing store, checking names and shapes against the config.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let plan = parameter_plan(config);
        if plan.len() != store.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                plan.len(),
                store.len()
            )));
        }
        for ((name, a, b, _), (_, got_name, t)) in plan.iter().zip(store.iter()) {
            if name != got_name || t.shape() != [*a, *b] {
                return Err(Error::Format(format!(
                    "parameter '{got_name}' {:?} does not match expected '{name}' [{a}, {b}]",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!(
                    "parameter '{name}' has non-finite values"
                )));
            }
        }
        let layout = layout_from_store(config, &store)?;
        Ok(ProfnetParams { store, layout })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Parameters of the encoding side (θ): encoders, embedding and GP heads.
    pub fn encoder_side(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, n, _)| !n.starts_with("generator."))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Generator-side parameters (ω).
    pub fn generator_side(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, n, _)| n.starts_with("generator."))
            .map(|(id, _, _)| id)
            .collect()
    }
}

/// Standard-normal draws `ε` for one pair: `2K` values, interleaved so that
/// `eps[2k]` drives the prior draw and `eps[2k + 1]` the posterior draw of
/// process `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector {
    eps: Vec<f64>,
}

impl NoiseVector {
    pub fn new(eps: Vec<f64>) -> Result<Self> {
        if !eps.len().is_multiple_of(2) || eps.is_empty() {
            return Err(Error::Contract(format!(
                "noise vector needs 2K values, got {}",
                eps.len()
            )));
        }
        Ok(NoiseVector { eps })
    }

    pub fn zeros(k: usize) -> Self {
        NoiseVector {
            eps: vec![0.0; 2 * k],
        }
    }

    pub fn sample<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        NoiseVector {
            eps: (0..2 * k).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn latent_gps(&self) -> usize {
        self.eps.len() / 2
    }

    pub fn prior(&self, k: usize) -> f64 {
        self.eps[2 * k]
    }

    pub fn posterior(&self, k: usize) -> f64 {
        self.eps[2 * k + 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.eps
    }
}

/// Noise for a batch, split into `[B, K]` prior and posterior blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBatch {
    pub prior: Tensor,
    pub posterior: Tensor,
}

impl NoiseBatch {
    pub fn from_vectors(vectors: &[NoiseVector]) -> Result<Self> {
        let k = vectors
            .first()
            .ok_or_else(|| Error::Contract("empty noise batch".into()))?
            .latent_gps();
        let mut prior = Vec::with_capacity(vectors.len() * k);
        let mut post = Vec::with_capacity(vectors.len() * k);
        for v in vectors {
            if v.latent_gps() != k {
                return Err(Error::Contract("noise vectors of different sizes".into()));
            }
            for j in 0..k {
                prior.push(v.prior(j));
                post.push(v.posterior(j));
            }
        }
        Ok(NoiseBatch {
            prior: Tensor::matrix(vectors.len(), k, prior)?,
            posterior: Tensor::matrix(vectors.len(), k, post)?,
        })
    }

    /// `rows` fresh vectors, drawn in row order.
    pub fn sample<R: Rng + ?Sized>(rows: usize, k: usize, rng: &mut R) -> Self {
        let vs: Vec<NoiseVector> = (0..rows).map(|_| NoiseVector::sample(k, rng)).collect();
        NoiseBatch::from_vectors(&vs).expect("non-empty uniform batch")
    }

    pub fn zeros(rows: usize, k: usize) -> Self {
        NoiseBatch {
            prior: Tensor::zeros(rows, k),
            posterior: Tensor::zeros(rows, k),
        }
    }

    pub fn rows(&self) -> usize {
        self.prior.rows()
    }
}

/// Latent quantities of one GP for one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentGpState {
    pub mean: f64,
    pub length_scale: f64,
    pub prior_draw: f64,
    pub cond_mean: f64,
    pub cond_var: f64,
    pub posterior_draw: f64,
    pub t: f64,
    pub t_prime: f64,
}

/// `exp(-(a - b)^2 / (2 ρ^2))`.
pub fn se_kernel(a: f64, b: f64, rho: f64) -> f64 {
    (-(a - b).powi(2) / (2.0 * rho * rho)).exp()
}

/// Conditional moments of `z(t')` given `z(t)` under a unit-variance
/// squared-exponential GP with constant mean.
pub fn gp_conditional(mean: f64, rho: f64, t: f64, t_prime: f64, z_t: f64) -> Result<(f64, f64)> {
    if !(rho > 0.0) {
        return Err(Error::Contract(format!(
            "length-scale {rho} must be positive"
        )));
    }
    let c = se_kernel(t_prime, t, rho);
    let m = mean + c * (z_t - mean);
    let v = (1.0 - c * c).clamp(0.0, 1.0);
    Ok((m, v))
}

/// Reparametrized draws for all `K` processes of one pair.
pub fn sample_latent(
    means: &[f64],
    length_scales: &[f64],
    t: f64,
    t_prime: f64,
    noise: &NoiseVector,
    prior_draw: PriorDraw,
) -> Result<Vec<LatentGpState>> {
    if means.len() != length_scales.len() || noise.latent_gps() != means.len() {
        return Err(Error::Contract(format!(
            "{} means, {} length-scales and noise for {} processes",
            means.len(),
            length_scales.len(),
            noise.latent_gps()
        )));
    }
    means
        .iter()
        .zip(length_scales)
        .enumerate()
        .map(|(k, (&mu, &rho))| {
            let z_t = match prior_draw {
                PriorDraw::Sampled => mu + noise.prior(k),
                PriorDraw::Mean => mu,
            };
            let (m, v) = gp_conditional(mu, rho, t, t_prime, z_t)?;
            Ok(LatentGpState {
                mean: mu,
                length_scale: rho,
                prior_draw: z_t,
                cond_mean: m,
                cond_var: v,
                posterior_draw: m + v.sqrt() * noise.posterior(k),
                t,
                t_prime,
            })
        })
        .collect()
}

/// Graph nodes of the latent block, each `[rows, K]` (or `[1, K]` when
/// broadcast from a single encoded source).
#[derive(Clone, Copy, Debug)]
pub struct LatentNodes {
    pub mean: NodeId,
    pub length_scale: NodeId,
    pub prior_draw: NodeId,
    pub cond_mean: NodeId,
    pub cond_var: NodeId,
    pub posterior_draw: NodeId,
    /// Posterior noise block, kept for the single-sample KL estimator.
    pub posterior_noise: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub generated: NodeId,
    pub latent: LatentNodes,
}

/// Batched inputs for a forward pass. `source_products` holds the unit-domain
/// inner products `⟨φ_d, x⟩` of each source curve (`[B, D]`).
#[derive(Clone, Debug)]
pub struct PairInputs {
    pub source_products: Tensor,
    pub source_regions: Vec<usize>,
    pub target_regions: Vec<usize>,
    /// Normalized `t' - t` for each row, `[B, 1]`.
    pub lags: Tensor,
}

/// A network bound to its basis system.
#[derive(Clone, Debug)]
pub struct Profnet {
    config: ModelConfig,
    basis: BasisSystem,
    design: Tensor,
    params: ProfnetParams,
}

impl Profnet {
    pub fn new(config: ModelConfig, grid: Arc<Grid>, params: ProfnetParams) -> Result<Self> {
        config.validate()?;
        if grid.len() != config.grid_size {
            return Err(Error::Config(format!(
                "grid has {} points, config expects {}",
                grid.len(),
                config.grid_size
            )));
        }
        let basis = make_basis(config.basis_kind, config.basis_size, grid)?;
        let design = basis.unit_design();
        Ok(Profnet {
            config,
            basis,
            design,
            params,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        grid: Arc<Grid>,
        rng: &mut R,
    ) -> Result<Self> {
        let params = ProfnetParams::init(&config, rng)?;
        Profnet::new(config, grid, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn basis(&self) -> &BasisSystem {
        &self.basis
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.basis.grid()
    }

    pub fn params(&self) -> &ProfnetParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ProfnetParams {
        &mut self.params
    }

    pub fn store(&self) -> &ParamStore {
        self.params.store()
    }

    fn layout(&self) -> &Layout {
        self.params.layout()
    }

    fn check_region(&self, h: usize) -> Result<()> {
        if h >= self.config.regions {
            return Err(Error::Index {
                what: "regions",
                index: h,
                size: self.config.regions,
            });
        }
        Ok(())
    }

    fn check_curve(&self, x: &Curve) -> Result<()> {
        if !same_grid(self.grid(), x.grid()) {
            return Err(Error::Contract("curve is not on the model grid".into()));
        }
        Ok(())
    }

    /// `⟨φ_d, x⟩` over the unit-rescaled domain for a batch of value rows.
    pub fn inner_products(&self, curves: &Tensor) -> Result<Tensor> {
        curves.matmul(&self.design)
    }

    fn curve_products(&self, x: &Curve) -> Result<Tensor> {
        self.check_curve(x)?;
        self.inner_products(&Tensor::row(x.values().to_vec()))
    }

    fn dense_stack(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layers: &[Dense],
        mut x: NodeId,
        linear_last: bool,
    ) -> Result<NodeId> {
        for (i, layer) in layers.iter().enumerate() {
            let w = g.param(store, layer.weight);
            let b = g.param(store, layer.bias);
            x = g.affine(x, w, b)?;
            if !(linear_last && i + 1 == layers.len()) {
                x = g.tanh(x)?;
            }
        }
        Ok(x)
    }

    /// Pre-activation of the functional learning layer, `Σ_d ω_dl ⟨φ_d, x⟩ + b_l`.
    pub fn graph_functional_preactivation(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        products: NodeId,
    ) -> Result<NodeId> {
        let l = self.layout().functional;
        let w = g.param(store, l.weight);
        let b = g.param(store, l.bias);
        g.affine(products, w, b)
    }

    pub fn graph_encode_functional(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        products: NodeId,
    ) -> Result<NodeId> {
        let pre = self.graph_functional_preactivation(g, store, products)?;
        let first = g.tanh(pre)?;
        self.dense_stack(g, store, &self.layout().encoder, first, false)
    }

    pub fn graph_encode_spatial(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        regions: &[usize],
    ) -> Result<NodeId> {
        for &h in regions {
            self.check_region(h)?;
        }
        let table = g.param(store, self.layout().embedding);
        let rows = g.rows(table, regions)?;
        self.dense_stack(g, store, &self.layout().spatial, rows, false)
    }

    /// GP means and length-scales from the joint encoding `W = [W_x, W_h]`.
    pub fn graph_gp_params(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        encoding: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mean = self.dense_stack(g, store, &self.layout().mean_head, encoding, true)?;
        let raw = self.dense_stack(g, store, &self.layout().kernel_head, encoding, true)?;
        let sp = g.softplus(raw)?;
        let floor = g.constant(Tensor::scalar(self.config.rho_floor));
        let rho = g.add(sp, floor)?;
        Ok((mean, rho))
    }

    /// Latent sampling: prior draw, conditional moments and the
    /// reparametrized posterior draw.
    pub fn graph_sample_latent(
        &self,
        g: &mut Graph,
        mean: NodeId,
        rho: NodeId,
        lags: NodeId,
        noise: &NoiseBatch,
    ) -> Result<LatentNodes> {
        let eps_prior = g.constant(noise.prior.clone());
        let eps_post = g.constant(noise.posterior.clone());
        let prior_draw = match self.config.prior_draw {
            PriorDraw::Sampled => g.add(mean, eps_prior)?,
            PriorDraw::Mean => mean,
        };

        // c = exp(-lag^2 / (2 rho^2))
        let lag2 = g.square(lags)?;
        let rho2 = g.square(rho)?;
        let inv = g.recip(rho2)?;
        let q = g.mul(lag2, inv)?;
        let q = g.scale(q, -0.5)?;
        let corr = g.exp(q)?;

        let dev = g.sub(prior_draw, mean)?;
        let shift = g.mul(corr, dev)?;
        let cond_mean = g.add(mean, shift)?;
        let corr2 = g.square(corr)?;
        let neg = g.scale(corr2, -1.0)?;
        let one = g.constant(Tensor::scalar(1.0));
        let var = g.add(one, neg)?;
        let cond_var = g.clamp_min(var, 0.0)?;

        let sd = g.sqrt(cond_var)?;
        let noise_term = g.mul(sd, eps_post)?;
        let posterior_draw = g.add(cond_mean, noise_term)?;
        Ok(LatentNodes {
            mean,
            length_scale: rho,
            prior_draw,
            cond_mean,
            cond_var,
            posterior_draw,
            posterior_noise: eps_post,
        })
    }

    /// Generator: dense layers on `z`, then `ψ_x([W_{h'}, W_x'])`.
    pub fn graph_generate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: NodeId,
        target_spatial: NodeId,
    ) -> Result<NodeId> {
        let wx = self.dense_stack(g, store, &self.layout().generator, z, false)?;
        let joint = g.concat(target_spatial, wx)?;
        let out = self.layout().output;
        let w = g.param(store, out.weight);
        let b = g.param(store, out.bias);
        g.affine(joint, w, b)
    }

    /// Full batched forward pass against an explicit parameter store.
    pub fn graph_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &PairInputs,
        noise: &NoiseBatch,
    ) -> Result<ForwardNodes> {
        if inputs.source_products.cols() != self.config.basis_size {
            return Err(Error::shape(
                "forward",
                format!(
                    "source products have {} columns, basis has {}",
                    inputs.source_products.cols(),
                    self.config.basis_size
                ),
            ));
        }
        let products = g.constant(inputs.source_products.clone());
        let wx = self.graph_encode_functional(g, store, products)?;
        let wh = self.graph_encode_spatial(g, store, &inputs.source_regions)?;
        let w = g.concat(wx, wh)?;
        let (mean, rho) = self.graph_gp_params(g, store, w)?;
        let lags = g.constant(inputs.lags.clone());
        let latent = self.graph_sample_latent(g, mean, rho, lags, noise)?;
        let wh_target = self.graph_encode_spatial(g, store, &inputs.target_regions)?;
        let generated = self.graph_generate(g, store, latent.posterior_draw, wh_target)?;
        Ok(ForwardNodes { generated, latent })
    }

    pub fn encode_functional(&self, x: &Curve) -> Result<Vec<f64>> {
        let products = self.curve_products(x)?;
        let mut g = Graph::new();
        let p = g.constant(products);
        let out = self.graph_encode_functional(&mut g, self.store(), p)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn encode_spatial(&self, h: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.graph_encode_spatial(&mut g, self.store(), &[h])?;
        Ok(g.value(out).data().to_vec())
    }

    /// `(μ_k, ρ_k)` for a joint encoding of length `L`.
    pub fn gp_params(&self, encoding: &[f64]) -> Result<Vec<(f64, f64)>> {
        if encoding.len() != self.config.latent_dim() {
            return Err(Error::Contract(format!(
                "encoding has length {}, expected {}",
                encoding.len(),
                self.config.latent_dim()
            )));
        }
        let mut g = Graph::new();
        let w = g.constant(Tensor::row(encoding.to_vec()));
        let (m, r) = self.graph_gp_params(&mut g, self.store(), w)?;
        Ok(g.value(m)
            .data()
            .iter()
            .copied()
            .zip(g.value(r).data().iter().copied())
            .collect())
    }

    pub fn generate(&self, z: &[f64], target_spatial: &[f64]) -> Result<Curve> {
        if z.len() != self.config.latent_gps || target_spatial.len() != self.config.spatial_dim {
            return Err(Error::Contract(format!(
                "generator expects K={} latents and L_h={} spatial values",
                self.config.latent_gps, self.config.spatial_dim
            )));
        }
        let mut g = Graph::new();
        let zn = g.constant(Tensor::row(z.to_vec()));
        let wh = g.constant(Tensor::row(target_spatial.to_vec()));
        let out = self.graph_generate(&mut g, self.store(), zn, wh)?;
        Curve::new(self.grid().clone(), g.value(out).data().to_vec())
    }

    /// Single-pair inputs; time indices are zero-based and must satisfy `t <= t'`.
    pub fn pair_inputs(
        &self,
        x: &Curve,
        h: usize,
        h_target: usize,
        t: usize,
        t_target: usize,
    ) -> Result<PairInputs> {
        if t_target < t {
            return Err(Error::Contract(format!(
                "target time {t_target} precedes source time {t}"
            )));
        }
        self.check_region(h)?;
        self.check_region(h_target)?;
        Ok(PairInputs {
            source_products: self.curve_products(x)?,
            source_regions: vec![h],
            target_regions: vec![h_target],
            lags: Tensor::scalar(
                self.config.normalized_time(t_target) - self.config.normalized_time(t),
            ),
        })
    }

    /// One forward pass for a single pair with fixed noise.
    pub fn forward_pass(
        &self,
        x: &Curve,
        h: usize,
        h_target: usize,
        t: usize,
        t_target: usize,
        noise: &NoiseVector,
    ) -> Result<(Curve, Vec<LatentGpState>)> {
        if noise.latent_gps() != self.config.latent_gps {
            return Err(Error::Contract(format!(
                "noise for {} processes, model has {}",
                noise.latent_gps(),
                self.config.latent_gps
            )));
        }
        let inputs = self.pair_inputs(x, h, h_target, t, t_target)?;
        let batch = NoiseBatch::from_vectors(std::slice::from_ref(noise))?;
        let mut g = Graph::new();
        let nodes = self.graph_forward(&mut g, self.store(), &inputs, &batch)?;
        let curve = Curve::new(
            self.grid().clone(),
            g.value(nodes.generated).data().to_vec(),
        )?;
        let (tn, tpn) = (
            self.config.normalized_time(t),
            self.config.normalized_time(t_target),
        );
        let states = latent_states(&g, &nodes.latent, 0, tn, tpn);
        Ok((curve, states))
    }

    /// Spatial contribution `W_{h'} A_h` of every target region to the
    /// generator output (`[H, M]`). The output map is linear in `W_{h'}`, so a
    /// generated curve for region `h'` equals the output for a zero spatial
    /// code plus row `h'` of this matrix.
    pub fn region_offsets(&self) -> Result<Tensor> {
        let regions: Vec<usize> = (0..self.config.regions).collect();
        let mut g = Graph::new();
        let wh = self.graph_encode_spatial(&mut g, self.store(), &regions)?;
        let weight = self.store().get(self.layout().output.weight);
        let lh = self.config.spatial_dim;
        let m = self.config.grid_size;
        let top = Tensor::matrix(lh, m, weight.data()[..lh * m].to_vec())?;
        g.value(wh).matmul(&top)
    }

    /// Generator outputs with a zero target spatial code for `noise.rows()`
    /// draws from one encoded source; add a row of [`Profnet::region_offsets`]
    /// to obtain curves for a particular target region.
    pub fn sample_base(
        &self,
        source_products: &Tensor,
        source_region: usize,
        lag: f64,
        noise: &NoiseBatch,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let store = self.store();
        let products = g.constant(source_products.clone());
        let wx = self.graph_encode_functional(&mut g, store, products)?;
        let wh = self.graph_encode_spatial(&mut g, store, &[source_region])?;
        let w = g.concat(wx, wh)?;
        let (mean, rho) = self.graph_gp_params(&mut g, store, w)?;
        let lags = g.constant(Tensor::scalar(lag));
        let latent = self.graph_sample_latent(&mut g, mean, rho, lags, noise)?;
        let zero = g.constant(Tensor::zeros(1, self.config.spatial_dim));
        let out = self.graph_generate(&mut g, store, latent.posterior_draw, zero)?;
        Ok(g.value(out).clone())
    }
}

fn pick(t: &Tensor, row: usize, k: usize) -> f64 {
    let r = if t.rows() == 1 { 0 } else { row };
    t.get(r, k)
}

/// Read the latent block of batch row `row` out of an evaluated graph.
pub fn latent_states(
    g: &Graph,
    nodes: &LatentNodes,
    row: usize,
    t: f64,
    t_prime: f64,
) -> Vec<LatentGpState> {
    let k = g.value(nodes.mean).cols();
    (0..k)
        .map(|j| LatentGpState {
            mean: pick(g.value(nodes.mean), row, j),
            length_scale: pick(g.value(nodes.length_scale), row, j),
            prior_draw: pick(g.value(nodes.prior_draw), row, j),
            cond_mean: pick(g.value(nodes.cond_mean), row, j),
            cond_var: pick(g.value(nodes.cond_var), row, j),
            posterior_draw: pick(g.value(nodes.posterior_draw), row, j),
            t,
            t_prime,
        })
        .collect()
}
