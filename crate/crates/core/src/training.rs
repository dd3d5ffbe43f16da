//! Lag-free pair sampling and the minibatch SGD loop.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sgd_step, Graph, ParamStore};
use crate::basis::Grid;
use crate::dataio::FtsDataset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, NoiseBatch, PairInputs, Profnet};
use crate::objective::{
    graph_loss, KlEstimator, KlPrior, LossBreakdown, LossNodes, ObjectiveConfig,
};
use crate::seed;
use crate::tensor::Tensor;

/// Updates per wall-clock timing record.
pub const TIMING_INTERVAL: usize = 10_000;

/// Zero-based source and target indices with `t <= t_target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TrainingPair {
    pub t: usize,
    pub h: usize,
    pub t_target: usize,
    pub h_target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub updates: usize,
    pub seed: u64,
    pub kl_weight: f64,
    pub kl_estimator: KlEstimator,
    pub kl_prior: KlPrior,
    pub max_lag: Option<usize>,
    pub fixed_lag: Option<usize>,
    /// Probability that a pair stays within its region; `None` draws both
    /// regions independently and uniformly.
    pub same_region_weight: Option<f64>,
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 32,
            updates: 10_000,
            seed: 0,
            kl_weight: 1.0,
            kl_estimator: KlEstimator::Closed,
            kl_prior: KlPrior::Gp,
            max_lag: None,
            fixed_lag: None,
            same_region_weight: None,
            trace_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            kl_weight: self.kl_weight,
            estimator: self.kl_estimator,
            prior: self.kl_prior,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr {} must be finite and non-negative",
                self.lr
            )));
        }
        if self.batch == 0 || self.updates == 0 || self.trace_every == 0 {
            return Err(Error::Config(
                "batch, updates and trace_every must be at least 1".into(),
            ));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config(format!(
                "kl_weight {} must be non-negative",
                self.kl_weight
            )));
        }
        if let Some(w) = self.same_region_weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!(
                    "same_region_weight {w} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Uniform sampler over valid `(t, t')` combinations and region pairs.
#[derive(Clone, Debug)]
pub struct PairSampler {
    times: Vec<(usize, usize)>,
    regions: usize,
    same_region_weight: Option<f64>,
}

impl PairSampler {
    pub fn new(t_train: usize, regions: usize, cfg: &TrainConfig) -> Result<Self> {
        if t_train < 2 {
            return Err(Error::Config(format!(
                "need at least 2 training times, got {t_train}"
            )));
        }
        if regions == 0 {
            return Err(Error::Config("need at least one region".into()));
        }
        if let Some(d) = cfg.fixed_lag {
            if d >= t_train {
                return Err(Error::Config(format!(
                    "fixed_lag {d} must be below the {t_train} training times"
                )));
            }
        }
        let times: Vec<(usize, usize)> = (0..t_train)
            .flat_map(|t| (t..t_train).map(move |tp| (t, tp)))
            .filter(|&(t, tp)| {
                let lag = tp - t;
                cfg.fixed_lag.is_none_or(|d| lag == d) && cfg.max_lag.is_none_or(|m| lag <= m)
            })
            .collect();
        if times.is_empty() {
            return Err(Error::Config(
                "no valid time pairs under the lag settings".into(),
            ));
        }
        Ok(PairSampler {
            times,
            regions,
            same_region_weight: cfg.same_region_weight,
        })
    }

    pub fn time_pairs(&self) -> &[(usize, usize)] {
        &self.times
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TrainingPair {
        let (t, t_target) = self.times[rng.random_range(0..self.times.len())];
        let h = rng.random_range(0..self.regions);
        let h_target = match self.same_region_weight {
            None => rng.random_range(0..self.regions),
            Some(w) => {
                if self.regions == 1 || rng.random::<f64>() < w {
                    h
                } else {
                    let other = rng.random_range(0..self.regions - 1);
                    if other >= h {
                        other + 1
                    } else {
                        other
                    }
                }
            }
        };
        TrainingPair {
            t,
            h,
            t_target,
            h_target,
        }
    }
}

pub fn sample_pairs<R: Rng + ?Sized>(
    t_train: usize,
    regions: usize,
    cfg: &TrainConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<TrainingPair>> {
    let sampler = PairSampler::new(t_train, regions, cfg)?;
    Ok((0..count).map(|_| sampler.sample(rng)).collect())
}

/// Training curves with their basis inner products precomputed.
#[derive(Clone, Debug)]
pub struct TrainData {
    regions: usize,
    times: usize,
    values: Tensor,
    products: Tensor,
}

impl TrainData {
    pub fn new(model: &Profnet, data: &FtsDataset) -> Result<Self> {
        let (h, t, m) = data.dims();
        if m != model.config().grid_size || !crate::basis::same_grid(model.grid(), data.grid()) {
            return Err(Error::Contract(
                "dataset grid does not match the model grid".into(),
            ));
        }
        if h != model.config().regions {
            return Err(Error::Contract(format!(
                "dataset has {h} regions, model expects {}",
                model.config().regions
            )));
        }
        if t > model.config().time_points {
            return Err(Error::Contract(format!(
                "dataset has {t} times, model time axis has {}",
                model.config().time_points
            )));
        }
        let values = Tensor::matrix(h * t, m, data.values().to_vec())?;
        let products = model.inner_products(&values)?;
        Ok(TrainData {
            regions: h,
            times: t,
            values,
            products,
        })
    }

    pub fn times(&self) -> usize {
        self.times
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    fn gather(src: &Tensor, idx: impl Iterator<Item = usize>) -> Tensor {
        let cols = src.cols();
        let mut data = Vec::new();
        let mut n = 0;
        for i in idx {
            data.extend_from_slice(src.row_slice(i));
            n += 1;
        }
        Tensor::matrix(n, cols, data).expect("gathered rows")
    }

    fn row(&self, h: usize, t: usize) -> usize {
        h * self.times + t
    }

    /// Batched model inputs and target values for a set of pairs.
    pub fn batch(&self, model: &Profnet, pairs: &[TrainingPair]) -> Result<(PairInputs, Tensor)> {
        for p in pairs {
            if p.t > p.t_target
                || p.t_target >= self.times
                || p.h >= self.regions
                || p.h_target >= self.regions
            {
                return Err(Error::Contract(format!("invalid training pair {p:?}")));
            }
        }
        let cfg = model.config();
        let inputs = PairInputs {
            source_products: Self::gather(&self.products, pairs.iter().map(|p| self.row(p.h, p.t))),
            source_regions: pairs.iter().map(|p| p.h).collect(),
            target_regions: pairs.iter().map(|p| p.h_target).collect(),
            lags: Tensor::column(
                pairs
                    .iter()
                    .map(|p| cfg.normalized_time(p.t_target) - cfg.normalized_time(p.t))
                    .collect(),
            ),
        };
        let targets = Self::gather(
            &self.values,
            pairs.iter().map(|p| self.row(p.h_target, p.t_target)),
        );
        Ok((inputs, targets))
    }
}

/// Build the batch-mean loss for `pairs` with fixed noise against `store`.
pub fn loss_graph(
    g: &mut Graph,
    model: &Profnet,
    store: &ParamStore,
    inputs: &PairInputs,
    targets: &Tensor,
    noise: &NoiseBatch,
    objective: &ObjectiveConfig,
) -> Result<LossNodes> {
    let nodes = model.graph_forward(g, store, inputs, noise)?;
    let target = g.constant(targets.clone());
    graph_loss(g, nodes.generated, target, &nodes.latent, objective)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub update: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    /// Wall-clock of the preceding [`TIMING_INTERVAL`] updates.
    pub elapsed_ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn timings(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.elapsed_ms).collect()
    }

    /// Update-weighted mean total loss over rows whose update index lies in `range`.
    pub fn mean_total(&self, range: std::ops::RangeInclusive<usize>) -> Option<f64> {
        let mut prev = 0;
        let (mut sum, mut n) = (0.0, 0usize);
        for r in &self.rows {
            let span = r.update - prev;
            prev = r.update;
            if range.contains(&r.update) {
                sum += r.total * span as f64;
                n += span;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("update,total,recon,kl,elapsed_ms\n");
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{:.10e},{:.10e},{:.10e},",
                r.update, r.total, r.recon, r.kl
            );
            match r.elapsed_ms {
                Some(ms) => {
                    let _ = writeln!(out, "{ms:.3}");
                }
                None => out.push('\n'),
            }
        }
        out
    }
}

/// Owns a model and its training state.
pub struct Trainer {
    model: Profnet,
    data: TrainData,
    sampler: PairSampler,
    cfg: TrainConfig,
    pair_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    done: usize,
}

impl Trainer {
    pub fn new(model: Profnet, data: &FtsDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data = TrainData::new(&model, data)?;
        let sampler = PairSampler::new(data.times, data.regions, &cfg)?;
        Ok(Trainer {
            pair_rng: seed::stream(cfg.seed, seed::PAIRS),
            noise_rng: seed::stream(cfg.seed, seed::NOISE),
            model,
            data,
            sampler,
            cfg,
            done: 0,
        })
    }

    pub fn model(&self) -> &Profnet {
        &self.model
    }

    pub fn into_model(self) -> Profnet {
        self.model
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn updates_done(&self) -> usize {
        self.done
    }

    /// Loss at the current parameters without updating them.
    pub fn evaluate(&self, pairs: &[TrainingPair], noise: &NoiseBatch) -> Result<LossBreakdown> {
        let (inputs, targets) = self.data.batch(&self.model, pairs)?;
        let mut g = Graph::new();
        let nodes = loss_graph(
            &mut g,
            &self.model,
            self.model.store(),
            &inputs,
            &targets,
            noise,
            &self.cfg.objective(),
        )?;
        Ok(nodes.breakdown(&g, self.cfg.kl_weight))
    }

    /// One SGD update on explicit pairs and noise; returns the pre-update loss.
    pub fn step_with(
        &mut self,
        pairs: &[TrainingPair],
        noise: &NoiseBatch,
    ) -> Result<LossBreakdown> {
        let update = self.done + 1;
        let lr = self.cfg.lr;
        let diagnose = |e: Error| match e {
            Error::Numerical(msg) => Error::Numerical(format!("update {update} (lr {lr}): {msg}")),
            other => other,
        };
        let (inputs, targets) = self.data.batch(&self.model, pairs)?;
        let mut g = Graph::new();
        let nodes = loss_graph(
            &mut g,
            &self.model,
            self.model.store(),
            &inputs,
            &targets,
            noise,
            &self.cfg.objective(),
        )
        .map_err(diagnose)?;
        let loss = nodes.breakdown(&g, self.cfg.kl_weight);
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!(
                "update {update} (lr {lr}): loss is {}",
                loss.total
            )));
        }
        if lr > 0.0 {
            let grads = g.backward(nodes.total).map_err(diagnose)?;
            sgd_step(self.model.params_mut().store_mut(), &grads, lr).map_err(diagnose)?;
            if !self.model.store().is_finite() {
                return Err(Error::Numerical(format!(
                    "update {update} (lr {lr}): parameters became non-finite"
                )));
            }
        }
        self.done = update;
        Ok(loss)
    }

    /// One update on freshly sampled pairs and noise.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let pairs: Vec<TrainingPair> = (0..self.cfg.batch)
            .map(|_| self.sampler.sample(&mut self.pair_rng))
            .collect();
        let noise = NoiseBatch::sample(
            pairs.len(),
            self.model.config().latent_gps,
            &mut self.noise_rng,
        );
        self.step_with(&pairs, &noise)
    }

    /// Run the configured number of updates, recording the trace.
    pub fn run(mut self) -> Result<(Profnet, TrainTrace)> {
        let mut trace = TrainTrace::default();
        let (mut sum_t, mut sum_r, mut sum_k, mut n) = (0.0, 0.0, 0.0, 0usize);
        let mut clock = Instant::now();
        for u in 1..=self.cfg.updates {
            let l = self.step()?;
            sum_t += l.total;
            sum_r += l.recon;
            sum_k += l.kl;
            n += 1;
            let timed = u % TIMING_INTERVAL == 0;
            if u % self.cfg.trace_every == 0 || timed || u == self.cfg.updates {
                let elapsed_ms = timed.then(|| {
                    let ms = clock.elapsed().as_secs_f64() * 1e3;
                    clock = Instant::now();
                    ms
                });
                let nf = n as f64;
                trace.rows.push(TraceRow {
                    update: u,
                    total: sum_t / nf,
                    recon: sum_r / nf,
                    kl: sum_k / nf,
                    elapsed_ms,
                });
                log::debug!("update {u}: loss {:.6}", sum_t / nf);
                (sum_t, sum_r, sum_k, n) = (0.0, 0.0, 0.0, 0);
            }
        }
        Ok((self.model, trace))
    }
}

/// Initialize a model from `model_cfg` (init stream of `cfg.seed`) and train it.
pub fn train(
    data: &FtsDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Profnet, TrainTrace)> {
    let grid: Arc<Grid> = data.grid().clone();
    let mut rng = seed::stream(cfg.seed, seed::INIT);
    let model = Profnet::init(model_cfg.clone(), grid, &mut rng)?;
    Trainer::new(model, data, cfg.clone())?.run()
}

/// Ordinary least-squares line `y = a + b x` and its coefficient of determination.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract(
            "linear fit needs two or more paired points".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok((my - slope * mx, slope, r2))
}
