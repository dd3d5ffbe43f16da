//! Monte Carlo forecast ensembles and their summaries: mean forecasts,
//! quantile bands, coverage, MSFE and cross-region association graphs.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::basis::{same_grid, Curve, Grid};
use crate::dataio::FtsDataset;
use crate::error::{Error, Result};
use crate::model::{NoiseBatch, Profnet};
use crate::seed;
use crate::tensor::Tensor;

/// `S` generated curves for one (source, target) combination.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastEnsemble {
    pub source: (usize, usize),
    pub target: (usize, usize),
    grid: Arc<Grid>,
    /// `[S, M]`.
    samples: Tensor,
}

impl ForecastEnsemble {
    pub fn new(
        source: (usize, usize),
        target: (usize, usize),
        grid: Arc<Grid>,
        samples: Tensor,
    ) -> Result<Self> {
        if samples.rows() == 0 || samples.cols() != grid.len() {
            return Err(Error::shape(
                "ensemble",
                format!("{:?} samples on a grid of {}", samples.shape(), grid.len()),
            ));
        }
        Ok(ForecastEnsemble {
            source,
            target,
            grid,
            samples,
        })
    }

    pub fn from_curves(
        source: (usize, usize),
        target: (usize, usize),
        curves: &[Curve],
    ) -> Result<Self> {
        let first = curves
            .first()
            .ok_or_else(|| Error::Contract("empty ensemble".into()))?;
        if curves.iter().any(|c| !c.same_grid(first)) {
            return Err(Error::Contract("ensemble curves on different grids".into()));
        }
        let rows: Vec<Vec<f64>> = curves.iter().map(|c| c.values().to_vec()).collect();
        ForecastEnsemble::new(
            source,
            target,
            first.grid().clone(),
            Tensor::from_rows(&rows)?,
        )
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn curve(&self, i: usize) -> Curve {
        Curve::new(self.grid.clone(), self.samples.row_slice(i).to_vec())
            .expect("row on ensemble grid")
    }

    fn column(&self, m: usize) -> Vec<f64> {
        (0..self.len()).map(|s| self.samples.get(s, m)).collect()
    }
}

/// `S` draws with fresh noise from one source curve.
#[allow(clippy::too_many_arguments)]
pub fn forecast_ensemble<R: Rng + ?Sized>(
    model: &Profnet,
    x: &Curve,
    h: usize,
    h_target: usize,
    t: usize,
    t_target: usize,
    samples: usize,
    rng: &mut R,
) -> Result<ForecastEnsemble> {
    if samples == 0 {
        return Err(Error::Contract("ensemble size must be at least 1".into()));
    }
    let inputs = model.pair_inputs(x, h, h_target, t, t_target)?;
    let noise = NoiseBatch::sample(samples, model.config().latent_gps, rng);
    let mut g = Graph::new();
    let nodes = model.graph_forward(&mut g, model.store(), &inputs, &noise)?;
    ForecastEnsemble::new(
        (t, h),
        (t_target, h_target),
        model.grid().clone(),
        g.value(nodes.generated).clone(),
    )
}

/// A single generated curve.
pub fn point_forecast<R: Rng + ?Sized>(
    model: &Profnet,
    x: &Curve,
    h: usize,
    h_target: usize,
    t: usize,
    t_target: usize,
    rng: &mut R,
) -> Result<Curve> {
    Ok(forecast_ensemble(model, x, h, h_target, t, t_target, 1, rng)?.curve(0))
}

pub fn mean_forecast(ens: &ForecastEnsemble) -> Curve {
    let s = ens.len() as f64;
    let values = (0..ens.grid.len())
        .map(|m| ens.column(m).iter().sum::<f64>() / s)
        .collect();
    Curve::new(ens.grid.clone(), values).expect("mean on ensemble grid")
}

/// Sample quantile with linear interpolation between order statistics
/// (`x[⌊h⌋] + (h - ⌊h⌋)(x[⌊h⌋+1] - x[⌊h⌋])`, `h = (n - 1) p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalBand {
    pub alpha: f64,
    pub lower: Curve,
    pub upper: Curve,
}

impl IntervalBand {
    /// The same band moved by `offset` at each grid point.
    pub fn shifted(&self, offset: &[f64]) -> Result<IntervalBand> {
        let shift = |c: &Curve| {
            Curve::new(
                c.grid().clone(),
                c.values().iter().zip(offset).map(|(a, b)| a + b).collect(),
            )
        };
        if offset.len() != self.lower.len() {
            return Err(Error::shape(
                "band shift",
                format!("{} offsets for {} points", offset.len(), self.lower.len()),
            ));
        }
        Ok(IntervalBand {
            alpha: self.alpha,
            lower: shift(&self.lower)?,
            upper: shift(&self.upper)?,
        })
    }
}

pub fn quantile_band(ens: &ForecastEnsemble, alpha: f64) -> Result<IntervalBand> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract(format!("alpha {alpha} must lie in (0, 1)")));
    }
    if ens.len() < 2 {
        return Err(Error::Contract(format!(
            "quantile band needs S >= 2, got {}",
            ens.len()
        )));
    }
    let m = ens.grid.len();
    let (mut lo, mut hi) = (Vec::with_capacity(m), Vec::with_capacity(m));
    for j in 0..m {
        let mut col = ens.column(j);
        col.sort_by(f64::total_cmp);
        lo.push(quantile_sorted(&col, alpha / 2.0));
        hi.push(quantile_sorted(&col, 1.0 - alpha / 2.0));
    }
    Ok(IntervalBand {
        alpha,
        lower: Curve::new(ens.grid.clone(), lo)?,
        upper: Curve::new(ens.grid.clone(), hi)?,
    })
}

/// Fraction of grid points where `truth` lies in the closed band.
pub fn coverage_probability(truth: &Curve, band: &IntervalBand) -> Result<f64> {
    if !truth.same_grid(&band.lower) || !truth.same_grid(&band.upper) {
        return Err(Error::Contract("coverage on different grids".into()));
    }
    let inside = truth
        .values()
        .iter()
        .zip(band.lower.values().iter().zip(band.upper.values()))
        .filter(|(x, (l, u))| *l <= *x && *x <= *u)
        .count();
    Ok(inside as f64 / truth.len() as f64)
}

/// Average over curves of the trapezoid integral of squared error.
pub fn msfe(truths: &[Curve], forecasts: &[Curve]) -> Result<f64> {
    if truths.len() != forecasts.len() || truths.is_empty() {
        return Err(Error::Contract(format!(
            "msfe needs equal non-zero counts, got {} truths and {} forecasts",
            truths.len(),
            forecasts.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in truths.iter().zip(forecasts) {
        if !a.same_grid(b) {
            return Err(Error::Contract("msfe curves on different grids".into()));
        }
        let err: Vec<f64> = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| x - y)
            .collect();
        total += a.grid().integrate_product(&err, &err);
    }
    Ok(total / truths.len() as f64)
}

/// Which source time pairs with each test target time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Horizon {
    /// Source time `t' - δ`, which may itself fall in the test range.
    FixedLag(usize),
    /// Source time is the last training time for every test target.
    FromTrainEnd,
}

impl Horizon {
    fn source_time(self, t_train: usize, t_target: usize) -> Option<usize> {
        match self {
            Horizon::FixedLag(d) => t_target.checked_sub(d),
            Horizon::FromTrainEnd => Some(t_train - 1),
        }
    }

    pub fn label(self) -> String {
        match self {
            Horizon::FixedLag(d) => format!("lag{d}"),
            Horizon::FromTrainEnd => "train_end".into(),
        }
    }
}

/// Shared settings for evaluation sweeps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub alpha: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            alpha: 0.05,
            samples: 500,
            seed: 0,
        }
    }
}

fn check_eval(model: &Profnet, data: &FtsDataset, t_train: usize) -> Result<()> {
    let (h, t, _) = data.dims();
    if !same_grid(model.grid(), data.grid()) {
        return Err(Error::Contract(
            "dataset grid does not match the checkpoint grid".into(),
        ));
    }
    if h != model.config().regions {
        return Err(Error::Contract(format!(
            "dataset has {h} regions, model has {}",
            model.config().regions
        )));
    }
    if t > model.config().time_points {
        return Err(Error::Contract(format!(
            "dataset has {t} times, model axis {}",
            model.config().time_points
        )));
    }
    if t_train == 0 || t_train >= t {
        return Err(Error::Config(format!(
            "train length {t_train} leaves no test times out of {t}"
        )));
    }
    Ok(())
}

/// Ensemble base draws (zero target code) of source `(t, h)` for lag `t' - t`.
fn base_samples(
    model: &Profnet,
    data: &FtsDataset,
    h: usize,
    t: usize,
    t_target: usize,
    noise: &NoiseBatch,
) -> Result<Tensor> {
    let products = model.inner_products(&Tensor::row(data.curve_values(h, t).to_vec()))?;
    let cfg = model.config();
    let lag = cfg.normalized_time(t_target) - cfg.normalized_time(t);
    model.sample_base(&products, h, lag, noise)
}

fn draw_noise(
    model: &Profnet,
    settings: &EvalSettings,
    purpose: &str,
    h: usize,
    t_target: usize,
    n_times: usize,
) -> NoiseBatch {
    let mut rng = seed::substream(settings.seed, purpose, (h * n_times + t_target) as u64);
    NoiseBatch::sample(settings.samples, model.config().latent_gps, &mut rng)
}

/// Average test-period coverage for every ordered (source, target) region pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageMatrix {
    pub horizon: Horizon,
    pub regions: usize,
    /// Row-major `[source][target]`.
    pub values: Vec<f64>,
    /// Number of target times averaged per source (0 when none had a source).
    pub counts: Vec<usize>,
}

impl CoverageMatrix {
    pub fn get(&self, src: usize, tgt: usize) -> f64 {
        self.values[src * self.regions + tgt]
    }

    /// Best source (self included) and its coverage for every target.
    pub fn best_sources(&self) -> Vec<(usize, f64)> {
        (0..self.regions)
            .map(|tgt| {
                (0..self.regions)
                    .filter(|&s| self.counts[s] > 0)
                    .map(|s| (s, self.get(s, tgt)))
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, c| if c.1 > best.1 { c } else { best },
                    )
            })
            .collect()
    }

    pub fn mean_best(&self) -> f64 {
        let b = self.best_sources();
        b.iter().map(|x| x.1).sum::<f64>() / b.len() as f64
    }

    pub fn mean_same_region(&self) -> f64 {
        (0..self.regions).map(|h| self.get(h, h)).sum::<f64>() / self.regions as f64
    }
}

/// Coverage of `(1 - α)` bands over test targets `t_train..T` of `data`
/// (the full series), for every source and target region.
///
/// Quantiles commute with adding a constant, and the target region enters
/// the generator output only through the additive offset `W_{h'} A_h`, so
/// each source draws one ensemble and every target reuses it shifted.
pub fn coverage_study(
    model: &Profnet,
    data: &FtsDataset,
    t_train: usize,
    horizon: Horizon,
    settings: &EvalSettings,
) -> Result<CoverageMatrix> {
    check_eval(model, data, t_train)?;
    let (hn, tn, _) = data.dims();
    let offsets = model.region_offsets()?;
    let grid = model.grid().clone();
    let rows: Vec<(Vec<f64>, usize)> = (0..hn)
        .into_par_iter()
        .map(|h| -> Result<(Vec<f64>, usize)> {
            let mut acc = vec![0.0; hn];
            let mut count = 0;
            for t_target in t_train..tn {
                let Some(t) = horizon.source_time(t_train, t_target) else {
                    continue;
                };
                let noise = draw_noise(model, settings, "coverage", h, t_target, tn);
                let base = base_samples(model, data, h, t, t_target, &noise)?;
                let ens = ForecastEnsemble::new((t, h), (t_target, h), grid.clone(), base)?;
                let band = quantile_band(&ens, settings.alpha)?;
                for (tgt, a) in acc.iter_mut().enumerate() {
                    let shifted = band.shifted(offsets.row_slice(tgt))?;
                    let truth =
                        Curve::new(grid.clone(), data.curve_values(tgt, t_target).to_vec())?;
                    *a += coverage_probability(&truth, &shifted)?;
                }
                count += 1;
            }
            if count > 0 {
                acc.iter_mut().for_each(|a| *a /= count as f64);
            }
            Ok((acc, count))
        })
        .collect::<Result<_>>()?;
    let counts = rows.iter().map(|r| r.1).collect();
    let values = rows.into_iter().flat_map(|r| r.0).collect();
    Ok(CoverageMatrix {
        horizon,
        regions: hn,
        values,
        counts,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssociationGraph {
    pub regions: usize,
    /// `(source, target, coverage)`, self-loops excluded.
    pub edges: Vec<(usize, usize, f64)>,
    /// Best source per target, self included.
    pub best_source: Vec<(usize, f64)>,
}

pub fn association_graph(matrix: &CoverageMatrix, threshold: f64) -> AssociationGraph {
    let n = matrix.regions;
    let edges = (0..n)
        .flat_map(|s| (0..n).map(move |t| (s, t)))
        .filter(|&(s, t)| s != t && matrix.counts[s] > 0 && matrix.get(s, t) >= threshold)
        .map(|(s, t)| (s, t, matrix.get(s, t)))
        .collect();
    AssociationGraph {
        regions: n,
        edges,
        best_source: matrix.best_sources(),
    }
}

/// Same-region MSFE of single-draw and ensemble-mean forecasts.
#[derive(Clone, Debug, PartialEq)]
pub struct MsfeReport {
    pub horizon: Horizon,
    pub point: Vec<f64>,
    pub mean: Vec<f64>,
}

impl MsfeReport {
    /// Overall MSFE, summed over regions.
    pub fn overall_point(&self) -> f64 {
        self.point.iter().sum()
    }

    pub fn overall_mean(&self) -> f64 {
        self.mean.iter().sum()
    }
}

pub fn msfe_study(
    model: &Profnet,
    data: &FtsDataset,
    t_train: usize,
    horizon: Horizon,
    settings: &EvalSettings,
) -> Result<MsfeReport> {
    check_eval(model, data, t_train)?;
    let (hn, tn, _) = data.dims();
    let offsets = model.region_offsets()?;
    let grid = model.grid().clone();
    let single = EvalSettings {
        samples: 1,
        ..*settings
    };
    let per_region: Vec<(f64, f64)> = (0..hn)
        .into_par_iter()
        .map(|h| -> Result<(f64, f64)> {
            let shift = |row: &[f64]| -> Result<Curve> {
                Curve::new(
                    grid.clone(),
                    row.iter()
                        .zip(offsets.row_slice(h))
                        .map(|(a, b)| a + b)
                        .collect(),
                )
            };
            let (mut truths, mut points, mut means) = (Vec::new(), Vec::new(), Vec::new());
            for t_target in t_train..tn {
                let Some(t) = horizon.source_time(t_train, t_target) else {
                    continue;
                };
                let noise = draw_noise(model, settings, "ensemble", h, t_target, tn);
                let base = base_samples(model, data, h, t, t_target, &noise)?;
                let ens = ForecastEnsemble::new((t, h), (t_target, h), grid.clone(), base)?;
                means.push(shift(mean_forecast(&ens).values())?);
                let noise = draw_noise(model, &single, "point", h, t_target, tn);
                let one = base_samples(model, data, h, t, t_target, &noise)?;
                points.push(shift(one.row_slice(0))?);
                truths.push(Curve::new(
                    grid.clone(),
                    data.curve_values(h, t_target).to_vec(),
                )?);
            }
            if truths.is_empty() {
                return Err(Error::Config(format!(
                    "horizon {} has no usable test targets",
                    horizon.label()
                )));
            }
            Ok((msfe(&truths, &points)?, msfe(&truths, &means)?))
        })
        .collect::<Result<_>>()?;
    Ok(MsfeReport {
        horizon,
        point: per_region.iter().map(|r| r.0).collect(),
        mean: per_region.iter().map(|r| r.1).collect(),
    })
}

pub fn ensemble_csv(ens: &ForecastEnsemble, data: &FtsDataset, out: &mut String) {
    let (t, h) = ens.source;
    let (tp, hp) = ens.target;
    for s in 0..ens.len() {
        for (m, u) in ens.grid.points().iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.16e},{},{:.16e}",
                data.regions()[h],
                data.regions()[hp],
                data.times()[t],
                data.times()[tp],
                u,
                s,
                ens.samples.get(s, m)
            );
        }
    }
}

pub const ENSEMBLE_HEADER: &str = "region_src,region_tgt,t_src,t_tgt,u,sample_id,value";
pub const BAND_HEADER: &str = "region_tgt,t_tgt,u,lower,upper,mean";
pub const GRAPH_HEADER: &str = "src,tgt,coverage";

pub fn band_csv(ens: &ForecastEnsemble, band: &IntervalBand, data: &FtsDataset, out: &mut String) {
    let (tp, hp) = ens.target;
    let mean = mean_forecast(ens);
    for (m, u) in ens.grid.points().iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e}",
            data.regions()[hp],
            data.times()[tp],
            u,
            band.lower.values()[m],
            band.upper.values()[m],
            mean.values()[m]
        );
    }
}

pub fn graph_csv(graph: &AssociationGraph, labels: &[String]) -> String {
    let mut out = format!("{GRAPH_HEADER}\n");
    for (s, t, c) in &graph.edges {
        let _ = writeln!(out, "{},{},{c:.6}", labels[*s], labels[*t]);
    }
    out
}
