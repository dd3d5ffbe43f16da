//! Subcommand bodies. Every output goes through an atomic write.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use profnet::basis::{make_basis, BasisKind};
use profnet::checkpoint::{load_checkpoint, save_checkpoint, SeedLineage};
use profnet::config::RunConfig;
use profnet::dataio::{
    load_curves, smooth_dataset, train_length, transform_log10, write_atomic, write_curves,
    FtsDataset,
};
use profnet::forecasting::{
    association_graph, band_csv, coverage_study, ensemble_csv, forecast_ensemble, msfe_study,
    quantile_band, EvalSettings, Horizon, IntervalBand, BAND_HEADER, ENSEMBLE_HEADER,
};
use profnet::model::Profnet;
use profnet::seed;
use profnet::synthgen::simulate_seeded;
use profnet::training::{linear_fit, train as fit, TrainConfig};
use profnet::Error;

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.get("out"));
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn path_or(cfg: &RunConfig, key: &str, dir: &Path, file: &str) -> PathBuf {
    match cfg.get(key) {
        "" => dir.join(file),
        p => PathBuf::from(p),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Load curves and apply the configured transform and smoothing.
fn load_data(cfg: &RunConfig, dir: &Path) -> Result<FtsDataset> {
    let path = path_or(cfg, "data", dir, "curves.csv");
    let mut data = load_curves(&path)?;
    match cfg.get("transform") {
        "raw" => {}
        "log10" => data = transform_log10(&data)?,
        other => bail!(Error::Config(format!(
            "transform '{other}' is not raw or log10"
        ))),
    }
    if let Some(d) = cfg.optional::<usize>("smooth")? {
        let kind: BasisKind = cfg.get("basis").parse()?;
        let basis = make_basis(kind, d, data.grid().clone())?;
        data = smooth_dataset(&data, &basis)?;
    }
    Ok(data)
}

fn load_model(cfg: &RunConfig, dir: &Path, data: &FtsDataset) -> Result<Profnet> {
    let path = path_or(cfg, "checkpoint", dir, "checkpoint.json");
    let (model, _) = load_checkpoint(&path)?;
    if model.grid().points() != data.grid().points() {
        bail!(Error::Contract(format!(
            "dataset grid does not match the grid of {}",
            path.display()
        )));
    }
    if model.config().regions != data.regions().len() {
        bail!(Error::Contract(format!(
            "dataset has {} regions, checkpoint has {}",
            data.regions().len(),
            model.config().regions
        )));
    }
    Ok(model)
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let sim = cfg.sim_config()?;
    let dir = out_dir(cfg)?;
    let (data, truth) = simulate_seeded(&sim)?;
    let csv = dir.join("curves.csv");
    write_curves(&data, &csv)?;
    truth.save(&dir.join("truth.json"))?;
    let (h, t, m) = data.dims();
    println!("simulated cube ({h}, {t}, {m}) -> {}", csv.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = load_data(cfg, &dir)?;
    let (h, t, m) = data.dims();
    let t_train = train_length(t, cfg.f64("ratio")?)?;
    let model_cfg = cfg.model_config(h, t, m)?;
    let train_cfg = cfg.train_config()?;
    let start = Instant::now();
    let (model, trace) = fit(&data.slice_times(0, t_train)?, &model_cfg, &train_cfg)?;
    let master = cfg.seed()?;
    let lineage = SeedLineage {
        master,
        init: seed::derive_seed(master, seed::INIT),
    };
    let ckpt = path_or(cfg, "checkpoint", &dir, "checkpoint.json");
    save_checkpoint(&model, Some(lineage), &ckpt)?;
    write(&dir.join("trace.csv"), &trace.to_csv())?;
    let last = trace.rows.last().map_or(f64::NAN, |r| r.total);
    println!(
        "trained {} updates in {:.1}s, final loss {last:.6} -> {}",
        train_cfg.updates,
        start.elapsed().as_secs_f64(),
        ckpt.display()
    );
    Ok(())
}

fn alpha_label(alpha: f64) -> String {
    format!("band_{alpha}.csv")
}

pub fn forecast(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = load_data(cfg, &dir)?;
    let model = load_model(cfg, &dir, &data)?;
    let (hn, tn, _) = data.dims();
    let t_train = train_length(tn, cfg.f64("ratio")?)?;
    let lag: Option<usize> = cfg.optional("lag")?;
    let samples = cfg.usize("S")?;
    let alphas: Vec<f64> = cfg.list("alpha")?;
    if alphas.is_empty() {
        bail!(Error::Config("no alpha levels requested".into()));
    }
    let master = cfg.seed()?;
    let mut ensembles = format!("{ENSEMBLE_HEADER}\n");
    let mut bands = vec![format!("{BAND_HEADER}\n"); alphas.len()];
    let mut targets = 0;
    for hp in 0..hn {
        for tp in t_train..tn {
            let t = match lag {
                Some(d) if d > tp => continue,
                Some(d) => tp - d,
                None => t_train - 1,
            };
            let mut rng = seed::substream(master, seed::FORECAST, (hp * tn + tp) as u64);
            let x = data.curve(hp, t)?;
            let ens = forecast_ensemble(&model, &x, hp, hp, t, tp, samples, &mut rng)?;
            ensemble_csv(&ens, &data, &mut ensembles);
            for (a, out) in alphas.iter().zip(bands.iter_mut()) {
                // a single draw has no spread; its band is the draw itself
                let band = if samples >= 2 {
                    quantile_band(&ens, *a)?
                } else {
                    let c = ens.curve(0);
                    IntervalBand {
                        alpha: *a,
                        lower: c.clone(),
                        upper: c,
                    }
                };
                band_csv(&ens, &band, &data, out);
            }
            targets += 1;
        }
    }
    write(&dir.join("ensemble.csv"), &ensembles)?;
    for (a, text) in alphas.iter().zip(&bands) {
        write(&dir.join(alpha_label(*a)), text)?;
    }
    println!(
        "forecast {targets} targets with {samples} samples -> {}",
        dir.display()
    );
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = load_data(cfg, &dir)?;
    let model = load_model(cfg, &dir, &data)?;
    let (hn, tn, _) = data.dims();
    let t_train = train_length(tn, cfg.f64("ratio")?)?;
    let alpha = cfg.list::<f64>("alpha")?.first().copied().unwrap_or(0.05);
    let settings = EvalSettings {
        alpha,
        samples: cfg.usize("S")?,
        seed: cfg.seed()?,
    };
    let threshold = cfg.f64("threshold")?;
    let deltas: Vec<usize> = cfg.list("delta")?;
    if deltas.is_empty() {
        bail!(Error::Config("no evaluation lags requested".into()));
    }
    let labels = data.regions();
    let mut metrics = String::from(
        "delta,region,msfe_profnet,msfe_profnet_mean,best_source,best_coverage,self_coverage\n",
    );
    let mut coverage = String::from("delta,src,tgt,coverage\n");
    let mut edges = String::from("delta,src,tgt,coverage\n");
    for &d in &deltas {
        let horizon = Horizon::FixedLag(d);
        let report = msfe_study(&model, &data, t_train, horizon, &settings)?;
        let cov = coverage_study(&model, &data, t_train, horizon, &settings)?;
        let graph = association_graph(&cov, threshold);
        for h in 0..hn {
            let (best, c) = graph.best_source[h];
            let _ = writeln!(
                metrics,
                "{d},{},{:.10e},{:.10e},{},{c:.6},{:.6}",
                labels[h],
                report.point[h],
                report.mean[h],
                labels[best],
                cov.get(h, h)
            );
        }
        let _ = writeln!(
            metrics,
            "{d},all,{:.10e},{:.10e},,{:.6},{:.6}",
            report.overall_point(),
            report.overall_mean(),
            cov.mean_best(),
            cov.mean_same_region()
        );
        for s in 0..hn {
            for t in 0..hn {
                let _ = writeln!(
                    coverage,
                    "{d},{},{},{:.6}",
                    labels[s],
                    labels[t],
                    cov.get(s, t)
                );
            }
        }
        for (s, t, c) in &graph.edges {
            let _ = writeln!(edges, "{d},{},{},{c:.6}", labels[*s], labels[*t]);
        }
        println!(
            "lag {d}: MSFE {:.6} (mean {:.6}), best-source coverage {:.4}, {} edges",
            report.overall_point(),
            report.overall_mean(),
            cov.mean_best(),
            graph.edges.len()
        );
    }
    write(&dir.join("metrics.csv"), &metrics)?;
    write(&dir.join("coverage.csv"), &coverage)?;
    write(&dir.join("edges.csv"), &edges)?;
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = match cfg.get("data") {
        "" => simulate_seeded(&cfg.sim_config()?)?.0,
        _ => load_data(cfg, &dir)?,
    };
    let (h, t, m) = data.dims();
    let t_train = train_length(t, cfg.f64("ratio")?)?;
    let train_part = data.slice_times(0, t_train)?;
    let ks: Vec<usize> = cfg.list("K_list")?;
    if ks.is_empty() {
        bail!(Error::Config("K_list is empty".into()));
    }
    let updates = cfg.usize("bench_updates")?;
    let base = cfg.train_config()?;
    let mut out = String::from("K,updates,elapsed_ms,ms_per_10000,loss_first,loss_last\n");
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &k in &ks {
        let mut model_cfg = cfg.model_config(h, t, m)?;
        model_cfg.latent_gps = k;
        let train_cfg = TrainConfig {
            updates,
            trace_every: updates.clamp(1, 100),
            ..base.clone()
        };
        let start = Instant::now();
        let (_, trace) = fit(&train_part, &model_cfg, &train_cfg)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let per = ms * 10_000.0 / updates as f64;
        let first = trace.rows.first().map_or(f64::NAN, |r| r.total);
        let last = trace.rows.last().map_or(f64::NAN, |r| r.total);
        let _ = writeln!(out, "{k},{updates},{ms:.3},{per:.3},{first:.6},{last:.6}");
        xs.push(k as f64);
        ys.push(per);
    }
    write(&dir.join("bench.csv"), &out)?;
    if xs.len() >= 2 {
        let (a, b, r2) = linear_fit(&xs, &ys)?;
        println!("ms per 10000 updates = {a:.1} + {b:.3} K (R2 {r2:.4})");
    }
    Ok(())
}
