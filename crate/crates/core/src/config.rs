//! Flat run configuration: defaults, then a `key = value` file, then
//! command-line overrides.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::basis::BasisKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PriorDraw};
use crate::objective::{KlEstimator, KlPrior};
use crate::synthgen::SimConfig;
use crate::training::TrainConfig;

/// Every accepted key with its default and a short description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed"),
    ("out", "out", "output directory"),
    ("data", "", "curve CSV path"),
    ("checkpoint", "", "checkpoint path"),
    // simulation
    ("H", "10", "number of regions"),
    ("T", "50", "number of time points"),
    ("M", "51", "grid points per curve"),
    (
        "K_true",
        "none",
        "latent processes of the simulator; none uses K",
    ),
    ("s", "1", "standard deviation of simulated GP means"),
    ("a", "2", "Gamma shape of simulated length-scales"),
    ("b", "1", "Gamma rate of simulated length-scales"),
    ("L_h_true", "4", "simulator embedding width"),
    ("sim_width", "32", "simulator hidden width"),
    (
        "sim_output_scale",
        "none",
        "tanh output scale of the simulator",
    ),
    // model
    ("K", "8", "latent Gaussian processes"),
    ("L_x", "8", "functional encoding width"),
    ("L_h", "4", "spatial encoding width"),
    ("D", "15", "basis size"),
    ("basis", "bspline", "bspline or fourier"),
    ("J_enc", "2", "encoder depth"),
    ("J_par", "2", "GP parameter head depth"),
    ("J_gen", "2", "generator depth"),
    ("hidden", "32", "hidden width"),
    ("rho_floor", "0.001", "length-scale floor"),
    ("prior_draw", "sampled", "sampled or mean source latent"),
    // training
    ("lr", "0.001", "SGD learning rate"),
    ("batch", "32", "pairs per update"),
    ("updates", "10000", "SGD updates"),
    ("kl_weight", "1", "weight of the KL term"),
    ("kl_estimator", "closed", "closed or sample"),
    (
        "kl_prior",
        "gp",
        "gp (learned marginal) or standard (N(0, 1))",
    ),
    ("max_lag", "none", "largest training lag"),
    ("fixed_lag", "none", "train on a single lag"),
    (
        "same_region_weight",
        "none",
        "probability of same-region pairs",
    ),
    ("trace_every", "100", "updates per trace row"),
    ("ratio", "0.8", "training fraction of the time axis"),
    ("transform", "raw", "raw or log10 applied after loading"),
    ("smooth", "none", "basis size used to pre-smooth curves"),
    // forecasting and evaluation
    ("S", "500", "ensemble size"),
    ("alpha", "0.05", "band levels, comma separated"),
    ("delta", "1,5,10", "evaluation lags, comma separated"),
    (
        "lag",
        "none",
        "forecast lag; none forecasts from the end of training",
    ),
    ("threshold", "0.9", "association coverage threshold"),
    // benchmark
    ("K_list", "8,32,128,512", "latent sizes to time"),
    ("bench_updates", "10000", "updates per timed run"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn check_key(key: &str) -> Result<()> {
    if KEYS.iter().any(|(k, _, _)| *k == key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown configuration key '{key}'")))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        check_key(key)?;
        self.values
            .insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("configuration key '{key}' is not declared"))
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("{key} = '{raw}' has the wrong type")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.typed(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.typed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.typed(key)
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        let raw = self.get(key);
        if raw.is_empty() || raw.eq_ignore_ascii_case("none") {
            Ok(None)
        } else {
            self.typed(key).map(Some)
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("{key}: '{s}' has the wrong type")))
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("seed")
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let cfg = SimConfig {
            latent_gps: match self.optional("K_true")? {
                Some(k) => k,
                None => self.usize("K")?,
            },
            regions: self.usize("H")?,
            times: self.usize("T")?,
            grid_size: self.usize("M")?,
            mean_scale: self.f64("s")?,
            gamma_shape: self.f64("a")?,
            gamma_rate: self.f64("b")?,
            spatial_dim: self.usize("L_h_true")?,
            width: self.usize("sim_width")?,
            output_scale: self.optional("sim_output_scale")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model settings for a panel with the given regions, time axis and grid.
    pub fn model_config(
        &self,
        regions: usize,
        time_points: usize,
        grid_size: usize,
    ) -> Result<ModelConfig> {
        let prior_draw = match self.get("prior_draw").to_ascii_lowercase().as_str() {
            "sampled" => PriorDraw::Sampled,
            "mean" => PriorDraw::Mean,
            other => {
                return Err(Error::Config(format!(
                    "prior_draw '{other}' is not sampled or mean"
                )))
            }
        };
        let cfg = ModelConfig {
            latent_gps: self.usize("K")?,
            functional_dim: self.usize("L_x")?,
            spatial_dim: self.usize("L_h")?,
            basis_kind: BasisKind::from_str(self.get("basis"))?,
            basis_size: self.usize("D")?,
            encoder_layers: self.usize("J_enc")?,
            param_layers: self.usize("J_par")?,
            generator_layers: self.usize("J_gen")?,
            hidden: self.usize("hidden")?,
            regions,
            grid_size,
            time_points,
            rho_floor: self.f64("rho_floor")?,
            prior_draw,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.f64("lr")?,
            batch: self.usize("batch")?,
            updates: self.usize("updates")?,
            seed: self.seed()?,
            kl_weight: self.f64("kl_weight")?,
            kl_estimator: KlEstimator::from_str(self.get("kl_estimator"))?,
            kl_prior: KlPrior::from_str(self.get("kl_prior"))?,
            max_lag: self.optional("max_lag")?,
            fixed_lag: self.optional("fixed_lag")?,
            same_region_weight: self.optional("same_region_weight")?,
            trace_every: self.usize("trace_every")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i as u64 + 1,
            msg: format!("expected 'key = value', got '{}'", raw.trim()),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse {
                line: i as u64 + 1,
                msg: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Merge defaults, an optional config file and overrides, in that order.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_config_text(&text)? {
            cfg.set(&k, &v)?;
        }
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}
