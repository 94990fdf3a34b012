use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use nalgebra::{DMatrix, DVector};
use rdnpc_core::closedloop::ExperimentOptions;
use rdnpc_core::dictionary::{Dictionary, DictionaryDescriptor, EstimationOptions};
use rdnpc_core::npc::NpcConfig;
use rdnpc_core::plant::{builtin_plant, InputBox, PlantModel};
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const SCHEMA_VERSION: u32 = 1;

/// One experiment, read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub plant: String,
    #[serde(default)]
    pub dictionary: DictionarySpec,
    /// Number of input samples `N` per data set.
    pub data_length: usize,
    #[serde(default)]
    pub excitation: ExcitationSpec,
    /// Prediction horizon `L`.
    pub horizon: usize,
    #[serde(default = "default_lambda")]
    pub lambda_alpha: f64,
    #[serde(default = "default_lambda")]
    pub lambda_sigma: f64,
    /// Diagonal of the output weight; ones when absent.
    #[serde(default)]
    pub q: Option<Vec<f64>>,
    /// Diagonal of the input weight; ones when absent.
    #[serde(default)]
    pub r: Option<Vec<f64>>,
    /// Symmetric controller input bound; the core default when absent.
    #[serde(default)]
    pub input_bound: Option<f64>,
    pub w_star: Vec<f64>,
    #[serde(default)]
    pub eps_star: EpsStarSpec,
    pub x0: Vec<f64>,
    /// Closed-loop plant steps, a multiple of `d_max`.
    pub n_steps: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_c3")]
    pub c3: f64,
    /// Sampling effort of the constant estimates. The seed field is
    /// replaced by one derived from the run seed.
    #[serde(default)]
    pub estimation: EstimationOptions,
}

fn default_lambda() -> f64 {
    1e3
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_c3() -> f64 {
    1.0
}

/// `"default"` or an explicit descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DictionarySpec {
    Named(String),
    Custom(DictionaryDescriptor),
}

impl Default for DictionarySpec {
    fn default() -> Self {
        DictionarySpec::Named("default".into())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// I.i.d. uniform inputs on `[-amplitude, amplitude]^m`.
    #[default]
    Uniform,
}

/// The excitation stream itself is seeded from the run seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationSpec {
    #[serde(default)]
    pub signal: Signal,
    /// Plant default when absent.
    #[serde(default)]
    pub amplitude: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EpsStarSpec {
    #[default]
    Estimate,
    Override { values: Vec<f64> },
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Failure::Config(msg.into()).into()
}

impl ExperimentConfig {
    /// Reads and validates a config file. Malformed JSON and failed checks
    /// are config errors; an unreadable file is an I/O error.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn plant(&self) -> anyhow::Result<PlantModel> {
        let plant = builtin_plant(&self.plant).map_err(|e| config_err(e.to_string()))?;
        Ok(match self.excitation.amplitude {
            Some(a) => plant.with_excitation_amplitude(a),
            None => plant,
        })
    }

    pub fn dictionary(&self, plant: &PlantModel) -> anyhow::Result<Dictionary> {
        let dict = match &self.dictionary {
            DictionarySpec::Named(name) if name == "default" => Dictionary::default_for(plant),
            DictionarySpec::Named(name) => {
                return Err(config_err(format!("unknown dictionary `{name}`")))
            }
            DictionarySpec::Custom(desc) => Dictionary::new(plant.m(), plant.n(), desc.clone()),
        };
        dict.map_err(|e| config_err(format!("dictionary: {e}")))
    }

    pub fn npc_config(&self, plant: &PlantModel) -> NpcConfig {
        let m = plant.m();
        let diag = |v: &Option<Vec<f64>>| match v {
            Some(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            None => DMatrix::identity(m, m),
        };
        let mut cfg = NpcConfig::new(m, self.horizon);
        cfg.lambda_alpha = self.lambda_alpha;
        cfg.lambda_sigma = self.lambda_sigma;
        cfg.q = diag(&self.q);
        cfg.r = diag(&self.r);
        if let Some(b) = self.input_bound {
            cfg.input_box = InputBox::symmetric(m, b);
        }
        cfg
    }

    /// `eps*` values of the sweep grid; `None` means "estimate".
    pub fn eps_grid(&self) -> Vec<Option<f64>> {
        match &self.eps_star {
            EpsStarSpec::Estimate => vec![None],
            EpsStarSpec::Override { values } => values.iter().copied().map(Some).collect(),
        }
    }

    pub fn experiment_options(&self, w_star: f64, eps_star: Option<f64>) -> ExperimentOptions {
        ExperimentOptions {
            data_length: self.data_length,
            w_star,
            eps_star_override: eps_star,
            estimation: self.estimation.clone(),
            c3: self.c3,
        }
    }

    /// The one `(w*, eps*)` pair of a single-run command.
    pub fn single_cell(&self) -> anyhow::Result<(f64, Option<f64>)> {
        let eps = self.eps_grid();
        if self.w_star.len() != 1 || eps.len() != 1 {
            return Err(config_err(format!(
                "single-run commands need exactly one w* and one eps* value, got {} and {}",
                self.w_star.len(),
                eps.len()
            )));
        }
        Ok((self.w_star[0], eps[0]))
    }

    /// Excitation order the data must satisfy, `L + d_max + n`.
    pub fn pe_order(&self, plant: &PlantModel) -> usize {
        self.horizon + plant.d_max() + plant.n()
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let plant = self.plant()?;
        self.dictionary(&plant)?;
        let (m, n, d_max) = (plant.m(), plant.n(), plant.d_max());
        if self.horizon < d_max {
            return Err(config_err(format!("horizon {} is below d_max = {d_max}", self.horizon)));
        }
        // The synthetic-input Hankel of order L + d_max + n needs at least as
        // many columns as rows.
        let order = self.pe_order(&plant);
        let columns = (self.data_length + 1).saturating_sub(order);
        if self.data_length < self.horizon + d_max || columns < m * order {
            return Err(config_err(format!(
                "data_length {} too short: excitation order {order} needs N >= {}",
                self.data_length,
                (m + 1) * order - 1
            )));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(config_err(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lambda_alpha", self.lambda_alpha)?;
        positive("lambda_sigma", self.lambda_sigma)?;
        positive("c3", self.c3)?;
        if let Some(a) = self.excitation.amplitude {
            positive("excitation amplitude", a)?;
        }
        if let Some(b) = self.input_bound {
            positive("input_bound", b)?;
        }
        for (name, weights) in [("q", &self.q), ("r", &self.r)] {
            if let Some(w) = weights {
                if w.len() != m {
                    return Err(config_err(format!("{name} has {} entries, plant has m = {m}", w.len())));
                }
                for &v in w {
                    positive(name, v)?;
                }
            }
        }
        if self.w_star.is_empty() {
            return Err(config_err("empty w* grid"));
        }
        let grid_value = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(config_err(format!("{name} values must be >= 0, got {v}")))
            }
        };
        for &w in &self.w_star {
            grid_value("w*", w)?;
        }
        if let EpsStarSpec::Override { values } = &self.eps_star {
            if values.is_empty() {
                return Err(config_err("empty eps* grid"));
            }
            for &e in values {
                grid_value("eps*", e)?;
            }
        }
        if self.x0.len() != n {
            return Err(config_err(format!("x0 has {} entries, plant has n = {n}", self.x0.len())));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(config_err("x0 must be finite"));
        }
        if self.n_steps == 0 || !self.n_steps.is_multiple_of(d_max) {
            return Err(config_err(format!(
                "n_steps {} must be a positive multiple of d_max = {d_max}",
                self.n_steps
            )));
        }
        if self.seeds.is_empty() {
            return Err(config_err("no seeds"));
        }
        Ok(())
    }
}
