//! Experiment configuration: TOML schema with strict validation (unknown
//! keys rejected) hosting the protocol constants (epsilon, tau, gate
//! threshold, prompt lengths, missing rate) alongside every training knob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, TrainSettings};
use crate::dataset::{ModalDims, SyntheticSpec};
use crate::error::{Error, Result};
use crate::mipd::PromptConfig;
use crate::missing::Scenario;
use crate::mme::{EvaluatorConfig, EvaluatorTrainSettings};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding a saved feature container; mutually exclusive with
    /// `synthetic`.
    #[serde(default)]
    pub features_dir: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    #[serde(default = "d32")]
    pub d_model: usize,
    #[serde(default = "n4")]
    pub n_heads: usize,
    #[serde(default = "n2")]
    pub n_cross_layers: usize,
    #[serde(default = "n2")]
    pub n_self_layers: usize,
    #[serde(default = "d64")]
    pub ffn_hidden: usize,
}

fn d32() -> usize {
    32
}
fn d64() -> usize {
    64
}
fn n4() -> usize {
    4
}
fn n2() -> usize {
    2
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection { d_model: 32, n_heads: 4, n_cross_layers: 2, n_self_layers: 2, ffn_hidden: 64 }
    }
}

impl BackboneSection {
    pub fn to_config(&self, dims: ModalDims) -> BackboneConfig {
        BackboneConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_cross_layers: self.n_cross_layers,
            n_self_layers: self.n_self_layers,
            ffn_hidden: self.ffn_hidden,
            d_in: dims.dim,
            seq_len: dims.len,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    #[serde(default = "d50")]
    pub len_com: usize,
    #[serde(default = "d50")]
    pub len_wei: usize,
    /// Defaults to the backbone width when absent.
    #[serde(default)]
    pub d_prompt: Option<usize>,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: [usize; 3],
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "d3")]
    pub conv_width: usize,
    #[serde(default)]
    pub decoupler_hidden: Option<usize>,
}

fn d50() -> usize {
    50
}
fn d3() -> usize {
    3
}
fn default_prompt_len() -> [usize; 3] {
    [39, 50, 50]
}
fn default_init_std() -> f64 {
    0.02
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection {
            len_com: 50,
            len_wei: 50,
            d_prompt: None,
            prompt_len: default_prompt_len(),
            init_std: 0.02,
            conv_width: 3,
            decoupler_hidden: None,
        }
    }
}

impl PromptSection {
    pub fn to_config(&self, d_model: usize) -> PromptConfig {
        PromptConfig {
            len_com: self.len_com,
            len_wei: self.len_wei,
            d_prompt: self.d_prompt.unwrap_or(d_model),
            prompt_len: self.prompt_len,
            init_std: self.init_std,
            conv_width: self.conv_width,
            decoupler_hidden: self.decoupler_hidden.unwrap_or(d_model),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmeSection {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub gate_threshold: f64,
    #[serde(default = "default_label_range")]
    pub label_range: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "e40")]
    pub epochs: usize,
    #[serde(default = "b64")]
    pub batch_size: usize,
    #[serde(default = "lr1e2")]
    pub lr: f64,
    #[serde(default = "mom09")]
    pub momentum: f64,
}

fn default_epsilon() -> f64 {
    0.3
}
fn default_label_range() -> f64 {
    6.0
}
fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn e40() -> usize {
    40
}
fn b64() -> usize {
    64
}
fn lr1e2() -> f64 {
    1e-2
}
fn mom09() -> f64 {
    0.9
}

impl Default for MmeSection {
    fn default() -> Self {
        MmeSection {
            epsilon: 0.3,
            gate_threshold: 0.0,
            label_range: 6.0,
            hidden: vec![64],
            epochs: 40,
            batch_size: 64,
            lr: 1e-2,
            momentum: 0.9,
        }
    }
}

impl MmeSection {
    pub fn evaluator_config(&self) -> EvaluatorConfig {
        EvaluatorConfig {
            epsilon: self.epsilon,
            gate_threshold: self.gate_threshold,
            label_range: self.label_range,
            hidden: self.hidden.clone(),
        }
    }

    pub fn train_settings(&self) -> EvaluatorTrainSettings {
        EvaluatorTrainSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpwSection {
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    0.1
}

impl Default for DpwSection {
    fn default() -> Self {
        DpwSection { tau: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub epochs: usize,
    #[serde(default = "b32")]
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "mom09")]
    pub momentum: f64,
}

fn b32() -> usize {
    32
}

impl OptimSection {
    pub fn to_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    pub epochs: usize,
    #[serde(default = "b32")]
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "mom09")]
    pub momentum: f64,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<String>,
    #[serde(default = "default_rate")]
    pub rate: f64,
}

fn default_scenarios() -> Vec<String> {
    vec!["a".into(), "v".into(), "t".into(), "a,v".into(), "a,t".into(), "v,t".into()]
}
fn default_rate() -> f64 {
    0.3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<String>,
    #[serde(default = "default_rates")]
    pub rates: Vec<f64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "b64")]
    pub batch_size: usize,
}

fn default_rates() -> Vec<f64> {
    vec![0.3]
}
fn default_methods() -> Vec<String> {
    vec!["promma".into(), "lb".into(), "ms".into(), "md".into(), "zero-fill".into()]
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            scenarios: default_scenarios(),
            rates: default_rates(),
            methods: default_methods(),
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_dataset_name")]
    pub dataset_name: String,
    pub data: DataConfig,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub prompts: PromptSection,
    #[serde(default)]
    pub mme: MmeSection,
    #[serde(default)]
    pub dpw: DpwSection,
    pub pretrain: OptimSection,
    pub train: AdaptSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_seed() -> u64 {
    42
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_dataset_name() -> String {
    "synthetic".into()
}

impl ExperimentConfig {
    pub fn from_toml_str(raw: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(raw).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&raw)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.features_dir, &self.data.synthetic) {
            (None, None) => {
                return Err(Error::Config(
                    "data section needs either features_dir or a [data.synthetic] table".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "data section has both features_dir and synthetic; pick one".into(),
                ))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction {} outside [0, 1)",
                self.data.test_fraction
            )));
        }
        self.mme.evaluator_config().validate()?;
        if self.dpw.tau <= 0.0 {
            return Err(Error::Config(format!("tau {} must be positive", self.dpw.tau)));
        }
        if !(0.0..=1.0).contains(&self.train.rate) {
            return Err(Error::Config(format!("training rate {} outside [0, 1]", self.train.rate)));
        }
        for r in &self.eval.rates {
            if !(0.0..=1.0).contains(r) {
                return Err(Error::Config(format!("eval rate {r} outside [0, 1]")));
            }
        }
        for s in self.train.scenarios.iter().chain(&self.eval.scenarios) {
            s.parse::<Scenario>()?;
        }
        for m in &self.eval.methods {
            if m != "promma" {
                m.parse::<crate::missing::Policy>()?;
            }
        }
        Ok(())
    }

    pub fn train_scenarios(&self) -> Vec<Scenario> {
        self.train.scenarios.iter().map(|s| s.parse().expect("validated")).collect()
    }

    pub fn eval_scenarios(&self) -> Vec<Scenario> {
        self.eval.scenarios.iter().map(|s| s.parse().expect("validated")).collect()
    }
}
