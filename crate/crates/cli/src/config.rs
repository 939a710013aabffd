//! Experiment configuration: flat `section.key = value` text.
//!
//! ```text
//! task = sparse_coding
//! seed = 3
//! instance.batch = 64
//! bmo.t = 20
//! ```
//!
//! `#` starts a comment. Every field has a task-dependent default except `task`.

use std::path::PathBuf;
use std::str::FromStr;

use gkm_core::bmo::{BmoConfig, LrSchedule, OuterOptimizer};
use gkm_core::operators::Activation;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    SparseCoding,
    Deconv,
    Separation,
    Toy,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SparseCoding => "sparse_coding",
            Self::Deconv => "deconv",
            Self::Separation => "separation",
            Self::Toy => "toy",
        }
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sparse_coding" => Ok(Self::SparseCoding),
            "deconv" => Ok(Self::Deconv),
            "separation" => Ok(Self::Separation),
            "toy" => Ok(Self::Toy),
            other => Err(format!("unknown task `{other}` (sparse_coding, deconv, separation, toy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceConfig {
    /// Observation length (sparse coding only).
    pub m: usize,
    /// Code length, or signal length for the other tasks.
    pub n: usize,
    pub batch: usize,
    pub held_out: usize,
    pub sparsity: f64,
    pub noise_frac: f64,
    pub kernel_width: usize,
    pub kernel_sigma: f64,
    pub levels: usize,
    pub noise_sigma: f64,
    /// Spectral norm of each raw toy layer.
    pub layer_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorConfig {
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub kappa1: Option<f64>,
    pub kappa2: Option<f64>,
    pub gamma_frac: Option<f64>,
    pub g: Option<f64>,
    pub kappa: Option<f64>,
    pub rho: Option<f64>,
    pub kappa_b: Option<f64>,
    pub kappa_r: Option<f64>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub rho_bar: f64,
    pub random_init: bool,
    /// Spectral normalization of learned networks.
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseConfig {
    /// Rollout length as a multiple of the trained K.
    pub rollout_factor: usize,
    /// Raw layer scale of the ablation network.
    pub ablation_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdcheckConfig {
    pub instances: usize,
    pub k_max: usize,
    pub h: f64,
    pub tol: f64,
}

impl Default for FdcheckConfig {
    fn default() -> Self {
        Self { instances: 20, k_max: 20, h: 1e-6, tol: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub instance: InstanceConfig,
    pub operator: OperatorConfig,
    pub bmo: BmoConfig,
    pub diagnose: DiagnoseConfig,
    pub fdcheck: FdcheckConfig,
}

impl ExperimentConfig {
    pub fn defaults(task: TaskKind) -> Self {
        let (n, batch) = match task {
            TaskKind::SparseCoding => (128, 256),
            TaskKind::Deconv => (64, 32),
            TaskKind::Separation => (48, 16),
            TaskKind::Toy => (4, 4),
        };
        let bmo = match task {
            TaskKind::SparseCoding => BmoConfig {
                alpha: 0.9,
                mu: 0.1,
                s: 0.5,
                s_relative: true,
                gamma: 2e-4,
                k: 15,
                t: 100,
                lr_schedule: LrSchedule::ExpDecay { rate: 0.5, period: 30.0 },
                ..BmoConfig::default()
            },
            _ => BmoConfig {
                s: 0.5,
                s_relative: true,
                gamma: if task == TaskKind::Deconv { 2e-4 } else { 1e-2 },
                k: 15,
                t: 50,
                ..BmoConfig::default()
            },
        };
        Self {
            task,
            seed: 0,
            out_dir: PathBuf::from("out"),
            instance: InstanceConfig {
                m: 64,
                n,
                batch,
                held_out: batch,
                sparsity: 0.1,
                noise_frac: 0.1,
                kernel_width: 9,
                kernel_sigma: 2.0,
                levels: 3,
                noise_sigma: 0.01,
                layer_norm: 2.0,
            },
            operator: OperatorConfig {
                beta: None,
                gamma: None,
                kappa1: None,
                kappa2: None,
                gamma_frac: None,
                g: None,
                kappa: None,
                rho: None,
                kappa_b: None,
                kappa_r: None,
                hidden: Vec::new(),
                activation: if task == TaskKind::Toy { Activation::Relu } else { Activation::Identity },
                rho_bar: if task == TaskKind::Toy { 0.9 } else { 1.0 },
                random_init: false,
                normalize: true,
            },
            bmo,
            diagnose: DiagnoseConfig { rollout_factor: 2, ablation_scale: 2.0 },
            fdcheck: FdcheckConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let entries = entries(text)?;
        let task_entry = entries.iter().find(|e| e.key == "task").ok_or_else(|| CliError::Config {
            line: 0,
            message: "missing required field `task`".into(),
        })?;
        let task = task_entry.value.parse::<TaskKind>().map_err(|m| task_entry.err(m))?;
        let mut cfg = Self::defaults(task);
        let mut decay_rate = None;
        let mut decay_period = None;
        for e in &entries {
            cfg.set(e, &mut decay_rate, &mut decay_period)?;
        }
        match (decay_rate, decay_period) {
            (Some(rate), period) => {
                cfg.bmo.lr_schedule = LrSchedule::ExpDecay { rate, period: period.unwrap_or(1.0) };
            }
            (None, Some(period)) => match &mut cfg.bmo.lr_schedule {
                LrSchedule::ExpDecay { period: p, .. } => *p = period,
                LrSchedule::Constant => {
                    return Err(CliError::Config {
                        line: 0,
                        message: "`bmo.lr_decay_period` needs `bmo.lr_decay_rate`".into(),
                    })
                }
            },
            (None, None) => {}
        }
        cfg.bmo.seed = cfg.seed;
        cfg.bmo.validate().map_err(|e| CliError::Config { line: 0, message: e.to_string() })?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.bmo.seed = seed;
        self
    }

    fn set(&mut self, e: &Entry, rate: &mut Option<f64>, period: &mut Option<f64>) -> Result<(), CliError> {
        let i = &mut self.instance;
        let o = &mut self.operator;
        let b = &mut self.bmo;
        match e.key.as_str() {
            "task" => {}
            "seed" => self.seed = e.parse()?,
            "output.dir" => self.out_dir = PathBuf::from(&e.value),

            "instance.m" => i.m = e.parse()?,
            "instance.n" => i.n = e.parse()?,
            "instance.batch" => i.batch = e.parse()?,
            "instance.held_out" => i.held_out = e.parse()?,
            "instance.sparsity" => i.sparsity = e.parse()?,
            "instance.noise_frac" => i.noise_frac = e.parse()?,
            "instance.kernel_width" => i.kernel_width = e.parse()?,
            "instance.kernel_sigma" => i.kernel_sigma = e.parse()?,
            "instance.levels" => i.levels = e.parse()?,
            "instance.noise_sigma" => i.noise_sigma = e.parse()?,
            "instance.layer_norm" => i.layer_norm = e.parse()?,

            "operator.beta" => o.beta = Some(e.parse()?),
            "operator.gamma" => o.gamma = Some(e.parse()?),
            "operator.kappa1" => o.kappa1 = Some(e.parse()?),
            "operator.kappa2" => o.kappa2 = Some(e.parse()?),
            "operator.gamma_frac" => o.gamma_frac = Some(e.parse()?),
            "operator.g" => o.g = Some(e.parse()?),
            "operator.kappa" => o.kappa = Some(e.parse()?),
            "operator.rho" => o.rho = Some(e.parse()?),
            "operator.kappa_b" => o.kappa_b = Some(e.parse()?),
            "operator.kappa_r" => o.kappa_r = Some(e.parse()?),
            "operator.hidden" => o.hidden = e.list()?,
            "operator.activation" => {
                o.activation = Activation::parse(&e.value).ok_or_else(|| e.err(format!("unknown activation `{}`", e.value)))?
            }
            "operator.rho_bar" => o.rho_bar = e.parse()?,
            "operator.init" => {
                o.random_init = match e.value.as_str() {
                    "identity" => false,
                    "random" => true,
                    other => return Err(e.err(format!("unknown init `{other}` (identity, random)"))),
                }
            }
            "operator.normalize" => o.normalize = e.parse()?,

            "bmo.alpha" => b.alpha = e.parse()?,
            "bmo.mu" => b.mu = e.parse()?,
            "bmo.s" => b.s = e.parse()?,
            "bmo.s_relative" => b.s_relative = e.parse()?,
            "bmo.gamma" => b.gamma = e.parse()?,
            "bmo.k" => b.k = e.parse()?,
            "bmo.t" => b.t = e.parse()?,
            "bmo.lr_decay_rate" => *rate = Some(e.parse()?),
            "bmo.lr_decay_period" => *period = Some(e.parse()?),
            "bmo.lr_schedule" => match e.value.as_str() {
                "constant" => b.lr_schedule = LrSchedule::Constant,
                "exp_decay" => {}
                other => return Err(e.err(format!("unknown schedule `{other}` (constant, exp_decay)"))),
            },
            "bmo.optimizer" => {
                b.optimizer = match e.value.as_str() {
                    "gd" => OuterOptimizer::Gd,
                    "adam" => OuterOptimizer::adam(),
                    other => return Err(e.err(format!("unknown optimizer `{other}` (gd, adam)"))),
                }
            }
            "bmo.warm_start" => b.warm_start = e.parse()?,
            "bmo.metric_flow" => b.metric_flow = e.parse()?,
            "bmo.record_residuals" => b.record_residuals = e.parse()?,
            "bmo.divergence_threshold" => b.divergence_threshold = e.parse()?,
            "bmo.trainable" => {
                let names: Vec<String> = e.value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                b.trainable = (!names.is_empty()).then_some(names);
            }

            "diagnose.rollout_factor" => self.diagnose.rollout_factor = e.parse()?,
            "diagnose.ablation_scale" => self.diagnose.ablation_scale = e.parse()?,

            "fdcheck.instances" => self.fdcheck.instances = e.parse()?,
            "fdcheck.k_max" => self.fdcheck.k_max = e.parse()?,
            "fdcheck.h" => self.fdcheck.h = e.parse()?,
            "fdcheck.tol" => self.fdcheck.tol = e.parse()?,

            other => return Err(e.err(format!("unknown field `{other}`"))),
        }
        Ok(())
    }
}

struct Entry {
    line: usize,
    key: String,
    value: String,
}

impl Entry {
    fn err(&self, message: String) -> CliError {
        CliError::Config { line: self.line, message: format!("field `{}`: {message}", self.key) }
    }

    fn parse<T: FromStr>(&self) -> Result<T, CliError> {
        self.value.parse().map_err(|_| self.err(format!("cannot parse `{}`", self.value)))
    }

    fn list<T: FromStr>(&self) -> Result<Vec<T>, CliError> {
        self.value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| self.err(format!("cannot parse `{s}`"))))
            .collect()
    }
}

fn entries(text: &str) -> Result<Vec<Entry>, CliError> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim().to_string();
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(CliError::Config {
                line: i + 1,
                message: format!("field `{key}` repeats line {}", prev.line),
            });
        }
        out.push(Entry { line: i + 1, key, value: value.trim().to_string() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_coding_defaults() {
        let c = ExperimentConfig::parse("task = sparse_coding\n").unwrap();
        assert_eq!((c.instance.m, c.instance.n, c.instance.batch), (64, 128, 256));
        assert_eq!((c.bmo.k, c.bmo.t), (15, 100));
        assert!((c.bmo.lr(31) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn overrides_and_comments() {
        let c = ExperimentConfig::parse("# comment\ntask = toy\nbmo.t = 3 # inline\nbmo.trainable = d0.bias, d1.bias\n")
            .unwrap();
        assert_eq!(c.bmo.t, 3);
        assert_eq!(c.bmo.trainable.unwrap(), vec!["d0.bias", "d1.bias"]);
    }

    #[test]
    fn missing_task_names_the_field() {
        let err = ExperimentConfig::parse("bmo.t = 3\n").unwrap_err();
        assert!(err.to_string().contains("task"), "{err}");
    }

    #[test]
    fn bad_value_names_line_and_field() {
        let err = ExperimentConfig::parse("task = toy\n\nbmo.k = many\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("bmo.k"), "{msg}");
        assert!(ExperimentConfig::parse("task = toy\nbmo.kk = 1\n").is_err());
        assert!(ExperimentConfig::parse("task = toy\nbmo.k = 1\nbmo.k = 2\n").is_err());
    }

    #[test]
    fn schedule_keys() {
        let c = ExperimentConfig::parse("task = toy\nbmo.lr_decay_rate = 0.5\nbmo.lr_decay_period = 10\n").unwrap();
        assert_eq!(c.bmo.lr_schedule, LrSchedule::ExpDecay { rate: 0.5, period: 10.0 });
        let c = ExperimentConfig::parse("task = sparse_coding\nbmo.lr_schedule = constant\n").unwrap();
        assert_eq!(c.bmo.lr_schedule, LrSchedule::Constant);
    }
}
