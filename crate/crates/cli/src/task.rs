//! Uniform view over the experiment tasks.

use gkm_core::bmo::{BmoConfig, Sample};
use gkm_core::hypergrad::inner_loop;
use gkm_core::params::{HyperParams, OmegaBounds};
use gkm_core::tasks::deconv::gaussian_kernel;
use gkm_core::tasks::*;
use gkm_core::{Error, Vector};

use crate::config::{ExperimentConfig, TaskKind};
use crate::error::CliResult;
use crate::toy::{build_toy, gen_toy, ToyInstance, ToyTask};

pub enum Task {
    SparseCoding { inst: SparseCodingInstance, task: SparseCodingTask },
    Deconv { inst: DeconvInstance, task: DeconvTask },
    Separation { inst: SeparationInstance, task: SeparationTask },
    Toy { inst: ToyInstance, task: ToyTask },
}

/// Held-out instances are regenerated from the training seed plus this offset.
const HELD_OUT_SEED_OFFSET: u64 = 1;

pub fn generate(cfg: &ExperimentConfig) -> CliResult<Container> {
    let i = &cfg.instance;
    Ok(match cfg.task {
        TaskKind::SparseCoding => gen_sparse_coding(i.m, i.n, i.batch, i.sparsity, i.noise_frac, cfg.seed)?.to_container(),
        TaskKind::Deconv => {
            let kernel = gaussian_kernel(i.kernel_width, i.kernel_sigma)?;
            gen_deconv(i.n, i.batch, kernel, i.levels, i.noise_sigma, cfg.seed)?.to_container()
        }
        TaskKind::Separation => gen_separation(i.n, i.batch, cfg.seed)?.to_container(),
        TaskKind::Toy => gen_toy(i.n, i.batch, i.layer_norm, cfg.seed)?.to_container(),
    })
}

fn sparse_defaults(cfg: &ExperimentConfig) -> SparseCodingDefaults {
    let o = &cfg.operator;
    let d = SparseCodingDefaults::default();
    SparseCodingDefaults {
        beta: o.beta.unwrap_or(d.beta),
        gamma: o.gamma.unwrap_or(d.gamma),
        kappa1: o.kappa1.unwrap_or(d.kappa1),
        kappa2: o.kappa2.unwrap_or(d.kappa2),
    }
}

fn deconv_parts(cfg: &ExperimentConfig) -> (NetSpec, DeconvDefaults) {
    let o = &cfg.operator;
    let d = DeconvDefaults::default();
    let spec = NetSpec {
        hidden: o.hidden.clone(),
        activation: o.activation,
        rho_bar: o.rho_bar,
        init: if o.random_init { NetInit::Random { seed: cfg.seed } } else { NetInit::Identity },
    };
    let defaults = DeconvDefaults {
        gamma_frac: o.gamma_frac.unwrap_or(d.gamma_frac),
        g: o.g.unwrap_or(d.g),
        kappa: o.kappa.unwrap_or(d.kappa),
    };
    (spec, defaults)
}

fn separation_defaults(cfg: &ExperimentConfig) -> SeparationDefaults {
    let o = &cfg.operator;
    let d = SeparationDefaults::default();
    SeparationDefaults {
        beta: o.beta.unwrap_or(d.beta),
        rho: o.rho.unwrap_or(d.rho),
        kappa_b: o.kappa_b.unwrap_or(d.kappa_b),
        kappa_r: o.kappa_r.unwrap_or(d.kappa_r),
        ..d
    }
}

impl Task {
    /// Builds the task for `cfg` from a stored instance. An instance of a
    /// different task is a format error.
    pub fn load(cfg: &ExperimentConfig, c: &Container) -> CliResult<Self> {
        let stored = c.attr("task")?;
        if stored != cfg.task.name() {
            return Err(Error::Format(format!("instance holds task `{stored}`, config asks for `{}`", cfg.task.name())).into());
        }
        Ok(match cfg.task {
            TaskKind::SparseCoding => {
                let inst = SparseCodingInstance::from_container(c)?;
                let task = build_sparse_coding_operator(&inst, &sparse_defaults(cfg))?;
                Self::SparseCoding { inst, task }
            }
            TaskKind::Deconv => {
                let inst = DeconvInstance::from_container(c)?;
                let (spec, defaults) = deconv_parts(cfg);
                let task = build_deconv_operator(&inst, &spec, &defaults)?;
                Self::Deconv { inst, task }
            }
            TaskKind::Separation => {
                let inst = SeparationInstance::from_container(c)?;
                let task = build_separation_operator(&inst, &separation_defaults(cfg))?;
                Self::Separation { inst, task }
            }
            TaskKind::Toy => {
                let inst = ToyInstance::from_container(c)?;
                let o = &cfg.operator;
                let task = build_toy(&inst, o.activation, o.rho_bar, o.normalize)?;
                Self::Toy { inst, task }
            }
        })
    }

    pub fn omega0(&self) -> &HyperParams {
        match self {
            Self::SparseCoding { task, .. } => &task.omega,
            Self::Deconv { task, .. } => &task.omega,
            Self::Separation { task, .. } => &task.omega,
            Self::Toy { task, .. } => &task.omega,
        }
    }

    pub fn bounds(&self) -> OmegaBounds {
        match self {
            Self::SparseCoding { task, .. } => task.bounds.clone(),
            Self::Deconv { task, .. } => task.bounds.clone(),
            Self::Separation { task, .. } => task.bounds.clone(),
            Self::Toy { task, .. } => OmegaBounds::for_params(&task.omega),
        }
    }

    /// `bmo` with the task's Ω filled in.
    pub fn bmo_config(&self, bmo: &BmoConfig) -> BmoConfig {
        BmoConfig { omega_bounds: Some(self.bounds()), ..bmo.clone() }
    }

    pub fn samples(&self) -> CliResult<Vec<Sample>> {
        Ok(match self {
            Self::SparseCoding { inst, task } => task.samples(inst)?,
            Self::Deconv { inst, task } => task.samples(inst)?,
            Self::Separation { inst, task } => task.samples(inst)?,
            Self::Toy { inst, task } => task.samples(inst)?,
        })
    }

    /// ω slices of the step/penalty-only baseline: the classical scheme with
    /// its scalar parameters tuned and everything else at its default.
    pub fn baseline_trainable(&self) -> Vec<String> {
        let names: &[&str] = match self {
            Self::SparseCoding { .. } => &LADMM_TRAINABLE,
            Self::Deconv { .. } => &["gamma"],
            Self::Separation { .. } => &["beta"],
            Self::Toy { .. } => &["d1.bias"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// The same samples with the learned network's certificate disabled: the
    /// raw toy layers, or deconvolution layers rescaled to spectral norm
    /// `diagnose.ablation_scale`. `None` when the operator has no learned network.
    pub fn ablation(&self, cfg: &ExperimentConfig) -> CliResult<Option<(Vec<Sample>, HyperParams)>> {
        Ok(match self {
            Self::Toy { inst, .. } => {
                let raw = build_toy(inst, cfg.operator.activation, cfg.operator.rho_bar, false)?;
                Some((raw.samples(inst)?, raw.omega))
            }
            Self::Deconv { inst, task } => {
                let mut raw = task.clone();
                raw.net = raw.net.without_certificate();
                let mut omega = task.omega.clone();
                for layer in task.net.layers() {
                    let w = &mut omega.values_mut()[layer.weight.offset..layer.weight.offset + layer.weight.len];
                    let s = gkm_core::Matrix::from_row_slice(layer.rows, layer.cols, w).svd(false, false).singular_values.max();
                    if s > 0.0 {
                        w.iter_mut().for_each(|x| *x *= cfg.diagnose.ablation_scale / s);
                    }
                }
                Some((raw.samples(inst)?, omega))
            }
            _ => None,
        })
    }

    /// Quality metrics of ω on held-out data, as `(name, value)` rows.
    pub fn metrics(&self, omega: &HyperParams, bmo: &BmoConfig, held_out: usize) -> CliResult<Vec<(&'static str, f64)>> {
        let finals = |samples: &[Sample]| -> CliResult<(f64, Vec<Vector>)> {
            let mut phi = 0.0;
            let mut out = Vec::with_capacity(samples.len());
            for s in samples {
                let run = inner_loop(&s.op, &s.loss, omega, bmo, &s.u0, None)?;
                phi += run.tape.loss_value;
                out.push(run.u_k);
            }
            Ok((phi / samples.len().max(1) as f64, out))
        };
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
        Ok(match self {
            Self::SparseCoding { inst, task } => {
                let held = inst.held_out(held_out);
                let (phi, _) = finals(&task.samples(&held)?)?;
                vec![("feasibility_loss", phi)]
            }
            Self::Deconv { inst, task } => {
                let held = gen_deconv(
                    inst.n(),
                    held_out,
                    inst.kernel.clone(),
                    inst.levels,
                    inst.noise_sigma,
                    inst.seed.wrapping_add(HELD_OUT_SEED_OFFSET),
                )?;
                let (phi, us) = finals(&task.samples(&held)?)?;
                let n = held.n();
                let mut p = Vec::new();
                let mut s = Vec::new();
                for (u, clean) in us.iter().zip(&held.clean) {
                    let x = task.reconstruct(u);
                    p.push(psnr(x.as_slice(), clean.as_slice(), 1.0)?);
                    s.push(ssim(x.as_slice(), clean.as_slice(), 1, n, 1.0)?);
                }
                vec![("loss", phi), ("psnr", mean(&p)), ("ssim", mean(&s))]
            }
            Self::Separation { inst, task } => {
                let held = gen_separation(inst.n(), held_out, inst.seed.wrapping_add(HELD_OUT_SEED_OFFSET))?;
                let (phi, us) = finals(&task.samples(&held)?)?;
                let n = held.n();
                let (mut pb, mut pr, mut sb) = (Vec::new(), Vec::new(), Vec::new());
                for (i, u) in us.iter().enumerate() {
                    let ub = &u.as_slice()[..n];
                    let ur = &u.as_slice()[n..2 * n];
                    pb.push(psnr(ub, held.background[i].as_slice(), 1.0)?);
                    pr.push(psnr(ur, held.streaks[i].as_slice(), 1.0)?);
                    sb.push(ssim(ub, held.background[i].as_slice(), 1, n, 1.0)?);
                }
                vec![("loss", phi), ("psnr_background", mean(&pb)), ("psnr_streaks", mean(&pr)), ("ssim_background", mean(&sb))]
            }
            Self::Toy { inst, task } => {
                let (phi, _) = finals(&task.samples(inst)?)?;
                vec![("loss", phi)]
            }
        })
    }
}
