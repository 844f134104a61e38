//! Experiment configuration: a TOML file with `[model]`, `[run]` and
//! `[diagnostics]` sections, overlaid by command-line flags and validated as
//! a whole.

use std::path::{Path, PathBuf};

use globule_core::diagnostics::{functional_library, PathRegularityParams, TestFunctional};
use globule_core::ModelParams;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawModel {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_minus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_plus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ell: Option<i64>,
    /// Configuration file holding the external globules.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRun {
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub t_final: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_globules: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_trajectories: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thinning: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chains: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDiagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain_len: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilons: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    /// Names from the functional library; all of them when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub functionals: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    #[serde(default)]
    pub model: RawModel,
    #[serde(default)]
    pub run: RawRun,
    #[serde(default)]
    pub diagnostics: RawDiagnostics,
}

impl RawConfig {
    pub fn load(path: &Path) -> Result<RawConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(vec![format!("{}: {}", path.display(), e.message())]))
    }

    /// Canonical text of the resolved configuration; the manifest hashes it.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("plain values serialize")
    }

    /// Fields set in `o` replace those of `self`.
    pub fn overlay(mut self, o: &RawConfig) -> RawConfig {
        macro_rules! take {
            ($sec:ident: $($f:ident),*) => {
                $(if o.$sec.$f.is_some() { self.$sec.$f = o.$sec.$f.clone(); })*
            };
        }
        take!(model: sigma, r_minus, r_plus, ell, external);
        take!(run: t_final, dt, seed, n_globules, n_trajectories, stride, init, burn_in, thinning, samples, chains);
        take!(diagnostics: delta, epsilon, chain_len, scale, rho, epsilons, times, functionals);
        self
    }
}

/// What a subcommand needs beyond the model.
#[derive(Debug, Clone, Copy, Default)]
pub struct Needs {
    /// `T` and `dt`.
    pub dynamics: bool,
    /// `n_globules` (or an init file when `init_allowed`).
    pub globules: bool,
    pub init_allowed: bool,
    /// Modulus and localization settings on the recording grid.
    pub path_diagnostics: bool,
    /// A list of epsilons.
    pub epsilons: bool,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub t_final: f64,
    pub dt: f64,
    pub seed: u64,
    pub n_globules: Option<usize>,
    pub n_trajectories: usize,
    pub stride: usize,
    pub init: Option<PathBuf>,
    pub burn_in: usize,
    pub thinning: usize,
    pub samples: usize,
    pub chains: usize,
}

#[derive(Debug, Clone)]
pub struct DiagnosticsConfig {
    pub path: PathRegularityParams,
    pub rho: f64,
    pub epsilons: Vec<f64>,
    pub times: Vec<f64>,
    pub functionals: Vec<TestFunctional>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelParams,
    pub run: RunConfig,
    pub diagnostics: DiagnosticsConfig,
    pub raw: RawConfig,
}

/// Library functional names accepted in `diagnostics.functionals`.
pub const FUNCTIONAL_NAMES: [&str; 4] = ["count_inner", "count_outer", "min_pair_gap", "pair_distance_bin"];

fn count(v: Option<i64>, default: i64, field: &str, min: i64, problems: &mut Vec<String>) -> usize {
    let v = v.unwrap_or(default);
    if v < min {
        problems.push(format!("{field}: must be at least {min}, got {v}"));
        return min.max(0) as usize;
    }
    v as usize
}

fn positive(v: Option<f64>, field: &str, problems: &mut Vec<String>) -> Option<f64> {
    match v {
        None => {
            problems.push(format!("{field}: missing"));
            None
        }
        Some(x) if !(x.is_finite() && x > 0.0) => {
            problems.push(format!("{field}: must be positive and finite, got {x}"));
            None
        }
        Some(x) => Some(x),
    }
}

/// Checks every field and cross-field constraint, collecting all problems.
pub fn validate(raw: &RawConfig, needs: Needs) -> Result<ExperimentConfig, CliError> {
    let mut problems = Vec::new();
    let m = &raw.model;
    let sigma = positive(m.sigma, "model.sigma", &mut problems);
    let r_minus = positive(m.r_minus, "model.r_minus", &mut problems);
    let r_plus = positive(m.r_plus, "model.r_plus", &mut problems);
    let ell = match m.ell {
        None => {
            problems.push("model.ell: missing".into());
            None
        }
        Some(l) if !(1..=700).contains(&l) => {
            problems.push(format!("model.ell: must be an integer in [1, 700], got {l}"));
            None
        }
        Some(l) => Some(l as u32),
    };
    if let (Some(lo), Some(hi)) = (r_minus, r_plus) {
        if lo >= hi {
            problems.push(format!("model.r_minus, model.r_plus: need r_minus < r_plus, got {lo} and {hi}"));
        } else if let Some(l) = ell {
            let w = (-(l as f64)).exp();
            if w >= (hi - lo) / 4.0 {
                problems.push(format!(
                    "model.ell: e^-ell = {w:.4e} must be below (r_plus - r_minus)/4 = {:.4e}",
                    (hi - lo) / 4.0
                ));
            }
        }
    }

    let r = &raw.run;
    let seed = r.seed.unwrap_or_else(|| {
        problems.push("run.seed: missing".into());
        0
    });
    let (mut t_final, mut dt) = (1.0, 1.0);
    if needs.dynamics {
        let t = positive(r.t_final, "run.T", &mut problems);
        let d = positive(r.dt, "run.dt", &mut problems);
        if let (Some(t), Some(d)) = (t, d) {
            let k = t / d;
            if (k - k.round()).abs() > 1e-9 * k.max(1.0) || k.round() < 1.0 {
                problems.push(format!("run.T, run.dt: T = {t} must be a whole multiple of dt = {d}"));
            }
            t_final = t;
            dt = d;
        }
    }
    let n_globules = match r.n_globules {
        Some(n) if n < 0 => {
            problems.push(format!("run.n_globules: must be nonnegative, got {n}"));
            None
        }
        Some(n) => Some(n as usize),
        None => None,
    };
    if needs.globules && n_globules.is_none() && !(needs.init_allowed && r.init.is_some()) {
        problems.push(if needs.init_allowed {
            "run.n_globules: missing (or give run.init)".into()
        } else {
            "run.n_globules: missing".into()
        });
    }
    let n_trajectories = count(r.n_trajectories, 1, "run.n_trajectories", 1, &mut problems);
    let stride = count(r.stride, 1, "run.stride", 1, &mut problems);
    let burn_in = count(r.burn_in, 10_000, "run.burn_in", 0, &mut problems);
    let thinning = count(r.thinning, 100, "run.thinning", 1, &mut problems);
    let samples = count(r.samples, 1, "run.samples", 1, &mut problems);
    let chains = count(r.chains, 8, "run.chains", 1, &mut problems);
    if needs.dynamics && stride > 1 {
        let steps = (t_final / dt).round() as usize;
        if steps % stride != 0 {
            problems.push(format!("run.stride: {stride} must divide the step count {steps}"));
        }
    }

    let d = &raw.diagnostics;
    let delta = d.delta.unwrap_or(1.0 / 16.0);
    let epsilon = d.epsilon.unwrap_or(0.1);
    let chain_len = count(d.chain_len, 3, "diagnostics.chain_len", 2, &mut problems);
    let scale = count(d.scale, 1, "diagnostics.scale", 1, &mut problems);
    if scale > 15 {
        problems.push(format!("diagnostics.scale: must be at most 15, got {scale}"));
    }
    let rho = d.rho.unwrap_or(5.0);
    for (v, f) in [(delta, "diagnostics.delta"), (epsilon, "diagnostics.epsilon"), (rho, "diagnostics.rho")] {
        positive(Some(v), f, &mut problems);
    }
    let recording = dt * stride as f64;
    if needs.dynamics && needs.path_diagnostics && delta > 0.0 {
        if recording * 16.0 > delta * (1.0 + 1e-9) {
            problems.push(format!(
                "diagnostics.delta, run.dt, run.stride: the recording step {recording} must refine delta = {delta} at least 16 times"
            ));
        }
        if delta > t_final {
            problems.push(format!("diagnostics.delta: {delta} exceeds T = {t_final}"));
        }
    }
    let epsilons = d.epsilons.clone().unwrap_or_default();
    if needs.epsilons && epsilons.is_empty() {
        problems.push("diagnostics.epsilons: missing".into());
    }
    if epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        problems.push("diagnostics.epsilons: values must be positive and finite".into());
    }
    // default times sit on the recording grid
    let snap = |t: f64| (t / recording).round() * recording;
    let times = d.times.clone().unwrap_or_else(|| vec![snap(0.1 * t_final), snap(0.6 * t_final)]);
    if needs.dynamics && d.times.is_some() {
        for &t in &times {
            let k = t / recording;
            if !(0.0..=t_final).contains(&t) || (k - k.round()).abs() > 1e-9 * k.max(1.0) {
                problems.push(format!("diagnostics.times: {t} is not a recorded time in [0, {t_final}]"));
            }
        }
    }
    let names = d
        .functionals
        .clone()
        .unwrap_or_else(|| FUNCTIONAL_NAMES.iter().map(|s| s.to_string()).collect());
    let mut picks = Vec::new();
    for name in &names {
        match FUNCTIONAL_NAMES.iter().position(|n| n == name) {
            Some(k) => picks.push(k),
            None => problems.push(format!(
                "diagnostics.functionals: unknown `{name}` (known: {})",
                FUNCTIONAL_NAMES.join(", ")
            )),
        }
    }

    let external = match &m.external {
        Some(p) => match std::fs::read_to_string(p) {
            Ok(text) => match globule_core::io::read_configuration(&text) {
                Ok((c, _)) => Some(c),
                Err(e) => {
                    problems.push(format!("model.external: {}: {e}", p.display()));
                    None
                }
            },
            Err(e) => {
                problems.push(format!("model.external: {}: {e}", p.display()));
                None
            }
        },
        None => None,
    };

    if !problems.is_empty() {
        return Err(CliError::Validation(problems));
    }
    let (sigma, r_minus, r_plus, ell) = (sigma.unwrap(), r_minus.unwrap(), r_plus.unwrap(), ell.unwrap());
    let mut model = ModelParams::new(sigma, r_minus, r_plus, ell).map_err(|e| CliError::Validation(vec![e.to_string()]))?;
    if let Some(ext) = external {
        model = model.with_external(ext);
    }
    let path = PathRegularityParams::new(delta, epsilon, chain_len, scale as u32)
        .map_err(|e| CliError::Validation(vec![format!("diagnostics: {e}")]))?;
    let library = functional_library(ell as f64, r_plus);
    Ok(ExperimentConfig {
        model,
        run: RunConfig {
            t_final,
            dt,
            seed,
            n_globules,
            n_trajectories,
            stride,
            init: r.init.clone(),
            burn_in,
            thinning,
            samples,
            chains,
        },
        diagnostics: DiagnosticsConfig {
            path,
            rho,
            epsilons,
            times,
            functionals: picks.into_iter().map(|k| library[k]).collect(),
        },
        raw: raw.clone(),
    })
}
