//! Subcommand implementations. Every command writes its artifacts and a
//! `manifest.txt` under the output directory.
//!
//! Seeds: trajectory `k` is driven by `split_seed(seed, k)`; its initial
//! state, when sampled, by `split_seed(split_seed(seed, INIT_STREAM), k)`.

use std::path::{Path, PathBuf};

use globule_core::diagnostics::{
    detect_chain, ensemble_moduli, fit_chain_curve, chain_probability_curve, fit_modulus_tail, localization_sets,
    max_modulus, nice_path_membership, reversibility_statistic, stationary_samples, curve_csv, Report,
    MIN_ENSEMBLE,
};
use globule_core::dynamics::{simulate_ensemble, IntegratorOptions, TrajectoryRecord};
use globule_core::io::{configuration_to_string, read_configuration, read_trajectory, trajectory_to_string, Meta};
use globule_core::penalization::PenalizationSpec;
use globule_core::rng::split_seed;
use globule_core::sampler::{sample_fixed_n, SamplerConfig};
use globule_core::Configuration;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Stream reserved for initial-state sampling.
pub const INIT_STREAM: u64 = u64::MAX;

/// Artifact directory; records every file written for the manifest.
pub struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    pub fn new(dir: &Path) -> Result<Output, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        self.write_path(&path, text)?;
        Ok(path)
    }

    /// Writes outside the naming scheme (an explicit `--out` file).
    pub fn write_path(&mut self, path: &Path, text: &str) -> Result<(), CliError> {
        std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.files.push(path.display().to_string());
        Ok(())
    }

    pub fn finish(mut self, command: &str, cfg: &ExperimentConfig) -> Result<(), CliError> {
        let canonical = cfg.raw.canonical();
        self.write("config.toml", &canonical)?;
        let mut m = Report::new();
        m.push("command", command);
        m.push("config_sha256", hex(&Sha256::digest(canonical.as_bytes())));
        m.push("seed", cfg.run.seed);
        m.push("globule_cli_version", env!("CARGO_PKG_VERSION"));
        m.push("globule_core_version", globule_core::VERSION);
        m.push("files", self.files.join(" "));
        self.write("manifest.txt", &m.to_text())?;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn spec_of(cfg: &ExperimentConfig) -> Result<PenalizationSpec, CliError> {
    Ok(PenalizationSpec::new(&cfg.model)?)
}

fn sampler_config(cfg: &ExperimentConfig) -> SamplerConfig {
    SamplerConfig {
        burn_in: cfg.run.burn_in,
        thinning: cfg.run.thinning,
        ..SamplerConfig::default()
    }
}

fn integrator(cfg: &ExperimentConfig) -> IntegratorOptions {
    IntegratorOptions {
        record_stride: cfg.run.stride,
        check_identity: false,
        ..IntegratorOptions::default()
    }
}

fn model_meta(cfg: &ExperimentConfig) -> Meta {
    let m = &cfg.model;
    vec![
        ("sigma".into(), format!("{:e}", m.sigma())),
        ("r_minus".into(), format!("{:e}", m.r_minus())),
        ("r_plus".into(), format!("{:e}", m.r_plus())),
        ("ell".into(), m.ell().to_string()),
        ("seed".into(), cfg.run.seed.to_string()),
    ]
}

/// `count` draws of the fixed-`n` stationary law, one chain each.
fn fixed_n_states(cfg: &ExperimentConfig, spec: &PenalizationSpec, n: usize, count: usize) -> Result<Vec<Configuration>, CliError> {
    let base = split_seed(cfg.run.seed, INIT_STREAM);
    let config = sampler_config(cfg);
    let states: globule_core::Result<Vec<Configuration>> = (0..count)
        .into_par_iter()
        .map(|k| sample_fixed_n(&cfg.model, spec, n, &config, split_seed(base, k as u64)))
        .collect();
    Ok(states?)
}

/// Initial states: the init file for every trajectory, or fresh draws.
fn initial_states(cfg: &ExperimentConfig, spec: &PenalizationSpec) -> Result<(Vec<Configuration>, String), CliError> {
    let count = cfg.run.n_trajectories;
    match (&cfg.run.init, cfg.run.n_globules) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let (c, _) = read_configuration(&text)?;
            if !globule_core::geometry::allowed(&c, &cfg.model) {
                return Err(CliError::Validation(vec![format!(
                    "run.init: {} is not an allowed configuration for this model",
                    path.display()
                )]));
            }
            Ok((vec![c; count], path.display().to_string()))
        }
        (None, Some(n)) => Ok((fixed_n_states(cfg, spec, n, count)?, format!("stationary n={n}"))),
        (None, None) => Err(CliError::Validation(vec!["run.n_globules: missing (or give run.init)".into()])),
    }
}

fn simulate_all(cfg: &ExperimentConfig, spec: &PenalizationSpec) -> Result<(Vec<TrajectoryRecord>, String), CliError> {
    let (inits, source) = initial_states(cfg, spec)?;
    let r = &cfg.run;
    let ensemble = simulate_ensemble(&inits, r.t_final, r.dt, spec, &cfg.model, r.seed, &integrator(cfg))?;
    Ok((ensemble, source))
}

fn write_trajectories(
    out: &mut Output,
    cfg: &ExperimentConfig,
    ensemble: &[TrajectoryRecord],
    source: &str,
    single: Option<&Path>,
) -> Result<(), CliError> {
    for (k, traj) in ensemble.iter().enumerate() {
        let mut meta = model_meta(cfg);
        meta.push(("T".into(), format!("{:e}", cfg.run.t_final)));
        meta.push(("trajectory".into(), k.to_string()));
        meta.push(("trajectory_seed".into(), split_seed(cfg.run.seed, k as u64).to_string()));
        meta.push(("init".into(), source.to_string()));
        let text = trajectory_to_string(traj, &meta)?;
        match single {
            Some(p) if ensemble.len() == 1 => out.write_path(p, &text)?,
            _ => {
                out.write(&format!("trajectory_{k:04}.txt"), &text)?;
            }
        }
    }
    Ok(())
}

pub fn simulate(cfg: &ExperimentConfig, out: &mut Output, single: Option<&Path>) -> Result<(), CliError> {
    let spec = spec_of(cfg)?;
    let (ensemble, source) = simulate_all(cfg, &spec)?;
    write_trajectories(out, cfg, &ensemble, &source, single)
}

pub fn sample_stationary(cfg: &ExperimentConfig, out: &mut Output, single: Option<&Path>) -> Result<(), CliError> {
    let spec = spec_of(cfg)?;
    let count = cfg.run.samples;
    let (states, law) = match cfg.run.n_globules {
        Some(n) => (fixed_n_states(cfg, &spec, n, count)?, format!("fixed n={n}")),
        None => (
            stationary_samples(&cfg.model, &spec, count, cfg.run.chains, &sampler_config(cfg), cfg.run.seed)?,
            "penalized".to_string(),
        ),
    };
    for (k, c) in states.iter().enumerate() {
        let mut meta = model_meta(cfg);
        meta.push(("law".into(), law.clone()));
        meta.push(("sample".into(), k.to_string()));
        let text = configuration_to_string(c, &meta)?;
        match single {
            Some(p) if count == 1 => out.write_path(p, &text)?,
            _ => {
                out.write(&format!("configuration_{k:04}.txt"), &text)?;
            }
        }
    }
    Ok(())
}

/// Path diagnostics of one trajectory.
fn path_report(cfg: &ExperimentConfig, traj: &TrajectoryRecord) -> Result<Report, CliError> {
    let p = &cfg.diagnostics.path;
    let mut r = Report::new();
    r.push("globules", traj.n_globules());
    r.push("T", traj.final_time());
    r.push("delta", p.delta);
    r.push("max_modulus", max_modulus(traj, p.delta)?);
    match nice_path_membership(traj, p) {
        Ok((regular, chain_free)) => {
            r.push("regular", regular);
            r.push("chain_free", chain_free);
        }
        Err(e) => r.push("nice_path", format!("skipped: {e}")),
    }
    if let Some(last) = traj.states.last() {
        r.push("final_chain", detect_chain(last, p.epsilon, p.chain_len)?.found);
    }
    match localization_sets(traj, p, cfg.diagnostics.rho, cfg.model.r_plus()) {
        Ok(loc) => {
            r.push("localization_nesting", loc.nesting_holds());
            r.push("localization_non_interaction", loc.non_interaction_holds());
            r.push("localization_containment", loc.containment_holds());
            r.push(
                "localization_sizes",
                loc.sets.iter().map(|s| s.len().to_string()).collect::<Vec<_>>().join(","),
            );
        }
        Err(e) => r.push("localization", format!("skipped: {e}")),
    }
    Ok(r)
}

pub fn diagnose(cfg: &ExperimentConfig, out: &mut Output, files: &[PathBuf]) -> Result<(), CliError> {
    if files.is_empty() {
        return Err(CliError::Validation(vec!["diagnose: no trajectory files given".into()]));
    }
    for path in files {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let (traj, _) = read_trajectory(&text)?;
        let mut r = path_report(cfg, &traj)?;
        r.entries.insert(0, ("file".into(), path.display().to_string()));
        let stem = path.file_stem().map_or("trajectory".into(), |s| s.to_string_lossy().into_owned());
        let text = r.to_text();
        print!("{text}");
        out.write(&format!("diagnostics_{stem}.txt"), &text)?;
    }
    Ok(())
}

pub fn scaling_chain(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let spec = spec_of(cfg)?;
    let samples = stationary_samples(&cfg.model, &spec, cfg.run.samples, cfg.run.chains, &sampler_config(cfg), cfg.run.seed)?;
    let m = cfg.diagnostics.path.chain_len;
    let report = fit_chain_curve(chain_probability_curve(&samples, &cfg.diagnostics.epsilons, m)?)?;
    let mut r = Report::new();
    r.push("samples", samples.len());
    r.push("chain_len", m);
    r.add_scaling("chain", &report);
    print!("{}", r.to_text());
    out.write("scaling_chain.txt", &r.to_text())?;
    out.write("scaling_chain.csv", &curve_csv(&report.points))?;
    Ok(())
}

pub fn scaling_modulus(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let spec = spec_of(cfg)?;
    let (ensemble, _) = simulate_all(cfg, &spec)?;
    let delta = cfg.diagnostics.path.delta;
    let moduli = ensemble_moduli(&ensemble, delta)?;
    let report = fit_modulus_tail(&moduli, delta, &cfg.diagnostics.epsilons)?;
    let mut r = Report::new();
    r.push("trajectories", ensemble.len());
    r.push("delta", delta);
    r.add_scaling("modulus", &report);
    print!("{}", r.to_text());
    out.write("scaling_modulus.txt", &r.to_text())?;
    out.write("scaling_modulus.csv", &curve_csv(&report.points))?;
    Ok(())
}

fn reversibility_entries(cfg: &ExperimentConfig, ensemble: &[TrajectoryRecord], r: &mut Report) -> Result<(), CliError> {
    let times = &cfg.diagnostics.times;
    for f in &cfg.diagnostics.functionals {
        let name = f.name();
        let single = reversibility_statistic(ensemble, &[*f], &times[..1])?;
        r.push(format!("{name} at {}", times[0]), format!("{:e} {:e} z={:.3}", single.forward, single.backward, single.z_score()));
        if times.len() >= 2 {
            let pair = reversibility_statistic(ensemble, &[*f, *f], &times[..2])?;
            r.push(
                format!("{name} at {} and {}", times[0], times[1]),
                format!("{:e} {:e} z={:.3}", pair.forward, pair.backward, pair.z_score()),
            );
        }
    }
    Ok(())
}

pub fn reversibility(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    if cfg.run.n_trajectories < MIN_ENSEMBLE {
        return Err(CliError::Validation(vec![format!(
            "run.n_trajectories: reversibility needs at least {MIN_ENSEMBLE}, got {}",
            cfg.run.n_trajectories
        )]));
    }
    let spec = spec_of(cfg)?;
    let (ensemble, _) = simulate_all(cfg, &spec)?;
    let mut r = Report::new();
    r.push("trajectories", ensemble.len());
    reversibility_entries(cfg, &ensemble, &mut r)?;
    print!("{}", r.to_text());
    out.write("reversibility.txt", &r.to_text())?;
    Ok(())
}

/// Sampler, dynamics and diagnostics in one pass.
pub fn run_experiment(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let spec = spec_of(cfg)?;
    let (ensemble, source) = simulate_all(cfg, &spec)?;
    write_trajectories(out, cfg, &ensemble, &source, None)?;
    let mut r = Report::new();
    r.push("trajectories", ensemble.len());
    for (k, traj) in ensemble.iter().enumerate() {
        for (key, v) in path_report(cfg, traj)?.entries {
            r.push(format!("trajectory_{k:04}.{key}"), v);
        }
    }
    if ensemble.len() >= MIN_ENSEMBLE {
        reversibility_entries(cfg, &ensemble, &mut r)?;
    }
    out.write("diagnostics.txt", &r.to_text())?;
    Ok(())
}
