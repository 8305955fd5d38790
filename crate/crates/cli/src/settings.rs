//! Flat configuration shared by all subcommands: a `key = value` file,
//! overridden by command-line flags.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};

use fedcov::config::FlatConfig;
use fedcov::federation::PipelineConfig;
use fedcov::synth::SynthSpec;

use crate::io::{read_flat, sha256_hex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportKind {
    Inproc,
    File,
}

impl TransportKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransportKind::Inproc => "inproc",
            TransportKind::File => "file",
        }
    }
}

const SYNTH_KEYS: [&str; 8] = [
    "seed",
    "centers",
    "features",
    "subjects",
    "covariates",
    "noise_frac",
    "folds",
    "intercept",
];

#[derive(Debug, Clone, Default, Args)]
pub struct Settings {
    /// Flat `key = value` config file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub centers: Option<usize>,
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Number of synthetic covariate columns, including the intercept.
    #[arg(long)]
    pub covariates: Option<usize>,
    #[arg(long)]
    pub noise_frac: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub admm_iterations: Option<usize>,
    #[arg(long)]
    pub variance_threshold: Option<f64>,
    #[arg(long)]
    pub m_components: Option<usize>,
    /// Design terms derived at each center, e.g. `intercept, age, age^2`.
    #[arg(long)]
    pub covariate_spec: Option<String>,
    /// Share per-subject projections onto the global components.
    #[arg(long)]
    pub share_scores: bool,
    #[arg(long, value_enum)]
    pub transport: Option<TransportKind>,
}

impl Settings {
    pub fn flat(&self) -> Result<FlatConfig> {
        let mut flat = match &self.config {
            Some(p) => read_flat(p)?,
            None => FlatConfig::default(),
        };
        let known: Vec<&str> = SYNTH_KEYS.iter().chain(PipelineConfig::KEYS.iter()).copied().collect();
        flat.reject_unknown(&known)?;
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                flat.set(k, v);
            }
        };
        set("seed", self.seed.map(|v| v.to_string()));
        set("centers", self.centers.map(|v| v.to_string()));
        set("features", self.features.map(|v| v.to_string()));
        set("subjects", self.subjects.map(|v| v.to_string()));
        set("covariates", self.covariates.map(|v| v.to_string()));
        set("noise_frac", self.noise_frac.map(|v| v.to_string()));
        set("folds", self.folds.map(|v| v.to_string()));
        set("rho", self.rho.map(|v| v.to_string()));
        set("admm_iterations", self.admm_iterations.map(|v| v.to_string()));
        set("variance_threshold", self.variance_threshold.map(|v| v.to_string()));
        set("m_components", self.m_components.map(|v| v.to_string()));
        set("covariate_spec", self.covariate_spec.clone());
        set("share_scores", self.share_scores.then(|| "true".to_string()));
        set("transport", self.transport.map(|t| t.as_str().to_string()));
        Ok(flat)
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let flat = self.flat()?;
        let d = SynthSpec::default();
        Ok(SynthSpec {
            seed: flat.parsed("seed")?.unwrap_or(d.seed),
            n_total: flat.parsed("subjects")?.unwrap_or(d.n_total),
            n_features: flat.parsed("features")?.unwrap_or(d.n_features),
            q: flat.parsed("covariates")?.unwrap_or(d.q),
            n_centers: flat.parsed("centers")?.unwrap_or(d.n_centers),
            noise_frac: flat.parsed("noise_frac")?.unwrap_or(d.noise_frac),
            folds: flat.parsed("folds")?.unwrap_or(d.folds),
            intercept: flat.parsed("intercept")?.unwrap_or(d.intercept),
        })
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        cfg.apply(&self.flat()?)?;
        Ok(cfg)
    }

    pub fn transport(&self) -> Result<TransportKind> {
        match self.flat()?.get("transport") {
            None | Some("inproc") => Ok(TransportKind::Inproc),
            Some("file") => Ok(TransportKind::File),
            Some(other) => bail!("unknown transport '{other}' (expected inproc or file)"),
        }
    }
}

/// Short identifier of a pipeline configuration.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    sha256_hex(cfg.to_flat().render().as_bytes())[..16].to_string()
}

pub fn spec_flat(spec: &SynthSpec) -> FlatConfig {
    let mut f = FlatConfig::default();
    f.set("seed", spec.seed.to_string());
    f.set("subjects", spec.n_total.to_string());
    f.set("features", spec.n_features.to_string());
    f.set("covariates", spec.q.to_string());
    f.set("centers", spec.n_centers.to_string());
    f.set("noise_frac", spec.noise_frac.to_string());
    f.set("folds", spec.folds.to_string());
    f.set("intercept", spec.intercept.to_string());
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn flags_override_config_file() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "rho = 3\nadmm-iterations = 4\nseed = 9").unwrap();
        let s = Settings {
            config: Some(file.path().to_path_buf()),
            admm_iterations: Some(7),
            ..Default::default()
        };
        let cfg = s.pipeline().unwrap();
        assert_eq!(cfg.admm.rho, 3.0);
        assert_eq!(cfg.admm.iterations, 7);
        assert_eq!(s.synth_spec().unwrap().seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "rhoo = 3").unwrap();
        let s = Settings {
            config: Some(file.path().to_path_buf()),
            ..Default::default()
        };
        assert!(s.flat().is_err());
    }
}
