//! Plain-text `key = value` run configuration.
//!
//! Lines are `key = value` with `#` comments; unknown keys are rejected.
//! Latent factors are declared with repeated `factor = ...` lines
//! (`bernoulli:0.5`, `categorical:3`, `uniform:-1,1`) in order. Every run
//! writes the fully resolved configuration next to its outputs.

use std::path::Path;

use thiserror::Error;

use crate::latent::{FactorSpec, LatentSpec};
use crate::losses::TrainingConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Everything a run needs: training hyper-parameters, the latent layout,
/// metric and detector settings, and dataset size.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub noise_dim: usize,
    pub factors: Vec<FactorSpec>,
    pub data_n: usize,
    pub eval_n: usize,
    pub pr_k: usize,
    pub mig_mc_samples: usize,
    pub mig_inner_cap: usize,
    pub nu: f64,
    /// 0 = scale heuristic.
    pub gamma: f64,
    pub lof_k: usize,
    pub detector_max_train: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = LatentSpec::default_spec();
        RunConfig {
            training: TrainingConfig::default(),
            noise_dim: spec.noise_dim,
            factors: spec.factors,
            data_n: 4000,
            eval_n: 2000,
            pr_k: 3,
            mig_mc_samples: 4000,
            mig_inner_cap: 256,
            nu: 0.5,
            gamma: 0.0,
            lof_k: 20,
            detector_max_train: 1000,
        }
    }
}

impl RunConfig {
    pub fn latent_spec(&self) -> Result<LatentSpec, ConfigError> {
        LatentSpec::new(self.noise_dim, self.factors.clone())
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut factors: Vec<FactorSpec> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Parse {
                line,
                msg: format!("expected 'key = value', got '{content}'"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |msg: String| ConfigError::Parse { line, msg };
            match key {
                "beta" => cfg.training.beta = parse_num(value).map_err(bad)?,
                "batch_size" => cfg.training.batch_size = parse_num(value).map_err(bad)?,
                "steps" => cfg.training.steps = parse_num(value).map_err(bad)?,
                "lr" => cfg.training.lr = parse_num(value).map_err(bad)?,
                "seed" => cfg.training.seed = parse_num(value).map_err(bad)?,
                "styles" => cfg.training.styles_enabled = parse_bool(value).map_err(bad)?,
                "r1_gamma" => cfg.training.r1_gamma = parse_num(value).map_err(bad)?,
                "sample_every" => cfg.training.sample_every = parse_num(value).map_err(bad)?,
                "noise_dim" => cfg.noise_dim = parse_num(value).map_err(bad)?,
                "factor" => factors.push(parse_factor(value).map_err(bad)?),
                "data_n" => cfg.data_n = parse_num(value).map_err(bad)?,
                "eval_n" => cfg.eval_n = parse_num(value).map_err(bad)?,
                "pr_k" => cfg.pr_k = parse_num(value).map_err(bad)?,
                "mig_mc_samples" => cfg.mig_mc_samples = parse_num(value).map_err(bad)?,
                "mig_inner_cap" => cfg.mig_inner_cap = parse_num(value).map_err(bad)?,
                "nu" => cfg.nu = parse_num(value).map_err(bad)?,
                "gamma" => cfg.gamma = parse_num(value).map_err(bad)?,
                "lof_k" => cfg.lof_k = parse_num(value).map_err(bad)?,
                "detector_max_train" => cfg.detector_max_train = parse_num(value).map_err(bad)?,
                other => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: other.to_string(),
                    })
                }
            }
        }
        if !factors.is_empty() {
            cfg.factors = factors;
        }
        cfg.latent_spec()?;
        if cfg.training.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if cfg.training.beta < 0.0 {
            return Err(ConfigError::Invalid("beta must be >= 0".into()));
        }
        Ok(cfg)
    }

    /// The fully resolved configuration in the same syntax `parse` accepts.
    pub fn to_text(&self) -> String {
        let spec = LatentSpec::new(self.noise_dim, self.factors.clone()).expect("validated");
        let mut out = String::new();
        out.push_str(&format!(
            "# resolved configuration (variant: {})\n",
            self.training.variant_name(&spec)
        ));
        out.push_str(&format!("beta = {}\n", self.training.beta));
        out.push_str(&format!("batch_size = {}\n", self.training.batch_size));
        out.push_str(&format!("steps = {}\n", self.training.steps));
        out.push_str(&format!("lr = {}\n", self.training.lr));
        out.push_str(&format!("seed = {}\n", self.training.seed));
        out.push_str(&format!("styles = {}\n", self.training.styles_enabled));
        out.push_str(&format!("r1_gamma = {}\n", self.training.r1_gamma));
        out.push_str(&format!("sample_every = {}\n", self.training.sample_every));
        out.push_str(&format!("noise_dim = {}\n", self.noise_dim));
        for f in &self.factors {
            let desc = match f {
                FactorSpec::Bernoulli { p } => format!("bernoulli:{p}"),
                FactorSpec::Categorical { k } => format!("categorical:{k}"),
                FactorSpec::Uniform { a, b } => format!("uniform:{a},{b}"),
            };
            out.push_str(&format!("factor = {desc}\n"));
        }
        out.push_str(&format!("data_n = {}\n", self.data_n));
        out.push_str(&format!("eval_n = {}\n", self.eval_n));
        out.push_str(&format!("pr_k = {}\n", self.pr_k));
        out.push_str(&format!("mig_mc_samples = {}\n", self.mig_mc_samples));
        out.push_str(&format!("mig_inner_cap = {}\n", self.mig_inner_cap));
        out.push_str(&format!("nu = {}\n", self.nu));
        out.push_str(&format!("gamma = {}\n", self.gamma));
        out.push_str(&format!("lof_k = {}\n", self.lof_k));
        out.push_str(&format!(
            "detector_max_train = {}\n",
            self.detector_max_train
        ));
        out
    }

    pub fn write_resolved(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_text()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn parse_num<T: std::str::FromStr>(value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse '{value}' as a number"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        other => Err(format!("cannot parse '{other}' as a boolean")),
    }
}

fn parse_factor(value: &str) -> Result<FactorSpec, String> {
    let (kind, args) = value
        .split_once(':')
        .ok_or_else(|| format!("factor '{value}' needs the form kind:args"))?;
    let f = match kind {
        "bernoulli" => FactorSpec::Bernoulli {
            p: parse_num(args)?,
        },
        "categorical" => FactorSpec::Categorical {
            k: parse_num(args)?,
        },
        "uniform" => {
            let (a, b) = args
                .split_once(',')
                .ok_or_else(|| format!("uniform factor '{args}' needs 'a,b'"))?;
            FactorSpec::Uniform {
                a: parse_num(a.trim())?,
                b: parse_num(b.trim())?,
            }
        }
        other => return Err(format!("unknown factor kind '{other}'")),
    };
    f.validate().map_err(|e| e.to_string())?;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let text = "\
# comment
beta = 0.5
batch_size = 4
steps = 10
styles = false
noise_dim = 8
factor = bernoulli:0.3
factor = categorical:4
factor = uniform:-2,2
nu = 0.25
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.training.beta, 0.5);
        assert!(!cfg.training.styles_enabled);
        assert_eq!(cfg.factors.len(), 3);
        assert_eq!(cfg.noise_dim, 8);
        assert_eq!(cfg.nu, 0.25);
        assert_eq!(
            cfg.factors[2],
            FactorSpec::Uniform { a: -2.0, b: 2.0 }
        );
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("wat = 7\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { .. }), "{err}");
    }

    #[test]
    fn malformed_line_is_rejected() {
        assert!(RunConfig::parse("beta 0.5\n").is_err());
        assert!(RunConfig::parse("factor = bernoulli:1.5\n").is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.training.beta = 0.75;
        cfg.training.styles_enabled = false;
        cfg.lof_k = 11;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.training.beta, 0.75);
        assert!(!back.training.styles_enabled);
        assert_eq!(back.lof_k, 11);
        assert_eq!(back.factors, cfg.factors);
    }

    #[test]
    fn defaults_match_the_desk_scale_spec() {
        let cfg = RunConfig::default();
        let spec = cfg.latent_spec().unwrap();
        assert_eq!(spec.encoding_dim(), 40);
        assert_eq!(spec.posterior_param_count(), 13);
        assert_eq!(cfg.training.beta, 1.0);
    }
}
