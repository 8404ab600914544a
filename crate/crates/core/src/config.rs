//! Flat key=value experiment configuration with typed validation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::corona::CoronaParams;
use crate::error::{Error, Result};
use crate::grid::GridParams;

/// All knobs of an experiment run. Parsed from `key = value` lines;
/// unknown keys are rejected, missing keys take defaults.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub n: u32,
    pub l: u32,
    pub top_level: u32,
    pub eta: f64,
    pub r: u32,
    pub p1: f64,
    pub p2: f64,
    pub delta: f64,
    pub tau: f64,
    pub lambda: f64,
    pub upsilon1: f64,
    /// Kernel spec: "hilbert", "zero", or "bump".
    pub kernel: String,
    /// System spec: "trivial" or "oscillatory".
    pub system: String,
    /// Amplitude of the oscillatory system (ignored for trivial).
    pub system_amplitude: f64,
    /// Size constant A of the accretive system.
    pub system_a: f64,
    /// Stand-in for the global operator norm; 0 means "estimate it".
    pub tb_proxy: f64,
    pub seed: u64,
    pub trials: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n: 1,
            l: 8,
            top_level: 0,
            eta: 1.0,
            r: 6,
            p1: 2.0,
            p2: 2.0,
            delta: 0.25,
            tau: 0.95,
            lambda: 1.5,
            upsilon1: 0.05,
            kernel: "hilbert".into(),
            system: "oscillatory".into(),
            system_amplitude: 0.05,
            system_a: 2.0,
            tb_proxy: 0.0,
            seed: 0,
            trials: 200,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut map: HashMap<String, String> = HashMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", ln + 1)));
            };
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key '{}'", k.trim())));
            }
        }
        let mut cfg = ExperimentConfig::default();
        for (k, v) in &map {
            let bad = |what: &str| Error::Config(format!("key '{k}': invalid {what} '{v}'"));
            match k.as_str() {
                "n" => cfg.n = v.parse().map_err(|_| bad("integer"))?,
                "L" | "l" => cfg.l = v.parse().map_err(|_| bad("integer"))?,
                "top_level" => cfg.top_level = v.parse().map_err(|_| bad("integer"))?,
                "eta" => cfg.eta = v.parse().map_err(|_| bad("number"))?,
                "r" => cfg.r = v.parse().map_err(|_| bad("integer"))?,
                "p1" => cfg.p1 = v.parse().map_err(|_| bad("number"))?,
                "p2" => cfg.p2 = v.parse().map_err(|_| bad("number"))?,
                "delta" => cfg.delta = v.parse().map_err(|_| bad("number"))?,
                "tau" => cfg.tau = v.parse().map_err(|_| bad("number"))?,
                "lambda" | "Lambda" => cfg.lambda = v.parse().map_err(|_| bad("number"))?,
                "upsilon1" => cfg.upsilon1 = v.parse().map_err(|_| bad("number"))?,
                "kernel" => cfg.kernel = v.clone(),
                "system" => cfg.system = v.clone(),
                "system_amplitude" => {
                    cfg.system_amplitude = v.parse().map_err(|_| bad("number"))?
                }
                "system_a" => cfg.system_a = v.parse().map_err(|_| bad("number"))?,
                "tb_proxy" => cfg.tb_proxy = v.parse().map_err(|_| bad("number"))?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad("integer"))?,
                "trials" => cfg.trials = v.parse().map_err(|_| bad("integer"))?,
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                other => return Err(Error::Config(format!("unknown key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if 1.0 / self.p1 + 1.0 / self.p2 > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "1/p1 + 1/p2 = {} exceeds 1",
                1.0 / self.p1 + 1.0 / self.p2
            )));
        }
        let cap = 4.0f64.powi(-1 - self.n as i32);
        if !(self.upsilon1 > 0.0 && self.upsilon1 < cap) {
            return Err(Error::Config(format!(
                "upsilon1 {} outside (0, {cap})",
                self.upsilon1
            )));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        match self.kernel.as_str() {
            "hilbert" | "zero" | "bump" => {}
            other => return Err(Error::Config(format!("unknown kernel '{other}'"))),
        }
        match self.system.as_str() {
            "trivial" | "oscillatory" => {}
            other => return Err(Error::Config(format!("unknown system '{other}'"))),
        }
        // Grid and corona constructors re-validate their own slices.
        self.grid_params()?;
        Ok(())
    }

    pub fn grid_params(&self) -> Result<GridParams> {
        GridParams::new(self.n, self.l, self.top_level, self.eta, self.r)
    }

    pub fn corona_params(&self, tb_proxy: f64) -> Result<CoronaParams> {
        CoronaParams::new(
            self.n,
            self.p1,
            self.p2,
            self.delta,
            self.tau,
            self.lambda,
            self.upsilon1,
            tb_proxy,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_flat_keys_with_comments() {
        let cfg = ExperimentConfig::parse_str(
            "n = 1\nL = 7   # resolution\nkernel = zero\nseed = 42\n\n# comment\n",
        )
        .unwrap();
        assert_eq!(cfg.l, 7);
        assert_eq!(cfg.kernel, "zero");
        assert_eq!(cfg.seed, 42);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::parse_str("bogus = 1").is_err());
        assert!(ExperimentConfig::parse_str("L = soup").is_err());
        assert!(ExperimentConfig::parse_str("trials = 0").is_err());
        assert!(ExperimentConfig::parse_str("p1 = 1.5\np2 = 1.5").is_err());
        assert!(ExperimentConfig::parse_str("upsilon1 = 0.3").is_err());
    }
}
