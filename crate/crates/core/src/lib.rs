//! Stochastic delay systems in Hilbert space: spectral Galerkin state
//! simulation, first variation, anticipated adjoint equation and a numerical
//! maximum principle for open-loop controls.

pub mod absde;
pub mod config;
pub mod forward;
pub mod measures;
pub mod output;
pub mod regression;
pub mod scenarios;
pub mod smp;
pub mod spectral;
pub mod variation;

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Measure(#[from] measures::MeasureError),
    #[error(transparent)]
    Spectral(#[from] spectral::SpectralError),
    #[error(transparent)]
    Forward(#[from] forward::ForwardError),
    #[error(transparent)]
    Regression(#[from] regression::RegressionError),
    #[error(transparent)]
    Absde(#[from] absde::AbsdeError),
    #[error(transparent)]
    Smp(#[from] smp::SmpError),
    #[error("{0}")]
    Numerical(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// 2 for configuration problems, 1 for everything that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Runs the configured scenario and writes `results.json`, its CSV tables and
/// `manifest.json` into `out`. On a numerical failure a `diagnostics.json`
/// takes the place of the results. Returns the files written.
pub fn run_experiment(cfg: &config::LoadedConfig, out: &Path) -> Result<Vec<String>, Error> {
    let started = output::unix_now();
    let c = &cfg.config;
    let scenario = scenarios::find(&c.scenario)
        .ok_or_else(|| config::ConfigError::UnknownScenario(c.scenario.clone()))?;
    let hash = cfg.hash();
    let mut writer = output::ArtifactWriter::new(out)?;
    match scenario.execute(cfg) {
        Ok(result) => {
            for t in &result.tables {
                writer.write_table(t)?;
            }
            writer.write_json(
                "results.json",
                &output::Results {
                    schema_version: output::RESULTS_SCHEMA_VERSION,
                    scenario: scenario.name,
                    seed: c.seed,
                    config_hash: &hash,
                    status: "ok",
                    metrics: &result.metrics,
                },
            )?;
            Ok(writer.finish(&hash, c.seed, started)?)
        }
        Err(e) => {
            writer.write_json(
                "diagnostics.json",
                &serde_json::json!({
                    "scenario": scenario.name,
                    "seed": c.seed,
                    "config_hash": hash,
                    "status": "failed",
                    "error": e.to_string(),
                    "debug": format!("{e:?}"),
                }),
            )?;
            writer.finish(&hash, c.seed, started)?;
            Err(e)
        }
    }
}
