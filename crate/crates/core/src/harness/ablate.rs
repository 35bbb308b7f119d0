//! Fusion ablation sweep.

use std::fmt::Write as _;

use log::{info, warn};

use super::config::RunConfig;
use super::train::train;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{valid_configs, FusionConfig};
use crate::metrics::SemanticMetrics;
use crate::par::{self, Execution};
use crate::rng;

pub const ABLATION_HEADER: &str = "feature,placement,granularity,strategy,pixel_accuracy,precision,recall,f1,miou,f1_stderr";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub feature: String,
    /// `None` for the no-fusion baseline.
    pub fusion: Option<FusionConfig>,
    /// Validation metrics averaged over trials; NaN when the config failed.
    pub metrics: SemanticMetrics,
    pub f1_stderr: f64,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let (p, g, s) = match &self.fusion {
            Some(f) => (f.placement.as_str(), f.granularity.as_str(), f.strategy.as_str()),
            None => ("none", "none", "none"),
        };
        let m = &self.metrics;
        format!(
            "{},{p},{g},{s},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.feature, m.pixel_accuracy, m.precision, m.recall, m.f1, m.miou, self.f1_stderr
        )
    }
}

/// Every swept configuration in index order: the 28 valid fusion configs,
/// then the baseline at index 28.
pub fn sweep_configs() -> Vec<Option<FusionConfig>> {
    valid_configs().into_iter().map(Some).chain(std::iter::once(None)).collect()
}

/// Seed for config `k`, trial `t`.
pub fn trial_seed(base: u64, k: usize, t: usize) -> u64 {
    base ^ rng::derive(k as u64, t as u64)
}

fn nan_metrics() -> SemanticMetrics {
    SemanticMetrics {
        pixel_accuracy: f64::NAN,
        precision: f64::NAN,
        recall: f64::NAN,
        f1: f64::NAN,
        miou: f64::NAN,
    }
}

fn run_config(base: &RunConfig, data: &Dataset, k: usize, fusion: Option<FusionConfig>, trials: usize) -> AblationRow {
    let mut runs = Vec::with_capacity(trials);
    let mut error = None;
    for t in 0..trials {
        let mut config = base.clone();
        config.fusion = fusion.clone();
        config.seed = trial_seed(base.seed, k, t);
        config.out = None;
        // the sweep parallelizes across configs, so each run stays serial
        match train(&config, data, Execution::Sequential) {
            Ok(out) => runs.push(out.best_val.metrics),
            Err(e) => {
                warn!("config {k} trial {t} failed: {e}");
                error = Some(e.to_string());
                break;
            }
        }
    }
    let (metrics, f1_stderr) = if error.is_some() {
        (nan_metrics(), f64::NAN)
    } else {
        summarize(&runs)
    };
    AblationRow {
        feature: base.feature.clone(),
        fusion,
        metrics,
        f1_stderr,
        error,
    }
}

/// Mean metrics and the standard error of F1 (0 for a single trial).
fn summarize(runs: &[SemanticMetrics]) -> (SemanticMetrics, f64) {
    let n = runs.len() as f64;
    let mean = |f: fn(&SemanticMetrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let m = SemanticMetrics {
        pixel_accuracy: mean(|m| m.pixel_accuracy),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        miou: mean(|m| m.miou),
    };
    let stderr = if runs.len() < 2 {
        0.0
    } else {
        let var = runs.iter().map(|r| (r.f1 - m.f1).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    (m, stderr)
}

/// Train every swept config `trials` times and return rows sorted by F1
/// descending; failed configs sort last.
pub fn ablate(base: &RunConfig, data: &Dataset, trials: usize, exec: Execution) -> Result<Vec<AblationRow>> {
    if trials == 0 {
        return Err(Error::config("trials must be at least 1"));
    }
    base.validate()?;
    let configs: Vec<(usize, Option<FusionConfig>)> = sweep_configs().into_iter().enumerate().collect();
    info!("ablation: {} configs x {trials} trials", configs.len());
    let mut rows = par::map(exec, &configs, |(k, f)| run_config(base, data, *k, f.clone(), trials));
    rows.sort_by(|a, b| match (a.metrics.f1.is_nan(), b.metrics.f1.is_nan()) {
        (false, false) => b.metrics.f1.total_cmp(&a.metrics.f1),
        (x, y) => x.cmp(&y),
    });
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_has_baseline_last() {
        let c = sweep_configs();
        assert_eq!(c.len(), 29);
        assert!(c[28].is_none() && c[..28].iter().all(Option::is_some));
    }

    #[test]
    fn seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for k in 0..29 {
            for t in 0..3 {
                assert!(seen.insert(trial_seed(7, k, t)));
            }
        }
    }

    #[test]
    fn stderr_of_trials() {
        let m = |f1| SemanticMetrics {
            pixel_accuracy: 0.5,
            precision: 0.5,
            recall: 0.5,
            f1,
            miou: 0.5,
        };
        let (mean, se) = summarize(&[m(0.2), m(0.4), m(0.6)]);
        assert!((mean.f1 - 0.4).abs() < 1e-15);
        assert!((se - (0.04f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(summarize(&[m(0.3)]).1, 0.0);
    }
}
