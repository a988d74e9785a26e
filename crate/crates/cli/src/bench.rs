//! Bundled desk-scale benchmark presets.
//!
//! All presets share one synthetic task (10 classes, 20 inputs, 200 samples
//! per class, 20 clients, K = 16, 150 rounds, anchor EMA decay 0.99) and
//! differ in the variants they compare.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use fedsa_core::fed::{self, Algorithm, Execution, RoundMetrics, RunConfig};
use rayon::prelude::*;

use crate::metrics::{self, format_sig9, MetricsRow};

pub const BENCH_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Homogeneous models, label skew only.
    Statistical,
    /// Four extractor architectures.
    ModelHet,
    /// Component ablation on the model-heterogeneous task.
    Ablation,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Self::Statistical, Self::ModelHet, Self::Ablation];

    pub fn name(self) -> &'static str {
        match self {
            Self::Statistical => "statistical",
            Self::ModelHet => "model-het",
            Self::Ablation => "ablation",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset `{s}` (expected statistical, model-het or ablation)"))
    }
}

/// The shared desk-scale task.
pub fn desk_config() -> RunConfig {
    RunConfig {
        classes: 10,
        input_dim: 20,
        samples_per_class: 200,
        clients: 20,
        rho: 1.0,
        feature_dim: 16,
        rounds: 150,
        alpha: 0.99,
        beta: 0.1,
        ..RunConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub config: RunConfig,
}

pub fn variants(preset: Preset) -> Vec<Variant> {
    let with = |algorithm: Algorithm, base: &RunConfig| RunConfig {
        algorithm,
        ..base.clone()
    };
    match preset {
        Preset::Statistical | Preset::ModelHet => {
            let base = if preset == Preset::Statistical {
                RunConfig {
                    zoo_size: 1,
                    lambda2: 0.01,
                    ..desk_config()
                }
            } else {
                RunConfig {
                    zoo_size: 4,
                    lambda2: 1.0,
                    ..desk_config()
                }
            };
            vec![
                Variant {
                    name: "fedsa",
                    config: with(Algorithm::FedSA, &base),
                },
                Variant {
                    name: "fedproto",
                    config: with(Algorithm::FedProto, &base),
                },
                Variant {
                    name: "fedtgp",
                    config: with(Algorithm::FedTGP, &base),
                },
                Variant {
                    name: "local_only",
                    config: with(Algorithm::LocalOnly, &base),
                },
            ]
        }
        Preset::Ablation => {
            let base = RunConfig {
                zoo_size: 4,
                lambda2: 1.0,
                ..desk_config()
            };
            vec![
                Variant {
                    name: "fedsa",
                    config: base.clone(),
                },
                Variant {
                    name: "fedsa-no-er",
                    config: RunConfig {
                        embedding_projection: false,
                        ..base.clone()
                    },
                },
                Variant {
                    name: "fedsa-no-mcl",
                    config: RunConfig {
                        mcl: false,
                        ..base.clone()
                    },
                },
                Variant {
                    name: "fedsa-no-cc",
                    config: RunConfig {
                        cc: false,
                        ..base.clone()
                    },
                },
                Variant {
                    name: "fedproto",
                    config: with(Algorithm::FedProto, &base),
                },
            ]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub name: &'static str,
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    /// Final-round mean client accuracy per seed.
    pub final_accuracy: Vec<f64>,
    /// Final-round mean pairwise distance of the broadcast vectors per seed.
    pub final_proto_dist: Vec<f64>,
    pub history: Vec<Vec<RoundMetrics>>,
}

impl VariantResult {
    pub fn mean_accuracy(&self) -> f64 {
        mean(&self.final_accuracy)
    }

    pub fn std_accuracy(&self) -> f64 {
        std_dev(&self.final_accuracy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSummary {
    pub preset: Preset,
    pub variants: Vec<VariantResult>,
}

impl BenchSummary {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// CSV with one row per variant. Contains no timings, so reruns are
    /// byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("preset,variant,algorithm,seeds,mean_final_accuracy,std_final_accuracy,mean_final_proto_dist\n");
        for v in &self.variants {
            let seeds: Vec<String> = v.seeds.iter().map(u64::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.preset,
                v.name,
                v.algorithm,
                seeds.join(" "),
                format_sig9(v.mean_accuracy()),
                format_sig9(v.std_accuracy()),
                format_sig9(mean(&v.final_proto_dist)),
            ));
        }
        out
    }

    /// Human-readable table of mean ± std final accuracy.
    pub fn render(&self) -> String {
        let mut out = format!("preset {} ({} seeds)\n", self.preset, self.variants.first().map_or(0, |v| v.seeds.len()));
        for v in &self.variants {
            out.push_str(&format!(
                "  {:<14} {:>6.2} ± {:>5.2} %\n",
                v.name,
                100.0 * v.mean_accuracy(),
                100.0 * v.std_accuracy()
            ));
        }
        out
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation; 0 for fewer than two values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Runs every variant of `preset` for every seed. Runs are independent and
/// may execute concurrently; results are assembled in variant and seed order.
pub fn run_bench(preset: Preset, seeds: &[u64], execution: Execution) -> Result<BenchSummary> {
    let variants = variants(preset);
    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let run = |&(v, seed): &(usize, u64)| -> Result<Vec<RoundMetrics>> {
        let config = RunConfig {
            seed,
            ..variants[v].config.clone()
        };
        fed::run_experiment(&config, Execution::Serial, &mut ())
            .with_context(|| format!("{} variant `{}`, seed {seed}", preset, variants[v].name))
    };
    let results: Vec<Result<Vec<RoundMetrics>>> = match execution {
        Execution::Parallel => jobs.par_iter().map(run).collect(),
        Execution::Serial => jobs.iter().map(run).collect(),
    };
    let mut results = results.into_iter();
    let mut out = Vec::with_capacity(variants.len());
    for v in &variants {
        let mut history = Vec::with_capacity(seeds.len());
        for _ in seeds {
            history.push(results.next().expect("one result per job")?);
        }
        let last = |h: &Vec<RoundMetrics>| h.last().cloned();
        out.push(VariantResult {
            name: v.name,
            algorithm: v.config.algorithm,
            seeds: seeds.to_vec(),
            final_accuracy: history.iter().map(|h| last(h).map_or(0.0, |m| m.mean_accuracy)).collect(),
            final_proto_dist: history
                .iter()
                .map(|h| last(h).map_or(0.0, |m| m.global_proto_mean_pairwise_dist))
                .collect(),
            history,
        });
    }
    Ok(BenchSummary { preset, variants: out })
}

/// Writes `bench-<preset>.csv` and per-variant metrics files under `dir`.
pub fn write_bench(summary: &BenchSummary, dir: &Path) -> Result<()> {
    let sub = dir.join(format!("bench-{}", summary.preset));
    fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
    for v in &summary.variants {
        let rows: Vec<MetricsRow> = v
            .seeds
            .iter()
            .zip(&v.history)
            .flat_map(|(&seed, h)| h.iter().map(move |m| MetricsRow::new(seed, m)))
            .collect();
        let path = sub.join(format!("{}.csv", v.name));
        fs::write(&path, metrics::to_string(&rows)?).with_context(|| format!("writing {}", path.display()))?;
    }
    let path = dir.join(format!("bench-{}.csv", summary.preset));
    fs::write(&path, summary.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
