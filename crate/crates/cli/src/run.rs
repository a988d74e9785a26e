//! `run` and `gradcheck` subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fedsa_core::fed::{self, BoxError, Envelope, Execution, Observer, RoundMetrics};
use fedsa_core::gradcheck::{self, GradcheckOptions, TOLERANCE};

use crate::config::{self, ConfigFile};
use crate::metrics::{MetricsRow, MetricsWriter};

/// Environment variable naming the directory for outputs without an explicit path.
pub const OUTPUT_DIR_ENV: &str = "FEDSA_OUTPUT_DIR";

pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces the config's seed list with this single seed.
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub execution: Execution,
    /// Directory for JSON-lines message logs, one file per sweep point and seed.
    pub replay_dir: Option<PathBuf>,
}

fn metrics_path(config_path: &Path, file: &ConfigFile, opts: &RunOptions) -> PathBuf {
    opts.output.clone().or_else(|| file.output_path.clone()).unwrap_or_else(|| {
        let stem = config_path.file_stem().map_or_else(|| "metrics".into(), |s| s.to_string_lossy().into_owned());
        default_output_dir().join(format!("{stem}.csv"))
    })
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "=.-_,".contains(c) { c } else { '_' })
        .collect()
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let name = match path.extension() {
        Some(ext) => format!("{stem}-{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{suffix}"),
    };
    path.with_file_name(name)
}

struct FileObserver<'a, W: Write> {
    seed: u64,
    metrics: &'a mut MetricsWriter<W>,
    replay: Option<BufWriter<File>>,
}

impl<W: Write> Observer for FileObserver<'_, W> {
    fn message(&mut self, envelope: &Envelope) -> Result<(), BoxError> {
        if let Some(r) = self.replay.as_mut() {
            writeln!(r, "{}", envelope.to_json()?)?;
        }
        Ok(())
    }

    fn round(&mut self, m: &RoundMetrics) -> Result<(), BoxError> {
        self.metrics.write(&MetricsRow::new(self.seed, m))?;
        if let Some(r) = self.replay.as_mut() {
            r.flush()?;
        }
        log::info!("seed {} round {}: mean accuracy {:.4}", self.seed, m.round, m.mean_accuracy);
        Ok(())
    }
}

/// Runs every sweep point for every seed and returns the metrics files written.
///
/// Rows are flushed as rounds complete, so a failing run leaves the rounds
/// before the failure on disk.
pub fn cmd_run(config_path: &Path, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let file = config::parse_config(config_path, &opts.overrides)?;
    let seeds = opts.seed.map_or_else(|| file.seeds.clone(), |s| vec![s]);
    let base = metrics_path(config_path, &file, opts);
    let mut written = Vec::new();
    for point in &file.points {
        let path = match &point.label {
            Some(label) => with_suffix(&base, &sanitize(label)),
            None => base.clone(),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let out = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut writer = MetricsWriter::new(BufWriter::new(out))?;
        for &seed in &seeds {
            let replay = match &opts.replay_dir {
                Some(dir) => {
                    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                    let name = match &point.label {
                        Some(l) => format!("replay-{}-seed{seed}.jsonl", sanitize(l)),
                        None => format!("replay-seed{seed}.jsonl"),
                    };
                    let p = dir.join(name);
                    Some(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
                }
                None => None,
            };
            let config = fed::RunConfig {
                seed,
                ..point.run.clone()
            };
            let mut observer = FileObserver {
                seed,
                metrics: &mut writer,
                replay,
            };
            let outcome = fed::run_experiment(&config, opts.execution, &mut observer);
            if let Some(mut r) = observer.replay.take() {
                r.flush()?;
            }
            outcome.with_context(|| format!("run with seed {seed} aborted; completed rounds are in {}", path.display()))?;
        }
        writer.into_inner()?.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Prints one line per loss term and returns whether all passed.
pub fn cmd_gradcheck(options: GradcheckOptions, out: &mut dyn Write) -> Result<bool> {
    let report = gradcheck::run_gradcheck(options)?;
    for t in &report.terms {
        writeln!(
            out,
            "{:<6} max relative error {:.3e} over {} instances  {}",
            t.term,
            t.max_rel_error,
            t.instances,
            if t.passed() { "ok" } else { "FAIL" }
        )?;
    }
    writeln!(
        out,
        "gradcheck {} (tolerance {TOLERANCE:e})",
        if report.passed() { "passed" } else { "failed" }
    )?;
    Ok(report.passed())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_naming() {
        assert_eq!(with_suffix(Path::new("out/m.csv"), "a=1"), PathBuf::from("out/m-a=1.csv"));
        assert_eq!(with_suffix(Path::new("m"), "x"), PathBuf::from("m-x"));
        assert_eq!(sanitize("algorithm=fedsa,lambda2=1.0"), "algorithm=fedsa,lambda2=1.0");
        assert_eq!(sanitize("path=a/b c"), "path=a_b_c");
    }
}
