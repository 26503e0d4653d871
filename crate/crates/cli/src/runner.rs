use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use selftest::numerics::percentile_nearest_rank;

use crate::commands;
use crate::config::{params_at, CliError, RunConfig};
use crate::CommandKind;

/// Named scalar results of one seed, in a fixed order.
pub type Metrics = Vec<(String, f64)>;

/// Everything a command needs for one seed at one sweep point.
pub struct SeedRun<'a> {
    pub run: &'a RunConfig,
    pub params: &'a Value,
    pub seed: u64,
    pub dir: PathBuf,
}

impl SeedRun<'_> {
    /// The run config with this point's params and every `seed` key set to the run seed, embedded in every report.
    pub fn resolved_config(&self) -> Value {
        fn set_seeds(v: &mut Value, seed: u64) {
            match v {
                Value::Object(map) => {
                    for (k, child) in map.iter_mut() {
                        if k == "seed" {
                            *child = Value::from(seed);
                        } else {
                            set_seeds(child, seed);
                        }
                    }
                }
                Value::Array(items) => items.iter_mut().for_each(|c| set_seeds(c, seed)),
                _ => {}
            }
        }
        let mut v = serde_json::to_value(self.run).expect("run config serializes");
        let mut params = self.params.clone();
        set_seeds(&mut params, self.seed);
        v["params"] = params;
        v
    }

    pub fn write_json<T: Serialize>(&self, name: &str, body: &T) -> Result<(), CliError> {
        write_json(&self.dir.join(name), body)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

pub fn write_json<T: Serialize>(path: &Path, body: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(body)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn percentile_label(p: f64) -> String {
    if p.fract() == 0.0 {
        format!("p{}", p as u64)
    } else {
        format!("p{p}")
    }
}

struct PointSummary {
    label: String,
    metrics: Vec<(u64, Metrics)>,
}

fn write_seed_metrics(dir: &Path, rows: &[(u64, Metrics)]) -> Result<(), CliError> {
    let Some((_, first)) = rows.first() else {
        return Ok(());
    };
    if first.is_empty() {
        return Ok(());
    }
    let mut out = String::from("seed");
    for (name, _) in first {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (seed, m) in rows {
        out.push_str(&seed.to_string());
        for (_, v) in m {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(dir.join("metrics.csv"), out)?;
    Ok(())
}

/// One row per sweep point: the parameter value and nearest-rank percentiles of every metric.
fn write_sweep_csv(path: &Path, param: &str, percentiles: &[f64], points: &[PointSummary]) -> Result<(), CliError> {
    let Some(names) = points.first().and_then(|p| p.metrics.first()).map(|(_, m)| m.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>()) else {
        return Ok(());
    };
    if names.is_empty() {
        return Ok(());
    }
    let mut file = fs::File::create(path)?;
    let mut header = vec![param.to_string()];
    for n in &names {
        header.extend(percentiles.iter().map(|&p| format!("{n}_{}", percentile_label(p))));
    }
    writeln!(file, "{}", header.join(","))?;
    for point in points {
        let mut row = vec![point.label.clone()];
        for (k, _) in names.iter().enumerate() {
            let values: Vec<f64> = point.metrics.iter().map(|(_, m)| m[k].1).collect();
            for &p in percentiles {
                let v = percentile_nearest_rank(&values, p).unwrap_or(f64::NAN);
                row.push(v.to_string());
            }
        }
        writeln!(file, "{}", row.join(","))?;
    }
    Ok(())
}

/// Runs every sweep point; seeds fan out concurrently, each writing its own directory, then results merge in seed order.
pub fn execute(kind: CommandKind, run: &RunConfig, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    write_json(&out.join("config.json"), run)?;
    let points: Vec<(Option<usize>, String, PathBuf)> = match &run.sweep {
        Some(spec) => spec
            .labels
            .iter()
            .enumerate()
            .map(|(i, label)| (Some(i), label.clone(), out.join(format!("{}={label}", spec.param))))
            .collect(),
        None => vec![(None, "base".to_string(), out.to_path_buf())],
    };
    let mut summaries = Vec::new();
    for (index, label, dir) in points {
        let params = params_at(kind, &run.params, run.sweep.as_ref().zip(index))?;
        let results: Vec<Result<(u64, Metrics), CliError>> = run
            .seeds
            .par_iter()
            .map(|&seed| {
                let seed_dir = dir.join(format!("seed-{seed}"));
                create_dir(&seed_dir)?;
                let ctx = SeedRun {
                    run,
                    params: &params,
                    seed,
                    dir: seed_dir,
                };
                commands::run_seed(kind, &ctx).map(|m| (seed, m))
            })
            .collect();
        let metrics = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        write_seed_metrics(&dir, &metrics)?;
        summaries.push(PointSummary { label, metrics });
    }
    let param = run.sweep.as_ref().map(|s| s.param.as_str()).unwrap_or("point");
    write_sweep_csv(&out.join("sweep.csv"), param, &run.percentiles, &summaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let points = vec![
            PointSummary {
                label: "100".into(),
                metrics: (1..=5).map(|s| (s, vec![("err".to_string(), s as f64)])).collect(),
            },
            PointSummary {
                label: "200".into(),
                metrics: (1..=5).map(|s| (s, vec![("err".to_string(), 10.0 * s as f64)])).collect(),
            },
        ];
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&path, "n", &[10.0, 50.0, 90.0], &points).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(text, "n,err_p10,err_p50,err_p90\n100,1,3,5\n200,10,30,50\n");
        assert_eq!(percentile_label(12.5), "p12.5");
    }
}
