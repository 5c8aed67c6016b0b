use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use o2o_core::harness::{self, Phase, Stat, Summary};
use serde::Serialize;
use walkdir::WalkDir;

use crate::config::read_json;
use crate::Failure;

const SUMMARY_FILE: &str = "summary.json";

fn find_summaries(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut found = Vec::new();
    for input in inputs {
        if input.is_file() {
            found.push(input.clone());
        } else if input.is_dir() {
            for entry in WalkDir::new(input).sort_by_file_name() {
                let entry = entry.map_err(|e| Failure::Usage(e.to_string()))?;
                if entry.file_type().is_file() && entry.file_name() == SUMMARY_FILE {
                    found.push(entry.into_path());
                }
            }
        } else {
            return Err(Failure::Usage(format!("{} does not exist", input.display())));
        }
    }
    if found.is_empty() {
        return Err(Failure::Usage(format!("no {SUMMARY_FILE} found")));
    }
    Ok(found)
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Table row. The delta column is derived from the rounded offline and
/// online means so the printed row always adds up.
#[derive(Debug, Serialize)]
struct Row {
    task: String,
    pretrain_agent: String,
    agent: String,
    regime: String,
    offline_mean: f64,
    offline_std: f64,
    online_mean: f64,
    online_std: f64,
    delta: f64,
    collapse_depth_mean: f64,
    collapse_depth_std: f64,
    seeds: usize,
}

impl Row {
    fn of(s: &Summary) -> Self {
        let (offline, online) = (round2(s.offline.mean), round2(s.online.mean));
        Row {
            task: s.task.clone(),
            pretrain_agent: s.pretrain_agent.to_string(),
            agent: s.agent.to_string(),
            regime: s.regime.name(),
            offline_mean: offline,
            offline_std: round2(s.offline.std),
            online_mean: online,
            online_std: round2(s.online.std),
            delta: round2(online - offline),
            collapse_depth_mean: round2(s.collapse_depth.mean),
            collapse_depth_std: round2(s.collapse_depth.std),
            seeds: s.seeds.len(),
        }
    }

    fn label(&self) -> String {
        format!("{}-{}-{}-{}", self.task, self.pretrain_agent, self.agent, self.regime)
    }
}

fn render(rows: &[Row]) -> String {
    let cells: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.task.clone(),
                format!("{}→{}", r.pretrain_agent, r.agent),
                r.regime.clone(),
                format!("{:.2} ± {:.2}", r.offline_mean, r.offline_std),
                format!("{:.2} ± {:.2}", r.online_mean, r.online_std),
                format!("{:+.2}", r.delta),
                format!("{:.2} ± {:.2}", r.collapse_depth_mean, r.collapse_depth_std),
            ]
        })
        .collect();
    let header = ["Task", "Agent", "Regime", "Offline", "Online", "δ", "collapse_depth"].map(String::from);
    let mut widths = header.clone().map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |row: &[String; 7]| {
        let padded: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(&header);
    out.push_str(&format!(
        "|{}|\n",
        widths.iter().map(|&w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")
    ));
    for row in &cells {
        out.push_str(&line(row));
    }
    out
}

#[derive(Debug, Serialize)]
struct CurvePoint {
    learner_step: u64,
    phase: Phase,
    mean_score: f64,
    std_score: f64,
    seeds: usize,
}

/// Seed-averaged normalized score at every evaluation of one configuration.
fn curve(summary_path: &Path, summary: &Summary) -> Result<Vec<CurvePoint>, Failure> {
    let dir = summary_path.parent().unwrap_or(Path::new("."));
    let mut points: BTreeMap<(bool, u64), Vec<f64>> = BTreeMap::new();
    for s in &summary.seeds {
        let path = dir.join(format!("seed_{}.csv", s.seed));
        let records = harness::read_metrics_csv(&path).map_err(|e| Failure::Usage(e.to_string()))?;
        for r in records {
            points
                .entry((r.phase == Phase::Finetune, r.learner_step))
                .or_default()
                .push(r.normalized_score);
        }
    }
    Ok(points
        .into_iter()
        .map(|((finetune, step), scores)| {
            let stat = Stat::of(&scores);
            CurvePoint {
                learner_step: step,
                phase: if finetune { Phase::Finetune } else { Phase::Pretrain },
                mean_score: stat.mean,
                std_score: stat.std,
                seeds: scores.len(),
            }
        })
        .collect())
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<(), Failure> {
    let fail = |e: &dyn std::fmt::Display| Failure::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(|e| fail(&e))?;
    for r in rows {
        w.serialize(r).map_err(|e| fail(&e))?;
    }
    w.flush().map_err(|e| fail(&e))
}

pub fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<(), Failure> {
    let paths = find_summaries(inputs)?;
    let mut summaries = Vec::with_capacity(paths.len());
    for p in &paths {
        summaries.push(read_json::<Summary>(p)?);
    }
    let rows: Vec<Row> = summaries.iter().map(Row::of).collect();
    print!("{}", render(&rows));

    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
        write_csv(&rows, &out.join("table.csv"))?;
        for ((path, summary), row) in paths.iter().zip(&summaries).zip(&rows) {
            let points = curve(path, summary)?;
            write_csv(&points, &out.join(format!("curve_{}.csv", row.label())))?;
        }
    }
    Ok(())
}
