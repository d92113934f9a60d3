//! Summaries rebuilt from `eval.json` files and the run logs they point to.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use aralign::trainer::{StepRecord, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::stages::{EvalReport, EVAL_FILE, METRICS_FILE};
use crate::workspace::{read_json, write_json};

/// Metric names and whether larger is better.
pub const METRICS: [(&str, bool); 8] = [
    ("fid", false),
    ("clip_score", true),
    ("ms_ssim", true),
    ("object_recall", true),
    ("position_accuracy", true),
    ("color_accuracy", true),
    ("exact_match", true),
    ("heldout_cos_final", true),
];

pub fn metric_values(r: &EvalReport) -> BTreeMap<&'static str, f64> {
    let mut m = BTreeMap::new();
    let a = r.metrics.attributes;
    let pairs = [
        ("fid", r.metrics.fid),
        ("clip_score", r.metrics.clip_score),
        ("ms_ssim", r.metrics.ms_ssim),
        ("object_recall", a.map(|a| a.object_recall)),
        ("position_accuracy", a.map(|a| a.position_accuracy)),
        ("color_accuracy", a.map(|a| a.color_accuracy)),
        ("exact_match", a.map(|a| a.exact_match)),
        ("heldout_cos_final", r.heldout_cos.last().map(|x| x.1)),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            m.insert(k, v);
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub std: f64,
    pub n: usize,
}

pub fn stat(values: &[f64]) -> Option<Stat> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Some(Stat { mean, std, n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    /// The group's config with the seed zeroed.
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub fingerprints: Vec<String>,
    pub metrics: BTreeMap<String, Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub groups: Vec<GroupSummary>,
    /// Group with the best mean per metric.
    pub best: BTreeMap<String, String>,
}

fn find_reports(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == EVAL_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Groups the reports by config, seeds pooled.
pub fn summarize(reports: &[EvalReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(CliError::Other("no eval manifests found".into()));
    }
    let mut by_group: BTreeMap<&str, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        by_group.entry(&r.group).or_default().push(r);
    }
    let mut groups = Vec::new();
    for (g, rs) in by_group {
        let mut metrics = BTreeMap::new();
        for (name, _) in METRICS {
            let vals: Vec<f64> = rs.iter().filter_map(|r| metric_values(r).get(name).copied()).collect();
            if let Some(s) = stat(&vals) {
                metrics.insert(name.to_string(), s);
            }
        }
        groups.push(GroupSummary {
            group: g.to_string(),
            config: TrainConfig { seed: 0, ..rs[0].config.clone() },
            seeds: rs.iter().map(|r| r.seed).collect(),
            fingerprints: rs.iter().map(|r| r.fingerprint.clone()).collect(),
            metrics,
        });
    }
    let mut best = BTreeMap::new();
    for (name, higher) in METRICS {
        let pick = groups
            .iter()
            .filter_map(|g| g.metrics.get(name).map(|s| (g, s.mean)))
            .filter(|(_, m)| m.is_finite())
            .reduce(|a, b| if (higher && b.1 > a.1) || (!higher && b.1 < a.1) { b } else { a });
        if let Some((g, _)) = pick {
            best.insert(name.to_string(), g.group.clone());
        }
    }
    Ok(Summary { groups, best })
}

/// Reads every `eval.json` under `dir`, writes `summary.json`, `summary.csv`
/// and per-run loss curves under `out`.
pub fn report(dir: &Path, out: &Path) -> Result<Summary> {
    let mut paths = Vec::new();
    if dir.is_dir() {
        find_reports(dir, &mut paths)?;
    }
    if paths.is_empty() {
        return Err(CliError::Other(format!("no {EVAL_FILE} manifests under {}", dir.display())));
    }
    let mut reports = Vec::new();
    let curves = out.join("curves");
    std::fs::create_dir_all(&curves)?;
    for p in &paths {
        let r: EvalReport = read_json(p)?;
        let run_dir = p.parent().unwrap_or(Path::new(".")).join(&r.run_dir);
        write_curve(&run_dir.join(METRICS_FILE), &curves.join(format!("{}.csv", r.fingerprint)))?;
        let mut w = csv::Writer::from_path(curves.join(format!("{}_heldout_cos.csv", r.fingerprint)))?;
        w.write_record(["step", "heldout_cos"])?;
        for (s, c) in &r.heldout_cos {
            w.write_record([s.to_string(), c.to_string()])?;
        }
        w.flush()?;
        reports.push(r);
    }
    let summary = summarize(&reports)?;
    write_json(&out.join("summary.json"), &summary)?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    let mut header = vec!["group".to_string(), "n".into(), "seeds".into()];
    for (name, _) in METRICS {
        header.extend([format!("{name}_mean"), format!("{name}_std"), format!("{name}_best")]);
    }
    w.write_record(&header)?;
    for g in &summary.groups {
        let seeds = g.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
        let mut rec = vec![g.group.clone(), g.seeds.len().to_string(), seeds];
        for (name, _) in METRICS {
            match g.metrics.get(name) {
                Some(s) => rec.extend([s.mean.to_string(), s.std.to_string()]),
                None => rec.extend([String::new(), String::new()]),
            }
            rec.push((summary.best.get(name) == Some(&g.group)).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(summary)
}

fn write_curve(src: &Path, dst: &Path) -> Result<()> {
    let text = std::fs::read_to_string(src).map_err(|e| CliError::Other(format!("{}: {e}", src.display())))?;
    let mut w = csv::Writer::from_path(dst)?;
    w.write_record(["step", "l_ar", "l_gva", "l_z", "mean_cos", "lr", "grad_norm"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: StepRecord = serde_json::from_str(line).map_err(|e| CliError::Other(format!("{}: {e}", src.display())))?;
        w.write_record([
            r.step.to_string(),
            r.l_ar.to_string(),
            opt(r.l_gva),
            r.l_z.to_string(),
            opt(r.mean_cos),
            r.lr.to_string(),
            r.grad_norm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
