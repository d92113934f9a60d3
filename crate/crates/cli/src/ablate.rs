//! Grid files expand into cells, one training run plus evaluation per cell and seed.
//!
//! ```json
//! { "base": { "steps": 500 },
//!   "sweeps": [ { "name": "encoder",
//!                 "axes": { "alignment.encoder": ["cross_modal", "vision_only"] },
//!                 "set": { "alignment.aggregation": "avgpool" } } ],
//!   "seeds": [0, 1, 2] }
//! ```
//!
//! A grid without `sweeps` may give `axes` at the top level instead.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use aralign::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::stages::{eval, eval_dependencies, produce, train, EvalReport, Options};
use crate::workspace::{content_key, write_json, Keys, Kind, Workspace};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub name: String,
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<Value>>,
    /// Fixed overrides applied to every cell of this sweep.
    #[serde(default)]
    pub set: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    /// Partial train config merged over the pipeline's train config.
    #[serde(default)]
    pub base: Value,
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<Value>>,
    #[serde(default)]
    pub sweeps: Vec<Sweep>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One grid point at one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub sweep: String,
    pub assignment: Vec<(String, Value)>,
    pub seed: u64,
    pub config: TrainConfig,
}

impl Cell {
    pub fn label(&self) -> String {
        if self.assignment.is_empty() {
            return "base".into();
        }
        self.assignment.iter().map(|(p, v)| format!("{p}={}", plain(v))).collect::<Vec<_>>().join(",")
    }
}

fn plain(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Replaces the value at a dotted path, failing if any segment is not an existing field.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    for seg in path.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|m| m.get_mut(seg))
            .ok_or_else(|| CliError::Config(format!("axis path `{path}` does not name a train config field")))?;
    }
    *cur = value;
    Ok(())
}

fn merge(target: &mut Value, patch: &Value, prefix: &str) -> Result<()> {
    let Some(obj) = patch.as_object() else {
        return Err(CliError::Config("grid base must be a JSON object".into()));
    };
    for (k, v) in obj {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = target
            .as_object_mut()
            .and_then(|m| m.get_mut(k))
            .ok_or_else(|| CliError::Config(format!("grid base field `{path}` does not exist")))?;
        if v.is_object() && slot.is_object() {
            merge(slot, v, &path)?;
        } else {
            *slot = v.clone();
        }
    }
    Ok(())
}

fn product(axes: &BTreeMap<String, Vec<Value>>) -> Vec<Vec<(String, Value)>> {
    let mut out = vec![Vec::new()];
    for (path, values) in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((path.clone(), v.clone()));
                    p
                })
            })
            .collect();
    }
    out
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn sweeps(&self) -> Result<Vec<Sweep>> {
        match (self.sweeps.is_empty(), self.axes.is_empty()) {
            (false, false) => Err(CliError::Config("give either top-level axes or sweeps, not both".into())),
            (true, _) => Ok(vec![Sweep { name: "grid".into(), axes: self.axes.clone(), set: BTreeMap::new() }]),
            (false, true) => Ok(self.sweeps.clone()),
        }
    }

    /// Number of rows the grid produces: the sum over sweeps of the product of axis sizes, times the seeds.
    pub fn size(&self) -> Result<usize> {
        let per_seed: usize = self.sweeps()?.iter().map(|s| s.axes.values().map(Vec::len).product::<usize>()).sum();
        Ok(per_seed * self.seeds.len())
    }

    /// Every cell with its resolved train config; any bad path or invalid config fails here.
    pub fn expand(&self, base: &TrainConfig) -> Result<Vec<Cell>> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("grid needs at least one seed".into()));
        }
        let mut root = serde_json::to_value(base).map_err(CliError::other)?;
        if !self.base.is_null() {
            merge(&mut root, &self.base, "")?;
        }
        let mut cells = Vec::new();
        for sweep in self.sweeps()? {
            if sweep.axes.values().any(Vec::is_empty) {
                return Err(CliError::Config(format!("sweep `{}` has an empty axis", sweep.name)));
            }
            for assignment in product(&sweep.axes) {
                for &seed in &self.seeds {
                    let mut v = root.clone();
                    for (p, x) in &sweep.set {
                        set_path(&mut v, p, x.clone())?;
                    }
                    for (p, x) in &assignment {
                        set_path(&mut v, p, x.clone())?;
                    }
                    set_path(&mut v, "seed", seed.into())?;
                    let config: TrainConfig = serde_json::from_value(v)
                        .map_err(|e| CliError::Config(format!("sweep `{}` cell {assignment:?}: {e}", sweep.name)))?;
                    config.validate().map_err(|e| CliError::Config(format!("sweep `{}` cell {assignment:?}: {e}", sweep.name)))?;
                    cells.push(Cell { sweep: sweep.name.clone(), assignment: assignment.clone(), seed, config });
                }
            }
        }
        Ok(cells)
    }
}

/// One CSV/JSON row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sweep: String,
    pub cell: String,
    pub seed: u64,
    pub fingerprint: String,
    pub group: String,
    pub run_key: String,
    pub status: String,
    pub error: Option<String>,
    pub fid: Option<f64>,
    pub clip_score: Option<f64>,
    pub ms_ssim: Option<f64>,
    pub object_recall: Option<f64>,
    pub position_accuracy: Option<f64>,
    pub color_accuracy: Option<f64>,
    pub exact_match: Option<f64>,
    pub heldout_cos_start: Option<f64>,
    pub heldout_cos_final: Option<f64>,
}

impl AblationRow {
    fn new(cell: &Cell, run_key: &str, outcome: &std::result::Result<EvalReport, String>) -> Self {
        let mut row = AblationRow {
            sweep: cell.sweep.clone(),
            cell: cell.label(),
            seed: cell.seed,
            fingerprint: cell.config.fingerprint(),
            group: crate::stages::group_fingerprint(&cell.config),
            run_key: run_key.to_string(),
            ..Default::default()
        };
        match outcome {
            Ok(r) => {
                let a = r.metrics.attributes.unwrap_or_default();
                row.status = "ok".into();
                row.fid = r.metrics.fid;
                row.clip_score = r.metrics.clip_score;
                row.ms_ssim = r.metrics.ms_ssim;
                row.object_recall = Some(a.object_recall);
                row.position_accuracy = Some(a.position_accuracy);
                row.color_accuracy = Some(a.color_accuracy);
                row.exact_match = Some(a.exact_match);
                row.heldout_cos_start = r.heldout_cos.first().map(|x| x.1);
                row.heldout_cos_final = r.heldout_cos.last().map(|x| x.1);
            }
            Err(e) => {
                row.status = "failed".into();
                row.error = Some(e.clone());
            }
        }
        row
    }
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub out_dir: PathBuf,
    pub unique_runs: usize,
}

impl AblationOutcome {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.status != "ok").count()
    }
}

/// Expands, validates and runs `grid`, writing `ablation.csv` and `ablation.json` to `out`.
pub fn ablate(
    ws: &Workspace,
    pipeline: &PipelineConfig,
    grid: &AblationGrid,
    out: Option<&Path>,
    parallel: usize,
    o: &Options,
) -> Result<AblationOutcome> {
    let cells = grid.expand(&pipeline.train)?;
    let configs: Vec<PipelineConfig> = cells.iter().map(|c| PipelineConfig { train: c.config.clone(), ..pipeline.clone() }).collect();
    for p in &configs {
        p.validate()?;
    }
    let keys: Vec<Keys> = configs.iter().map(Keys::new).collect();
    let mut unique: Vec<usize> = Vec::new();
    let mut first: HashMap<&str, usize> = HashMap::new();
    for (i, k) in keys.iter().enumerate() {
        first.entry(&k.run).or_insert_with(|| {
            unique.push(i);
            i
        });
    }
    o.note(format!("grid: {} rows, {} unique runs", cells.len(), unique.len()));

    // shared upstream artifacts first, each produced once
    let mut done: Vec<(Kind, String)> = Vec::new();
    for &i in &unique {
        for kind in eval_dependencies(&configs[i]) {
            if kind == Kind::Run {
                continue;
            }
            let key = keys[i].get(kind).to_string();
            if !done.contains(&(kind, key.clone())) {
                produce(ws, &configs[i], kind, o)?;
                done.push((kind, key));
            }
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<HashMap<usize, std::result::Result<EvalReport, String>>> = Mutex::new(HashMap::new());
    std::thread::scope(|s| {
        for _ in 0..parallel.max(1).min(unique.len().max(1)) {
            s.spawn(|| loop {
                let n = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = unique.get(n) else { break };
                let r = train(ws, &configs[i], o).and_then(|_| eval(ws, &configs[i], o)).map_err(|e| e.to_string());
                if let Err(e) = &r {
                    o.note(format!("cell {} failed: {e}", cells[i].label()));
                }
                results.lock().expect("no worker panics while holding the lock").insert(i, r);
            });
        }
    });
    let results = results.into_inner().expect("workers joined");
    let rows: Vec<AblationRow> = cells
        .iter()
        .zip(&keys)
        .map(|(cell, k)| AblationRow::new(cell, &k.run, &results[&first[k.run.as_str()]]))
        .collect();

    let out_dir = match out {
        Some(p) => p.to_path_buf(),
        None => ws.root.join("ablations").join(content_key(grid)),
    };
    std::fs::create_dir_all(&out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("ablation.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(&out_dir.join("ablation.json"), &rows)?;
    write_json(&out_dir.join("cells.json"), &cells)?;
    Ok(AblationOutcome { rows, out_dir, unique_runs: unique.len() })
}
