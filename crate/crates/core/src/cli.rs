//! Command-line entry points: gradient checks, single runs, sweeps,
//! and ablations. One declarative JSON config document drives
//! everything; results accumulate in append-only CSV tables.

use crate::backbone::{
    build_variant, save_checkpoint, BlockConfig, ModelSpec, Placement, Variant,
};
use crate::error::{Error, Result};
use crate::inspect::export_trace;
use crate::memory::{CoordHeads, MemoryConfig, PhysMode, TraceLevel, WriteMode};
use crate::tensor::grad_check;
use crate::toys::{gen_batch, TaskSpec, ToySpec};
use crate::trainer::{answer_loss, train_run, RunRecord, TrainConfig};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

/// The full declarative experiment document. Unknown keys are
/// rejected; every sub-config validates before any compute.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub d: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    #[serde(default = "default_mlp_mult")]
    pub mlp_mult: f64,
    #[serde(default = "default_n_slots")]
    pub n_slots: usize,
    #[serde(default)]
    pub memory: Option<MemoryConfig>,
    #[serde(default = "default_placement")]
    pub placement: Placement,
    pub toy: TaskSpec,
    pub train: TrainConfig,
    pub model_seed: u64,
    #[serde(default)]
    pub data_seed: u64,
}

fn default_mlp_mult() -> f64 {
    4.0
}
fn default_n_slots() -> usize {
    8
}
fn default_placement() -> Placement {
    Placement::AfterAttn
}

/// Default memory block at the toy operating point.
pub fn default_memory(d: usize) -> MemoryConfig {
    MemoryConfig {
        channels: 16,
        grid: (4, 4, 4),
        chunk_size: 1,
        token_dim: d,
        sigma_scale: 0.5,
        gamma_init: 0.0,
        eps_mask: 1e-6,
        sigma_floor: 1e-4,
        write_mode: WriteMode::Gaussian,
        coord_heads: CoordHeads::Shared,
        phys_mode: PhysMode::Factorized,
        dropout_p: 0.0,
    }
}

impl ExperimentConfig {
    /// Resolve into the concrete model/data/train specs, filling the
    /// memory default where a variant needs one.
    pub fn resolve(&self) -> Result<(ModelSpec, ToySpec, TrainConfig)> {
        let memory = match (&self.memory, self.variant) {
            (Some(m), _) => Some(m.clone()),
            (None, Variant::Tensor | Variant::BaseWide) => Some(default_memory(self.d)),
            (None, _) => None,
        };
        let model = ModelSpec {
            block: BlockConfig {
                d: self.d,
                n_heads: self.n_heads,
                mlp_mult: self.mlp_mult,
                n_layers: self.n_layers,
                variant: self.variant,
                n_slots: self.n_slots,
                memory,
                causal: true,
                frame_size: self.toy.frame_size(),
                placement: self.placement,
            },
            input: self.toy.input_kind(),
            n_classes: self.toy.n_classes(),
            max_len: self.toy.seq_len(),
        };
        model.validate()?;
        let toy = ToySpec {
            task: self.toy.clone(),
            batch_size: self.train.batch_size,
            seed: self.data_seed,
        };
        toy.validate()?;
        self.train.validate()?;
        Ok((model, toy, self.train.clone()))
    }

    /// Stable hash of the resolved config document.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let out = h.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Short human-readable axis descriptor for result rows.
    pub fn axis(&self) -> String {
        match self.toy {
            TaskSpec::Occlusion { l, .. } => format!("l={l}"),
            TaskSpec::MapBuilding { t } => format!("t={t}"),
            TaskSpec::CoordBinding { w, sigma_noise } => format!("w={w} sigma={sigma_noise}"),
            TaskSpec::NoHarm { seq_len, .. } => format!("seq={seq_len}"),
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Results table
// ---------------------------------------------------------------------------

pub const RESULTS_HEADER: &str =
    "config_hash,task,variant,axis,seed,best_accuracy,best_step,steps_run,mean_gate,status";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub config_hash: String,
    pub task: String,
    pub variant: String,
    pub axis: String,
    pub seed: u64,
    pub best_accuracy: f64,
    pub best_step: usize,
    pub steps_run: usize,
    pub mean_gate: f64,
    pub status: String,
}

impl ResultRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{},{},{:.6},{}",
            self.config_hash,
            self.task,
            self.variant,
            self.axis,
            self.seed,
            self.best_accuracy,
            self.best_step,
            self.steps_run,
            self.mean_gate,
            self.status
        )
    }

    fn parse(line: &str) -> Option<ResultRow> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return None;
        }
        Some(ResultRow {
            config_hash: f[0].to_string(),
            task: f[1].to_string(),
            variant: f[2].to_string(),
            axis: f[3].to_string(),
            seed: f[4].parse().ok()?,
            best_accuracy: f[5].parse().ok()?,
            best_step: f[6].parse().ok()?,
            steps_run: f[7].parse().ok()?,
            mean_gate: f[8].parse().ok()?,
            status: f[9].to_string(),
        })
    }
}

static SINK_LOCK: Mutex<()> = Mutex::new(());

/// Crash-safe append: rewrite the whole table to a temp file in the
/// same directory, then rename over the original.
pub fn append_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let _guard = SINK_LOCK.lock().unwrap();
    let mut content = match std::fs::read_to_string(path) {
        Ok(c) => c,
        Err(_) => format!("{RESULTS_HEADER}\n"),
    };
    for r in rows {
        content.push_str(&r.to_csv());
        content.push('\n');
    }
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, content)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Vec<ResultRow> {
    std::fs::read_to_string(path)
        .map(|c| c.lines().skip(1).filter_map(ResultRow::parse).collect())
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Single run
// ---------------------------------------------------------------------------

fn record_to_row(cfg: &ExperimentConfig, rec: &RunRecord) -> ResultRow {
    let gates = rec.points.last().map(|p| p.gates.clone()).unwrap_or_default();
    let mean_gate = if gates.is_empty() {
        f64::NAN
    } else {
        gates.iter().sum::<f64>() / gates.len() as f64
    };
    ResultRow {
        config_hash: cfg.hash(),
        task: cfg.toy.name().to_string(),
        variant: cfg.variant.name().to_string(),
        axis: cfg.axis(),
        seed: cfg.model_seed,
        best_accuracy: rec.best_accuracy,
        best_step: rec.best_step,
        steps_run: rec.steps_run,
        mean_gate,
        status: match &rec.diverged {
            None => "ok".to_string(),
            Some(msg) => format!("diverged:{}", msg.replace(',', ";")),
        },
    }
}

/// Train one cell and return its summary row (also written to
/// `out/run.jsonl`, `out/model.ckpt`, and optionally `out/trace/`).
pub fn run_cell(cfg: &ExperimentConfig, out: Option<&Path>, trace: bool) -> Result<ResultRow> {
    let (model_spec, toy_spec, train_cfg) = cfg.resolve()?;
    let (model, store) = build_variant(&model_spec, cfg.model_seed)?;
    let rec = train_run(&model, &store, &toy_spec, &train_cfg)?;
    let row = record_to_row(cfg, &rec);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        rec.write_jsonl(&dir.join("run.jsonl"))?;
        let echo = serde_json::to_string(cfg).map_err(|e| Error::Format(e.to_string()))?;
        save_checkpoint(&dir.join("model.ckpt"), &store, &echo)?;
        if trace {
            let mut eval_spec = toy_spec.clone();
            eval_spec.batch_size = 1;
            let batch = gen_batch(&eval_spec, 0)?;
            let (_, traces) = crate::tensor::with_no_grad(|| {
                model.forward_traced(&batch.tokens, None, TraceLevel::Volumes)
            })?;
            for (layer, t) in traces.iter().enumerate() {
                export_trace(t, &echo, &dir.join(format!("trace/layer{layer}")))?;
            }
        }
    }
    Ok(row)
}

pub fn cmd_run(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    trace: bool,
) -> Result<ResultRow> {
    let mut cfg = load_config(config_path)?;
    if let Some(s) = seed {
        cfg.model_seed = s;
        cfg.data_seed = s;
        cfg.train.seed = s;
    }
    let row = run_cell(&cfg, Some(out), trace)?;
    append_rows(&out.join("results.csv"), std::slice::from_ref(&row))?;
    println!("{RESULTS_HEADER}");
    println!("{}", row.to_csv());
    if row.status != "ok" {
        return Err(Error::Numeric(format!("run did not complete: {}", row.status)));
    }
    Ok(row)
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// The smallest full tensor-variant configuration: B=1, N=4, K=2,
/// C=4, 4³ grid.
pub fn gradcheck_config() -> ExperimentConfig {
    let mut mem = default_memory(8);
    mem.channels = 4;
    mem.chunk_size = 2;
    ExperimentConfig {
        variant: Variant::Tensor,
        d: 8,
        n_heads: 2,
        n_layers: 1,
        mlp_mult: 2.0,
        n_slots: 0,
        memory: Some(mem),
        placement: Placement::AfterAttn,
        toy: TaskSpec::NoHarm { seq_len: 4, shift: 1 },
        train: TrainConfig {
            lr_peak: 1e-3,
            warmup_steps: 1,
            total_steps: 2,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            weight_decay: 0.0,
            grad_clip_norm: 0.0,
            early_stop_patience: 1,
            eval_every: 1,
            eval_batches: 1,
            stop_at_accuracy: None,
            seed: 0,
        },
        model_seed: 0,
        data_seed: 0,
    }
}

/// Full-model gradient check against central differences. Returns the
/// worst relative error over every parameter scalar.
pub fn cmd_gradcheck(config: Option<&Path>, tol: f64) -> Result<f64> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => gradcheck_config(),
    };
    let (model_spec, toy_spec, _) = cfg.resolve()?;
    let mut small = toy_spec.clone();
    small.batch_size = 1;
    let batch = gen_batch(&small, 0)?;
    let (model, store) = build_variant(&model_spec, cfg.model_seed)?;
    let report = grad_check(
        &store,
        || {
            let logits = model.forward(&batch.tokens, None)?;
            // scale keeps FD roundoff below the relative-error floor
            Ok(answer_loss(&logits, &batch)?.scale(1e-3))
        },
        3e-5,
    )?;
    for (name, err) in &report.per_param {
        println!("{name}: {err:.3e}");
    }
    println!("worst: {:.3e} (tolerance {tol:.1e})", report.worst);
    if report.worst >= tol {
        let (name, err) = report
            .per_param
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        return Err(Error::Numeric(format!(
            "gradient check failed: {name} relative error {err:.3e} ≥ {tol:.1e}"
        )));
    }
    Ok(report.worst)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub l: Option<Vec<usize>>,
    #[serde(default)]
    pub t: Option<Vec<usize>>,
    #[serde(default)]
    pub w: Option<Vec<usize>>,
    #[serde(default)]
    pub sigma_noise: Option<Vec<f64>>,
    #[serde(default)]
    pub seq_len: Option<Vec<usize>>,
}

impl SweepSpec {
    /// Cartesian product of variants × axis values × seeds.
    pub fn cells(&self) -> Result<Vec<ExperimentConfig>> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs variants and seeds".into()));
        }
        let tasks: Vec<TaskSpec> = match (&self.base.toy, &self.l, &self.t, &self.w, &self.sigma_noise, &self.seq_len) {
            (TaskSpec::Occlusion { frames, .. }, Some(ls), None, None, None, None) => ls
                .iter()
                .map(|&l| TaskSpec::Occlusion { l, frames: *frames })
                .collect(),
            (TaskSpec::MapBuilding { .. }, None, Some(ts), None, None, None) => {
                ts.iter().map(|&t| TaskSpec::MapBuilding { t }).collect()
            }
            (TaskSpec::CoordBinding { w, sigma_noise }, None, None, ws, ss, None) => {
                let ws = ws.clone().unwrap_or_else(|| vec![*w]);
                let ss = ss.clone().unwrap_or_else(|| vec![*sigma_noise]);
                ws.iter()
                    .flat_map(|&w| {
                        ss.iter().map(move |&s| TaskSpec::CoordBinding {
                            w,
                            sigma_noise: s,
                        })
                    })
                    .collect()
            }
            (TaskSpec::NoHarm { shift, .. }, None, None, None, None, Some(seqs)) => seqs
                .iter()
                .map(|&seq_len| TaskSpec::NoHarm { seq_len, shift: *shift })
                .collect(),
            (_, None, None, None, None, None) => vec![self.base.toy.clone()],
            _ => {
                return Err(Error::Config(
                    "sweep axes do not match the base task".into(),
                ))
            }
        };
        let mut cells = Vec::new();
        for task in &tasks {
            for &variant in &self.variants {
                for &seed in &self.seeds {
                    let mut c = self.base.clone();
                    c.toy = task.clone();
                    c.variant = variant;
                    c.model_seed = seed;
                    c.data_seed = seed;
                    c.train.seed = seed;
                    cells.push(c);
                }
            }
        }
        Ok(cells)
    }
}

/// Execute cells (skipping ones already recorded as ok in the results
/// table), appending one row per cell. `jobs` > 1 runs cells on worker
/// threads; each worker owns its model end to end.
pub fn run_cells(cells: Vec<ExperimentConfig>, results: &Path, jobs: usize) -> Result<()> {
    let done: std::collections::HashSet<(String, u64)> = read_rows(results)
        .into_iter()
        .filter(|r| r.status == "ok")
        .map(|r| (r.config_hash, r.seed))
        .collect();
    let pending: Vec<ExperimentConfig> = cells
        .into_iter()
        .filter(|c| !done.contains(&(c.hash(), c.model_seed)))
        .collect();
    let queue = Mutex::new(pending.into_iter().collect::<std::collections::VecDeque<_>>());
    let worker = |queue: &Mutex<std::collections::VecDeque<ExperimentConfig>>| loop {
        let Some(cfg) = queue.lock().unwrap().pop_front() else {
            break;
        };
        let row = match run_cell(&cfg, None, false) {
            Ok(row) => row,
            Err(e) => ResultRow {
                config_hash: cfg.hash(),
                task: cfg.toy.name().to_string(),
                variant: cfg.variant.name().to_string(),
                axis: cfg.axis(),
                seed: cfg.model_seed,
                best_accuracy: f64::NAN,
                best_step: 0,
                steps_run: 0,
                mean_gate: f64::NAN,
                status: format!("error:{}", e.to_string().replace(',', ";")),
            },
        };
        let _ = append_rows(results, std::slice::from_ref(&row));
        println!("{}", row.to_csv());
    };
    if jobs <= 1 {
        worker(&queue);
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(|| worker(&queue));
            }
        });
    }
    Ok(())
}

/// Pivot the results of one task: rows = axis value, columns = variant
/// (mean best accuracy over seeds, ok rows only).
pub fn pivot_table(rows: &[ResultRow], task: &str, variants: &[Variant]) -> String {
    let mut axes: Vec<String> = Vec::new();
    for r in rows.iter().filter(|r| r.task == task && r.status == "ok") {
        if !axes.contains(&r.axis) {
            axes.push(r.axis.clone());
        }
    }
    let mut out = String::from("axis");
    for v in variants {
        out.push(',');
        out.push_str(v.name());
    }
    out.push('\n');
    for axis in &axes {
        out.push_str(axis);
        for v in variants {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| {
                    r.task == task && r.status == "ok" && &r.axis == axis && r.variant == v.name()
                })
                .map(|r| r.best_accuracy)
                .collect();
            if accs.is_empty() {
                out.push_str(",-");
            } else {
                out.push_str(&format!(
                    ",{:.4}",
                    accs.iter().sum::<f64>() / accs.len() as f64
                ));
            }
        }
        out.push('\n');
    }
    out
}

pub fn cmd_sweep(spec_path: &Path, out: &Path, jobs: usize) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)?;
    let spec: SweepSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
    let cells = spec.cells()?;
    std::fs::create_dir_all(out)?;
    let results = out.join("results.csv");
    run_cells(cells, &results, jobs)?;
    let rows = read_rows(&results);
    let task = spec.base.toy.name();
    std::fs::write(
        out.join(format!("pivot_{task}.csv")),
        pivot_table(&rows, task, &spec.variants),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

/// The paper's five ablation axes at the fixed binding operating point
/// (W=20, σ=0.05): labeled config modifications of the default tensor
/// cell.
pub fn ablation_cells(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut base = base.clone();
    base.variant = Variant::Tensor;
    base.toy = TaskSpec::CoordBinding { w: 20, sigma_noise: 0.05 };
    let mem = base.memory.clone().unwrap_or_else(|| default_memory(base.d));
    base.memory = Some(mem.clone());
    let with = |label: &str, f: &dyn Fn(&mut MemoryConfig)| {
        let mut c = base.clone();
        let m = c.memory.as_mut().unwrap();
        f(m);
        (label.to_string(), c)
    };
    vec![
        ("default".to_string(), base.clone()),
        with("hard_write", &|m| m.write_mode = WriteMode::HardNearest),
        with("separate_heads", &|m| m.coord_heads = CoordHeads::Separate),
        with("pointwise_only", &|m| m.phys_mode = PhysMode::PointwiseOnly),
        with("grid6", &|m| m.grid = (6, 6, 6)),
        with("grid8", &|m| m.grid = (8, 8, 8)),
        with("chunk2", &|m| m.chunk_size = 2),
        with("chunk4", &|m| m.chunk_size = 4),
    ]
}

pub fn cmd_ablate(config: Option<&Path>, out: &Path, jobs: usize, seeds: &[u64]) -> Result<()> {
    let base = match config {
        Some(p) => load_config(p)?,
        None => default_ablate_base(),
    };
    let mut cells = Vec::new();
    for (label, cfg) in ablation_cells(&base) {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.model_seed = seed;
            c.data_seed = seed;
            c.train.seed = seed;
            cells.push((label.clone(), c));
        }
    }
    std::fs::create_dir_all(out)?;
    let results = out.join("ablations.csv");
    let labeled: Vec<ExperimentConfig> = cells.iter().map(|(_, c)| c.clone()).collect();
    // map hash → label for the final table
    let labels: std::collections::HashMap<String, String> = cells
        .iter()
        .map(|(l, c)| (c.hash(), l.clone()))
        .collect();
    run_cells(labeled, &results, jobs)?;
    let rows = read_rows(&results);
    let mut table = String::from("ablation,seed,best_accuracy,status\n");
    for r in &rows {
        let label = labels.get(&r.config_hash).cloned().unwrap_or_default();
        table.push_str(&format!(
            "{label},{},{:.4},{}\n",
            r.seed, r.best_accuracy, r.status
        ));
    }
    std::fs::write(out.join("ablation_table.csv"), table)?;
    Ok(())
}

pub fn default_ablate_base() -> ExperimentConfig {
    ExperimentConfig {
        variant: Variant::Tensor,
        d: 64,
        n_heads: 4,
        n_layers: 2,
        mlp_mult: 4.0,
        n_slots: 8,
        memory: Some(default_memory(64)),
        placement: Placement::AfterAttn,
        toy: TaskSpec::CoordBinding { w: 20, sigma_noise: 0.05 },
        train: TrainConfig {
            lr_peak: 3e-4,
            warmup_steps: 500,
            total_steps: 10_000,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            weight_decay: 0.0,
            grad_clip_norm: 1.0,
            early_stop_patience: 10,
            eval_every: 250,
            eval_batches: 4,
            stop_at_accuracy: None,
            seed: 1,
        },
        model_seed: 1,
        data_seed: 1,
    }
}

// ---------------------------------------------------------------------------
// Argument parsing and dispatch
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(name = "voxmem", about = "Voxel-memory transformer experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Full-model gradient check against central finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Train one variant on one toy.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trace: bool,
    },
    /// Run a sweep spec (variants × axis values × seeds).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the fixed ablation battery at binding W=20, σ=0.05.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| {
        std::env::var("VOXMEM_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|_| PathBuf::from("out"))
    })
}

/// Dispatch a parsed command line; returns the process exit code
/// (0 success, 1 validation, 2 numeric failure, 3 I/O).
pub fn dispatch(cli: Cli) -> i32 {
    let result: Result<()> = match cli.cmd {
        Cmd::Gradcheck { config, tol } => {
            cmd_gradcheck(config.as_deref(), tol).map(|_| ())
        }
        Cmd::Run {
            config,
            out,
            seed,
            trace,
        } => cmd_run(&config, &out_dir(out), seed, trace).map(|_| ()),
        Cmd::Sweep { config, out, jobs } => cmd_sweep(&config, &out_dir(out), jobs),
        Cmd::Ablate { config, out, jobs } => {
            cmd_ablate(config.as_deref(), &out_dir(out), jobs, &[1, 2, 3])
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
