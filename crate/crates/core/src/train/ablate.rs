//! Component ablation and α sweep.
//!
//! Four cells toggle the objectness loss and contextual attention; the α
//! sweep adds α = 1.0 runs. α = 0 and α = 0.15 rows reuse the
//! attention-only and full runs: disabling the objectness loss is the same
//! training computation as α = 0.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::data::ClipSource;
use super::eval::evaluate;
use super::run::{train, TrainOptions, CHECKPOINT_NAME};
use super::Config;
use crate::metrics::EvalReport;
use crate::synth::write_atomic;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: &'static str,
    pub use_obj_loss: bool,
    pub use_ctx_attention: bool,
    pub alpha: f64,
}

/// The four component cells followed by the extra α value.
pub fn cells(alpha: f64) -> Vec<Cell> {
    vec![
        Cell { name: "baseline", use_obj_loss: false, use_ctx_attention: false, alpha },
        Cell { name: "objectness", use_obj_loss: true, use_ctx_attention: false, alpha },
        Cell { name: "attention", use_obj_loss: false, use_ctx_attention: true, alpha },
        Cell { name: "full", use_obj_loss: true, use_ctx_attention: true, alpha },
        Cell { name: "alpha-1.0", use_obj_loss: true, use_ctx_attention: true, alpha: 1.0 },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub report: EvalReport,
    pub final_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub runs: Vec<RunResult>,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Sample standard deviation (n − 1); 0 for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl CellResult {
    pub fn survival(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.report.survival).collect()
    }

    pub fn delta_avg(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.report.delta_avg.unwrap_or(f64::NAN)).collect()
    }

    pub fn mte(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.report.mte.unwrap_or(f64::NAN)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub cells: Vec<CellResult>,
}

impl AblationResult {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell.name == name)
    }

    /// Survival of the α sweep as `(α, per-seed survival)`.
    pub fn alpha_sweep(&self) -> Vec<(f64, Vec<f64>)> {
        let mut rows = Vec::new();
        if let Some(c) = self.cell("attention") {
            rows.push((0.0, c.survival()));
        }
        if let Some(c) = self.cell("full") {
            rows.push((c.cell.alpha, c.survival()));
        }
        if let Some(c) = self.cell("alpha-1.0") {
            rows.push((1.0, c.survival()));
        }
        rows
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Component ablation (mean ± std over seeds)");
        let _ = writeln!(
            s,
            "{:<12} {:>4} {:>4} {:>6}  {:>18}  {:>18}  {:>16}",
            "cell", "obj", "attn", "alpha", "survival %", "delta_avg %", "mte px"
        );
        for c in &self.cells {
            let (sv, da, mt) = (c.survival(), c.delta_avg(), c.mte());
            let _ = writeln!(
                s,
                "{:<12} {:>4} {:>4} {:>6.2}  {:>9.3} ± {:<6.3}  {:>9.3} ± {:<6.3}  {:>7.3} ± {:<6.3}",
                c.cell.name,
                if c.cell.use_obj_loss { "on" } else { "off" },
                if c.cell.use_ctx_attention { "on" } else { "off" },
                if c.cell.use_obj_loss { c.cell.alpha } else { 0.0 },
                mean(&sv),
                std_dev(&sv),
                mean(&da),
                std_dev(&da),
                mean(&mt),
                std_dev(&mt),
            );
        }
        let _ = writeln!(s, "\nAlpha sweep (survival %)");
        for (alpha, sv) in self.alpha_sweep() {
            let seeds: Vec<String> = sv.iter().map(|v| format!("{:.3}", v)).collect();
            let _ = writeln!(s, "alpha={:<5} mean={:.3} seeds=[{}]", alpha, mean(&sv), seeds.join(", "));
        }
        s
    }

    /// `cell.seed.metric=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for c in &self.cells {
            for r in &c.runs {
                let _ = writeln!(s, "{}.{}.survival={}", c.cell.name, r.seed, r.report.survival);
                let _ = writeln!(s, "{}.{}.delta_avg={}", c.cell.name, r.seed, r.report.delta_avg.unwrap_or(f64::NAN));
                let _ = writeln!(s, "{}.{}.mte={}", c.cell.name, r.seed, r.report.mte.unwrap_or(f64::NAN));
                let _ = writeln!(s, "{}.{}.final_total={}", c.cell.name, r.seed, r.final_total);
            }
        }
        s
    }
}

pub struct AblationOptions {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Cell names to run; all when empty.
    pub only: Vec<String>,
}

fn run_dir(out: &Path, cell: &Cell, seed: u64) -> PathBuf {
    out.join(format!("{}_seed{}", cell.name, seed))
}

/// Trains and evaluates one cell/seed, reusing a finished run in `dir`.
fn run_one(cfg: &Config, dir: &Path, train_src: &dyn ClipSource, eval_src: &dyn ClipSource) -> Result<RunResult> {
    let tracker = cfg.tracker()?;
    let report_path = dir.join("eval.kv");
    let ckpt_path = dir.join(CHECKPOINT_NAME);
    if report_path.exists() && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.config_hash == cfg.hash() && ck.step == cfg.train.steps {
            let report = EvalReport::from_kv(&fs::read_to_string(&report_path)?)?;
            let log = super::run::read_log(&dir.join(super::run::LOG_NAME))?;
            log::info!("reusing finished run in {}", dir.display());
            return Ok(RunResult {
                seed: cfg.train.seed,
                report,
                final_total: trailing_total(&log),
            });
        }
    }
    let opts = TrainOptions {
        out_dir: dir.to_path_buf(),
        resume: true,
        force: false,
        stop_after: None,
    };
    train(cfg, train_src, &opts)?;
    let ck = Checkpoint::load(&ckpt_path)?;
    let report = evaluate(&tracker, &ck.params, eval_src, false)?;
    write_atomic(&dir.join("eval.txt"), report.to_text().as_bytes())?;
    write_atomic(&report_path, report.to_kv().as_bytes())?;
    let log = super::run::read_log(&dir.join(super::run::LOG_NAME))?;
    Ok(RunResult {
        seed: cfg.train.seed,
        report,
        final_total: trailing_total(&log),
    })
}

/// Mean total loss of the last 20 logged steps.
pub fn trailing_total(log: &[super::run::LogLine]) -> f64 {
    let tail = &log[log.len().saturating_sub(20)..];
    mean(&tail.iter().map(|l| l.total).collect::<Vec<_>>())
}

pub fn run_ablation(
    base: &Config,
    train_src: &dyn ClipSource,
    eval_src: &dyn ClipSource,
    opts: &AblationOptions,
) -> Result<AblationResult> {
    if opts.seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    fs::create_dir_all(&opts.out_dir)?;
    let mut results = Vec::new();
    for cell in cells(base.train.alpha) {
        if !opts.only.is_empty() && !opts.only.iter().any(|n| n == cell.name) {
            continue;
        }
        let mut runs = Vec::new();
        for &seed in &opts.seeds {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            cfg.train.use_obj_loss = cell.use_obj_loss;
            cfg.train.use_ctx_attention = cell.use_ctx_attention;
            cfg.train.alpha = cell.alpha;
            let dir = run_dir(&opts.out_dir, &cell, seed);
            log::info!("ablation cell {} seed {}", cell.name, seed);
            runs.push(run_one(&cfg, &dir, train_src, eval_src)?);
        }
        results.push(CellResult { cell, runs });
    }
    let result = AblationResult { cells: results };
    write_atomic(&opts.out_dir.join("ablation.txt"), result.to_table().as_bytes())?;
    write_atomic(&opts.out_dir.join("ablation.kv"), result.to_kv().as_bytes())?;
    Ok(result)
}
