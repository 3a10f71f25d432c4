use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use objtrack::synth::{read_clip, verify_clip, write_atomic, write_corpus, MANIFEST_NAME};
use objtrack::train::ablate::{run_ablation, AblationOptions};
use objtrack::train::{evaluate, evaluate_oracle, train, Checkpoint, ClipSource, Config, ManifestCorpus, SyntheticCorpus, TrainOptions};
use objtrack::{Error, Result};

/// Long-term point tracking with object priors.
#[derive(Parser)]
#[command(name = "objtrack", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and verify it.
    GenData(GenData),
    /// Check every clip listed in a manifest.
    Verify(Verify),
    /// Train a tracker.
    Train(Train),
    /// Evaluate a checkpoint on a corpus.
    Eval(Eval),
    /// Track query points through one clip.
    Track(Track),
    /// Run the component ablation and the alpha sweep.
    Ablate(Ablate),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file (desk defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        Config::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    clips: usize,
    #[arg(long)]
    frames: Option<usize>,
    /// Frame size: `S` for S×S or `WxH`.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Verify {
    /// Manifest file or corpus directory.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Manifest file or corpus directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from `OUT/last.ckpt`.
    #[arg(long)]
    resume: bool,
    /// Resume despite a configuration hash mismatch.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Eval {
    /// Checkpoint; its directory's config.toml is used unless --config is given.
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Text report path; a key=value copy is written next to it with a `.kv` extension.
    #[arg(long)]
    report: PathBuf,
    /// Take MTE over all points instead of visible ones.
    #[arg(long)]
    mte_all: bool,
    /// Score ground truth against itself instead of a checkpoint.
    #[arg(long, conflicts_with = "ckpt")]
    oracle: bool,
}

#[derive(Args)]
struct Track {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    clip: PathBuf,
    /// File of `x,y` lines (frame-0 pixels); the clip's own queries when omitted.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    out_csv: PathBuf,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training manifest file or corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Held-out manifest; defaults to generated clips from seed 1000000.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    eval_clips: usize,
    #[arg(long)]
    out: PathBuf,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    /// Run only these cells (baseline, objectness, attention, full, alpha-1.0).
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_NAME)
    } else {
        data.to_path_buf()
    }
}

fn open_corpus(data: &Path) -> Result<ManifestCorpus> {
    let path = manifest_path(data);
    if !path.exists() {
        return Err(Error::format(format!("no manifest at {}", path.display())));
    }
    ManifestCorpus::open(&path)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("bad --size `{}`; expected S or WxH", s));
    match s.split_once(['x', 'X']) {
        Some((w, h)) => Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?)),
        None => {
            let v = s.parse().map_err(|_| bad())?;
            Ok((v, v))
        }
    }
}

/// Config used for a checkpoint: `explicit`, or config.toml beside it.
fn checkpoint_config(ckpt: &Path, explicit: Option<&Path>) -> Result<(Config, Checkpoint)> {
    let ck = Checkpoint::load(ckpt)?;
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join("config.toml"),
    };
    if !path.exists() {
        return Err(Error::config(format!("no config at {}; pass --config", path.display())));
    }
    let cfg = Config::load(Some(&path), &[])?;
    ck.check_hash(&cfg.hash(), false)?;
    Ok((cfg, ck))
}

fn parse_queries(text: &str) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(format!("queries line {}: expected `x,y`", i + 1)))?;
        match vals[..] {
            [x, y] if x.is_finite() && y.is_finite() => out.push([x, y]),
            _ => return Err(Error::format(format!("queries line {}: expected `x,y`", i + 1))),
        }
    }
    if out.is_empty() {
        return Err(Error::format("query file lists no points"));
    }
    Ok(out)
}

fn verify(data: &Path, expected: Option<usize>) -> Result<()> {
    let corpus = open_corpus(data)?;
    if let Some(n) = expected {
        if corpus.len() != n {
            return Err(Error::format(format!("manifest lists {} clips, expected {}", corpus.len(), n)));
        }
    }
    for (i, entry) in corpus.entries().iter().enumerate() {
        let clip = read_clip(&entry.path)?;
        let violations = verify_clip(&clip);
        if let Some(v) = violations.first() {
            return Err(Error::format(format!(
                "clip {} ({}): {} violations, first: {:?}",
                i,
                entry.path.display(),
                violations.len(),
                v
            )));
        }
    }
    println!("verified {} clips", corpus.len());
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => {
            let mut cfg = a.cfg.load()?;
            if let Some(f) = a.frames {
                cfg.data.frames = f;
            }
            if let Some(s) = &a.size {
                let (w, h) = parse_size(s)?;
                cfg.data.width = w;
                cfg.data.height = h;
            }
            if a.clips == 0 {
                return Err(Error::config("--clips must be positive"));
            }
            let manifest = write_corpus(&a.out, a.seed, a.clips, &cfg.data)?;
            println!("wrote {} clips, manifest {}", a.clips, manifest.display());
            verify(&manifest, Some(a.clips))
        }
        Command::Verify(a) => verify(&a.data, None),
        Command::Train(a) => {
            let cfg = a.cfg.load()?;
            let corpus = open_corpus(&a.data)?;
            let opts = TrainOptions {
                out_dir: a.out.clone(),
                resume: a.resume,
                force: a.force,
                stop_after: None,
            };
            let outcome = train(&cfg, &corpus, &opts)?;
            println!(
                "trained to step {}; checkpoint {}",
                outcome.checkpoint.step,
                a.out.join(objtrack::train::run::CHECKPOINT_NAME).display()
            );
            Ok(())
        }
        Command::Eval(a) => {
            let corpus = open_corpus(&a.data)?;
            let report = if a.oracle {
                evaluate_oracle(&corpus, a.mte_all)?
            } else {
                let ckpt = a.ckpt.as_deref().expect("clap requires --ckpt without --oracle");
                let (cfg, ck) = checkpoint_config(ckpt, a.config.as_deref())?;
                evaluate(&cfg.tracker()?, &ck.params, &corpus, a.mte_all)?
            };
            if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_atomic(&a.report, report.to_text().as_bytes())?;
            write_atomic(&a.report.with_extension("kv"), report.to_kv().as_bytes())?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Track(a) => {
            let (cfg, ck) = checkpoint_config(&a.ckpt, a.config.as_deref())?;
            let clip = read_clip(&a.clip)?;
            let queries = match &a.queries {
                Some(p) => parse_queries(&fs::read_to_string(p)?)?,
                None => clip.queries(),
            };
            let result = cfg.tracker()?.track_video(&ck.params, &clip.frames, &queries)?;
            write_atomic(&a.out_csv, result.to_csv().as_bytes())?;
            println!("tracked {} points over {} frames", queries.len(), result.frames());
            Ok(())
        }
        Command::Ablate(a) => {
            let cfg = a.cfg.load()?;
            let corpus = open_corpus(&a.data)?;
            let eval_src: Box<dyn ClipSource> = match &a.eval_data {
                Some(p) => Box::new(open_corpus(p)?),
                None => Box::new(SyntheticCorpus::new(cfg.data.clone(), 1_000_000, a.eval_clips)?),
            };
            let opts = AblationOptions {
                out_dir: a.out.clone(),
                seeds: a.seeds.clone(),
                only: a.only.clone(),
            };
            let result = run_ablation(&cfg, &corpus, eval_src.as_ref(), &opts)?;
            print!("{}", result.to_table());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
