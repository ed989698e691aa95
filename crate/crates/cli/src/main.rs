use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fastslow_core::config::RunConfig;
use fastslow_core::dataset::{generate_dataset, generate_episode, read_dataset, write_dataset, StreamSample};
use fastslow_core::encoders::stream_file::read_stream;
use fastslow_core::engine::{replay, run_frames, run_sample, EngineOptions};
use fastslow_core::flops::{flops_estimate, flops_with_keyframes};
use fastslow_core::metrics::{build_report, log_time_charges, to_csv, EvalReport};
use fastslow_core::rng::{mix_all, streams};
use fastslow_core::sequence::build_plan;
use fastslow_core::system::FastSlowModel;
use fastslow_core::train::{write_log, Trainer};
use fastslow_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fastslow", version, about = "Streaming video dialogue toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `dropping.beta=0.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        base.with_overrides(&self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with its manifest.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Corpus seed; defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Episode count; defaults to `dataset.n_episodes`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train on a corpus and write a checkpoint and a JSON-lines curve.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint manifest.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps, keeping the full schedule.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Evaluate a checkpoint and write report.json.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// `key=v1,v2,...`; one report row per value.
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the online loop over a stream and write the episode log.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stream file of frames or a generator line.
        #[arg(long, conflicts_with = "data")]
        stream: Option<PathBuf>,
        /// Corpus to take an episode (and its queries) from.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        episode: Option<String>,
        #[arg(long)]
        no_slow_path: bool,
        #[arg(long, default_value = "episode.jsonl")]
        out: PathBuf,
        /// Also replay the log in one pass and check it matches.
        #[arg(long)]
        check_replay: bool,
    },
    /// Analytic multiply-accumulate counts across dropping ratios.
    BenchFlops {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "flops.json")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.5,0.8")]
        betas: Vec<f64>,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<FastSlowModel> {
    let mut model = FastSlowModel::new(cfg)?;
    if let Some(ck) = checkpoint {
        let (m, _) = model.store.load_into(ck)?;
        if m.config_hash != cfg.hash() {
            eprintln!("warning: checkpoint config hash {} differs from the current config", m.config_hash);
        }
    }
    Ok(model)
}

fn load_samples(path: &Path) -> Result<Vec<StreamSample>> {
    let (_, samples) = read_dataset(path)?;
    if samples.is_empty() {
        return Err(Error::EmptyStream(format!("{} holds no episodes", path.display())));
    }
    Ok(samples)
}

fn gen_data(cfg: &RunConfig, out: &Path, seed: Option<u64>, n: Option<usize>) -> Result<()> {
    let seed = seed.unwrap_or(cfg.seed);
    let n = n.unwrap_or(cfg.dataset.n_episodes);
    let samples = generate_dataset(seed, n, &cfg.dataset, cfg.model.vocab_size, &cfg.hash())?;
    let m = write_dataset(out, &samples, seed, &cfg.hash())?;
    println!("{} episodes, {} turns, {} determinations -> {}", m.n_episodes, m.n_turns, m.n_determinations, out.display());
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>, until: Option<u64>) -> Result<()> {
    let samples = load_samples(data)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let mut model = FastSlowModel::new(cfg)?;
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(&mut model, samples, ck)?,
        None => Trainer::new(&model, samples)?,
    }
    .with_dump_dir(out);
    let log = out.join("train.jsonl");
    let checkpoint = out.join("checkpoint.json");
    let header = trainer.header(&model);
    let appending = resume.is_some() && log.exists();
    write_log(&log, &header, &[], appending)?;
    let every = cfg.train.checkpoint_every;
    let log_every = cfg.train.log_every.max(1) as u64;
    let stop = until.unwrap_or(cfg.train.steps as u64);
    let records = trainer.run_until(&mut model, stop, |t, m, rec| {
        write_log(&log, &header, std::slice::from_ref(rec), true)?;
        if rec.step % log_every == 0 {
            eprintln!("step {:>5} loss {:.5} grad_norm {:.4}", rec.step, rec.loss, rec.grad_norm);
        }
        if every > 0 && (rec.step + 1) % every as u64 == 0 {
            t.save_checkpoint(m, &checkpoint)?;
        }
        Ok(())
    })?;
    trainer.save_checkpoint(&model, &checkpoint)?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!("steps {}..{} loss {:.5} -> {:.5}; checkpoint {}", first.step, last.step, first.loss, last.loss, checkpoint.display());
    } else {
        println!("nothing to do; checkpoint {}", checkpoint.display());
    }
    Ok(())
}

fn parse_sweep(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep `{spec}` is not key=v1,v2,...")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::Config(format!("sweep `{spec}` lists no values")));
    }
    Ok((key.trim().to_string(), values))
}

fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path, sweep: Option<&str>, csv: Option<&Path>) -> Result<()> {
    let samples = load_samples(data)?;
    let model = load_model(cfg, Some(checkpoint))?;
    let mut reports: Vec<EvalReport> = Vec::new();
    match sweep {
        None => reports.push(build_report(&model, &samples)?),
        Some(spec) => {
            let (key, values) = parse_sweep(spec)?;
            for v in values {
                let label = format!("{key}={v}");
                let variant = model.reconfigured(&cfg.with_overrides(&[label.as_str()])?)?;
                let mut r = build_report(&variant, &samples)?;
                r.label = Some(label);
                reports.push(r);
            }
        }
    }
    for w in reports.iter().flat_map(|r| r.warnings.iter()) {
        eprintln!("warning: {w}");
    }
    if sweep.is_some() {
        write_json(out, &reports)?;
    } else {
        write_json(out, &reports[0])?;
    }
    if let Some(p) = csv {
        fs::write(p, to_csv(&reports))?;
    }
    for r in &reports {
        println!(
            "{}ppl {:.4} correctness {:.4} fluency {:.4} time_diff {:.3} s flops {:.4e}",
            r.label.as_deref().map(|l| format!("{l}: ")).unwrap_or_default(),
            r.lm_ppl,
            r.lm_correctness,
            r.fluency,
            r.time_diff,
            r.flops
        );
    }
    Ok(())
}

struct SimulateArgs<'a> {
    checkpoint: Option<&'a Path>,
    stream: Option<&'a Path>,
    data: Option<&'a Path>,
    episode: Option<&'a str>,
    no_slow_path: bool,
    out: &'a Path,
    check_replay: bool,
}

fn simulate(cfg: &RunConfig, a: SimulateArgs) -> Result<()> {
    let model = load_model(cfg, a.checkpoint)?;
    let opts = EngineOptions { slow_path: cfg.slow_path.enabled && !a.no_slow_path, record_logits: a.check_replay, record_latency: true };
    let (frames, sample) = match (a.stream, a.data) {
        (Some(path), _) => (read_stream(path)?, None),
        (None, Some(data)) => {
            let samples = load_samples(data)?;
            let s = match a.episode {
                Some(id) => samples
                    .into_iter()
                    .find(|s| s.id == id)
                    .ok_or_else(|| Error::EmptyStream(format!("no episode {id} in {}", data.display())))?,
                None => samples.into_iter().next().expect("nonempty"),
            };
            (s.frames()?, Some(s))
        }
        (None, None) => {
            let s = generate_episode("sim".into(), mix_all(&[cfg.seed, streams::DATASET]), &cfg.dataset, &cfg.hash())?;
            (s.frames()?, Some(s))
        }
    };
    let (log, online) = match &sample {
        Some(s) => run_sample(&model, s, opts)?,
        None => run_frames(&model, &frames, &[], opts)?,
    };
    log.save(a.out)?;
    let n_det = log.determinations().count();
    let n_resp = log.responses().count();
    print!("{n_det} determinations, {n_resp} responses -> {}", a.out.display());
    if let Some(s) = &sample {
        let c = log_time_charges(&log, s, cfg.metrics.unmatched_penalty);
        if !c.is_empty() {
            print!("; time_diff {:.3} s over {} turns", c.iter().sum::<f64>() / c.len() as f64, c.len());
        }
    }
    println!();
    if a.check_replay {
        let bundles = model.featurize(&frames)?;
        let r = replay(&model, &bundles, &log)?;
        let worst = r
            .determination_logits
            .iter()
            .zip(&online)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let same = r.decisions == log.determinations().map(|d| d.1).collect::<Vec<_>>()
            && r.responses == log.responses().map(|x| x.1.to_vec()).collect::<Vec<_>>();
        println!("replay: max logit difference {worst:.3e}, decisions and responses {}", if same { "match" } else { "DIFFER" });
        if !same || worst > 1e-9 {
            return Err(Error::Numeric("online run and replay disagree".into()));
        }
    }
    Ok(())
}

fn bench_flops(cfg: &RunConfig, out: &Path, betas: &[f64]) -> Result<()> {
    let model = FastSlowModel::new(cfg)?;
    let sample = generate_episode("bench".into(), mix_all(&[cfg.seed, streams::DATASET]), &cfg.dataset, &cfg.hash())?;
    let (turns, queries) = sample.turn_specs();
    let mut layout = model.layout();
    layout.slow_path = Some(cfg.slow_path.clone());
    let with = build_plan(sample.n_bundles(), &turns, &queries, &layout)?;
    layout.slow_path = None;
    let without = build_plan(sample.n_bundles(), &turns, &queries, &layout)?;
    let mut none = cfg.dropping.clone();
    none.policy = fastslow_core::config::Placement::None;
    let unrouted = flops_estimate(&cfg.model, &none, &with.slots)?;
    let mut rows = Vec::new();
    for &beta in betas {
        let mut d = cfg.dropping.clone();
        d.beta = beta;
        let probe = cfg.clone().with_overrides(&[format!("dropping.beta={beta}")])?;
        let r = flops_with_keyframes(&probe.model, &d, &with.slots, &without.slots)?;
        rows.push(json!({
            "policy": d.policy,
            "beta": beta,
            "total": r.total,
            "keyframe_augmentation": r.keyframe_augmentation,
            "router": r.router,
            "head": r.head,
            "per_layer": r.per_layer,
        }));
        println!("{:?} beta {beta:<4} total {:>14} keyframe share {:>12}", d.policy, r.total, r.keyframe_augmentation.unwrap_or(0));
    }
    println!("unrouted total {:>14}", unrouted.total);
    let body = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "profile": {
            "positions": with.slots.len(),
            "visual": with.slots.iter().filter(|s| s.is_visual()).count(),
            "bundles": sample.n_bundles(),
            "keyframes": turns.len(),
        },
        "unrouted": unrouted.total,
        "rows": rows,
    });
    write_json(out, &body)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out, seed, n } => gen_data(&cfg.load()?, &out, seed, n),
        Command::Train { cfg, data, out, resume, until } => train(&cfg.load()?, &data, &out, resume.as_deref(), until),
        Command::Eval { cfg, checkpoint, data, out, sweep, csv } => {
            eval(&cfg.load()?, &checkpoint, &data, &out, sweep.as_deref(), csv.as_deref())
        }
        Command::Simulate { cfg, checkpoint, stream, data, episode, no_slow_path, out, check_replay } => simulate(
            &cfg.load()?,
            SimulateArgs {
                checkpoint: checkpoint.as_deref(),
                stream: stream.as_deref(),
                data: data.as_deref(),
                episode: episode.as_deref(),
                no_slow_path,
                out: &out,
                check_replay,
            },
        ),
        Command::BenchFlops { cfg, out, betas } => bench_flops(&cfg.load()?, &out, &betas),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
