//! Command-line front end: corpus generation, training, evaluation,
//! hyper-parameter sweeps and report rendering.
//!
//! Exit codes: 0 success, 2 configuration or user error, 3 numeric
//! failure (diagnostics written into the run directory).

mod config;
mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use messenger::datagen::{build_corpus, CorpusConfig, DomainSpec, Preset};
use messenger::dataio::{load_manifest, CorpusIndex};
use messenger::metrics::evaluate;
use messenger::model::ModelConfig;
use messenger::training::{
    latest_checkpoint, load_checkpoint, run_training, TrainConfig, TrainState,
};
use messenger::{Error, Result, Scalar};

use config::KeyValues;

#[derive(Parser)]
#[command(
    name = "messenger",
    version,
    about = "Semi-supervised segmentation with labeled/unlabeled knowledge delivery"
)]
struct Cli {
    /// Base RNG seed for the subcommand.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Deterministic mode: fixed-order reductions and reproducible
    /// artifacts. Always enforced; recorded in run configs.
    #[arg(long, global = true, default_value_t = true)]
    deterministic: bool,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-domain corpus.
    GenData {
        /// Scenario preset: ssmis, umda or semimdg.
        #[arg(long, default_value = "semimdg")]
        preset: String,
        /// Image side length (H = W).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Number of classes including background.
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        labeled: usize,
        #[arg(long, default_value_t = 64)]
        unlabeled: usize,
        #[arg(long, default_value_t = 32)]
        test: usize,
        /// Domain assignment. ssmis: "0"; umda: "SRC:TGT";
        /// semimdg: "A,B,C:TEST".
        #[arg(long)]
        domains: Option<String>,
    },
    /// Train a model on a corpus (resumes from the latest checkpoint if
    /// the run directory already has one).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval {
        /// Run directory (uses its latest checkpoint) ...
        #[arg(long, conflicts_with = "checkpoint")]
        run: Option<PathBuf>,
        /// ... or an explicit checkpoint file.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train once per value of a hyper-parameter axis and aggregate.
    Sweep {
        /// Axis to sweep: alpha or patch-size.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, at least two.
        #[arg(long)]
        values: String,
        /// Run the sweep points as parallel child processes.
        #[arg(long, default_value_t = false)]
        parallel: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Render loss curves, metric bars and a text summary for a finished
    /// run or sweep directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Corpus directory (containing manifest.tsv).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Optional key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cross/self blend coefficient in [0, 1]; 0 disables U2L delivery.
    #[arg(long)]
    alpha: Option<f64>,
    /// L2U patch side length in pixels; 0 disables L2U delivery.
    #[arg(long = "l2u-patch-size")]
    l2u_patch_size: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Model preset: tiny (default) or micro.
    #[arg(long)]
    model: Option<String>,
    /// Scalar precision: f64 (default) or f32.
    #[arg(long)]
    dtype: Option<String>,
    /// Disable geometric augmentation.
    #[arg(long, default_value_t = false)]
    no_augment: bool,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Numeric { .. } => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            preset,
            size,
            classes,
            labeled,
            unlabeled,
            test,
            domains,
        } => cmd_gen_data(
            &preset, size, classes, labeled, unlabeled, test, domains, cli.seed, cli.out,
        ),
        Cmd::Train(args) => {
            let out = cli
                .out
                .ok_or_else(|| Error::config("train requires --out RUN_DIR"))?;
            let kv = resolve_train_config(&args, cli.seed, cli.deterministic, &out)?;
            cmd_train(&kv, &out).map(|_| ())
        }
        Cmd::Eval {
            run,
            checkpoint,
            corpus,
            split,
        } => cmd_eval(run, checkpoint, &corpus, &split, cli.out),
        Cmd::Sweep {
            axis,
            values,
            parallel,
            train,
        } => {
            let out = cli
                .out
                .ok_or_else(|| Error::config("sweep requires --out SWEEP_DIR"))?;
            cmd_sweep(&axis, &values, parallel, &train, cli.seed, cli.deterministic, &out)
        }
        Cmd::Report { dir } => cmd_report(&dir),
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn parse_domains(preset: Preset, spec: Option<&str>) -> Result<DomainSpec> {
    let parse_id = |s: &str| -> Result<u32> {
        s.trim()
            .parse()
            .map_err(|_| Error::config(format!("bad domain id '{s}'")))
    };
    match (preset, spec) {
        (Preset::Ssmis, None) => Ok(DomainSpec::Single(0)),
        (Preset::Ssmis, Some(s)) => Ok(DomainSpec::Single(parse_id(s)?)),
        (Preset::Umda, None) => Ok(DomainSpec::SourceTarget { source: 0, target: 1 }),
        (Preset::Umda, Some(s)) => {
            let (a, b) = s
                .split_once(':')
                .ok_or_else(|| Error::config("umda --domains must be SRC:TGT"))?;
            Ok(DomainSpec::SourceTarget {
                source: parse_id(a)?,
                target: parse_id(b)?,
            })
        }
        (Preset::SemiMdg, None) => Ok(DomainSpec::TrainTest {
            train: vec![0, 1, 2],
            test: 3,
        }),
        (Preset::SemiMdg, Some(s)) => {
            let (train, test) = s
                .split_once(':')
                .ok_or_else(|| Error::config("semimdg --domains must be A,B,C:TEST"))?;
            let train: Result<Vec<u32>> = train.split(',').map(parse_id).collect();
            Ok(DomainSpec::TrainTest {
                train: train?,
                test: parse_id(test)?,
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    preset: &str,
    size: usize,
    classes: usize,
    labeled: usize,
    unlabeled: usize,
    test: usize,
    domains: Option<String>,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let preset = Preset::parse(preset)?;
    let out = out.ok_or_else(|| Error::config("gen-data requires --out DIR"))?;
    let cfg = CorpusConfig {
        preset,
        out_dir: out,
        seed,
        image_size: size,
        num_classes: classes,
        labeled,
        unlabeled,
        test,
        domains: parse_domains(preset, domains.as_deref())?,
    };
    let manifest = build_corpus(&cfg)?;
    println!("wrote corpus manifest {}", manifest.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn train_defaults(seed: u64, deterministic: bool) -> KeyValues {
    let mut kv = KeyValues::new();
    for (k, v) in [
        ("model", "tiny".to_string()),
        ("dtype", "f64".to_string()),
        ("alpha", "0.5".to_string()),
        ("patch_size", "auto".to_string()),
        ("iters", "2000".to_string()),
        ("lr_init", "0.01".to_string()),
        ("batch_size", "8".to_string()),
        ("momentum", "0.9".to_string()),
        ("weight_decay", "0.0001".to_string()),
        ("checkpoint_every", "500".to_string()),
        ("augment", "true".to_string()),
        ("seed", seed.to_string()),
        ("deterministic", deterministic.to_string()),
    ] {
        kv.insert(k.to_string(), v);
    }
    kv
}

fn resolve_train_config(
    args: &TrainArgs,
    seed: u64,
    deterministic: bool,
    out: &Path,
) -> Result<KeyValues> {
    let mut kv = train_defaults(seed, deterministic);
    if let Some(path) = &args.config {
        for (k, v) in config::parse_file(path)? {
            kv.insert(k, v);
        }
    }
    let mut set = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.insert(k.to_string(), v);
        }
    };
    set("corpus", args.corpus.as_ref().map(|p| p.display().to_string()));
    set("alpha", args.alpha.map(|v| v.to_string()));
    set("patch_size", args.l2u_patch_size.map(|v| v.to_string()));
    set("iters", args.iters.map(|v| v.to_string()));
    set("lr_init", args.lr.map(|v| v.to_string()));
    set("batch_size", args.batch_size.map(|v| v.to_string()));
    set("momentum", args.momentum.map(|v| v.to_string()));
    set("weight_decay", args.weight_decay.map(|v| v.to_string()));
    set(
        "checkpoint_every",
        args.checkpoint_every.map(|v| v.to_string()),
    );
    set("model", args.model.clone());
    set("dtype", args.dtype.clone());
    if args.no_augment {
        kv.insert("augment".to_string(), "false".to_string());
    }
    kv.insert("out".to_string(), out.display().to_string());
    if !kv.contains_key("corpus") {
        return Err(Error::config("train requires --corpus DIR (field: corpus)"));
    }
    Ok(kv)
}

fn kv_parse<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<T> {
    kv.get(key)
        .ok_or_else(|| Error::config(format!("missing config field '{key}'")))?
        .parse()
        .map_err(|_| Error::config(format!("config field '{key}' has invalid value '{}'", kv[key])))
}

/// Runs (or resumes) training per the resolved config; returns the mean
/// test Dice.
fn cmd_train(kv: &KeyValues, run_dir: &Path) -> Result<f64> {
    let corpus_dir = PathBuf::from(&kv["corpus"]);
    let index = load_manifest(&corpus_dir.join("manifest.tsv"))?;

    // Resolve "auto" patch size against the corpus image size.
    let mut kv = kv.clone();
    if kv.get("patch_size").map(String::as_str) == Some("auto") {
        let first = index.split("labeled")?;
        let sample = index.load_sample::<f64>(&first[0].sample_id)?;
        let h = sample.image.dim().2;
        kv.insert("patch_size".to_string(), (h / 2).to_string());
    }

    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let snapshot = run_dir.join("config.txt");
    let text = config::to_text(&kv);
    if snapshot.is_file() {
        let existing = fs::read_to_string(&snapshot).map_err(|e| Error::io(&snapshot, e))?;
        if existing != text {
            let old = config::parse_file(&snapshot)?;
            let diff: Vec<String> = kv
                .iter()
                .filter(|(k, v)| old.get(*k) != Some(*v))
                .map(|(k, v)| format!("{k}: '{}' vs requested '{v}'", old.get(k).map(String::as_str).unwrap_or("<unset>")))
                .collect();
            return Err(Error::config(format!(
                "run directory already holds a different config ({}); fields: {}",
                snapshot.display(),
                diff.join("; ")
            )));
        }
    } else {
        fs::write(&snapshot, &text).map_err(|e| Error::io(&snapshot, e))?;
    }

    match kv["dtype"].as_str() {
        "f64" => train_run::<f64>(&kv, &index, run_dir),
        "f32" => train_run::<f32>(&kv, &index, run_dir),
        other => Err(Error::config(format!(
            "unknown dtype '{other}' (f32, f64) (field: dtype)"
        ))),
    }
}

fn train_run<S: Scalar>(kv: &KeyValues, index: &CorpusIndex, run_dir: &Path) -> Result<f64> {
    let train_cfg = TrainConfig {
        lr_init: kv_parse(kv, "lr_init")?,
        total_iters: kv_parse(kv, "iters")?,
        batch_size: kv_parse(kv, "batch_size")?,
        momentum: kv_parse(kv, "momentum")?,
        weight_decay: kv_parse(kv, "weight_decay")?,
        patch_size: kv_parse(kv, "patch_size")?,
        seed: kv_parse(kv, "seed")?,
        checkpoint_every: kv_parse(kv, "checkpoint_every")?,
        augment: kv_parse(kv, "augment")?,
    };
    let alpha: f64 = kv_parse(kv, "alpha")?;
    let model_cfg = ModelConfig::by_name(&kv["model"], index.num_classes(), alpha)?;

    let mut state = match latest_checkpoint(run_dir) {
        Some(ckpt) => {
            let state = load_checkpoint::<S>(&ckpt)?;
            println!(
                "resuming from {} at iteration {}",
                ckpt.display(),
                state.iter
            );
            state
        }
        None => TrainState::<S>::new(model_cfg, train_cfg)?,
    };

    let result = run_training(&mut state, index, Some(run_dir));
    if let Err(e) = result {
        if let Error::Numeric { .. } = &e {
            let diag = run_dir.join("diagnostics.txt");
            let _ = fs::write(&diag, format!("{e}\n"));
            eprintln!("numeric failure; diagnostics at {}", diag.display());
        }
        return Err(e);
    }

    // Final checkpoint and metrics report.
    let ckpt = messenger::training::checkpoint_path(run_dir, state.iter);
    if !ckpt.is_file() {
        messenger::training::save_checkpoint(&state, &ckpt)?;
    }
    let report = evaluate(&state.model, index, "test", state.config.seed)?;
    fs::write(run_dir.join("metrics.csv"), report.to_csv())
        .map_err(|e| Error::io(run_dir.join("metrics.csv"), e))?;
    fs::write(run_dir.join("metrics.txt"), report.to_table())
        .map_err(|e| Error::io(run_dir.join("metrics.txt"), e))?;
    println!("{}", report.to_table());
    println!("run artifacts in {}", run_dir.display());
    Ok(report.mean_dice)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(
    run: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    corpus: &Path,
    split: &str,
    out: Option<PathBuf>,
) -> Result<()> {
    let ckpt = match (run, checkpoint) {
        (Some(dir), None) => latest_checkpoint(&dir).ok_or_else(|| {
            Error::config(format!("no checkpoints under {}", dir.display()))
        })?,
        (None, Some(path)) => path,
        _ => return Err(Error::config("eval requires exactly one of --run or --checkpoint")),
    };
    let index = load_manifest(&corpus.join("manifest.tsv"))?;
    let (header, _) = messenger::checkpoint::read_container_header(&ckpt)?;
    let dtype = header
        .get("dtype")
        .map(String::as_str)
        .unwrap_or("f64")
        .to_string();
    let report = match dtype.as_str() {
        "f32" => {
            let state = load_checkpoint::<f32>(&ckpt)?;
            evaluate(&state.model, &index, split, state.config.seed)?
        }
        _ => {
            let state = load_checkpoint::<f64>(&ckpt)?;
            evaluate(&state.model, &index, split, state.config.seed)?
        }
    };
    print!("{}", report.to_table());
    if let Some(dir) = out {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        fs::write(dir.join(format!("metrics-{split}.csv")), report.to_csv())
            .map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
        fs::write(dir.join(format!("metrics-{split}.txt")), report.to_table())
            .map_err(|e| Error::io(dir.join("metrics.txt"), e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn cmd_sweep(
    axis: &str,
    values: &str,
    parallel: bool,
    base: &TrainArgs,
    seed: u64,
    deterministic: bool,
    sweep_dir: &Path,
) -> Result<()> {
    let key = match axis {
        "alpha" => "alpha",
        "patch-size" | "patch_size" => "patch_size",
        other => {
            return Err(Error::config(format!(
                "unknown sweep axis '{other}' (alpha, patch-size)"
            )))
        }
    };
    let values: Vec<String> = values.split(',').map(|s| s.trim().to_string()).collect();
    if values.len() < 2 {
        return Err(Error::config("sweep needs at least 2 values"));
    }
    for v in &values {
        if key == "alpha" {
            let _: f64 = v
                .parse()
                .map_err(|_| Error::config(format!("bad alpha value '{v}'")))?;
        } else {
            let _: usize = v
                .parse()
                .map_err(|_| Error::config(format!("bad patch size '{v}'")))?;
        }
    }
    fs::create_dir_all(sweep_dir).map_err(|e| Error::io(sweep_dir, e))?;

    struct Point {
        value: String,
        run_dir: PathBuf,
        result: Result<f64>,
    }
    let mut points: Vec<Point> = Vec::new();

    if parallel {
        // Independent runs as child processes, two at a time.
        let exe = std::env::current_exe().map_err(|e| Error::io("argv0", e))?;
        for chunk in values.chunks(2) {
            let mut children = Vec::new();
            for v in chunk {
                let run_dir = sweep_dir.join(format!("{key}={v}"));
                let mut cmd = std::process::Command::new(&exe);
                cmd.arg("--seed")
                    .arg(seed.to_string())
                    .arg("--out")
                    .arg(&run_dir)
                    .arg("train");
                if let Some(c) = &base.corpus {
                    cmd.arg("--corpus").arg(c);
                }
                if let Some(c) = &base.config {
                    cmd.arg("--config").arg(c);
                }
                push_train_flags(&mut cmd, base, key, v);
                children.push((v.clone(), run_dir, cmd.spawn().map_err(|e| Error::io(&exe, e))?));
            }
            for (v, run_dir, mut child) in children {
                let status = child.wait().map_err(|e| Error::io("child", e))?;
                let result = if status.success() {
                    read_mean_dice(&run_dir)
                } else {
                    Err(Error::config(format!(
                        "run {key}={v} exited with {status}"
                    )))
                };
                points.push(Point { value: v, run_dir, result });
            }
        }
    } else {
        for v in &values {
            let run_dir = sweep_dir.join(format!("{key}={v}"));
            let result = (|| -> Result<f64> {
                let mut args = base.clone();
                match key {
                    "alpha" => args.alpha = Some(v.parse().expect("validated")),
                    _ => args.l2u_patch_size = Some(v.parse().expect("validated")),
                }
                let kv = resolve_train_config(&args, seed, deterministic, &run_dir)?;
                cmd_train(&kv, &run_dir)
            })();
            if let Err(e) = &result {
                eprintln!("sweep point {key}={v} failed: {e}");
            }
            points.push(Point {
                value: v.clone(),
                run_dir,
                result,
            });
        }
    }

    // Aggregate CSV: one row per value, failures recorded.
    let mut csv = format!("{key},mean_dice,status,run_dir\n");
    let mut series = Vec::new();
    for p in &points {
        match &p.result {
            Ok(d) => {
                csv.push_str(&format!("{},{:.6},ok,{}\n", p.value, d, p.run_dir.display()));
                if let Ok(x) = p.value.parse::<f64>() {
                    series.push((x, *d));
                }
            }
            Err(e) => {
                let msg = e.to_string().replace(',', ";").replace('\n', " ");
                csv.push_str(&format!("{},,failed: {msg},{}\n", p.value, p.run_dir.display()));
            }
        }
    }
    fs::write(sweep_dir.join("sweep.csv"), &csv)
        .map_err(|e| Error::io(sweep_dir.join("sweep.csv"), e))?;
    if series.len() >= 2 {
        let chart = svg::line_chart(
            &format!("mean test dice vs {key}"),
            key,
            "mean dice",
            &[("mean dice".to_string(), series)],
        );
        fs::write(sweep_dir.join("sweep.svg"), chart)
            .map_err(|e| Error::io(sweep_dir.join("sweep.svg"), e))?;
    }
    println!("sweep artifacts in {}", sweep_dir.display());
    Ok(())
}

fn push_train_flags(cmd: &mut std::process::Command, base: &TrainArgs, key: &str, value: &str) {
    let mut arg_opt = |flag: &str, v: Option<String>| {
        if let Some(v) = v {
            cmd.arg(flag).arg(v);
        }
    };
    arg_opt(
        "--alpha",
        if key == "alpha" {
            Some(value.to_string())
        } else {
            base.alpha.map(|v| v.to_string())
        },
    );
    arg_opt(
        "--l2u-patch-size",
        if key == "patch_size" {
            Some(value.to_string())
        } else {
            base.l2u_patch_size.map(|v| v.to_string())
        },
    );
    arg_opt("--iters", base.iters.map(|v| v.to_string()));
    arg_opt("--lr", base.lr.map(|v| v.to_string()));
    arg_opt("--batch-size", base.batch_size.map(|v| v.to_string()));
    arg_opt("--momentum", base.momentum.map(|v| v.to_string()));
    arg_opt("--weight-decay", base.weight_decay.map(|v| v.to_string()));
    arg_opt(
        "--checkpoint-every",
        base.checkpoint_every.map(|v| v.to_string()),
    );
    arg_opt("--model", base.model.clone());
    arg_opt("--dtype", base.dtype.clone());
    if base.no_augment {
        cmd.arg("--no-augment");
    }
}

fn read_mean_dice(run_dir: &Path) -> Result<f64> {
    let path = run_dir.join("metrics.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("mean,") {
            let dice = rest.split(',').next().unwrap_or_default();
            return dice
                .parse()
                .map_err(|_| Error::config(format!("bad mean dice '{dice}' in {}", path.display())));
        }
    }
    Err(Error::config(format!("no mean row in {}", path.display())))
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn cmd_report(dir: &Path) -> Result<()> {
    if dir.join("loss.csv").is_file() {
        report_run(dir)
    } else if dir.join("sweep.csv").is_file() {
        report_sweep(dir)
    } else {
        Err(Error::config(format!(
            "{} holds neither loss.csv (run) nor sweep.csv (sweep)",
            dir.display()
        )))
    }
}

fn report_run(dir: &Path) -> Result<()> {
    let loss_path = dir.join("loss.csv");
    let text = fs::read_to_string(&loss_path).map_err(|e| Error::io(&loss_path, e))?;
    let mut rows: Vec<(f64, f64, f64, f64)> = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: loss_path.clone(),
                line: lineno + 1,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                path: loss_path.clone(),
                line: lineno + 1,
                message: format!("bad number '{s}'"),
            })
        };
        rows.push((
            parse(fields[0])?,
            parse(fields[1])?,
            parse(fields[2])?,
            parse(fields[3])?,
        ));
    }
    if rows.is_empty() {
        return Err(Error::config(format!("{} has no loss rows", loss_path.display())));
    }
    let report_dir = dir.join("report");
    fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;

    let series = vec![
        (
            "loss_s".to_string(),
            rows.iter().map(|r| (r.0, r.2)).collect::<Vec<_>>(),
        ),
        (
            "loss_u".to_string(),
            rows.iter().map(|r| (r.0, r.3)).collect::<Vec<_>>(),
        ),
        (
            "total".to_string(),
            rows.iter().map(|r| (r.0, r.2 + r.3)).collect::<Vec<_>>(),
        ),
    ];
    fs::write(
        report_dir.join("loss_curve.svg"),
        svg::line_chart("training loss", "iteration", "loss", &series),
    )
    .map_err(|e| Error::io(report_dir.join("loss_curve.svg"), e))?;

    let mut summary = String::new();
    summary.push_str("== run summary ==\n");
    if dir.join("config.txt").is_file() {
        let cfg = fs::read_to_string(dir.join("config.txt"))
            .map_err(|e| Error::io(dir.join("config.txt"), e))?;
        summary.push_str("-- config --\n");
        summary.push_str(&cfg);
    }
    let last = rows.last().expect("nonempty");
    summary.push_str("-- training --\n");
    summary.push_str(&format!("iterations={}\n", rows.len()));
    summary.push_str(&format!(
        "final: iter={} lr={:.6e} loss_s={:.6e} loss_u={:.6e}\n",
        last.0, last.1, last.2, last.3
    ));

    if dir.join("metrics.csv").is_file() {
        let metrics = fs::read_to_string(dir.join("metrics.csv"))
            .map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
        summary.push_str("-- test metrics --\n");
        summary.push_str(&metrics);
        let mut bars = Vec::new();
        for line in metrics.lines() {
            if line.starts_with('#') || line.starts_with("class,") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() == 5 {
                if let Ok(d) = fields[1].parse::<f64>() {
                    bars.push((format!("class {}", fields[0]), d));
                }
            }
        }
        if !bars.is_empty() {
            fs::write(
                report_dir.join("metrics.svg"),
                svg::bar_chart("test dice per class", "dice", &bars),
            )
            .map_err(|e| Error::io(report_dir.join("metrics.svg"), e))?;
        }
    }
    fs::write(report_dir.join("summary.txt"), &summary)
        .map_err(|e| Error::io(report_dir.join("summary.txt"), e))?;
    print!("{summary}");
    println!("report artifacts in {}", report_dir.display());
    Ok(())
}

fn report_sweep(dir: &Path) -> Result<()> {
    let path = dir.join("sweep.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    if text.lines().count() < 2 {
        return Err(Error::config(format!("{} has no sweep rows", path.display())));
    }
    let report_dir = dir.join("report");
    fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;
    let mut summary = String::from("== sweep summary ==\n");
    summary.push_str(&text);
    fs::write(report_dir.join("summary.txt"), &summary)
        .map_err(|e| Error::io(report_dir.join("summary.txt"), e))?;
    let mut series = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() >= 3 && fields[2] == "ok" {
            if let (Ok(x), Ok(y)) = (fields[0].parse::<f64>(), fields[1].parse::<f64>()) {
                series.push((x, y));
            }
        }
    }
    if series.len() >= 2 {
        let axis = text.lines().next().unwrap_or("x").split(',').next().unwrap_or("x").to_string();
        fs::write(
            report_dir.join("sweep.svg"),
            svg::line_chart(
                &format!("mean test dice vs {axis}"),
                &axis,
                "mean dice",
                &[("mean dice".to_string(), series)],
            ),
        )
        .map_err(|e| Error::io(report_dir.join("sweep.svg"), e))?;
    }
    print!("{summary}");
    Ok(())
}
