use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use srt_core::cli_io::config::{ConfigError, ExperimentConfig, KEYS};
use srt_core::cli_io::csv_io::{combined_csv, fmt_value, read_metrics_csv, CsvError};
use srt_core::cli_io::experiments::{curriculum_train_set, probe_log, run_climb, run_on, run_ttt, verdict};
use srt_core::cli_io::presets::{self, PRESETS};
use srt_core::cli_io::rundir::{
    gap_curve_csv, metric_series, read_text, DatasetFingerprint, RunDir, RunDirError, RunManifest,
};
use srt_core::cli_io::svg::{render_svg, PlotStyle};
use srt_core::metrics::{evaluate, gv_gap_curve, MetricsRow};
use srt_core::policy::{read_checkpoint, write_checkpoint};
use srt_core::rewards::{build_label_table, read_label_table, write_label_table, LabelMode};
use srt_core::task_env::{curriculum_score, export_dataset};
use srt_core::trainer::{eval_seed, TrainError};

const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_RUNTIME: u8 = 5;

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

#[derive(Parser)]
#[command(name = "srt", version, about = "Self-rewarded training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Named preset to start from.
    #[arg(long)]
    preset: Option<String>,
    /// Config file applied on top of the preset (or the defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the fully resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (default: runs/<name>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config or preset and write a run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Offline label table for `train.label_mode = Offline`.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Recompute the metrics row of a checkpoint in a run directory.
    Eval {
        /// Run directory written by `train`.
        run: PathBuf,
        #[arg(long)]
        step: Option<u64>,
        /// Evaluate `checkpoints/best` instead of a step checkpoint.
        #[arg(long, conflicts_with = "step")]
        best: bool,
        /// Also print the generation-verification gap curve.
        #[arg(long)]
        gap: bool,
    },
    /// Build an offline label table from the frozen base policy.
    Labels {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the training set with the base policy and write the kept subset.
    Curriculum {
        #[command(flatten)]
        run: RunArgs,
        /// Also train on the subset.
        #[arg(long)]
        train: bool,
    },
    /// Ground truth on the first level, then self-labelling on the rest.
    Climb {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Self-labelled training on the unlabeled test prompts.
    Ttt {
        #[command(flatten)]
        run: RunArgs,
    },
    /// One run per value of a single config key, plus a combined CSV.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Config key, e.g. `n_per_prompt` or `train.entropy_alpha`.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Render metrics CSV columns as SVG line charts.
    Plot {
        csv: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "avg_at_k,maj_at_k")]
        y: Vec<String>,
        /// Directory for the SVG files (default: `plots/` next to the CSV).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the shipped presets.
    Presets,
}

fn resolve_key(key: &str) -> Result<String> {
    if KEYS.contains(&key) || key.starts_with("accept.") || key.starts_with("golden.") {
        return Ok(key.to_string());
    }
    let matches: Vec<&str> = KEYS
        .iter()
        .copied()
        .filter(|k| k.rsplit('.').next() == Some(key))
        .collect();
    match matches.as_slice() {
        [one] => Ok(one.to_string()),
        [] => Err(ConfigError::UnknownKey(key.to_string()).into()),
        many => Err(UsageError(format!("ambiguous key `{key}`: {}", many.join(", "))).into()),
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.preset {
        Some(name) => presets::load(name)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = &args.config {
        let text = read_text(path)?;
        config.apply_text(&text)?;
    }
    for entry in &args.overrides {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got `{entry}`")))?;
        config.set(&resolve_key(k.trim())?, v.trim())?;
    }
    if let Some(seed) = args.seed {
        config = config.with_seed(seed);
    }
    config.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(config)
}

fn out_dir(run: &RunArgs, config: &ExperimentConfig) -> PathBuf {
    run.out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-seed{}", config.name, config.seed())))
}

fn print_config(config: &ExperimentConfig) {
    print!("{}", config.to_text());
}

fn train_into(
    config: &ExperimentConfig,
    dir: &Path,
    labels: Option<srt_core::rewards::LabelTable>,
    subset: bool,
) -> Result<Vec<MetricsRow>> {
    let (train, test) = config.datasets()?;
    let train = if subset { curriculum_train_set(config, &train)? } else { train };
    let manifest = RunManifest::new(
        config,
        vec![DatasetFingerprint::of("train", &train), DatasetFingerprint::of("test", &test)],
    );
    let mut sink = RunDir::create(dir, &manifest)?;
    let state = run_on(config, &train, &test, labels, &mut sink)?;
    let gap = gv_gap_curve(
        &state.params,
        &test,
        config.train.eval_k,
        &config.gap_thresholds,
        eval_seed(config.seed(), state.step),
    )?;
    sink.write_file("gap_curve.csv", &gap_curve_csv(&gap))?;
    let mut summary = format!("final_step = {}\nskipped_steps = {}\n", state.step, state.skipped_steps);
    if let Some((step, score)) = state.best_val {
        let _ = writeln!(summary, "best_step = {step}\nbest_val_avg_at_k = {}", fmt_value(score));
    }
    match verdict(config, &state) {
        Some(v) => {
            let _ = writeln!(summary, "collapsed = {}", v.collapsed);
            if let Some(t) = v.trigger_step {
                let _ = writeln!(summary, "trigger_step = {t}");
            }
        }
        None => summary.push_str("collapsed = undetermined\n"),
    }
    for w in &state.warnings {
        let _ = writeln!(summary, "warning = {w}");
    }
    sink.write_file("summary", &summary)?;
    sink.finish()?;
    Ok(state.metrics_history)
}

fn cmd_train(run: &RunArgs, labels: Option<&Path>) -> Result<()> {
    let config = resolve_config(&run.config)?;
    if run.config.print_config {
        print_config(&config);
        return Ok(());
    }
    let table = match labels {
        Some(p) => Some(read_label_table(&read_text(p)?)?),
        None if config.train.label_mode == LabelMode::Offline => {
            return Err(UsageError("Offline label mode needs --labels FILE".into()).into())
        }
        None => None,
    };
    let dir = out_dir(run, &config);
    let rows = train_into(&config, &dir, table, false)?;
    let last = rows.last().ok_or_else(|| anyhow!("run produced no metrics"))?;
    println!(
        "{}: step {} avg_at_k {:.4} maj_at_k {:.4}",
        dir.display(),
        last.step,
        last.avg_at_k,
        last.maj_at_k
    );
    Ok(())
}

fn cmd_eval(run: &Path, step: Option<u64>, best: bool, gap: bool) -> Result<()> {
    if step.is_none() && !best {
        return Err(UsageError("eval needs --step N or --best".into()).into());
    }
    let config = ExperimentConfig::from_text(&read_text(&run.join("config.resolved"))?)?;
    let (ckpt, step) = match (step, best) {
        (Some(s), _) => (run.join("checkpoints").join(format!("step-{s}")), s),
        (None, true) => {
            let s = read_text(&run.join("checkpoints/best.step"))?;
            let s = s.trim().parse().context("checkpoints/best.step")?;
            (run.join("checkpoints/best"), s)
        }
        (None, false) => unreachable!(),
    };
    let params = read_checkpoint(&read_text(&ckpt)?)?;
    let (_, test) = config.datasets()?;
    let seed = eval_seed(config.seed(), step);
    let row = evaluate(&params, &config.base_params(), &test, config.train.eval_k, seed, step, 0.0)?;
    print!("{}", srt_core::cli_io::csv_io::metrics_csv_string(&[row]));
    if gap {
        let curve = gv_gap_curve(&params, &test, config.train.eval_k, &config.gap_thresholds, seed)?;
        print!("{}", gap_curve_csv(&curve));
    }
    Ok(())
}

fn cmd_labels(args: &ConfigArgs, out: &Path) -> Result<()> {
    let config = resolve_config(args)?;
    if args.print_config {
        print_config(&config);
        return Ok(());
    }
    let (train, _) = config.datasets()?;
    let table = build_label_table(&config.base_params(), &train, config.train.label_votes(), config.seed())?;
    fs::write(out, write_label_table(&table)).with_context(|| out.display().to_string())?;
    println!("{}: {} labels", out.display(), table.entries.len());
    Ok(())
}

fn cmd_curriculum(run: &RunArgs, then_train: bool) -> Result<()> {
    let config = resolve_config(&run.config)?;
    if run.config.print_config {
        print_config(&config);
        return Ok(());
    }
    let dir = out_dir(run, &config);
    let (train, _) = config.datasets()?;
    let log = probe_log(&config, &train)?;
    let subset = curriculum_train_set(&config, &train)?;
    fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
    let mut scores = String::from("prompt_id,score\n");
    for p in &train.prompts {
        let s = curriculum_score(p, &log.answers[&p.id], config.task.alphabet_size, config.curriculum.criterion);
        let _ = writeln!(scores, "{},{}", p.id, fmt_value(s));
    }
    fs::write(dir.join("scores.csv"), scores)?;
    fs::write(dir.join("subset.dataset"), export_dataset(&subset))?;
    println!("{}: kept {} of {} prompts", dir.display(), subset.len(), train.len());
    if then_train {
        let rows = train_into(&config, &dir.join("run"), None, true)?;
        if let Some(last) = rows.last() {
            println!("step {} avg_at_k {:.4} maj_at_k {:.4}", last.step, last.avg_at_k, last.maj_at_k);
        }
    }
    Ok(())
}

fn cmd_climb(run: &RunArgs) -> Result<()> {
    let config = resolve_config(&run.config)?;
    if run.config.print_config {
        print_config(&config);
        return Ok(());
    }
    let dir = out_dir(run, &config);
    fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
    fs::write(dir.join("config.resolved"), config.to_text())?;
    let levels = run_climb(&config)?;
    let mut summary = String::from("level,start_maj_at_k,end_maj_at_k,start_avg_at_k,end_avg_at_k\n");
    for lr in &levels {
        let h = &lr.state.metrics_history;
        let (first, last) = (h.first(), h.last());
        let (first, last) = first.zip(last).ok_or_else(|| anyhow!("level {} has no metrics", lr.level))?;
        let _ = writeln!(
            summary,
            "{},{},{},{},{}",
            lr.level,
            fmt_value(first.maj_at_k),
            fmt_value(last.maj_at_k),
            fmt_value(first.avg_at_k),
            fmt_value(last.avg_at_k)
        );
        let sub = dir.join(format!("level-{}", lr.level));
        fs::create_dir_all(&sub)?;
        fs::write(sub.join("metrics.csv"), srt_core::cli_io::csv_io::metrics_csv_string(h))?;
        fs::write(sub.join("final.checkpoint"), write_checkpoint(&lr.state.params))?;
        println!(
            "level {}: maj_at_k {:.4} -> {:.4}",
            lr.level, first.maj_at_k, last.maj_at_k
        );
    }
    fs::write(dir.join("climb.csv"), summary)?;
    Ok(())
}

fn cmd_ttt(run: &RunArgs) -> Result<()> {
    let config = resolve_config(&run.config)?;
    if run.config.print_config {
        print_config(&config);
        return Ok(());
    }
    let dir = out_dir(run, &config);
    let (_, test) = config.datasets()?;
    let manifest = RunManifest::new(&config, vec![DatasetFingerprint::of("test", &test)]);
    let mut sink = RunDir::create(&dir, &manifest)?;
    let outcome = run_ttt(&config, &mut sink)?;
    let mut preds = String::from("prompt_id,prediction\n");
    for (id, p) in &outcome.predictions {
        let _ = writeln!(preds, "{id},{}", p.map_or_else(|| "abstain".to_string(), |a| a.to_string()));
    }
    sink.write_file("predictions.csv", &preds)?;
    sink.write_file(
        "summary",
        &format!(
            "baseline_maj = {}\nfinal_maj = {}\n",
            fmt_value(outcome.baseline_maj),
            fmt_value(outcome.final_maj)
        ),
    )?;
    sink.finish()?;
    println!(
        "{}: maj {:.4} -> {:.4}",
        dir.display(),
        outcome.baseline_maj,
        outcome.final_maj
    );
    Ok(())
}

fn cmd_sweep(run: &RunArgs, axis: &str, values: &[String]) -> Result<()> {
    let config = resolve_config(&run.config)?;
    let key = resolve_key(axis)?;
    if run.config.print_config {
        print_config(&config);
        return Ok(());
    }
    let dir = out_dir(run, &config);
    let mut tables = Vec::new();
    for v in values {
        let mut c = config.clone();
        c.set(&key, v)?;
        c.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let label = format!("{key}={v}");
        let rows = train_into(&c, &dir.join(&label), None, false)?;
        if let Some(last) = rows.last() {
            println!("{label}: step {} avg_at_k {:.4} maj_at_k {:.4}", last.step, last.avg_at_k, last.maj_at_k);
        }
        tables.push((label, rows));
    }
    fs::write(dir.join("combined.csv"), combined_csv(&tables))?;
    Ok(())
}

fn cmd_plot(csv: &Path, columns: &[String], out: Option<&Path>) -> Result<()> {
    let rows = read_metrics_csv(fs::File::open(csv).with_context(|| csv.display().to_string())?)?;
    let out = out.map_or_else(|| csv.parent().unwrap_or(Path::new(".")).join("plots"), Path::to_path_buf);
    fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
    for col in columns {
        let series = metric_series(&rows, col).ok_or_else(|| UsageError(format!("unknown column `{col}`")))?;
        let style = PlotStyle {
            title: col.clone(),
            y_label: col.clone(),
            ..PlotStyle::default()
        };
        let path = out.join(format!("{col}.svg"));
        fs::write(&path, render_svg(&[series], &style)?).with_context(|| path.display().to_string())?;
        println!("{}", path.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, labels } => cmd_train(&run, labels.as_deref()),
        Command::Eval { run, step, best, gap } => cmd_eval(&run, step, best, gap),
        Command::Labels { config, out } => cmd_labels(&config, &out),
        Command::Curriculum { run, train } => cmd_curriculum(&run, train),
        Command::Climb { run } => cmd_climb(&run),
        Command::Ttt { run } => cmd_ttt(&run),
        Command::Sweep { run, axis, values } => cmd_sweep(&run, &axis, &values),
        Command::Plot { csv, y, out } => cmd_plot(&csv, &y, out.as_deref()),
        Command::Presets => {
            for p in PRESETS {
                println!("{}\t{}\t{:?}", p.name, p.figure, p.kind);
            }
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<std::io::Error>() || cause.is::<RunDirError>() || cause.is::<CsvError>() {
            return EXIT_IO;
        }
        if let Some(TrainError::Sink(_)) = cause.downcast_ref::<TrainError>() {
            return EXIT_IO;
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("srt: {}", format!("{err:#}").replace('\n', " "));
            ExitCode::from(exit_code(&err))
        }
    }
}
