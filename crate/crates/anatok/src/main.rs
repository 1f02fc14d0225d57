//! Command-line entry point: dataset generation, pre-training, anomaly
//! detection, linear probing, and plot regeneration. Every command is
//! deterministic given the configuration and seeds; exit codes are
//! 0 success, 2 usage/config, 3 data/persistence, 4 numerical.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use anatok::config::RunConfig;
use anatok::error::{Error, Result};
use anatok::evaluate::{
    build_holdout, cluster_quality, linear_probe, metrics_from_scores, score_image,
    MetricsReport, ProbeConfig,
};
use anatok::phantom::{build_dataset, load_dataset};
use anatok::plot::{render_loss_curve, render_reconstruction_grid, render_score_histogram};
use anatok::trainer::{load_checkpoint, load_train_images, pretrain, resume_loop};

#[derive(Parser)]
#[command(name = "anatok", version, about = "Token-wise self-supervised pre-training and anomaly detection on synthetic radiograph phantoms")]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// override a single configuration key, repeatable (key=value)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// print the fully resolved configuration and exit
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset
    GenData(GenDataArgs),
    /// Pre-train on a dataset
    Pretrain(PretrainArgs),
    /// Score a held-out split and report detection metrics
    Detect(EvalArgs),
    /// Linear probe on frozen features
    Probe(EvalArgs),
    /// Re-render the loss curve from a metrics log
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// dataset directory (from gen-data)
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// continue from a checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// score with the student encoder instead of the EMA teacher
    #[arg(long)]
    student: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// metrics log from pretrain
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Error::persistence(path, e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &cli.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.train.model.img_h = cfg.phantom.height;
    cfg.train.model.img_w = cfg.phantom.width;
    cfg.phantom.patch = cfg.train.model.patch;
    cfg.validate()?;
    Ok(cfg)
}

fn write_report(report: &MetricsReport, extra: &[(String, String)], path: &Path) -> Result<()> {
    let mut text = format!(
        "auc={:.6}\nacc={:.6}\nf1={:.6}\nthreshold={:.6e}\ntp={}\nfp={}\ntn={}\nfn={}\n",
        report.auc, report.acc, report.f1, report.threshold, report.tp, report.fp, report.tn,
        report.fn_
    );
    for (k, v) in extra {
        text.push_str(&format!("{k}={v}\n"));
    }
    fs::write(path, text).map_err(|e| Error::persistence(path, e))
}

fn cmd_gen_data(cfg: &RunConfig, args: &GenDataArgs) -> Result<()> {
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let manifest = build_dataset(args.count, seed, &args.out, &cfg.phantom)?;
    println!(
        "wrote {} images ({}x{}) and manifest to {}",
        manifest.header.count,
        manifest.header.height,
        manifest.header.width,
        args.out.display()
    );
    Ok(())
}

/// Mean of the l_total column per step from a metrics log; tolerates a
/// truncated final line (warns once).
fn read_total_losses(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::persistence(path, e))?;
    let mut values = Vec::new();
    let mut warned = false;
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.get(4).and_then(|f| f.parse::<f64>().ok()) {
            Some(v) => values.push(v),
            None => {
                if !warned {
                    eprintln!("warning: skipping malformed metrics line(s) in {}", path.display());
                    warned = true;
                }
            }
        }
    }
    if values.is_empty() {
        return Err(Error::Evaluation(format!("no parsable steps in {}", path.display())));
    }
    Ok(values)
}

fn cmd_pretrain(cfg: &RunConfig, args: &PretrainArgs) -> Result<()> {
    let manifest = load_dataset(&args.data)?;
    let outcome = match &args.resume {
        None => pretrain(&manifest, &cfg.train, &args.out)?,
        Some(ckpt) => {
            let mut state = load_checkpoint(ckpt)?;
            let images = load_train_images(&manifest)?;
            fs::create_dir_all(&args.out).map_err(|e| Error::persistence(&args.out, e))?;
            resume_loop(&mut state, &images, &args.out, None, None)?
        }
    };
    let losses = read_total_losses(&outcome.metrics_log)?;
    let curve = args.out.join("loss_curve.png");
    render_loss_curve(&losses, &curve)?;
    println!(
        "checkpoint: {}\nmetrics: {}\nloss curve: {}",
        outcome.checkpoint.display(),
        outcome.metrics_log.display(),
        curve.display()
    );
    Ok(())
}

fn cmd_detect(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let mcfg = &state.cfg.model;
    let enc = if args.student { &state.params.enc } else { &state.teacher.enc };
    let samples = build_holdout(
        &cfg.phantom,
        mcfg.patch,
        (state.cfg.r_lo, state.cfg.r_hi),
        cfg.eval.seed,
        cfg.eval.normal_count,
        cfg.eval.abnormal_count,
    )?;
    fs::create_dir_all(&args.out).map_err(|e| Error::persistence(&args.out, e))?;

    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut table = String::from("id\tscore\tlabel\n");
    let mut triplets = Vec::new();
    for s in &samples {
        let (score, _) = score_image(enc, &state.params.dec, mcfg, &s.image)?;
        table.push_str(&format!(
            "{}\t{:.9e}\t{}\n",
            s.id,
            score,
            if s.normal { "normal" } else { "abnormal" }
        ));
        scores.push(score);
        labels.push(s.normal);
        if !s.normal && triplets.len() < 4 {
            let z = anatok::backbone::encode(enc, &s.image, mcfg)?;
            let (y, _) = anatok::backbone::decode(&state.params.dec, &z, mcfg)?;
            let recon = anatok::backbone::unpatchify(&y, mcfg.patch, mcfg.img_h, mcfg.img_w);
            triplets.push((s.source.clone().expect("abnormal has source"), s.image.clone(), recon));
        }
    }
    let report = metrics_from_scores(&scores, &labels)?;
    let scores_path = args.out.join("scores.tsv");
    fs::write(&scores_path, table).map_err(|e| Error::persistence(&scores_path, e))?;
    write_report(&report, &[], &args.out.join("detect_report.txt"))?;
    let normal_scores: Vec<f64> = scores
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let abnormal_scores: Vec<f64> = scores
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    render_score_histogram(&normal_scores, &abnormal_scores, &args.out.join("score_histogram.png"))?;
    render_reconstruction_grid(&triplets, &args.out.join("reconstructions.png"))?;
    println!(
        "detect: auc={:.4} acc={:.4} f1={:.4} (normal = positive class, {} samples)",
        report.auc,
        report.acc,
        report.f1,
        samples.len()
    );
    Ok(())
}

fn cmd_probe(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let mcfg = &state.cfg.model;
    let enc = if args.student { &state.params.enc } else { &state.teacher.enc };
    let samples = build_holdout(
        &cfg.phantom,
        mcfg.patch,
        (state.cfg.r_lo, state.cfg.r_hi),
        cfg.eval.seed,
        cfg.eval.normal_count,
        cfg.eval.abnormal_count,
    )?;
    // alternate samples of each class into train/test halves
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut per_class = [0usize; 2];
    for s in &samples {
        let c = usize::from(s.normal);
        if per_class[c] % 2 == 0 {
            train.push((&s.image, s.normal));
        } else {
            test.push((&s.image, s.normal));
        }
        per_class[c] += 1;
    }
    let pcfg = ProbeConfig {
        epochs: cfg.eval.probe_epochs,
        lr: cfg.eval.probe_lr,
        l2: cfg.eval.probe_l2,
    };
    let report = linear_probe(enc, mcfg, &train, &test, &pcfg)?;
    // quantitative stand-in for feature-space cluster plots
    let cluster_imgs: Vec<&anatok::phantom::Image> = samples
        .iter()
        .filter(|s| s.normal)
        .take(16)
        .map(|s| &s.image)
        .collect();
    let silhouette = cluster_quality(enc, mcfg, &cluster_imgs)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::persistence(&args.out, e))?;
    write_report(
        &report,
        &[("position_silhouette".into(), format!("{silhouette:.6}"))],
        &args.out.join("probe_report.txt"),
    )?;
    println!(
        "probe: auc={:.4} acc={:.4} f1={:.4} silhouette={:.4}",
        report.auc, report.acc, report.f1, silhouette
    );
    Ok(())
}

fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let losses = read_total_losses(&args.log)?;
    render_loss_curve(&losses, &args.out)?;
    println!("rendered {} steps to {}", losses.len(), args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if cli.print_config {
        print!("{}", cfg.render());
        return Ok(());
    }
    match &cli.command {
        None => Err(Error::Config("no subcommand given (see --help)".into())),
        Some(Command::GenData(a)) => cmd_gen_data(&cfg, a),
        Some(Command::Pretrain(a)) => cmd_pretrain(&cfg, a),
        Some(Command::Detect(a)) => cmd_detect(&cfg, a),
        Some(Command::Probe(a)) => cmd_probe(&cfg, a),
        Some(Command::Plot(a)) => cmd_plot(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
