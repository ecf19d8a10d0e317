//! Command-line harness: dataset ingestion, configuration, experiment
//! orchestration and metrics emission.
//!
//! Exit codes: 0 success, 2 config error, 3 data-format error,
//! 4 numerical divergence.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use wtkr::checkpoint::{self, CheckpointMeta};
use wtkr::config::{Overrides, RunConfig};
use wtkr::data::{self, Dataset};
use wtkr::error::Error;
use wtkr::eval;
use wtkr::model::ModelParams;
use wtkr::trainer::{self, mix_seed};

#[derive(Parser)]
#[command(
    name = "wtkr",
    about = "Wasserstein-graph Tikhonov regularization toolkit",
    version
)]
struct Cli {
    /// Structured TOML configuration file; omitted fields use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Penalty metric override: euclid | wass.
    #[arg(long, global = true)]
    metric: Option<String>,
    /// Regularization strength override.
    #[arg(long, global = true)]
    strength: Option<f64>,
    /// Ground-metric radius override.
    #[arg(long, global = true)]
    radius: Option<usize>,
    /// Attack kind override: fgsm | ifgsm.
    #[arg(long, global = true)]
    attack: Option<String>,
    /// Attack budget override.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Iterated-attack step size override.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Iterated-attack step count override.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Checkpoint path (evaluation commands); defaults to <out>/model.wtkr.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the configured objective and write metrics + checkpoint.
    Train,
    /// Evaluate natural and robust test error of a trained model.
    AttackEval,
    /// Mean label flips over translated test-image sequences.
    TranslateEval,
    /// Monte-Carlo check of the second-order expansion over an eta grid.
    VerifyExpansion,
    /// Print the pixel graph induced by the configuration.
    GraphInfo,
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => 2,
        Error::Format { .. }
        | Error::CountMismatch(_)
        | Error::UnsupportedVersion { .. }
        | Error::Io(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        metric: cli.metric.clone(),
        strength: cli.strength,
        radius: cli.radius,
        attack: cli.attack.clone(),
        epsilon: cli.epsilon,
        alpha: cli.alpha,
        steps: cli.steps,
    })?;
    Ok(cfg)
}

fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), Error> {
    match cfg.data.source.as_str() {
        "synth" => {
            let train = data::synth_digits(cfg.data.n_train, cfg.data.synth_seed)?;
            let test = data::synth_digits(cfg.data.n_test, mix_seed(cfg.data.synth_seed, 1))?;
            Ok((train, test))
        }
        "idx" => {
            let train = data::ingest_idx(
                Path::new(&cfg.data.train_images),
                Path::new(&cfg.data.train_labels),
            )?;
            let test = data::ingest_idx(
                Path::new(&cfg.data.test_images),
                Path::new(&cfg.data.test_labels),
            )?;
            Ok((train, test))
        }
        "csv" => {
            let train = data::ingest_csv(
                Path::new(&cfg.data.train_csv),
                cfg.graph.height,
                cfg.graph.width,
            )?;
            let test = data::ingest_csv(
                Path::new(&cfg.data.test_csv),
                cfg.graph.height,
                cfg.graph.width,
            )?;
            Ok((train, test))
        }
        other => Err(Error::Config(format!("unknown data source '{other}'"))),
    }
}

fn checkpoint_path(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.checkpoint
        .clone()
        .unwrap_or_else(|| Path::new(&cfg.output.dir).join("model.wtkr"))
}

fn load_model(cli: &Cli, cfg: &RunConfig) -> Result<ModelParams, Error> {
    let path = checkpoint_path(cli, cfg);
    let (params, meta) = checkpoint::load_checkpoint(&path)?;
    if !meta.config_hash.is_empty() && meta.config_hash != cfg.effective_hash() {
        eprintln!(
            "warning: checkpoint {} was trained under a different config (hash {} != {})",
            path.display(),
            &meta.config_hash[..12.min(meta.config_hash.len())],
            &cfg.effective_hash()[..12]
        );
    }
    Ok(params)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf, Error> {
    let dir = PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Train => cmd_train(cli, &cfg),
        Command::AttackEval => cmd_attack_eval(cli, &cfg),
        Command::TranslateEval => cmd_translate_eval(cli, &cfg),
        Command::VerifyExpansion => cmd_verify_expansion(&cfg),
        Command::GraphInfo => cmd_graph_info(&cfg),
    }
}

fn cmd_train(cli: &Cli, cfg: &RunConfig) -> Result<(), Error> {
    let graph = Arc::new(cfg.graph.build()?);
    let (train_set, test_set) = load_datasets(cfg)?;
    if train_set.height != cfg.graph.height || train_set.width != cfg.graph.width {
        return Err(Error::Config(format!(
            "dataset is {}x{} but the graph is {}x{}",
            train_set.height, train_set.width, cfg.graph.height, cfg.graph.width
        )));
    }
    let classes = train_set.num_classes.max(test_set.num_classes);
    let input_dim = graph.vertex_count() * train_set.channels;
    let init = ModelParams::init(
        input_dim,
        &cfg.model.hidden,
        classes,
        cfg.model.head,
        cfg.model.init_seed,
    )?;
    let train_cfg = cfg.train_config()?;
    let attack_cfg = cfg.attack.to_attack_config();
    let robust = cfg.eval.robust_during_training.then_some(&attack_cfg);

    let outcome = trainer::train(init, &graph, &train_set, &test_set, &train_cfg, robust)?;

    let out = ensure_out_dir(cfg)?;
    std::fs::write(out.join("metrics.csv"), eval::metrics_to_csv(&outcome.metrics))?;
    let meta = CheckpointMeta {
        config_hash: cfg.effective_hash(),
        epoch: train_cfg.epochs as u64,
        seed: train_cfg.seed,
    };
    let ckpt = checkpoint_path(cli, cfg);
    if let Some(parent) = ckpt.parent() {
        std::fs::create_dir_all(parent)?;
    }
    checkpoint::save_checkpoint(&outcome.params, &meta, &ckpt)?;

    if let Some(last) = outcome.metrics.last() {
        println!(
            "trained {} epochs: train_loss {:.6}, natural test error {:.2}%",
            last.epoch, last.train_loss, last.natural_test_error_pct
        );
    }
    println!("metrics: {}", out.join("metrics.csv").display());
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_attack_eval(cli: &Cli, cfg: &RunConfig) -> Result<(), Error> {
    let (_, test_set) = load_datasets(cfg)?;
    let params = load_model(cli, cfg)?;
    let attack_cfg = cfg.attack.to_attack_config();
    let natural = eval::natural_error_pct(&params, &test_set)?;
    let graph = Arc::new(cfg.graph.build()?);
    let ctx = wtkr::attacks::MetricBallContext {
        graph: &graph,
        floor: cfg.graph.mass_floor,
    };
    let robust = eval::evaluate_robust_with_metric(
        &params,
        &test_set,
        &attack_cfg,
        cfg.regularizer.loss,
        Some(&ctx),
    )?;
    let out = ensure_out_dir(cfg)?;
    let csv = format!(
        "attack,epsilon,alpha,steps,natural_error_pct,robust_error_pct\n{:?},{},{},{},{},{}\n",
        cfg.attack.kind, cfg.attack.epsilon, cfg.attack.alpha, cfg.attack.steps, natural, robust
    )
    .to_lowercase();
    std::fs::write(out.join("attack_eval.csv"), csv)?;
    println!("natural test error: {natural:.2}%");
    println!("robust test error:  {robust:.2}%");
    Ok(())
}

fn cmd_translate_eval(cli: &Cli, cfg: &RunConfig) -> Result<(), Error> {
    let (_, test_set) = load_datasets(cfg)?;
    let params = load_model(cli, cfg)?;
    let out = ensure_out_dir(cfg)?;
    let mut csv = String::from("direction,max_shift,samples,mean_flips\n");
    for (name, direction) in [
        ("horizontal", eval::TranslationDirection::Horizontal),
        ("vertical", eval::TranslationDirection::Vertical),
    ] {
        let flips = eval::evaluate_translation_flips(
            &params,
            &test_set,
            direction,
            cfg.eval.translation_max_shift,
            cfg.eval.translation_samples,
            cfg.eval.translation_seed,
        )?;
        csv.push_str(&format!(
            "{name},{},{},{flips}\n",
            cfg.eval.translation_max_shift,
            cfg.eval.translation_samples.min(test_set.len()),
        ));
        println!("{name} translation flips (mean): {flips:.4}");
    }
    std::fs::write(out.join("translate_eval.csv"), csv)?;
    Ok(())
}

fn cmd_verify_expansion(cfg: &RunConfig) -> Result<(), Error> {
    let graph = Arc::new(cfg.graph.build()?);
    let verify_cfg = cfg.verify_config()?;
    let rows = eval::run_verify_expansion(&graph, &verify_cfg)?;
    let out = ensure_out_dir(cfg)?;
    std::fs::write(out.join("expansion.csv"), eval::expansion_to_csv(&rows))?;
    for r in &rows {
        match r.ratio {
            Some(ratio) => println!(
                "eta {:.4}: empirical {:+.3e}, predicted {:+.3e}, ratio {:.4} (stderr {:.2e})",
                r.eta, r.empirical_delta, r.predicted_delta, ratio, r.stderr
            ),
            None => println!(
                "eta {:.4}: empirical {:+.3e}, predicted ~0, |difference| {:.3e} (stderr {:.2e})",
                r.eta,
                r.empirical_delta,
                (r.empirical_delta - r.predicted_delta).abs(),
                r.stderr
            ),
        }
    }
    println!("report: {}", out.join("expansion.csv").display());
    Ok(())
}

fn cmd_graph_info(cfg: &RunConfig) -> Result<(), Error> {
    let graph = cfg.graph.build()?;
    println!(
        "grid {}x{} radius {} ({})",
        graph.height(),
        graph.width(),
        graph.radius(),
        cfg.graph.weight_rule
    );
    println!("vertices: {}", graph.vertex_count());
    println!("edges: {}", graph.edges().len());
    println!("neighbor relations: {:?}", graph.neighbor_relations());
    let vol_sum: f64 = graph.volume().iter().sum();
    println!("volume form sum: {vol_sum:.12}");
    Ok(())
}
