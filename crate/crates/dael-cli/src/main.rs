//! `dael`: generate synthetic multi-domain data, train and evaluate the
//! shared-backbone multi-expert model, run the ablation suites, and render
//! augmentation previews.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{override_opt, CliConfig};
use dael_core::augment::{strong_augment, weak_augment, Image};
use dael_core::dataset::{load_dataset, save_dataset, DatasetView, DomainDataset};
use dael_core::evalbench::{ablation_suite, evaluate, ProtocolConfig, Suite};
use dael_core::losses::{ConsistencyTarget, EnsembleMode, PseudoLabelSource};
use dael_core::model::{load_checkpoint, save_checkpoint};
use dael_core::rng::Stream;
use dael_core::trainer::{train, Mode, PredictionPath};
use dael_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dael", version, about = "Multi-source domain-adaptive ensemble training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain dataset files.
    Gendata(GendataArgs),
    /// Train on all domains except the target.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set.
    Eval(EvalArgs),
    /// Run design-choice ablation suites.
    Ablate(AblateArgs),
    /// Write weak/strong augmentation previews as a PNG grid.
    PreviewAugment(PreviewArgs),
}

#[derive(Args)]
struct GendataArgs {
    /// Config file (flat TOML; flags override its values).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for domain{d}_{train,test}.ds files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<u16>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    train_per_domain: Option<usize>,
    #[arg(long)]
    test_per_domain: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Uda,
    Dg,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnsembleModeArg {
    Collaborative,
    Individual,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConsistencyTargetArg {
    ExpertPrediction,
    RealLabel,
}

#[derive(Clone, Copy, ValueEnum)]
enum PseudoLabelArg {
    ConfidentExpert,
    Ensemble,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredPathArg {
    Strong,
    Weak,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding domain{d}_{train,test}.ds files.
    #[arg(long)]
    data: PathBuf,
    /// Domain id held out as the target.
    #[arg(long)]
    target: u8,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Labeled batch size per source domain.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    target_batch: Option<usize>,
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Drop the consistency term.
    #[arg(long)]
    no_consistency: bool,
    #[arg(long, value_enum)]
    ensemble_mode: Option<EnsembleModeArg>,
    #[arg(long, value_enum)]
    consistency_target: Option<ConsistencyTargetArg>,
    #[arg(long, value_enum)]
    pseudo_labels: Option<PseudoLabelArg>,
    #[arg(long, value_enum)]
    pred_path: Option<PredPathArg>,
    #[arg(long)]
    augment_workers: Option<usize>,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.ck")]
    ckpt: PathBuf,
    /// Per-epoch history output (one JSON object per line).
    #[arg(long, default_value = "history.jsonl")]
    history: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Suite name (repeatable) or `all`.
    #[arg(long = "suite", required = true)]
    suites: Vec<String>,
    /// Number of seeds (1..=N).
    #[arg(long)]
    seeds: Option<usize>,
    /// Parallel run cap (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Line-delimited run records.
    #[arg(long, default_value = "ablation.jsonl")]
    out: PathBuf,
    /// Rendered table path.
    #[arg(long, default_value = "ablation.txt")]
    table: PathBuf,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    domain: u8,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "preview.png")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gendata(args) => gendata(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Ablate(args) => run_ablate(args),
        Command::PreviewAugment(args) => preview(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn domain_paths(dir: &Path, d: u8) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("domain{d}_train.ds")),
        dir.join(format!("domain{d}_test.ds")),
    )
}

fn load_domains(dir: &Path) -> Result<Vec<(DomainDataset, DomainDataset)>> {
    let mut out = Vec::new();
    for d in 0u8..=63 {
        let (train_path, test_path) = domain_paths(dir, d);
        if !train_path.exists() {
            break;
        }
        out.push((load_dataset(&train_path)?, load_dataset(&test_path)?));
    }
    if out.is_empty() {
        return Err(Error::Contract(format!(
            "no domain0_train.ds under {dir:?}; run `dael gendata` first"
        )));
    }
    Ok(out)
}

fn gendata(args: GendataArgs) -> Result<()> {
    let mut cfg = CliConfig::load_or_default(args.config.as_deref())?;
    override_opt(&mut cfg.synth.seed, args.seed);
    override_opt(&mut cfg.synth.num_classes, args.classes);
    override_opt(&mut cfg.synth.image_side, args.side);
    override_opt(&mut cfg.synth.train_per_domain, args.train_per_domain);
    override_opt(&mut cfg.synth.test_per_domain, args.test_per_domain);

    std::fs::create_dir_all(&args.out)?;
    let sets = dael_core::dataset::generate_synthetic(&cfg.synth)?;
    for (d, (train, test)) in sets.iter().enumerate() {
        let (train_path, test_path) = domain_paths(&args.out, d as u8);
        save_dataset(train, &train_path)?;
        save_dataset(test, &test_path)?;
        println!(
            "domain {d}: {} train / {} test -> {}",
            train.len(),
            test.len(),
            train_path.display()
        );
    }
    std::fs::write(args.out.join("gendata-config.toml"), cfg.to_toml())?;
    Ok(())
}

fn apply_train_flags(cfg: &mut CliConfig, args: &TrainArgs) {
    if let Some(mode) = args.mode {
        cfg.train.mode = match mode {
            ModeArg::Uda => Mode::Uda,
            ModeArg::Dg => Mode::Dg,
        };
    }
    override_opt(&mut cfg.train.seed, args.seed);
    override_opt(&mut cfg.train.epochs, args.epochs);
    override_opt(&mut cfg.train.lr0, args.lr0);
    override_opt(&mut cfg.train.momentum, args.momentum);
    override_opt(&mut cfg.train.weight_decay, args.weight_decay);
    override_opt(&mut cfg.train.per_domain_batch, args.batch);
    override_opt(&mut cfg.train.target_batch, args.target_batch);
    override_opt(&mut cfg.train.lambda_u, args.lambda_u);
    override_opt(&mut cfg.train.epsilon, args.epsilon);
    override_opt(&mut cfg.train.augment_workers, args.augment_workers);
    if args.no_consistency {
        cfg.train.use_consistency = false;
    }
    if let Some(v) = args.ensemble_mode {
        cfg.train.ensemble_mode = match v {
            EnsembleModeArg::Collaborative => EnsembleMode::Collaborative,
            EnsembleModeArg::Individual => EnsembleMode::Individual,
        };
    }
    if let Some(v) = args.consistency_target {
        cfg.train.consistency_target = match v {
            ConsistencyTargetArg::ExpertPrediction => ConsistencyTarget::ExpertPrediction,
            ConsistencyTargetArg::RealLabel => ConsistencyTarget::RealLabel,
        };
    }
    if let Some(v) = args.pseudo_labels {
        cfg.train.pseudo_label_source = match v {
            PseudoLabelArg::ConfidentExpert => PseudoLabelSource::ConfidentExpert,
            PseudoLabelArg::Ensemble => PseudoLabelSource::Ensemble,
        };
    }
    if let Some(v) = args.pred_path {
        cfg.train.prediction_path = match v {
            PredPathArg::Strong => PredictionPath::Strong,
            PredPathArg::Weak => PredictionPath::Weak,
        };
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = CliConfig::load_or_default(args.config.as_deref())?;
    apply_train_flags(&mut cfg, &args);

    let domains = load_domains(&args.data)?;
    let target = args.target as usize;
    if target >= domains.len() {
        return Err(Error::Contract(format!(
            "target domain {target} out of range ({} domains)",
            domains.len()
        )));
    }
    let side = domains[target].0.images.first().map(|i| i.height).unwrap_or(0);
    if cfg.train.arch.image_side != side {
        cfg.train.arch.image_side = side;
    }

    let sources: Vec<DatasetView> = domains
        .iter()
        .enumerate()
        .filter(|(d, _)| *d != target)
        .map(|(_, (t, _))| DatasetView::plain(t))
        .collect();
    let target_view = DatasetView::plain(&domains[target].0);
    let (params, history) = match cfg.train.mode {
        Mode::Dg => train(&cfg.train, &sources, None, Some(&domains[target].1))?,
        Mode::Uda => train(
            &cfg.train,
            &sources,
            Some(&target_view),
            Some(&domains[target].1),
        )?,
    };

    save_checkpoint(&params, &args.ckpt)?;
    history.write_jsonl(&args.history)?;
    let config_echo = args.history.with_extension("config.toml");
    std::fs::write(&config_echo, cfg.to_toml())?;
    let accuracy = evaluate(&params, &domains[target].1)?;
    println!("accuracy {accuracy:.4}");
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let params = load_checkpoint(&args.ckpt)?;
    let test = load_dataset(&args.test)?;
    let accuracy = evaluate(&params, &test)?;
    println!("accuracy {accuracy:.4}");
    Ok(())
}

fn parse_suites(names: &[String]) -> Result<Vec<Suite>> {
    if names.iter().any(|n| n == "all") {
        return Ok(Suite::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| {
            Suite::ALL
                .iter()
                .copied()
                .find(|s| s.name() == n)
                .ok_or_else(|| {
                    let known: Vec<&str> =
                        Suite::ALL.iter().map(|s| s.name()).chain(["all"]).collect();
                    Error::Contract(format!("unknown suite `{n}`; expected one of {known:?}"))
                })
        })
        .collect()
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let mut cfg = CliConfig::load_or_default(args.config.as_deref())?;
    override_opt(&mut cfg.train.epochs, args.epochs);
    override_opt(&mut cfg.protocol.jobs, args.jobs);
    if let Some(n) = args.seeds {
        if n == 0 {
            return Err(Error::Contract("need at least one seed".to_string()));
        }
        cfg.protocol.seeds = (1..=n as u64).collect();
    }
    let suites = parse_suites(&args.suites)?;
    let domains = load_domains(&args.data)?;
    let side = domains[0].0.images.first().map(|i| i.height).unwrap_or(0);
    if cfg.train.arch.image_side != side {
        cfg.train.arch.image_side = side;
    }

    let protocol = ProtocolConfig {
        train: cfg.train.clone(),
        seeds: cfg.protocol.seeds.clone(),
        jobs: cfg.protocol.jobs,
    };
    let mut report = ablation_suite(&protocol, &domains, &suites)?;
    for line in cfg.to_toml().lines() {
        report.header.push(format!("config: {line}"));
    }
    report.write_jsonl(&args.out)?;
    let text = report.render_text();
    std::fs::write(&args.table, &text)?;
    print!("{text}");
    Ok(())
}

/// Side-by-side original / weak / strong rows, one line per sample.
fn preview(args: PreviewArgs) -> Result<()> {
    let (train_path, _) = domain_paths(&args.data, args.domain);
    let ds = load_dataset(&train_path)?;
    let count = args.count.min(ds.len());
    if count == 0 {
        return Err(Error::Contract("empty dataset".to_string()));
    }
    let side = ds.images[0].height;
    let pad = 2;
    let cell = side + pad;
    let width = 3 * cell - pad;
    let height = count * cell - pad;
    let mut canvas = vec![255u8; width * height * 3];
    let mut blit = |img: &Image, row: usize, col: usize| {
        for y in 0..side {
            for x in 0..side {
                for c in 0..3 {
                    let cy = row * cell + y;
                    let cx = col * cell + x;
                    canvas[(cy * width + cx) * 3 + c] = img.get(x, y, c);
                }
            }
        }
    };
    for i in 0..count {
        let original = &ds.images[i];
        let mut weak_rng = Stream::derive(args.seed, &[1, i as u64]);
        let mut strong_rng = Stream::derive(args.seed, &[2, i as u64]);
        let weak = weak_augment(original, &mut weak_rng);
        let strong = strong_augment(original, &mut strong_rng);
        blit(original, i, 0);
        blit(&weak, i, 1);
        blit(&strong, i, 2);
    }

    let file = std::fs::File::create(&args.out)?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Contract(format!("png: {e}")))?;
    writer
        .write_image_data(&canvas)
        .map_err(|e| Error::Contract(format!("png: {e}")))?;
    println!("wrote {} ({}x{})", args.out.display(), width, height);
    Ok(())
}
