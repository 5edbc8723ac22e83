use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moeprune::pipeline::{memory_report, Pipeline, PipelineConfig, PruneSpec, Scoring, UNPRUNED_LABEL};
use moeprune::pruning::{Algorithm, MetricKind, Split, DEFAULT_MIN_PER_LAYER};
use moeprune::stats::Granularity;
use moeprune::Side;

#[derive(Parser)]
#[command(
    name = "moeprune",
    version,
    about = "Train a toy MoE translation model, prune its experts and evaluate"
)]
struct Cli {
    /// Pipeline configuration (TOML). Defaults to the built-in toy setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for every artifact.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overwrite files not produced by an earlier run of the same stage.
    #[arg(long, global = true)]
    force: bool,

    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/valid/test corpora.
    GenData,
    /// Train the model to the configured validation accuracy.
    Train,
    /// Decode the valid split and record routing statistics.
    Decode,
    /// Score experts and write pruning masks.
    Prune(PruneArgs),
    /// Decode and score the test split.
    Eval {
        #[command(flatten)]
        prune: PruneArgs,
        /// Evaluate the model without any mask.
        #[arg(long)]
        unpruned: bool,
    },
    /// Expert overlap, language dendrograms and length ratios.
    Analyze(PruneArgs),
    /// Memory of the 54.5B-parameter model before and after pruning.
    MemEstimate {
        #[arg(long, default_value_t = 0.8)]
        rate: f64,
        #[arg(long, default_value = "ratio=3:1", value_parser = parse_split)]
        split: Split,
        #[arg(long, default_value_t = DEFAULT_MIN_PER_LAYER)]
        min_per_layer: usize,
    },
    /// Every stage: train, statistics, prune, evaluate, analyze.
    Pipeline(PruneArgs),
}

#[derive(Args, Clone)]
struct PruneArgs {
    /// top1, top2, lb, importance-vanilla, importance, or random.
    #[arg(long, default_value = "importance")]
    metric: String,
    #[arg(long, default_value = "fixed", value_parser = parse_algo)]
    algo: Algorithm,
    /// global, lang-pair or lang.
    #[arg(long, default_value = "lang-pair", value_parser = parse_granularity)]
    granularity: Granularity,
    /// Fraction of experts to remove.
    #[arg(long, default_value_t = 0.5)]
    rate: f64,
    /// balanced, ratio=E:D or explicit=E,D.
    #[arg(long, default_value = "balanced", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value_t = DEFAULT_MIN_PER_LAYER)]
    min_per_layer: usize,
    /// Seed of `--metric random`.
    #[arg(long, default_value_t = 0)]
    random_seed: u64,
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

fn parse_algo(s: &str) -> Result<Algorithm, String> {
    Algorithm::parse(s).map_err(|e| e.to_string())
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    Granularity::parse(s).ok_or_else(|| format!("unknown granularity `{s}` (global, lang-pair, lang)"))
}

impl PruneArgs {
    fn spec(&self) -> moeprune::Result<PruneSpec> {
        let scoring = match self.metric.as_str() {
            "random" => Scoring::Random { seed: self.random_seed },
            m => Scoring::Metric(MetricKind::parse(m)?),
        };
        Ok(PruneSpec {
            scoring,
            algorithm: self.algo,
            granularity: self.granularity,
            rate: self.rate,
            split: self.split,
            min_per_layer: self.min_per_layer,
        })
    }
}

fn run(cli: Cli) -> moeprune::Result<()> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::toy(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let pipeline = Pipeline::new(config, &cli.out)?.with_force(cli.force);
    match cli.command {
        Command::GenData => {
            pipeline.gen_data()?;
            for split in ["train", "valid", "test"] {
                println!("{}", pipeline.data_path(split).display());
            }
        }
        Command::Train => {
            pipeline.train()?;
            println!("checkpoint\t{}", pipeline.checkpoint_path().display());
            println!("valid_accuracy\t{:.4}", pipeline.trained_accuracy()?);
        }
        Command::Decode => {
            let stats = pipeline.collect_stats()?;
            println!("stats\t{}", pipeline.stats_path().display());
            println!("directions\t{}", stats.len());
        }
        Command::Prune(args) => {
            let spec = args.spec()?;
            let masks = pipeline.prune(&spec)?;
            println!("masks\t{}", pipeline.mask_dir(&spec).display());
            println!("src\ttgt\tencoder\tdecoder");
            for ((s, t), m) in &masks {
                println!(
                    "{s}\t{t}\t{}\t{}",
                    m.retained_on(Side::Encoder),
                    m.retained_on(Side::Decoder)
                );
            }
        }
        Command::Eval { prune, unpruned } => {
            let spec = if unpruned { None } else { Some(prune.spec()?) };
            let report = pipeline.evaluate(spec.as_ref())?;
            let label = spec.map_or(UNPRUNED_LABEL.to_string(), |s| s.label());
            println!("report\t{}", pipeline.report_dir(&label).join("eval.tsv").display());
            print!("{}", report.to_text());
        }
        Command::Analyze(args) => {
            let spec = args.spec()?;
            let a = pipeline.analyze(&spec)?;
            println!(
                "analysis\t{}",
                pipeline.report_dir(&spec.label()).join("analysis").display()
            );
            println!("encoder_jaccard_same_source\t{:.4}", a.encoder_same_source);
            println!("encoder_jaccard_diff_source\t{:.4}", a.encoder_diff_source);
            println!("decoder_jaccard_same_target\t{:.4}", a.decoder_same_target);
            println!("decoder_jaccard_diff_target\t{:.4}", a.decoder_diff_target);
            println!("encoder_tree\t{}", a.encoder_tree.to_newick());
            println!("decoder_tree\t{}", a.decoder_tree.to_newick());
            println!("length_ratio_mean\t{:.4}", a.length_ratio.mean);
        }
        Command::MemEstimate {
            rate,
            split,
            min_per_layer,
        } => print!("{}", memory_report(rate, split, min_per_layer)?),
        Command::Pipeline(args) => {
            let spec = args.spec()?;
            let r = pipeline.run(&spec)?;
            println!("label\tchrf_pp");
            println!("{UNPRUNED_LABEL}\t{:.4}", r.baseline.mean_chrf());
            println!("{}\t{:.4}", spec.label(), r.pruned.mean_chrf());
            println!("reports\t{}", pipeline.report_dir(&spec.label()).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
