use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use redunet::container::{load_head, ContainerReader, ContainerWriter};
use redunet::experiment::{
    self, restrict, run_class_il, run_equivalence_check, run_session, session_preamble,
    summarize_layer, DatasetKind, ExperimentConfig, Split, SyntheticSpec, TuneGrid,
};
use redunet::{BuildConfig, ClassId, ClassSubspaces, ForwardSink, LayerSink, TaskBatch};

#[derive(Parser)]
#[command(
    name = "redunet",
    version,
    about = "Rate-reduction networks with class-incremental merging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a network on some classes and write it to a container.
    Build {
        #[command(flatten)]
        config: ConfigArgs,
        /// Classes to build on; defaults to the first session's classes.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge new classes into a stored network.
    Merge {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a stored network on the test split of its classes.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run every session and write metrics, manifest and the final model.
    RunIl {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Record wall time as 0 so reruns produce identical files.
        #[arg(long)]
        omit_timing: bool,
        #[arg(long)]
        no_save_model: bool,
        /// Also build jointly each session and report agreement.
        #[arg(long)]
        compare_joint: bool,
    },
    /// Compare chained merges with a joint build; exit status 1 on mismatch.
    CheckEquivalence {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1e-7)]
        tolerance: f64,
        /// Add this to one entry of the last merged layer.
        #[arg(long)]
        perturb: Option<f64>,
    },
    /// Print per-layer step, rate reduction and operator spectra.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        /// Summarize every n-th layer.
        #[arg(long, default_value_t = 1)]
        every: usize,
    },
    /// Sweep ε, η₀ and λ against training-label agreement of the estimated membership.
    Tune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        epsilons: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        eta0s: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        lambdas: Vec<f64>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; when given, the other config flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "mnist")]
    dataset: DatasetKind,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    classes_per_task: usize,
    #[arg(long, value_delimiter = ',')]
    class_order: Vec<u32>,
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    #[arg(long, default_value_t = 200)]
    depth: usize,
    #[arg(long, default_value_t = 0.5)]
    eta0: f64,
    #[arg(long, default_value_t = 0.933)]
    eta_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 28)]
    rank: usize,
    /// Keep at most this many training samples per class.
    #[arg(long, alias = "train-per-class")]
    subsample_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Seed of the per-class subsampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    kernel_seed: u64,
    #[arg(long, default_value_t = 1)]
    downscale: usize,
    #[arg(long, default_value_t = 20)]
    synth_dim: usize,
    #[arg(long, default_value_t = 4)]
    synth_classes: usize,
    #[arg(long, default_value_t = 3)]
    synth_rank: usize,
    #[arg(long, default_value_t = 50)]
    synth_train: usize,
    #[arg(long, default_value_t = 50)]
    synth_test: usize,
    #[arg(long, default_value_t = 0.05)]
    synth_noise: f64,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            return serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()));
        }
        Ok(ExperimentConfig {
            dataset: self.dataset,
            data_dir: self.data_dir.clone(),
            classes_per_task: self.classes_per_task,
            class_order: self.class_order.clone(),
            build: BuildConfig {
                epsilon: self.epsilon,
                depth: self.depth,
                eta0: self.eta0,
                eta_decay: self.eta_decay,
                lambda: self.lambda,
            },
            rank: self.rank,
            train_per_class: self.subsample_per_class,
            test_per_class: self.test_per_class,
            seed: self.seed,
            kernel_seed: self.kernel_seed,
            downscale: self.downscale,
            synthetic: SyntheticSpec {
                dim: self.synth_dim,
                classes: self.synth_classes,
                subspace_rank: self.synth_rank,
                train_per_class: self.synth_train,
                test_per_class: self.synth_test,
                noise: self.synth_noise,
                seed: self.synth_seed,
            },
            ..ExperimentConfig::default()
        })
    }
}

fn ids(v: &[u32]) -> Vec<ClassId> {
    v.iter().copied().map(ClassId).collect()
}

fn print_trace(delta_r: &[f64]) {
    if let (Some(first), Some(last)) = (delta_r.first(), delta_r.last()) {
        println!(
            "delta_r initial {first} final {last} ({} layers)",
            delta_r.len() - 1
        );
    }
}

fn build(cfg: &ExperimentConfig, classes: &[u32], out: &Path) -> Result<()> {
    let data = experiment::prepare_data(cfg)?;
    let classes = if classes.is_empty() {
        let order = experiment::class_order(cfg, &data.train.1);
        order[..cfg.classes_per_task.min(order.len())].to_vec()
    } else {
        ids(classes)
    };
    let (x, labels) = restrict(&data.train.0, &data.train.1, &classes)?;
    let task = TaskBatch::new(x, labels)?;
    let mut writer =
        ContainerWriter::create(out, session_preamble(None, &task, &cfg.build, &data.input))?;
    let (head, delta_r) = run_session(None, &task, &cfg.build, &data.input, &mut writer)?;
    writer.finish(&head.final_covariances)?;
    print_trace(&delta_r);
    println!(
        "wrote {} ({} classes, {} layers)",
        out.display(),
        head.classes.len(),
        head.depth()
    );
    Ok(())
}

fn merge(cfg: &ExperimentConfig, model: &Path, classes: &[u32], out: &Path) -> Result<()> {
    let head = load_head(model)?;
    let (x, labels) = experiment::prepare_with(cfg, Split::Train, &head.input)?;
    let (x, labels) = restrict(&x, &labels, &ids(classes))?;
    let task = TaskBatch::new(x, labels)?;
    let mut writer = ContainerWriter::create(
        out,
        session_preamble(Some(&head), &task, &cfg.build, &head.input),
    )?;
    let (merged, delta_r) = run_session(Some(&head), &task, &cfg.build, &head.input, &mut writer)?;
    writer.finish(&merged.final_covariances)?;
    print_trace(&delta_r);
    println!("wrote {} ({} classes)", out.display(), merged.classes.len());
    Ok(())
}

fn eval(cfg: &ExperimentConfig, model: &Path) -> Result<()> {
    let reader = ContainerReader::open(model)?;
    let preamble = reader.preamble().clone();
    let registry: Vec<ClassId> = preamble.classes.iter().map(|c| c.id).collect();
    let (x, labels) = experiment::prepare_with(cfg, Split::Test, &preamble.input)?;
    let (x, labels) = restrict(&x, &labels, &registry)?;
    let mut fwd = ForwardSink::new(&x, preamble.lambda)?;
    let head = reader.stream_into(&mut fwd)?;
    let subspaces = ClassSubspaces::from_covariances(&registry, &head.final_covariances, cfg.rank)?;
    let predicted = redunet::predict(&fwd.finish()?, &subspaces)?;
    let acc = redunet::subspace::accuracy(&predicted, &labels, &registry)?;
    println!(
        "accuracy {acc} on {} samples of {} classes",
        labels.len(),
        registry.len()
    );
    Ok(())
}

struct Inspector {
    every: usize,
}

impl LayerSink for Inspector {
    fn push_layer(&mut self, index: usize, layer: &redunet::Layer) -> redunet::Result<()> {
        if index % self.every != 0 {
            return Ok(());
        }
        let s = summarize_layer(index, layer)?;
        let spectra: Vec<String> = s
            .compression_spectra
            .iter()
            .map(|(lo, hi)| format!("[{lo:.4e}, {hi:.4e}]"))
            .collect();
        println!(
            "layer {:>4} eta {:.6} delta_r {:.6} E [{:.4e}, {:.4e}] C {}",
            s.index,
            s.eta,
            s.delta_r,
            s.expansion_spectrum.0,
            s.expansion_spectrum.1,
            spectra.join(" ")
        );
        Ok(())
    }
}

fn inspect(model: &Path, every: usize) -> Result<()> {
    if every == 0 {
        bail!("--every must be positive");
    }
    let reader = ContainerReader::open(model)?;
    let p = reader.preamble().clone();
    let registry: Vec<String> = p
        .classes
        .iter()
        .map(|c| format!("{}:{}", c.id, c.count))
        .collect();
    println!(
        "dim {} depth {} epsilon {} lambda {} classes {}",
        p.dim,
        p.etas.len(),
        p.epsilon,
        p.lambda,
        registry.join(" ")
    );
    let head = reader.stream_into(&mut Inspector { every })?;
    println!("final delta_r {}", head.final_rate_reduction()?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Build {
            config,
            classes,
            out,
        } => build(&config.resolve()?, &classes, &out)?,
        Command::Merge {
            config,
            model,
            classes,
            out,
        } => merge(&config.resolve()?, &model, &classes, &out)?,
        Command::Eval { config, model } => eval(&config.resolve()?, &model)?,
        Command::RunIl {
            config,
            out_dir,
            omit_timing,
            no_save_model,
            compare_joint,
        } => {
            let mut cfg = config.resolve()?;
            cfg.output_dir = Some(out_dir);
            cfg.omit_timing |= omit_timing;
            cfg.save_model &= !no_save_model;
            cfg.compare_joint |= compare_joint;
            let table = run_class_il(&cfg)?;
            print!("{}", table.to_csv());
            println!("decay {}", table.decay());
        }
        Command::CheckEquivalence {
            config,
            tolerance,
            perturb,
        } => {
            let report = run_equivalence_check(&config.resolve()?, tolerance, perturb)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("{}", if report.passed { "PASS" } else { "FAIL" });
            if !report.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Inspect { model, every } => inspect(&model, every)?,
        Command::Tune {
            config,
            epsilons,
            eta0s,
            lambdas,
        } => {
            let grid = TuneGrid {
                epsilons,
                eta0s,
                lambdas,
            };
            println!("epsilon,eta0,lambda,agreement");
            for p in experiment::tune(&config.resolve()?, &grid)? {
                println!("{},{},{},{}", p.epsilon, p.eta0, p.lambda, p.agreement);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
