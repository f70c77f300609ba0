use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use matura_core::coteach::{build_pairs, write_pairs, write_report};
use matura_core::dataset::{sample_labeled, write_labels};
use matura_core::inverse_folding::write_proposals;
use matura_core::pipeline::{self as pl, Artifacts, Carryover, Config, SweepParameter, Variant};
use matura_core::rng::{derive, seeded};
use matura_core::Error;

#[derive(Parser)]
#[command(
    name = "matura",
    version,
    about = "Toy antibody affinity maturation with guided flow matching"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML config file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Directory holding the dataset and checkpoints; defaults to --out.
    #[arg(long)]
    artifacts: Option<PathBuf>,
}

impl Common {
    fn artifacts(&self) -> &Path {
        self.artifacts.as_deref().unwrap_or(&self.out)
    }
}

#[derive(Args, Clone, Default)]
struct RunOverrides {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    final_designs: Option<usize>,
    /// Guidance strength.
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    /// Number of sampling steps; 3 selects the default schedule.
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated design seeds.
    #[arg(long, value_delimiter = ',')]
    run_seeds: Option<Vec<u64>>,
    /// Comma-separated antigen ids; default is the held-out antigens.
    #[arg(long, value_delimiter = ',')]
    antigens: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    carryover: Option<CarryoverArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CarryoverArg {
    Best,
    AllSelected,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    OneIteration,
    NoPc,
    NoFlow,
    NoEnergy,
    NoSelection,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::OneIteration => Variant::OneIteration,
            VariantArg::NoPc => Variant::NoPc,
            VariantArg::NoFlow => Variant::NoFlow,
            VariantArg::NoEnergy => Variant::NoEnergy,
            VariantArg::NoSelection => Variant::NoSelection,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Gamma,
    Steps,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the toy world, registry, labeled set and pairwise labels.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the flow model and the inverse-folding model.
    TrainFlow {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Supervised training of both binding-energy predictors.
    TrainPredictors {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Co-teaching fine-tune, with and without consensus selection.
    Coteach {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Run the design loop.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: RunOverrides,
        #[arg(long, value_enum, default_value = "full")]
        variant: VariantArg,
    },
    /// Run every ablation variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Guidance-strength and step-count sweeps.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: RunOverrides,
        #[arg(long, value_enum, default_value = "both")]
        parameter: SweepArg,
    },
    /// Re-score a designs file with the oracle.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/designs.csv`.
        #[arg(long)]
        designs: Option<PathBuf>,
    },
    /// Print the effective config as TOML.
    PrintConfig {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: RunOverrides,
    },
}

fn load_config(common: &Common) -> Result<Config, Error> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_run(cfg: &mut Config, o: &RunOverrides) -> Result<(), Error> {
    if let Some(v) = o.iterations {
        cfg.run.iterations = v;
    }
    if let Some(v) = o.final_designs {
        cfg.run.final_designs = v;
    }
    if let Some(v) = o.gamma {
        cfg.run.guidance.gamma = v;
    }
    if let Some(v) = o.steps {
        cfg.run.schedule = pl::ScheduleConfig::with_steps(v)?;
    }
    if let Some(v) = &o.run_seeds {
        cfg.run.seeds = v.clone();
    }
    if let Some(v) = &o.antigens {
        cfg.run.antigens = v.clone();
    }
    if let Some(c) = o.carryover {
        cfg.run.carryover = match c {
            CarryoverArg::Best => Carryover::Best,
            CarryoverArg::AllSelected => Carryover::AllSelected,
        };
    }
    cfg.validate()
}

fn mkdir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn execute(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::GenData { common } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            mkdir(&common.out)?;
            let (world, ds) = pl::build_dataset(&cfg)?;
            ds.save(&common.out.join(pl::DATA_DIR), world.tables())?;
            let labels = sample_labeled(&ds, cfg.corpus.labeled_pairs, &mut seeded(derive(cfg.seed, "labels")));
            write_labels(&common.out.join("labels.csv"), &labels)?;
            let pairs = build_pairs(
                &ds,
                &ds.train_antigens(),
                cfg.coteach.pairs_per_antigen,
                cfg.coteach.tie_epsilon,
                &mut seeded(derive(cfg.seed, "pairs")),
            )?;
            write_pairs(&common.out.join("pairs.csv"), &pairs.labels)?;
            log::info!("dataset hash {}", pl::dataset_hash(&ds));
        }
        Cmd::TrainFlow { common, epochs } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.flow.epochs = e;
            }
            let (world, ds) = pl::load_dataset(common.artifacts())?;
            mkdir(&common.out)?;
            let (flow, curve) = pl::train_flow_model(&cfg, &world, &ds)?;
            pl::save_checkpoint(&common.out.join(pl::FLOW_CKPT), flow.to_checkpoint(&[]), cfg.seed, &ds)?;
            pl::write_loss_curve(&common.out.join("flow_loss.csv"), &curve)?;
            let (ifm, rep) = pl::train_inverse_fold_model(&cfg, &world, &ds)?;
            pl::save_checkpoint(&common.out.join(pl::IF_CKPT), ifm.to_checkpoint(), cfg.seed, &ds)?;
            pl::write_loss_curve(&common.out.join("inverse_fold_loss.csv"), &rep.loss_curve)?;
        }
        Cmd::TrainPredictors { common, epochs } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.supervised.epochs = e;
            }
            let (world, ds) = pl::load_dataset(common.artifacts())?;
            mkdir(&common.out)?;
            let bank = pl::docking_bank(&cfg, &world, &ds);
            let (pair, (ra, rb)) = pl::train_supervised_predictors(&cfg, &ds, &bank)?;
            pl::save_predictors(&common.out, "supervised", &pair, cfg.seed, &ds)?;
            pl::write_loss_curve(&common.out.join("seq_supervised_loss.csv"), &ra.loss_curve)?;
            pl::write_loss_curve(&common.out.join("struct_supervised_loss.csv"), &rb.loss_curve)?;
        }
        Cmd::Coteach { common, rounds } => {
            let mut cfg = load_config(&common)?;
            if let Some(r) = rounds {
                cfg.coteach.rounds = r;
            }
            let (world, ds) = pl::load_dataset(common.artifacts())?;
            let start = pl::load_predictors(common.artifacts(), "supervised")?;
            mkdir(&common.out)?;
            let bank = pl::docking_bank(&cfg, &world, &ds);
            let test = ds.test_antigens();
            for (selection, stage, report) in [
                (false, "unfiltered", "coteach_report_unfiltered.csv"),
                (true, "coteach", "coteach_report.csv"),
            ] {
                let out = pl::run_coteaching(&cfg, &ds, &bank, &start, selection, Some(&test))?;
                pl::save_predictors(&common.out, stage, &(out.seq, out.structure), cfg.seed, &ds)?;
                write_report(&common.out.join(report), &out.reports)?;
            }
        }
        Cmd::Run {
            common,
            overrides,
            variant,
        } => {
            let mut cfg = load_config(&common)?;
            let variant = Variant::from(variant);
            cfg.run.ablation = variant.flags();
            apply_run(&mut cfg, &overrides)?;
            let art = Artifacts::load(common.artifacts())?;
            mkdir(&common.out)?;
            let out = pl::run_designs(&art, &cfg)?;
            pl::write_designs(&common.out.join("designs.csv"), &out.designs)?;
            let rows: Vec<_> = out
                .metrics
                .iter()
                .map(|(s, m)| (variant.name().to_string(), *s, m.clone()))
                .collect();
            pl::write_metrics(&common.out.join("metrics.csv"), &rows)?;
            for &seed in &cfg.run.seeds {
                let props: Vec<_> = out
                    .proposals
                    .iter()
                    .filter(|(s, _)| *s == seed)
                    .map(|(_, p)| p.clone())
                    .collect();
                write_proposals(&common.out.join(format!("proposals_seed{seed}.csv")), &props)?;
            }
        }
        Cmd::Ablate { common, overrides } => {
            let mut cfg = load_config(&common)?;
            apply_run(&mut cfg, &overrides)?;
            let art = Artifacts::load(common.artifacts())?;
            mkdir(&common.out)?;
            let rows = pl::run_ablations(&art, &cfg)?;
            pl::write_ablation(&common.out.join("ablation.csv"), &rows)?;
            let metrics: Vec<_> = rows
                .iter()
                .map(|r| (r.variant.name().to_string(), r.seed, r.metrics.clone()))
                .collect();
            pl::write_metrics(&common.out.join("metrics.csv"), &metrics)?;
        }
        Cmd::Sweep {
            common,
            overrides,
            parameter,
        } => {
            let mut cfg = load_config(&common)?;
            apply_run(&mut cfg, &overrides)?;
            let art = Artifacts::load(common.artifacts())?;
            mkdir(&common.out)?;
            let params: &[(SweepParameter, &str)] = match parameter {
                SweepArg::Gamma => &[(SweepParameter::Gamma, "sweep_gamma.csv")],
                SweepArg::Steps => &[(SweepParameter::Steps, "sweep_steps.csv")],
                SweepArg::Both => &[
                    (SweepParameter::Gamma, "sweep_gamma.csv"),
                    (SweepParameter::Steps, "sweep_steps.csv"),
                ],
            };
            for &(p, file) in params {
                let rows = pl::run_sweep(&art, &cfg, p)?;
                pl::write_sweep(&common.out.join(file), p, &rows)?;
            }
        }
        Cmd::Evaluate { common, designs } => {
            let (world, ds) = pl::load_dataset(common.artifacts())?;
            let path = designs.unwrap_or_else(|| common.out.join("designs.csv"));
            let records = pl::read_designs(&path)?;
            let per_seed = pl::evaluate_designs(&world, &ds, &records)?;
            mkdir(&common.out)?;
            let rows: Vec<_> = per_seed
                .into_iter()
                .map(|(s, m)| ("evaluate".to_string(), s, m))
                .collect();
            pl::write_metrics(&common.out.join("metrics.csv"), &rows)?;
            for (_, s, m) in &rows {
                println!("seed {s}: imp {:.4} sim {:.4} nat {:.4}", m.imp, m.sim, m.nat);
            }
        }
        Cmd::PrintConfig { common, overrides } => {
            let mut cfg = load_config(&common)?;
            apply_run(&mut cfg, &overrides)?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error kind={} message={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
