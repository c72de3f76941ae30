use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use exitprint::config::{resolve_root, ExperimentConfig, OUT_ENV};
use exitprint::core::attacks::{apply_pipeline, AttackConfig};
use exitprint::core::calibrate::{calibrate_threshold, ExitTable};
use exitprint::core::fingerprint::generate_fingerprint_set;
use exitprint::core::train::{to_trained_multiexit, train_backbone};
use exitprint::core::verify::{benign_eec_auc, verify_ip, TimingBackend};
use exitprint::core::ExitPolicy;
use exitprint::experiment::{self, benign_groups, model_seed, render_ablation, render_summary, RunOptions};
use exitprint::format::{self, file_safe, write_atomic, TrainLog};
use exitprint::{timing, Error, Result, StageExt};

#[derive(Parser)]
#[command(name = "exitprint", version, about = "Inference-time fingerprinting of multi-exit models")]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
    /// Output root.
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    WallClock,
    CostModel,
}

#[derive(Subcommand)]
enum Command {
    /// Train a backbone.
    Train {
        /// Model id; `target` and `independent-NN` use the experiment seeds.
        #[arg(long, default_value = "target")]
        id: String,
    },
    /// Attach internal classifiers to a backbone and train them.
    ToMultiexit(ModelIo),
    /// Calibrate the exit threshold for a relative accuracy drop.
    Calibrate {
        #[command(flatten)]
        io: ModelIo,
        #[arg(long, default_value_t = 0.05)]
        rad: f64,
    },
    /// Craft a fingerprint set on a calibrated model.
    Fingerprint {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Apply an attack pipeline, given as JSON attack configs.
    Attack {
        #[arg(long)]
        model: PathBuf,
        /// One step per flag, e.g. '{"kind":"prune","rate":0.2,"seed":1}'.
        #[arg(long = "step", required = true)]
        steps: Vec<String>,
    },
    /// Verify a suspect model against a fingerprint set.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fingerprints: PathBuf,
        #[arg(long)]
        t_f: f64,
        /// Recalibrate the suspect at this drop instead of using its stored
        /// policy.
        #[arg(long)]
        rad: Option<f64>,
    },
    /// Run the full experiment described by the configuration.
    Evaluate,
    /// Recompute the threshold ablation of a finished experiment.
    AblateThreshold {
        #[command(flatten)]
        report: ReportArg,
        /// Comma-separated candidate thresholds.
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<f64>,
    },
    /// Re-emit the summary, per-model reports and plot data.
    Report(ReportArg),
}

#[derive(Args)]
struct ModelIo {
    #[arg(long)]
    model: PathBuf,
    /// Defaults to overwriting the input.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl ModelIo {
    fn output(&self) -> &Path {
        self.output.as_deref().unwrap_or(&self.model)
    }
}

#[derive(Args)]
struct ReportArg {
    /// Experiment directory; defaults to the configured one.
    #[arg(long)]
    dir: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.backend {
        Some(Backend::CostModel) => cfg.backend = TimingBackend::CostModel,
        Some(Backend::WallClock) if cfg.backend == TimingBackend::CostModel => {
            cfg.backend = TimingBackend::wall_clock();
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn experiment_dir(cli: &Cli, cfg: &ExperimentConfig, arg: &ReportArg) -> PathBuf {
    arg.dir.clone().unwrap_or_else(|| cfg.out_dir(&resolve_root(cli.out.as_deref())))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli).stage("config")?;
    let root = resolve_root(cli.out.as_deref());
    match &cli.command {
        Command::Train { id } => {
            let data = cfg.dataset.load().stage("dataset")?;
            let arch = cfg.arch.build(&data).stage("dataset")?;
            let mut log = TrainLog::default();
            let seed = model_seed(cfg.seed, id);
            let (backbone, report) =
                train_backbone(&arch, &data, &cfg.backbone.clone().with_seed(seed), &mut log).stage("train")?;
            let path = root.join(format!("{}.backbone.emx", file_safe(id)));
            format::save_model(&path, &format::backbone_only(backbone), None).stage("train")?;
            write_atomic(&root.join(format!("{}.log", file_safe(id))), log.render().as_bytes()).stage("train")?;
            println!("{}\tval_accuracy {:.4}", path.display(), report.val_accuracy);
        }
        Command::ToMultiexit(io) => {
            let data = cfg.dataset.load().stage("dataset")?;
            let arch = cfg.arch.build(&data).stage("dataset")?;
            let file = format::load_model(&io.model).stage("to-multiexit")?;
            let ic = cfg.ic.clone().with_seed(cfg.seed);
            let model = to_trained_multiexit(file.model.backbone, &arch.attach_indices, &data, &ic)
                .stage("to-multiexit")?;
            format::save_model(io.output(), &model, None).stage("to-multiexit")?;
            println!("{}", io.output().display());
        }
        Command::Calibrate { io, rad } => {
            let data = cfg.dataset.load().stage("dataset")?;
            let file = format::load_model(&io.model).stage("calibrate")?;
            let policy = calibrate_threshold(&file.model, &data.val, *rad).stage("calibrate")?;
            let achieved = ExitTable::build(&file.model, &data.val).stage("calibrate")?.rad(&policy);
            format::save_model(io.output(), &file.model, Some(&policy)).stage("calibrate")?;
            let t_c = policy.t_c().map_or_else(|| "never-early".into(), |t| format!("{t:.3}"));
            println!("T_c {t_c}\tRAD {achieved:.4}");
        }
        Command::Fingerprint { model, output } => {
            let data = cfg.dataset.load().stage("dataset")?;
            let file = format::load_model(model).stage("fingerprint")?;
            let policy = policy_or_calibrate(&file, &data.val, cfg.rad_levels[0]).stage("fingerprint")?;
            let id = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            let set = generate_fingerprint_set(&file.model, &data.val, &cfg.fingerprint, &policy, cfg.seed, id)
                .stage("fingerprint")?;
            let out = output.clone().unwrap_or_else(|| root.join(format!("{}.fps", file_safe(id))));
            format::save_fingerprints(&out, &set, file.model.n_exits()).stage("fingerprint")?;
            print!("{}", format::fingerprint_manifest(&set, file.model.n_exits()));
        }
        Command::Attack { model, steps } => {
            let data = cfg.dataset.load().stage("dataset")?;
            let file = format::load_model(model).stage("attack")?;
            let steps = steps
                .iter()
                .map(|s| serde_json::from_str::<AttackConfig>(s).map_err(|e| Error::Config(e.to_string())))
                .collect::<Result<Vec<_>>>()
                .stage("attack")?;
            for s in apply_pipeline(&file.model, &steps, &data, &cfg.ic).stage("attack")? {
                let path = root.join(format!("{}.emx", file_safe(&s.label)));
                let policy = match s.exit_rule {
                    Some(rule) => Some(exitprint::core::attacks::resolve_policy(&s.model, rule, &data.val).stage("attack")?),
                    None => file.policy,
                };
                format::save_model(&path, &s.model, policy.as_ref()).stage("attack")?;
                println!("{}", path.display());
            }
        }
        Command::Verify {
            model,
            fingerprints,
            t_f,
            rad,
        } => {
            let data = cfg.dataset.load().stage("dataset")?;
            let file = format::load_model(model).stage("verify")?;
            let set = format::load_fingerprints(fingerprints).stage("verify")?;
            let policy = match rad {
                Some(r) => calibrate_threshold(&file.model, &data.val, *r).stage("verify")?,
                None => policy_or_calibrate(&file, &data.val, cfg.rad_levels[0]).stage("verify")?,
            };
            let groups = benign_groups(&data.test, cfg.benign_samples);
            let benign = groups
                .first()
                .ok_or_else(|| Error::Config("test split smaller than one benign group".into()))
                .stage("verify")?;
            let mut meter = timing::meter(cfg.backend);
            let cal = benign_eec_auc(&file.model, benign, &policy, meter.as_mut()).stage("verify")?;
            let id = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            let report = verify_ip(
                &file.model,
                id,
                &set.inputs(file.model.input_shape()),
                &policy,
                meter.as_mut(),
                *t_f,
                Some(&cal),
            )
            .stage("verify")?;
            format::save_verification(&root, &report).stage("verify")?;
            print!("{}", format::render_verification(&report));
        }
        Command::Evaluate => {
            let dir = cfg.out_dir(&root);
            let report = experiment::run_experiment(&cfg, &dir, RunOptions { verbose: cli.verbose })?;
            print!("{}", render_summary(&report));
            println!("\nartifacts: {}", dir.display());
        }
        Command::AblateThreshold { report, candidates } => {
            let dir = experiment_dir(cli, &cfg, report);
            let r = experiment::load_report(&dir.join("report.json")).stage("ablate-threshold")?;
            let candidates = if candidates.is_empty() { &cfg.ablation_t_f } else { candidates };
            for (rad, rows) in experiment::threshold_ablation(&r, candidates).stage("ablate-threshold")? {
                let text = render_ablation(&rows);
                write_atomic(&dir.join(format!("ablation-{}.txt", experiment::rad_tag(rad))), text.as_bytes())
                    .stage("ablate-threshold")?;
                println!("RAD {rad:.2}\n{text}");
            }
        }
        Command::Report(arg) => {
            let dir = experiment_dir(cli, &cfg, arg);
            let r = experiment::load_report(&dir.join("report.json")).stage("report")?;
            experiment::write_report(&experiment::Layout::new(&dir), &r).stage("report")?;
            print!("{}", render_summary(&r));
        }
    }
    Ok(())
}

fn policy_or_calibrate(
    file: &format::ModelFile,
    val: &exitprint::core::data::Dataset,
    rad: f64,
) -> exitprint::core::Result<ExitPolicy> {
    match file.policy {
        Some(p) => Ok(p),
        None => calibrate_threshold(&file.model, val, rad),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
