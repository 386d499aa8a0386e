mod error;
mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};
use mixco_core::data::save_dataset;
use mixco_core::encoder::{embed, load_encoder, save_encoder, EncoderParams};
use mixco_core::moco::save_moco;
use mixco_core::numerics::Tensor;
use mixco_core::training::{
    build_dataset, calinski_harabasz, davies_bouldin, export_embeddings, initial_encoder, linear_eval,
    load_embeddings, pretrain, run_gradient_suite, split_dataset, write_metrics_log, ClusterIndex, ProbeConfig,
    RunConfig,
};

use crate::error::{CliError, CliResult};
use crate::rundir::{read_config, RunDir};

/// Contrastive pretraining with mix-up semi-positives, plus evaluation tools.
#[derive(Debug, Parser)]
#[command(name = "mixco", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file of `key = value` lines; a run manifest works too.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override one config field, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory.
    #[arg(long, short, default_value = "mixco-out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured dataset to OUT/dataset.txt.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain an encoder; writes encoder.ckpt, metrics.log and, with a
    /// momentum encoder, moco.ckpt.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a linear probe on frozen embeddings and report test accuracy.
    LinearEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: EncoderSource,
    },
    /// Print Davies-Bouldin and Calinski-Harabasz indices of labelled embeddings.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Embed the test split with this encoder checkpoint.
        #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
        encoder: Option<PathBuf>,
        /// Read embeddings written by export-embeddings instead.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Write embeddings of the whole dataset to OUT/embeddings.txt.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Run the finite-difference gradient verification suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 24)]
        instances: usize,
        #[arg(long, default_value_t = mixco_core::training::verify::DEFAULT_STEP)]
        step: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct EncoderSource {
    /// Encoder checkpoint to evaluate.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Evaluate the untrained encoder the config would start from.
    #[arg(long)]
    random_encoder: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Session {
    cfg: RunConfig,
    dir: RunDir,
    config_path: Option<PathBuf>,
}

impl Session {
    fn open(name: &str, common: &Common, args: &[(&str, &Path)]) -> CliResult<Self> {
        let cfg = read_config(common.config.as_deref(), &common.overrides)?;
        let dir = RunDir::acquire(&common.out)?;
        let mut command = name.to_string();
        for (flag, path) in args {
            command.push_str(&format!(" --{flag} {}", path.display()));
        }
        let session = Session {
            cfg,
            dir,
            config_path: common.config.clone(),
        };
        let mut inputs: Vec<&Path> = args.iter().map(|(_, p)| *p).collect();
        inputs.extend(session.inputs());
        session.dir.write_manifest(&command, &session.cfg, &inputs)?;
        Ok(session)
    }

    fn inputs(&self) -> Vec<&Path> {
        self.config_path
            .iter()
            .map(PathBuf::as_path)
            .chain(self.cfg.data_path.iter().map(Path::new))
            .collect()
    }

    fn output(&self, name: &str, extra_inputs: &[&Path]) -> CliResult<PathBuf> {
        let mut inputs = self.inputs();
        inputs.extend_from_slice(extra_inputs);
        self.dir.check_not_input(name, &inputs)
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { common } => {
            let s = Session::open("gen-data", &common, &[])?;
            let data = build_dataset(&s.cfg)?;
            let path = s.output("dataset.txt", &[])?;
            save_dataset(&path, &data)?;
            println!("wrote {} samples of dim {} to {}", data.len(), data.dim(), path.display());
        }
        Command::Pretrain { common } => {
            let s = Session::open("pretrain", &common, &[])?;
            let data = build_dataset(&s.cfg)?;
            let (train, _) = split_dataset(&s.cfg, &data)?;
            let outcome = pretrain(&s.cfg, train.unlabeled())?;
            save_encoder(&s.output("encoder.ckpt", &[])?, &outcome.encoder, s.cfg.seed)?;
            if let Some(moco) = &outcome.moco {
                save_moco(&s.output("moco.ckpt", &[])?, moco, s.cfg.seed)?;
            }
            write_metrics_log(&s.output("metrics.log", &[])?, &outcome.metrics)?;
            if let Some(last) = outcome.metrics.last() {
                println!(
                    "epoch {}: l_contrast {:.6} l_mixco {:.6} l_total {:.6}",
                    last.epoch, last.l_contrast, last.l_mixco, last.l_total
                );
            }
        }
        Command::LinearEval { common, source } => {
            let args: Vec<(&str, &Path)> = source.encoder.iter().map(|p| ("encoder", p.as_path())).collect();
            let s = Session::open("linear-eval", &common, &args)?;
            let (encoder, label) = match &source.encoder {
                Some(path) => (read_encoder(path, &s.cfg)?, path.display().to_string()),
                None => (initial_encoder(&s.cfg)?, "random".to_string()),
            };
            let data = build_dataset(&s.cfg)?;
            let (train, test) = split_dataset(&s.cfg, &data)?;
            let report = linear_eval(&encoder, &train, &test, &ProbeConfig::from_run(&s.cfg))?;
            println!(
                "test accuracy {:.4} (train {:.4})",
                report.test_accuracy, report.train_accuracy
            );
            s.output("results.txt", &[])?;
            s.dir.append_line(
                "results.txt",
                &format!(
                    "encoder={label} seed={} test_accuracy={:e} train_accuracy={:e}",
                    s.cfg.seed, report.test_accuracy, report.train_accuracy
                ),
            )?;
        }
        Command::Metrics {
            common,
            encoder,
            embeddings,
        } => {
            let (emb, labels) = if let Some(path) = &embeddings {
                let _s = Session::open("metrics", &common, &[("embeddings", path)])?;
                load_embeddings(path)?
            } else {
                let path = encoder.as_deref().expect("clap requires one source");
                let s = Session::open("metrics", &common, &[("encoder", path)])?;
                let enc = read_encoder(path, &s.cfg)?;
                let data = build_dataset(&s.cfg)?;
                let (_, test) = split_dataset(&s.cfg, &data)?;
                (embed(&enc, test.features())?, test.labels().to_vec())
            };
            print_indices(&emb, &labels)?;
        }
        Command::ExportEmbeddings { common, encoder } => {
            let s = Session::open("export-embeddings", &common, &[("encoder", &encoder)])?;
            let enc = read_encoder(&encoder, &s.cfg)?;
            let data = build_dataset(&s.cfg)?;
            let path = s.output("embeddings.txt", &[&encoder])?;
            export_embeddings(&enc, &data, &path)?;
            println!("wrote {} embeddings of dim {} to {}", data.len(), enc.output_dim(), path.display());
        }
        Command::Gradcheck {
            common,
            instances,
            step,
            tolerance,
        } => {
            let s = Session::open("gradcheck", &common, &[])?;
            let report = run_gradient_suite(s.cfg.seed, instances, step)?;
            for (name, r) in report.families() {
                println!("{name:<20} max relative error {:.3e}", r.max_relative_error);
            }
            let worst = report.worst();
            println!(
                "worst relative error {:.3e} over {instances} instances ({} flat coordinates skipped)",
                worst.max_relative_error, worst.unresolved
            );
            if !(worst.max_relative_error < tolerance) {
                return Err(CliError::GradCheck(worst.max_relative_error));
            }
        }
    }
    Ok(())
}

fn read_encoder(path: &Path, cfg: &RunConfig) -> CliResult<EncoderParams> {
    let ckpt = load_encoder(path)?;
    if ckpt.params.input_dim() != cfg.input_dim {
        return Err(CliError::Usage(format!(
            "{} expects input_dim {} but the config has input_dim {}",
            path.display(),
            ckpt.params.input_dim(),
            cfg.input_dim
        )));
    }
    Ok(ckpt.params)
}

fn print_indices(emb: &Tensor, labels: &[usize]) -> CliResult<()> {
    let show = |name: &str, idx: ClusterIndex| {
        let note = if idx.degenerate { " (degenerate)" } else { "" };
        println!("{name} {:.6}{note}", idx.value);
    };
    show("davies_bouldin", davies_bouldin(emb, labels)?);
    show("calinski_harabasz", calinski_harabasz(emb, labels)?);
    Ok(())
}
