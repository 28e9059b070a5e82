//! `roi-attend` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime or data failure, 2 usage or config
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{split_overrides, ConfigError, RunConfig};

const OVERRIDES_HELP: &str = "\
Any config key can be given as a flag, e.g. --model.variant=bi_plain or
--train.epochs 20. Flags override values from --config.

Keys: frame.{frame_len_ms,step_ms,n_mfcc,n_mels,fft_size,preemphasis,sample_rate}
      model.{variant,enc_hidden,dec_hidden,attn_hidden,dropout,dec_steps,mask_padding}
      train.{learning_rate,epochs,batch_size,optimizer,beta1,beta2,eps,seed,grad_clip,shuffle}
      synth.{clips_per_class,clip_len,min_clip_len,burst_len,burst_amplitude,noise_amplitude,n_actors,actor_base,seed}
      data.{corpus_dir,cache_dir,pad_len}  output.{dir,run_id}
      eval.{aggregate,parallel}  roi.ratio

ROI_ATTEND_CACHE overrides the feature cache directory.";

#[derive(Debug, Parser)]
#[command(name = "roi-attend", version, about = "Attention-based salient-region detection for speech emotion recognition", after_help = OVERRIDES_HELP)]
struct Cli {
    /// Key=value config file with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract and cache MFCC features for the corpus.
    Features,
    /// Generate a synthetic corpus with known salient regions.
    Synth,
    /// Train one model on the corpus.
    Train {
        /// Leave this subject out of training.
        #[arg(long)]
        held_out: Option<String>,
    },
    /// Leave-one-subject-out training and evaluation.
    EvalLoso {
        /// Run only the first k folds.
        #[arg(long)]
        folds: Option<usize>,
        /// Number of folds to run concurrently.
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Export attention weights and salient regions for one clip.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
    },
    /// Compare analytic gradients with finite differences for all variants.
    Gradcheck,
    /// Rebuild aggregate reports from stored fold results.
    Report {
        /// Run directory; defaults to the one implied by the config.
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

fn usage_error(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => return usage_error(e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };

    let mut cfg = RunConfig::default();
    let built = (|| -> Result<RunConfig, ConfigError> {
        if let Some(path) = &cli.config {
            cfg.apply_file(path)?;
        }
        for (k, v) in &overrides {
            cfg.set(k, v)?;
        }
        if let Command::EvalLoso { parallel: Some(p), .. } = &cli.command {
            cfg.parallel = *p;
        }
        cfg.clone().finish()
    })();
    let cfg = match built {
        Ok(c) => c,
        Err(e) => return usage_error(e),
    };

    let outcome = match &cli.command {
        Command::Features => commands::features(&cfg),
        Command::Synth => commands::synth(&cfg),
        Command::Train { held_out } => commands::train_cmd(&cfg, held_out.as_deref()),
        Command::EvalLoso { folds, .. } => commands::eval_loso(&cfg, *folds),
        Command::Explain { checkpoint, clip } => commands::explain(&cfg, checkpoint, clip),
        Command::Gradcheck => match commands::gradcheck() {
            Ok(true) => Ok(()),
            Ok(false) => Err(anyhow::anyhow!("gradient check exceeded tolerance")),
            Err(e) => Err(e),
        },
        Command::Report { run } => commands::report(&cfg, run.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(roi_attend::Error::Config(_)) = e.downcast_ref::<roi_attend::Error>() {
                return usage_error(format!("{e:#}"));
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
