use clap::{Args, Parser, Subcommand};
use mo3tr::commands::{self, TrackOptions};
use mo3tr::config::{parse_caps, RunConfig};
use mo3tr::error::{self, Result};
use mo3tr::{dataset, output};
use mo3tr_core::model::FilterMode;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "mo3tr", version, about = "Transformer multi-object tracking on synthetic sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.config.is_some() || !self.set.is_empty()
    }

    fn load(&self, extra: &[String]) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some((p.as_path(), error::read_to_string(p)?)),
            None => None,
        };
        let overrides: Vec<String> = self.set.iter().chain(extra).cloned().collect();
        RunConfig::load(text.as_ref().map(|(p, s)| (*p, s.as_str())), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a standard suite (or `all`) to disk.
    Gen { suite: String, out_dir: PathBuf },
    /// Train both stages; writes the checkpoint, a loss CSV and the config.
    Train {
        data_dir: PathBuf,
        out_checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Track one sequence and write MOTChallenge results.
    Track {
        checkpoint: PathBuf,
        sequence: PathBuf,
        out_track_file: PathBuf,
        /// MOTChallenge detections licensing new tracks.
        #[arg(long)]
        public_dets: Option<PathBuf>,
        #[arg(long, value_parser = ["cd", "iou"])]
        filter: Option<String>,
        #[arg(long)]
        filter_threshold: Option<f64>,
        #[arg(long)]
        dump_attention: Option<PathBuf>,
        #[arg(long)]
        dump_embeddings: Option<PathBuf>,
        #[arg(long)]
        history_cap: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a result file against ground truth.
    Eval {
        hyp: PathBuf,
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Track a suite at several history caps and tabulate the metrics.
    Ablate {
        checkpoint: PathBuf,
        suite: String,
        #[arg(long)]
        caps: Option<String>,
        /// Read the suite from this directory instead of generating it.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { suite, out_dir } => {
            let all = suite == "all";
            let names: Vec<String> = if all {
                mo3tr_core::synthworld::standard_suites().into_iter().map(|s| s.name).collect()
            } else {
                vec![suite]
            };
            for name in names {
                let dir = if all { out_dir.join(&name) } else { out_dir.clone() };
                let seqs = commands::gen(&name, &dir)?;
                println!("{name}: {} sequences in {}", seqs.len(), dir.display());
            }
            Ok(())
        }
        Command::Train {
            data_dir,
            out_checkpoint,
            cfg,
            quiet,
        } => {
            let cfg = cfg.load(&[])?;
            let data = dataset::read_dir(&data_dir)?;
            let (_, curve) = commands::train_run(&cfg, &data, &out_checkpoint, |r| {
                if !quiet {
                    eprintln!("stage {} epoch {} loss {:.6}", r.stage, r.epoch + 1, r.total);
                }
            })?;
            if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
                println!("trained {} epochs, loss {:.6} -> {:.6}", curve.len(), first.total, last.total);
            }
            println!("checkpoint {}", out_checkpoint.display());
            Ok(())
        }
        Command::Track {
            checkpoint,
            sequence,
            out_track_file,
            public_dets,
            filter,
            filter_threshold,
            dump_attention,
            dump_embeddings,
            history_cap,
            cfg,
        } => {
            let run_cfg = if cfg.given() { Some(cfg.load(&[])?) } else { None };
            let filter = filter.as_deref().map(FilterMode::parse).transpose()?;
            let opts = TrackOptions {
                history_cap: history_cap.or(run_cfg.as_ref().and_then(|c| c.history_cap)),
                public_detections: public_dets,
                filter: filter.or(run_cfg.as_ref().and_then(|c| c.filter)),
                filter_threshold: filter_threshold.or(run_cfg.as_ref().and_then(|c| c.filter_threshold)),
                dump_attention,
                dump_embeddings,
            };
            let file = commands::track(&checkpoint, &sequence, &out_track_file, &opts, run_cfg.as_ref())?;
            println!("{} rows -> {}", file.rows.len(), out_track_file.display());
            Ok(())
        }
        Command::Eval { hyp, gt, iou, json } => {
            let report = commands::eval(&hyp, &gt, iou)?;
            print!("{}", output::report_table(std::slice::from_ref(&report), None));
            if let Some(p) = json {
                error::write(&p, output::report_json(std::slice::from_ref(&report), None))?;
            }
            Ok(())
        }
        Command::Ablate {
            checkpoint,
            suite,
            caps,
            data_dir,
            json,
            cfg,
        } => {
            let run_cfg = if cfg.given() { Some(cfg.load(&[])?) } else { None };
            let caps = match (&caps, &run_cfg) {
                (Some(c), _) => parse_caps("--caps", c)?,
                (None, Some(rc)) => rc.ablate_caps.clone(),
                (None, None) => vec![1, 10, 20, 30],
            };
            let iou = run_cfg.as_ref().map_or(0.5, |c| c.iou_threshold);
            let model = commands::load_model(&checkpoint, run_cfg.as_ref())?;
            let data = match data_dir {
                Some(d) => dataset::read_dir(&d)?,
                None => commands::find_suite(&suite)?.generate()?,
            };
            let rows = commands::ablate(&model, &data, &caps, iou)?;
            print!("{}", output::ablation_table(&rows));
            if let Some(p) = json {
                error::write(&p, output::ablation_json(&rows))?;
                if let Some(rc) = &run_cfg {
                    error::write(&p.with_file_name("config.txt"), rc.echo())?;
                }
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}", e.line());
        std::process::exit(e.exit_code());
    }
}
