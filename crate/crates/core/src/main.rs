use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use layergauge::error::{Error, Result, EXIT_USAGE};
use layergauge::index::MetricKind;
use layergauge::par;
use layergauge::report::{self, AnalyzeOptions, Report};
use layergauge::Split;

#[derive(Parser)]
#[command(name = "layergauge", version, about = "Per-layer generalization to unseen classes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every layer of one or more runs and write the report bundle.
    Analyze {
        /// Run manifests; runs sharing model and dataset are treated as seeds.
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// JSON config with `metrics`, `kmeans`, `knn` and `probe` sections.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Override a config field, e.g. `--set kmeans.n_restarts=20`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        set: Vec<String>,
        /// Worker threads (default: available parallelism).
        #[arg(short, long, env = "LAYERGAUGE_JOBS")]
        jobs: Option<usize>,
        /// Skip the per-layer PCA exports.
        #[arg(long)]
        no_pca: bool,
    },
    /// Generate a synthetic layer sweep from a JSON spec.
    Synth {
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Override the seed given in the sweep file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recommend the shallowest layer within `slack` of the best score.
    PruneDepth {
        report: PathBuf,
        #[arg(short, long)]
        metric: MetricKind,
        #[arg(short, long, default_value = "unseen")]
        split: Split,
        #[arg(long, default_value_t = 0.02)]
        slack: f64,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Export a two-component PCA scatter of one layer.
    Viz {
        manifest: PathBuf,
        #[arg(short, long)]
        layer: u32,
        #[arg(short, long, default_value = "unseen")]
        split: Split,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze { manifests, out, config, set, jobs, no_pca } => {
            if jobs == Some(0) {
                return Err(Error::Config("--jobs must be at least 1".into()));
            }
            let opts = AnalyzeOptions {
                manifests,
                out_dir: out,
                config: report::load_config(config.as_deref(), &set)?,
                pca: !no_pca,
            };
            let done = par::with_jobs(jobs, || report::analyze(&opts))?;
            for g in &done.report.groups {
                for s in &g.profile.summary {
                    println!(
                        "{}/{} {} {}: g_max {} at layer {}",
                        g.profile.model,
                        g.profile.dataset,
                        s.metric,
                        s.split,
                        report::fmt_sig(s.g_max),
                        s.best_layer
                    );
                }
            }
            eprintln!("wrote {} files to {}", done.files.len(), opts.out_dir.display());
        }
        Command::Synth { spec, out, seed } => {
            let manifest = report::synth(&spec, &out, seed)?;
            println!("{}", manifest.display());
        }
        Command::PruneDepth { report: path, metric, split, slack, model, dataset } => {
            let report = Report::load(&path)?;
            let profile = report.group(model.as_deref(), dataset.as_deref())?;
            let rec = report::prune_depth(profile, metric, split, slack)?;
            println!("{}", rec.layer);
            println!(
                "depth retained: {}/{} layers ({})",
                rec.layers_kept,
                rec.n_layers,
                report::fmt_sig(rec.depth_fraction)
            );
        }
        Command::Viz { manifest, layer, split, out } => {
            let (csv, sidecar) = report::viz(&manifest, layer, split, &out)?;
            println!("{}", csv.display());
            println!("{}", sidecar.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
