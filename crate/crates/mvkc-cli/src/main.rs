//! `mvkc` — the multi-view keypoint-correspondence pipeline, end to end:
//! render schedules, synthetic oracle images, dense keypoints, descriptor
//! training pairs, correspondence sets, pose estimation, metrics, and
//! heatmaps.
//!
//! Exit codes: 0 success, 2 usage error, 3 degenerate input, 4 format
//! error. Every command is deterministic given its flags and seeds; the
//! `MVKC_THREADS` environment variable caps internal parallelism (0 or
//! unset = automatic).

mod commands;
mod config;
mod error;

use clap::{Parser, Subcommand};
use config::PipelineConfig;
use error::CliError;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "mvkc", version, about = "Multi-view keypoint correspondence pipeline")]
struct Cli {
    /// JSON config file providing defaults; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the fixed viewpoint schedule, one "az el ti" line per view.
    Schedule {
        /// Number of views m.
        #[arg(short = 'm', long = "views")]
        views: Option<usize>,
    },
    /// Render a synthetic image with oracle descriptors.
    Synth {
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        camera: Option<PathBuf>,
        /// Pose as "az,el,ti" in degrees.
        #[arg(long)]
        pose: String,
        #[arg(long)]
        out_prefix: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples_per_edge: Option<usize>,
        /// Descriptor dimensionality.
        #[arg(long)]
        dim: Option<usize>,
        /// Per-render descriptor noise magnitude.
        #[arg(long)]
        noise: Option<f64>,
        /// Seed for the noise stream (defaults to --seed).
        #[arg(long)]
        noise_seed: Option<u64>,
        /// Apply occlusion pruning before stamping.
        #[arg(long)]
        prune: bool,
    },
    /// Densify sparse keypoint annotations along the skeleton.
    Densify {
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        samples_per_edge: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate positive/negative correspondence pairs from two dense
    /// annotation files (record i of A pairs with record i of B).
    Pairs {
        #[arg(long = "a")]
        file_a: PathBuf,
        #[arg(long = "b")]
        file_b: PathBuf,
        #[arg(long)]
        camera: Option<PathBuf>,
        /// Template, for the per-category required-visible rule.
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        negatives: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the affine descriptor head on feature grids + pairs.
    TrainHead {
        #[arg(long)]
        features_a: PathBuf,
        #[arg(long)]
        features_b: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long = "lr", default_value_t = 0.001)]
        learning_rate: f64,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON loss-trace output.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compute the multi-view correspondence set of a query descriptor map
    /// against rendered view maps.
    Corrmap {
        /// Query image descriptor map (DMAP).
        #[arg(long)]
        query: PathBuf,
        /// View descriptor maps in schedule order.
        #[arg(long, num_args = 1..)]
        views: Vec<PathBuf>,
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concatenate correspondence-set files along the view axis.
    Fuse {
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the pose from a correspondence set by exhaustive grid
    /// search; prints "az el ti".
    Estimate {
        #[arg(long)]
        cset: PathBuf,
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long)]
        az_step: Option<f64>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        elevations: Option<Vec<f64>>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        tilts: Option<Vec<f64>>,
        /// Bins per angle for the output distributions.
        #[arg(long)]
        bins: Option<usize>,
        /// Write per-angle distributions as JSON.
        #[arg(long)]
        dist: Option<PathBuf>,
        /// Write the scored grid as "az el ti score" lines.
        #[arg(long)]
        grid_out: Option<PathBuf>,
    },
    /// Compute viewpoint metrics from predictions and ground truth.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// "pose" (median error + accuracies) or "detection" (AVP).
        #[arg(long, default_value = "pose")]
        mode: String,
        #[arg(long, default_value_t = 4)]
        avp_n: usize,
        /// Write the report here in addition to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one correspondence-map channel as a PGM (or PPM) heatmap.
    Heatmap {
        #[arg(long)]
        cset: PathBuf,
        /// Flat channel index (view * N + keypoint).
        #[arg(long)]
        channel: usize,
        #[arg(long)]
        out: PathBuf,
        /// Emit a color PPM instead of grayscale PGM.
        #[arg(long)]
        color: bool,
    },
}

fn configure_threads() {
    if let Ok(value) = std::env::var("MVKC_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads > 0 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Schedule { views } => commands::schedule(views, &config),
        Command::Synth {
            template,
            camera,
            pose,
            out_prefix,
            seed,
            samples_per_edge,
            dim,
            noise,
            noise_seed,
            prune,
        } => commands::synth(
            template,
            camera,
            &pose,
            &out_prefix,
            seed,
            samples_per_edge,
            dim,
            noise,
            noise_seed,
            prune,
            &config,
        ),
        Command::Densify {
            template,
            annotations,
            samples_per_edge,
            out,
        } => commands::densify_cmd(template, &annotations, samples_per_edge, &out, &config),
        Command::Pairs {
            file_a,
            file_b,
            camera,
            template,
            negatives,
            seed,
            out,
        } => commands::pairs(file_a, file_b, camera, template, negatives, seed, &out, &config),
        Command::TrainHead {
            features_a,
            features_b,
            pairs,
            dim,
            steps,
            learning_rate,
            margin,
            seed,
            out,
            trace,
        } => commands::train_head_cmd(
            &features_a,
            &features_b,
            &pairs,
            dim,
            steps,
            learning_rate,
            margin,
            seed,
            &out,
            trace.as_deref(),
            &config,
        ),
        Command::Corrmap {
            query,
            views,
            template,
            camera,
            out,
        } => commands::corrmap(&query, &views, template, camera, &out, &config),
        Command::Fuse { inputs, out } => commands::fuse(&inputs, &out),
        Command::Estimate {
            cset,
            template,
            camera,
            az_step,
            elevations,
            tilts,
            bins,
            dist,
            grid_out,
        } => commands::estimate(
            &cset,
            template,
            camera,
            az_step,
            elevations,
            tilts,
            bins,
            dist.as_deref(),
            grid_out.as_deref(),
            &config,
        ),
        Command::Eval {
            predictions,
            ground_truth,
            mode,
            avp_n,
            out,
        } => commands::eval_cmd(&predictions, &ground_truth, &mode, avp_n, out.as_deref()),
        Command::Heatmap {
            cset,
            channel,
            out,
            color,
        } => commands::heatmap_cmd(&cset, channel, &out, color),
    }
}

fn main() {
    configure_threads();
    let cli = Cli::parse();
    if let Err(error) = run(cli) {
        eprintln!("error: {error}");
        std::process::exit(error.code);
    }
}
