mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use funcnet::fsim::{RetrievalDirection, TrainDirection};

#[derive(Parser, Debug)]
#[command(name = "funcnet", version, about = "Voxel functionality networks: data, training, retrieval, synthesis and segmentation")]
pub struct Cli {
    /// Seed for data generation, initialization and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Grid resolution; overrides every module configuration.
    #[arg(long, global = true)]
    pub res: Option<u16>,
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file with module configurations.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a procedural dataset of labeled scenes.
    GenData {
        #[arg(long, default_value_t = 6)]
        categories: usize,
        #[arg(long, default_value_t = 16)]
        scenes_per_category: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the similarity network.
    TrainFsim {
        #[arg(long, value_enum, default_value_t = TrainDir::O2s)]
        direction: TrainDir,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long)]
        margin: Option<f64>,
        /// Mixture components per object.
        #[arg(long)]
        gmm_n: Option<usize>,
        /// Weight of the classification heads in the loss.
        #[arg(long, default_value_t = 1.0)]
        classifier_weight: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the context generator; epochs are split 1:2:1 over the phases.
    TrainIgen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 600)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmentation network and write the label adjacency matrix.
    TrainIseg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Adjacency CSV output; defaults to `<out>.adjacency.csv`.
        #[arg(long)]
        adjacency_out: Option<PathBuf>,
    },
    /// Rank a corpus against query scenes and print a CSV ranking.
    Retrieve {
        #[arg(long)]
        model: PathBuf,
        /// Scene files; object queries use their normalized central object.
        #[arg(long, required = true, num_args = 1..)]
        query: Vec<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_enum, default_value_t = RetrieveDir::O2s)]
        direction: RetrieveDir,
        /// CSV output; defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate an interaction context for the central object of a scene file.
    Synth {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        object: PathBuf,
        #[arg(long)]
        label: Option<usize>,
        /// Zero the category input.
        #[arg(long)]
        no_label: bool,
        /// Place the object with the identity transform.
        #[arg(long)]
        no_transformer: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label the interacting voxels of a scene.
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Category of the central object.
        #[arg(long)]
        label: usize,
        #[arg(long)]
        adjacency: PathBuf,
        /// Skip graph-cut smoothing and keep the per-voxel maximum.
        #[arg(long)]
        no_smooth: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a part library, train its classifier and write a retrieval index.
    BuildIndex {
        #[arg(long, default_value_t = 4)]
        scenes_per_category: usize,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        /// Directory receiving index.json and classifier.fxck.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace each labeled component with the nearest library part.
    Refine {
        #[arg(long)]
        model: PathBuf,
        /// Directory holding index.json.
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// JSON output; a cube-mesh OBJ is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluation reports.
    Eval {
        #[command(subcommand)]
        report: EvalCommand,
    },
    /// Convert a scene file to VXSC, OBJ or CSV.
    Export {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output format; inferred from the extension when absent.
        #[arg(long)]
        format: Option<String>,
    },
    /// Solve a JSON graph-cut instance and print the labeling.
    GraphcutSolve {
        #[arg(long)]
        instance: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Interpolated precision-recall curve as CSV.
    Pr {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = RetrieveDir::O2s)]
        direction: RetrieveDir,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Three-way object classification report.
    Classify(ClassifyArgs),
    /// Chamfer diversity of generated scenes against a dataset.
    Diversity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Segmentation accuracy with and without smoothing.
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        adjacency: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    /// Similarity model trained object-to-scene.
    #[arg(long)]
    pub model: PathBuf,
    /// Reference scenes and standalone classifier training set.
    #[arg(long)]
    pub data: PathBuf,
    /// Objects to classify; defaults to the reference set.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Epochs for the standalone classifier.
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TrainDir {
    O2s,
    S2o,
}

impl From<TrainDir> for TrainDirection {
    fn from(d: TrainDir) -> Self {
        match d {
            TrainDir::O2s => TrainDirection::ObjectToScene,
            TrainDir::S2o => TrainDirection::SceneToObject,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RetrieveDir {
    O2s,
    S2o,
    S2s,
}

impl From<RetrieveDir> for RetrievalDirection {
    fn from(d: RetrieveDir) -> Self {
        match d {
            RetrieveDir::O2s => RetrievalDirection::ObjectToScene,
            RetrieveDir::S2o => RetrievalDirection::SceneToObject,
            RetrieveDir::S2s => RetrievalDirection::SceneToScene,
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<funcnet::Error>()) {
        Some(funcnet::Error::Divergence(_)) => 3,
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
