//! Run configuration: one JSON-serializable struct holding every knob the
//! pipeline reads, with paper-faithful defaults. Resolution order is
//! defaults < config file (`--config` flag, else `TOPDENOISE_CONFIG` env
//! var) < individual command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use topdenoise_core::synth::{SplitSetting, DEFAULT_EXPRESSION_AMPLITUDE};

use crate::CliError;

/// Env var naming a default config file, used when `--config` is absent.
pub const CONFIG_ENV: &str = "TOPDENOISE_CONFIG";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory (`id_<K>/sample_<J>.xyz`, meshes, manifest).
    pub dataset_dir: PathBuf,
    /// Output directory for checkpoints, logs, and reports.
    pub output_dir: PathBuf,
    /// Split construction: "random" or "neutral".
    pub setting: String,
    /// Noise variances evaluated (and cycled through during training).
    pub sigma2: Vec<f64>,
    /// Plane image resolution (rows, cols).
    pub resolution: [usize; 2],
    /// Graph neighborhood size.
    pub k: usize,
    /// Recognition-feature discriminator weight in l_D.
    pub lambda1: f64,
    /// Visual appearance discriminator weight in l_D.
    pub lambda2: f64,
    /// Reconstruction weight in the generator objective.
    pub mu: f64,
    pub identities: usize,
    pub samples_per_identity: usize,
    pub neutral_per_identity: usize,
    pub n_points: usize,
    pub expression_amplitude: f64,
    /// Vertices per side of each identity's reference mesh.
    pub mesh_grid: usize,
    pub recognizer_epochs: usize,
    pub denoiser_epochs: usize,
    pub finetune_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Points per cloud used for recognizer training steps and for
    /// classification during evaluation.
    pub train_points: usize,
    /// Points fed through the frozen recognizer inside denoiser training.
    pub rfd_points: usize,
    /// Training pairs for the denoiser stage (0 = every train cloud).
    pub denoiser_pairs: usize,
    /// Pairs held out of denoiser training for the reconstruction log.
    pub holdout: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: PathBuf::from("dataset"),
            output_dir: PathBuf::from("out"),
            setting: "random".into(),
            sigma2: vec![4.0, 8.0, 16.0, 32.0, 64.0],
            resolution: [64, 64],
            k: 16,
            lambda1: 0.67,
            lambda2: 0.33,
            mu: 10.0,
            identities: 20,
            samples_per_identity: 10,
            neutral_per_identity: 3,
            n_points: 1024,
            expression_amplitude: DEFAULT_EXPRESSION_AMPLITUDE,
            mesh_grid: 33,
            recognizer_epochs: 12,
            denoiser_epochs: 8,
            finetune_epochs: 2,
            batch: 4,
            lr: 1e-3,
            seed: 7,
            train_points: 256,
            rfd_points: 192,
            denoiser_pairs: 64,
            holdout: 4,
        }
    }
}

impl RunConfig {
    pub fn split_setting(&self) -> Result<SplitSetting, CliError> {
        match self.setting.as_str() {
            "random" => Ok(SplitSetting::Random),
            "neutral" => Ok(SplitSetting::Neutral),
            other => Err(CliError::config(format!(
                "setting must be \"random\" or \"neutral\", got {other:?}"
            ))),
        }
    }

    /// Front-loaded validation so commands fail before touching the
    /// filesystem.
    pub fn validate(&self) -> Result<(), CliError> {
        self.split_setting()?;
        if self.sigma2.is_empty() {
            return Err(CliError::config("sigma2 list is empty"));
        }
        for &s in &self.sigma2 {
            if !(s >= 0.0) {
                return Err(CliError::config(format!("sigma2 {s} is negative")));
            }
        }
        for r in self.resolution {
            // The plane nets pool and stride by two three times over.
            if r < 16 || r % 8 != 0 {
                return Err(CliError::config(format!(
                    "resolution dims must be multiples of 8, at least 16, got {r}"
                )));
            }
        }
        if self.k == 0 {
            return Err(CliError::config("k must be positive"));
        }
        if self.train_points <= self.k || self.rfd_points <= self.k {
            return Err(CliError::config(format!(
                "train_points ({}) and rfd_points ({}) must exceed k ({})",
                self.train_points, self.rfd_points, self.k
            )));
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) || !(self.mu >= 0.0) {
            return Err(CliError::config("lambda1, lambda2, mu must be non-negative"));
        }
        if self.identities < 2 {
            return Err(CliError::config("need at least 2 identities"));
        }
        if self.samples_per_identity == 0 {
            return Err(CliError::config("samples_per_identity must be positive"));
        }
        if self.neutral_per_identity > self.samples_per_identity {
            return Err(CliError::config(format!(
                "neutral_per_identity {} exceeds samples_per_identity {}",
                self.neutral_per_identity, self.samples_per_identity
            )));
        }
        if self.n_points < 64 {
            return Err(CliError::config("n_points must be at least 64"));
        }
        if self.mesh_grid < 2 {
            return Err(CliError::config("mesh_grid must be at least 2"));
        }
        if self.batch == 0 {
            return Err(CliError::config("batch must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(CliError::config("lr must be positive"));
        }
        Ok(())
    }
}

/// Per-flag overrides applied on top of the loaded config. Every field
/// mirrors a [`RunConfig`] field; unset flags leave the config untouched.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory for checkpoints and reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Split setting: random | neutral.
    #[arg(long)]
    pub setting: Option<String>,
    /// Comma-separated noise variances.
    #[arg(long, value_delimiter = ',')]
    pub sigma2: Option<Vec<f64>>,
    /// Plane resolution as rows,cols.
    #[arg(long, value_delimiter = ',')]
    pub resolution: Option<Vec<usize>>,
    /// Neighbors per point in recognizer graphs.
    #[arg(long)]
    pub k: Option<usize>,
    /// Weight of the point-feature discriminator loss.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Weight of the plane-image discriminator loss.
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Weight of the generator reconstruction loss.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Number of synthetic identities.
    #[arg(long)]
    pub identities: Option<usize>,
    /// Clouds generated per identity.
    #[arg(long)]
    pub samples_per_identity: Option<usize>,
    /// Leading neutral-expression clouds per identity.
    #[arg(long)]
    pub neutral_per_identity: Option<usize>,
    /// Points per generated cloud.
    #[arg(long)]
    pub n_points: Option<usize>,
    /// Expression perturbation strength for non-neutral clouds.
    #[arg(long)]
    pub expression_amplitude: Option<f64>,
    /// Vertices per side of each identity's reference mesh.
    #[arg(long)]
    pub mesh_grid: Option<usize>,
    /// Recognizer training epochs.
    #[arg(long)]
    pub recognizer_epochs: Option<usize>,
    /// Denoiser training epochs.
    #[arg(long)]
    pub denoiser_epochs: Option<usize>,
    /// Recognizer finetune epochs.
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Minibatch size for both trainers.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Master seed for data generation and training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Points subsampled per cloud for recognizer training and prediction.
    #[arg(long)]
    pub train_points: Option<usize>,
    /// Points subsampled per cloud for the point-feature discriminator.
    #[arg(long)]
    pub rfd_points: Option<usize>,
    /// Training pairs for the denoiser (0 = whole train split).
    #[arg(long)]
    pub denoiser_pairs: Option<usize>,
    /// Trailing training pairs held out for reconstruction monitoring.
    #[arg(long)]
    pub holdout: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        macro_rules! set {
            ($field:ident, $target:ident) => {
                if let Some(v) = &self.$field {
                    cfg.$target = v.clone();
                }
            };
        }
        set!(dataset, dataset_dir);
        set!(out, output_dir);
        set!(setting, setting);
        set!(sigma2, sigma2);
        if let Some(r) = &self.resolution {
            if r.len() != 2 {
                return Err(CliError::config("resolution takes exactly rows,cols"));
            }
            cfg.resolution = [r[0], r[1]];
        }
        macro_rules! set_copy {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        set_copy!(k);
        set_copy!(lambda1);
        set_copy!(lambda2);
        set_copy!(mu);
        set_copy!(identities);
        set_copy!(samples_per_identity);
        set_copy!(neutral_per_identity);
        set_copy!(n_points);
        set_copy!(expression_amplitude);
        set_copy!(mesh_grid);
        set_copy!(recognizer_epochs);
        set_copy!(denoiser_epochs);
        set_copy!(finetune_epochs);
        set_copy!(batch);
        set_copy!(lr);
        set_copy!(seed);
        set_copy!(train_points);
        set_copy!(rfd_points);
        set_copy!(denoiser_pairs);
        set_copy!(holdout);
        Ok(())
    }
}

/// Loads the base config: the `--config` file if given, else the file
/// named by `TOPDENOISE_CONFIG`, else built-in defaults.
pub fn load_config(flag: Option<&Path>) -> Result<RunConfig, CliError> {
    let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    let path = flag.map(Path::to_path_buf).or(env_path);
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))
        }
        None => Ok(RunConfig::default()),
    }
}
