//! Pipeline stages behind the subcommands: dataset synthesis, the three
//! training stages, denoising, evaluation, and the discriminator
//! ablation. Stages are plain functions over [`RunConfig`] so tests can
//! drive them in-process; locking and exit codes live in the binary.
//!
//! Stage products in the output directory:
//!   recognizer.ckpt / recognizer_log.csv / recognizer_summary.json
//!   denoiser.ckpt / denoiser_log.csv
//!   finetune_log.csv
//!   eval_<setting>.csv + .json, ablation.csv + .json

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::RngCore;
use serde::Serialize;

use topdenoise_core::gan::{
    denoise, train_denoiser, DenoiserLog, DenoiserTrainConfig, DenoiserWeights, LossWeights,
};
use topdenoise_core::metrics::{accuracy, evaluate_pipeline, MetricReport, TriangleMesh};
use topdenoise_core::pointcloud::{add_gaussian_noise, NoiseSpec, PointCloud};
use topdenoise_core::recognizer::{
    predict, train_recognizer, EpochStats, RecognizerConfig, RecognizerNet, RecognizerTrainConfig,
};
use topdenoise_core::rng;
use topdenoise_core::synth::{
    build_splits, generate_face, generate_mesh, DatasetManifest, Split, SyntheticIdentity,
};

use crate::config::RunConfig;
use crate::formats;
use crate::{io_err, CliError};

// Stream tags separating the noise draws of different stages.
const NOISE_DENOISER_STAGE: u64 = 1;
const NOISE_FINETUNE_STAGE: u64 = 2;
const NOISE_CMD: u64 = 3;
const ASSESS_SUBSAMPLE: u64 = 0xA5;
const PAIR_PICK: u64 = 0xDE;

/// Held for the duration of one command: an exclusively-created lock file
/// next to (or inside) the directory being produced. Stale locks after a
/// crash must be removed by hand.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(path: PathBuf) -> Result<Self, CliError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                use std::io::Write as _;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::state(
                format!("{}: lock held by another command (remove if stale)", path.display()),
            )),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))
}

fn recognizer_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("recognizer.ckpt")
}

fn denoiser_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("denoiser.ckpt")
}

fn require_recognizer(cfg: &RunConfig) -> Result<RecognizerNet, CliError> {
    let p = recognizer_path(cfg);
    if !p.exists() {
        return Err(CliError::state(format!(
            "{}: missing recognizer checkpoint; run `topdenoise train recognizer` first",
            p.display()
        )));
    }
    formats::load_recognizer(&p)
}

fn require_denoiser(cfg: &RunConfig) -> Result<DenoiserWeights, CliError> {
    let p = denoiser_path(cfg);
    if !p.exists() {
        return Err(CliError::state(format!(
            "{}: missing denoiser checkpoint; run `topdenoise train denoiser` first",
            p.display()
        )));
    }
    formats::load_denoiser(&p)
}

// ---------------------------------------------------------------- synth --

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub clouds: usize,
    pub meshes: usize,
    pub train: usize,
    pub test: usize,
}

/// Generates the dataset directory: per-identity subdirectories of XYZ
/// samples, one OFF mesh each, and manifest.json. The whole tree is
/// staged in a temp directory and renamed into place.
pub fn stage_synth(cfg: &RunConfig, force: bool) -> Result<SynthSummary, CliError> {
    let dir = &cfg.dataset_dir;
    let occupied = dir.exists()
        && fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .next()
            .is_some();
    if occupied && !force {
        return Err(CliError::state(format!(
            "{}: refusing to overwrite a non-empty dataset dir (pass --force)",
            dir.display()
        )));
    }

    let identities: Vec<SyntheticIdentity> = (0..cfg.identities)
        .map(|i| SyntheticIdentity::new(i, cfg.seed))
        .collect();
    let manifest = build_splits(
        &identities,
        cfg.samples_per_identity,
        cfg.neutral_per_identity,
        cfg.split_setting()?,
        cfg.seed,
    )?;

    let name = dir
        .file_name()
        .ok_or_else(|| CliError::config(format!("{}: not a directory name", dir.display())))?;
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match parent {
        Some(p) => {
            fs::create_dir_all(p).map_err(|e| io_err(p, e))?;
            p.join(format!(".tmp-{}", name.to_string_lossy()))
        }
        None => PathBuf::from(format!(".tmp-{}", name.to_string_lossy())),
    };
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;

    for identity in &identities {
        let id_dir = tmp.join(format!("id_{}", identity.id));
        fs::create_dir_all(&id_dir).map_err(|e| io_err(&id_dir, e))?;
        formats::write_off(&id_dir.join("mesh.off"), &generate_mesh(identity, cfg.mesh_grid)?)?;
    }
    for record in &manifest.samples {
        let identity = &identities[record.identity];
        let amplitude = if record.sample_index < cfg.neutral_per_identity {
            0.0
        } else {
            cfg.expression_amplitude
        };
        let pc = generate_face(
            identity,
            amplitude,
            record.sample_index as u64,
            cfg.n_points,
        )?;
        formats::write_xyz(&tmp.join(&record.path), &pc)?;
    }
    formats::write_manifest(&tmp.join("manifest.json"), &manifest)?;

    if occupied {
        fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
    } else if dir.exists() {
        fs::remove_dir(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| io_err(dir, e))?;

    Ok(SynthSummary {
        clouds: manifest.samples.len(),
        meshes: cfg.identities,
        train: manifest.train().count(),
        test: manifest.test().count(),
    })
}

// -------------------------------------------------------------- dataset --

pub struct LoadedDataset {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub meshes: Vec<TriangleMesh>,
    pub classes: usize,
    pub manifest: DatasetManifest,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<LoadedDataset, CliError> {
    let manifest_path = cfg.dataset_dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(CliError::state(format!(
            "{}: missing dataset manifest; run `topdenoise synth` first",
            manifest_path.display()
        )));
    }
    let manifest = formats::read_manifest(&manifest_path)?;
    let classes = manifest
        .samples
        .iter()
        .map(|s| s.identity + 1)
        .max()
        .unwrap_or(0);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for record in &manifest.samples {
        let pc = formats::read_xyz(&cfg.dataset_dir.join(&record.path))?;
        if pc.identity != Some(record.identity) {
            return Err(CliError::state(format!(
                "{}: identity label disagrees with manifest",
                record.path
            )));
        }
        match record.split {
            Split::Train => train.push(pc),
            Split::Test => test.push(pc),
        }
    }
    let mut meshes = Vec::with_capacity(classes);
    for id in 0..classes {
        meshes.push(formats::read_off(
            &cfg.dataset_dir.join(format!("id_{id}/mesh.off")),
        )?);
    }
    Ok(LoadedDataset {
        train,
        test,
        meshes,
        classes,
        manifest,
    })
}

// ----------------------------------------------------------- recognizer --

#[derive(Debug, Clone, Serialize)]
pub struct RecognizerSummary {
    pub epochs: usize,
    pub final_train_loss: f64,
    /// Clean-train-split accuracy measured after training, dropout off.
    pub final_train_accuracy: f64,
}

fn subsample(pc: &PointCloud, count: usize, r: &mut rand_chacha::ChaCha8Rng) -> PointCloud {
    if count >= pc.len() {
        return pc.clone();
    }
    let idx = rng::subsample_indices(r, pc.len(), count);
    PointCloud {
        points: idx.iter().map(|&i| pc.points[i]).collect(),
        identity: pc.identity,
        expression: pc.expression,
    }
}

/// Accuracy of `net` on `clouds`, each deterministically subsampled to
/// the configured prediction size.
fn clean_accuracy(
    net: &RecognizerNet,
    clouds: &[PointCloud],
    cfg: &RunConfig,
) -> Result<f64, CliError> {
    let mut preds = Vec::with_capacity(clouds.len());
    let mut truth = Vec::with_capacity(clouds.len());
    for (i, pc) in clouds.iter().enumerate() {
        let mut r = rng::stream(cfg.seed, rng::domain::SUBSAMPLE, ASSESS_SUBSAMPLE, i as u64);
        preds.push(predict(net, &subsample(pc, cfg.train_points, &mut r))?);
        truth.push(pc.identity.expect("dataset clouds are labeled"));
    }
    Ok(accuracy(&preds, &truth)?)
}

fn recognizer_log_csv(stats: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_loss,accuracy\n");
    for s in stats {
        let _ = writeln!(out, "{},{},{}", s.epoch, s.mean_loss, s.accuracy);
    }
    out
}

fn write_recognizer_products(
    cfg: &RunConfig,
    net: &RecognizerNet,
    stats: &[EpochStats],
    log_name: &str,
) -> Result<RecognizerSummary, CliError> {
    ensure_out_dir(cfg)?;
    formats::save_recognizer(&recognizer_path(cfg), net)?;
    formats::write_atomic(
        &cfg.output_dir.join(log_name),
        recognizer_log_csv(stats).as_bytes(),
    )?;
    let data = load_dataset(cfg)?;
    let summary = RecognizerSummary {
        epochs: stats.len(),
        final_train_loss: stats.last().map(|s| s.mean_loss).unwrap_or(f64::NAN),
        final_train_accuracy: clean_accuracy(net, &data.train, cfg)?,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    formats::write_atomic(&cfg.output_dir.join("recognizer_summary.json"), text.as_bytes())?;
    Ok(summary)
}

pub fn stage_train_recognizer(cfg: &RunConfig) -> Result<RecognizerSummary, CliError> {
    let data = load_dataset(cfg)?;
    let mut config = RecognizerConfig::new(data.classes);
    config.k = cfg.k;
    let mut net = RecognizerNet::new(config, cfg.seed)?;
    let stats = train_recognizer(
        &mut net,
        &data.train,
        &RecognizerTrainConfig {
            epochs: cfg.recognizer_epochs,
            batch: cfg.batch,
            lr: cfg.lr,
            seed: cfg.seed,
            train_points: Some(cfg.train_points),
        },
    )?;
    write_recognizer_products(cfg, &net, &stats, "recognizer_log.csv")
}

// -------------------------------------------------------------- denoiser --

/// (noisy, clean) training pairs: a deterministic subset of the train
/// split, noise variances cycled from the config list.
fn build_pairs(
    cfg: &RunConfig,
    train: &[PointCloud],
    tag: u64,
) -> Result<Vec<(PointCloud, PointCloud)>, CliError> {
    let count = if cfg.denoiser_pairs == 0 {
        train.len()
    } else {
        cfg.denoiser_pairs.min(train.len())
    };
    let mut pick = rng::stream(cfg.seed, rng::domain::SHUFFLE, PAIR_PICK, 0);
    let chosen = rng::subsample_indices(&mut pick, train.len(), count);
    let mut pairs = Vec::with_capacity(count);
    for (i, &ci) in chosen.iter().enumerate() {
        let sigma2 = cfg.sigma2[i % cfg.sigma2.len()];
        let mut r = rng::stream(cfg.seed, rng::domain::NOISE, tag, i as u64);
        let noisy = add_gaussian_noise(
            &train[ci],
            &NoiseSpec {
                variance: sigma2,
                seed: r.next_u64(),
            },
        )?;
        pairs.push((noisy, train[ci].clone()));
    }
    Ok(pairs)
}

fn denoiser_train_config(cfg: &RunConfig, pairs: usize, weights: LossWeights) -> DenoiserTrainConfig {
    DenoiserTrainConfig {
        epochs: cfg.denoiser_epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        weights,
        mu: cfg.mu,
        resolution: (cfg.resolution[0], cfg.resolution[1]),
        seed: cfg.seed,
        holdout: if pairs > 1 { cfg.holdout.min(pairs - 1) } else { 0 },
        rfd_points: Some(cfg.rfd_points),
        ..DenoiserTrainConfig::default()
    }
}

fn denoiser_log_csv(log: &DenoiserLog) -> String {
    let mut out = String::from("epoch,disc_loss,gen_loss,recon,holdout_recon\n");
    for e in &log.epochs {
        let hr = e
            .holdout_recon
            .map(|v| v.to_string())
            .unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{hr}", e.epoch, e.disc_loss, e.gen_loss, e.recon);
    }
    out
}

fn train_denoiser_variant(
    cfg: &RunConfig,
    rec: &RecognizerNet,
    pairs: &[(PointCloud, PointCloud)],
    weights: LossWeights,
) -> Result<(DenoiserWeights, DenoiserLog), CliError> {
    let dcfg = denoiser_train_config(cfg, pairs.len(), weights);
    Ok(train_denoiser(pairs, rec, &dcfg)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct DenoiserSummary {
    pub pairs: usize,
    pub epochs: usize,
    pub final_recon: f64,
    pub initial_holdout_recon: Option<f64>,
    pub final_holdout_recon: Option<f64>,
}

pub fn stage_train_denoiser(cfg: &RunConfig) -> Result<DenoiserSummary, CliError> {
    let rec = require_recognizer(cfg)?;
    let data = load_dataset(cfg)?;
    let pairs = build_pairs(cfg, &data.train, NOISE_DENOISER_STAGE)?;
    let weights = LossWeights {
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
    };
    let (w, log) = train_denoiser_variant(cfg, &rec, &pairs, weights)?;
    ensure_out_dir(cfg)?;
    let dcfg = denoiser_train_config(cfg, pairs.len(), weights);
    formats::save_denoiser(
        &denoiser_path(cfg),
        &w,
        &dcfg,
        rec.config.per_point_width(),
    )?;
    formats::write_atomic(
        &cfg.output_dir.join("denoiser_log.csv"),
        denoiser_log_csv(&log).as_bytes(),
    )?;
    Ok(DenoiserSummary {
        pairs: pairs.len(),
        epochs: log.epochs.len(),
        final_recon: log.epochs.last().map(|e| e.recon).unwrap_or(f64::NAN),
        initial_holdout_recon: log.initial_holdout_recon,
        final_holdout_recon: log.epochs.last().and_then(|e| e.holdout_recon),
    })
}

// -------------------------------------------------------------- finetune --

/// Adapts the recognizer to denoiser output: continues training on the
/// clean train split plus denoised noisy copies of it, then overwrites
/// the recognizer checkpoint.
pub fn stage_finetune(cfg: &RunConfig) -> Result<RecognizerSummary, CliError> {
    let mut rec = require_recognizer(cfg)?;
    let weights = require_denoiser(cfg)?;
    let data = load_dataset(cfg)?;
    let mut augmented = data.train.clone();
    for (i, clean) in data.train.iter().enumerate() {
        let sigma2 = cfg.sigma2[i % cfg.sigma2.len()];
        let mut r = rng::stream(cfg.seed, rng::domain::NOISE, NOISE_FINETUNE_STAGE, i as u64);
        let noisy = add_gaussian_noise(
            clean,
            &NoiseSpec {
                variance: sigma2,
                seed: r.next_u64(),
            },
        )?;
        augmented.push(denoise(&noisy, &weights)?);
    }
    let stats = train_recognizer(
        &mut rec,
        &augmented,
        &RecognizerTrainConfig {
            epochs: cfg.finetune_epochs,
            batch: cfg.batch,
            lr: cfg.lr,
            seed: cfg.seed.wrapping_add(1),
            train_points: Some(cfg.train_points),
        },
    )?;
    write_recognizer_products(cfg, &rec, &stats, "finetune_log.csv")
}

// -------------------------------------------------------------- denoise --

/// Denoises one XYZ file. With `dump_planes`, also writes the input's
/// three plane projections as `<output stem>_<axis>.pgm`.
pub fn stage_denoise(
    cfg: &RunConfig,
    input: &Path,
    output: &Path,
    dump_planes: bool,
) -> Result<(), CliError> {
    let weights = require_denoiser(cfg)?;
    let pc = formats::read_xyz(input)?;
    let denoised = denoise(&pc, &weights)?;
    formats::write_xyz(output, &denoised)?;
    if dump_planes {
        let proj = topdenoise_core::projection::project(&pc, weights.resolution)?;
        let stem = output
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "cloud".into());
        for axis in topdenoise_core::projection::PlaneAxis::ALL {
            let name = format!("{stem}_{}.pgm", axis.name());
            formats::write_pgm(&output.with_file_name(name), proj.plane(axis))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- noise --

/// Writes a noisy copy of the dataset (same layout, manifest, meshes)
/// with the given variance applied to every cloud.
pub fn stage_noise(cfg: &RunConfig, variance: f64, out_dir: &Path) -> Result<usize, CliError> {
    if !(variance >= 0.0) {
        return Err(CliError::config(format!(
            "variance must be non-negative, got {variance}"
        )));
    }
    let data = load_dataset(cfg)?;
    let name = out_dir
        .file_name()
        .ok_or_else(|| CliError::config(format!("{}: not a directory name", out_dir.display())))?;
    let parent = out_dir.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match parent {
        Some(p) => {
            fs::create_dir_all(p).map_err(|e| io_err(p, e))?;
            p.join(format!(".tmp-{}", name.to_string_lossy()))
        }
        None => PathBuf::from(format!(".tmp-{}", name.to_string_lossy())),
    };
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;

    for id in 0..data.classes {
        let id_dir = tmp.join(format!("id_{id}"));
        fs::create_dir_all(&id_dir).map_err(|e| io_err(&id_dir, e))?;
        let rel = format!("id_{id}/mesh.off");
        fs::copy(cfg.dataset_dir.join(&rel), tmp.join(&rel))
            .map_err(|e| io_err(&tmp.join(&rel), e))?;
    }
    for (i, record) in data.manifest.samples.iter().enumerate() {
        let pc = formats::read_xyz(&cfg.dataset_dir.join(&record.path))?;
        let mut r = rng::stream(cfg.seed, rng::domain::NOISE, NOISE_CMD, i as u64);
        let noisy = add_gaussian_noise(
            &pc,
            &NoiseSpec {
                variance,
                seed: r.next_u64(),
            },
        )?;
        formats::write_xyz(&tmp.join(&record.path), &noisy)?;
    }
    formats::write_manifest(&tmp.join("manifest.json"), &data.manifest)?;
    if out_dir.exists() {
        fs::remove_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    }
    fs::rename(&tmp, out_dir).map_err(|e| io_err(out_dir, e))?;
    Ok(data.manifest.samples.len())
}

// ----------------------------------------------------------------- eval --

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub sigma2: f64,
    pub noisy_accuracy: f64,
    pub denoised_accuracy: f64,
    pub noisy_cd: f64,
    pub denoised_cd: f64,
    pub noisy_p2m: f64,
    pub denoised_p2m: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub setting: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "sigma2,noisy_accuracy,denoised_accuracy,noisy_cd,denoised_cd,noisy_p2m,denoised_p2m\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.sigma2,
                r.noisy_accuracy,
                r.denoised_accuracy,
                r.noisy_cd,
                r.denoised_cd,
                r.noisy_p2m,
                r.denoised_p2m
            );
        }
        out
    }
}

fn zip_reports(setting: &str, noisy: &MetricReport, denoised: &MetricReport) -> EvalReport {
    let rows = noisy
        .levels
        .iter()
        .zip(&denoised.levels)
        .map(|(n, d)| EvalRow {
            sigma2: n.sigma2,
            noisy_accuracy: n.accuracy,
            denoised_accuracy: d.accuracy,
            noisy_cd: n.cd,
            denoised_cd: d.cd,
            noisy_p2m: n.p2m,
            denoised_p2m: d.p2m,
        })
        .collect();
    EvalReport {
        setting: setting.into(),
        rows,
    }
}

/// Noisy-baseline and denoised metrics on the test split at every
/// configured noise level. Both passes share per-level noise seeds, so
/// the comparison is on identical noisy clouds.
pub fn stage_eval(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    let rec = require_recognizer(cfg)?;
    let weights = require_denoiser(cfg)?;
    let data = load_dataset(cfg)?;
    let noisy = evaluate_pipeline(
        &data.test,
        &data.meshes,
        None,
        &rec,
        &cfg.sigma2,
        cfg.seed,
        Some(cfg.train_points),
    )?;
    let denoised = evaluate_pipeline(
        &data.test,
        &data.meshes,
        Some(&weights),
        &rec,
        &cfg.sigma2,
        cfg.seed,
        Some(cfg.train_points),
    )?;
    let report = zip_reports(&cfg.setting, &noisy, &denoised);
    ensure_out_dir(cfg)?;
    formats::write_atomic(
        &cfg.output_dir.join(format!("eval_{}.csv", cfg.setting)),
        report.csv().as_bytes(),
    )?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    formats::write_atomic(
        &cfg.output_dir.join(format!("eval_{}.json", cfg.setting)),
        json.as_bytes(),
    )?;
    Ok(report)
}

// --------------------------------------------------------------- ablate --

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub sigma2: f64,
    pub full: f64,
    pub vad_only: f64,
    pub rfd_only: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("sigma2,full,vad_only,rfd_only\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.sigma2, r.full, r.vad_only, r.rfd_only);
        }
        out
    }
}

fn variant_accuracies(
    cfg: &RunConfig,
    rec: &RecognizerNet,
    data: &LoadedDataset,
    weights: &DenoiserWeights,
) -> Result<Vec<f64>, CliError> {
    let report = evaluate_pipeline(
        &data.test,
        &data.meshes,
        Some(weights),
        rec,
        &cfg.sigma2,
        cfg.seed,
        Some(cfg.train_points),
    )?;
    Ok(report.levels.iter().map(|l| l.accuracy).collect())
}

/// Trains VAD-only (lambda1 = 0) and RFD-only (lambda2 = 0) denoiser
/// variants, reuses the main checkpoint as the Full variant when present
/// (training it otherwise), and reports per-level accuracy for all three.
pub fn stage_ablate(cfg: &RunConfig) -> Result<AblationReport, CliError> {
    let rec = require_recognizer(cfg)?;
    let data = load_dataset(cfg)?;
    let pairs = build_pairs(cfg, &data.train, NOISE_DENOISER_STAGE)?;

    let full = if denoiser_path(cfg).exists() {
        formats::load_denoiser(&denoiser_path(cfg))?
    } else {
        train_denoiser_variant(
            cfg,
            &rec,
            &pairs,
            LossWeights {
                lambda1: cfg.lambda1,
                lambda2: cfg.lambda2,
            },
        )?
        .0
    };
    let vad_only = train_denoiser_variant(
        cfg,
        &rec,
        &pairs,
        LossWeights {
            lambda1: 0.0,
            lambda2: cfg.lambda2,
        },
    )?
    .0;
    let rfd_only = train_denoiser_variant(
        cfg,
        &rec,
        &pairs,
        LossWeights {
            lambda1: cfg.lambda1,
            lambda2: 0.0,
        },
    )?
    .0;

    let acc_full = variant_accuracies(cfg, &rec, &data, &full)?;
    let acc_vad = variant_accuracies(cfg, &rec, &data, &vad_only)?;
    let acc_rfd = variant_accuracies(cfg, &rec, &data, &rfd_only)?;
    let rows = cfg
        .sigma2
        .iter()
        .enumerate()
        .map(|(i, &s)| AblationRow {
            sigma2: s,
            full: acc_full[i],
            vad_only: acc_vad[i],
            rfd_only: acc_rfd[i],
        })
        .collect();
    let report = AblationReport { rows };
    ensure_out_dir(cfg)?;
    formats::write_atomic(&cfg.output_dir.join("ablation.csv"), report.csv().as_bytes())?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    formats::write_atomic(&cfg.output_dir.join("ablation.json"), json.as_bytes())?;
    Ok(report)
}
