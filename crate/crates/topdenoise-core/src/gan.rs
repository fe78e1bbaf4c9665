//! Conditional adversarial denoiser over the three orthogonal planes.
//!
//! One UNet generator per plane turns a (gray, occupancy) image into a
//! denoised gray image. Each plane also gets a Visual Appearance
//! Discriminator (VAD) judging image cleanness, and a single Recognition
//! Feature Discriminator (RFD) judges the per-point linked features of the
//! reconstructed cloud, computed by a frozen recognizer. The discriminator
//! objective is l_D = lambda1 * l_r + lambda2 * l_v; the generator objective
//! adds a masked-L1 reconstruction term weighted by mu, which is what makes
//! training converge at small scale.
//!
//! Image conditioning pin: real and fake VAD inputs share the noisy plane's
//! occupancy and its fill sentinel, so the discriminators compare gray
//! content, not cell layout. Gray values enter the networks divided by
//! GRID_SCALE to keep activations O(1).

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::pointcloud::{PointCloud, CANONICAL_EXTENT};
use crate::projection::{self, PlaneAxis, PlaneImage};
use crate::recognizer::{self, LinkedFeatures, RecognizerNet};
use crate::rng;
use crate::tensor::{
    adam_step, he_uniform, AdamHyper, AdamState, ParamId, ParamSet, Tape, Tensor, Var,
};
use crate::{Error, Result};

/// Gray values are scaled by 1/GRID_SCALE on the way into the networks and
/// back up on the way out (half the canonical box extent).
pub const GRID_SCALE: f64 = CANONICAL_EXTENT / 2.0;

/// Negative-side slope of the discriminators' leaky ReLU.
const LEAKY_SLOPE: f64 = 0.2;

/// Weights of the two discriminator terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.67,
            lambda2: 0.33,
        }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Argument("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// l_D = lambda1 * l_r + lambda2 * l_v.
pub fn discriminator_loss(l_r: f64, l_v: f64, w: &LossWeights) -> f64 {
    w.lambda1 * l_r + w.lambda2 * l_v
}

/// Generator objective: lambda1 * adv_r + lambda2 * adv_v + mu * recon.
pub fn generator_loss(adv_v: f64, adv_r: f64, recon: f64, w: &LossWeights, mu: f64) -> f64 {
    w.lambda1 * adv_r + w.lambda2 * adv_v + mu * recon
}

/// Non-saturating logistic discriminator loss on raw logits:
/// -log sigma(real) - log(1 - sigma(fake)).
pub fn adversarial_disc_loss(real_logit: f64, fake_logit: f64) -> f64 {
    math::softplus(-real_logit) + math::softplus(fake_logit)
}

/// Non-saturating generator loss: -log sigma(fake).
pub fn adversarial_gen_loss(fake_logit: f64) -> f64 {
    math::softplus(-fake_logit)
}

/// Mean absolute gray difference over occupied cells only.
pub fn masked_l1(generated: &[f64], clean: &[f64], occupancy: &[f64]) -> Result<f64> {
    if generated.len() != clean.len() || generated.len() != occupancy.len() {
        return Err(Error::Dimension(alloc::format!(
            "masked_l1 lengths differ: {} vs {} vs {}",
            generated.len(),
            clean.len(),
            occupancy.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..generated.len() {
        sum += math::abs(generated[i] - clean[i]) * occupancy[i];
        count += occupancy[i];
    }
    if count == 0.0 {
        return Ok(0.0);
    }
    Ok(sum / count)
}

fn bind(tape: &mut Tape, params: &ParamSet, id: ParamId, trainable: bool) -> Result<Var> {
    if trainable {
        tape.param(params, id)
    } else {
        tape.constant_tensor(&params.get(id).tensor)
    }
}

/// UNet-shaped denoising generator: conv-relu-pool encoder, nearest-upsample
/// conv-relu decoder with skip concatenations, final 1-channel conv.
#[derive(Debug, Clone)]
pub struct GeneratorNet {
    enc: Vec<(ParamId, ParamId)>,
    dec: Vec<(ParamId, ParamId)>,
    out: (ParamId, ParamId),
    widths: Vec<usize>,
}

impl GeneratorNet {
    /// Registers one generator's weights under `prefix` (e.g. "gen.z").
    /// `widths` is the encoder channel plan after the 2-channel input.
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        widths: &[usize],
        seed: u64,
        salt: u64,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Argument("generator needs at least one stage".into()));
        }
        let conv = |params: &mut ParamSet, name: &str, c_in: usize, c_out: usize, layer: u64| {
            let mut r = rng::stream(seed, rng::domain::INIT, salt, layer);
            let w = params.add(
                &alloc::format!("{prefix}/{name}.weight"),
                he_uniform(vec![c_out, c_in, 5, 5], c_in * 25, &mut r),
            )?;
            let b = params.add(
                &alloc::format!("{prefix}/{name}.bias"),
                Tensor::zeros(vec![c_out]),
            )?;
            Ok::<(ParamId, ParamId), Error>((w, b))
        };
        let mut enc = Vec::new();
        let mut c = 2usize;
        let mut layer = 0u64;
        for (i, &w) in widths.iter().enumerate() {
            enc.push(conv(params, &alloc::format!("enc{i}"), c, w, layer)?);
            c = w;
            layer += 1;
        }
        let mut dec = Vec::new();
        for i in 0..widths.len() - 1 {
            let c_in = widths[i + 1] + widths[i];
            dec.push(conv(params, &alloc::format!("dec{i}"), c_in, widths[i], layer)?);
            layer += 1;
        }
        let out = conv(params, "out", widths[0], 1, layer)?;
        Ok(GeneratorNet {
            enc,
            dec,
            out,
            widths: widths.to_vec(),
        })
    }

    /// Number of 2x pooling stages, hence the input divisibility demand.
    pub fn pool_stages(&self) -> usize {
        self.widths.len() - 1
    }

    /// `[2, h, w]` image to `[1, h, w]` denoised gray image.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        image: Var,
        trainable: bool,
    ) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 2 {
            return Err(Error::Dimension(alloc::format!(
                "generator wants [2, h, w], got {shape:?}"
            )));
        }
        let div = 1usize << self.pool_stages();
        if shape[1] % div != 0 || shape[2] % div != 0 {
            return Err(Error::Dimension(alloc::format!(
                "spatial dims {}x{} not divisible by {div}",
                shape[1], shape[2]
            )));
        }
        let mut x = image;
        let mut skips = Vec::new();
        for (i, &(w, b)) in self.enc.iter().enumerate() {
            let wv = bind(tape, params, w, trainable)?;
            let bv = bind(tape, params, b, trainable)?;
            x = tape.conv2d(x, wv, Some(bv), 1, 2)?;
            x = tape.relu(x)?;
            if i + 1 < self.enc.len() {
                skips.push(x);
                x = tape.max_pool2d(x, 2)?.0;
            }
        }
        for i in (0..self.dec.len()).rev() {
            x = tape.upsample2d(x, 2)?;
            x = tape.concat(&[x, skips[i]], 0)?;
            let (w, b) = self.dec[i];
            let wv = bind(tape, params, w, trainable)?;
            let bv = bind(tape, params, b, trainable)?;
            x = tape.conv2d(x, wv, Some(bv), 1, 2)?;
            x = tape.relu(x)?;
        }
        let (w, b) = self.out;
        let wv = bind(tape, params, w, trainable)?;
        let bv = bind(tape, params, b, trainable)?;
        let delta = tape.conv2d(x, wv, Some(bv), 1, 2)?;
        // Residual head: the net refines the noisy gray channel instead of
        // repainting it, so even an untrained generator is near-identity.
        let flat = tape.reshape(image, vec![2, shape[1] * shape[2]])?;
        let gray = tape.gather_rows(flat, &[0])?;
        let gray = tape.reshape(gray, vec![1, shape[1], shape[2]])?;
        tape.add(delta, gray)
    }
}

/// Values-only generator pass.
pub fn generator_forward(gen: &GeneratorNet, params: &ParamSet, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let img = tape.constant_tensor(image)?;
    let out = gen.forward_on_tape(&mut tape, params, img, false)?;
    Tensor::new(tape.shape(out).to_vec(), tape.values(out).to_vec())
}

/// DCGAN-style plane discriminator: strided 5x5 convs with leaky ReLU,
/// then a linear layer to one logit. The linear width is fixed by the
/// input resolution at registration time.
#[derive(Debug, Clone)]
pub struct VadNet {
    convs: Vec<(ParamId, ParamId)>,
    lin: (ParamId, ParamId),
    input_hw: (usize, usize),
}

impl VadNet {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        widths: &[usize],
        input_hw: (usize, usize),
        seed: u64,
        salt: u64,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Argument("vad needs at least one conv".into()));
        }
        let mut convs = Vec::new();
        let (mut h, mut w) = input_hw;
        let mut c = 2usize;
        for (i, &wd) in widths.iter().enumerate() {
            let mut r = rng::stream(seed, rng::domain::INIT, salt, i as u64);
            let wid = params.add(
                &alloc::format!("{prefix}/conv{i}.weight"),
                he_uniform(vec![wd, c, 5, 5], c * 25, &mut r),
            )?;
            let bid = params.add(
                &alloc::format!("{prefix}/conv{i}.bias"),
                Tensor::zeros(vec![wd]),
            )?;
            convs.push((wid, bid));
            c = wd;
            h = crate::tensor::kernels::conv_out_dim(h, 5, 2, 2).ok_or_else(|| {
                Error::Dimension(alloc::format!("vad input {input_hw:?} too small"))
            })?;
            w = crate::tensor::kernels::conv_out_dim(w, 5, 2, 2).ok_or_else(|| {
                Error::Dimension(alloc::format!("vad input {input_hw:?} too small"))
            })?;
        }
        let flat = c * h * w;
        // Zero-initialized head: a fresh discriminator emits exactly logit 0.
        let lw = params.add(
            &alloc::format!("{prefix}/head.weight"),
            Tensor::zeros(vec![1, flat]),
        )?;
        let lb = params.add(&alloc::format!("{prefix}/head.bias"), Tensor::zeros(vec![1]))?;
        Ok(VadNet {
            convs,
            lin: (lw, lb),
            input_hw,
        })
    }

    /// `[2, h, w]` image to a single raw logit `[1]`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        image: Var,
        trainable: bool,
    ) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 2 || (shape[1], shape[2]) != self.input_hw {
            return Err(Error::Dimension(alloc::format!(
                "vad built for [2, {}, {}], got {shape:?}",
                self.input_hw.0, self.input_hw.1
            )));
        }
        let mut x = image;
        for &(w, b) in &self.convs {
            let wv = bind(tape, params, w, trainable)?;
            let bv = bind(tape, params, b, trainable)?;
            x = tape.conv2d(x, wv, Some(bv), 2, 2)?;
            x = tape.leaky_relu(x, LEAKY_SLOPE)?;
        }
        let flat = tape.shape(x).iter().product();
        let x = tape.reshape(x, vec![1, flat])?;
        let (w, b) = self.lin;
        let wv = bind(tape, params, w, trainable)?;
        let bv = bind(tape, params, b, trainable)?;
        let x = tape.linear(x, wv, bv)?;
        tape.reshape(x, vec![1])
    }
}

/// Visual-appearance losses for one plane, values only.
pub fn vad_loss(
    vad: &VadNet,
    params: &ParamSet,
    real_image: &Tensor,
    fake_image: &Tensor,
) -> Result<(f64, f64)> {
    if real_image.shape() != fake_image.shape() {
        return Err(Error::Dimension(alloc::format!(
            "vad_loss image shapes differ: {:?} vs {:?}",
            real_image.shape(),
            fake_image.shape()
        )));
    }
    let mut tape = Tape::new();
    let real = tape.constant_tensor(real_image)?;
    let fake = tape.constant_tensor(fake_image)?;
    let real_logit = vad.forward_on_tape(&mut tape, params, real, false)?;
    let fake_logit = vad.forward_on_tape(&mut tape, params, fake, false)?;
    let r = tape.values(real_logit)[0];
    let f = tape.values(fake_logit)[0];
    Ok((adversarial_disc_loss(r, f), adversarial_gen_loss(f)))
}

/// MLP discriminator over per-point linked features. Row logits are
/// averaged into the single output logit, so any point count works.
#[derive(Debug, Clone)]
pub struct RfdNet {
    layers: Vec<(ParamId, ParamId)>,
    in_width: usize,
}

impl RfdNet {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        in_width: usize,
        hidden: &[usize],
        seed: u64,
        salt: u64,
    ) -> Result<Self> {
        if in_width == 0 {
            return Err(Error::Argument("rfd feature width must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut d = in_width;
        for (i, &h) in hidden.iter().enumerate() {
            let mut r = rng::stream(seed, rng::domain::INIT, salt, i as u64);
            let w = params.add(
                &alloc::format!("{prefix}/l{i}.weight"),
                he_uniform(vec![h, d], d, &mut r),
            )?;
            let b = params.add(&alloc::format!("{prefix}/l{i}.bias"), Tensor::zeros(vec![h]))?;
            layers.push((w, b));
            d = h;
        }
        // Zero-initialized head, as for the VAD.
        let w = params.add(
            &alloc::format!("{prefix}/head.weight"),
            Tensor::zeros(vec![1, d]),
        )?;
        let b = params.add(&alloc::format!("{prefix}/head.bias"), Tensor::zeros(vec![1]))?;
        layers.push((w, b));
        Ok(RfdNet { layers, in_width })
    }

    /// `[n, F]` features to a single raw logit `[1]`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        features: Var,
        trainable: bool,
    ) -> Result<Var> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.in_width {
            return Err(Error::Dimension(alloc::format!(
                "rfd wants [n, {}], got {shape:?}",
                self.in_width
            )));
        }
        let mut x = features;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = bind(tape, params, w, trainable)?;
            let bv = bind(tape, params, b, trainable)?;
            x = tape.linear(x, wv, bv)?;
            if i < last {
                x = tape.leaky_relu(x, LEAKY_SLOPE)?;
            }
        }
        tape.mean(x)
    }
}

fn features_var(tape: &mut Tape, feats: &LinkedFeatures) -> Result<Var> {
    tape.constant(vec![feats.n, feats.f], feats.per_point.clone())
}

/// Recognition-feature losses, values only.
pub fn rfd_loss(
    rfd: &RfdNet,
    params: &ParamSet,
    clean_features: &LinkedFeatures,
    denoised_features: &LinkedFeatures,
) -> Result<(f64, f64)> {
    if clean_features.f != denoised_features.f {
        return Err(Error::Dimension(alloc::format!(
            "feature widths differ: {} vs {}",
            clean_features.f, denoised_features.f
        )));
    }
    let mut tape = Tape::new();
    let clean = features_var(&mut tape, clean_features)?;
    let fake = features_var(&mut tape, denoised_features)?;
    let real_logit = rfd.forward_on_tape(&mut tape, params, clean, false)?;
    let fake_logit = rfd.forward_on_tape(&mut tape, params, fake, false)?;
    let r = tape.values(real_logit)[0];
    let f = tape.values(fake_logit)[0];
    Ok((adversarial_disc_loss(r, f), adversarial_gen_loss(f)))
}

/// Everything the denoiser pipeline owns: three generators plus, for
/// training continuation and checkpointing, the discriminator stack.
#[derive(Debug, Clone)]
pub struct DenoiserWeights {
    pub resolution: (usize, usize),
    gen_params: ParamSet,
    gens: [GeneratorNet; 3],
    disc_params: ParamSet,
    vads: [VadNet; 3],
    rfd: RfdNet,
}

impl DenoiserWeights {
    /// Fresh nets per the config; `rfd_in_width` is the recognizer's
    /// per-point linked-feature width.
    pub fn new(cfg: &DenoiserTrainConfig, rfd_in_width: usize) -> Result<Self> {
        cfg.validate()?;
        let mut gen_params = ParamSet::new();
        let mut disc_params = ParamSet::new();
        let mut gens = Vec::new();
        let mut vads = Vec::new();
        for (i, axis) in PlaneAxis::ALL.iter().enumerate() {
            gens.push(GeneratorNet::register(
                &mut gen_params,
                &alloc::format!("gen.{}", axis.name()),
                &cfg.gen_widths,
                cfg.seed,
                i as u64,
            )?);
            vads.push(VadNet::register(
                &mut disc_params,
                &alloc::format!("vad.{}", axis.name()),
                &cfg.vad_widths,
                cfg.resolution,
                cfg.seed,
                3 + i as u64,
            )?);
        }
        let rfd = RfdNet::register(
            &mut disc_params,
            "rfd",
            rfd_in_width,
            &cfg.rfd_hidden,
            cfg.seed,
            6,
        )?;
        let gens: [GeneratorNet; 3] = gens.try_into().expect("three planes");
        let vads: [VadNet; 3] = vads.try_into().expect("three planes");
        Ok(DenoiserWeights {
            resolution: cfg.resolution,
            gen_params,
            gens,
            disc_params,
            vads,
            rfd,
        })
    }

    pub fn generator_params(&self) -> &ParamSet {
        &self.gen_params
    }

    pub fn generator_params_mut(&mut self) -> &mut ParamSet {
        &mut self.gen_params
    }

    pub fn discriminator_params(&self) -> &ParamSet {
        &self.disc_params
    }

    pub fn discriminator_params_mut(&mut self) -> &mut ParamSet {
        &mut self.disc_params
    }

    /// Generator for one plane (planes in [`PlaneAxis::ALL`] order).
    pub fn generator(&self, axis: PlaneAxis) -> &GeneratorNet {
        &self.gens[PlaneAxis::ALL.iter().position(|&a| a == axis).unwrap()]
    }
}

/// Settings for one denoiser training run.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weights: LossWeights,
    /// Reconstruction weight on the masked L1 term.
    pub mu: f64,
    pub resolution: (usize, usize),
    pub seed: u64,
    /// Pairs taken from the end of the dataset for the held-out
    /// reconstruction metric; never trained on.
    pub holdout: usize,
    /// Subsample the reconstructed cloud to this many points before the
    /// recognition-feature path (None = full cloud). Must exceed the
    /// recognizer's k.
    pub rfd_points: Option<usize>,
    pub gen_widths: Vec<usize>,
    pub vad_widths: Vec<usize>,
    pub rfd_hidden: Vec<usize>,
    /// Discriminator passes per generator pass.
    pub disc_iters: usize,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            epochs: 4,
            batch: 4,
            lr: 1e-3,
            weights: LossWeights::default(),
            mu: 10.0,
            resolution: (64, 64),
            seed: 1,
            holdout: 2,
            rfd_points: Some(512),
            gen_widths: vec![16, 32, 64],
            vad_widths: vec![16, 32, 64],
            rfd_hidden: vec![256, 64],
            disc_iters: 1,
        }
    }
}

impl DenoiserTrainConfig {
    fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.mu < 0.0 {
            return Err(Error::Argument("mu must be non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        if self.disc_iters == 0 {
            return Err(Error::Argument("disc_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch training log entry. Losses are means over training pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserEpochStats {
    pub epoch: usize,
    pub disc_loss: f64,
    pub gen_loss: f64,
    /// Masked-L1 term on training pairs, in scaled gray units.
    pub recon: f64,
    /// Masked-L1 on the held-out pairs, if any were reserved.
    pub holdout_recon: Option<f64>,
}

/// Training log: the held-out reconstruction before the first update plus
/// one entry per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserLog {
    pub initial_holdout_recon: Option<f64>,
    pub epochs: Vec<DenoiserEpochStats>,
}

/// One plane of a prepared training pair, everything in scaled gray units.
struct PreparedPlane {
    /// [2, h, w] network input: scaled noisy gray + occupancy.
    input: Tensor,
    /// Clean gray rasterized through the noisy cell assignment; fill at
    /// empty cells.
    clean_grid: Vec<f64>,
    occ: Vec<f64>,
    /// fill * (1 - occ), added to masked generator output.
    fill_at_empty: Vec<f64>,
    /// Flat cell index per source point, for on-tape unprojection.
    cells: Vec<u32>,
}

struct PreparedPair {
    /// In [`PlaneAxis::ALL`] order.
    planes: [PreparedPlane; 3],
    clean_features: LinkedFeatures,
    n: usize,
}

fn scaled_input_tensor(plane: &PlaneImage) -> Tensor {
    let mut t = projection::plane_to_tensor(plane);
    let hw = plane.height * plane.width;
    for v in &mut t.values_mut()[..hw] {
        *v /= GRID_SCALE;
    }
    t
}

fn prepare_plane(plane: &PlaneImage, clean: &PointCloud) -> Result<PreparedPlane> {
    let gray = plane.axis.gray_index();
    let clean_vals: Vec<f64> = clean.points.iter().map(|p| p[gray]).collect();
    let clean_grid: Vec<f64> = projection::aggregate_on_plane(plane, &clean_vals)?
        .iter()
        .map(|v| v / GRID_SCALE)
        .collect();
    let occ: Vec<f64> = plane
        .occupancy
        .iter()
        .map(|&o| if o { 1.0 } else { 0.0 })
        .collect();
    let fill_scaled = plane.fill / GRID_SCALE;
    let fill_at_empty: Vec<f64> = occ.iter().map(|&o| fill_scaled * (1.0 - o)).collect();
    Ok(PreparedPlane {
        input: scaled_input_tensor(plane),
        clean_grid,
        occ,
        fill_at_empty,
        cells: plane.point_cells(clean.len()),
    })
}

fn prepare_pair(
    noisy: &PointCloud,
    clean: &PointCloud,
    resolution: (usize, usize),
    rec: &RecognizerNet,
) -> Result<PreparedPair> {
    if noisy.len() != clean.len() {
        return Err(Error::Dimension(alloc::format!(
            "pair point counts differ: {} vs {}",
            noisy.len(),
            clean.len()
        )));
    }
    let top = projection::project(noisy, resolution)?;
    let planes = [
        prepare_plane(top.plane(PlaneAxis::Z), clean)?,
        prepare_plane(top.plane(PlaneAxis::X), clean)?,
        prepare_plane(top.plane(PlaneAxis::Y), clean)?,
    ];
    let clean_features = recognizer::extract_linked_features(rec, clean)?;
    Ok(PreparedPair {
        planes,
        clean_features,
        n: clean.len(),
    })
}

/// Values-only generator outputs for all planes, scaled gray units.
fn generator_grids(weights: &DenoiserWeights, pair: &PreparedPair) -> Result<[Vec<f64>; 3]> {
    let mut grids: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..3 {
        let out = generator_forward(&weights.gens[i], &weights.gen_params, &pair.planes[i].input)?;
        grids[i] = out.values().to_vec();
    }
    Ok(grids)
}

/// Rebuild the cloud from per-plane gray grids (scaled units in, canonical
/// out). Mirrors the on-tape path in the generator step.
fn cloud_from_grids(pair: &PreparedPair, grids: &[Vec<f64>; 3]) -> Result<PointCloud> {
    let mut per_coord: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, axis) in PlaneAxis::ALL.iter().enumerate() {
        let plane = &pair.planes[i];
        let vals: Vec<f64> = plane
            .cells
            .iter()
            .map(|&c| grids[i][c as usize] * GRID_SCALE)
            .collect();
        per_coord[axis.gray_index()] = vals;
    }
    projection::combine(&per_coord[0], &per_coord[1], &per_coord[2])
}

/// Masked L1 on the tape; `occupied` is the occupied-cell count.
fn masked_l1_on_tape(
    tape: &mut Tape,
    generated: Var,
    clean: Var,
    occ: Var,
    occupied: usize,
) -> Result<Var> {
    let diff = tape.sub(generated, clean)?;
    let a = tape.abs(diff)?;
    let masked = tape.mul(a, occ)?;
    let s = tape.sum(masked)?;
    tape.scale(s, 1.0 / occupied.max(1) as f64)
}

fn softplus_neg(tape: &mut Tape, logit: Var) -> Result<Var> {
    let neg = tape.scale(logit, -1.0)?;
    tape.softplus(neg)
}

/// Discriminator-side loss l_D for one pair, built on `tape` with the
/// discriminators trainable and all images/features as constants.
fn disc_step_loss(
    tape: &mut Tape,
    weights: &DenoiserWeights,
    pair: &PreparedPair,
    fake_grids: &[Vec<f64>; 3],
    denoised_features: &LinkedFeatures,
    w: &LossWeights,
) -> Result<Var> {
    let (h, wd) = weights.resolution;
    let hw = h * wd;
    let mut l_v_sum: Option<Var> = None;
    for i in 0..3 {
        let plane = &pair.planes[i];
        let mut real_vals = Vec::with_capacity(2 * hw);
        real_vals.extend_from_slice(&plane.clean_grid);
        real_vals.extend_from_slice(&plane.occ);
        let mut fake_vals = Vec::with_capacity(2 * hw);
        for c in 0..hw {
            fake_vals.push(fake_grids[i][c] * plane.occ[c] + plane.fill_at_empty[c]);
        }
        fake_vals.extend_from_slice(&plane.occ);
        let real = tape.constant(vec![2, h, wd], real_vals)?;
        let fake = tape.constant(vec![2, h, wd], fake_vals)?;
        let rl = weights.vads[i].forward_on_tape(tape, &weights.disc_params, real, true)?;
        let fl = weights.vads[i].forward_on_tape(tape, &weights.disc_params, fake, true)?;
        let a = softplus_neg(tape, rl)?;
        let b = tape.softplus(fl)?;
        let plane_loss = tape.add(a, b)?;
        l_v_sum = Some(match l_v_sum {
            Some(acc) => tape.add(acc, plane_loss)?,
            None => plane_loss,
        });
    }
    let l_v = tape.scale(l_v_sum.expect("three planes"), 1.0 / 3.0)?;

    let clean = features_var(tape, &pair.clean_features)?;
    let fake_feats = features_var(tape, denoised_features)?;
    let rl = weights.rfd.forward_on_tape(tape, &weights.disc_params, clean, true)?;
    let fl = weights.rfd.forward_on_tape(tape, &weights.disc_params, fake_feats, true)?;
    let a = softplus_neg(tape, rl)?;
    let b = tape.softplus(fl)?;
    let l_r = tape.add(a, b)?;

    let l_r = tape.scale(l_r, w.lambda1)?;
    let l_v = tape.scale(l_v, w.lambda2)?;
    tape.add(l_r, l_v)
}

/// Generator-side loss for one pair, built on `tape` with the generators
/// trainable, discriminators and recognizer as constants. Returns the
/// total plus the recon term's value.
fn gen_step_loss(
    tape: &mut Tape,
    weights: &DenoiserWeights,
    rec: &RecognizerNet,
    pair: &PreparedPair,
    rfd_subset: Option<&[u32]>,
    w: &LossWeights,
    mu: f64,
) -> Result<(Var, f64)> {
    let (h, wd) = weights.resolution;
    let hw = h * wd;
    let mut adv_v_sum: Option<Var> = None;
    let mut recon_sum: Option<Var> = None;
    // Per-coordinate unprojected columns, indexed by gray coordinate.
    let mut coord_cols: [Option<Var>; 3] = [None, None, None];
    for (i, axis) in PlaneAxis::ALL.iter().enumerate() {
        let plane = &pair.planes[i];
        let img = tape.constant_tensor(&plane.input)?;
        let out = weights.gens[i].forward_on_tape(tape, &weights.gen_params, img, true)?;

        let occ = tape.constant(vec![1, h, wd], plane.occ.clone())?;
        let fill = tape.constant(vec![1, h, wd], plane.fill_at_empty.clone())?;
        let masked = tape.mul(out, occ)?;
        let fake_gray = tape.add(masked, fill)?;
        let fake = tape.concat(&[fake_gray, occ], 0)?;
        let fl = weights.vads[i].forward_on_tape(tape, &weights.disc_params, fake, false)?;
        let adv = softplus_neg(tape, fl)?;
        adv_v_sum = Some(match adv_v_sum {
            Some(acc) => tape.add(acc, adv)?,
            None => adv,
        });

        let clean = tape.constant(vec![1, h, wd], plane.clean_grid.clone())?;
        let occupied = plane.occ.iter().filter(|&&o| o == 1.0).count();
        let recon = masked_l1_on_tape(tape, out, clean, occ, occupied)?;
        recon_sum = Some(match recon_sum {
            Some(acc) => tape.add(acc, recon)?,
            None => recon,
        });

        let flat = tape.reshape(out, vec![hw, 1])?;
        let col = tape.gather_rows(flat, &plane.cells)?;
        coord_cols[axis.gray_index()] = Some(tape.scale(col, GRID_SCALE)?);
    }
    let adv_v = tape.scale(adv_v_sum.expect("three planes"), 1.0 / 3.0)?;
    let recon = tape.scale(recon_sum.expect("three planes"), 1.0 / 3.0)?;
    let recon_value = tape.values(recon)[0];

    let cols: Vec<Var> = coord_cols.into_iter().map(|c| c.expect("set")).collect();
    let mut points = tape.concat(&cols, 1)?;
    if let Some(idx) = rfd_subset {
        points = tape.gather_rows(points, idx)?;
    }
    let rec_vars = recognizer::forward_on_tape(rec, tape, points, false, None)?;
    let fl = weights
        .rfd
        .forward_on_tape(tape, &weights.disc_params, rec_vars.per_point, false)?;
    let adv_r = softplus_neg(tape, fl)?;

    let adv_r = tape.scale(adv_r, w.lambda1)?;
    let adv_v = tape.scale(adv_v, w.lambda2)?;
    let recon_term = tape.scale(recon, mu)?;
    let adv = tape.add(adv_r, adv_v)?;
    let total = tape.add(adv, recon_term)?;
    Ok((total, recon_value))
}

/// Mean masked-L1 over pairs with the current generators, values only.
fn holdout_recon(weights: &DenoiserWeights, pairs: &[PreparedPair]) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for pair in pairs {
        let grids = generator_grids(weights, pair)?;
        let mut per_plane = 0.0;
        for i in 0..3 {
            let plane = &pair.planes[i];
            per_plane += masked_l1(&grids[i], &plane.clean_grid, &plane.occ)?;
        }
        total += per_plane / 3.0;
    }
    Ok(Some(total / pairs.len() as f64))
}

/// Denoised features of the current generators for one pair, values only.
fn denoised_features(
    weights: &DenoiserWeights,
    rec: &RecognizerNet,
    pair: &PreparedPair,
    subset: Option<&[u32]>,
) -> Result<LinkedFeatures> {
    let grids = generator_grids(weights, pair)?;
    let mut cloud = cloud_from_grids(pair, &grids)?;
    if let Some(idx) = subset {
        cloud = PointCloud::new(idx.iter().map(|&i| cloud.points[i as usize]).collect())?;
    }
    recognizer::extract_linked_features(rec, &cloud)
}

fn rfd_subset_indices(
    cfg: &DenoiserTrainConfig,
    n: usize,
    epoch: usize,
    pair_idx: usize,
) -> Option<Vec<u32>> {
    let m = cfg.rfd_points?;
    if m >= n {
        return None;
    }
    let mut r = rng::stream(
        cfg.seed,
        rng::domain::SUBSAMPLE,
        epoch as u64,
        pair_idx as u64,
    );
    Some(
        rng::subsample_indices(&mut r, n, m)
            .into_iter()
            .map(|i| i as u32)
            .collect(),
    )
}

/// Alternating adversarial training over (noisy, clean) pairs.
///
/// Per batch: `disc_iters` discriminator passes on l_D, then one generator
/// pass on the full generator objective. Updates are serialized in plane
/// order Z, X, Y within each parameter set; the whole run is deterministic
/// under a fixed config.
///
/// With a nonzero holdout the returned weights are the checkpoint (any
/// epoch, or the initialization) with the lowest holdout reconstruction:
/// adversarial training does not descend monotonically and late epochs can
/// regress. The log still records every epoch as trained.
pub fn train_denoiser(
    pairs: &[(PointCloud, PointCloud)],
    rec: &RecognizerNet,
    cfg: &DenoiserTrainConfig,
) -> Result<(DenoiserWeights, DenoiserLog)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if cfg.holdout >= pairs.len() {
        return Err(Error::Argument(alloc::format!(
            "holdout {} leaves no training pairs from {}",
            cfg.holdout,
            pairs.len()
        )));
    }
    if let Some(m) = cfg.rfd_points {
        if m <= rec.config.k {
            return Err(Error::Argument(alloc::format!(
                "rfd_points {m} must exceed recognizer k {}",
                rec.config.k
            )));
        }
    }
    for (noisy, clean) in pairs {
        if clean.len() <= rec.config.k {
            return Err(Error::Argument(alloc::format!(
                "pair has {} points, recognizer k is {}",
                clean.len(),
                rec.config.k
            )));
        }
        if noisy.len() != clean.len() {
            return Err(Error::Dimension(
                "noisy/clean pair point counts differ".into(),
            ));
        }
    }

    let mut weights = DenoiserWeights::new(cfg, rec.config.per_point_width())?;
    let split = pairs.len() - cfg.holdout;
    let mut train: Vec<PreparedPair> = Vec::with_capacity(split);
    for (noisy, clean) in &pairs[..split] {
        train.push(prepare_pair(noisy, clean, cfg.resolution, rec)?);
    }
    let mut held: Vec<PreparedPair> = Vec::with_capacity(cfg.holdout);
    for (noisy, clean) in &pairs[split..] {
        held.push(prepare_pair(noisy, clean, cfg.resolution, rec)?);
    }

    let mut log = DenoiserLog {
        initial_holdout_recon: holdout_recon(&weights, &held)?,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut best: Option<(f64, DenoiserWeights)> = log
        .initial_holdout_recon
        .map(|r| (r, weights.clone()));
    let mut disc_adam = AdamState::new(&weights.disc_params);
    let mut gen_adam = AdamState::new(&weights.gen_params);
    let hp = AdamHyper {
        lr: cfg.lr,
        ..Default::default()
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = rng::stream(cfg.seed, rng::domain::SHUFFLE, epoch as u64, 0);
        rng::shuffle(&mut shuffle_rng, &mut order);

        let mut disc_total = 0.0;
        let mut gen_total = 0.0;
        let mut recon_total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let inv = 1.0 / chunk.len() as f64;
            for _ in 0..cfg.disc_iters {
                weights.disc_params.zero_grads();
                let mut chunk_disc = 0.0;
                for &pi in chunk {
                    let pair = &train[pi];
                    let subset = rfd_subset_indices(cfg, pair.n, epoch, pi);
                    let fake_grids = generator_grids(&weights, pair)?;
                    let feats = denoised_features(&weights, rec, pair, subset.as_deref())?;
                    let mut tape = Tape::new();
                    let loss = disc_step_loss(
                        &mut tape,
                        &weights,
                        pair,
                        &fake_grids,
                        &feats,
                        &cfg.weights,
                    )?;
                    let scaled = tape.scale(loss, inv)?;
                    tape.backward(scaled, &mut weights.disc_params)?;
                    chunk_disc += tape.values(loss)[0];
                }
                adam_step(&mut weights.disc_params, &mut disc_adam, &hp)?;
                disc_total += chunk_disc;
            }

            weights.gen_params.zero_grads();
            for &pi in chunk {
                let pair = &train[pi];
                let subset = rfd_subset_indices(cfg, pair.n, epoch, pi);
                let mut tape = Tape::new();
                let (loss, recon) = gen_step_loss(
                    &mut tape,
                    &weights,
                    rec,
                    pair,
                    subset.as_deref(),
                    &cfg.weights,
                    cfg.mu,
                )?;
                let scaled = tape.scale(loss, inv)?;
                tape.backward(scaled, &mut weights.gen_params)?;
                gen_total += tape.values(loss)[0];
                recon_total += recon;
            }
            adam_step(&mut weights.gen_params, &mut gen_adam, &hp)?;
        }

        let denom = train.len() as f64;
        let held_recon = holdout_recon(&weights, &held)?;
        if let Some(r) = held_recon {
            if best.as_ref().is_none_or(|(b, _)| r < *b) {
                best = Some((r, weights.clone()));
            }
        }
        log.epochs.push(DenoiserEpochStats {
            epoch,
            disc_loss: disc_total / (denom * cfg.disc_iters as f64),
            gen_loss: gen_total / denom,
            recon: recon_total / denom,
            holdout_recon: held_recon,
        });
    }
    if let Some((_, w)) = best {
        weights = w;
    }
    Ok((weights, log))
}

/// Full denoising pass: project, run each plane's generator, unproject,
/// recombine. Point count and labels carry over; points stay index-aligned
/// with the input.
pub fn denoise(pc: &PointCloud, weights: &DenoiserWeights) -> Result<PointCloud> {
    let top = projection::project(pc, weights.resolution)?;
    let mut per_coord: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, axis) in PlaneAxis::ALL.iter().enumerate() {
        let plane = top.plane(*axis);
        let input = scaled_input_tensor(plane);
        let out = generator_forward(&weights.gens[i], &weights.gen_params, &input)?;
        let grid: Vec<f64> = out.values().iter().map(|v| v * GRID_SCALE).collect();
        per_coord[axis.gray_index()] = projection::unproject(plane, &grid, pc.len())?;
    }
    let mut out = projection::combine(&per_coord[0], &per_coord[1], &per_coord[2])?;
    out.identity = pc.identity;
    out.expression = pc.expression;
    Ok(out)
}
