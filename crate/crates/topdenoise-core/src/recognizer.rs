//! Linked dynamic graph CNN for identity recognition.
//!
//! Each edge-convolution layer builds a fresh KNN graph in its own input
//! feature space (the "dynamic" part), forms edge features (f_i, f_j - f_i),
//! pushes them through a shared linear+ReLU map, and max-reduces over the k
//! neighbors. Layer outputs are concatenated with the raw coordinates (the
//! "linked" part), a shared per-point MLP lifts the concatenation, and a
//! global max over points yields a permutation-invariant feature vector for
//! the classifier head and for the recognition-feature discriminator.
//!
//! Duplication caveat: the global max is idempotent under duplicated
//! per-point feature rows, but duplicating input points does not leave the
//! forward pass unchanged — duplicates displace distinct neighbors in the
//! fixed-k graphs, which changes edge sets. Tests assert the former.

use alloc::vec;
use alloc::vec::Vec;

use crate::pointcloud::{PointCloud, CANONICAL_EXTENT};
use crate::rng;
use crate::tensor::{he_uniform, ParamId, ParamSet, Tape, Tensor, Var};
use crate::{Error, Result};

/// K-nearest-neighbor graph over one feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    /// Row-major N x k neighbor indices; no self loops, all distinct.
    pub neighbors: Vec<u32>,
}

/// Exact Euclidean KNN, self excluded, distance ties broken by lower index.
///
/// Distances accumulate (a-b)^2 in feature-index order; the brute-force
/// oracle in the tests uses the same stated formula, so tie behavior is
/// well defined.
pub fn knn(features: &[f64], n: usize, d: usize, k: usize) -> Result<KnnGraph> {
    if features.len() != n * d {
        return Err(Error::Dimension(alloc::format!(
            "feature array has {} values, expected {n} x {d}",
            features.len()
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::Argument(alloc::format!(
            "k must satisfy 0 < k < n, got k={k}, n={n}"
        )));
    }
    let mut neighbors = vec![0u32; n * k];
    let mut scratch: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        scratch.clear();
        let fi = &features[i * d..(i + 1) * d];
        for j in 0..n {
            if j == i {
                continue;
            }
            let fj = &features[j * d..(j + 1) * d];
            let mut dist = 0.0;
            for (a, b) in fi.iter().zip(fj) {
                let diff = a - b;
                dist += diff * diff;
            }
            scratch.push((dist, j as u32));
        }
        scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (slot, &(_, j)) in neighbors[i * k..(i + 1) * k].iter_mut().zip(&scratch[..k]) {
            *slot = j;
        }
    }
    Ok(KnnGraph {
        k,
        neighbors,
    })
}

/// Per-point concatenated features plus the global descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkedFeatures {
    /// N x F row-major, F = 3 + sum of layer widths.
    pub per_point: Vec<f64>,
    pub n: usize,
    pub f: usize,
    /// Permutation-invariant descriptor of width `linked_width`.
    pub global: Vec<f64>,
}

/// Shape of the recognizer.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognizerConfig {
    pub k: usize,
    /// Edge-conv output widths, non-decreasing.
    pub layer_widths: Vec<usize>,
    /// Width of the global descriptor after the post-link MLP.
    pub linked_width: usize,
    pub classes: usize,
    /// Dropout probability on the global vector during training.
    pub dropout: f64,
}

impl RecognizerConfig {
    pub fn new(classes: usize) -> Self {
        RecognizerConfig {
            k: 16,
            layer_widths: vec![64, 64, 128, 256],
            linked_width: 256,
            classes,
            dropout: 0.25,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Argument("need at least 2 classes".into()));
        }
        if self.k == 0 {
            return Err(Error::Argument("k must be positive".into()));
        }
        if self.layer_widths.is_empty() {
            return Err(Error::Argument("need at least one edge-conv layer".into()));
        }
        if self.layer_widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Argument(
                "layer widths must be non-decreasing".into(),
            ));
        }
        if self.linked_width == 0 {
            return Err(Error::Argument("linked width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Width of the per-point concatenation.
    pub fn per_point_width(&self) -> usize {
        3 + self.layer_widths.iter().sum::<usize>()
    }
}

/// The recognizer's weights plus the handles to address them.
#[derive(Debug, Clone)]
pub struct RecognizerNet {
    pub config: RecognizerConfig,
    params: ParamSet,
    edge_layers: Vec<(ParamId, ParamId)>,
    link: (ParamId, ParamId),
    classifier: (ParamId, ParamId),
}

impl RecognizerNet {
    pub fn new(config: RecognizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut edge_layers = Vec::new();
        let mut d = 3usize;
        for (l, &w) in config.layer_widths.iter().enumerate() {
            let mut r = rng::stream(seed, rng::domain::INIT, l as u64, 0);
            let wid = params.add(
                &alloc::format!("edge{l}.weight"),
                he_uniform(vec![w, 2 * d], 2 * d, &mut r),
            )?;
            let bid = params.add(&alloc::format!("edge{l}.bias"), Tensor::zeros(vec![w]))?;
            edge_layers.push((wid, bid));
            d = w;
        }
        let f = config.per_point_width();
        let mut r = rng::stream(seed, rng::domain::INIT, 100, 0);
        let link_w = params.add(
            "link.weight",
            he_uniform(vec![config.linked_width, f], f, &mut r),
        )?;
        let link_b = params.add("link.bias", Tensor::zeros(vec![config.linked_width]))?;
        let mut r = rng::stream(seed, rng::domain::INIT, 101, 0);
        let cls_w = params.add(
            "classifier.weight",
            he_uniform(
                vec![config.classes, config.linked_width],
                config.linked_width,
                &mut r,
            ),
        )?;
        let cls_b = params.add("classifier.bias", Tensor::zeros(vec![config.classes]))?;
        Ok(RecognizerNet {
            config,
            params,
            edge_layers,
            link: (link_w, link_b),
            classifier: (cls_w, cls_b),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Tape handles produced by [`forward_on_tape`].
pub struct RecognizerVars {
    pub logits: Var,
    pub global: Var,
    pub per_point: Var,
}

fn bind(tape: &mut Tape, params: &ParamSet, id: ParamId, trainable: bool) -> Result<Var> {
    if trainable {
        tape.param(params, id)
    } else {
        tape.constant_tensor(&params.get(id).tensor)
    }
}

/// One edge-convolution layer on the tape: gather neighbor rows, build
/// (f_i, f_j - f_i), shared linear + ReLU, max over the k neighbors.
fn edge_conv_on_tape(
    tape: &mut Tape,
    feats: Var,
    graph: &KnnGraph,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let n = tape.shape(feats)[0];
    let k = graph.k;
    let mut self_idx = Vec::with_capacity(n * k);
    for i in 0..n {
        for _ in 0..k {
            self_idx.push(i as u32);
        }
    }
    let f_i = tape.gather_rows(feats, &self_idx)?;
    let f_j = tape.gather_rows(feats, &graph.neighbors)?;
    let diff = tape.sub(f_j, f_i)?;
    let edge = tape.concat(&[f_i, diff], 1)?;
    let lifted = tape.linear(edge, weight, bias)?;
    let lifted = tape.relu(lifted)?;
    tape.group_row_max(lifted, k)
}

/// Full differentiable forward pass.
///
/// `points` is an `[N, 3]` var already on the tape. When `trainable` is
/// false the weights enter as constants (gradients flow through them into
/// `points` but not into the net — the frozen-recognizer mode used by the
/// feature discriminator). `dropout_mask`, when given, multiplies the
/// global vector (inverted-scaling convention, built by the caller).
pub fn forward_on_tape(
    net: &RecognizerNet,
    tape: &mut Tape,
    points: Var,
    trainable: bool,
    dropout_mask: Option<&[f64]>,
) -> Result<RecognizerVars> {
    let shape = tape.shape(points).to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::Dimension(alloc::format!(
            "recognizer wants [n, 3] points, got {shape:?}"
        )));
    }
    let n = shape[0];
    if n <= net.config.k {
        return Err(Error::Argument(alloc::format!(
            "need more points than k: n={n}, k={}",
            net.config.k
        )));
    }

    // Clouds arrive at canonical extent; coordinates are scaled to ~[-1, 1]
    // so He-initialized layers see unit-scale inputs. Isotropic, so the
    // dynamic graphs are unchanged.
    let points = tape.scale(points, 2.0 / CANONICAL_EXTENT)?;

    let mut feats = points;
    let mut d = 3usize;
    let mut layer_outputs = Vec::with_capacity(net.edge_layers.len());
    for (l, &(wid, bid)) in net.edge_layers.iter().enumerate() {
        // Dynamic graph: rebuilt from this layer's input features.
        let graph = knn(tape.values(feats), n, d, net.config.k)?;
        let w = bind(tape, &net.params, wid, trainable)?;
        let b = bind(tape, &net.params, bid, trainable)?;
        let out = edge_conv_on_tape(tape, feats, &graph, w, b)?;
        d = net.config.layer_widths[l];
        layer_outputs.push(out);
        feats = out;
    }

    let mut linked_inputs = vec![points];
    linked_inputs.extend(layer_outputs);
    let per_point = tape.concat(&linked_inputs, 1)?;

    let lw = bind(tape, &net.params, net.link.0, trainable)?;
    let lb = bind(tape, &net.params, net.link.1, trainable)?;
    let lifted = tape.linear(per_point, lw, lb)?;
    let lifted = tape.relu(lifted)?;
    let mut global = tape.group_row_max(lifted, n)?;

    if let Some(mask) = dropout_mask {
        if mask.len() != net.config.linked_width {
            return Err(Error::Dimension(alloc::format!(
                "dropout mask has {} values, global width is {}",
                mask.len(),
                net.config.linked_width
            )));
        }
        let m = tape.constant(vec![1, net.config.linked_width], mask.to_vec())?;
        global = tape.mul(global, m)?;
    }

    let cw = bind(tape, &net.params, net.classifier.0, trainable)?;
    let cb = bind(tape, &net.params, net.classifier.1, trainable)?;
    let logits = tape.linear(global, cw, cb)?;
    let logits = tape.reshape(logits, vec![net.config.classes])?;
    let global = tape.reshape(global, vec![net.config.linked_width])?;
    Ok(RecognizerVars {
        logits,
        global,
        per_point,
    })
}

fn points_tensor(pc: &PointCloud) -> (Vec<usize>, Vec<f64>) {
    let mut values = Vec::with_capacity(pc.len() * 3);
    for p in &pc.points {
        values.extend_from_slice(p);
    }
    (vec![pc.len(), 3], values)
}

/// Evaluation forward: logits plus linked features, no dropout.
pub fn forward(net: &RecognizerNet, pc: &PointCloud) -> Result<(Vec<f64>, LinkedFeatures)> {
    let mut tape = Tape::new();
    let (shape, values) = points_tensor(pc);
    let points = tape.constant(shape, values)?;
    let vars = forward_on_tape(net, &mut tape, points, false, None)?;
    let per_point_shape = tape.shape(vars.per_point).to_vec();
    Ok((
        tape.values(vars.logits).to_vec(),
        LinkedFeatures {
            per_point: tape.values(vars.per_point).to_vec(),
            n: per_point_shape[0],
            f: per_point_shape[1],
            global: tape.values(vars.global).to_vec(),
        },
    ))
}

/// Linked features only (the RFD's input view of a cloud).
pub fn extract_linked_features(net: &RecognizerNet, pc: &PointCloud) -> Result<LinkedFeatures> {
    forward(net, pc).map(|(_, linked)| linked)
}

/// Predicted class = argmax of logits, ties to the lower index.
pub fn predict(net: &RecognizerNet, pc: &PointCloud) -> Result<usize> {
    let (logits, _) = forward(net, pc)?;
    Ok(argmax(&logits))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Settings for one recognizer training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognizerTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Subsample each cloud to this many points per step (must stay > k);
    /// None trains on full clouds.
    pub train_points: Option<usize>,
}

impl Default for RecognizerTrainConfig {
    fn default() -> Self {
        RecognizerTrainConfig {
            epochs: 8,
            batch: 8,
            lr: 1e-3,
            seed: 1,
            train_points: Some(256),
        }
    }
}

/// Per-epoch training log entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Training-pass accuracy (dropout active).
    pub accuracy: f64,
}

fn dropout_mask(width: usize, p: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    if p <= 0.0 {
        return vec![1.0; width];
    }
    let keep_scale = 1.0 / (1.0 - p);
    (0..width)
        .map(|_| {
            use rand_chacha::rand_core::RngCore;
            if rng::unit_closed_open(rng.next_u64()) < p {
                0.0
            } else {
                keep_scale
            }
        })
        .collect()
}

pub(crate) fn subsample_cloud(
    pc: &PointCloud,
    count: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> PointCloud {
    if count >= pc.len() {
        return pc.clone();
    }
    let idx = rng::subsample_indices(rng, pc.len(), count);
    PointCloud {
        points: idx.iter().map(|&i| pc.points[i]).collect(),
        identity: pc.identity,
        expression: pc.expression,
    }
}

/// Minimize cross-entropy over labeled clouds with Adam.
///
/// Deterministic under (net init seed, config seed). Labels must cover at
/// least two identities, each a valid class index.
pub fn train_recognizer(
    net: &mut RecognizerNet,
    data: &[PointCloud],
    cfg: &RecognizerTrainConfig,
) -> Result<Vec<EpochStats>> {
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let mut labels = Vec::with_capacity(data.len());
    for (i, pc) in data.iter().enumerate() {
        let id = pc.identity.ok_or_else(|| {
            Error::Argument(alloc::format!("training cloud {i} has no identity label"))
        })?;
        if id >= net.config.classes {
            return Err(Error::Argument(alloc::format!(
                "cloud {i} has identity {id}, net has {} classes",
                net.config.classes
            )));
        }
        labels.push(id);
    }
    {
        let first = labels[0];
        if labels.iter().all(|&l| l == first) {
            return Err(Error::Argument(
                "training set holds a single identity; need at least two".into(),
            ));
        }
    }
    if let Some(m) = cfg.train_points {
        if m <= net.config.k {
            return Err(Error::Argument(alloc::format!(
                "train_points {m} must exceed k {}",
                net.config.k
            )));
        }
    }
    if cfg.batch == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }

    let mut adam = crate::tensor::AdamState::new(&net.params);
    let hp = crate::tensor::AdamHyper {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = rng::stream(cfg.seed, rng::domain::SHUFFLE, epoch as u64, 0);
        rng::shuffle(&mut shuffle_rng, &mut order);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch) {
            net.params.zero_grads();
            let inv = 1.0 / chunk.len() as f64;
            for &si in chunk {
                let pc = if let Some(m) = cfg.train_points {
                    let mut r =
                        rng::stream(cfg.seed, rng::domain::SUBSAMPLE, epoch as u64, si as u64);
                    subsample_cloud(&data[si], m, &mut r)
                } else {
                    data[si].clone()
                };
                let mut drop_rng =
                    rng::stream(cfg.seed, rng::domain::DROPOUT, epoch as u64, si as u64);
                let mask = dropout_mask(net.config.linked_width, net.config.dropout, &mut drop_rng);

                let mut tape = Tape::new();
                let (shape, values) = points_tensor(&pc);
                let points = tape.constant(shape, values)?;
                let vars = forward_on_tape(net, &mut tape, points, true, Some(&mask))?;
                let loss = tape.cross_entropy(vars.logits, labels[si])?;
                let scaled = tape.scale(loss, inv)?;
                tape.backward(scaled, &mut net.params)?;

                loss_sum += tape.values(loss)[0];
                if argmax(tape.values(vars.logits)) == labels[si] {
                    correct += 1;
                }
            }
            crate::tensor::adam_step(&mut net.params, &mut adam, &hp)?;
        }
        log.push(EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::finite_diff_check;
    use proptest::prelude::*;

    fn tiny_config(classes: usize) -> RecognizerConfig {
        RecognizerConfig {
            k: 3,
            layer_widths: vec![4, 4],
            linked_width: 8,
            classes,
            dropout: 0.0,
        }
    }

    fn random_cloud(n: usize, seed: u64, identity: Option<usize>) -> PointCloud {
        let mut r = rng::stream(seed, rng::domain::SAMPLE, 7, 0);
        PointCloud {
            points: (0..n)
                .map(|_| {
                    [
                        rng::uniform(&mut r, -1.0, 1.0),
                        rng::uniform(&mut r, -1.0, 1.0),
                        rng::uniform(&mut r, -1.0, 1.0),
                    ]
                })
                .collect(),
            identity,
            expression: None,
        }
    }

    // O(N^2) oracle: full sort of (distance, index) pairs per row, using
    // the same stated distance formula.
    fn knn_oracle(features: &[f64], n: usize, d: usize, k: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let mut pairs: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let mut dist = 0.0;
                    for a in 0..d {
                        let diff = features[i * d + a] - features[j * d + a];
                        dist += diff * diff;
                    }
                    (dist, j as u32)
                })
                .collect();
            pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            out.extend(pairs[..k].iter().map(|&(_, j)| j));
        }
        out
    }

    #[test]
    fn knn_collinear_hand_case() {
        // 1-D points 0, 1, 3 with k=1: nearest of 0 is 1; of 1 is 0
        // (distance 1 vs 2); of 3 is 1.
        let g = knn(&[0.0, 1.0, 3.0], 3, 1, 1).unwrap();
        assert_eq!(g.neighbors, vec![1, 0, 1]);
    }

    #[test]
    fn knn_full_neighborhood() {
        let feats = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let g = knn(&feats, 4, 2, 3).unwrap();
        for i in 0..4 {
            let mut row: Vec<u32> = g.neighbors[i * 3..(i + 1) * 3].to_vec();
            row.sort_unstable();
            let want: Vec<u32> = (0..4u32).filter(|&j| j != i as u32).collect();
            assert_eq!(row, want);
        }
    }

    #[test]
    fn knn_rejects_bad_k() {
        assert!(matches!(
            knn(&[0.0, 1.0], 2, 1, 2),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            knn(&[0.0, 1.0], 2, 1, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn knn_matches_oracle_on_many_random_instances() {
        let mut cases = 0;
        for seed in 0..40 {
            let mut r = rng::stream(seed, rng::domain::SAMPLE, 1, 0);
            for &(n, d, k) in &[(8usize, 2usize, 3usize), (32, 3, 5), (64, 3, 16)] {
                let feats: Vec<f64> = (0..n * d).map(|_| rng::uniform(&mut r, -2.0, 2.0)).collect();
                let got = knn(&feats, n, d, k).unwrap();
                assert_eq!(got.neighbors, knn_oracle(&feats, n, d, k));
                cases += 1;
            }
        }
        assert!(cases >= 100);
    }

    #[test]
    fn identical_points_give_symmetric_edge_outputs() {
        // All points identical: every edge feature is (f, 0), so every
        // point's edge-conv output row is identical.
        let net = RecognizerNet::new(tiny_config(2), 3).unwrap();
        let pc = PointCloud::new(vec![[0.5, -0.25, 1.0]; 6]).unwrap();
        let (logits, linked) = forward(&net, &pc).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
        for i in 1..linked.n {
            for c in 0..linked.f {
                assert_eq!(
                    linked.per_point[c].to_bits(),
                    linked.per_point[i * linked.f + c].to_bits()
                );
            }
        }
    }

    #[test]
    fn two_point_edge_conv_by_hand() {
        // k=1, two points. Edge feature of p0 is (f0, f1-f0); with an
        // identity-like weight picking out (f_j - f_i) and zero bias the
        // output is relu(f1 - f0) for p0 and relu(f0 - f1) for p1.
        let mut params = ParamSet::new();
        // Weight [1, 2]: selects the difference part of (f_i, diff).
        let w = params
            .add("w", Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap())
            .unwrap();
        let b = params.add("b", Tensor::zeros(vec![1])).unwrap();
        let mut tape = Tape::new();
        let feats = tape.constant(vec![2, 1], vec![2.0, 5.0]).unwrap();
        let graph = knn(&[2.0, 5.0], 2, 1, 1).unwrap();
        let wv = tape.param(&params, w).unwrap();
        let bv = tape.param(&params, b).unwrap();
        let out = edge_conv_on_tape(&mut tape, feats, &graph, wv, bv).unwrap();
        // p0: relu(5-2) = 3; p1: relu(2-5) = 0.
        assert_eq!(tape.values(out), &[3.0, 0.0]);
    }

    #[test]
    fn forward_matches_straight_line_reference() {
        // Independent naive forward: explicit loops, no tape, recomputing
        // everything from the parameter tensors.
        let config = tiny_config(3);
        let net = RecognizerNet::new(config.clone(), 11).unwrap();
        let pc = random_cloud(12, 5, None);
        let (logits, linked) = forward(&net, &pc).unwrap();

        let n = pc.len();
        let k = config.k;
        let get = |name: &str| -> (Vec<usize>, Vec<f64>) {
            let (_, p) = net
                .params
                .iter()
                .find(|(_, p)| p.name == name)
                .expect("param exists");
            (p.tensor.shape().to_vec(), p.tensor.values().to_vec())
        };

        let s = 2.0 / CANONICAL_EXTENT;
        let mut feats: Vec<Vec<f64>> = pc
            .points
            .iter()
            .map(|p| p.iter().map(|&v| v * s).collect())
            .collect();
        let mut all_layers: Vec<Vec<Vec<f64>>> = Vec::new();
        for l in 0..config.layer_widths.len() {
            let d = feats[0].len();
            let flat: Vec<f64> = feats.iter().flatten().copied().collect();
            let graph = knn_oracle(&flat, n, d, k);
            let (wshape, wvals) = get(&alloc::format!("edge{l}.weight"));
            let (_, bvals) = get(&alloc::format!("edge{l}.bias"));
            let w_out = wshape[0];
            let mut next: Vec<Vec<f64>> = Vec::with_capacity(n);
            for i in 0..n {
                let mut best = vec![f64::NEG_INFINITY; w_out];
                for &j in &graph[i * k..(i + 1) * k] {
                    let j = j as usize;
                    let mut edge = feats[i].clone();
                    for c in 0..d {
                        edge.push(feats[j][c] - feats[i][c]);
                    }
                    for o in 0..w_out {
                        let mut acc = bvals[o];
                        for c in 0..2 * d {
                            acc += wvals[o * 2 * d + c] * edge[c];
                        }
                        let acc = acc.max(0.0);
                        if acc > best[o] {
                            best[o] = acc;
                        }
                    }
                }
                next.push(best);
            }
            all_layers.push(next.clone());
            feats = next;
        }

        let mut per_point: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut row: Vec<f64> = pc.points[i].iter().map(|&v| v * s).collect();
            for layer in &all_layers {
                row.extend_from_slice(&layer[i]);
            }
            per_point.push(row);
        }
        let (lshape, lvals) = get("link.weight");
        let (_, lb) = get("link.bias");
        let mut global = vec![f64::NEG_INFINITY; lshape[0]];
        for row in &per_point {
            for o in 0..lshape[0] {
                let mut acc = lb[o];
                for c in 0..row.len() {
                    acc += lvals[o * row.len() + c] * row[c];
                }
                let acc = acc.max(0.0);
                if acc > global[o] {
                    global[o] = acc;
                }
            }
        }
        let (cshape, cvals) = get("classifier.weight");
        let (_, cb) = get("classifier.bias");
        let mut want_logits = vec![0.0; cshape[0]];
        for (o, wl) in want_logits.iter_mut().enumerate() {
            let mut acc = cb[o];
            for c in 0..global.len() {
                acc += cvals[o * global.len() + c] * global[c];
            }
            *wl = acc;
        }

        for (a, b) in logits.iter().zip(&want_logits) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        for (a, b) in linked.global.iter().zip(&global) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_permutation_invariant() {
        let net = RecognizerNet::new(tiny_config(4), 17).unwrap();
        let pc = random_cloud(24, 9, None);
        let (base, linked_base) = forward(&net, &pc).unwrap();
        let mut r = rng::stream(99, rng::domain::SHUFFLE, 0, 0);
        for _ in 0..5 {
            let mut order: Vec<usize> = (0..pc.len()).collect();
            rng::shuffle(&mut r, &mut order);
            let permuted = PointCloud {
                points: order.iter().map(|&i| pc.points[i]).collect(),
                identity: None,
                expression: None,
            };
            let (logits, linked) = forward(&net, &permuted).unwrap();
            for (a, b) in logits.iter().zip(&base) {
                assert!((a - b).abs() <= 1e-9);
            }
            for (a, b) in linked.global.iter().zip(&linked_base.global) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn global_max_is_idempotent_under_duplicated_rows() {
        // The honest form of the duplication claim: duplicating per-point
        // feature rows cannot change a max aggregation.
        let mut tape = Tape::new();
        let rows = tape
            .constant(vec![3, 2], vec![1.0, 5.0, 2.0, 2.0, 0.0, 9.0])
            .unwrap();
        let dup = tape.concat(&[rows, rows], 0).unwrap();
        let g1 = tape.group_row_max(rows, 3).unwrap();
        // Interleave-free duplication: max over all 6 rows.
        let g2 = tape.group_row_max(dup, 6).unwrap();
        assert_eq!(tape.values(g1), tape.values(g2));
    }

    #[test]
    fn dynamic_graphs_actually_differ_across_layers() {
        let net = RecognizerNet::new(tiny_config(2), 23).unwrap();
        let pc = random_cloud(20, 31, None);
        let mut tape = Tape::new();
        let (shape, values) = points_tensor(&pc);
        let points = tape.constant(shape, values).unwrap();
        let g1 = knn(tape.values(points), 20, 3, 3).unwrap();
        // Reproduce layer 1, then build layer 2's graph from its output.
        let (wid, bid) = net.edge_layers[0];
        let w = tape.constant_tensor(&net.params.get(wid).tensor).unwrap();
        let b = tape.constant_tensor(&net.params.get(bid).tensor).unwrap();
        let h1 = edge_conv_on_tape(&mut tape, points, &g1, w, b).unwrap();
        let g2 = knn(tape.values(h1), 20, 4, 3).unwrap();
        assert_ne!(g1.neighbors, g2.neighbors);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let net = RecognizerNet::new(tiny_config(2), 3).unwrap();
        let pc = random_cloud(3, 1, None);
        assert!(matches!(forward(&net, &pc), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_cloud_features_are_finite() {
        let net = RecognizerNet::new(tiny_config(2), 3).unwrap();
        let pc = PointCloud::new(vec![[0.0; 3]; 8]).unwrap();
        let linked = extract_linked_features(&net, &pc).unwrap();
        assert!(linked.per_point.iter().all(|v| v.is_finite()));
        assert!(linked.global.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradients_match_finite_differences_on_toy_instance() {
        // 16-point, 2-class instance; net weights all checked.
        let config = RecognizerConfig {
            k: 3,
            layer_widths: vec![3, 4],
            linked_width: 5,
            classes: 2,
            dropout: 0.0,
        };
        let mut net = RecognizerNet::new(config, 41).unwrap();
        // Check at a generic parameter point: with zero biases, coincident
        // all-zero feature rows put pre-activations exactly on relu kinks,
        // where one-sided subgradients and central differences disagree by
        // construction.
        let mut r = rng::stream(77, rng::domain::INIT, 0, 0);
        for i in 0..net.params.len() {
            let p = net.params.get_mut(ParamId(i));
            if p.name.ends_with(".bias") {
                for v in p.tensor.values_mut() {
                    *v = rng::uniform(&mut r, -0.1, 0.1);
                }
            }
        }
        let pc = random_cloud(16, 13, None);
        let (shape, values) = points_tensor(&pc);
        let edge_layers = net.edge_layers.clone();
        let link = net.link;
        let classifier = net.classifier;
        let cfg = net.config.clone();
        finite_diff_check(
            &mut net.params,
            |tape, params| {
                // Rebuild a minimal net view bound to the perturbed params.
                let view = RecognizerNet {
                    config: cfg.clone(),
                    params: params.clone(),
                    edge_layers: edge_layers.clone(),
                    link,
                    classifier,
                };
                let points = tape.constant(shape.clone(), values.clone())?;
                let vars = forward_on_tape(&view, tape, points, true, None)?;
                tape.cross_entropy(vars.logits, 1)
            },
            // Small step: the composition is piecewise linear in the
            // weights (relu + max kinks), so the probe must stay inside
            // one linear piece.
            1e-6,
            1e-4,
        );
    }

    #[test]
    fn training_separates_two_blob_identities() {
        // Two identities as displaced random blobs; a tiny net must reach
        // 100% training accuracy quickly and deterministically.
        let config = RecognizerConfig {
            k: 4,
            layer_widths: vec![8, 8],
            linked_width: 16,
            classes: 2,
            dropout: 0.1,
        };
        let make_data = || -> Vec<PointCloud> {
            let mut data = Vec::new();
            for s in 0..6 {
                let mut pc = random_cloud(32, 1000 + s, Some((s % 2) as usize));
                let shift = if s % 2 == 0 { -2.0 } else { 2.0 };
                for p in &mut pc.points {
                    p[0] += shift;
                }
                data.push(pc);
            }
            data
        };
        let cfg = RecognizerTrainConfig {
            epochs: 30,
            batch: 3,
            lr: 3e-3,
            seed: 5,
            train_points: None,
        };

        let mut net = RecognizerNet::new(config.clone(), 7).unwrap();
        let log = train_recognizer(&mut net, &make_data(), &cfg).unwrap();
        assert_eq!(log.len(), 30);
        assert_eq!(log.last().unwrap().accuracy, 1.0, "log: {log:?}");

        // Determinism: a fresh identical run reproduces the whole log.
        let mut net2 = RecognizerNet::new(config, 7).unwrap();
        let log2 = train_recognizer(&mut net2, &make_data(), &cfg).unwrap();
        assert_eq!(log, log2);
        for (i, (_, p)) in net.params.iter().enumerate() {
            let q = net2.params.iter().nth(i).unwrap().1;
            assert_eq!(p.tensor.values(), q.tensor.values());
        }
    }

    #[test]
    fn zero_epochs_leaves_weights_untouched() {
        let config = tiny_config(2);
        let mut net = RecognizerNet::new(config, 7).unwrap();
        let before: Vec<Vec<f64>> = net.params.iter().map(|(_, p)| p.tensor.values().to_vec()).collect();
        let data = vec![
            random_cloud(16, 1, Some(0)),
            random_cloud(16, 2, Some(1)),
        ];
        let cfg = RecognizerTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let log = train_recognizer(&mut net, &data, &cfg).unwrap();
        assert!(log.is_empty());
        for (i, (_, p)) in net.params.iter().enumerate() {
            assert_eq!(p.tensor.values(), before[i].as_slice());
        }
    }

    #[test]
    fn single_identity_training_is_rejected() {
        let mut net = RecognizerNet::new(tiny_config(2), 7).unwrap();
        let data = vec![random_cloud(16, 1, Some(0)), random_cloud(16, 2, Some(0))];
        assert!(matches!(
            train_recognizer(&mut net, &data, &Default::default()),
            Err(Error::Argument(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn knn_oracle_equivalence_property(n in 5usize..48, seed in 0u64..500) {
            let k = 4.min(n - 1);
            let mut r = rng::stream(seed, rng::domain::SAMPLE, 2, 0);
            let feats: Vec<f64> = (0..n * 3).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
            let got = knn(&feats, n, 3, k).unwrap();
            prop_assert_eq!(got.neighbors, knn_oracle(&feats, n, 3, k));
        }
    }
}
