//! File formats: labeled XYZ point clouds, OFF meshes, ASCII PGM plane
//! dumps, the TDNZ1 checkpoint container, and the dataset manifest.
//!
//! Text formats print floats with Rust's shortest-round-trip formatting,
//! so write -> read reproduces every f64 bit-exactly; the checkpoint
//! container stores raw little-endian f64 bytes for the same guarantee.
//! All writers stage to a sibling temp file and rename into place.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use topdenoise_core::gan::{DenoiserTrainConfig, DenoiserWeights};
use topdenoise_core::metrics::TriangleMesh;
use topdenoise_core::pointcloud::{ExpressionTag, PointCloud};
use topdenoise_core::projection::PlaneImage;
use topdenoise_core::recognizer::{RecognizerConfig, RecognizerNet};
use topdenoise_core::synth::{DatasetManifest, SampleRecord, Split, SplitSetting};

use crate::{io_err, CliError};

/// Writes bytes to `path` through a temp file in the same directory, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let name = path
        .file_name()
        .ok_or_else(|| CliError::config(format!("{}: not a file path", path.display())))?;
    let tmp = match dir {
        Some(d) => d.join(format!(".tmp.{}", name.to_string_lossy())),
        None => Path::new(&format!(".tmp.{}", name.to_string_lossy())).to_path_buf(),
    };
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------- XYZ --

fn expression_name(tag: ExpressionTag) -> &'static str {
    match tag {
        ExpressionTag::Neutral => "neutral",
        ExpressionTag::NonNeutral => "nonneutral",
    }
}

fn parse_expression(s: &str) -> Result<ExpressionTag, CliError> {
    match s {
        "neutral" => Ok(ExpressionTag::Neutral),
        "nonneutral" => Ok(ExpressionTag::NonNeutral),
        other => Err(CliError::config(format!("unknown expression tag {other:?}"))),
    }
}

/// One point per line, `x y z`; labels ride in a leading comment of the
/// form `# identity=3 expression=neutral`.
pub fn write_xyz(path: &Path, pc: &PointCloud) -> Result<(), CliError> {
    use std::fmt::Write as _;
    let mut out = String::new();
    if pc.identity.is_some() || pc.expression.is_some() {
        out.push('#');
        if let Some(id) = pc.identity {
            let _ = write!(out, " identity={id}");
        }
        if let Some(tag) = pc.expression {
            let _ = write!(out, " expression={}", expression_name(tag));
        }
        out.push('\n');
    }
    for p in &pc.points {
        let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_xyz(path: &Path) -> Result<PointCloud, CliError> {
    let text = read_to_string(path)?;
    let mut identity = None;
    let mut expression = None;
    let mut points = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            for token in rest.split_whitespace() {
                if let Some(v) = token.strip_prefix("identity=") {
                    identity = Some(v.parse::<usize>().map_err(|_| {
                        CliError::config(format!("{}:{}: bad identity {v:?}", path.display(), ln + 1))
                    })?);
                } else if let Some(v) = token.strip_prefix("expression=") {
                    expression = Some(parse_expression(v)?);
                }
            }
            continue;
        }
        let mut coords = [0.0f64; 3];
        let mut fields = line.split_whitespace();
        for c in &mut coords {
            let field = fields.next().ok_or_else(|| {
                CliError::config(format!("{}:{}: expected 3 coordinates", path.display(), ln + 1))
            })?;
            *c = field.parse::<f64>().map_err(|_| {
                CliError::config(format!("{}:{}: bad float {field:?}", path.display(), ln + 1))
            })?;
        }
        points.push(coords);
    }
    PointCloud::with_labels(points, identity, expression).map_err(CliError::from)
}

// ---------------------------------------------------------------- OFF --

pub fn write_off(path: &Path, mesh: &TriangleMesh) -> Result<(), CliError> {
    use std::fmt::Write as _;
    let mut out = String::from("OFF\n");
    let _ = writeln!(out, "{} {} 0", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        let _ = writeln!(out, "{} {} {}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_off(path: &Path) -> Result<TriangleMesh, CliError> {
    let text = read_to_string(path)?;
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let bad = |msg: &str| CliError::config(format!("{}: {msg}", path.display()));
    if lines.next() != Some("OFF") {
        return Err(bad("missing OFF header"));
    }
    let counts = lines.next().ok_or_else(|| bad("missing count line"))?;
    let mut it = counts.split_whitespace();
    let nv: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad vertex count"))?;
    let nf: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad face count"))?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
        let mut f = line.split_whitespace();
        let mut v = [0.0f64; 3];
        for c in &mut v {
            *c = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad vertex line"))?;
        }
        vertices.push(v);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let line = lines.next().ok_or_else(|| bad("truncated face list"))?;
        let mut f = line.split_whitespace();
        if f.next() != Some("3") {
            return Err(bad("only triangle faces supported"));
        }
        let mut idx = [0u32; 3];
        for i in &mut idx {
            *i = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad face line"))?;
        }
        faces.push(idx);
    }
    TriangleMesh::new(vertices, faces).map_err(CliError::from)
}

// ---------------------------------------------------------------- PGM --

/// ASCII PGM of a plane's gray grid, min..max normalized to 0..255.
/// Debug aid only; the mapping is not invertible.
pub fn write_pgm(path: &Path, plane: &PlaneImage) -> Result<(), CliError> {
    use std::fmt::Write as _;
    let (lo, hi) = plane
        .grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = String::new();
    let _ = writeln!(out, "P2\n{} {}\n255", plane.width, plane.height);
    for row in 0..plane.height {
        let mut sep = "";
        for col in 0..plane.width {
            let v = plane.grid[row * plane.width + col];
            let g = ((v - lo) / span * 255.0).round() as i64;
            let _ = write!(out, "{sep}{}", g.clamp(0, 255));
            sep = " ";
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

// --------------------------------------------------------- checkpoint --

const MAGIC: &[u8; 6] = b"TDNZ1\n";

/// One named tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Binary container: magic, JSON manifest describing the network
/// structure, then named f64 tensors. Round-trips bit-exactly.
pub fn write_container(
    path: &Path,
    manifest: &serde_json::Value,
    records: &[CheckpointRecord],
) -> Result<(), CliError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let mj = serde_json::to_vec(manifest)?;
    buf.extend_from_slice(&(mj.len() as u32).to_le_bytes());
    buf.extend_from_slice(&mj);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(r.shape.len() as u8);
        let mut numel = 1usize;
        for &d in &r.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
            numel *= d;
        }
        assert_eq!(numel, r.values.len(), "record {} shape mismatch", r.name);
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.pos + n > self.buf.len() {
            return Err(CliError::state(format!(
                "{}: truncated checkpoint",
                self.path.display()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CliError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<CheckpointRecord>), CliError> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CliError::state(format!(
            "{}: not a TDNZ1 checkpoint",
            path.display()
        )));
    }
    let mlen = r.u32()? as usize;
    let manifest: serde_json::Value = serde_json::from_slice(r.take(mlen)?)
        .map_err(|e| CliError::state(format!("{}: bad manifest: {e}", path.display())))?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| CliError::state(format!("{}: bad record name", path.display())))?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let d = r.u32()? as usize;
            shape.push(d);
            numel *= d;
        }
        let raw = r.take(numel * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(CheckpointRecord {
            name,
            shape,
            values,
        });
    }
    Ok((manifest, records))
}

#[derive(Serialize, Deserialize)]
struct RecognizerManifest {
    kind: String,
    k: usize,
    layer_widths: Vec<usize>,
    linked_width: usize,
    classes: usize,
    dropout: f64,
}

pub fn save_recognizer(path: &Path, net: &RecognizerNet) -> Result<(), CliError> {
    let c = &net.config;
    let manifest = serde_json::to_value(RecognizerManifest {
        kind: "recognizer".into(),
        k: c.k,
        layer_widths: c.layer_widths.clone(),
        linked_width: c.linked_width,
        classes: c.classes,
        dropout: c.dropout,
    })?;
    let records: Vec<CheckpointRecord> = net
        .params()
        .iter()
        .map(|(_, p)| CheckpointRecord {
            name: format!("ldgcnn/{}", p.name),
            shape: p.tensor.shape().to_vec(),
            values: p.tensor.values().to_vec(),
        })
        .collect();
    write_container(path, &manifest, &records)
}

pub fn load_recognizer(path: &Path) -> Result<RecognizerNet, CliError> {
    let (manifest, records) = read_container(path)?;
    let m: RecognizerManifest = serde_json::from_value(manifest)
        .map_err(|e| CliError::state(format!("{}: bad manifest: {e}", path.display())))?;
    if m.kind != "recognizer" {
        return Err(CliError::state(format!(
            "{}: expected a recognizer checkpoint, found {:?}",
            path.display(),
            m.kind
        )));
    }
    let config = RecognizerConfig {
        k: m.k,
        layer_widths: m.layer_widths,
        linked_width: m.linked_width,
        classes: m.classes,
        dropout: m.dropout,
    };
    let mut net = RecognizerNet::new(config, 0)?;
    if records.len() != net.params().len() {
        return Err(CliError::state(format!(
            "{}: {} records for {} parameters",
            path.display(),
            records.len(),
            net.params().len()
        )));
    }
    for r in &records {
        let name = r.name.strip_prefix("ldgcnn/").ok_or_else(|| {
            CliError::state(format!("{}: unexpected record {:?}", path.display(), r.name))
        })?;
        net.params_mut().set_values(name, &r.values)?;
    }
    Ok(net)
}

#[derive(Serialize, Deserialize)]
struct DenoiserManifest {
    kind: String,
    resolution: [usize; 2],
    gen_widths: Vec<usize>,
    vad_widths: Vec<usize>,
    rfd_hidden: Vec<usize>,
    rfd_in: usize,
}

pub fn save_denoiser(
    path: &Path,
    weights: &DenoiserWeights,
    cfg: &DenoiserTrainConfig,
    rfd_in: usize,
) -> Result<(), CliError> {
    let manifest = serde_json::to_value(DenoiserManifest {
        kind: "denoiser".into(),
        resolution: [weights.resolution.0, weights.resolution.1],
        gen_widths: cfg.gen_widths.clone(),
        vad_widths: cfg.vad_widths.clone(),
        rfd_hidden: cfg.rfd_hidden.clone(),
        rfd_in,
    })?;
    let mut records = Vec::new();
    for set in [weights.generator_params(), weights.discriminator_params()] {
        for (_, p) in set.iter() {
            records.push(CheckpointRecord {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.values().to_vec(),
            });
        }
    }
    write_container(path, &manifest, &records)
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserWeights, CliError> {
    let (manifest, records) = read_container(path)?;
    let m: DenoiserManifest = serde_json::from_value(manifest)
        .map_err(|e| CliError::state(format!("{}: bad manifest: {e}", path.display())))?;
    if m.kind != "denoiser" {
        return Err(CliError::state(format!(
            "{}: expected a denoiser checkpoint, found {:?}",
            path.display(),
            m.kind
        )));
    }
    let cfg = DenoiserTrainConfig {
        resolution: (m.resolution[0], m.resolution[1]),
        gen_widths: m.gen_widths,
        vad_widths: m.vad_widths,
        rfd_hidden: m.rfd_hidden,
        ..DenoiserTrainConfig::default()
    };
    let mut weights = DenoiserWeights::new(&cfg, m.rfd_in)?;
    let expected = weights.generator_params().len() + weights.discriminator_params().len();
    if records.len() != expected {
        return Err(CliError::state(format!(
            "{}: {} records for {} parameters",
            path.display(),
            records.len(),
            expected
        )));
    }
    for r in &records {
        let set = if r.name.starts_with("gen.") {
            weights.generator_params_mut()
        } else {
            weights.discriminator_params_mut()
        };
        set.set_values(&r.name, &r.values)?;
    }
    Ok(weights)
}

// ----------------------------------------------------------- manifest --

#[derive(Serialize, Deserialize)]
struct ManifestJson {
    setting: String,
    seed: u64,
    samples: Vec<SampleJson>,
}

#[derive(Serialize, Deserialize)]
struct SampleJson {
    path: String,
    identity: usize,
    sample_index: usize,
    expression: String,
    split: String,
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), CliError> {
    let doc = ManifestJson {
        setting: match manifest.setting {
            SplitSetting::Neutral => "neutral".into(),
            SplitSetting::Random => "random".into(),
        },
        seed: manifest.seed,
        samples: manifest
            .samples
            .iter()
            .map(|s| SampleJson {
                path: s.path.clone(),
                identity: s.identity,
                sample_index: s.sample_index,
                expression: expression_name(s.expression).into(),
                split: match s.split {
                    Split::Train => "train".into(),
                    Split::Test => "test".into(),
                },
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    let doc: ManifestJson = serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| CliError::state(format!("{}: {e}", path.display())))?;
    let setting = match doc.setting.as_str() {
        "neutral" => SplitSetting::Neutral,
        "random" => SplitSetting::Random,
        other => {
            return Err(CliError::state(format!(
                "{}: unknown setting {other:?}",
                path.display()
            )))
        }
    };
    let mut samples = Vec::with_capacity(doc.samples.len());
    for s in doc.samples {
        samples.push(SampleRecord {
            path: s.path,
            identity: s.identity,
            sample_index: s.sample_index,
            expression: parse_expression(&s.expression)?,
            split: match s.split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(CliError::state(format!(
                        "{}: unknown split {other:?}",
                        path.display()
                    )))
                }
            },
        });
    }
    Ok(DatasetManifest {
        samples,
        setting,
        seed: doc.seed,
    })
}
