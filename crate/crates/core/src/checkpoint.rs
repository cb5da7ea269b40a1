//! Versioned on-disk persistence.
//!
//! A checkpoint is a directory holding `manifest.json` and `payload.bin`.
//! Full-precision tensors are stored as little-endian `f32`; quantized
//! weights are stored as signed 8-bit integer levels and reconstructed as
//! `level × Δ` with `Δ` kept at full precision in the manifest. A capture
//! bank is a directory of shadow checkpoints plus `bank.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::averaging::{AveragedModel, Capture, CaptureBank, Metrics};
use crate::error::{Error, Result};
use crate::nn::{Architecture, Evaluation, Network, OptimizerState};
use crate::qat::ShadowModel;
use crate::quant::{ModelQuantizer, QuantizedModel};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";
pub const BANK_FILE: &str = "bank.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    FullPrecision,
    Quantized,
    Shadow,
    Averaged,
    Optimizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    F32Le,
    I8Levels,
}

impl Encoding {
    fn width(self) -> usize {
        match self {
            Encoding::F32Le => 4,
            Encoding::I8Levels => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDescriptor {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
    pub encoding: Encoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingRecord {
    pub count: usize,
    pub base_bits: u32,
    pub base_steps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub momentum: f64,
    pub l2_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub kind: CheckpointKind,
    pub architecture: Architecture,
    pub tensors: Vec<TensorDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<ModelQuantizer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub averaging: Option<AveragingRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerRecord>,
    #[serde(default)]
    pub provenance: Provenance,
    /// SHA-256 of the payload, hex encoded.
    pub checksum: String,
}

/// Anything that can be persisted as a single checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    FullPrecision(Network),
    Quantized(QuantizedModel),
    Shadow(ShadowModel),
    Averaged(AveragedModel),
    Optimizer {
        architecture: Architecture,
        state: OptimizerState,
    },
}

impl Artifact {
    pub fn kind(&self) -> CheckpointKind {
        match self {
            Artifact::FullPrecision(_) => CheckpointKind::FullPrecision,
            Artifact::Quantized(_) => CheckpointKind::Quantized,
            Artifact::Shadow(_) => CheckpointKind::Shadow,
            Artifact::Averaged(_) => CheckpointKind::Averaged,
            Artifact::Optimizer { .. } => CheckpointKind::Optimizer,
        }
    }

    /// The network used for inference: applied weights for shadow models.
    pub fn inference_network(&self) -> Option<&Network> {
        match self {
            Artifact::FullPrecision(n) => Some(n),
            Artifact::Quantized(q) => Some(q.network()),
            Artifact::Shadow(s) => Some(s.applied()),
            Artifact::Averaged(a) => Some(a.network()),
            Artifact::Optimizer { .. } => None,
        }
    }
}

#[derive(Default)]
struct PayloadWriter {
    bytes: Vec<u8>,
    tensors: Vec<TensorDescriptor>,
}

impl PayloadWriter {
    fn f32(&mut self, name: String, t: &Tensor) {
        let offset = self.bytes.len();
        for &v in t.data() {
            self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.push(name, t.shape(), offset, Encoding::F32Le);
    }

    fn levels(&mut self, name: String, shape: &[usize], levels: &[i64]) -> Result<()> {
        let offset = self.bytes.len();
        for &l in levels {
            let b = i8::try_from(l).map_err(|_| {
                Error::InvalidArgument(format!("level {l} of {name} does not fit in 8 bits"))
            })?;
            self.bytes.push(b as u8);
        }
        self.push(name, shape, offset, Encoding::I8Levels);
        Ok(())
    }

    fn push(&mut self, name: String, shape: &[usize], offset: usize, encoding: Encoding) {
        self.tensors.push(TensorDescriptor {
            name,
            shape: shape.to_vec(),
            offset,
            length: self.bytes.len() - offset,
            encoding,
        });
    }

    fn biases(&mut self, net: &Network) {
        for (i, b) in net.biases().iter().enumerate() {
            if let Some(b) = b {
                self.f32(format!("layer{i}.bias"), b);
            }
        }
    }

    fn quantized_weights(&mut self, prefix: &str, net: &Network, quant: &ModelQuantizer) -> Result<()> {
        for (i, (w, levels)) in net.weights().iter().zip(quant.levels_of(net)?).enumerate() {
            self.levels(format!("{prefix}layer{i}.weight"), w.shape(), &levels)?;
        }
        Ok(())
    }
}

/// Persist `artifact` into directory `path`, creating it if needed.
pub fn save(artifact: &Artifact, path: impl AsRef<Path>, provenance: Provenance) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let mut p = PayloadWriter::default();
    let mut quantization = None;
    let mut averaging = None;
    let mut optimizer = None;
    let architecture = match artifact {
        Artifact::FullPrecision(net) => {
            for (i, w) in net.weights().iter().enumerate() {
                p.f32(format!("layer{i}.weight"), w);
            }
            p.biases(net);
            net.architecture().clone()
        }
        Artifact::Quantized(q) => {
            p.quantized_weights("", q.network(), q.quantizer())?;
            p.biases(q.network());
            quantization = Some(q.quantizer().clone());
            q.network().architecture().clone()
        }
        Artifact::Shadow(s) => {
            for (i, w) in s.shadow().weights().iter().enumerate() {
                p.f32(format!("shadow.layer{i}.weight"), w);
            }
            p.quantized_weights("applied.", s.applied(), s.quantizer())?;
            p.biases(s.shadow());
            quantization = Some(s.quantizer().clone());
            s.shadow().architecture().clone()
        }
        Artifact::Averaged(a) => {
            let fine = a.fine_quantizer();
            p.quantized_weights("", a.network(), &fine)?;
            p.biases(a.network());
            quantization = Some(fine);
            averaging = Some(AveragingRecord {
                count: a.count(),
                base_bits: a.base_quantizer().bits,
                base_steps: a.base_quantizer().steps.clone(),
            });
            a.network().architecture().clone()
        }
        Artifact::Optimizer {
            architecture,
            state,
        } => {
            for (i, w) in state.weight_buffers.iter().enumerate() {
                p.f32(format!("momentum.layer{i}.weight"), w);
            }
            for (i, b) in state.bias_buffers.iter().enumerate() {
                if let Some(b) = b {
                    p.f32(format!("momentum.layer{i}.bias"), b);
                }
            }
            optimizer = Some(OptimizerRecord {
                momentum: state.momentum,
                l2_scale: state.l2_scale,
            });
            architecture.clone()
        }
    };
    let manifest = CheckpointManifest {
        schema_version: SCHEMA_VERSION,
        kind: artifact.kind(),
        architecture,
        tensors: p.tensors,
        quantization,
        averaging,
        optimizer,
        provenance,
        checksum: hex::encode(Sha256::digest(&p.bytes)),
    };
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let payload_path = path.join(PAYLOAD_FILE);
    fs::write(&payload_path, &p.bytes).map_err(|e| Error::io(&payload_path, e))?;
    let manifest_path = path.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let manifest_path = path.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let probe: VersionProbe = serde_json::from_str(&text)
        .map_err(|e| Error::malformed(&manifest_path, e.to_string()))?;
    if probe.schema_version != SCHEMA_VERSION {
        return Err(Error::UnsupportedVersion {
            found: probe.schema_version,
            supported: SCHEMA_VERSION,
        });
    }
    serde_json::from_str(&text).map_err(|e| Error::malformed(&manifest_path, e.to_string()))
}

struct PayloadReader<'a> {
    path: PathBuf,
    bytes: &'a [u8],
    tensors: &'a [TensorDescriptor],
}

impl PayloadReader<'_> {
    fn descriptor(&self, name: &str, encoding: Encoding) -> Result<&TensorDescriptor> {
        let d = self
            .tensors
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::malformed(&self.path, format!("missing tensor {name}")))?;
        if d.encoding != encoding {
            return Err(Error::malformed(&self.path, format!("{name} has encoding {:?}", d.encoding)));
        }
        Ok(d)
    }

    fn f32(&self, name: &str) -> Result<Tensor> {
        let d = self.descriptor(name, Encoding::F32Le)?;
        let data = self.bytes[d.offset..d.offset + d.length]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor::new(d.shape.clone(), data)
    }

    fn levels(&self, name: &str) -> Result<(Vec<usize>, Vec<i64>)> {
        let d = self.descriptor(name, Encoding::I8Levels)?;
        let levels = self.bytes[d.offset..d.offset + d.length]
            .iter()
            .map(|&b| b as i8 as i64)
            .collect();
        Ok((d.shape.clone(), levels))
    }

    fn biases(&self, arch: &Architecture) -> Result<Vec<Option<Tensor>>> {
        arch.parameterized_layers()
            .enumerate()
            .map(|(i, spec)| {
                spec.has_bias()
                    .then(|| self.f32(&format!("layer{i}.bias")))
                    .transpose()
            })
            .collect()
    }

    fn quantized_network(&self, prefix: &str, arch: &Architecture, quant: &ModelQuantizer, biases: Vec<Option<Tensor>>) -> Result<Network> {
        let count = arch.parameterized_layers().count();
        if quant.steps.len() != count {
            return Err(Error::malformed(&self.path, "step count does not match topology"));
        }
        let mut weights = Vec::with_capacity(count);
        for i in 0..count {
            let name = format!("{prefix}layer{i}.weight");
            let (shape, levels) = self.levels(&name)?;
            let q = quant.layer(i);
            if let Some(&bad) = levels.iter().find(|&&l| !q.admits_level(l)) {
                return Err(Error::malformed(&self.path, format!("level {bad} invalid in {name}")));
            }
            weights.push(Tensor::new(shape, levels.iter().map(|&l| q.dequantize(l)).collect())?);
        }
        Network::from_parts(arch.clone(), weights, biases)
    }
}

fn check_layout(path: &Path, tensors: &[TensorDescriptor], payload_len: usize) -> Result<()> {
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(tensors.len());
    for d in tensors {
        let want = d.shape.iter().product::<usize>() * d.encoding.width();
        if d.length != want {
            return Err(Error::ShapeMismatch {
                context: format!("tensor {} in {}", d.name, path.display()),
                expected: d.shape.clone(),
                actual: vec![d.length / d.encoding.width()],
            });
        }
        spans.push((d.offset, d.length));
    }
    spans.sort_unstable();
    let mut cursor = 0;
    for (offset, len) in spans {
        if offset != cursor {
            return Err(Error::malformed(path, format!("payload gap or overlap at byte {offset}")));
        }
        cursor += len;
    }
    if cursor != payload_len {
        return Err(Error::malformed(
            path,
            format!("descriptors cover {cursor} of {payload_len} payload bytes"),
        ));
    }
    Ok(())
}

/// Load a checkpoint directory, verifying version, checksum, and layout.
pub fn load(path: impl AsRef<Path>) -> Result<(Artifact, CheckpointManifest)> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let payload_path = path.join(PAYLOAD_FILE);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.checksum {
        return Err(Error::ChecksumMismatch { path: payload_path });
    }
    check_layout(path, &manifest.tensors, bytes.len())?;
    let r = PayloadReader {
        path: path.to_path_buf(),
        bytes: &bytes,
        tensors: &manifest.tensors,
    };
    let arch = &manifest.architecture;
    let count = arch.parameterized_layers().count();
    let quant = || {
        manifest
            .quantization
            .clone()
            .ok_or_else(|| Error::malformed(path, "missing quantization record"))
    };
    let artifact = match manifest.kind {
        CheckpointKind::FullPrecision => {
            let weights = (0..count)
                .map(|i| r.f32(&format!("layer{i}.weight")))
                .collect::<Result<Vec<_>>>()?;
            Artifact::FullPrecision(Network::from_parts(arch.clone(), weights, r.biases(arch)?)?)
        }
        CheckpointKind::Quantized => {
            let q = quant()?;
            let net = r.quantized_network("", arch, &q, r.biases(arch)?)?;
            Artifact::Quantized(QuantizedModel::new(net, q)?)
        }
        CheckpointKind::Shadow => {
            let q = quant()?;
            let biases = r.biases(arch)?;
            let shadow_w = (0..count)
                .map(|i| r.f32(&format!("shadow.layer{i}.weight")))
                .collect::<Result<Vec<_>>>()?;
            let shadow = Network::from_parts(arch.clone(), shadow_w, biases.clone())?;
            let applied = r.quantized_network("applied.", arch, &q, biases)?;
            Artifact::Shadow(ShadowModel::from_parts(shadow, applied, q)?)
        }
        CheckpointKind::Averaged => {
            let q = quant()?;
            let rec = manifest
                .averaging
                .clone()
                .ok_or_else(|| Error::malformed(path, "missing averaging record"))?;
            let net = r.quantized_network("", arch, &q, r.biases(arch)?)?;
            let base = ModelQuantizer::new(rec.base_bits, rec.base_steps)?;
            let avg = AveragedModel::from_fine_grid(net, rec.count, base)?;
            if avg.fine_quantizer() != q {
                return Err(Error::malformed(path, "averaging record disagrees with step sizes"));
            }
            Artifact::Averaged(avg)
        }
        CheckpointKind::Optimizer => {
            let rec = manifest
                .optimizer
                .clone()
                .ok_or_else(|| Error::malformed(path, "missing optimizer record"))?;
            let weight_buffers = (0..count)
                .map(|i| r.f32(&format!("momentum.layer{i}.weight")))
                .collect::<Result<Vec<_>>>()?;
            let bias_buffers = arch
                .parameterized_layers()
                .enumerate()
                .map(|(i, spec)| {
                    spec.has_bias()
                        .then(|| r.f32(&format!("momentum.layer{i}.bias")))
                        .transpose()
                })
                .collect::<Result<Vec<_>>>()?;
            Artifact::Optimizer {
                architecture: arch.clone(),
                state: OptimizerState {
                    momentum: rec.momentum,
                    l2_scale: rec.l2_scale,
                    weight_buffers,
                    bias_buffers,
                },
            }
        }
    };
    Ok((artifact, manifest))
}

fn expect_kind(path: &Path, found: CheckpointKind, want: CheckpointKind) -> Error {
    Error::malformed(path, format!("expected a {want:?} checkpoint, found {found:?}"))
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    match load(&path)? {
        (Artifact::FullPrecision(n), _) => Ok(n),
        (a, _) => Err(expect_kind(path.as_ref(), a.kind(), CheckpointKind::FullPrecision)),
    }
}

pub fn load_shadow(path: impl AsRef<Path>) -> Result<ShadowModel> {
    match load(&path)? {
        (Artifact::Shadow(s), _) => Ok(s),
        (a, _) => Err(expect_kind(path.as_ref(), a.kind(), CheckpointKind::Shadow)),
    }
}

pub fn load_averaged(path: impl AsRef<Path>) -> Result<AveragedModel> {
    match load(&path)? {
        (Artifact::Averaged(a), _) => Ok(a),
        (a, _) => Err(expect_kind(path.as_ref(), a.kind(), CheckpointKind::Averaged)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EvaluationRecord {
    loss: f64,
    accuracy: f64,
}

impl From<Evaluation> for EvaluationRecord {
    fn from(e: Evaluation) -> Self {
        Self {
            loss: e.loss,
            accuracy: e.accuracy,
        }
    }
}

impl From<EvaluationRecord> for Evaluation {
    fn from(e: EvaluationRecord) -> Self {
        Self {
            loss: e.loss,
            accuracy: e.accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankEntry {
    epoch: usize,
    lr: f64,
    dir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<EvaluationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test: Option<EvaluationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankManifest {
    schema_version: u32,
    quantization: ModelQuantizer,
    entries: Vec<BankEntry>,
}

pub fn capture_dir_name(epoch: usize) -> String {
    format!("capture-{epoch:05}")
}

/// Persist every capture as a shadow checkpoint plus the ordering manifest.
pub fn save_bank(bank: &CaptureBank, dir: impl AsRef<Path>, provenance: &Provenance) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(bank.len());
    for c in bank.entries() {
        let name = capture_dir_name(c.epoch);
        let prov = Provenance {
            epoch: Some(c.epoch),
            lr: Some(c.lr),
            ..provenance.clone()
        };
        save(&Artifact::Shadow(c.model.clone()), dir.join(&name), prov)?;
        entries.push(BankEntry {
            epoch: c.epoch,
            lr: c.lr,
            dir: name,
            train: c.metrics.map(|m| m.train.into()),
            test: c.metrics.and_then(|m| m.test.map(Into::into)),
        });
    }
    let manifest = BankManifest {
        schema_version: SCHEMA_VERSION,
        quantization: bank.quantizer().clone(),
        entries,
    };
    let path = dir.join(BANK_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("bank manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_bank(dir: impl AsRef<Path>) -> Result<CaptureBank> {
    let dir = dir.as_ref();
    let path = dir.join(BANK_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let probe: VersionProbe =
        serde_json::from_str(&text).map_err(|e| Error::malformed(&path, e.to_string()))?;
    if probe.schema_version != SCHEMA_VERSION {
        return Err(Error::UnsupportedVersion {
            found: probe.schema_version,
            supported: SCHEMA_VERSION,
        });
    }
    let manifest: BankManifest =
        serde_json::from_str(&text).map_err(|e| Error::malformed(&path, e.to_string()))?;
    let mut bank = CaptureBank::new(manifest.quantization);
    for e in manifest.entries {
        let entry_dir = dir.join(&e.dir);
        if !entry_dir.join(MANIFEST_FILE).is_file() {
            return Err(Error::BankIncomplete { path: entry_dir });
        }
        let model = load_shadow(&entry_dir)?;
        let metrics = e.train.map(|train| Metrics {
            train: train.into(),
            test: e.test.map(Into::into),
        });
        bank.push(Capture {
            epoch: e.epoch,
            lr: e.lr,
            model,
            metrics,
        })?;
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_weights;

    fn fp_net() -> Network {
        let mut net = init_weights(&Architecture::mlp(&[4, 5, 3]), 2).unwrap();
        net.round_to_f32();
        net
    }

    #[test]
    fn full_precision_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = fp_net();
        save(&Artifact::FullPrecision(net.clone()), dir.path().join("a"), Provenance::default()).unwrap();
        assert_eq!(load_network(dir.path().join("a")).unwrap(), net);
    }

    #[test]
    fn layout_is_contiguous() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ShadowModel::from_pretrained(fp_net(), 2).unwrap();
        s.canonicalize();
        let m = save(&Artifact::Shadow(s.clone()), dir.path(), Provenance::default()).unwrap();
        let total: usize = m.tensors.iter().map(|d| d.length).sum();
        assert_eq!(total, fs::read(dir.path().join(PAYLOAD_FILE)).unwrap().len());
        assert_eq!(load_shadow(dir.path()).unwrap(), s);
    }

    #[test]
    fn optimizer_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = fp_net();
        let mut state = OptimizerState::new(&net, 0.9, 5e-4).unwrap();
        state.weight_buffers[0].data_mut()[3] = 0.25;
        let art = Artifact::Optimizer {
            architecture: net.architecture().clone(),
            state,
        };
        save(&art, dir.path(), Provenance::default()).unwrap();
        assert_eq!(load(dir.path()).unwrap().0, art);
    }

    #[test]
    fn future_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(&Artifact::FullPrecision(fp_net()), dir.path(), Provenance::default()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, text.replace("\"schema_version\": 1", "\"schema_version\": 2")).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::UnsupportedVersion { found: 2, .. })));
    }

    #[test]
    fn truncated_payload_with_fixed_checksum_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = save(&Artifact::FullPrecision(fp_net()), dir.path(), Provenance::default()).unwrap();
        let ppath = dir.path().join(PAYLOAD_FILE);
        let mut bytes = fs::read(&ppath).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&ppath, &bytes).unwrap();
        m.checksum = hex::encode(Sha256::digest(&bytes));
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Malformed { .. })));
    }
}
