//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `FGANCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! the tensor blobs as raw little-endian `f32`. The manifest lists every
//! blob with its shape, dtype, offset and SHA-256.
//!
//! Weights checkpoints hold network parameters only. Resume checkpoints add
//! the Adam moments (`adam.m.<param>`, `adam.v.<param>`), the generator
//! average (`ema.<param>`) when enabled, and the run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use facialgan_core::networks::{NetConfig, NetId, NetworkParams};
use facialgan_core::optim::Adam;
use facialgan_core::params::ParamStore;
use facialgan_core::tensor::Tensor;
use facialgan_core::training::{TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::trainlog::LogLine;

pub const MAGIC: &[u8; 8] = b"FGANCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

/// How the discriminator is updated each iteration, recorded for readers.
pub const D_UPDATE_MODE: &str = "two sequential updates: latent-guided fake, then reference-guided fake";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Weights,
    Resume,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub image_size: usize,
    pub classes: usize,
    pub style_dim: usize,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub mlp_hidden: usize,
    pub mlp_shared_layers: usize,
    pub mlp_head_layers: usize,
    pub res_blocks: usize,
}

impl From<&NetConfig> for NetShape {
    fn from(c: &NetConfig) -> Self {
        Self {
            image_size: c.image_size,
            classes: c.classes,
            style_dim: c.style_dim,
            latent_dim: c.latent_dim,
            base_channels: c.base_channels,
            max_channels: c.max_channels,
            mlp_hidden: c.mlp_hidden,
            mlp_shared_layers: c.mlp_shared_layers,
            mlp_head_layers: c.mlp_head_layers,
            res_blocks: c.res_blocks,
        }
    }
}

impl From<&NetShape> for NetConfig {
    fn from(s: &NetShape) -> Self {
        Self {
            image_size: s.image_size,
            classes: s.classes,
            style_dim: s.style_dim,
            latent_dim: s.latent_dim,
            base_channels: s.base_channels,
            max_channels: s.max_channels,
            mlp_hidden: s.mlp_hidden,
            mlp_shared_layers: s.mlp_shared_layers,
            mlp_head_layers: s.mlp_head_layers,
            res_blocks: s.res_blocks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub best_epoch: usize,
    pub best_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// Completed training iterations.
    pub iteration: u64,
    pub net: NetShape,
    /// Networks present, by parameter prefix.
    pub networks: Vec<String>,
    pub config: Option<RunConfig>,
    pub d_update: String,
    /// Update counts of the G, F, E and D optimisers.
    pub optimizer_steps: BTreeMap<String, u64>,
    pub created_unix: u64,
    pub losses: Option<LogLine>,
    pub segmenter_training: Option<SegmenterTraining>,
}

impl Metadata {
    pub fn new(net: &NetConfig, networks: &[NetId]) -> Self {
        Self {
            iteration: 0,
            net: net.into(),
            networks: networks.iter().map(|n| n.prefix().to_string()).collect(),
            config: None,
            d_update: D_UPDATE_MODE.to_string(),
            optimizer_steps: BTreeMap::new(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            losses: None,
            segmenter_training: None,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        (&self.net).into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: Kind,
    metadata: Metadata,
    tensors: Vec<BlobEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub metadata: Metadata,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

const TRAINED: [NetId; 4] = [NetId::Generator, NetId::Mapping, NetId::Encoder, NetId::Discriminator];

fn opt_of(state: &TrainState, id: NetId) -> &Adam<f32> {
    state.optimizer(id).expect("trained network")
}

impl Checkpoint {
    /// All five networks, for serving and evaluation.
    pub fn weights(params: &NetworkParams<f32>, iteration: u64) -> Self {
        let mut metadata = Metadata::new(&params.config, &NetId::ALL);
        metadata.iteration = iteration;
        let mut tensors = BTreeMap::new();
        for id in NetId::ALL {
            for (k, v) in params.net(id).iter() {
                tensors.insert(k.clone(), v.clone());
            }
        }
        Self {
            kind: Kind::Weights,
            metadata,
            tensors,
        }
    }

    /// A trained segmenter on its own.
    pub fn segmenter(net: &NetConfig, params: &ParamStore<f32>, training: SegmenterTraining) -> Self {
        let mut metadata = Metadata::new(net, &[NetId::Segmenter]);
        metadata.segmenter_training = Some(training);
        Self {
            kind: Kind::Weights,
            metadata,
            tensors: params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    /// Everything needed to continue training bit-exactly.
    pub fn resume(state: &TrainState, run: &RunConfig, losses: Option<LogLine>) -> Self {
        let mut ck = Self::weights(&state.params, state.iteration);
        ck.kind = Kind::Resume;
        ck.metadata.config = Some(run.clone());
        ck.metadata.losses = losses;
        for id in TRAINED {
            let opt = opt_of(state, id);
            ck.metadata.optimizer_steps.insert(id.prefix().to_string(), opt.step);
            for (k, v) in opt.m.iter() {
                ck.tensors.insert(format!("adam.m.{k}"), v.clone());
            }
            for (k, v) in opt.v.iter() {
                ck.tensors.insert(format!("adam.v.{k}"), v.clone());
            }
        }
        if let Some(ema) = &state.ema {
            for (k, v) in ema.iter() {
                ck.tensors.insert(format!("ema.{k}"), v.clone());
            }
        }
        ck
    }

    /// Weights-only copy of a resume checkpoint.
    pub fn to_weights(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| is_param_name(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut metadata = self.metadata.clone();
        metadata.optimizer_steps.clear();
        Self {
            kind: Kind::Weights,
            metadata,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let start = blobs.len();
            for v in t.data() {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(BlobEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: start as u64,
                length: (blobs.len() - start) as u64,
                sha256: format!("{:x}", Sha256::digest(&blobs[start..])),
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptFile(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::CorruptFile("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[HEADER_LEN..];
        if mlen > body.len() {
            return Err(Error::CorruptFile("manifest runs past end of file".into()));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| Error::CorruptFile(format!("manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(Error::CorruptFile("header and manifest versions differ".into()));
        }
        let data = &body[mlen..];
        let mut tensors = BTreeMap::new();
        let mut expected_end = 0u64;
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::CorruptFile(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.length != 4 * numel as u64 || e.offset != expected_end {
                return Err(Error::CorruptFile(format!("{}: blob extent disagrees with shape", e.name)));
            }
            let end = e.offset + e.length;
            if end as usize > data.len() {
                return Err(Error::CorruptFile(format!("{}: blob truncated", e.name)));
            }
            let blob = &data[e.offset as usize..end as usize];
            if format!("{:x}", Sha256::digest(blob)) != e.sha256 {
                return Err(Error::CorruptFile(format!("{}: checksum mismatch", e.name)));
            }
            let values = blob
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(e.name.clone(), Tensor::new(&e.shape, values)).is_some() {
                return Err(Error::CorruptFile(format!("{}: duplicate tensor", e.name)));
            }
            expected_end = end;
        }
        if expected_end as usize != data.len() {
            return Err(Error::CorruptFile("trailing bytes after the last blob".into()));
        }
        Ok(Self {
            kind: manifest.kind,
            metadata: manifest.metadata,
            tensors,
        })
    }

    /// Write atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Reject checkpoints whose networks were built for another config.
    pub fn check_net(&self, expected: &NetConfig) -> Result<()> {
        let found = self.metadata.net_config();
        if &found != expected {
            return Err(Error::IncompatibleConfig(format!(
                "checkpoint networks are {found:?}, expected {expected:?}"
            )));
        }
        Ok(())
    }

    fn store(&self, prefix: &str) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for (k, v) in &self.tensors {
            if k.starts_with(prefix) {
                s.insert(&k[prefix.len()..], v.clone());
            }
        }
        s
    }

    fn net_store(&self, id: NetId) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let p = format!("{}.", id.prefix());
        for (k, v) in &self.tensors {
            if k.starts_with(&p) {
                s.insert(k.clone(), v.clone());
            }
        }
        s
    }

    /// All five networks, checked against the layout their config implies.
    pub fn network_params(&self) -> Result<NetworkParams<f32>> {
        let config = self.metadata.net_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = NetworkParams::<f32>::init(config.clone(), &mut rng)
            .map_err(|e| Error::IncompatibleConfig(e.to_string()))?;
        let mut out = reference.clone();
        for id in NetId::ALL {
            let s = self.net_store(id);
            s.check_layout(reference.net(id))
                .map_err(|e| Error::IncompatibleConfig(format!("{}: {e}", id.prefix())))?;
            if !s.is_finite() {
                return Err(Error::CorruptFile(format!("{} holds non-finite values", id.prefix())));
            }
            *out.net_mut(id) = s;
        }
        Ok(out)
    }

    /// The segmenter parameters, checked against `expected`.
    pub fn segmenter_params(&self, expected: &NetConfig) -> Result<ParamStore<f32>> {
        let mut seg_only = expected.clone();
        // The segmenter does not depend on the style or mapping sizes.
        let found = self.metadata.net_config();
        seg_only.style_dim = found.style_dim;
        seg_only.latent_dim = found.latent_dim;
        seg_only.mlp_hidden = found.mlp_hidden;
        seg_only.mlp_shared_layers = found.mlp_shared_layers;
        seg_only.mlp_head_layers = found.mlp_head_layers;
        seg_only.res_blocks = found.res_blocks;
        self.check_net(&seg_only)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = NetworkParams::<f32>::init(expected.clone(), &mut rng)?;
        let s = self.net_store(NetId::Segmenter);
        s.check_layout(&reference.segmenter)
            .map_err(|e| Error::IncompatibleConfig(format!("S: {e}")))?;
        Ok(s)
    }

    /// Rebuild the training state. `cfg` must describe the same networks.
    pub fn train_state(&self, cfg: &TrainConfig) -> Result<TrainState> {
        if self.kind != Kind::Resume {
            return Err(Error::IncompatibleConfig("a weights-only checkpoint cannot resume training".into()));
        }
        self.check_net(&cfg.net)?;
        let params = self.network_params()?;
        let mut state = TrainState::new(cfg, params.segmenter.clone())?;
        state.params = params;
        state.iteration = self.metadata.iteration;
        for id in TRAINED {
            let step = *self
                .metadata
                .optimizer_steps
                .get(id.prefix())
                .ok_or_else(|| Error::CorruptFile(format!("missing optimizer step of {}", id.prefix())))?;
            let m = self.store("adam.m.");
            let v = self.store("adam.v.");
            let p = format!("{}.", id.prefix());
            let pick = |s: &ParamStore<f32>| {
                let mut o = ParamStore::new();
                for (k, t) in s.iter() {
                    if k.starts_with(&p) {
                        o.insert(k.clone(), t.clone());
                    }
                }
                o
            };
            let opt = Adam {
                config: cfg.adam(id).expect("trained network"),
                step,
                m: pick(&m),
                v: pick(&v),
            };
            match id {
                NetId::Generator => state.opt_g = opt,
                NetId::Mapping => state.opt_f = opt,
                NetId::Encoder => state.opt_e = opt,
                NetId::Discriminator => state.opt_d = opt,
                NetId::Segmenter => unreachable!(),
            }
        }
        let ema = self.store("ema.");
        state.ema = match (cfg.ema_decay, ema.is_empty()) {
            (Some(_), false) => Some(ema),
            (Some(_), true) => Some(state.params.generator.clone()),
            (None, _) => None,
        };
        Ok(state)
    }
}

fn is_param_name(name: &str) -> bool {
    name.split('.')
        .next()
        .and_then(NetId::from_prefix)
        .is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use facialgan_core::toyset::toy_source;
    use facialgan_core::training::{draw_iteration, train_step, DomainIndex};

    fn tiny_net() -> NetConfig {
        NetConfig {
            base_channels: 4,
            max_channels: 8,
            mlp_hidden: 16,
            style_dim: 8,
            latent_dim: 4,
            mlp_shared_layers: 1,
            mlp_head_layers: 1,
            ..NetConfig::desk(16)
        }
    }

    fn trained_state(steps: u64) -> (TrainState, TrainConfig) {
        let cfg = TrainConfig {
            batch_size: 2,
            total_iters: 10,
            ..TrainConfig::new(tiny_net())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seg = NetworkParams::<f32>::init(cfg.net.clone(), &mut rng).unwrap().segmenter;
        let mut st = TrainState::new(&cfg, seg).unwrap();
        let src = toy_source(4, 16, 0).unwrap();
        let dom = DomainIndex::build(&src).unwrap();
        for i in 0..steps {
            let inp = draw_iteration(&src, &dom, &cfg, i).unwrap();
            train_step(&mut st, &cfg, &inp).unwrap();
        }
        (st, cfg)
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let (st, _) = trained_state(1);
        let ck = Checkpoint::weights(&st.params, 1);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.network_params().unwrap(), st.params);
    }

    #[test]
    fn resume_restores_optimizer_state() {
        let (st, cfg) = trained_state(2);
        let run = RunConfig::desk();
        let ck = Checkpoint::resume(&st, &run, None);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let restored = back.train_state(&cfg).unwrap();
        assert_eq!(restored, st);
        assert_eq!(back.metadata.optimizer_steps["F"], 2);
        assert_eq!(back.metadata.config.as_ref(), Some(&run));
        let w = back.to_weights();
        assert!(w.tensors.keys().all(|k| !k.starts_with("adam.")));
        assert!(matches!(w.train_state(&cfg), Err(Error::IncompatibleConfig(_))));
    }

    #[test]
    fn corruption_detected() {
        let (st, _) = trained_state(0);
        let bytes = Checkpoint::weights(&st.params, 0).to_bytes();
        for cut in [0, 5, HEADER_LEN + 3, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptFile(_))),
                "cut at {cut}"
            );
        }
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptFile(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn incompatible_config_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = NetworkParams::<f32>::init(NetConfig::desk(64), &mut rng).unwrap();
        let ck = Checkpoint::weights(&params, 0);
        assert!(ck.check_net(&NetConfig::desk(64)).is_ok());
        assert!(matches!(ck.check_net(&NetConfig::desk(256)), Err(Error::IncompatibleConfig(_))));
        assert!(matches!(
            ck.segmenter_params(&NetConfig::desk(256)),
            Err(Error::IncompatibleConfig(_))
        ));
        let cfg = TrainConfig::new(NetConfig::desk(256));
        let resume = Checkpoint {
            kind: Kind::Resume,
            ..ck
        };
        assert!(matches!(resume.train_state(&cfg), Err(Error::IncompatibleConfig(_))));
    }

    #[test]
    fn segmenter_checkpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = tiny_net();
        let params = NetworkParams::<f32>::init(net.clone(), &mut rng).unwrap();
        let ck = Checkpoint::segmenter(
            &net,
            &params.segmenter,
            SegmenterTraining {
                epochs: 50,
                batch_size: 32,
                lr: 1e-2,
                best_epoch: 3,
                best_accuracy: 90.0,
            },
        );
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let other_style = NetConfig {
            style_dim: 64,
            ..net.clone()
        };
        assert_eq!(back.segmenter_params(&other_style).unwrap(), params.segmenter);
        assert!(back.network_params().is_err());
        let t = back.metadata.segmenter_training.unwrap();
        assert_eq!((t.epochs, t.batch_size, t.lr), (50, 32, 1e-2));
    }
}
