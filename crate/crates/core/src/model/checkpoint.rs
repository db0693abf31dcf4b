//! Model checkpoints as pretty JSON.
//!
//! Parameters are stored in this order: every base parameter (`layerN.weight`,
//! `layerN.bias`, ..., `head.weight`, `head.bias`), then the parameters of
//! each projection stack in tap order (`projectionN.J`, `J` following
//! `ProjectionStackConfig::param_shapes`). Each blob is the hex encoding of
//! its values as little-endian IEEE-754 doubles, so round trips are exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::{Architecture, BaseClassifier};
use super::tac::{AddonSpec, Tap, TacMode, TacModel};
use crate::autodiff::{ReduceMode, Tensor};
use crate::codebook::CodeBook;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::profile::{ProfileTransform, ProjectionStackConfig, SliceSpec};
use crate::rng::{fnv1a64, SplitMix64};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl ParamBlob {
    fn new(name: String, t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            name,
            shape: t.shape().to_vec(),
            data: hex::encode(bytes),
        }
    }

    fn tensor(&self) -> Result<Tensor> {
        let bytes = hex::decode(&self.data).map_err(|e| Error::Input(format!("parameter {}: {e}", self.name)))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Input(format!("parameter {} has a partial value", self.name)));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub mode: TacMode,
    pub architecture: Architecture,
    pub taps: Vec<Tap>,
    pub slice_spec: SliceSpec,
    pub projections: Vec<ProjectionStackConfig>,
    pub codebook: CodeBook,
    pub loss: LossConfig,
    pub transform: ProfileTransform,
    pub reduce: ReduceMode,
    pub normalization: Option<Normalization>,
    pub params: Vec<ParamBlob>,
}

/// A base classifier on its own (the input of add-on training).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseCheckpoint {
    pub version: u32,
    pub architecture: Architecture,
    pub normalization: Option<Normalization>,
    pub params: Vec<ParamBlob>,
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("checkpoint serializes");
    s.push('\n');
    s
}

fn check_version(v: u32) -> Result<()> {
    if v == CHECKPOINT_VERSION {
        Ok(())
    } else {
        Err(Error::Input(format!("unsupported checkpoint version {v}")))
    }
}

fn base_blobs(base: &BaseClassifier) -> Vec<ParamBlob> {
    let names = base.arch.param_names().expect("valid architecture");
    names.into_iter().zip(&base.params).map(|(n, p)| ParamBlob::new(n, p)).collect()
}

fn load_base(arch: Architecture, blobs: &[ParamBlob]) -> Result<BaseClassifier> {
    let names = arch.param_names()?;
    if blobs.len() < names.len() {
        return Err(Error::Input("checkpoint is missing base parameters".into()));
    }
    for (n, b) in names.iter().zip(blobs) {
        if *n != b.name {
            return Err(Error::Input(format!("expected parameter {n}, found {}", b.name)));
        }
    }
    let params = blobs[..names.len()].iter().map(ParamBlob::tensor).collect::<Result<Vec<_>>>()?;
    BaseClassifier::from_params(arch, params)
}

/// FNV-1a (64-bit) over the little-endian bytes of all values, as hex.
pub fn params_checksum(params: &[Tensor]) -> String {
    let bytes: Vec<u8> = params
        .iter()
        .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    format!("{:016x}", fnv1a64(&bytes))
}

impl BaseClassifier {
    pub fn to_checkpoint(&self, normalization: Option<&Normalization>) -> BaseCheckpoint {
        BaseCheckpoint {
            version: CHECKPOINT_VERSION,
            architecture: self.arch.clone(),
            normalization: normalization.cloned(),
            params: base_blobs(self),
        }
    }

    pub fn save(&self, normalization: Option<&Normalization>, path: &Path) -> Result<()> {
        std::fs::write(path, to_json(&self.to_checkpoint(normalization)))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Normalization>)> {
        let ck: BaseCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        check_version(ck.version)?;
        if ck.params.len() != ck.architecture.param_shapes()?.len() {
            return Err(Error::Input("base checkpoint has extra parameters".into()));
        }
        Ok((load_base(ck.architecture, &ck.params)?, ck.normalization))
    }
}

impl TacModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = base_blobs(&self.base);
        for (tap, stack) in self.taps.iter().zip(&self.projections) {
            for (j, p) in stack.params.iter().enumerate() {
                params.push(ParamBlob::new(format!("projection{}.{j}", tap.layer), p));
            }
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            mode: self.mode,
            architecture: self.base.arch.clone(),
            taps: self.taps.clone(),
            slice_spec: self.spec.clone(),
            projections: self.projections.iter().map(|s| s.config.clone()).collect(),
            codebook: self.book.clone(),
            loss: self.loss.clone(),
            transform: self.transform,
            reduce: self.reduce,
            normalization: self.normalization.clone(),
            params,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        check_version(ck.version)?;
        let base = load_base(ck.architecture, &ck.params)?;
        let n_base = base.params.len();
        let mut model = match ck.mode {
            TacMode::Scratch => TacModel::scratch(base, &ck.taps, ck.codebook, ck.loss, ck.transform)?,
            TacMode::Addon => {
                let first = ck
                    .projections
                    .first()
                    .ok_or_else(|| Error::Input("add-on checkpoint without projections".into()))?;
                let addon = AddonSpec {
                    kind: first.kind,
                    slice_size: first.output_width / ck.taps[0].n_slices.max(1),
                };
                let mut rng = SplitMix64::new(0);
                TacModel::addon(base, &ck.taps, addon, ck.codebook, ck.loss, ck.transform, &mut rng)?
            }
        };
        if model.spec != ck.slice_spec {
            return Err(Error::Spec("stored slice spec disagrees with the taps".into()));
        }
        let configs: Vec<_> = model.projections.iter().map(|s| s.config.clone()).collect();
        if configs != ck.projections {
            return Err(Error::Spec("stored projection stacks disagree with the taps".into()));
        }
        let mut rest = ck.params[n_base..].iter();
        for (tap, stack) in model.taps.iter().zip(model.projections.iter_mut()) {
            for (j, p) in stack.params.iter_mut().enumerate() {
                let blob = rest
                    .next()
                    .ok_or_else(|| Error::Input("checkpoint is missing projection parameters".into()))?;
                let expected = format!("projection{}.{j}", tap.layer);
                let t = blob.tensor()?;
                if blob.name != expected || t.shape() != p.shape() {
                    return Err(Error::Input(format!("expected parameter {expected}, found {}", blob.name)));
                }
                *p = t;
            }
        }
        if rest.next().is_some() {
            return Err(Error::Input("checkpoint has extra parameters".into()));
        }
        model.reduce = ck.reduce;
        model.normalization = ck.normalization;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        to_json(&self.to_checkpoint())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
