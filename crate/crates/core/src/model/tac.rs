use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::arch::{chunks, pool_spatial, slice_rows, BaseClassifier};
use crate::autodiff::{Graph, ReduceMode, Tensor, Var};
use crate::codebook::{nearest_code, CodeBook, DistanceMetric};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::profile::{
    assemble_profile_var, layer_profile, project, ProfileBatch, ProfileTransform, ProjectionKind, ProjectionStack,
    ProjectionStackConfig, SliceLayer, SliceSpec,
};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TacMode {
    /// Profiles are sliced directly from the base layers, which are trained
    /// by the TAC objective.
    Scratch,
    /// The base is frozen; each tapped layer feeds a trainable projection
    /// stack whose output is sliced.
    Addon,
}

impl FromStr for TacMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(TacMode::Scratch),
            "addon" => Ok(TacMode::Addon),
            other => Err(Error::Input(format!("unknown mode '{other}'"))),
        }
    }
}

/// A tapped layer (1-based position in the architecture) and its slice count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tap {
    pub layer: u32,
    pub n_slices: usize,
}

/// Projection stacks of add-on mode. Each stack maps a tapped layer
/// (spatially averaged for convolutions) to `n_slices * slice_size` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddonSpec {
    pub kind: ProjectionKind,
    pub slice_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TacModel {
    pub base: BaseClassifier,
    pub mode: TacMode,
    pub taps: Vec<Tap>,
    pub spec: SliceSpec,
    pub projections: Vec<ProjectionStack>,
    pub book: CodeBook,
    pub loss: LossConfig,
    pub transform: ProfileTransform,
    pub reduce: ReduceMode,
    /// Input standardization fitted on the training split, if any.
    pub normalization: Option<Normalization>,
}

/// Graph handles of a model's parameters for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub base: Vec<Var>,
    pub projections: Vec<Vec<Var>>,
}

fn tap_channels(base: &BaseClassifier, taps: &[Tap]) -> Result<Vec<usize>> {
    let shapes = base.arch.feature_shapes()?;
    taps.iter()
        .map(|t| {
            let i = t.layer as usize;
            if i == 0 || i > shapes.len() {
                return Err(Error::Spec(format!("tap on layer {} of a {}-layer network", t.layer, shapes.len())));
            }
            Ok(shapes[i - 1][0])
        })
        .collect()
}

fn check_book(book: &CodeBook, spec: &SliceSpec) -> Result<()> {
    if book.code_length() != spec.len() {
        return Err(Error::Spec(format!(
            "codebook length {} differs from profile length {}",
            book.code_length(),
            spec.len()
        )));
    }
    Ok(())
}

impl TacModel {
    pub fn scratch(
        base: BaseClassifier,
        taps: &[Tap],
        book: CodeBook,
        loss: LossConfig,
        transform: ProfileTransform,
    ) -> Result<Self> {
        loss.validate()?;
        let widths = tap_channels(&base, taps)?;
        let spec = SliceSpec::new(
            taps.iter()
                .zip(widths)
                .map(|(t, width)| SliceLayer {
                    id: t.layer,
                    width,
                    n_slices: t.n_slices,
                })
                .collect(),
        )?;
        check_book(&book, &spec)?;
        Ok(Self {
            base,
            mode: TacMode::Scratch,
            taps: taps.to_vec(),
            spec,
            projections: Vec::new(),
            book,
            loss,
            transform,
            reduce: ReduceMode::Sum,
            normalization: None,
        })
    }

    pub fn addon(
        base: BaseClassifier,
        taps: &[Tap],
        addon: AddonSpec,
        book: CodeBook,
        loss: LossConfig,
        transform: ProfileTransform,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        loss.validate()?;
        if addon.slice_size == 0 {
            return Err(Error::Spec("projection slice size must be positive".into()));
        }
        let widths = tap_channels(&base, taps)?;
        let mut layers = Vec::with_capacity(taps.len());
        let mut projections = Vec::with_capacity(taps.len());
        for (t, w) in taps.iter().zip(widths) {
            let out = t.n_slices * addon.slice_size;
            projections.push(ProjectionStack::init(ProjectionStackConfig::new(addon.kind, w, out), rng));
            layers.push(SliceLayer {
                id: t.layer,
                width: out,
                n_slices: t.n_slices,
            });
        }
        let spec = SliceSpec::new(layers)?;
        check_book(&book, &spec)?;
        Ok(Self {
            base,
            mode: TacMode::Addon,
            taps: taps.to_vec(),
            spec,
            projections,
            book,
            loss,
            transform,
            reduce: ReduceMode::Sum,
            normalization: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.book.num_classes()
    }

    /// Registers all parameters on `g`. Only the trainable set of the mode
    /// (base in scratch mode, projections in add-on mode) requires gradients,
    /// and only when `trainable` is set.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let scratch = self.mode == TacMode::Scratch;
        BoundParams {
            base: self.base.bind(g, trainable && scratch),
            projections: self
                .projections
                .iter()
                .map(|s| s.params.iter().map(|p| g.leaf(p.clone(), trainable && !scratch)).collect())
                .collect(),
        }
    }

    pub fn trainable_vars(&self, bound: &BoundParams) -> Vec<Var> {
        match self.mode {
            TacMode::Scratch => bound.base.clone(),
            TacMode::Addon => bound.projections.concat(),
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        match self.mode {
            TacMode::Scratch => self.base.params.iter_mut().collect(),
            TacMode::Addon => self.projections.iter_mut().flat_map(|s| s.params.iter_mut()).collect(),
        }
    }

    /// Raw profiles `[N, L]` and head logits (when the base has a head).
    pub fn forward_profiles(&self, g: &mut Graph, input: Var, bound: &BoundParams) -> Result<(Var, Option<Var>)> {
        let fwd = self.base.forward(g, &bound.base, input)?;
        let mut parts = Vec::with_capacity(self.taps.len());
        for (i, tap) in self.taps.iter().enumerate() {
            let feat = fwd.features[tap.layer as usize - 1];
            let part = match self.mode {
                TacMode::Scratch => layer_profile(g, feat, tap.n_slices, self.reduce)?,
                TacMode::Addon => {
                    let pooled = pool_spatial(g, feat)?;
                    let stack = &self.projections[i];
                    let projected = project(g, pooled, &stack.config, &bound.projections[i])?;
                    layer_profile(g, projected, tap.n_slices, self.reduce)?
                }
            };
            parts.push(part);
        }
        Ok((assemble_profile_var(g, &parts, &self.spec)?, fwd.logits))
    }

    /// Profiles and logits of a whole input tensor, without gradients.
    pub fn profiles(&self, inputs: &Tensor) -> Result<(ProfileBatch, Option<Tensor>)> {
        let n = inputs.shape()[0];
        let l = self.spec.len();
        let mut values = Vec::with_capacity(n * l);
        let mut logits: Option<Vec<f64>> = self.base.arch.head.map(|k| Vec::with_capacity(n * k));
        for (start, len) in chunks(n) {
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let x = g.constant(slice_rows(inputs, start, len)?);
            let (p, z) = self.forward_profiles(&mut g, x, &bound)?;
            values.extend_from_slice(g.value(p).data());
            if let (Some(acc), Some(z)) = (logits.as_mut(), z) {
                acc.extend_from_slice(g.value(z).data());
            }
        }
        let batch = ProfileBatch {
            values: Tensor::new(vec![n, l], values)?,
            segments: self.spec.segments(),
        };
        let logits = match (logits, self.base.arch.head) {
            (Some(v), Some(k)) => Some(Tensor::new(vec![n, k], v)?),
            _ => None,
        };
        Ok((batch, logits))
    }

    pub fn predict(
        &self,
        inputs: &Tensor,
        labels: Option<&[usize]>,
        strategies: &[Strategy],
    ) -> Result<Vec<ScoredPrediction>> {
        let (profiles, logits) = self.profiles(inputs)?;
        score_profiles(&profiles, logits.as_ref(), &self.book, self.transform, labels, strategies)
    }
}

/// Part of the profile a TAC score looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    Full,
    /// One tapped layer, by its 1-based layer number.
    Layer(u32),
}

/// A confidence score. TAC scores are `-distance` between the transformed
/// profile (restricted to the scope) and the nearest code; `msp` is the
/// maximum softmax probability and `mls` the maximum logit of the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    Tac { metric: DistanceMetric, scope: Scope },
    Msp,
    Mls,
}

impl Strategy {
    pub fn tac(metric: DistanceMetric) -> Self {
        Strategy::Tac {
            metric,
            scope: Scope::Full,
        }
    }

    pub fn needs_head(self) -> bool {
        !matches!(self, Strategy::Tac { .. })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Tac {
                metric,
                scope: Scope::Full,
            } => write!(f, "tac-{metric}"),
            Strategy::Tac {
                metric,
                scope: Scope::Layer(l),
            } => write!(f, "tac-{metric}@{l}"),
            Strategy::Msp => f.write_str("msp"),
            Strategy::Mls => f.write_str("mls"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// `msp`, `mls`, `tac-<metric>` or `tac-<metric>@<layer>`, case-insensitive.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "msp" => return Ok(Strategy::Msp),
            "mls" => return Ok(Strategy::Mls),
            _ => {}
        }
        let rest = lower
            .strip_prefix("tac-")
            .ok_or_else(|| Error::Input(format!("unknown strategy '{s}'")))?;
        let (metric, scope) = match rest.split_once('@') {
            Some((m, layer)) => (
                m,
                Scope::Layer(
                    layer
                        .parse()
                        .map_err(|_| Error::Input(format!("bad layer in strategy '{s}'")))?,
                ),
            ),
            None => (rest, Scope::Full),
        };
        Ok(Strategy::Tac {
            metric: metric.parse()?,
            scope,
        })
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

/// One sample scored by one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub sample_id: usize,
    pub label: Option<usize>,
    pub strategy: Strategy,
    pub predicted: usize,
    /// Higher means more confident.
    pub confidence: f64,
}

impl ScoredPrediction {
    pub fn correct(&self) -> Option<bool> {
        self.label.map(|y| y == self.predicted)
    }
}

/// Scores every sample with every strategy, strategy-major order.
pub fn score_profiles(
    profiles: &ProfileBatch,
    logits: Option<&Tensor>,
    book: &CodeBook,
    transform: ProfileTransform,
    labels: Option<&[usize]>,
    strategies: &[Strategy],
) -> Result<Vec<ScoredPrediction>> {
    let n = profiles.len();
    if let Some(y) = labels {
        if y.len() != n {
            return Err(Error::dim(format!("{} labels for {n} profiles", y.len())));
        }
    }
    if profiles.profile_len() != book.code_length() {
        return Err(Error::Spec(format!(
            "profile length {} differs from codebook length {}",
            profiles.profile_len(),
            book.code_length()
        )));
    }
    let points = profiles.map(|x| transform.apply_value(x));
    let mut out = Vec::with_capacity(n * strategies.len());
    for &strategy in strategies {
        let label = |i: usize| labels.map(|y| y[i]);
        match strategy {
            Strategy::Tac { metric, scope } => {
                let range = match scope {
                    Scope::Full => 0..book.code_length(),
                    Scope::Layer(id) => points
                        .segments
                        .iter()
                        .find(|s| s.id == id)
                        .map(|s| s.range())
                        .ok_or_else(|| Error::Spec(format!("layer {id} is not in the slice spec")))?,
                };
                let sub = book.columns(range.clone())?;
                for i in 0..n {
                    let (k, d) = nearest_code(&points.row(i)[range.clone()], &sub, metric)?;
                    out.push(ScoredPrediction {
                        sample_id: i,
                        label: label(i),
                        strategy,
                        predicted: k,
                        confidence: -d,
                    });
                }
            }
            Strategy::Msp | Strategy::Mls => {
                let z = logits.ok_or_else(|| Error::Spec(format!("strategy {strategy} needs a classification head")))?;
                for i in 0..n {
                    let row = z.row(i);
                    let (k, m) = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best });
                    let confidence = if strategy == Strategy::Mls {
                        m
                    } else {
                        1.0 / row.iter().map(|v| (v - m).exp()).sum::<f64>()
                    };
                    out.push(ScoredPrediction {
                        sample_id: i,
                        label: label(i),
                        strategy,
                        predicted: k,
                        confidence,
                    });
                }
            }
        }
    }
    Ok(out)
}
