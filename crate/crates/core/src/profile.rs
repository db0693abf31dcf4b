//! Activation profiles: slicing, reduction, assembly and projection stacks.
//!
//! A tapped layer output of shape `[N, C, ...]` is cut along the channel
//! axis into `n` contiguous groups of `s = C / n` channels (integer
//! division, the trailing `C - n*s` channels are ignored). Each group is
//! reduced over its channels and every remaining axis, giving `[N, n]`.
//! Profiles of all tapped layers are concatenated in slice-spec order.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ReduceMode, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Epsilon inside the normalization of the larger projection stacks.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceLayer {
    pub id: u32,
    pub width: usize,
    pub n_slices: usize,
}

impl SliceLayer {
    pub fn slice_size(&self) -> usize {
        self.width / self.n_slices
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    layers: Vec<SliceLayer>,
}

impl SliceSpec {
    pub fn new(layers: Vec<SliceLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Spec("slice spec has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.n_slices == 0 || l.width < l.n_slices {
                return Err(Error::Spec(format!(
                    "layer {} has width {} and {} slices",
                    l.id, l.width, l.n_slices
                )));
            }
            if layers[..i].iter().any(|o| o.id == l.id) {
                return Err(Error::Spec(format!("duplicate layer id {}", l.id)));
            }
        }
        Ok(Self { layers })
    }

    /// Same slice count on every layer; ids are 1-based positions.
    pub fn uniform(widths: &[usize], n_slices: usize) -> Result<Self> {
        Self::new(
            widths
                .iter()
                .enumerate()
                .map(|(i, &width)| SliceLayer {
                    id: i as u32 + 1,
                    width,
                    n_slices,
                })
                .collect(),
        )
    }

    pub fn layers(&self) -> &[SliceLayer] {
        &self.layers
    }

    /// Total profile length `L`.
    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.n_slices).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut start = 0;
        self.layers
            .iter()
            .map(|l| {
                let s = Segment {
                    id: l.id,
                    start,
                    end: start + l.n_slices,
                };
                start += l.n_slices;
                s
            })
            .collect()
    }

    pub fn segment(&self, id: u32) -> Result<Range<usize>> {
        self.segments()
            .into_iter()
            .find(|s| s.id == id)
            .map(|s| s.range())
            .ok_or_else(|| Error::Spec(format!("layer {id} is not in the slice spec")))
    }
}

/// Map from raw profiles to the space where codes live, used for every
/// profile-to-code distance. `l_bin` always sees raw profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileTransform {
    #[default]
    Sigmoid,
    Raw,
}

impl ProfileTransform {
    pub fn apply(self, g: &mut Graph, profiles: Var) -> Var {
        match self {
            ProfileTransform::Sigmoid => g.sigmoid(profiles),
            ProfileTransform::Raw => profiles,
        }
    }

    pub fn apply_value(self, x: f64) -> f64 {
        match self {
            ProfileTransform::Sigmoid => crate::autodiff::sigmoid(x),
            ProfileTransform::Raw => x,
        }
    }
}

impl std::str::FromStr for ProfileTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(ProfileTransform::Sigmoid),
            "raw" => Ok(ProfileTransform::Raw),
            other => Err(Error::Input(format!("unknown profile transform '{other}'"))),
        }
    }
}

/// One sample's profile with its per-layer segments.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    pub values: Vec<f64>,
    pub segments: Vec<Segment>,
}

/// `[N, L]` profiles sharing one segment layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileBatch {
    pub values: Tensor,
    pub segments: Vec<Segment>,
}

impl ProfileBatch {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn profile_len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn profile(&self, i: usize) -> ActivationProfile {
        ActivationProfile {
            values: self.row(i).to_vec(),
            segments: self.segments.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.map(f),
            segments: self.segments.clone(),
        }
    }
}

/// Slice/reduce one layer's features `[N, C, ...]` into `[N, n_slices]`.
pub fn layer_profile(g: &mut Graph, features: Var, n_slices: usize, mode: ReduceMode) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    if shape.len() < 2 {
        return Err(Error::Spec(format!("features of shape {shape:?} have no channel axis")));
    }
    let (n, c) = (shape[0], shape[1]);
    if n_slices == 0 || n_slices > c {
        return Err(Error::Spec(format!("cannot cut {c} channels into {n_slices} slices")));
    }
    if mode == ReduceMode::Max {
        return Err(Error::Spec("profiles reduce by sum or mean".into()));
    }
    let size = c / n_slices;
    let kept = if size * n_slices < c {
        g.narrow(features, 1, 0, size * n_slices)?
    } else {
        features
    };
    let rest: usize = shape[2..].iter().product();
    let grouped = g.reshape(kept, &[n, n_slices, size * rest])?;
    g.reduce(grouped, &[2], mode)
}

/// Tensor-in, tensor-out form of [`layer_profile`].
pub fn layer_profile_tensor(features: &Tensor, n_slices: usize, mode: ReduceMode) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let p = layer_profile(&mut g, f, n_slices, mode)?;
    Ok(g.value(p).clone())
}

fn check_layers(shapes: &[&[usize]], spec: &SliceSpec) -> Result<()> {
    if shapes.len() != spec.layers().len() {
        return Err(Error::Spec(format!(
            "{} layer profiles for a spec of {} layers",
            shapes.len(),
            spec.layers().len()
        )));
    }
    for (s, l) in shapes.iter().zip(spec.layers()) {
        if s.len() != 2 || s[1] != l.n_slices || s[0] != shapes[0][0] {
            return Err(Error::Spec(format!(
                "layer {} profile has shape {s:?}, expected [N, {}]",
                l.id, l.n_slices
            )));
        }
    }
    Ok(())
}

/// Concatenates per-layer profiles `[N, n_i]` on the graph.
pub fn assemble_profile_var(g: &mut Graph, layers: &[Var], spec: &SliceSpec) -> Result<Var> {
    let shapes: Vec<Vec<usize>> = layers.iter().map(|&v| g.shape(v).to_vec()).collect();
    check_layers(&shapes.iter().map(Vec::as_slice).collect::<Vec<_>>(), spec)?;
    if layers.len() == 1 {
        return Ok(layers[0]);
    }
    g.concat(layers, 1)
}

pub fn assemble_profile(layers: &[Tensor], spec: &SliceSpec) -> Result<ProfileBatch> {
    check_layers(&layers.iter().map(Tensor::shape).collect::<Vec<_>>(), spec)?;
    let n = layers[0].shape()[0];
    let mut data = Vec::with_capacity(n * spec.len());
    for i in 0..n {
        for l in layers {
            data.extend_from_slice(l.row(i));
        }
    }
    Ok(ProfileBatch {
        values: Tensor::new(vec![n, spec.len()], data)?,
        segments: spec.segments(),
    })
}

pub fn sub_profile(profile: &ActivationProfile, id: u32) -> Result<&[f64]> {
    let seg = profile
        .segments
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::Spec(format!("layer {id} is not in the profile")))?;
    Ok(&profile.values[seg.range()])
}

// ------------------------------------------------------------ projections

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionKind {
    Small,
    Large,
    VeryLarge,
    XLarge,
    #[serde(rename = "2x-large")]
    TwoXLarge,
}

impl ProjectionKind {
    pub fn depth(self) -> usize {
        match self {
            ProjectionKind::Small => 1,
            ProjectionKind::Large => 2,
            ProjectionKind::VeryLarge | ProjectionKind::XLarge => 3,
            ProjectionKind::TwoXLarge => 5,
        }
    }

    pub fn normalized(self) -> bool {
        matches!(self, ProjectionKind::XLarge | ProjectionKind::TwoXLarge)
    }

    pub fn name(self) -> &'static str {
        match self {
            ProjectionKind::Small => "small",
            ProjectionKind::Large => "large",
            ProjectionKind::VeryLarge => "very-large",
            ProjectionKind::XLarge => "x-large",
            ProjectionKind::TwoXLarge => "2x-large",
        }
    }
}

impl std::str::FromStr for ProjectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ProjectionKind::Small,
            ProjectionKind::Large,
            ProjectionKind::VeryLarge,
            ProjectionKind::XLarge,
            ProjectionKind::TwoXLarge,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Input(format!("unknown projection stack '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionStackConfig {
    pub kind: ProjectionKind,
    pub input_width: usize,
    pub hidden_width: usize,
    pub output_width: usize,
}

impl ProjectionStackConfig {
    pub fn new(kind: ProjectionKind, input_width: usize, output_width: usize) -> Self {
        Self {
            kind,
            input_width,
            hidden_width: input_width,
            output_width,
        }
    }

    pub fn depth(&self) -> usize {
        self.kind.depth()
    }

    pub fn normalized(&self) -> bool {
        self.kind.normalized()
    }

    /// (in, out) of each fully connected layer.
    pub fn dense_shapes(&self) -> Vec<(usize, usize)> {
        let d = self.depth();
        (0..d)
            .map(|i| {
                let input = if i == 0 { self.input_width } else { self.hidden_width };
                let output = if i + 1 == d { self.output_width } else { self.hidden_width };
                (input, output)
            })
            .collect()
    }

    /// Parameter shapes in storage order: `[in-norm gain, in-norm shift]`
    /// when normalized, then `weight [in×out], bias [out]` per layer, then
    /// `[out-norm gain, out-norm shift]` when normalized.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        if self.normalized() {
            shapes.push(vec![self.input_width]);
            shapes.push(vec![self.input_width]);
        }
        for (i, o) in self.dense_shapes() {
            shapes.push(vec![i, o]);
            shapes.push(vec![o]);
        }
        if self.normalized() {
            shapes.push(vec![self.output_width]);
            shapes.push(vec![self.output_width]);
        }
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    pub config: ProjectionStackConfig,
    pub params: Vec<Tensor>,
}

impl ProjectionStack {
    /// Fan-in scaled uniform weights, zero biases, unit gains, zero shifts.
    pub fn init(config: ProjectionStackConfig, rng: &mut SplitMix64) -> Self {
        let mut params = Vec::new();
        if config.normalized() {
            params.push(Tensor::ones(&[config.input_width]));
            params.push(Tensor::zeros(&[config.input_width]));
        }
        for (i, o) in config.dense_shapes() {
            params.push(crate::model::init_weight(&[i, o], i, rng));
            params.push(Tensor::zeros(&[o]));
        }
        if config.normalized() {
            params.push(Tensor::ones(&[config.output_width]));
            params.push(Tensor::zeros(&[config.output_width]));
        }
        Self { config, params }
    }
}

/// Per-sample standardization over the feature axis with learned gain/shift.
pub fn layer_norm(g: &mut Graph, x: Var, gain: Var, shift: Var) -> Result<Var> {
    let [n, _w] = g.shape(x)[..] else {
        return Err(Error::dim("layer_norm expects [N, W]"));
    };
    let mean = g.reduce(x, &[1], ReduceMode::Mean)?;
    let mean = g.reshape(mean, &[n, 1])?;
    let centered = g.sub(x, mean)?;
    let sq = g.square(centered);
    let var = g.reduce(sq, &[1], ReduceMode::Mean)?;
    let var = g.reshape(var, &[n, 1])?;
    let var = g.add_scalar(var, NORM_EPS);
    let std = g.sqrt(var);
    let z = g.div(centered, std)?;
    let z = g.mul(z, gain)?;
    g.add(z, shift)
}

/// Runs a projection stack on `features [N, W]`. The input is detached,
/// so no gradient reaches whatever produced `features`.
pub fn project(g: &mut Graph, features: Var, config: &ProjectionStackConfig, params: &[Var]) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 || shape[1] != config.input_width {
        return Err(Error::dim(format!(
            "projection expects [N, {}], got {shape:?}",
            config.input_width
        )));
    }
    let expected = config.param_shapes();
    if params.len() != expected.len()
        || params.iter().zip(&expected).any(|(&p, s)| g.shape(p) != s.as_slice())
    {
        return Err(Error::dim("projection parameters do not match the stack config"));
    }
    let mut x = g.detach(features);
    let mut p = params.iter().copied();
    let mut next = || p.next().expect("checked above");
    if config.normalized() {
        let (gain, shift) = (next(), next());
        x = layer_norm(g, x, gain, shift)?;
    }
    for _ in 0..config.depth() {
        let (w, b) = (next(), next());
        let h = g.matmul(x, w)?;
        let h = g.add(h, b)?;
        x = g.relu(h);
    }
    if config.normalized() {
        let (gain, shift) = (next(), next());
        x = layer_norm(g, x, gain, shift)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck_many;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn hand_examples() {
        let f = t(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]);
        let p = layer_profile_tensor(&f, 2, ReduceMode::Sum).unwrap();
        assert_eq!(p.data(), &[3.0, 7.0]);

        let z = Tensor::zeros(&[3, 6, 2, 2]);
        let p = layer_profile_tensor(&z, 3, ReduceMode::Sum).unwrap();
        assert_eq!(p, Tensor::zeros(&[3, 3]));

        let f = t(&[1, 5], &[1.0, 1.0, 1.0, 1.0, 100.0]);
        let p = layer_profile_tensor(&f, 2, ReduceMode::Sum).unwrap();
        assert_eq!(p.data(), &[2.0, 2.0]);

        assert!(matches!(
            layer_profile_tensor(&f, 6, ReduceMode::Sum),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn mean_option() {
        let f = t(&[1, 4, 1, 2], &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
        let p = layer_profile_tensor(&f, 2, ReduceMode::Mean).unwrap();
        assert_eq!(p.data(), &[1.5, 3.5]);
    }

    /// Direct loop oracle for the slice/reduce of `[N, C, R]` features.
    fn loop_oracle(f: &Tensor, n_slices: usize) -> Vec<f64> {
        let (n, c) = (f.shape()[0], f.shape()[1]);
        let rest: usize = f.shape()[2..].iter().product();
        let s = c / n_slices;
        let mut out = vec![0.0; n * n_slices];
        for i in 0..n {
            for l in 0..n_slices {
                for ch in l * s..(l + 1) * s {
                    for r in 0..rest {
                        out[i * n_slices + l] += f.data()[(i * c + ch) * rest + r];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gradient_only_reaches_contributing_channels() {
        let mut g = Graph::new();
        let f = g.param(Tensor::ones(&[2, 5, 2]));
        let p = layer_profile(&mut g, f, 2, ReduceMode::Sum).unwrap();
        let s = g.sum_all(p);
        let grads = g.backward(s).unwrap();
        let gr = grads.get(f).unwrap();
        for i in 0..2 {
            for ch in 0..5 {
                for r in 0..2 {
                    let expect = if ch < 4 { 1.0 } else { 0.0 };
                    assert_eq!(gr.data()[(i * 5 + ch) * 2 + r], expect);
                }
            }
        }
    }

    #[test]
    fn assemble_and_split() {
        let spec = SliceSpec::new(vec![
            SliceLayer { id: 1, width: 4, n_slices: 2 },
            SliceLayer { id: 2, width: 3, n_slices: 1 },
        ])
        .unwrap();
        let b = assemble_profile(&[t(&[1, 2], &[1.0, 2.0]), t(&[1, 1], &[3.0])], &spec).unwrap();
        assert_eq!(b.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(b.segments[0].range(), 0..2);
        let p = b.profile(0);
        assert_eq!(sub_profile(&p, 2).unwrap(), &[3.0]);
        assert!(matches!(sub_profile(&p, 9), Err(Error::Spec(_))));
        assert!(assemble_profile(&[t(&[1, 2], &[1.0, 2.0])], &spec).is_err());

        let single = SliceSpec::uniform(&[8], 4).unwrap();
        let x = Tensor::from_fn(&[2, 4], |i| i as f64);
        let b = assemble_profile(std::slice::from_ref(&x), &single).unwrap();
        assert_eq!(b.values, x);
        assert_eq!(sub_profile(&b.profile(1), 1).unwrap(), x.row(1));
    }

    #[test]
    fn spec_validation() {
        assert!(SliceSpec::uniform(&[4, 3], 4).is_err());
        assert!(SliceSpec::uniform(&[], 4).is_err());
        let s = SliceSpec::uniform(&[64, 128, 256, 512], 16).unwrap();
        assert_eq!(s.len(), 64);
        assert_eq!(s.segment(3).unwrap(), 32..48);
        assert_eq!(s.layers()[3].slice_size(), 32);
    }

    #[test]
    fn projection_depths() {
        let depth = |k: ProjectionKind| k.depth();
        assert_eq!(
            [
                ProjectionKind::Small,
                ProjectionKind::Large,
                ProjectionKind::VeryLarge,
                ProjectionKind::XLarge,
                ProjectionKind::TwoXLarge
            ]
            .map(depth),
            [1, 2, 3, 3, 5]
        );
        assert!(ProjectionKind::XLarge.normalized() && !ProjectionKind::VeryLarge.normalized());
        assert_eq!("2x-large".parse::<ProjectionKind>().unwrap(), ProjectionKind::TwoXLarge);
    }

    #[test]
    fn identity_small_stack_is_relu() {
        let cfg = ProjectionStackConfig::new(ProjectionKind::Small, 3, 3);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, -2.0, 0.5, -0.1, 3.0, 0.0]));
        let w = g.param(eye);
        let b = g.param(Tensor::zeros(&[3]));
        let y = project(&mut g, x, &cfg, &[w, b]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.5, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = SplitMix64::new(1);
        for kind in [ProjectionKind::Small, ProjectionKind::VeryLarge, ProjectionKind::XLarge, ProjectionKind::TwoXLarge] {
            let stack = ProjectionStack::init(ProjectionStackConfig::new(kind, 6, 8), &mut rng);
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(&[3, 6]));
            let ps: Vec<Var> = stack.params.iter().map(|p| g.param(p.clone())).collect();
            let y = project(&mut g, x, &stack.config, &ps).unwrap();
            assert!(g.value(y).data().iter().all(|&v| v == 0.0), "{kind:?}");
        }
    }

    #[test]
    fn projection_width_mismatch() {
        let cfg = ProjectionStackConfig::new(ProjectionKind::Small, 4, 2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let w = g.param(Tensor::zeros(&[4, 2]));
        let b = g.param(Tensor::zeros(&[2]));
        assert!(matches!(project(&mut g, x, &cfg, &[w, b]), Err(Error::Dimension(_))));
    }

    #[test]
    fn projection_gradcheck_and_stop_gradient() {
        let mut rng = SplitMix64::new(5);
        for kind in [ProjectionKind::Large, ProjectionKind::XLarge] {
            let stack = ProjectionStack::init(ProjectionStackConfig::new(kind, 5, 4), &mut rng);
            // shift biases so that ReLUs sit away from their kink
            let params: Vec<Tensor> = stack.params.iter().map(|p| p.map(|v| v + 0.05)).collect();
            let x = Tensor::from_fn(&[3, 5], |i| ((i * 7 % 11) as f64 - 5.0) / 3.0);
            let cfg = stack.config.clone();
            let mut points = vec![x.clone()];
            points.extend(params);
            let r = gradcheck_many(
                |g, vs| {
                    let y = project(g, vs[0], &cfg, &vs[1..])?;
                    let sq = g.square(y);
                    Ok(g.sum_all(sq))
                },
                &points,
                1e-5,
                1e-4,
            )
            .unwrap();
            // the input gradient is cut, so only parameters are checked
            assert!(r.analytic[0].data().iter().all(|&v| v == 0.0));
            let param_err = r
                .analytic
                .iter()
                .zip(&r.numeric)
                .skip(1)
                .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs())))
                .fold(0.0, f64::max);
            assert!(param_err < 1e-4, "{kind:?}: {param_err}");
        }
    }

    proptest! {
        #[test]
        fn matches_loop_oracle(n in 1usize..3, c in 1usize..9, r in 1usize..4, seed in 0u64..1000) {
            let mut rng = SplitMix64::new(seed);
            let f = Tensor::from_fn(&[n, c, r], |_| rng.uniform(-1.0, 1.0));
            for n_slices in 1..=c {
                let p = layer_profile_tensor(&f, n_slices, ReduceMode::Sum).unwrap();
                let o = loop_oracle(&f, n_slices);
                for (a, b) in p.data().iter().zip(&o) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn additive_and_permutation_invariant(seed in 0u64..1000) {
            let mut rng = SplitMix64::new(seed);
            let f = Tensor::from_fn(&[2, 6, 3], |_| rng.uniform(-1.0, 1.0));
            let h = Tensor::from_fn(&[2, 6, 3], |_| rng.uniform(-1.0, 1.0));
            let pf = layer_profile_tensor(&f, 3, ReduceMode::Sum).unwrap();
            let ph = layer_profile_tensor(&h, 3, ReduceMode::Sum).unwrap();
            let sum = layer_profile_tensor(&f.zip_map(&h, |a, b| a + b), 3, ReduceMode::Sum).unwrap();
            prop_assert!(sum.max_abs_diff(&pf.zip_map(&ph, |a, b| a + b)) < 1e-12);

            // swap channels 0 and 1 (same slice)
            let mut swapped = f.clone();
            for i in 0..2 {
                for r in 0..3 {
                    swapped.data_mut().swap((i * 6) * 3 + r, (i * 6 + 1) * 3 + r);
                }
            }
            let ps = layer_profile_tensor(&swapped, 3, ReduceMode::Sum).unwrap();
            prop_assert!(ps.max_abs_diff(&pf) < 1e-12);
        }

        #[test]
        fn assemble_then_split_reconstructs(seed in 0u64..1000, counts in prop::collection::vec(1usize..5, 1..4)) {
            let mut rng = SplitMix64::new(seed);
            let spec = SliceSpec::new(
                counts.iter().enumerate().map(|(i, &n)| SliceLayer { id: i as u32 + 1, width: n * 2, n_slices: n }).collect()
            ).unwrap();
            let layers: Vec<Tensor> = counts.iter().map(|&n| Tensor::from_fn(&[3, n], |_| rng.uniform(-2.0, 2.0))).collect();
            let b = assemble_profile(&layers, &spec).unwrap();
            // concatenation oracle
            for i in 0..3 {
                let manual: Vec<f64> = layers.iter().flat_map(|l| l.row(i).to_vec()).collect();
                prop_assert_eq!(b.row(i), manual.as_slice());
                let p = b.profile(i);
                for (l, layer) in spec.layers().iter().zip(&layers) {
                    prop_assert_eq!(sub_profile(&p, l.id).unwrap(), layer.row(i));
                }
            }
        }
    }
}
