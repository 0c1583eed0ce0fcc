use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::layers::{Layer, LayerSpec, Param};
use super::{NnError, Scalar, Tensor4};
use crate::drr::View;
use crate::seed::stream;

/// How the backbone feature map reaches the regression head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInput {
    GlobalAvgPool,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Single(View),
    Dual,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Single(v) => write!(f, "{v}"),
            Variant::Dual => f.write_str("dual"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dual" => Ok(Variant::Dual),
            other => other.parse::<View>().map(Variant::Single),
        }
    }
}

/// Complete, serializable description of a regression network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Backbone name in the [`ArchitectureRegistry`].
    pub architecture: String,
    pub variant: Variant,
    pub input_side: usize,
    /// Number of conv blocks.
    pub depth: usize,
    pub base_channels: usize,
    pub head_input: HeadInput,
    /// Hidden widths of the fully connected head; a final width-1 output
    /// layer is always appended.
    pub head_widths: Vec<usize>,
}

impl ModelSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }
}

/// Layer list of one backbone branch plus the shape it produces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub layers: Vec<LayerSpec>,
    /// `(channels, height, width)` of the final feature map before the head
    /// input reduction.
    pub feature_map: (usize, usize, usize),
}

pub type BackboneBuilder = fn(&ModelSpec) -> Result<BackboneSpec, NnError>;

/// Named backbone constructors. Other backbones plug in via
/// [`ArchitectureRegistry::register`].
#[derive(Debug, Clone)]
pub struct ArchitectureRegistry {
    builders: BTreeMap<String, BackboneBuilder>,
}

pub const SIX_LAYER_CNN: &str = "six-layer-cnn";

impl Default for ArchitectureRegistry {
    fn default() -> Self {
        let mut r = Self {
            builders: BTreeMap::new(),
        };
        r.register(SIX_LAYER_CNN, conv_block_backbone);
        r
    }
}

impl ArchitectureRegistry {
    pub fn register(&mut self, name: &str, builder: BackboneBuilder) {
        self.builders.insert(name.to_string(), builder);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }

    pub fn backbone(&self, spec: &ModelSpec) -> Result<BackboneSpec, NnError> {
        let builder = self
            .builders
            .get(&spec.architecture)
            .ok_or_else(|| NnError::UnknownArchitecture(spec.architecture.clone()))?;
        builder(spec)
    }
}

/// `depth` blocks of conv 3x3 -> relu -> batchnorm -> maxpool 2x2, channels
/// starting at `base_channels` and doubling per block.
fn conv_block_backbone(spec: &ModelSpec) -> Result<BackboneSpec, NnError> {
    if spec.depth == 0 || spec.base_channels == 0 {
        return Err(NnError::InvalidSpec("depth and base_channels must be positive".into()));
    }
    let factor = 1usize
        .checked_shl(spec.depth as u32)
        .ok_or_else(|| NnError::InvalidSpec("depth too large".into()))?;
    if spec.input_side == 0 || spec.input_side % factor != 0 {
        return Err(NnError::InvalidSpec(format!(
            "input side {} must be a positive multiple of 2^{} = {factor}",
            spec.input_side, spec.depth
        )));
    }
    let mut layers = Vec::with_capacity(spec.depth * 4);
    let mut ch = 1;
    for i in 0..spec.depth {
        let out = spec.base_channels << i;
        layers.push(LayerSpec::Conv2d {
            in_ch: ch,
            out_ch: out,
            kernel: 3,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::BatchNorm2d { ch: out });
        layers.push(LayerSpec::MaxPool2d);
        ch = out;
    }
    let side = spec.input_side / factor;
    Ok(BackboneSpec {
        layers,
        feature_map: (ch, side, side),
    })
}

/// The single-view regressor: six conv blocks with 32..1024 channels,
/// global average pooling, head 512 -> 128 -> 1.
pub fn build_six_layer_cnn(view: View, input_side: usize) -> Result<ModelSpec, NnError> {
    build_conv_block_cnn(view, input_side, 6, 32, vec![512, 128])
}

/// Same block structure with a custom depth, width and head; used for
/// reduced models in tests and quick experiments.
pub fn build_conv_block_cnn(
    view: View,
    input_side: usize,
    depth: usize,
    base_channels: usize,
    head_widths: Vec<usize>,
) -> Result<ModelSpec, NnError> {
    let spec = ModelSpec {
        architecture: SIX_LAYER_CNN.to_string(),
        variant: Variant::Single(view),
        input_side,
        depth,
        base_channels,
        head_input: HeadInput::GlobalAvgPool,
        head_widths,
    };
    ArchitectureRegistry::default().backbone(&spec)?;
    Ok(spec)
}

/// Two independent branches of `backbone`, concatenated before the head.
pub fn build_dual_cnn(backbone: &ModelSpec) -> Result<ModelSpec, NnError> {
    match backbone.variant {
        Variant::Single(_) => Ok(ModelSpec {
            variant: Variant::Dual,
            ..backbone.clone()
        }),
        Variant::Dual => Err(NnError::InvalidSpec("backbone must be a single-view spec".into())),
    }
}

#[derive(Debug, Clone)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn from_specs(specs: &[LayerSpec], seed: u64) -> Self {
        let mut rng = stream(seed, 0);
        Self {
            layers: specs.iter().map(|s| s.instantiate(&mut rng)).collect(),
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>, NnError> {
        let mut cur = None::<Tensor4<T>>;
        for layer in &mut self.layers {
            let next = layer.forward(cur.as_ref().unwrap_or(x), train)?;
            cur = Some(next);
        }
        Ok(cur.unwrap_or_else(|| x.clone()))
    }

    pub fn backward(&mut self, grad: &Tensor4<T>) -> Tensor4<T> {
        let mut cur = None::<Tensor4<T>>;
        for layer in self.layers.iter_mut().rev() {
            let next = layer.backward(cur.as_ref().unwrap_or(grad));
            cur = Some(next);
        }
        cur.unwrap_or_else(|| grad.clone())
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, p) in layer.params_mut() {
                out.push((format!("{prefix}.{i}.{name}"), p));
            }
        }
    }

    fn collect_state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [T])>) {
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, dims, v) in layer.state() {
                out.push((format!("{prefix}.{i}.{name}"), dims, v));
            }
        }
    }

    fn collect_state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, v) in layer.state_mut() {
                out.push((format!("{prefix}.{i}.{name}"), v));
            }
        }
    }
}

/// Network inputs: one `(B, 1, S, S)` tensor per view the model consumes.
#[derive(Debug, Clone)]
pub enum ModelInput<T> {
    Single(Tensor4<T>),
    Dual { frontal: Tensor4<T>, lateral: Tensor4<T> },
}

impl<T: Scalar> ModelInput<T> {
    pub fn batch(&self) -> usize {
        match self {
            ModelInput::Single(x) => x.batch(),
            ModelInput::Dual { frontal, .. } => frontal.batch(),
        }
    }
}

#[derive(Debug, Clone)]
enum Body<T> {
    Single {
        backbone: Sequential<T>,
    },
    Dual {
        frontal: Sequential<T>,
        lateral: Sequential<T>,
        /// Feature length of the frontal branch (split point for backward).
        split: usize,
    },
}

/// Instantiated network with weights.
#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: ModelSpec,
    body: Body<T>,
    head: Sequential<T>,
}

fn reduction_layers(head_input: HeadInput) -> LayerSpec {
    match head_input {
        HeadInput::GlobalAvgPool => LayerSpec::GlobalAvgPool,
        HeadInput::Flatten => LayerSpec::Flatten,
    }
}

fn feature_len(backbone: &BackboneSpec, head_input: HeadInput) -> usize {
    let (c, h, w) = backbone.feature_map;
    match head_input {
        HeadInput::GlobalAvgPool => c,
        HeadInput::Flatten => c * h * w,
    }
}

fn head_specs(in_features: usize, widths: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = in_features;
    for &w in widths {
        specs.push(LayerSpec::Linear {
            in_features: prev,
            out_features: w,
        });
        specs.push(LayerSpec::Relu);
        prev = w;
    }
    specs.push(LayerSpec::Linear {
        in_features: prev,
        out_features: 1,
    });
    specs
}

fn check_chain(layers: &[LayerSpec], input: (usize, usize, usize)) -> Result<(usize, usize, usize), NnError> {
    layers.iter().try_fold(input, |shape, l| l.output_shape(shape))
}

impl<T: Scalar> Model<T> {
    /// Builds a model with deterministic initialization from `seed`.
    pub fn new(spec: &ModelSpec, registry: &ArchitectureRegistry, seed: u64) -> Result<Self, NnError> {
        let backbone = registry.backbone(spec)?;
        let mut branch = backbone.layers.clone();
        branch.push(reduction_layers(spec.head_input));
        let input = (1, spec.input_side, spec.input_side);
        let (c, h, w) = check_chain(&branch, input)?;
        let feat = c * h * w;
        if feat != feature_len(&backbone, spec.head_input) {
            return Err(NnError::InvalidSpec(format!(
                "backbone reports feature map {:?} but produces {feat} features",
                backbone.feature_map
            )));
        }
        match spec.variant {
            Variant::Single(_) => {
                let head = head_specs(feat, &spec.head_widths);
                Ok(Self {
                    spec: spec.clone(),
                    body: Body::Single {
                        backbone: Sequential::from_specs(&branch, crate::seed::derive_seed(seed, 1)),
                    },
                    head: Sequential::from_specs(&head, crate::seed::derive_seed(seed, 3)),
                })
            }
            Variant::Dual => Self::dual_from_parts(spec, &branch, &branch, input, seed),
        }
    }

    /// Dual model from explicit branch layer lists; the branches must emit
    /// feature vectors of equal length.
    pub fn dual_from_parts(
        spec: &ModelSpec,
        frontal: &[LayerSpec],
        lateral: &[LayerSpec],
        input: (usize, usize, usize),
        seed: u64,
    ) -> Result<Self, NnError> {
        let (fc, fh, fw) = check_chain(frontal, input)?;
        let (lc, lh, lw) = check_chain(lateral, input)?;
        let (nf, nl) = (fc * fh * fw, lc * lh * lw);
        if nf != nl {
            return Err(NnError::BranchMismatch { frontal: nf, lateral: nl });
        }
        let head = head_specs(nf + nl, &spec.head_widths);
        Ok(Self {
            spec: ModelSpec {
                variant: Variant::Dual,
                ..spec.clone()
            },
            body: Body::Dual {
                frontal: Sequential::from_specs(frontal, crate::seed::derive_seed(seed, 1)),
                lateral: Sequential::from_specs(lateral, crate::seed::derive_seed(seed, 2)),
                split: nf,
            },
            head: Sequential::from_specs(&head, crate::seed::derive_seed(seed, 3)),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Feature vector length entering the first head layer.
    pub fn head_in_features(&self) -> usize {
        match self.head.layers.first() {
            Some(Layer::Linear(l)) => l.in_features,
            _ => unreachable!("head starts with a linear layer"),
        }
    }

    /// Number of scalar learnable parameters.
    pub fn num_params(&mut self) -> usize {
        self.params_mut().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Pooled (or flattened) features as seen by the head.
    pub fn features(&mut self, input: &ModelInput<T>, train: bool) -> Result<Tensor4<T>, NnError> {
        match (&mut self.body, input) {
            (Body::Single { backbone }, ModelInput::Single(x)) => backbone.forward(x, train),
            (Body::Dual { frontal, lateral, .. }, ModelInput::Dual { frontal: xf, lateral: xl }) => {
                if xf.batch() != xl.batch() {
                    return Err(NnError::Shape("frontal and lateral batch sizes differ".into()));
                }
                let a = frontal.forward(xf, train)?;
                let b = lateral.forward(xl, train)?;
                Tensor4::concat_features(&a, &b)
            }
            _ => Err(NnError::Shape(format!(
                "{} model received the wrong number of input views",
                self.spec.variant
            ))),
        }
    }

    /// Forward pass; output shape `(B, 1, 1, 1)`.
    pub fn forward(&mut self, input: &ModelInput<T>, train: bool) -> Result<Tensor4<T>, NnError> {
        let side = self.spec.input_side;
        let check = |x: &Tensor4<T>| {
            let [_, c, h, w] = x.shape();
            if (c, h, w) != (1, side, side) {
                Err(NnError::Shape(format!("expected (B, 1, {side}, {side}) input, got {:?}", x.shape())))
            } else {
                Ok(())
            }
        };
        match input {
            ModelInput::Single(x) => check(x)?,
            ModelInput::Dual { frontal, lateral } => {
                check(frontal)?;
                check(lateral)?;
            }
        }
        let feats = self.features(input, train)?;
        self.head.forward(&feats, train)
    }

    /// Backpropagates `grad` (shape of the forward output), accumulating
    /// parameter gradients. Returns input gradients per view.
    pub fn backward(&mut self, grad: &Tensor4<T>) -> Vec<Tensor4<T>> {
        let g = self.head.backward(grad);
        match &mut self.body {
            Body::Single { backbone } => vec![backbone.backward(&g)],
            Body::Dual { frontal, lateral, split } => {
                let (gf, gl) = g.split_features(*split);
                vec![frontal.backward(&gf), lateral.backward(&gl)]
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        match &mut self.body {
            Body::Single { backbone } => backbone.collect_params("backbone", &mut out),
            Body::Dual { frontal, lateral, .. } => {
                frontal.collect_params("frontal", &mut out);
                lateral.collect_params("lateral", &mut out);
            }
        }
        self.head.collect_params("head", &mut out);
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// All tensors that define the model (parameters and running
    /// statistics) in a fixed order.
    pub fn state(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        match &self.body {
            Body::Single { backbone } => backbone.collect_state("backbone", &mut out),
            Body::Dual { frontal, lateral, .. } => {
                frontal.collect_state("frontal", &mut out);
                lateral.collect_state("lateral", &mut out);
            }
        }
        self.head.collect_state("head", &mut out);
        out
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        match &mut self.body {
            Body::Single { backbone } => backbone.collect_state_mut("backbone", &mut out),
            Body::Dual { frontal, lateral, .. } => {
                frontal.collect_state_mut("frontal", &mut out);
                lateral.collect_state_mut("lateral", &mut out);
            }
        }
        self.head.collect_state_mut("head", &mut out);
        out
    }

    /// Sets the bias of the final output unit (used to start regression at
    /// the label mean).
    pub fn set_output_bias(&mut self, value: T) {
        if let Some(Layer::Linear(l)) = self.head.layers.last_mut() {
            l.bias.value[0] = value;
        }
    }

    /// Copies all state into a model of another precision.
    pub fn cast<U: Scalar>(&self, registry: &ArchitectureRegistry) -> Result<Model<U>, NnError> {
        let mut other = Model::<U>::new(&self.spec, registry, 0)?;
        for ((_, _, src), (_, dst)) in self.state().into_iter().zip(other.state_mut()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::from_f64(s.to_f64().expect("finite")).expect("representable");
            }
        }
        Ok(other)
    }
}

/// Mean squared error and its gradient `2 (pred - target) / N`.
pub fn mse_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(T, Tensor4<T>), NnError> {
    if pred.shape() != target.shape() {
        return Err(NnError::Shape(format!(
            "prediction shape {:?} != target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = T::from_usize(pred.len()).expect("len");
    let two = T::lit(2.0);
    let mut loss = T::zero();
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d * d;
            two * d / n
        })
        .collect();
    Ok((loss / n, Tensor4::new(pred.shape(), grad)?))
}

/// Output-average ensemble of the frontal and lateral single-view models.
pub fn ensemble_predict(y_frontal: f64, y_lateral: f64) -> f64 {
    0.5 * (y_frontal + y_lateral)
}
