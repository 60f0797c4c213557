//! Network builders for the lightweight pyramid denoiser and the baseline
//! 3D UNet, plus the layer interpreter that runs them.
//!
//! A [`NetworkGraph`] is a pure layer plan: kinds, convolution shapes and
//! skip wiring, with no weights. That is enough for parameter and FLOP
//! accounting at full clinical geometry. A [`Network`] pairs a plan with its
//! parameter tensors.
//!
//! The lightweight denoiser is
//!
//! ```text
//! voxel unshuffle (1 -> 8 channels, half extent)
//! num_down × [axial 3×3×1 /(2,2,1) + IN + ReLU, slice 1×1×3 /(1,1,2) + IN + ReLU]
//! pyramid, per level: trilinear ×2, axial + IN + ReLU, slice + IN + ReLU, concat skip
//! head: trilinear ×2, axial -> 8 + IN + ReLU, slice 8 -> 8, voxel shuffle
//! ```
//!
//! The baseline swaps every axial/slice pair for one `3×3×3` convolution and
//! drops the shuffle operators, so it needs one more downsampling level.

mod checkpoint;

pub use checkpoint::{checkpoint_size, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::ops::{Conv, ConvSpec, DEFAULT_EPS};
use crate::tensor::{seeded_rng, Tape, Tensor, Var};

/// Feature widths double per level up to this multiple of the base width.
pub const FEATURE_CAP_MULTIPLIER: usize = 8;

/// Scale applied to the Glorot-uniform bound at initialization. A
/// convolution followed by instance norm computes the same function at any
/// weight scale, but Adam's fixed step size moves small weights relatively
/// further, so this sets how quickly those layers train.
pub const INIT_GAIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Proposed,
    UnetBaseline,
}

impl ModelKind {
    pub fn tag(self) -> u32 {
        match self {
            ModelKind::Proposed => 0,
            ModelKind::UnetBaseline => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::Proposed),
            1 => Ok(ModelKind::UnetBaseline),
            t => Err(Error::Format(format!("unknown model tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Proposed => "proposed",
            ModelKind::UnetBaseline => "unet-baseline",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(ModelKind::Proposed),
            "unet" | "unet-baseline" => Ok(ModelKind::UnetBaseline),
            other => Err(Error::InvalidConfig(format!(
                "unknown model '{other}' (expected proposed or unet)"
            ))),
        }
    }
}

/// Width, depth and working geometry of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaledConfig {
    pub base_features: usize,
    pub num_down: usize,
    pub extents: [usize; 3],
}

impl ScaledConfig {
    pub fn new(base_features: usize, num_down: usize, extents: [usize; 3]) -> Self {
        ScaledConfig { base_features, num_down, extents }
    }

    /// 64 features, 5 downsampling modules, 256×256×64.
    pub fn clinical_proposed() -> Self {
        Self::new(64, 5, [256, 256, 64])
    }

    /// 64 features, 6 downsampling modules, 256×256×64.
    pub fn clinical_unet() -> Self {
        Self::new(64, 6, [256, 256, 64])
    }

    /// 8 features, 3 downsampling modules, 32×32×16: CPU-sized.
    pub fn desk() -> Self {
        Self::new(8, 3, [32, 32, 16])
    }

    /// Feature width of backbone module `m` (0-indexed).
    pub fn features(&self, m: usize) -> usize {
        self.base_features * (1usize << m).min(FEATURE_CAP_MULTIPLIER)
    }

    /// Every spatial extent must be a multiple of this.
    pub fn divisor(&self, kind: ModelKind) -> usize {
        match kind {
            ModelKind::Proposed => 1 << (self.num_down + 1),
            ModelKind::UnetBaseline => 1 << self.num_down,
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        ensure!(self.base_features >= 1, InvalidConfig, "base_features must be >= 1");
        ensure!(
            (1..=16).contains(&self.num_down),
            InvalidConfig,
            "num_down must be in 1..=16, got {}",
            self.num_down
        );
        let div = self.divisor(kind);
        ensure!(
            self.extents.iter().all(|&e| e >= div && e % div == 0),
            InvalidConfig,
            "{kind} with {} downsampling modules needs extents divisible by {div}, got {:?}",
            self.num_down,
            self.extents
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    VoxelUnshuffle,
    VoxelShuffle,
    /// Weight at parameter index `param`, bias at `param + 1`.
    Conv { spec: ConvSpec, param: usize },
    /// Scale at parameter index `param`, shift at `param + 1`.
    InstanceNorm { channels: usize, param: usize },
    Relu,
    Upsample,
    /// Remembers the current activation for a later [`Layer::ConcatSkip`].
    PushSkip,
    /// Concatenates `[current, most recent skip]` along channels.
    ConcatSkip,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::VoxelUnshuffle => "voxel_unshuffle",
            Layer::VoxelShuffle => "voxel_shuffle",
            Layer::Conv { spec, .. } => match (spec.kernel, spec.stride) {
                ([_, _, 1], [2, 2, 1]) => "axial_conv_down",
                ([_, _, 1], _) => "axial_conv",
                ([1, 1, _], [1, 1, 2]) => "slice_conv_down",
                ([1, 1, _], _) => "slice_conv",
                (_, [1, 1, 1]) => "conv3d",
                _ => "conv3d_down",
            },
            Layer::InstanceNorm { .. } => "instance_norm",
            Layer::Relu => "relu",
            Layer::Upsample => "upsample_trilinear",
            Layer::PushSkip => "push_skip",
            Layer::ConcatSkip => "concat_skip",
        }
    }
}

/// Channels and spatial extents of one activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActShape {
    pub channels: usize,
    pub extents: [usize; 3],
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [h, w, d] = self.extents;
        write!(f, "{}x{h}x{w}x{d}", self.channels)
    }
}

/// Layer plan of a network, without weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkGraph {
    pub kind: ModelKind,
    pub base_features: usize,
    pub num_down: usize,
    pub layers: Vec<Layer>,
    param_shapes: Vec<Vec<usize>>,
}

impl NetworkGraph {
    pub fn config(&self, extents: [usize; 3]) -> ScaledConfig {
        ScaledConfig::new(self.base_features, self.num_down, extents)
    }

    pub fn divisor(&self) -> usize {
        self.config([1; 3]).divisor(self.kind)
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.param_shapes
    }

    /// Weights, biases, and norm scales/shifts.
    pub fn param_count(&self) -> usize {
        self.param_shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// ReLUs before the first upsampling layer.
    pub fn backbone_relu_count(&self) -> usize {
        self.layers
            .iter()
            .take_while(|l| !matches!(l, Layer::Upsample))
            .filter(|l| matches!(l, Layer::Relu))
            .count()
    }

    /// Stride-2 convolution modules in the backbone.
    pub fn downsampling_modules(&self) -> usize {
        let down_convs = self
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { spec, .. } if spec.stride.iter().any(|&s| s > 1)))
            .count();
        match self.kind {
            // one axial and one slice convolution per module
            ModelKind::Proposed => down_convs / 2,
            ModelKind::UnetBaseline => down_convs,
        }
    }

    pub fn check_input(&self, extents: [usize; 3]) -> Result<()> {
        let div = self.divisor();
        ensure!(
            extents.iter().all(|&e| e >= div && e % div == 0),
            Contract,
            "{} expects spatial extents divisible by {div}, got {extents:?}",
            self.kind
        );
        Ok(())
    }

    /// Input and output activation shape of every layer for a 1-channel input.
    pub fn trace_shapes(&self, extents: [usize; 3]) -> Result<Vec<(ActShape, ActShape)>> {
        self.check_input(extents)?;
        let mut cur = ActShape { channels: 1, extents };
        let mut skips = Vec::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = cur;
            cur = match *layer {
                Layer::VoxelUnshuffle => ActShape {
                    channels: cur.channels * 8,
                    extents: cur.extents.map(|e| e / 2),
                },
                Layer::VoxelShuffle => ActShape {
                    channels: cur.channels / 8,
                    extents: cur.extents.map(|e| e * 2),
                },
                Layer::Conv { spec, .. } => {
                    ensure!(spec.c_in == cur.channels, Internal, "plan channel mismatch");
                    ActShape { channels: spec.c_out, extents: spec.output_extents(cur.extents) }
                }
                Layer::Upsample => ActShape { channels: cur.channels, extents: cur.extents.map(|e| e * 2) },
                Layer::PushSkip => {
                    skips.push(cur);
                    cur
                }
                Layer::ConcatSkip => {
                    let skip = skips.pop().ok_or_else(|| Error::Internal("unmatched concat".into()))?;
                    ensure!(skip.extents == cur.extents, Internal, "skip extents mismatch");
                    ActShape { channels: cur.channels + skip.channels, extents: cur.extents }
                }
                Layer::InstanceNorm { .. } | Layer::Relu => cur,
            };
            out.push((input, cur));
        }
        Ok(out)
    }
}

struct PlanBuilder {
    layers: Vec<Layer>,
    param_shapes: Vec<Vec<usize>>,
}

impl PlanBuilder {
    fn new() -> Self {
        PlanBuilder { layers: Vec::new(), param_shapes: Vec::new() }
    }

    fn conv(&mut self, spec: ConvSpec) {
        let param = self.param_shapes.len();
        self.param_shapes.push(spec.weight_shape().to_vec());
        self.param_shapes.push(vec![spec.c_out]);
        self.layers.push(Layer::Conv { spec, param });
    }

    /// Convolution, instance norm, ReLU.
    fn block(&mut self, spec: ConvSpec) {
        self.conv(spec);
        let param = self.param_shapes.len();
        self.param_shapes.push(vec![spec.c_out]);
        self.param_shapes.push(vec![spec.c_out]);
        self.layers.push(Layer::InstanceNorm { channels: spec.c_out, param });
        self.layers.push(Layer::Relu);
    }

    fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    fn finish(self, kind: ModelKind, cfg: &ScaledConfig) -> Result<NetworkGraph> {
        let mut open = 0usize;
        for l in &self.layers {
            match l {
                Layer::PushSkip => open += 1,
                Layer::ConcatSkip => {
                    ensure!(open > 0, Internal, "concat without a stored skip");
                    open -= 1;
                }
                _ => {}
            }
        }
        ensure!(open == 0, Internal, "{open} skip connections never consumed");
        Ok(NetworkGraph {
            kind,
            base_features: cfg.base_features,
            num_down: cfg.num_down,
            layers: self.layers,
            param_shapes: self.param_shapes,
        })
    }
}

/// Lightweight denoiser: voxel unshuffle, decoupled axial/slice backbone,
/// feature pyramid and a shuffle prediction head. The head's final linear
/// slice convolution also receives the unshuffled input.
pub fn build_proposed(cfg: &ScaledConfig) -> Result<NetworkGraph> {
    cfg.validate(ModelKind::Proposed)?;
    let nd = cfg.num_down;
    let mut b = PlanBuilder::new();
    b.push(Layer::VoxelUnshuffle);
    b.push(Layer::PushSkip);
    let mut c = 8;
    for m in 0..nd {
        let f = cfg.features(m);
        b.block(ConvSpec::axial(c, f, true));
        b.block(ConvSpec::slice(f, f, true));
        c = f;
        if m + 1 < nd {
            b.push(Layer::PushSkip);
        }
    }
    for level in (1..nd).rev() {
        let f = cfg.features(level - 1);
        b.push(Layer::Upsample);
        b.block(ConvSpec::axial(c, f, false));
        b.block(ConvSpec::slice(f, f, false));
        b.push(Layer::ConcatSkip);
        c = 2 * f;
    }
    b.push(Layer::Upsample);
    b.block(ConvSpec::axial(c, 8, false));
    b.push(Layer::ConcatSkip);
    b.conv(ConvSpec::slice(16, 8, false));
    b.push(Layer::VoxelShuffle);
    b.finish(ModelKind::Proposed, cfg)
}

/// Baseline encoder-decoder with regular `3×3×3` convolutions.
pub fn build_unet_baseline(cfg: &ScaledConfig) -> Result<NetworkGraph> {
    cfg.validate(ModelKind::UnetBaseline)?;
    let nd = cfg.num_down;
    let mut b = PlanBuilder::new();
    let mut c = 1;
    for m in 0..nd {
        let f = cfg.features(m);
        b.block(ConvSpec::regular(c, f, 2));
        c = f;
        if m + 1 < nd {
            b.push(Layer::PushSkip);
        }
    }
    for level in (1..nd).rev() {
        let f = cfg.features(level - 1);
        b.push(Layer::Upsample);
        b.block(ConvSpec::regular(c, f, 1));
        b.push(Layer::ConcatSkip);
        c = 2 * f;
    }
    b.push(Layer::Upsample);
    b.conv(ConvSpec::regular(c, 1, 1));
    b.finish(ModelKind::UnetBaseline, cfg)
}

pub fn build(kind: ModelKind, cfg: &ScaledConfig) -> Result<NetworkGraph> {
    match kind {
        ModelKind::Proposed => build_proposed(cfg),
        ModelKind::UnetBaseline => build_unet_baseline(cfg),
    }
}

/// A layer plan with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub graph: NetworkGraph,
    pub params: Vec<Tensor>,
    /// Seed used for initialization.
    pub seed: u64,
    pub eps: f64,
}

impl Network {
    /// Glorot-uniform convolution weights scaled by [`INIT_GAIN`], zero
    /// biases, unit norm scales and zero norm shifts.
    pub fn init(graph: NetworkGraph, seed: u64) -> Self {
        Self::init_with_gain(graph, seed, INIT_GAIN)
    }

    pub fn init_with_gain(graph: NetworkGraph, seed: u64, gain: f64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut params: Vec<Tensor> = graph
            .param_shapes
            .iter()
            .map(|s| Tensor::zeros(s).expect("plan shapes are positive"))
            .collect();
        for layer in &graph.layers {
            match *layer {
                Layer::Conv { spec, param } => {
                    params[param] = Conv::glorot_scaled(spec, gain, &mut rng).weight;
                }
                Layer::InstanceNorm { param, .. } => {
                    params[param].data_mut().fill(1.0);
                }
                _ => {}
            }
        }
        Network { graph, params, seed, eps: DEFAULT_EPS }
    }

    /// All convolution weights and biases zero; norms are identity-scaled.
    pub fn zeroed(graph: NetworkGraph) -> Self {
        let mut net = Self::init(graph, 0);
        for layer in &net.graph.layers {
            if let Layer::Conv { param, .. } = *layer {
                net.params[param].data_mut().fill(0.0);
            }
        }
        net
    }

    pub fn from_params(graph: NetworkGraph, params: Vec<Tensor>, seed: u64) -> Result<Self> {
        ensure!(
            params.len() == graph.param_shapes.len(),
            Contract,
            "expected {} parameter tensors, got {}",
            graph.param_shapes.len(),
            params.len()
        );
        for (i, (p, s)) in params.iter().zip(&graph.param_shapes).enumerate() {
            ensure!(p.shape() == s.as_slice(), Contract, "parameter {i} has shape {:?}, expected {s:?}", p.shape());
        }
        Ok(Network { graph, params, seed, eps: DEFAULT_EPS })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Runs the plan on `tape`. `params` must come from [`Network::bind`].
    pub fn forward_on(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let dims = tape.value(x).dims5()?;
        ensure!(dims[1] == 1, Contract, "denoiser input must have 1 channel, got {}", dims[1]);
        self.graph.check_input([dims[2], dims[3], dims[4]])?;
        ensure!(params.len() == self.params.len(), Contract, "parameter binding has wrong length");

        let mut cur = x;
        let mut skips: Vec<Var> = Vec::new();
        for (i, layer) in self.graph.layers.iter().enumerate() {
            let step = match *layer {
                Layer::VoxelUnshuffle => tape.voxel_unshuffle(cur),
                Layer::VoxelShuffle => tape.voxel_shuffle(cur),
                Layer::Conv { spec, param } => {
                    tape.conv3d(cur, params[param], Some(params[param + 1]), spec.stride)
                }
                Layer::InstanceNorm { param, .. } => {
                    tape.instance_norm(cur, params[param], params[param + 1], self.eps)
                }
                Layer::Relu => tape.relu(cur),
                Layer::Upsample => tape.upsample_trilinear(cur),
                Layer::PushSkip => {
                    skips.push(cur);
                    Ok(cur)
                }
                Layer::ConcatSkip => {
                    let skip = skips.pop().ok_or_else(|| Error::Internal("unmatched concat".into()))?;
                    tape.concat(&[cur, skip])
                }
            };
            cur = step.map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLayer { layer: i },
                other => other,
            })?;
        }
        Ok(cur)
    }

    /// Denoises `x` (`[B, 1, H, W, D]`), returning the same shape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let input = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, input, &params)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    /// Layer-by-layer sum written out from the architecture description.
    fn proposed_ledger(base: usize, nd: usize) -> usize {
        let f = |m: usize| base * (1usize << m).min(8);
        let conv = |ci: usize, co: usize, k: usize| ci * co * k + co;
        let norm = |c: usize| 2 * c;
        let mut total = 0;
        let mut c = 8;
        for m in 0..nd {
            total += conv(c, f(m), 9) + norm(f(m)) + conv(f(m), f(m), 3) + norm(f(m));
            c = f(m);
        }
        for level in (1..nd).rev() {
            let o = f(level - 1);
            total += conv(c, o, 9) + norm(o) + conv(o, o, 3) + norm(o);
            c = 2 * o;
        }
        // the last slice conv also sees the 8-channel unshuffled input
        total + conv(c, 8, 9) + norm(8) + conv(16, 8, 3)
    }

    #[test]
    fn desk_parameter_ledger() {
        let g = build_proposed(&ScaledConfig::desk()).unwrap();
        assert_eq!(g.param_count(), proposed_ledger(8, 3));
        // hand count for 8 features, 3 modules:
        // backbone 8->8,8->16,16->32 ; pyramid 32->16, 32->8 ; head 16->8, 8+8->8
        let by_hand = (8 * 8 * 9 + 8 + 16 + 8 * 8 * 3 + 8 + 16)
            + (8 * 16 * 9 + 16 + 32 + 16 * 16 * 3 + 16 + 32)
            + (16 * 32 * 9 + 32 + 64 + 32 * 32 * 3 + 32 + 64)
            + (32 * 16 * 9 + 16 + 32 + 16 * 16 * 3 + 16 + 32)
            + (32 * 8 * 9 + 8 + 16 + 8 * 8 * 3 + 8 + 16)
            + (16 * 8 * 9 + 8 + 16 + 16 * 8 * 3 + 8);
        assert_eq!(g.param_count(), by_hand);
    }

    #[test]
    fn unet_desk_ledger() {
        let cfg = ScaledConfig::new(8, 3, [32, 32, 16]);
        let g = build_unet_baseline(&cfg).unwrap();
        let conv = |ci: usize, co: usize| ci * co * 27 + co;
        let by_hand = conv(1, 8) + 16 + conv(8, 16) + 32 + conv(16, 32) + 64
            + conv(32, 16) + 32 + conv(32, 8) + 16 + conv(16, 1);
        assert_eq!(g.param_count(), by_hand);
    }

    #[test]
    fn structural_ledgers() {
        let p = build_proposed(&ScaledConfig::clinical_proposed()).unwrap();
        let u = build_unet_baseline(&ScaledConfig::clinical_unet()).unwrap();
        assert_eq!(p.downsampling_modules(), 5);
        assert_eq!(u.downsampling_modules(), 6);
        assert_eq!(p.backbone_relu_count(), 10);
        assert_eq!(u.backbone_relu_count(), 6);
        let pushes = p.layers.iter().filter(|l| matches!(l, Layer::PushSkip)).count();
        let concats = p.layers.iter().filter(|l| matches!(l, Layer::ConcatSkip)).count();
        assert_eq!((pushes, concats), (5, 5));
    }

    #[test]
    fn shape_preserving_plans() {
        for (kind, cfg) in [
            (ModelKind::Proposed, ScaledConfig::clinical_proposed()),
            (ModelKind::UnetBaseline, ScaledConfig::clinical_unet()),
            (ModelKind::Proposed, ScaledConfig::desk()),
            (ModelKind::UnetBaseline, ScaledConfig::new(4, 2, [8, 12, 4])),
        ] {
            let g = build(kind, &cfg).unwrap();
            let trace = g.trace_shapes(cfg.extents).unwrap();
            let last = trace.last().unwrap().1;
            assert_eq!(last, ActShape { channels: 1, extents: cfg.extents });
        }
    }

    #[test]
    fn divisibility_is_enforced() {
        assert!(matches!(
            build_proposed(&ScaledConfig::new(8, 3, [33, 32, 16])),
            Err(Error::InvalidConfig(_))
        ));
        assert!(build_proposed(&ScaledConfig::new(8, 3, [32, 32, 8])).is_err());
        assert!(build_unet_baseline(&ScaledConfig::new(8, 3, [32, 32, 8])).is_ok());
    }

    #[test]
    fn forward_preserves_shape_and_zero_net_gives_zero() {
        let g = build_proposed(&ScaledConfig::desk()).unwrap();
        let x = Tensor::randn(&[1, 1, 32, 32, 16], 1.0, &mut seeded_rng(3)).unwrap();
        let y = Network::init(g.clone(), 4).forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        let z = Network::zeroed(g).forward(&x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = Network::init(build_proposed(&ScaledConfig::desk()).unwrap(), 0);
        let x = Tensor::zeros(&[1, 1, 32, 32, 12]).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::Contract(_))));
        let x = Tensor::zeros(&[1, 2, 32, 32, 16]).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn impulse_response_covers_volume() {
        // bottleneck receptive field spans the whole input at 64×64×16
        let g = build_proposed(&ScaledConfig::new(8, 3, [64, 64, 16])).unwrap();
        let net = Network::init(g, 11);
        let base = Tensor::zeros(&[1, 1, 64, 64, 16]).unwrap();
        let mut imp = base.clone();
        let off = imp.offset(&[0, 0, 0, 0, 0]).unwrap();
        imp.data_mut()[off] = 1.0;
        let y0 = net.forward(&base).unwrap();
        let y1 = net.forward(&imp).unwrap();
        let far = y0.offset(&[0, 0, 63, 63, 15]).unwrap();
        assert!((y1.data()[far] - y0.data()[far]).abs() > 0.0);
        // a few voxels can sit behind ReLUs that are inactive in both runs
        let changed = y0.data().iter().zip(y1.data()).filter(|(a, b)| a != b).count();
        assert!(changed as f64 > 0.99 * y0.len() as f64, "{changed} of {}", y0.len());
    }

    #[test]
    fn non_finite_reports_layer() {
        let g = build_unet_baseline(&ScaledConfig::new(2, 1, [4, 4, 4])).unwrap();
        let mut net = Network::init(g, 0);
        net.params[0].data_mut()[0] = f64::MAX;
        let x = Tensor::full(&[1, 1, 4, 4, 4], f64::MAX).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::NonFiniteLayer { layer: 0 })));
    }

    #[test]
    fn gradients_through_tiny_proposed_net() {
        let g = build_proposed(&ScaledConfig::new(2, 1, [8, 8, 8])).unwrap();
        let mut net = Network::init_with_gain(g, 8, 1.0);
        // move norm shifts off the ReLU kink at zero
        let mut rng = seeded_rng(12);
        for layer in net.graph.layers.clone() {
            if let Layer::InstanceNorm { param, channels } = layer {
                net.params[param + 1] = Tensor::randn(&[channels], 0.5, &mut rng).unwrap();
            }
        }
        let x = Tensor::randn(&[1, 1, 8, 8, 8], 1.0, &mut seeded_rng(9)).unwrap();
        let t = Tensor::randn(&[1, 1, 8, 8, 8], 1.0, &mut seeded_rng(10)).unwrap();
        let mut inputs = net.params.clone();
        inputs.push(x);
        let n = net.params.len();
        let reports = crate::gradcheck::check_gradients(
            &inputs,
            |tape, v| {
                let target = tape.constant(t.clone());
                let y = net.forward_on(tape, v[n], &v[..n])?;
                tape.mse(y, target)
            },
            1e-6,
        )
        .unwrap();
        for (i, r) in reports.iter().enumerate() {
            let peak = r.numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak < 1e-7 {
                // biases feeding an instance norm are cancelled by its mean
                assert!(r.analytic.iter().all(|a| a.abs() < 1e-7), "input {i}");
            } else {
                assert!(r.max_rel_err < 1e-4, "input {i}: {}", r.max_rel_err);
            }
        }
    }

    #[test]
    fn model_names_parse() {
        assert_eq!("unet".parse::<ModelKind>().unwrap(), ModelKind::UnetBaseline);
        assert_eq!("proposed".parse::<ModelKind>().unwrap(), ModelKind::Proposed);
        assert!("resnet".parse::<ModelKind>().is_err());
    }
}
