//! The two age-regression architectures: a slice-sequence network
//! (2D residual backbone per slice, sequence average pooling, BiLSTM,
//! linear regressor) and a volumetric 3D residual baseline.

use std::fmt;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    bilstm, seq_avg_pool, BasicBlock2d, BasicBlock3d, Conv2dLayer, Conv3dLayer, LinearLayer,
    LstmParams, Param, NORM_EPS,
};
use crate::tensor::{Graph, ReduceKind, Scalar, Tensor, TensorError, TensorResult, Var};

pub mod weights;

pub use weights::{load_model, load_weights, save_weights, ModelDescriptor};

#[derive(Debug)]
pub enum ModelError {
    Tensor(TensorError),
    /// Invalid construction parameters.
    Config { detail: String },
    /// Input that does not fit the constructed architecture.
    Input { detail: String },
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Weight file that cannot be decoded.
    Format { path: PathBuf, detail: String },
    /// Weight file decodes but belongs to a different architecture.
    Mismatch { detail: String },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::Config { detail } => write!(f, "model config: {detail}"),
            ModelError::Input { detail } => write!(f, "model input: {detail}"),
            ModelError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            ModelError::Format { path, detail } => write!(f, "{}: {detail}", path.display()),
            ModelError::Mismatch { detail } => write!(f, "architecture mismatch: {detail}"),
        }
    }
}

impl std::error::Error for ModelError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ModelError::Tensor(e) => Some(e),
            ModelError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Which architecture a weight file or CLI flag refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SliceSeq,
    Vol3d,
}

impl ModelKind {
    pub fn parse(s: &str) -> ModelResult<Self> {
        match s {
            "sliceseq" => Ok(ModelKind::SliceSeq),
            "vol3d" => Ok(ModelKind::Vol3d),
            other => Err(ModelError::Config {
                detail: format!("unknown model {other:?}, expected sliceseq or vol3d"),
            }),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::SliceSeq => "sliceseq",
            ModelKind::Vol3d => "vol3d",
        }
    }
}

/// Residual backbone shape, shared by the 2D and 3D variants. The stem is
/// a strided convolution, instance norm, ReLU, and an optional 3-wide
/// stride-2 max pool; each later stage starts with a stride-2 block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl BackboneConfig {
    /// The standard 18-layer 2D layout on one input channel.
    pub fn resnet18_2d() -> Self {
        BackboneConfig {
            in_channels: 1,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            stage_widths: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
        }
    }

    /// The volumetric counterpart: identical stage layout with cubic
    /// kernels throughout, including a 3-wide stem.
    pub fn resnet18_3d() -> Self {
        BackboneConfig {
            stem_kernel: 3,
            ..Self::resnet18_2d()
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_widths.last().expect("validated non-empty")
    }

    fn validate(&self) -> ModelResult<()> {
        let bad = |detail: String| Err(ModelError::Config { detail });
        if self.in_channels == 0 || self.stem_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.stem_kernel == 0 || self.stem_stride == 0 {
            return bad("stem kernel and stride must be positive".into());
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return bad(format!("stage widths {:?} must be positive", self.stage_widths));
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be at least 1".into());
        }
        Ok(())
    }
}

/// Slice feature extractor: stem, residual stages, global average pool.
#[derive(Debug, Clone)]
pub struct Backbone2d<T: Scalar> {
    stem: Conv2dLayer<T>,
    blocks: Vec<BasicB2<T>>,
    stem_pool: bool,
}

type BasicB2<T> = BasicBlock2d<T>;
type BasicB3<T> = BasicBlock3d<T>;

fn stage_plan(cfg: &BackboneConfig) -> Vec<(usize, usize, usize)> {
    // (c_in, c_out, stride) per block; stage 0 keeps stride 1.
    let mut plan = Vec::new();
    let mut c_in = cfg.stem_channels;
    for (s, &width) in cfg.stage_widths.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            plan.push((c_in, width, stride));
            c_in = width;
        }
    }
    plan
}

impl<T: Scalar> Backbone2d<T> {
    pub fn new(prefix: &str, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> ModelResult<Self> {
        cfg.validate()?;
        let stem = Conv2dLayer::new(
            &format!("{prefix}.stem"),
            cfg.in_channels,
            cfg.stem_channels,
            cfg.stem_kernel,
            cfg.stem_stride,
            cfg.stem_kernel / 2,
            rng,
        );
        let mut blocks = Vec::new();
        let per_stage = cfg.blocks_per_stage;
        for (i, (c_in, c_out, stride)) in stage_plan(cfg).into_iter().enumerate() {
            let name = format!("{prefix}.stage{}.block{}", i / per_stage, i % per_stage);
            blocks.push(BasicBlock2d::new(&name, c_in, c_out, stride, rng));
        }
        Ok(Backbone2d {
            stem,
            blocks,
            stem_pool: cfg.stem_pool,
        })
    }

    /// `[C, H, W]` in, `[feature_dim]` out.
    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> TensorResult<Var<'g, T>> {
        let eps = T::from_f64(NORM_EPS);
        let mut h = self.stem.forward(g, x)?.instance_norm(eps)?.relu()?;
        if self.stem_pool {
            h = h.max_pool2d(3, 2, 1)?;
        }
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        h.reduce(ReduceKind::Mean, &[1, 2])
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.stem.params();
        for b in &self.blocks {
            out.extend(b.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.stem.params_mut();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out
    }
}

/// Volumetric feature extractor mirroring [`Backbone2d`].
#[derive(Debug, Clone)]
pub struct Backbone3d<T: Scalar> {
    stem: Conv3dLayer<T>,
    blocks: Vec<BasicB3<T>>,
    stem_pool: bool,
}

impl<T: Scalar> Backbone3d<T> {
    pub fn new(prefix: &str, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> ModelResult<Self> {
        cfg.validate()?;
        let stem = Conv3dLayer::new(
            &format!("{prefix}.stem"),
            cfg.in_channels,
            cfg.stem_channels,
            cfg.stem_kernel,
            cfg.stem_stride,
            cfg.stem_kernel / 2,
            rng,
        );
        let mut blocks = Vec::new();
        let per_stage = cfg.blocks_per_stage;
        for (i, (c_in, c_out, stride)) in stage_plan(cfg).into_iter().enumerate() {
            let name = format!("{prefix}.stage{}.block{}", i / per_stage, i % per_stage);
            blocks.push(BasicBlock3d::new(&name, c_in, c_out, stride, rng));
        }
        Ok(Backbone3d {
            stem,
            blocks,
            stem_pool: cfg.stem_pool,
        })
    }

    /// `[C, D, H, W]` in, `[feature_dim]` out.
    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> TensorResult<Var<'g, T>> {
        let eps = T::from_f64(NORM_EPS);
        let mut h = self.stem.forward(g, x)?.instance_norm(eps)?.relu()?;
        if self.stem_pool {
            h = h.max_pool3d(3, 2, 1)?;
        }
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        h.reduce(ReduceKind::Mean, &[1, 2, 3])
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.stem.params();
        for b in &self.blocks {
            out.extend(b.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.stem.params_mut();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out
    }
}

/// An age regressor consuming one subject's slice sequence.
pub trait AgeModel<T: Scalar> {
    fn kind(&self) -> ModelKind;
    /// Number of slices the model was constructed for.
    fn seq_len(&self) -> usize;
    /// Scalar prediction (shape `[1]`) on one subject's slices.
    fn predict<'g>(&self, g: &'g Graph<T>, slices: &[Tensor<T>]) -> ModelResult<Var<'g, T>>;
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
}

/// Total scalar parameter count of a parameter collection.
pub fn param_count<T: Scalar>(params: &[&Param<T>]) -> usize {
    params.iter().map(|p| p.numel()).sum()
}

fn check_slices<T: Scalar>(
    slices: &[Tensor<T>],
    expected_n: usize,
    in_channels: usize,
) -> ModelResult<()> {
    if slices.len() != expected_n {
        return Err(ModelError::Input {
            detail: format!("expected {expected_n} slices, got {}", slices.len()),
        });
    }
    let first = slices[0].shape().to_vec();
    if first.len() != 3 || first[0] != in_channels {
        return Err(ModelError::Input {
            detail: format!("expected [{in_channels}, H, W] slices, got {first:?}"),
        });
    }
    for (i, s) in slices.iter().enumerate() {
        if s.shape() != first.as_slice() {
            return Err(ModelError::Input {
                detail: format!(
                    "slice {i} shape {:?} differs from first slice {first:?}",
                    s.shape()
                ),
            });
        }
    }
    Ok(())
}

/// Slice-sequence network: shared 2D backbone over every slice, sequence
/// average pooling with window `pool_k`, a BiLSTM, and a linear regressor
/// on the concatenation of all BiLSTM outputs.
#[derive(Debug, Clone)]
pub struct SliceSeqAgeNet<T: Scalar> {
    backbone: Backbone2d<T>,
    fwd: LstmParams<T>,
    bwd: LstmParams<T>,
    regressor: LinearLayer<T>,
    in_channels: usize,
    n_slices: usize,
    pool_k: usize,
    hidden: usize,
}

impl<T: Scalar> SliceSeqAgeNet<T> {
    pub fn new(
        cfg: &BackboneConfig,
        n_slices: usize,
        pool_k: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> ModelResult<Self> {
        if pool_k == 0 || n_slices < pool_k {
            return Err(ModelError::Config {
                detail: format!("n_slices {n_slices} must be at least pool_k {pool_k} >= 1"),
            });
        }
        if hidden == 0 {
            return Err(ModelError::Config {
                detail: "hidden must be positive".into(),
            });
        }
        let backbone = Backbone2d::new("backbone", cfg, rng)?;
        let feat = cfg.feature_dim();
        let m = n_slices / pool_k;
        let fwd = LstmParams::new("lstm_f", feat, hidden, rng);
        let bwd = LstmParams::new("lstm_b", feat, hidden, rng);
        let regressor = LinearLayer::new("head", m * 2 * hidden, 1, rng);
        Ok(SliceSeqAgeNet {
            backbone,
            fwd,
            bwd,
            regressor,
            in_channels: cfg.in_channels,
            n_slices,
            pool_k,
            hidden,
        })
    }

    pub fn pooled_len(&self) -> usize {
        self.n_slices / self.pool_k
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Backbone features for one slice, independent of sequence position.
    pub fn slice_features<'g>(
        &self,
        g: &'g Graph<T>,
        slice: &Tensor<T>,
    ) -> TensorResult<Var<'g, T>> {
        let x = g.leaf(slice.clone(), false)?;
        self.backbone.forward(g, x)
    }
}

impl<T: Scalar> AgeModel<T> for SliceSeqAgeNet<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::SliceSeq
    }

    fn seq_len(&self) -> usize {
        self.n_slices
    }

    fn predict<'g>(&self, g: &'g Graph<T>, slices: &[Tensor<T>]) -> ModelResult<Var<'g, T>> {
        check_slices(slices, self.n_slices, self.in_channels)?;
        let mut feats = Vec::with_capacity(slices.len());
        for (i, slice) in slices.iter().enumerate() {
            g.set_stage(&format!("backbone slice {i}"));
            let x = g.leaf(slice.clone(), false)?;
            feats.push(self.backbone.forward(g, x)?);
        }
        g.set_stage("sequence pool");
        let pooled = seq_avg_pool(g, &feats, self.pool_k)?;
        g.set_stage("bilstm");
        let states = bilstm(g, &pooled, &self.fwd, &self.bwd)?;
        let features = g.concat(&states)?;
        g.set_stage("regressor");
        let out = self.regressor.forward(g, features)?;
        g.set_stage("");
        Ok(out)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.backbone.params();
        out.extend(self.fwd.params());
        out.extend(self.bwd.params());
        out.extend(self.regressor.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.backbone.params_mut();
        out.extend(self.fwd.params_mut());
        out.extend(self.bwd.params_mut());
        out.extend(self.regressor.params_mut());
        out
    }
}

/// Volumetric baseline: the slices are stacked into a single-channel 3D
/// input for a cubic-kernel residual backbone and a linear head.
#[derive(Debug, Clone)]
pub struct Volumetric3DNet<T: Scalar> {
    backbone: Backbone3d<T>,
    regressor: LinearLayer<T>,
    in_channels: usize,
    n_slices: usize,
}

impl<T: Scalar> Volumetric3DNet<T> {
    pub fn new(cfg: &BackboneConfig, n_slices: usize, rng: &mut ChaCha8Rng) -> ModelResult<Self> {
        if n_slices == 0 {
            return Err(ModelError::Config {
                detail: "n_slices must be positive".into(),
            });
        }
        let backbone = Backbone3d::new("backbone", cfg, rng)?;
        let regressor = LinearLayer::new("head", cfg.feature_dim(), 1, rng);
        Ok(Volumetric3DNet {
            backbone,
            regressor,
            in_channels: cfg.in_channels,
            n_slices,
        })
    }
}

impl<T: Scalar> AgeModel<T> for Volumetric3DNet<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Vol3d
    }

    fn seq_len(&self) -> usize {
        self.n_slices
    }

    fn predict<'g>(&self, g: &'g Graph<T>, slices: &[Tensor<T>]) -> ModelResult<Var<'g, T>> {
        check_slices(slices, self.n_slices, self.in_channels)?;
        let shape = slices[0].shape();
        let (h, w) = (shape[1], shape[2]);
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            data.extend_from_slice(s.data());
        }
        let stacked = Tensor::from_vec(&[self.in_channels, slices.len(), h, w], data)?;
        g.set_stage("backbone3d");
        let x = g.leaf(stacked, false)?;
        let feats = self.backbone.forward(g, x)?;
        g.set_stage("regressor");
        let out = self.regressor.forward(g, feats)?;
        g.set_stage("");
        Ok(out)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.backbone.params();
        out.extend(self.regressor.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.backbone.params_mut();
        out.extend(self.regressor.params_mut());
        out
    }
}

/// Constructs a freshly initialized model for a descriptor.
pub fn build_model(desc: &ModelDescriptor, seed: u64) -> ModelResult<Box<dyn AgeModel<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match desc.kind {
        ModelKind::SliceSeq => Ok(Box::new(SliceSeqAgeNet::new(
            &desc.backbone,
            desc.pipeline.n_slices,
            desc.pool_k,
            desc.hidden,
            &mut rng,
        )?)),
        ModelKind::Vol3d => Ok(Box::new(Volumetric3DNet::new(
            &desc.backbone,
            desc.pipeline.n_slices,
            &mut rng,
        )?)),
    }
}
