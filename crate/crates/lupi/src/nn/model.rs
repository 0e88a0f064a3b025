//! The four affect architectures behind one `Model` type.
//!
//! PixelNet and StudentNet are the same convolutional trunk (the student is
//! distinguished by how it is *trained*, not by its shape); PrivNet is a
//! one-hidden-layer MLP over privileged features; FusionNet runs both trunks
//! and fuses their 96-dim summaries. Every architecture exposes the
//! 96-dimensional penultimate activation alongside its output so
//! representation-matching losses can reach inside.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::layers::*;
use crate::windowing::Task;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{layer}: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: &'static str,
        expected: String,
        got: String,
    },
    #[error("{kind:?} requires {what}")]
    MissingModality { kind: ModelKind, what: &'static str },
    #[error("model config invalid: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    PixelNet,
    PrivNet,
    FusionNet,
    StudentNet,
}

impl ModelKind {
    pub fn uses_pixels(self) -> bool {
        matches!(self, ModelKind::PixelNet | ModelKind::FusionNet | ModelKind::StudentNet)
    }

    pub fn uses_privileged(self) -> bool {
        matches!(self, ModelKind::PrivNet | ModelKind::FusionNet)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::PixelNet => "pixelnet",
            ModelKind::PrivNet => "privnet",
            ModelKind::FusionNet => "fusionnet",
            ModelKind::StudentNet => "studentnet",
        };
        f.write_str(s)
    }
}

/// One convolution stage of the pixel trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
}

/// The paper-scale trunk: 32 and 48 kernels of 5x5 stride 2, then 64 and 96
/// kernels of 3x3 stride 1, each followed by 2x2 max pooling.
pub const STANDARD_CONVS: [ConvSpec; 4] = [
    ConvSpec { out_c: 32, k: 5, stride: 2 },
    ConvSpec { out_c: 48, k: 5, stride: 2 },
    ConvSpec { out_c: 64, k: 3, stride: 1 },
    ConvSpec { out_c: 96, k: 3, stride: 1 },
];

pub const PENULTIMATE_DIM: usize = 96;
pub const DROPOUT_RATE: f64 = 0.10;

/// Declarative description of a model to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub task: Task,
    /// `(channels, height, width)` of the pixel tensor, when used.
    pub pixel_shape: Option<(usize, usize, usize)>,
    /// Fused privileged feature dimension, when used.
    pub privileged_dim: Option<usize>,
    pub penultimate_dim: usize,
    pub dropout_rate: f64,
}

impl ModelSpec {
    pub fn pixelnet(task: Task, pixel_shape: (usize, usize, usize)) -> Self {
        Self {
            kind: ModelKind::PixelNet,
            task,
            pixel_shape: Some(pixel_shape),
            privileged_dim: None,
            penultimate_dim: PENULTIMATE_DIM,
            dropout_rate: DROPOUT_RATE,
        }
    }

    pub fn studentnet(task: Task, pixel_shape: (usize, usize, usize)) -> Self {
        Self { kind: ModelKind::StudentNet, ..Self::pixelnet(task, pixel_shape) }
    }

    pub fn privnet(task: Task, privileged_dim: usize) -> Self {
        Self {
            kind: ModelKind::PrivNet,
            task,
            pixel_shape: None,
            privileged_dim: Some(privileged_dim),
            penultimate_dim: PENULTIMATE_DIM,
            dropout_rate: 0.0,
        }
    }

    pub fn fusionnet(
        task: Task,
        pixel_shape: (usize, usize, usize),
        privileged_dim: usize,
    ) -> Self {
        Self {
            kind: ModelKind::FusionNet,
            task,
            pixel_shape: Some(pixel_shape),
            privileged_dim: Some(privileged_dim),
            penultimate_dim: PENULTIMATE_DIM,
            dropout_rate: 0.0,
        }
    }

    pub fn for_kind(
        kind: ModelKind,
        task: Task,
        pixel_shape: (usize, usize, usize),
        privileged_dim: usize,
    ) -> Self {
        match kind {
            ModelKind::PixelNet => Self::pixelnet(task, pixel_shape),
            ModelKind::StudentNet => Self::studentnet(task, pixel_shape),
            ModelKind::PrivNet => Self::privnet(task, privileged_dim),
            ModelKind::FusionNet => Self::fusionnet(task, pixel_shape, privileged_dim),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::Classification => 2,
            Task::Regression => 1,
        }
    }

    /// Build with the paper's convolution trunk.
    pub fn build(&self, seed: u64) -> Result<Model, ModelError> {
        Model::build_with_convs(self.clone(), &STANDARD_CONVS, seed)
    }
}

/// Batch inputs by modality.
pub enum BatchInput<'a> {
    Pixels(&'a Array4<f64>),
    Features(&'a Array2<f64>),
    Both {
        pixels: &'a Array4<f64>,
        features: &'a Array2<f64>,
    },
}

impl<'a> BatchInput<'a> {
    fn pixels(&self) -> Option<&'a Array4<f64>> {
        match self {
            BatchInput::Pixels(p) => Some(p),
            BatchInput::Both { pixels, .. } => Some(pixels),
            BatchInput::Features(_) => None,
        }
    }

    fn features(&self) -> Option<&'a Array2<f64>> {
        match self {
            BatchInput::Features(f) => Some(f),
            BatchInput::Both { features, .. } => Some(features),
            BatchInput::Pixels(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Logits (classification, 2 columns) or scalar predictions (1 column).
    pub output: Array2<f64>,
    /// Penultimate activations, one row per sample.
    pub penultimate: Array2<f64>,
    /// Softmax of the logits; classification only.
    pub probabilities: Option<Array2<f64>>,
}

impl ForwardOutput {
    /// Scalar predictions for regression output.
    pub fn scalars(&self) -> Vec<f64> {
        self.output.column(0).to_vec()
    }

    /// Argmax classes for classification output.
    pub fn classes(&self) -> Vec<crate::metrics::Class> {
        self.output
            .rows()
            .into_iter()
            .map(|r| {
                if r[1] > r[0] {
                    crate::metrics::Class::High
                } else {
                    crate::metrics::Class::Low
                }
            })
            .collect()
    }
}

#[derive(Debug)]
struct PixelTower {
    convs: Vec<Conv2d>,
    fc: Dense,
}

struct TowerCache {
    conv: Vec<(ConvCache, Vec<bool>, PoolCache)>,
    flat_dim: usize,
    last_shape: (usize, usize, usize, usize),
    fc_cache: DenseCache,
    fc_mask: Vec<bool>,
}

impl PixelTower {
    fn forward(&self, x: &Array4<f64>) -> (Array2<f64>, TowerCache) {
        let mut act = x.clone();
        let mut stages = Vec::with_capacity(self.convs.len());
        let pool = MaxPool2;
        for conv in &self.convs {
            let (mut y, conv_cache) = conv.forward(&act);
            let mask = relu4(&mut y);
            let (pooled, pool_cache) = pool.forward(&y);
            stages.push((conv_cache, mask, pool_cache));
            act = pooled;
        }
        let (b, c, h, w) = act.dim();
        let flat = act
            .into_shape_with_order((b, c * h * w))
            .expect("standard layout");
        let (mut out, fc_cache) = self.fc.forward(&flat);
        let fc_mask = relu2(&mut out);
        (
            out,
            TowerCache {
                conv: stages,
                flat_dim: c * h * w,
                last_shape: (b, c, h, w),
                fc_cache,
                fc_mask,
            },
        )
    }

    /// Backward through fc and the conv stack; input gradients are not
    /// needed (pixels are leaves), so the first conv's `dx` is dropped.
    fn backward(&self, cache: &TowerCache, mut d_out: Array2<f64>, grads: &mut Vec<Vec<f64>>) {
        let pool = MaxPool2;
        relu2_backward(&mut d_out, &cache.fc_mask);
        let (d_flat, dw_fc, db_fc) = self.fc.backward(&cache.fc_cache, &d_out);
        let (b, c, h, w) = cache.last_shape;
        debug_assert_eq!(cache.flat_dim, c * h * w);
        let mut d_act = d_flat
            .into_shape_with_order((b, c, h, w))
            .expect("standard layout");
        let mut conv_grads = Vec::with_capacity(self.convs.len());
        for (conv, (conv_cache, mask, pool_cache)) in
            self.convs.iter().zip(&cache.conv).rev()
        {
            let mut d_pre = pool.backward(pool_cache, &d_act);
            relu4_backward(&mut d_pre, mask);
            let (dx, dw, db) = conv.backward(conv_cache, &d_pre);
            conv_grads.push((dw, db));
            d_act = dx;
        }
        // canonical order: conv1..conv4 then fc
        for (dw, db) in conv_grads.into_iter().rev() {
            grads.push(dw.into_raw_vec_and_offset().0);
            grads.push(db.into_raw_vec_and_offset().0);
        }
        grads.push(dw_fc.into_raw_vec_and_offset().0);
        grads.push(db_fc.into_raw_vec_and_offset().0);
    }

    fn n_slots(&self) -> usize {
        self.convs.len() * 2 + 2
    }
}

/// A built network: parameters plus the wiring for its kind.
#[derive(Debug)]
pub struct Model {
    pub spec: ModelSpec,
    conv_specs: Vec<ConvSpec>,
    pixel: Option<PixelTower>,
    priv_fc: Option<Dense>,
    fuse: Option<Dense>,
    dropout: Option<Dropout>,
    head: Dense,
}

/// Caches from a train-mode forward pass, consumed by [`Model::backward`].
pub struct ForwardCache {
    tower: Option<TowerCache>,
    priv_cache: Option<DenseCache>,
    priv_mask: Option<Vec<bool>>,
    fuse_cache: Option<DenseCache>,
    fuse_mask: Option<Vec<bool>>,
    dropout_mask: Option<Vec<bool>>,
    head_cache: DenseCache,
}

/// Per-parameter-slot gradients in the model's canonical slot order.
pub struct Gradients {
    pub slots: Vec<Vec<f64>>,
}

fn init_dense(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Dense {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let weight = Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-bound..bound));
    Dense { weight, bias: Array1::zeros(out_dim) }
}

fn init_conv(rng: &mut ChaCha8Rng, spec: ConvSpec, in_c: usize) -> Conv2d {
    let fan_in = in_c * spec.k * spec.k;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let weight =
        Array2::from_shape_fn((spec.out_c, fan_in), |_| rng.random_range(-bound..bound));
    Conv2d {
        weight,
        bias: Array1::zeros(spec.out_c),
        in_c,
        kh: spec.k,
        kw: spec.k,
        stride: spec.stride,
    }
}

/// Spatial size after the conv/pool cascade, or the failing layer.
pub fn propagate_shape(
    convs: &[ConvSpec],
    mut h: usize,
    mut w: usize,
) -> Result<(usize, usize), (usize, String)> {
    for (i, c) in convs.iter().enumerate() {
        if h == 0 || w == 0 {
            return Err((i, format!("conv{}: input collapsed to {h}x{w}", i + 1)));
        }
        h = h.div_ceil(c.stride);
        w = w.div_ceil(c.stride);
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    if h == 0 || w == 0 {
        return Err((convs.len(), format!("pooling collapsed output to {h}x{w}")));
    }
    Ok((h, w))
}

impl Model {
    /// Build a network with an explicit convolution trunk. The standard
    /// architectures go through [`ModelSpec::build`]; tests use this to make
    /// tiny trunks with the same wiring.
    pub fn build_with_convs(
        spec: ModelSpec,
        convs: &[ConvSpec],
        seed: u64,
    ) -> Result<Model, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if spec.penultimate_dim == 0 {
            return Err(ModelError::Config("penultimate_dim must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&spec.dropout_rate) {
            return Err(ModelError::Config("dropout_rate must be in [0, 1)".into()));
        }

        let pixel = if spec.kind.uses_pixels() {
            let (c, h, w) = spec.pixel_shape.ok_or(ModelError::MissingModality {
                kind: spec.kind,
                what: "a pixel input shape",
            })?;
            if c == 0 {
                return Err(ModelError::Config("pixel channels must be >= 1".into()));
            }
            if h < 8 || w < 8 {
                return Err(ModelError::ShapeMismatch {
                    layer: "conv1",
                    expected: "input of at least 8x8".into(),
                    got: format!("{h}x{w}"),
                });
            }
            let (fh, fw) = propagate_shape(convs, h, w)
                .map_err(|(_, msg)| ModelError::Config(msg))?;
            let mut layers = Vec::with_capacity(convs.len());
            let mut in_c = c;
            for cs in convs {
                layers.push(init_conv(&mut rng, *cs, in_c));
                in_c = cs.out_c;
            }
            let flat = in_c * fh * fw;
            let fc = init_dense(&mut rng, spec.penultimate_dim, flat);
            Some(PixelTower { convs: layers, fc })
        } else {
            None
        };

        let priv_fc = if spec.kind.uses_privileged() {
            let dim = spec.privileged_dim.ok_or(ModelError::MissingModality {
                kind: spec.kind,
                what: "a privileged feature dimension",
            })?;
            if dim == 0 {
                return Err(ModelError::Config("privileged_dim must be >= 1".into()));
            }
            Some(init_dense(&mut rng, spec.penultimate_dim, dim))
        } else {
            None
        };

        let fuse = if spec.kind == ModelKind::FusionNet {
            Some(init_dense(&mut rng, spec.penultimate_dim, 2 * spec.penultimate_dim))
        } else {
            None
        };

        let dropout = if matches!(spec.kind, ModelKind::PixelNet | ModelKind::StudentNet)
            && spec.dropout_rate > 0.0
        {
            Some(Dropout { rate: spec.dropout_rate })
        } else {
            None
        };

        let head = init_dense(&mut rng, spec.output_dim(), spec.penultimate_dim);

        Ok(Model {
            conv_specs: convs.to_vec(),
            spec,
            pixel,
            priv_fc,
            fuse,
            dropout,
            head,
        })
    }

    pub fn conv_specs(&self) -> &[ConvSpec] {
        &self.conv_specs
    }

    fn check_input(&self, input: &BatchInput) -> Result<(), ModelError> {
        if self.spec.kind.uses_pixels() {
            let p = input.pixels().ok_or(ModelError::MissingModality {
                kind: self.spec.kind,
                what: "pixel tensors",
            })?;
            let (c, h, w) = self.spec.pixel_shape.expect("validated at build");
            let (_, pc, ph, pw) = p.dim();
            if (pc, ph, pw) != (c, h, w) {
                return Err(ModelError::ShapeMismatch {
                    layer: "input",
                    expected: format!("pixel batch (_, {c}, {h}, {w})"),
                    got: format!("(_, {pc}, {ph}, {pw})"),
                });
            }
        }
        if self.spec.kind.uses_privileged() {
            let f = input.features().ok_or(ModelError::MissingModality {
                kind: self.spec.kind,
                what: "privileged features",
            })?;
            let dim = self.spec.privileged_dim.expect("validated at build");
            if f.ncols() != dim {
                return Err(ModelError::ShapeMismatch {
                    layer: "input",
                    expected: format!("feature batch (_, {dim})"),
                    got: format!("(_, {})", f.ncols()),
                });
            }
        }
        Ok(())
    }

    fn run(
        &self,
        input: &BatchInput,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ForwardOutput, ForwardCache), ModelError> {
        self.check_input(input)?;
        let mut tower_cache = None;
        let mut priv_cache = None;
        let mut priv_mask = None;
        let mut fuse_cache = None;
        let mut fuse_mask = None;
        let mut dropout_mask = None;

        let pixel_out = match &self.pixel {
            Some(tower) => {
                let (out, cache) = tower.forward(input.pixels().expect("checked"));
                tower_cache = Some(cache);
                Some(out)
            }
            None => None,
        };
        let priv_out = match &self.priv_fc {
            Some(fc) => {
                let (mut out, cache) = fc.forward(input.features().expect("checked"));
                priv_mask = Some(relu2(&mut out));
                priv_cache = Some(cache);
                Some(out)
            }
            None => None,
        };

        let mut penult = match self.spec.kind {
            ModelKind::PixelNet | ModelKind::StudentNet => pixel_out.expect("pixel tower built"),
            ModelKind::PrivNet => priv_out.expect("priv stream built"),
            ModelKind::FusionNet => {
                let p = pixel_out.expect("pixel tower built");
                let v = priv_out.expect("priv stream built");
                let concat = ndarray::concatenate(Axis(1), &[p.view(), v.view()])
                    .expect("same batch")
                    .as_standard_layout()
                    .to_owned();
                let fc = self.fuse.as_ref().expect("fusion layer built");
                let (mut out, cache) = fc.forward(&concat);
                fuse_mask = Some(relu2(&mut out));
                fuse_cache = Some(cache);
                out
            }
        };

        if mode == Mode::Train {
            if let Some(dropout) = &self.dropout {
                let rng = rng
                    .as_deref_mut()
                    .expect("train-mode forward requires an RNG when dropout is active");
                dropout_mask = Some(dropout.forward_train(&mut penult, rng));
            }
        }

        let (output, head_cache) = self.head.forward(&penult);
        let probabilities = match self.spec.task {
            Task::Classification => Some(softmax_rows(&output)),
            Task::Regression => None,
        };

        Ok((
            ForwardOutput { output, penultimate: penult, probabilities },
            ForwardCache {
                tower: tower_cache,
                priv_cache,
                priv_mask,
                fuse_cache,
                fuse_mask,
                dropout_mask,
                head_cache,
            },
        ))
    }

    /// Deterministic inference pass: dropout disabled, no caches kept.
    pub fn eval_forward(&self, input: &BatchInput) -> Result<ForwardOutput, ModelError> {
        self.run(input, Mode::Eval, None).map(|(out, _)| out)
    }

    /// Train-mode pass keeping every cache needed for [`Model::backward`].
    pub fn train_forward(
        &self,
        input: &BatchInput,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ForwardOutput, ForwardCache), ModelError> {
        self.run(input, Mode::Train, Some(rng))
    }

    /// Backpropagate `d_output` (gradient w.r.t. logits/scalars) plus an
    /// optional direct gradient on the penultimate activations, returning
    /// parameter gradients in canonical slot order.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_output: &Array2<f64>,
        d_penult_extra: Option<&Array2<f64>>,
    ) -> Gradients {
        let (d_head_in, dw_head, db_head) = self.head.backward(&cache.head_cache, d_output);
        let mut d_penult = d_head_in;
        if let Some(extra) = d_penult_extra {
            d_penult += extra;
        }
        if let (Some(dropout), Some(mask)) = (&self.dropout, &cache.dropout_mask) {
            dropout.backward(&mut d_penult, mask);
        }

        let mut slots: Vec<Vec<f64>> = Vec::new();
        match self.spec.kind {
            ModelKind::PixelNet | ModelKind::StudentNet => {
                let tower = self.pixel.as_ref().expect("pixel tower built");
                tower.backward(cache.tower.as_ref().expect("cache"), d_penult, &mut slots);
            }
            ModelKind::PrivNet => {
                let fc = self.priv_fc.as_ref().expect("priv stream built");
                let mut d = d_penult;
                relu2_backward(&mut d, cache.priv_mask.as_ref().expect("cache"));
                let (_, dw, db) = fc.backward(cache.priv_cache.as_ref().expect("cache"), &d);
                slots.push(dw.into_raw_vec_and_offset().0);
                slots.push(db.into_raw_vec_and_offset().0);
            }
            ModelKind::FusionNet => {
                let mut d = d_penult;
                relu2_backward(&mut d, cache.fuse_mask.as_ref().expect("cache"));
                let fuse = self.fuse.as_ref().expect("fusion layer built");
                let (d_concat, dw_fuse, db_fuse) =
                    fuse.backward(cache.fuse_cache.as_ref().expect("cache"), &d);
                let split = self.spec.penultimate_dim;
                let d_pixel = d_concat.slice(ndarray::s![.., ..split]).to_owned();
                let mut d_priv = d_concat.slice(ndarray::s![.., split..]).to_owned();

                let tower = self.pixel.as_ref().expect("pixel tower built");
                tower.backward(cache.tower.as_ref().expect("cache"), d_pixel, &mut slots);

                relu2_backward(&mut d_priv, cache.priv_mask.as_ref().expect("cache"));
                let fc = self.priv_fc.as_ref().expect("priv stream built");
                let (_, dw_priv, db_priv) =
                    fc.backward(cache.priv_cache.as_ref().expect("cache"), &d_priv);
                slots.push(dw_priv.into_raw_vec_and_offset().0);
                slots.push(db_priv.into_raw_vec_and_offset().0);
                slots.push(dw_fuse.into_raw_vec_and_offset().0);
                slots.push(db_fuse.into_raw_vec_and_offset().0);
            }
        }
        slots.push(dw_head.into_raw_vec_and_offset().0);
        slots.push(db_head.into_raw_vec_and_offset().0);
        Gradients { slots }
    }

    /// Parameter slot views in canonical order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        if let Some(tower) = &self.pixel {
            for conv in &tower.convs {
                out.push(conv.weight.as_slice().expect("standard layout"));
                out.push(conv.bias.as_slice().expect("standard layout"));
            }
            out.push(tower.fc.weight.as_slice().expect("standard layout"));
            out.push(tower.fc.bias.as_slice().expect("standard layout"));
        }
        if let Some(fc) = &self.priv_fc {
            out.push(fc.weight.as_slice().expect("standard layout"));
            out.push(fc.bias.as_slice().expect("standard layout"));
        }
        if let Some(fc) = &self.fuse {
            out.push(fc.weight.as_slice().expect("standard layout"));
            out.push(fc.bias.as_slice().expect("standard layout"));
        }
        out.push(self.head.weight.as_slice().expect("standard layout"));
        out.push(self.head.bias.as_slice().expect("standard layout"));
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        if let Some(tower) = &mut self.pixel {
            for conv in &mut tower.convs {
                out.push(conv.weight.as_slice_mut().expect("standard layout"));
                out.push(conv.bias.as_slice_mut().expect("standard layout"));
            }
            out.push(tower.fc.weight.as_slice_mut().expect("standard layout"));
            out.push(tower.fc.bias.as_slice_mut().expect("standard layout"));
        }
        if let Some(fc) = &mut self.priv_fc {
            out.push(fc.weight.as_slice_mut().expect("standard layout"));
            out.push(fc.bias.as_slice_mut().expect("standard layout"));
        }
        if let Some(fc) = &mut self.fuse {
            out.push(fc.weight.as_slice_mut().expect("standard layout"));
            out.push(fc.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.head.weight.as_slice_mut().expect("standard layout"));
        out.push(self.head.bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// SHA-256 of all parameter bytes; the frozen-teacher contract is
    /// checked by comparing this before and after student training.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for slice in self.param_slices() {
            for v in slice {
                hasher.update(v.to_le_bytes());
            }
        }
        crate::corpus::hex_digest(hasher)
    }

    /// Flat copy of all parameters (for best-epoch snapshots).
    pub fn snapshot(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for s in self.param_slices() {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn restore(&mut self, snapshot: &[f64]) {
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            slice.copy_from_slice(&snapshot[offset..offset + slice.len()]);
            offset += slice.len();
        }
        assert_eq!(offset, snapshot.len(), "snapshot length mismatch");
    }

    /// Number of parameter slots (weight/bias pairs) in canonical order.
    pub fn n_slots(&self) -> usize {
        let mut n = 2; // head
        if let Some(t) = &self.pixel {
            n += t.n_slots();
        }
        if self.priv_fc.is_some() {
            n += 2;
        }
        if self.fuse.is_some() {
            n += 2;
        }
        n
    }
}

/// Row-wise stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

// --- checkpointing ---------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"LUPICKPT";
const CKPT_VERSION: u32 = 1;

/// Provenance carried inside a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Hash of the training run configuration and data split.
    pub run_hash: String,
    pub note: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    spec: ModelSpec,
    conv_specs: Vec<ConvSpec>,
    meta: CheckpointMeta,
    n_params: u64,
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        version: CKPT_VERSION,
        spec: model.spec.clone(),
        conv_specs: model.conv_specs.clone(),
        meta: meta.clone(),
        n_params: model.param_count() as u64,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| ModelError::Checkpoint(format!("header encode: {e}")))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_u32::<LittleEndian>(CKPT_VERSION)?;
    f.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
    f.write_all(&header_bytes)?;
    for slice in model.param_slices() {
        for v in slice {
            f.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta), ModelError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = f.read_u32::<LittleEndian>()?;
    if version != CKPT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = f.read_u64::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| ModelError::Checkpoint(format!("header decode: {e}")))?;
    let mut model = Model::build_with_convs(header.spec, &header.conv_specs, 0)?;
    if model.param_count() as u64 != header.n_params {
        return Err(ModelError::Checkpoint(format!(
            "parameter count {} does not match header {}",
            model.param_count(),
            header.n_params
        )));
    }
    let mut params = vec![0.0f64; header.n_params as usize];
    for v in &mut params {
        *v = f.read_f64::<LittleEndian>()?;
    }
    model.restore(&params);
    Ok((model, header.meta))
}

/// Load and require a specific spec, for consumers that know what they need.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ModelSpec,
) -> Result<(Model, CheckpointMeta), ModelError> {
    let (model, meta) = load_checkpoint(path)?;
    if &model.spec != expected {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint spec {:?} does not match expected {:?}",
            model.spec, expected
        )));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rand_pixels(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
        Array4::from_shape_fn((b, c, h, w), |_| rng.random::<f64>())
    }

    fn rand_features(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((b, d), |_| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn pixelnet_shapes_at_paper_and_desk_scale() {
        for (h, w) in [(320, 180), (32, 18)] {
            let spec = ModelSpec::pixelnet(Task::Classification, (5, h, w));
            let model = spec.build(1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x = rand_pixels(&mut rng, 2, 5, h, w);
            let out = model.eval_forward(&BatchInput::Pixels(&x)).unwrap();
            assert_eq!(out.output.dim(), (2, 2));
            assert_eq!(out.penultimate.dim(), (2, 96));
            let probs = out.probabilities.unwrap();
            for row in probs.rows() {
                assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-9);
                assert!(row.iter().all(|p| *p >= 0.0));
            }
        }
    }

    #[test]
    fn pixelnet_regression_outputs_scalar() {
        let spec = ModelSpec::pixelnet(Task::Regression, (5, 32, 18));
        let model = spec.build(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_pixels(&mut rng, 3, 5, 32, 18);
        let out = model.eval_forward(&BatchInput::Pixels(&x)).unwrap();
        assert_eq!(out.output.dim(), (3, 1));
        assert!(out.probabilities.is_none());
    }

    #[test]
    fn too_small_input_names_conv1() {
        let spec = ModelSpec::pixelnet(Task::Classification, (5, 4, 4));
        let err = spec.build(1).unwrap_err();
        assert!(err.to_string().contains("conv1"), "got: {err}");
    }

    #[test]
    fn privnet_dimensions() {
        for dim in [289, 65, 1] {
            let spec = ModelSpec::privnet(Task::Classification, dim);
            let model = spec.build(3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let f = rand_features(&mut rng, 4, dim);
            let out = model.eval_forward(&BatchInput::Features(&f)).unwrap();
            assert_eq!(out.output.dim(), (4, 2));
            assert_eq!(out.penultimate.dim(), (4, 96));
        }
    }

    #[test]
    fn fusionnet_requires_both_modalities() {
        let spec = ModelSpec::fusionnet(Task::Regression, (5, 32, 18), 16);
        let model = spec.build(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_pixels(&mut rng, 2, 5, 32, 18);
        let f = rand_features(&mut rng, 2, 16);
        let out = model
            .eval_forward(&BatchInput::Both { pixels: &x, features: &f })
            .unwrap();
        assert_eq!(out.output.dim(), (2, 1));
        assert_eq!(out.penultimate.dim(), (2, 96));

        assert!(matches!(
            model.eval_forward(&BatchInput::Pixels(&x)),
            Err(ModelError::MissingModality { .. })
        ));
    }

    #[test]
    fn zeroed_privileged_path_makes_fusion_pixel_only() {
        // ablation with constructed weights: kill the privileged half of the
        // fusion layer and the output must ignore feature changes
        let spec = ModelSpec::fusionnet(Task::Regression, (5, 32, 18), 8);
        let mut model = spec.build(7).unwrap();
        let split = model.spec.penultimate_dim;
        model
            .fuse
            .as_mut()
            .unwrap()
            .weight
            .slice_mut(ndarray::s![.., split..])
            .fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_pixels(&mut rng, 2, 5, 32, 18);
        let f1 = rand_features(&mut rng, 2, 8);
        let f2 = rand_features(&mut rng, 2, 8);
        let o1 = model.eval_forward(&BatchInput::Both { pixels: &x, features: &f1 }).unwrap();
        let o2 = model.eval_forward(&BatchInput::Both { pixels: &x, features: &f2 }).unwrap();
        assert_eq!(o1.output, o2.output);
    }

    #[test]
    fn student_and_pixelnet_have_identical_parameter_counts() {
        let student = ModelSpec::studentnet(Task::Classification, (5, 32, 18))
            .build(9)
            .unwrap();
        let pixel = ModelSpec::pixelnet(Task::Classification, (5, 32, 18))
            .build(9)
            .unwrap();
        assert_eq!(student.param_count(), pixel.param_count());
        // same seed, same init
        assert_eq!(student.param_hash(), pixel.param_hash());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let spec = ModelSpec::pixelnet(Task::Classification, (5, 32, 18));
        let model = spec.build(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_pixels(&mut rng, 2, 5, 32, 18);
        let a = model.eval_forward(&BatchInput::Pixels(&x)).unwrap();
        let b = model.eval_forward(&BatchInput::Pixels(&x)).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.penultimate, b.penultimate);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let z = Array2::zeros((1, 2));
        let p = softmax_rows(&z);
        assert_relative_eq!(p[(0, 0)], 0.5);
        assert_relative_eq!(p[(0, 1)], 0.5);
    }

    #[test]
    fn wrong_shape_batch_is_rejected() {
        let spec = ModelSpec::pixelnet(Task::Classification, (5, 32, 18));
        let model = spec.build(12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_pixels(&mut rng, 2, 5, 16, 9);
        assert!(matches!(
            model.eval_forward(&BatchInput::Pixels(&x)),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gradients_come_back_in_canonical_slot_order() {
        let spec = ModelSpec::fusionnet(Task::Classification, (2, 8, 8), 4);
        let tiny = [
            ConvSpec { out_c: 2, k: 3, stride: 2 },
            ConvSpec { out_c: 3, k: 3, stride: 1 },
        ];
        let model = Model::build_with_convs(
            ModelSpec { penultimate_dim: 5, ..spec },
            &tiny,
            14,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_pixels(&mut rng, 3, 2, 8, 8);
        let f = rand_features(&mut rng, 3, 4);
        let (out, cache) = model
            .train_forward(&BatchInput::Both { pixels: &x, features: &f }, &mut rng)
            .unwrap();
        let d_out = Array2::from_elem(out.output.dim(), 1.0);
        let grads = model.backward(&cache, &d_out, None);
        assert_eq!(grads.slots.len(), model.n_slots());
        for (g, p) in grads.slots.iter().zip(model.param_slices()) {
            assert_eq!(g.len(), p.len());
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_params_and_validates_spec() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::privnet(Task::Regression, 6);
        let model = spec.build(21).unwrap();
        let meta = CheckpointMeta { seed: 21, run_hash: "abc".into(), note: "test".into() };
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, &meta).unwrap();
        let (back, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(back.param_hash(), model.param_hash());
        assert_eq!(meta2.run_hash, "abc");
        assert!(load_checkpoint_expecting(&path, &spec).is_ok());
        let other = ModelSpec::privnet(Task::Regression, 7);
        assert!(load_checkpoint_expecting(&path, &other).is_err());
    }
}
