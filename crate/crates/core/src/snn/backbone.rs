use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::lif::{lif_sequence, LifConfig};
use crate::error::{shape_err, Error, Result};
use crate::events::{FrameTensor, CHANNELS};
use crate::tensor::{BatchNormStats, Binding, ConvSpec, ParamStore, Scalar, Tensor, Var};

/// Whether batch norm normalizes with batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Shape of the spiking encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// 2x2 max pool after the stem.
    pub stem_pool: bool,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub embed_dim: usize,
    /// `(height, width)` of the input frames.
    pub resolution: (usize, usize),
    pub lif: LifConfig,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: CHANNELS,
            stem_channels: 32,
            stem_stride: 2,
            stem_pool: true,
            stage_widths: vec![32, 64, 128],
            blocks_per_stage: vec![1, 1, 1],
            embed_dim: 128,
            resolution: (32, 32),
            lif: LifConfig::default(),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.in_channels != CHANNELS {
            return cfg(format!("backbone input must have 2 channels, got {}", self.in_channels));
        }
        if self.embed_dim == 0 || self.stem_channels == 0 || self.stem_stride == 0 {
            return cfg("embed_dim, stem_channels and stem_stride must be positive".into());
        }
        if self.stage_widths.is_empty()
            || self.stage_widths.len() != self.blocks_per_stage.len()
            || self.stage_widths.contains(&0)
            || self.blocks_per_stage.contains(&0)
        {
            return cfg(format!(
                "stage widths {:?} and block counts {:?} must be non-empty, positive and aligned",
                self.stage_widths, self.blocks_per_stage
            ));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return cfg(format!("resolution {:?}", self.resolution));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return cfg("bn_momentum must lie in [0, 1] and bn_eps be positive".into());
        }
        self.lif.validate()
    }

    /// `(prefix, in, out, stride, projected_shortcut)` for every SEW block.
    fn blocks(&self) -> Vec<(String, usize, usize, usize, bool)> {
        let mut out = Vec::new();
        let mut cin = self.stem_channels;
        for (s, (&width, &count)) in self.stage_widths.iter().zip(&self.blocks_per_stage).enumerate() {
            for b in 0..count {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let project = stride != 1 || cin != width;
                out.push((format!("stage{s}.block{b}"), cin, width, stride, project));
                cin = width;
            }
        }
        out
    }
}

fn kaiming<F: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<F> {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std-dev");
    Tensor::from_fn(shape.to_vec(), |_| F::of(normal.sample(rng)))
}

fn uniform<F: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<F> {
    Tensor::from_fn(shape.to_vec(), |_| F::of(rng.random_range(-bound..=bound)))
}

fn insert_bn<F: Scalar>(store: &mut ParamStore<F>, name: &str, c: usize) {
    store.insert_param(&format!("{name}.gamma"), Tensor::full([c], F::one()));
    store.insert_param(&format!("{name}.beta"), Tensor::zeros([c]));
    store.insert_buffer(&format!("{name}.running_mean"), Tensor::zeros([c]));
    store.insert_buffer(&format!("{name}.running_var"), Tensor::full([c], F::one()));
}

/// Dense layer `name.weight (out, in)`, `name.bias (out)`.
pub(crate) fn insert_linear<F: Scalar>(
    store: &mut ParamStore<F>,
    name: &str,
    input: usize,
    output: usize,
    rng: &mut impl Rng,
) {
    let bound = 1.0 / (input as f64).sqrt();
    store.insert_param(&format!("{name}.weight"), uniform(&[output, input], bound, rng));
    store.insert_param(&format!("{name}.bias"), uniform(&[output], bound, rng));
}

/// Applies a dense layer to the last axis of a `(T, N, C)` tensor.
pub(crate) fn linear_tnc<'t, F: Scalar>(
    bind: &Binding<'t, F>,
    name: &str,
    x: Var<'t, F>,
) -> Result<Var<'t, F>> {
    let shape = x.shape();
    let &[t, n, c] = shape.as_slice() else {
        return Err(shape_err!("expected (T, N, C), got {:?}", shape));
    };
    let w = bind.var(&format!("{name}.weight"))?;
    let b = bind.var(&format!("{name}.bias"))?;
    let out = w.shape()[0];
    x.reshape([t * n, c])?.linear(w, Some(b))?.reshape([t, n, out])
}

/// Batch-norm statistics gathered during a training-mode pass, keyed by
/// layer name.
pub type BnUpdates<F> = Vec<(String, BatchNormStats<F>)>;

/// Folds batch statistics into the running buffers of `store`.
pub fn apply_bn_updates<F: Scalar>(
    store: &mut ParamStore<F>,
    updates: &BnUpdates<F>,
    momentum: f64,
) -> Result<()> {
    for (name, stats) in updates {
        let mut mean = store.get(&format!("{name}.running_mean"))?.clone();
        let var = store.get_mut(&format!("{name}.running_var"))?;
        stats.update_running(mean.data_mut(), var.data_mut(), F::of(momentum));
        *store.get_mut(&format!("{name}.running_mean"))? = mean;
    }
    Ok(())
}

/// Forward-pass state shared by every layer of one encoder call.
pub(crate) struct Ctx<'a, 't, F: Scalar> {
    pub bind: &'a Binding<'t, F>,
    pub store: &'a ParamStore<F>,
    pub mode: BnMode,
    pub steps: usize,
    pub lif: LifConfig,
    pub eps: F,
    pub updates: BnUpdates<F>,
}

impl<'t, F: Scalar> Ctx<'_, 't, F> {
    pub fn conv(&self, x: Var<'t, F>, name: &str, spec: ConvSpec) -> Result<Var<'t, F>> {
        x.conv2d(self.bind.var(&format!("{name}.weight"))?, None, spec)
    }

    pub fn bn(&mut self, x: Var<'t, F>, name: &str) -> Result<Var<'t, F>> {
        let gamma = self.bind.var(&format!("{name}.gamma"))?;
        let beta = self.bind.var(&format!("{name}.beta"))?;
        match self.mode {
            BnMode::Train => {
                let (y, stats) = x.batch_norm(gamma, beta, None, self.eps)?;
                if let Some(stats) = stats {
                    self.updates.push((name.to_string(), stats));
                }
                Ok(y)
            }
            BnMode::Eval => {
                let rm = self.store.get(&format!("{name}.running_mean"))?;
                let rv = self.store.get(&format!("{name}.running_var"))?;
                Ok(x.batch_norm(gamma, beta, Some((rm.data(), rv.data())), self.eps)?.0)
            }
        }
    }

    /// Spiking neurons over a `(T*N, ...)` activation in time-major order.
    pub fn sn(&self, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let shape = x.shape();
        let total: usize = shape.iter().product();
        let seq = x.reshape([self.steps, total / self.steps.max(1)])?;
        lif_sequence(seq, &self.lif)?.reshape(shape)
    }

    pub fn conv_bn_sn(
        &mut self,
        x: Var<'t, F>,
        conv: &str,
        bn: &str,
        spec: ConvSpec,
    ) -> Result<Var<'t, F>> {
        let y = self.conv(x, conv, spec)?;
        let y = self.bn(y, bn)?;
        self.sn(y)
    }

    /// `SN(BN(conv(SN(BN(conv(x)))))) + shortcut(x)`.
    pub fn sew_block(
        &mut self,
        x: Var<'t, F>,
        prefix: &str,
        stride: usize,
        project: bool,
    ) -> Result<Var<'t, F>> {
        let p = |s: &str| format!("{prefix}.{s}");
        let a = self.conv_bn_sn(x, &p("conv1"), &p("bn1"), ConvSpec::new(stride, 1))?;
        let b = self.conv_bn_sn(a, &p("conv2"), &p("bn2"), ConvSpec::new(1, 1))?;
        let shortcut = if project {
            self.conv_bn_sn(x, &p("down.conv"), &p("down.bn"), ConvSpec::new(stride, 0))?
        } else {
            x
        };
        if b.shape() != shortcut.shape() {
            return Err(shape_err!(
                "{prefix}: residual {:?} vs shortcut {:?}",
                b.shape(),
                shortcut.shape()
            ));
        }
        b.add(shortcut)
    }
}

/// Embeddings of one encoder pass.
pub struct EncoderOutput<'t, F: Scalar> {
    /// `(T, N, C)`.
    pub embeddings: Var<'t, F>,
    pub bn_updates: BnUpdates<F>,
}

/// SEW-ResNet style spiking encoder with ADD residual connections.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Backbone { cfg })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Fresh parameters: Kaiming-normal convolutions, unit batch norm.
    pub fn init_params<F: Scalar>(&self, rng: &mut impl Rng) -> ParamStore<F> {
        let c = &self.cfg;
        let mut store = ParamStore::new();
        store.insert_param("stem.conv.weight", kaiming(&[c.stem_channels, c.in_channels, 3, 3], rng));
        insert_bn(&mut store, "stem.bn", c.stem_channels);
        for (prefix, cin, cout, _, project) in c.blocks() {
            store.insert_param(&format!("{prefix}.conv1.weight"), kaiming(&[cout, cin, 3, 3], rng));
            insert_bn(&mut store, &format!("{prefix}.bn1"), cout);
            store.insert_param(&format!("{prefix}.conv2.weight"), kaiming(&[cout, cout, 3, 3], rng));
            insert_bn(&mut store, &format!("{prefix}.bn2"), cout);
            if project {
                store.insert_param(&format!("{prefix}.down.conv.weight"), kaiming(&[cout, cin, 1, 1], rng));
                insert_bn(&mut store, &format!("{prefix}.down.bn"), cout);
            }
        }
        let last = *c.stage_widths.last().expect("validated non-empty");
        insert_linear(&mut store, "fc", last, c.embed_dim, rng);
        store
    }

    /// Encodes `(T, N, 2, H, W)` frames into `(T, N, C)` embeddings. Neuron
    /// state starts at rest on every call.
    pub fn forward<'t, F: Scalar>(
        &self,
        bind: &Binding<'t, F>,
        store: &ParamStore<F>,
        frames: Var<'t, F>,
        mode: BnMode,
    ) -> Result<EncoderOutput<'t, F>> {
        let c = &self.cfg;
        let shape = frames.shape();
        let &[t, n, ch, h, w] = shape.as_slice() else {
            return Err(shape_err!("expected (T, N, 2, H, W) frames, got {:?}", shape));
        };
        if ch != c.in_channels || (h, w) != c.resolution {
            return Err(shape_err!(
                "frames {:?} do not match backbone input (2, {}, {})",
                shape,
                c.resolution.0,
                c.resolution.1
            ));
        }
        if t == 0 || n == 0 {
            return Err(shape_err!("empty batch {:?}", shape));
        }
        let mut ctx = Ctx {
            bind,
            store,
            mode,
            steps: t,
            lif: c.lif,
            eps: F::of(c.bn_eps),
            updates: Vec::new(),
        };
        let x = frames.reshape([t * n, ch, h, w])?;
        let mut x = ctx.conv_bn_sn(x, "stem.conv", "stem.bn", ConvSpec::new(c.stem_stride, 1))?;
        if c.stem_pool {
            x = x.max_pool2d(2, 2)?;
        }
        for (prefix, _, _, stride, project) in c.blocks() {
            x = ctx.sew_block(x, &prefix, stride, project)?;
        }
        let pooled = x.global_avg_pool()?;
        let feat = pooled.shape()[1];
        let emb = linear_tnc(bind, "fc", pooled.reshape([t, n, feat])?)?;
        Ok(EncoderOutput {
            embeddings: emb,
            bn_updates: ctx.updates,
        })
    }
}

/// MLP `C -> C -> C` with ReLU, applied per time step during pretraining.
pub fn init_projection_head<F: Scalar>(store: &mut ParamStore<F>, dim: usize, rng: &mut impl Rng) {
    insert_linear(store, "head.fc1", dim, dim, rng);
    insert_linear(store, "head.fc2", dim, dim, rng);
}

pub fn projection_head<'t, F: Scalar>(bind: &Binding<'t, F>, emb: Var<'t, F>) -> Result<Var<'t, F>> {
    let hidden = linear_tnc(bind, "head.fc1", emb)?.relu();
    linear_tnc(bind, "head.fc2", hidden)
}

pub fn init_classification_head<F: Scalar>(
    store: &mut ParamStore<F>,
    dim: usize,
    classes: usize,
    rng: &mut impl Rng,
) {
    insert_linear(store, "cls", dim, classes, rng);
}

/// Per-time-step class logits `(T, N, K)`.
pub fn classification_head<'t, F: Scalar>(
    bind: &Binding<'t, F>,
    emb: Var<'t, F>,
) -> Result<Var<'t, F>> {
    let w = bind.var("cls.weight")?;
    if emb.shape().last() != w.shape().get(1) {
        return Err(shape_err!(
            "embedding {:?} does not match classifier {:?}",
            emb.shape(),
            w.shape()
        ));
    }
    linear_tnc(bind, "cls", emb)
}

/// Stacks samples into a `(T, N, 2, H, W)` batch.
pub fn stack_frames<F: Scalar>(samples: &[&FrameTensor]) -> Result<Tensor<F>> {
    let Some(first) = samples.first() else {
        return Err(shape_err!("cannot stack an empty batch"));
    };
    let [t, c, h, w] = first.shape();
    let n = samples.len();
    let per = c * h * w;
    let mut data = vec![F::zero(); t * n * per];
    for (j, s) in samples.iter().enumerate() {
        if s.shape() != first.shape() {
            return Err(shape_err!("sample {:?} vs {:?}", s.shape(), first.shape()));
        }
        for step in 0..t {
            let src = &s.data()[step * per..][..per];
            let dst = &mut data[(step * n + j) * per..][..per];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = F::of(v as f64);
            }
        }
    }
    Tensor::new([t, n, c, h, w], data)
}
