use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    dropout, dropout_backward, global_avg_pool, global_avg_pool_backward, maxpool2d,
    maxpool2d_backward, softmax, BatchNorm, BnCache, Conv2d, Dense, Mode, SeCache, SqueezeExcite,
};
use super::loss::FocalLoss;
use super::tensor::Tensor;
use crate::exec::Exec;
use crate::{Error, Result};

/// Architecture description. The default is the two-block network:
/// block(1->40) -> maxpool(1,10) -> dropout(0.3) -> block(40->40) ->
/// maxpool(1,10) -> dropout(0.3) -> global average pool -> dense(40->10) -> softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub version: u16,
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub se_ratio: usize,
    pub pool: (usize, usize),
    pub dropout: f64,
    pub n_classes: usize,
    pub batch_norm: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            version: 1,
            in_channels: 1,
            filters: 40,
            kernel: 3,
            se_ratio: 2,
            pool: (1, 10),
            dropout: 0.3,
            n_classes: 10,
            batch_norm: true,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.se_ratio == 0 || !self.filters.is_multiple_of(self.se_ratio) {
            return Err(Error::Config(format!(
                "SE ratio {} must divide {} filters",
                self.se_ratio, self.filters
            )));
        }
        if self.pool.0 == 0 || self.pool.1 == 0 || self.n_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "pool sizes, classes and channels must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Smallest input width that survives both pooling stages.
    pub fn min_frames(&self) -> usize {
        self.pool.1 * self.pool.1
    }

    /// Output shape `[h, w, c]` after each stage for an input `h x w`.
    pub fn stage_shapes(&self, h: usize, w: usize) -> Vec<[usize; 3]> {
        let (ph, pw) = self.pool;
        let c = self.filters;
        vec![
            [h, w, c],
            [h / ph, w / pw, c],
            [h / ph, w / pw, c],
            [h / ph / ph, w / pw / pw, c],
        ]
    }
}

/// Residual block: conv -> BN -> ReLU -> conv -> BN, plus a shortcut
/// (1x1 conv when the channel count changes), then ReLU and
/// squeeze-excitation on the sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStandardPost {
    pub conv1: Conv2d,
    pub bn1: Option<BatchNorm>,
    pub conv2: Conv2d,
    pub bn2: Option<BatchNorm>,
    pub shortcut: Option<Conv2d>,
    pub se: SqueezeExcite,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Tensor,
    bn1: Option<BnCache>,
    act1: Tensor,
    bn2: Option<BnCache>,
    merged: Tensor,
    se: SeCache,
}

fn relu_inplace(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

fn relu_mask(grad: &mut Tensor, activation: &Tensor) {
    grad.data_mut()
        .iter_mut()
        .zip(activation.data())
        .for_each(|(g, &a)| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
}

impl ConvStandardPost {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        filters: usize,
        kernel: usize,
        ratio: usize,
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::glorot(kernel, in_channels, filters, rng),
            bn1: batch_norm.then(|| BatchNorm::new(filters)),
            conv2: Conv2d::glorot(kernel, filters, filters, rng),
            bn2: batch_norm.then(|| BatchNorm::new(filters)),
            shortcut: (in_channels != filters)
                .then(|| Conv2d::glorot(1, in_channels, filters, rng)),
            se: SqueezeExcite::glorot(filters, ratio, rng)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, exec: Exec) -> Result<(Tensor, BlockCache)> {
        let mut a1 = self.conv1.forward(x, exec)?;
        let bn1 = match &self.bn1 {
            Some(bn) => {
                let (y, c) = bn.forward(&a1, mode)?;
                a1 = y;
                Some(c)
            }
            None => None,
        };
        relu_inplace(&mut a1);
        let mut a2 = self.conv2.forward(&a1, exec)?;
        let bn2 = match &self.bn2 {
            Some(bn) => {
                let (y, c) = bn.forward(&a2, mode)?;
                a2 = y;
                Some(c)
            }
            None => None,
        };
        match &self.shortcut {
            Some(sc) => {
                let s = sc.forward(x, exec)?;
                a2.data_mut()
                    .iter_mut()
                    .zip(s.data())
                    .for_each(|(a, b)| *a += b);
            }
            None => {
                if x.shape() != a2.shape() {
                    return Err(Error::Shape(format!(
                        "identity shortcut needs matching shapes, got {:?} and {:?}",
                        x.shape(),
                        a2.shape()
                    )));
                }
                a2.data_mut()
                    .iter_mut()
                    .zip(x.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
        relu_inplace(&mut a2);
        let (y, se) = self.se.forward(&a2, exec)?;
        Ok((
            y,
            BlockCache {
                input: x.clone(),
                bn1,
                act1: a1,
                bn2,
                merged: a2,
                se,
            },
        ))
    }

    pub fn update_running(&mut self, cache: &BlockCache) {
        if let (Some(bn), Some(c)) = (&mut self.bn1, &cache.bn1) {
            bn.update_running(c);
        }
        if let (Some(bn), Some(c)) = (&mut self.bn2, &cache.bn2) {
            bn.update_running(c);
        }
    }

    pub fn backward(
        &mut self,
        cache: &BlockCache,
        dy: &Tensor,
        exec: Exec,
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        let mut d = self.se.backward(&cache.merged, &cache.se, dy, exec)?;
        relu_mask(&mut d, &cache.merged);
        let dshort = d.clone();
        if let (Some(bn), Some(c)) = (&mut self.bn2, &cache.bn2) {
            d = bn.backward(c, &d)?;
        }
        let mut d = self
            .conv2
            .backward(&cache.act1, &d, exec, true)?
            .expect("requested input gradient");
        relu_mask(&mut d, &cache.act1);
        if let (Some(bn), Some(c)) = (&mut self.bn1, &cache.bn1) {
            d = bn.backward(c, &d)?;
        }
        let dx = self.conv1.backward(&cache.input, &d, exec, need_dx)?;
        let dsc = match &mut self.shortcut {
            Some(sc) => sc.backward(&cache.input, &dshort, exec, need_dx)?,
            None => need_dx.then_some(dshort),
        };
        Ok(match (dx, dsc) {
            (Some(mut a), Some(b)) => {
                a.data_mut()
                    .iter_mut()
                    .zip(b.data())
                    .for_each(|(x, y)| *x += y);
                Some(a)
            }
            _ => None,
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("conv1.weight", &self.conv1.weight),
            ("conv1.bias", &self.conv1.bias),
        ];
        if let Some(bn) = &self.bn1 {
            out.extend([("bn1.gamma", &bn.gamma), ("bn1.beta", &bn.beta)]);
        }
        out.extend([
            ("conv2.weight", &self.conv2.weight),
            ("conv2.bias", &self.conv2.bias),
        ]);
        if let Some(bn) = &self.bn2 {
            out.extend([("bn2.gamma", &bn.gamma), ("bn2.beta", &bn.beta)]);
        }
        if let Some(sc) = &self.shortcut {
            out.extend([("shortcut.weight", &sc.weight), ("shortcut.bias", &sc.bias)]);
        }
        out.extend([
            ("se.w1", &self.se.w1),
            ("se.b1", &self.se.b1),
            ("se.w2", &self.se.w2),
            ("se.b2", &self.se.b2),
        ]);
        out
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![
            ("conv1.weight", &mut self.conv1.weight),
            ("conv1.bias", &mut self.conv1.bias),
        ];
        if let Some(bn) = &mut self.bn1 {
            out.extend([("bn1.gamma", &mut bn.gamma), ("bn1.beta", &mut bn.beta)]);
        }
        out.extend([
            ("conv2.weight", &mut self.conv2.weight),
            ("conv2.bias", &mut self.conv2.bias),
        ]);
        if let Some(bn) = &mut self.bn2 {
            out.extend([("bn2.gamma", &mut bn.gamma), ("bn2.beta", &mut bn.beta)]);
        }
        if let Some(sc) = &mut self.shortcut {
            out.extend([
                ("shortcut.weight", &mut sc.weight),
                ("shortcut.bias", &mut sc.bias),
            ]);
        }
        out.extend([
            ("se.w1", &mut self.se.w1),
            ("se.b1", &mut self.se.b1),
            ("se.w2", &mut self.se.w2),
            ("se.b2", &mut self.se.b2),
        ]);
        out
    }
}

#[derive(Debug, Clone)]
struct Tape {
    block1: BlockCache,
    pool1: (Vec<usize>, Vec<usize>),
    drop1: Option<Vec<f64>>,
    block2: BlockCache,
    pool2: (Vec<usize>, Vec<usize>),
    drop2: Option<Vec<f64>>,
    gap_shape: Vec<usize>,
    features: Tensor,
    probs: Tensor,
}

/// The classifier with its trainable state. Forward passes through
/// [`Model::forward`] record a tape that [`Model::backward`] consumes.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub block1: ConvStandardPost,
    pub block2: ConvStandardPost,
    pub dense: Dense,
    pub exec: Exec,
    tape: Option<Tape>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.block1 == other.block1
            && self.block2 == other.block2
            && self.dense == other.dense
    }
}

impl Model {
    /// Glorot-uniform conv/dense weights, zero biases, unit BN scale.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block1 = ConvStandardPost::new(
            spec.in_channels,
            spec.filters,
            spec.kernel,
            spec.se_ratio,
            spec.batch_norm,
            &mut rng,
        )?;
        let block2 = ConvStandardPost::new(
            spec.filters,
            spec.filters,
            spec.kernel,
            spec.se_ratio,
            spec.batch_norm,
            &mut rng,
        )?;
        let dense = Dense::glorot(spec.filters, spec.n_classes, &mut rng);
        Ok(Self {
            spec,
            block1,
            block2,
            dense,
            exec: Exec::default(),
            tape: None,
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, h, w, c) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let (ph, pw) = self.spec.pool;
        if h / ph / ph == 0 || w / pw / pw == 0 {
            return Err(Error::Shape(format!(
                "a {h}x{w} input pools down to nothing; need at least {}x{}",
                ph * ph,
                pw * pw
            )));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor, mode: Mode, rng: &mut dyn rand::RngCore) -> Result<Tape> {
        self.check_input(x)?;
        let (y1, block1) = self.block1.forward(x, mode, self.exec)?;
        let shape1 = y1.shape().to_vec();
        let (p1, arg1) = maxpool2d(&y1, self.spec.pool)?;
        let (d1, drop1) = dropout(&p1, self.spec.dropout, mode, rng)?;
        let (y2, block2) = self.block2.forward(&d1, mode, self.exec)?;
        let shape2 = y2.shape().to_vec();
        let (p2, arg2) = maxpool2d(&y2, self.spec.pool)?;
        let (d2, drop2) = dropout(&p2, self.spec.dropout, mode, rng)?;
        let features = global_avg_pool(&d2)?;
        let probs = softmax(&self.dense.forward(&features)?)?;
        Ok(Tape {
            block1,
            pool1: (arg1, shape1),
            drop1,
            block2,
            pool2: (arg2, shape2),
            drop2,
            gap_shape: d2.shape().to_vec(),
            features,
            probs,
        })
    }

    /// Class probabilities `[batch, n_classes]` for `[batch, H, W, C]`
    /// input. In training mode this also updates batch-norm running
    /// statistics. The pass is recorded for a following [`Model::backward`].
    pub fn forward<R: rand::RngCore>(
        &mut self,
        x: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor> {
        self.tape = None;
        let tape = self.run(x, mode, rng)?;
        if mode == Mode::Train {
            self.block1.update_running(&tape.block1);
            self.block2.update_running(&tape.block2);
        }
        let probs = tape.probs.clone();
        self.tape = Some(tape);
        Ok(probs)
    }

    /// Inference-mode probabilities without recording anything.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        // dropout is off in inference mode, so the generator is never drawn
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.run(x, Mode::Infer, &mut rng)?.probs)
    }

    /// Backpropagates the focal loss of the recorded forward pass against
    /// `targets`, accumulating into every parameter's gradient buffer.
    /// Returns the loss. Dropout masks and normalization statistics are the
    /// ones used in the forward pass.
    pub fn backward(&mut self, targets: &[usize], loss: &FocalLoss) -> Result<f64> {
        let tape = self.tape.take().ok_or_else(|| {
            Error::State("backward called without a recorded forward pass".into())
        })?;
        let value = loss.forward(&tape.probs, targets)?;
        let dlogits = loss.grad_logits(&tape.probs, targets)?;
        self.backward_logits(&tape, &dlogits)?;
        Ok(value)
    }

    fn backward_logits(&mut self, tape: &Tape, dlogits: &Tensor) -> Result<()> {
        let exec = self.exec;
        let d = self.dense.backward(&tape.features, dlogits)?;
        let d = global_avg_pool_backward(&d, &tape.gap_shape)?;
        let d = dropout_backward(&d, tape.drop2.as_deref())?;
        let d = maxpool2d_backward(&d, &tape.pool2.0, &tape.pool2.1)?;
        let d = self
            .block2
            .backward(&tape.block2, &d, exec, true)?
            .expect("requested input gradient");
        let d = dropout_backward(&d, tape.drop1.as_deref())?;
        let d = maxpool2d_backward(&d, &tape.pool1.0, &tape.pool1.1)?;
        self.block1.backward(&tape.block1, &d, exec, false)?;
        Ok(())
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, block) in [("block1", &self.block1), ("block2", &self.block2)] {
            out.extend(
                block
                    .params()
                    .into_iter()
                    .map(|(n, t)| (format!("{prefix}.{n}"), t)),
            );
        }
        out.push(("dense.weight".into(), &self.dense.weight));
        out.push(("dense.bias".into(), &self.dense.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (prefix, block) in [("block1", &mut self.block1), ("block2", &mut self.block2)] {
            out.extend(
                block
                    .params_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("{prefix}.{n}"), t)),
            );
        }
        out.push(("dense.weight".into(), &mut self.dense.weight));
        out.push(("dense.bias".into(), &mut self.dense.bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut()
            .into_iter()
            .for_each(|(_, t)| t.zero_grad());
    }

    pub fn batch_norms(&self) -> Vec<(String, &BatchNorm)> {
        let mut out = Vec::new();
        for (prefix, block) in [("block1", &self.block1), ("block2", &self.block2)] {
            if let Some(bn) = &block.bn1 {
                out.push((format!("{prefix}.bn1"), bn));
            }
            if let Some(bn) = &block.bn2 {
                out.push((format!("{prefix}.bn2"), bn));
            }
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<(String, &mut BatchNorm)> {
        let mut out = Vec::new();
        for (prefix, block) in [("block1", &mut self.block1), ("block2", &mut self.block2)] {
            if let Some(bn) = &mut block.bn1 {
                out.push((format!("{prefix}.bn1"), bn));
            }
            if let Some(bn) = &mut block.bn2 {
                out.push((format!("{prefix}.bn2"), bn));
            }
        }
        out
    }
}
