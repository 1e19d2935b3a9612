//! The CNN energy function: four strided conv blocks and two dense layers.

use rand::Rng;

use crate::rng::seeded;
use crate::tape::{BatchStats, Mode, Tape, Var};
use crate::tensor::{Float, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("expected images shaped [N, {height}, {width}, 1], got {got:?}")]
    InputShape { height: usize, width: usize, got: Vec<usize> },
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid architecture: {0}")]
    Architecture(String),
}

/// Layer dimensions. [`Arch::bridge`] is the production network; smaller
/// instances exist for tests and toy experiments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arch {
    pub height: usize,
    pub width: usize,
    pub first_kernel: usize,
    pub kernel: usize,
    pub channels: Vec<usize>,
    pub hidden: usize,
}

impl Arch {
    /// 48x192 grayscale input, 832,257 parameters.
    pub fn bridge() -> Self {
        Arch {
            height: 48,
            width: 192,
            first_kernel: 5,
            kernel: 3,
            channels: vec![32, 64, 128, 128],
            hidden: 128,
        }
    }

    /// A tiny instance with the same layer stack, for fast tests.
    pub fn mini() -> Self {
        Arch {
            height: 8,
            width: 16,
            first_kernel: 5,
            kernel: 3,
            channels: vec![3, 4, 4, 5],
            hidden: 6,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.height == 0 || self.width == 0 || self.first_kernel == 0 || self.kernel == 0 || self.hidden == 0 {
            return Err(NetError::Architecture("all dimensions must be positive".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(NetError::Architecture("need at least one conv block with positive width".into()));
        }
        Ok(())
    }

    /// Spatial size after each stride-2 conv.
    pub fn conv_output(&self, block: usize) -> (usize, usize) {
        let mut h = self.height;
        let mut w = self.width;
        for _ in 0..=block {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    pub fn flat_len(&self) -> usize {
        let last = self.channels.len() - 1;
        let (h, w) = self.conv_output(last);
        h * w * self.channels[last]
    }

    pub fn to_words(&self) -> Vec<u32> {
        let mut v = vec![
            self.height as u32,
            self.width as u32,
            self.first_kernel as u32,
            self.kernel as u32,
            self.hidden as u32,
        ];
        v.extend(self.channels.iter().map(|&c| c as u32));
        v
    }

    pub fn from_words(words: &[u32]) -> Result<Self, NetError> {
        if words.len() < 6 {
            return Err(NetError::Architecture(format!("{} architecture words, need at least 6", words.len())));
        }
        let arch = Arch {
            height: words[0] as usize,
            width: words[1] as usize,
            first_kernel: words[2] as usize,
            kernel: words[3] as usize,
            hidden: words[4] as usize,
            channels: words[5..].iter().map(|&c| c as usize).collect(),
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

/// One row of the model summary table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSummary {
    pub name: String,
    pub kind: &'static str,
    /// Output shape without the batch axis.
    pub output_shape: Vec<usize>,
    pub params: usize,
}

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyNet {
    arch: Arch,
    params: Vec<Param>,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

fn indexed(base: &str, i: usize) -> String {
    if i == 0 {
        base.to_string()
    } else {
        format!("{base}_{i}")
    }
}

/// Indices of one conv block's parameters inside the registry.
struct ConvIdx {
    kernel: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

/// Result of a recorded forward pass.
pub struct Forward {
    pub tape: Tape,
    pub input: Var,
    /// `[N, 1]` energies.
    pub output: Var,
    /// Tape variables of the trainable parameters, in registry order.
    pub trainable: Vec<Var>,
    /// Batch statistics per BN layer (train mode only).
    pub batch_stats: Vec<BatchStats>,
}

impl EnergyNet {
    /// The production network with fresh weights.
    pub fn build(seed: u64) -> Self {
        Self::with_arch(Arch::bridge(), seed).expect("bridge architecture is valid")
    }

    /// Conv and dense weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and
    /// BN shifts zero; BN scales and moving variances one.
    pub fn with_arch(arch: Arch, seed: u64) -> Result<Self, NetError> {
        arch.validate()?;
        let mut rng = seeded(seed);
        let mut params = Vec::new();
        let uniform = |shape: &[usize], fan_in: usize, rng: &mut crate::rng::EbmRng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound) as Float).collect();
            Tensor::new(shape.to_vec(), data).expect("shape is positive")
        };
        let mut cin = 1;
        for (i, &cout) in arch.channels.iter().enumerate() {
            let k = if i == 0 { arch.first_kernel } else { arch.kernel };
            let conv = indexed("conv2d", i);
            let bn = indexed("batch_normalization", i);
            let zeros = Tensor::zeros(&[cout])?;
            let ones = Tensor::full(&[cout], 1.0)?;
            params.push(Param {
                name: format!("{conv}/kernel"),
                tensor: uniform(&[k, k, cin, cout], k * k * cin, &mut rng),
                trainable: true,
            });
            params.push(Param { name: format!("{conv}/bias"), tensor: zeros.clone(), trainable: true });
            params.push(Param { name: format!("{bn}/gamma"), tensor: ones.clone(), trainable: true });
            params.push(Param { name: format!("{bn}/beta"), tensor: zeros.clone(), trainable: true });
            params.push(Param { name: format!("{bn}/moving_mean"), tensor: zeros, trainable: false });
            params.push(Param { name: format!("{bn}/moving_variance"), tensor: ones, trainable: false });
            cin = cout;
        }
        let flat = arch.flat_len();
        params.push(Param {
            name: "dense/kernel".into(),
            tensor: uniform(&[flat, arch.hidden], flat, &mut rng),
            trainable: true,
        });
        params.push(Param { name: "dense/bias".into(), tensor: Tensor::zeros(&[arch.hidden])?, trainable: true });
        params.push(Param {
            name: "dense_1/kernel".into(),
            tensor: uniform(&[arch.hidden, 1], arch.hidden, &mut rng),
            trainable: true,
        });
        params.push(Param { name: "dense_1/bias".into(), tensor: Tensor::zeros(&[1])?, trainable: true });
        Ok(EnergyNet {
            arch,
            params,
            bn_momentum: BN_MOMENTUM,
            bn_epsilon: BN_EPSILON,
        })
    }

    /// Rebuild from stored parameters; every registry entry must be present
    /// with its exact shape.
    pub fn from_params(
        arch: Arch,
        stored: Vec<(String, Tensor)>,
        bn_momentum: f64,
        bn_epsilon: f64,
    ) -> Result<Self, NetError> {
        let mut net = Self::with_arch(arch, 0)?;
        net.bn_momentum = bn_momentum;
        net.bn_epsilon = bn_epsilon;
        if stored.len() != net.params.len() {
            return Err(NetError::Architecture(format!(
                "{} stored parameters, architecture has {}",
                stored.len(),
                net.params.len()
            )));
        }
        for (name, tensor) in stored {
            let p = net
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| NetError::UnknownParameter(name.clone()))?;
            if p.tensor.shape() != tensor.shape() {
                return Err(NetError::ParameterShape {
                    name,
                    expected: p.tensor.shape().to_vec(),
                    got: tensor.shape().to_vec(),
                });
            }
            p.tensor = tensor;
        }
        Ok(net)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn count_params(&self) -> ParamCounts {
        let mut c = ParamCounts { total: 0, trainable: 0, non_trainable: 0 };
        for p in &self.params {
            c.total += p.tensor.len();
            if p.trainable {
                c.trainable += p.tensor.len();
            } else {
                c.non_trainable += p.tensor.len();
            }
        }
        c
    }

    /// Per-layer output shapes and parameter counts, input layer first.
    pub fn summary(&self) -> Vec<LayerSummary> {
        let a = &self.arch;
        let count = |prefix: &str| -> usize {
            self.params
                .iter()
                .filter(|p| p.name.split('/').next() == Some(prefix))
                .map(|p| p.tensor.len())
                .sum()
        };
        let mut rows = vec![LayerSummary {
            name: "input_1".into(),
            kind: "InputLayer",
            output_shape: vec![a.height, a.width, 1],
            params: 0,
        }];
        for (i, &c) in a.channels.iter().enumerate() {
            let (h, w) = a.conv_output(i);
            let shape = vec![h, w, c];
            for (base, kind) in [
                ("conv2d", "Conv2D"),
                ("batch_normalization", "BatchNormalization"),
                ("activation", "Activation"),
            ] {
                let name = indexed(base, i);
                rows.push(LayerSummary {
                    params: count(&name),
                    name,
                    kind,
                    output_shape: shape.clone(),
                });
            }
        }
        rows.push(LayerSummary {
            name: "flatten".into(),
            kind: "Flatten",
            output_shape: vec![a.flat_len()],
            params: 0,
        });
        rows.push(LayerSummary {
            name: "dense".into(),
            kind: "Dense",
            output_shape: vec![a.hidden],
            params: count("dense"),
        });
        rows.push(LayerSummary {
            name: "dense_1".into(),
            kind: "Dense",
            output_shape: vec![1],
            params: count("dense_1"),
        });
        rows
    }

    fn conv_idx(&self, block: usize) -> ConvIdx {
        let base = block * 6;
        ConvIdx {
            kernel: base,
            bias: base + 1,
            gamma: base + 2,
            beta: base + 3,
            mean: base + 4,
            var: base + 5,
        }
    }

    pub fn check_input(&self, images: &Tensor) -> Result<(), NetError> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.arch.height || s[2] != self.arch.width || s[3] != 1 {
            return Err(NetError::InputShape {
                height: self.arch.height,
                width: self.arch.width,
                got: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Record a forward pass. Only leaves flagged by `input_grad` /
    /// `param_grad` get gradients on backward.
    pub fn forward(&self, images: Tensor, mode: Mode, input_grad: bool, param_grad: bool) -> Result<Forward, NetError> {
        self.check_input(&images)?;
        let mut tape = Tape::new();
        let input = tape.leaf(images, input_grad);
        let mut trainable = Vec::new();
        let mut batch_stats = Vec::new();
        let mut leaf = |tape: &mut Tape, idx: usize| {
            let v = tape.leaf(self.params[idx].tensor.clone(), param_grad);
            trainable.push(v);
            v
        };
        let mut x = input;
        for block in 0..self.arch.channels.len() {
            let ix = self.conv_idx(block);
            let k = leaf(&mut tape, ix.kernel);
            let b = leaf(&mut tape, ix.bias);
            x = tape.conv2d(x, k, b, 2)?;
            let g = leaf(&mut tape, ix.gamma);
            let be = leaf(&mut tape, ix.beta);
            let (y, stats) = tape.batchnorm(
                x,
                g,
                be,
                self.params[ix.mean].tensor.data(),
                self.params[ix.var].tensor.data(),
                mode,
                self.bn_epsilon,
            )?;
            batch_stats.extend(stats);
            x = tape.swish(y)?;
        }
        x = tape.flatten(x)?;
        let d0 = self.params.len() - 4;
        let w = leaf(&mut tape, d0);
        let b = leaf(&mut tape, d0 + 1);
        x = tape.dense(x, w, b)?;
        x = tape.swish(x)?;
        let w = leaf(&mut tape, d0 + 2);
        let b = leaf(&mut tape, d0 + 3);
        let output = tape.dense(x, w, b)?;
        Ok(Forward {
            tape,
            input,
            output,
            trainable,
            batch_stats,
        })
    }

    /// Fold train-mode batch statistics into the moving averages:
    /// `moving = momentum * moving + (1 - momentum) * batch`.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats]) {
        let m = self.bn_momentum;
        for (block, st) in stats.iter().enumerate() {
            let ix = self.conv_idx(block);
            for (target, batch) in [(ix.mean, &st.mean), (ix.var, &st.var)] {
                for (v, &b) in self.params[target].tensor.data_mut().iter_mut().zip(batch) {
                    *v = (m * *v as f64 + (1.0 - m) * b) as Float;
                }
            }
        }
    }

    /// Energies `[N, 1]`. Train mode uses batch statistics and updates the
    /// moving averages.
    pub fn energy(&mut self, images: &Tensor, mode: Mode) -> Result<Tensor, NetError> {
        let fwd = self.forward(images.clone(), mode, false, false)?;
        if mode == Mode::Train {
            self.apply_batch_stats(&fwd.batch_stats);
        }
        Ok(fwd.tape.value(fwd.output)?.clone())
    }

    /// Infer-mode energies; a pure function of parameters and input.
    pub fn energy_infer(&self, images: &Tensor) -> Result<Tensor, NetError> {
        let fwd = self.forward(images.clone(), Mode::Infer, false, false)?;
        Ok(fwd.tape.value(fwd.output)?.clone())
    }

    /// Gradient of the summed infer-mode energy with respect to each pixel.
    pub fn energy_input_grad(&self, images: &Tensor) -> Result<Tensor, NetError> {
        let (_, grad) = self.energy_and_input_grad(images)?;
        Ok(grad)
    }

    /// Infer-mode energies together with their input gradient.
    pub fn energy_and_input_grad(&self, images: &Tensor) -> Result<(Tensor, Tensor), NetError> {
        let mut fwd = self.forward(images.clone(), Mode::Infer, true, false)?;
        let energies = fwd.tape.value(fwd.output)?.clone();
        let total = fwd.tape.sum(fwd.output)?;
        fwd.tape.backward(total)?;
        let grad = fwd.tape.take_grad(fwd.input)?.expect("input requires grad");
        Ok((energies, grad))
    }
}
