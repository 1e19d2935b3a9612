//! Contrastive-divergence training with squared-energy regularization.
//!
//! Per batch: real images get a little Gaussian noise; fakes are produced by
//! a short Langevin chain started from the replay buffer with parameters
//! frozen; both go through one train-mode forward pass and the loss
//!
//! `mean E(real) - mean E(fake) + w * mean(E(real)^2 + E(fake)^2)`
//!
//! is minimized with Adam. Fakes enter the loss as constants: no gradient
//! flows back into the sampler.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::langevin::{run_chain, LangevinConfig, SampleError};
use crate::net::{EnergyNet, NetError};
use crate::optim::{Adam, AdamConfig};
use crate::replay::{ReplayBuffer, DEFAULT_CAPACITY, FRESH_FRACTION};
use crate::rng::{seeded, EbmRng, RngState};
use crate::tape::Mode;
use crate::tensor::{Float, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("real and fake batches differ in size: {real} vs {fake}")]
    BatchMismatch { real: usize, fake: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: real energies {real:?}, fake energies {fake:?}")]
    Diverged {
        epoch: u64,
        batch: usize,
        real: Vec<f64>,
        fake: Vec<f64>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub reg_weight: f64,
    pub langevin: LangevinConfig,
    pub real_noise_std: f64,
    pub buffer_capacity: usize,
    pub fresh_fraction: f64,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 10,
            adam: AdamConfig::default(),
            reg_weight: 0.1,
            langevin: LangevinConfig::default(),
            real_noise_std: 0.005,
            buffer_capacity: DEFAULT_CAPACITY,
            fresh_fraction: FRESH_FRACTION,
            checkpoint_every: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.reg_weight >= 0.0) {
            return bad(format!("reg_weight must be non-negative, got {}", self.reg_weight));
        }
        if !(self.real_noise_std >= 0.0) {
            return bad("real_noise_std must be non-negative".into());
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.fresh_fraction) {
            return bad("fresh_fraction must lie in [0, 1]".into());
        }
        if !(self.adam.learning_rate > 0.0) {
            return bad("learning rate must be positive".into());
        }
        self.langevin.validate()?;
        Ok(())
    }
}

/// Batch-level means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub reg: f64,
    pub cdiv: f64,
    pub real: f64,
    pub fake: f64,
}

/// Per-epoch means of the batch metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainMetrics {
    pub epoch: u64,
    pub loss: f64,
    pub reg: f64,
    pub cdiv: f64,
    pub real: f64,
    pub fake: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss,reg,cdiv,real,fake";

impl TrainMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.loss, self.reg, self.cdiv, self.real, self.fake
        )
    }

    pub fn parse_row(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        Some(TrainMetrics {
            epoch: f[0].parse().ok()?,
            loss: f[1].parse().ok()?,
            reg: f[2].parse().ok()?,
            cdiv: f[3].parse().ok()?,
            real: f[4].parse().ok()?,
            fake: f[5].parse().ok()?,
        })
    }
}

fn check_pair(e_real: &[f64], e_fake: &[f64]) -> Result<(), TrainError> {
    if e_real.is_empty() || e_fake.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if e_real.len() != e_fake.len() {
        return Err(TrainError::BatchMismatch {
            real: e_real.len(),
            fake: e_fake.len(),
        });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `mean(e_real) - mean(e_fake)`.
pub fn cd_loss(e_real: &[f64], e_fake: &[f64]) -> Result<f64, TrainError> {
    check_pair(e_real, e_fake)?;
    Ok(mean(e_real) - mean(e_fake))
}

/// `w * mean_i(e_real_i^2 + e_fake_i^2)`.
pub fn reg_loss(e_real: &[f64], e_fake: &[f64], w: f64) -> Result<f64, TrainError> {
    check_pair(e_real, e_fake)?;
    let s: f64 = e_real.iter().zip(e_fake).map(|(r, f)| r * r + f * f).sum();
    Ok(w * s / e_real.len() as f64)
}

/// Loss and its parameter gradients for one real/fake pair of batches.
pub struct LossGrads {
    pub e_real: Vec<f64>,
    pub e_fake: Vec<f64>,
    /// Gradients of the trainable parameters, registry order.
    pub grads: Vec<Tensor>,
    pub batch_stats: Vec<crate::tape::BatchStats>,
}

/// One forward pass over `[real; fake]`, then backward of
/// `cd_loss + reg_loss`.
pub fn loss_and_grads(
    net: &EnergyNet,
    real: &Tensor,
    fake: &Tensor,
    reg_weight: f64,
    mode: Mode,
) -> Result<LossGrads, TrainError> {
    let (b, bf) = (real.batch(), fake.batch());
    if b != bf {
        return Err(TrainError::BatchMismatch { real: b, fake: bf });
    }
    let both = Tensor::concat_rows(real, fake)?;
    let mut fwd = net.forward(both, mode, false, true)?;
    let t = &mut fwd.tape;
    let er = t.slice_rows(fwd.output, 0, b)?;
    let ef = t.slice_rows(fwd.output, b, b)?;
    let mr = t.mean(er)?;
    let mf = t.mean(ef)?;
    let cd = t.sub(mr, mf)?;
    let loss = if reg_weight > 0.0 {
        let sr = t.square(er)?;
        let sr = t.mean(sr)?;
        let sf = t.square(ef)?;
        let sf = t.mean(sf)?;
        let s = t.add(sr, sf)?;
        let reg = t.scale(s, reg_weight as Float)?;
        t.add(cd, reg)?
    } else {
        cd
    };
    let energies: Vec<f64> = t.value(fwd.output)?.data().iter().map(|&v| v as f64).collect();
    let (e_real, e_fake) = (energies[..b].to_vec(), energies[b..].to_vec());
    if !t.value(loss)?.is_finite() || energies.iter().any(|e| !e.is_finite()) {
        return Err(TrainError::Diverged {
            epoch: 0,
            batch: 0,
            real: e_real,
            fake: e_fake,
        });
    }
    t.backward(loss)?;
    let mut grads = Vec::with_capacity(fwd.trainable.len());
    for &v in &fwd.trainable {
        grads.push(fwd.tape.take_grad(v)?.expect("trainable parameters require grad"));
    }
    Ok(LossGrads {
        e_real,
        e_fake,
        grads,
        batch_stats: fwd.batch_stats,
    })
}

/// Parameter gradients of `sum_n E(x_n)`, accumulated in f64.
/// Parameter gradients of `weight * sum_i E(images_i)`. Applying the weight
/// as the backward seed, rather than afterwards, keeps each row's arithmetic
/// identical to the batched loss, so only the final reductions differ.
fn energy_param_grads(net: &EnergyNet, images: &Tensor, weight: Float) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut fwd = net.forward(images.clone(), Mode::Infer, false, true)?;
    let weights = vec![weight; images.batch()];
    let total = fwd.tape.weighted_sum(fwd.output, &weights)?;
    fwd.tape.backward(total)?;
    let mut out = Vec::with_capacity(fwd.trainable.len());
    for &v in &fwd.trainable {
        let g = fwd.tape.take_grad(v)?.expect("trainable parameters require grad");
        out.push(g.data().iter().map(|&x| x as f64).collect());
    }
    Ok(out)
}

/// Worst elementwise disagreement between the autodiff gradient of
/// `cd_loss` and `mean_i grad E(real_i) - mean_j grad E(fake_j)` built from
/// one single-image backward pass per sample (inference mode, so samples
/// do not interact through batch statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(parameter, index, autodiff, per-sample)` at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Elements with both magnitudes below `floor` are compared on that
/// absolute scale instead.
pub fn cd_gradient_identity(
    net: &EnergyNet,
    real: &Tensor,
    fake: &Tensor,
    floor: f64,
) -> Result<IdentityCheck, TrainError> {
    let lg = loss_and_grads(net, real, fake, 0.0, Mode::Infer)?;
    let mut per_sample: Vec<Vec<f64>> = lg.grads.iter().map(|g| vec![0.0; g.len()]).collect();
    let shape = &real.shape()[1..];
    for (batch, sign) in [(real, 1.0 as Float), (fake, -1.0)] {
        let w = sign / batch.batch() as Float;
        for i in 0..batch.batch() {
            let one = Tensor::stack(&[batch.row(i)], shape)?;
            for (acc, g) in per_sample.iter_mut().zip(energy_param_grads(net, &one, w)?) {
                acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
            }
        }
    }
    let names = net.params().iter().filter(|p| p.trainable).map(|p| p.name.clone());
    let mut check = IdentityCheck { checked: 0, max_rel_err: 0.0, worst: None };
    for ((name, auto), want) in names.zip(&lg.grads).zip(&per_sample) {
        for (k, (&a, &b)) in auto.data().iter().zip(want).enumerate() {
            let a = a as f64;
            let err = (a - b).abs() / a.abs().max(b.abs()).max(floor);
            check.checked += 1;
            if err > check.max_rel_err || check.worst.is_none() {
                check.max_rel_err = check.max_rel_err.max(err);
                check.worst = Some((name.clone(), k, a, b));
            }
        }
    }
    Ok(check)
}

/// Owns everything that evolves during training.
pub struct Trainer {
    pub net: EnergyNet,
    pub buffer: ReplayBuffer,
    pub config: TrainConfig,
    adam: Adam,
    rng: EbmRng,
    /// Completed epochs.
    pub epoch: u64,
}

fn image_shape(net: &EnergyNet) -> [usize; 3] {
    [net.arch().height, net.arch().width, 1]
}

impl Trainer {
    pub fn new(net: EnergyNet, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let shapes: Vec<Vec<usize>> = net
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.shape().to_vec())
            .collect();
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let adam = Adam::new(config.adam, &refs);
        let buffer = ReplayBuffer::new(config.buffer_capacity, &image_shape(&net)).with_fresh_fraction(config.fresh_fraction);
        Ok(Trainer {
            rng: seeded(config.seed),
            net,
            buffer,
            adam,
            config,
            epoch: 0,
        })
    }

    /// Continue from a checkpoint: weights, optimizer moments, RNG position
    /// and epoch count are restored; the replay buffer starts empty.
    pub fn resume(ck: Checkpoint, config: TrainConfig) -> Result<Self, TrainError> {
        let mut t = Trainer::new(ck.net, config)?;
        if let Some((_, state)) = ck.optimizer {
            t.adam = Adam::from_state(t.config.adam, state);
        }
        if let Some(r) = ck.rng {
            t.rng = r.restore();
        }
        t.epoch = ck.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            optimizer: Some((self.adam.config, self.adam.state().clone())),
            rng: Some(RngState::capture(&self.rng)),
            epoch: self.epoch,
        }
    }

    pub fn rng_mut(&mut self) -> &mut EbmRng {
        &mut self.rng
    }

    /// Generate fakes for a batch of `n`: draw starts, run the chain with
    /// the current (frozen) parameters, store the results.
    pub fn generate_fakes(&mut self, n: usize) -> Result<Tensor, TrainError> {
        let starts = self.buffer.draw(n, &mut self.rng)?;
        let chain = run_chain(&starts.images, &self.net, &self.config.langevin, &mut self.rng, None)?;
        self.buffer.push(&chain.last)?;
        Ok(chain.last)
    }

    pub fn train_step(&mut self, real: &Tensor) -> Result<StepMetrics, TrainError> {
        self.net.check_input(real)?;
        if real.batch() < 2 {
            return Err(TrainError::Config("training batches need at least 2 images".into()));
        }
        let mut noisy = real.clone();
        let s = self.config.real_noise_std;
        if s > 0.0 {
            for v in noisy.data_mut() {
                let z: f64 = self.rng.sample(StandardNormal);
                *v = (*v as f64 + s * z).clamp(0.0, 1.0) as Float;
            }
        }
        let fake = self.generate_fakes(real.batch())?;
        let lg = loss_and_grads(&self.net, &noisy, &fake, self.config.reg_weight, Mode::Train)?;
        let cdiv = cd_loss(&lg.e_real, &lg.e_fake)?;
        let reg = reg_loss(&lg.e_real, &lg.e_fake, self.config.reg_weight)?;
        let m = StepMetrics {
            loss: cdiv + reg,
            reg,
            cdiv,
            real: mean(&lg.e_real),
            fake: mean(&lg.e_fake),
        };
        let grads: Vec<&[Float]> = lg.grads.iter().map(|g| g.data()).collect();
        let mut params: Vec<&mut [Float]> = self
            .net
            .params_mut()
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.data_mut())
            .collect();
        self.adam.step(&mut params, &grads);
        self.net.apply_batch_stats(&lg.batch_stats);
        Ok(m)
    }

    /// One pass over shuffled `data` (`[N, H, W, 1]`). A trailing batch
    /// smaller than 2 is dropped.
    pub fn run_epoch(&mut self, data: &Tensor) -> Result<TrainMetrics, TrainError> {
        self.net.check_input(data)?;
        let n = data.batch();
        if n < 2 {
            return Err(TrainError::Config(format!("dataset has {n} images, need at least 2")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let bs = self.config.batch_size.min(n);
        let shape = image_shape(&self.net);
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(bs).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let rows: Vec<&[Float]> = idx.iter().map(|&i| data.row(i)).collect();
            let batch = Tensor::stack(&rows, &shape)?;
            let m = self.train_step(&batch).map_err(|e| match e {
                TrainError::Diverged { real, fake, .. } => TrainError::Diverged {
                    epoch: self.epoch + 1,
                    batch: bi,
                    real,
                    fake,
                },
                other => other,
            })?;
            for (s, v) in sums.iter_mut().zip([m.loss, m.reg, m.cdiv, m.real, m.fake]) {
                *s += v;
            }
            batches += 1;
        }
        self.epoch += 1;
        let k = batches as f64;
        let [_, reg, cdiv, real, fake] = sums.map(|s| s / k);
        Ok(TrainMetrics {
            epoch: self.epoch,
            // mean(cdiv + reg) stored as a sum: loss == cdiv + reg exactly.
            loss: cdiv + reg,
            reg,
            cdiv,
            real,
            fake,
        })
    }
}

/// File outputs of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint_path(&self, epoch: u64) -> PathBuf {
        self.dir.join(format!("checkpoint-epoch-{epoch:04}.ebm"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("model.ebm")
    }
}

fn append_metrics(path: &Path, m: &TrainMetrics) -> io::Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut s = String::new();
    if fresh {
        writeln!(s, "{METRICS_HEADER}").expect("writing to a String");
    }
    writeln!(s, "{}", m.csv_row()).expect("writing to a String");
    f.write_all(s.as_bytes())
}

/// Run `trainer.config.epochs` epochs, appending one metrics row per epoch
/// and writing checkpoints. On error the most recent checkpoint on disk is
/// left untouched.
pub fn train(
    trainer: &mut Trainer,
    data: &Tensor,
    out: &TrainOutput,
    mut on_epoch: impl FnMut(&TrainMetrics),
) -> Result<Vec<TrainMetrics>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }
    fs::create_dir_all(&out.dir)?;
    let mut history = Vec::new();
    for _ in 0..trainer.config.epochs {
        let m = trainer.run_epoch(data)?;
        append_metrics(&out.metrics_path(), &m)?;
        on_epoch(&m);
        history.push(m);
        let every = trainer.config.checkpoint_every as u64;
        if every > 0 && trainer.epoch % every == 0 {
            trainer.checkpoint().save(&out.checkpoint_path(trainer.epoch))?;
        }
    }
    trainer.checkpoint().save(&out.final_path())?;
    Ok(history)
}

pub fn read_metrics(path: &Path) -> Result<Vec<TrainMetrics>, TrainError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(TrainError::Config(format!("{}: missing metrics header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| TrainMetrics::parse_row(l).ok_or_else(|| TrainError::Config(format!("bad metrics row: {l}"))))
        .collect()
}
