//! Langevin sampling in pixel space.
//!
//! Each step perturbs the batch with Gaussian noise, evaluates the energy
//! gradient at the perturbed point, and takes a clipped gradient-descent
//! step, clamping pixels back into range:
//!
//! `x' = clamp(x + n - step_size * clip(grad E(x + n), +-grad_clip))`

use rand::Rng;
use rand_distr::StandardNormal;

use crate::net::{EnergyNet, NetError};
use crate::tensor::{Float, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("non-finite energy gradient for batch item {index}")]
    NonFiniteGradient { index: usize },
    #[error("buffer push: batch item {index} has pixel {value} outside [{lo}, {hi}]")]
    OutOfRange { index: usize, value: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Anything Langevin dynamics can descend.
pub trait EnergyLandscape {
    /// Energy of each batch item.
    fn energies(&self, x: &Tensor) -> Result<Vec<f64>, SampleError>;
    /// Gradient of the summed energy with respect to `x`.
    fn input_grad(&self, x: &Tensor) -> Result<Tensor, SampleError>;
}

impl EnergyLandscape for EnergyNet {
    fn energies(&self, x: &Tensor) -> Result<Vec<f64>, SampleError> {
        Ok(self.energy_infer(x)?.data().iter().map(|&v| v as f64).collect())
    }

    fn input_grad(&self, x: &Tensor) -> Result<Tensor, SampleError> {
        Ok(self.energy_input_grad(x)?)
    }
}

/// `E(x) = 0.5 * |x|^2` per batch item; a convex stand-in for tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuadraticEnergy;

impl EnergyLandscape for QuadraticEnergy {
    fn energies(&self, x: &Tensor) -> Result<Vec<f64>, SampleError> {
        Ok((0..x.batch())
            .map(|i| 0.5 * x.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
            .collect())
    }

    fn input_grad(&self, x: &Tensor) -> Result<Tensor, SampleError> {
        Ok(x.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LangevinConfig {
    pub step_size: f64,
    pub noise_std: f64,
    pub grad_clip: f64,
    pub n_steps: usize,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

impl Default for LangevinConfig {
    /// Per-training-batch chain length.
    fn default() -> Self {
        LangevinConfig {
            step_size: 10.0,
            noise_std: 0.005,
            grad_clip: 0.03,
            n_steps: 60,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
        }
    }
}

impl LangevinConfig {
    /// Long chains for generating from scratch.
    pub fn generation() -> Self {
        LangevinConfig {
            n_steps: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        let bad = |m: &str| Err(SampleError::Config(m.to_string()));
        if !(self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(self.clamp_lo < self.clamp_hi) {
            return bad("clamp_lo must be below clamp_hi");
        }
        Ok(())
    }
}

/// `n` images of i.i.d. uniform `[0, 1)` pixels.
pub fn latent_init<R: Rng + ?Sized>(n: usize, image_shape: &[usize], rng: &mut R) -> Result<Tensor, TensorError> {
    let mut shape = vec![n];
    shape.extend_from_slice(image_shape);
    Tensor::uniform(&shape, 0.0, 1.0, rng)
}

pub fn langevin_step<E: EnergyLandscape + ?Sized, R: Rng + ?Sized>(
    x: &Tensor,
    energy: &E,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<Tensor, SampleError> {
    let mut noisy = x.clone();
    if cfg.noise_std > 0.0 {
        let s = cfg.noise_std;
        for v in noisy.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = (*v as f64 + s * z) as Float;
        }
    }
    let grad = energy.input_grad(&noisy)?;
    if grad.shape() != x.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "langevin_step",
            detail: format!("gradient {:?} for batch {:?}", grad.shape(), x.shape()),
        }
        .into());
    }
    for i in 0..grad.batch() {
        if grad.row(i).iter().any(|g| !g.is_finite()) {
            return Err(SampleError::NonFiniteGradient { index: i });
        }
    }
    let (a, c) = (cfg.step_size, cfg.grad_clip);
    let (lo, hi) = (cfg.clamp_lo, cfg.clamp_hi);
    for (v, &g) in noisy.data_mut().iter_mut().zip(grad.data()) {
        let g = (g as f64).clamp(-c, c);
        *v = ((*v as f64) - a * g).clamp(lo, hi) as Float;
    }
    Ok(noisy)
}

/// Output of [`run_chain`].
#[derive(Clone, Debug)]
pub struct Chain {
    pub last: Tensor,
    /// `(step index, state after that step)`; for an empty chain the initial
    /// state under index 0.
    pub snapshots: Vec<(usize, Tensor)>,
}

/// `cfg.n_steps` Langevin steps. With `trace_every = Some(k)` the state after
/// step `s` is kept whenever `s % k == 0`, plus the final step.
pub fn run_chain<E: EnergyLandscape + ?Sized, R: Rng + ?Sized>(
    x0: &Tensor,
    energy: &E,
    cfg: &LangevinConfig,
    rng: &mut R,
    trace_every: Option<usize>,
) -> Result<Chain, SampleError> {
    cfg.validate()?;
    if trace_every == Some(0) {
        return Err(SampleError::Config("trace_every must be positive".into()));
    }
    let mut snapshots = Vec::new();
    let mut x = x0.clone();
    if cfg.n_steps == 0 && trace_every.is_some() {
        snapshots.push((0, x.clone()));
    }
    for step in 0..cfg.n_steps {
        x = langevin_step(&x, energy, cfg, rng)?;
        if let Some(k) = trace_every {
            if step % k == 0 || step + 1 == cfg.n_steps {
                snapshots.push((step, x.clone()));
            }
        }
    }
    Ok(Chain { last: x, snapshots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Arch;
    use crate::rng::seeded;

    #[test]
    fn latent_init_is_uniform_and_seeded() {
        let mut rng = seeded(1);
        let a = latent_init(4, &[48, 192, 1], &mut rng).unwrap();
        assert_eq!(a.shape(), &[4, 48, 192, 1]);
        assert!(a.data().iter().all(|&v| (0.0..1.0).contains(&v)));
        let b = latent_init(4, &[48, 192, 1], &mut seeded(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn latent_mean_concentrates() {
        // 10^6 pixels: sd of the mean is sqrt(1/12/1e6) ~ 2.9e-4, so 0.002 is ~7 sd.
        let x = latent_init(1, &[1000, 1000], &mut seeded(2)).unwrap();
        assert!((x.mean() - 0.5).abs() < 0.002, "{}", x.mean());
    }

    fn quad_cfg() -> LangevinConfig {
        LangevinConfig {
            step_size: 0.1,
            noise_std: 0.0,
            grad_clip: 1e9,
            n_steps: 1,
            clamp_lo: -10.0,
            clamp_hi: 10.0,
        }
    }

    #[test]
    fn quadratic_step_shrinks_by_one_minus_alpha() {
        let x = Tensor::new(vec![2, 3], vec![0.5, -0.25, 1.0, 2.0, 0.1, -3.0]).unwrap();
        let y = langevin_step(&x, &QuadraticEnergy, &quad_cfg(), &mut seeded(0)).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((*a - 0.9 * b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_energy_with_zero_noise_is_fixed_point() {
        let mut net = EnergyNet::with_arch(Arch::mini(), 1).unwrap();
        for p in net.params_mut() {
            if p.name.ends_with("/kernel") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = latent_init(3, &[8, 16, 1], &mut seeded(4)).unwrap();
        let cfg = LangevinConfig { noise_std: 0.0, ..LangevinConfig::default() };
        assert_eq!(langevin_step(&x, &net, &cfg, &mut seeded(5)).unwrap(), x);
    }

    #[test]
    fn run_chain_counts_and_identity() {
        let x = latent_init(2, &[3], &mut seeded(1)).unwrap();
        let cfg = LangevinConfig { n_steps: 0, ..quad_cfg() };
        let c = run_chain(&x, &QuadraticEnergy, &cfg, &mut seeded(1), None).unwrap();
        assert_eq!(c.last, x);

        let cfg = LangevinConfig { n_steps: 2000, step_size: 1e-3, ..quad_cfg() };
        let c = run_chain(&x, &QuadraticEnergy, &cfg, &mut seeded(1), Some(100)).unwrap();
        let steps: Vec<usize> = c.snapshots.iter().map(|s| s.0).collect();
        let mut want: Vec<usize> = (0..20).map(|k| k * 100).collect();
        want.push(1999);
        assert_eq!(steps, want);
        assert_eq!(c.snapshots.last().unwrap().1, c.last);
    }

    #[test]
    fn config_validation() {
        assert!(LangevinConfig::default().validate().is_ok());
        for bad in [
            LangevinConfig { step_size: 0.0, ..Default::default() },
            LangevinConfig { noise_std: -1.0, ..Default::default() },
            LangevinConfig { grad_clip: 0.0, ..Default::default() },
            LangevinConfig { clamp_lo: 1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    struct NanEnergy;
    impl EnergyLandscape for NanEnergy {
        fn energies(&self, x: &Tensor) -> Result<Vec<f64>, SampleError> {
            Ok(vec![0.0; x.batch()])
        }
        fn input_grad(&self, x: &Tensor) -> Result<Tensor, SampleError> {
            let mut g = Tensor::zeros(x.shape())?;
            g.row_mut(1)[0] = Float::NAN;
            Ok(g)
        }
    }

    #[test]
    fn non_finite_gradient_reports_batch_index() {
        let x = latent_init(3, &[2], &mut seeded(0)).unwrap();
        let err = langevin_step(&x, &NanEnergy, &LangevinConfig::default(), &mut seeded(0)).unwrap_err();
        assert!(matches!(err, SampleError::NonFiniteGradient { index: 1 }));
    }
}
