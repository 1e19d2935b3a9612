//! Analytic Boltzmann distributions `p(x) = exp(-E(x)) / Z` for checking
//! the sampling machinery.
//!
//! Toy chains use the unadjusted Langevin update
//! `x' = x - a * grad E(x) + sqrt(2a) * z`, whose stationary law approaches
//! `p` as `a -> 0`. The image sampler instead uses a small fixed noise and
//! gradient clipping; that recipe is biased and is not what is checked here.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::pgm::GrayImage;
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LabError {
    #[error("non-finite energy at grid point {0:?}")]
    NonFiniteEnergy(Vec<f64>),
    #[error("chain {chain} left twice the domain box at step {step}")]
    Diverged { chain: usize, step: usize },
    #[error("binning mismatch: {0}")]
    Binning(String),
    #[error("empty sample set")]
    Empty,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Catalog of closed-form energies. Each has a box holding all but a
/// negligible (< 1e-6) share of its Boltzmann mass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalyticEnergy {
    /// `0.5 x^2` on `[-8, 8]`.
    Quadratic,
    /// `x^4 - 2x^2` on `[-3, 3]`; minima at `x = +-1`.
    DoubleWell,
    /// `-ln(exp(-(x+2)^2/2) + exp(-(x-2)^2/2))` on `[-9, 9]`.
    GaussianMixture,
    /// `0.5 |x|^2` on `[-8, 8]^2`.
    Quadratic2d,
    /// `x^4 - 2x^2 + 2 y^2` on `[-3, 3]^2`.
    DoubleWell2d,
    /// Two unit Gaussians at `(+-2, 0)` on `[-9, 9] x [-6, 6]`.
    GaussianMixture2d,
}

impl AnalyticEnergy {
    pub const ALL: [AnalyticEnergy; 6] = [
        AnalyticEnergy::Quadratic,
        AnalyticEnergy::DoubleWell,
        AnalyticEnergy::GaussianMixture,
        AnalyticEnergy::Quadratic2d,
        AnalyticEnergy::DoubleWell2d,
        AnalyticEnergy::GaussianMixture2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnalyticEnergy::Quadratic => "quadratic",
            AnalyticEnergy::DoubleWell => "double-well",
            AnalyticEnergy::GaussianMixture => "gaussian-mixture",
            AnalyticEnergy::Quadratic2d => "quadratic-2d",
            AnalyticEnergy::DoubleWell2d => "double-well-2d",
            AnalyticEnergy::GaussianMixture2d => "gaussian-mixture-2d",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            AnalyticEnergy::Quadratic | AnalyticEnergy::DoubleWell | AnalyticEnergy::GaussianMixture => 1,
            _ => 2,
        }
    }

    pub fn domain(self) -> Vec<(f64, f64)> {
        match self {
            AnalyticEnergy::Quadratic => vec![(-8.0, 8.0)],
            AnalyticEnergy::DoubleWell => vec![(-3.0, 3.0)],
            AnalyticEnergy::GaussianMixture => vec![(-9.0, 9.0)],
            AnalyticEnergy::Quadratic2d => vec![(-8.0, 8.0); 2],
            AnalyticEnergy::DoubleWell2d => vec![(-3.0, 3.0), (-3.0, 3.0)],
            AnalyticEnergy::GaussianMixture2d => vec![(-9.0, 9.0), (-6.0, 6.0)],
        }
    }

    /// Largest accepted toy-chain step size: `a * curvature` stays well
    /// below 1 where the mass is.
    pub fn max_step(self) -> f64 {
        match self {
            AnalyticEnergy::DoubleWell | AnalyticEnergy::DoubleWell2d => 0.05,
            _ => 0.5,
        }
    }

    /// Step size whose discretization bias and mixing both fit the 10^5
    /// sample, 20-bin comparison.
    pub fn toy_step_size(self) -> f64 {
        match self {
            AnalyticEnergy::Quadratic | AnalyticEnergy::Quadratic2d => 0.06,
            AnalyticEnergy::DoubleWell | AnalyticEnergy::DoubleWell2d => 0.015,
            AnalyticEnergy::GaussianMixture | AnalyticEnergy::GaussianMixture2d => 0.1,
        }
    }

    pub fn energy(self, x: &[f64]) -> f64 {
        match self {
            AnalyticEnergy::Quadratic | AnalyticEnergy::Quadratic2d => 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            AnalyticEnergy::DoubleWell => well(x[0]),
            AnalyticEnergy::DoubleWell2d => well(x[0]) + 2.0 * x[1] * x[1],
            AnalyticEnergy::GaussianMixture => mixture(x[0]).0,
            AnalyticEnergy::GaussianMixture2d => mixture(x[0]).0 + 0.5 * x[1] * x[1],
        }
    }

    pub fn grad(self, x: &[f64], out: &mut [f64]) {
        match self {
            AnalyticEnergy::Quadratic | AnalyticEnergy::Quadratic2d => out.copy_from_slice(x),
            AnalyticEnergy::DoubleWell => out[0] = well_grad(x[0]),
            AnalyticEnergy::DoubleWell2d => {
                out[0] = well_grad(x[0]);
                out[1] = 4.0 * x[1];
            }
            AnalyticEnergy::GaussianMixture => out[0] = mixture(x[0]).1,
            AnalyticEnergy::GaussianMixture2d => {
                out[0] = mixture(x[0]).1;
                out[1] = x[1];
            }
        }
    }
}

impl std::str::FromStr for AnalyticEnergy {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, LabError> {
        AnalyticEnergy::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| LabError::Invalid(format!("unknown energy {s:?}")))
    }
}

fn well(x: f64) -> f64 {
    x.powi(4) - 2.0 * x * x
}

fn well_grad(x: f64) -> f64 {
    4.0 * x.powi(3) - 4.0 * x
}

/// `(E, dE/dx)` of the symmetric two-component mixture, via log-sum-exp.
fn mixture(x: f64) -> (f64, f64) {
    let a = -0.5 * (x + 2.0).powi(2);
    let b = -0.5 * (x - 2.0).powi(2);
    let m = a.max(b);
    let (wa, wb) = ((a - m).exp(), (b - m).exp());
    let e = -(m + (wa + wb).ln());
    let g = (wa * (x + 2.0) + wb * (x - 2.0)) / (wa + wb);
    (e, g)
}

/// Uniform cells along one axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
}

impl Axis {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.cells as f64
    }

    pub fn centre(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width()
    }

    fn cell_of(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x < self.hi) {
            return None;
        }
        Some((((x - self.lo) / self.width()) as usize).min(self.cells - 1))
    }
}

/// Probability mass per grid cell, row-major with the last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    pub axes: Vec<Axis>,
    pub probs: Vec<f64>,
    /// Partition function when built by quadrature; `None` for histograms.
    pub z: Option<f64>,
}

impl GridDensity {
    fn check_axes(axes: &[Axis]) -> Result<(), LabError> {
        if axes.is_empty() || axes.iter().any(|a| a.cells == 0 || !(a.lo < a.hi)) {
            return Err(LabError::Invalid(format!("bad grid {axes:?}")));
        }
        Ok(())
    }

    fn cell_count(axes: &[Axis]) -> usize {
        axes.iter().map(|a| a.cells).product()
    }

    fn unravel(axes: &[Axis], mut flat: usize, out: &mut [usize]) {
        for (d, a) in axes.iter().enumerate().rev() {
            out[d] = flat % a.cells;
            flat /= a.cells;
        }
    }

    /// Empirical distribution of `samples` (points of `axes.len()`
    /// coordinates). Normalized by the total count, so mass outside the grid
    /// is simply missing.
    pub fn histogram(axes: &[Axis], samples: &Samples) -> Result<Self, LabError> {
        Self::check_axes(axes)?;
        if samples.dim != axes.len() {
            return Err(LabError::Binning(format!("{}-d samples on a {}-d grid", samples.dim, axes.len())));
        }
        if samples.is_empty() {
            return Err(LabError::Empty);
        }
        let mut counts = vec![0u64; Self::cell_count(axes)];
        'points: for p in samples.points() {
            let mut flat = 0;
            for (a, &x) in axes.iter().zip(p) {
                match a.cell_of(x) {
                    Some(i) => flat = flat * a.cells + i,
                    None => continue 'points,
                }
            }
            counts[flat] += 1;
        }
        let n = samples.len() as f64;
        Ok(GridDensity {
            axes: axes.to_vec(),
            probs: counts.into_iter().map(|c| c as f64 / n).collect(),
            z: None,
        })
    }

    /// Merge blocks of `factor` cells along every axis.
    pub fn coarsen(&self, factor: usize) -> Result<Self, LabError> {
        if factor == 0 || self.axes.iter().any(|a| a.cells % factor != 0) {
            return Err(LabError::Binning(format!("cannot merge {factor} cells of {:?}", self.axes)));
        }
        let axes: Vec<Axis> = self.axes.iter().map(|a| Axis { cells: a.cells / factor, ..*a }).collect();
        let mut probs = vec![0.0; Self::cell_count(&axes)];
        let mut idx = vec![0; axes.len()];
        for (flat, &p) in self.probs.iter().enumerate() {
            Self::unravel(&self.axes, flat, &mut idx);
            let coarse = idx.iter().zip(&axes).fold(0, |acc, (&i, a)| acc * a.cells + i / factor);
            probs[coarse] += p;
        }
        Ok(GridDensity { axes, probs, z: self.z })
    }

    /// Mass on each side of `x_0 = 0`.
    pub fn split_at_zero(&self) -> (f64, f64) {
        let mut idx = vec![0; self.axes.len()];
        let (mut neg, mut pos) = (0.0, 0.0);
        for (flat, &p) in self.probs.iter().enumerate() {
            Self::unravel(&self.axes, flat, &mut idx);
            if self.axes[0].centre(idx[0]) < 0.0 {
                neg += p;
            } else {
                pos += p;
            }
        }
        (neg, pos)
    }

    /// 2-D densities as a heatmap, darker for more mass; rows follow axis 1
    /// from top (high) to bottom (low), columns follow axis 0.
    pub fn heatmap(&self) -> Result<GrayImage, LabError> {
        let [ax, ay] = self.axes[..] else {
            return Err(LabError::Invalid("heatmap needs a 2-d grid".into()));
        };
        let max = self.probs.iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
        let values = (0..ay.cells).rev().flat_map(|j| {
            (0..ax.cells).map(move |i| 1.0 - self.probs[i * ay.cells + j] * scale)
        });
        Ok(GrayImage::from_unit(ax.cells, ay.cells, values.collect::<Vec<_>>()))
    }
}

/// Midpoint-rule quadrature of `exp(-E)` over `energy`'s domain with
/// `cells` cells per axis: `p_i = exp(-E(x_i)) dV / Z`, `Z = sum exp(-E(x_j)) dV`.
pub fn boltzmann_density(energy: AnalyticEnergy, cells: usize) -> Result<GridDensity, LabError> {
    let axes: Vec<Axis> = energy.domain().into_iter().map(|(lo, hi)| Axis { lo, hi, cells }).collect();
    density_on_grid(&axes, |x| energy.energy(x))
}

pub fn density_on_grid(axes: &[Axis], energy: impl Fn(&[f64]) -> f64) -> Result<GridDensity, LabError> {
    GridDensity::check_axes(axes)?;
    let n = GridDensity::cell_count(axes);
    let mut idx = vec![0; axes.len()];
    let mut x = vec![0.0; axes.len()];
    let mut es = Vec::with_capacity(n);
    for flat in 0..n {
        GridDensity::unravel(axes, flat, &mut idx);
        for d in 0..axes.len() {
            x[d] = axes[d].centre(idx[d]);
        }
        let e = energy(&x);
        if !e.is_finite() {
            return Err(LabError::NonFiniteEnergy(x));
        }
        es.push(e);
    }
    let e_min = es.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = es.iter().map(|e| (e_min - e).exp()).collect();
    let total: f64 = weights.iter().sum();
    let volume: f64 = axes.iter().map(Axis::width).product();
    Ok(GridDensity {
        axes: axes.to_vec(),
        probs: weights.iter().map(|w| w / total).collect(),
        z: Some((-e_min).exp() * total * volume),
    })
}

/// `0.5 * sum |a_i - b_i|` after normalizing both to unit mass.
pub fn tv_distance(a: &GridDensity, b: &GridDensity) -> Result<f64, LabError> {
    if a.axes != b.axes {
        return Err(LabError::Binning(format!("{:?} vs {:?}", a.axes, b.axes)));
    }
    tv_distance_probs(&a.probs, &b.probs)
}

pub fn tv_distance_probs(a: &[f64], b: &[f64]) -> Result<f64, LabError> {
    if a.len() != b.len() {
        return Err(LabError::Binning(format!("{} bins vs {}", a.len(), b.len())));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if !(sa > 0.0 && sb > 0.0) || a.iter().chain(b).any(|&p| p < 0.0) {
        return Err(LabError::Invalid("histograms must be non-negative with positive mass".into()));
    }
    Ok(0.5 * a.iter().zip(b).map(|(x, y)| (x / sa - y / sb).abs()).sum::<f64>())
}

/// Flat list of `dim`-dimensional points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Samples {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Mean and (population) variance of coordinate `d`.
    pub fn moments(&self, d: usize) -> (f64, f64) {
        let n = self.len() as f64;
        let mean = self.points().map(|p| p[d]).sum::<f64>() / n;
        let var = self.points().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }
}

/// Monte Carlo estimate of `E[E(x)]`: the mean energy over the samples.
pub fn mc_energy_mean(samples: &Samples, energy: AnalyticEnergy) -> Result<f64, LabError> {
    mean_energy(&samples.points().map(|p| energy.energy(p)).collect::<Vec<_>>())
}

pub fn mean_energy(energies: &[f64]) -> Result<f64, LabError> {
    if energies.is_empty() {
        return Err(LabError::Empty);
    }
    Ok(energies.iter().sum::<f64>() / energies.len() as f64)
}

/// One unadjusted Langevin step with a given standard-normal draw `z`.
pub fn toy_step(energy: AnalyticEnergy, x: &mut [f64], step_size: f64, z: &[f64], grad: &mut [f64]) {
    energy.grad(x, grad);
    let s = (2.0 * step_size).sqrt();
    for ((v, g), z) in x.iter_mut().zip(grad.iter()).zip(z) {
        *v += -step_size * g + s * z;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyChainConfig {
    pub n_chains: usize,
    pub n_steps: usize,
    pub step_size: f64,
    pub burn_in: f64,
}

impl ToyChainConfig {
    /// 10^5 samples after 20% burn-in at the energy's documented step size.
    pub fn standard(energy: AnalyticEnergy) -> Self {
        // Mixtures need many short chains to sample the mode ratio; the
        // double wells need short chains at their smaller step.
        let (n_chains, n_steps) = match energy {
            AnalyticEnergy::Quadratic | AnalyticEnergy::Quadratic2d => (400, 313),
            AnalyticEnergy::DoubleWell => (2000, 63),
            AnalyticEnergy::DoubleWell2d => (1000, 125),
            AnalyticEnergy::GaussianMixture | AnalyticEnergy::GaussianMixture2d => (1250, 100),
        };
        ToyChainConfig { n_chains, n_steps, step_size: energy.toy_step_size(), burn_in: 0.2 }
    }

    /// 10^6 samples at a smaller step: for moments, where the bias of the
    /// standard step (variance inflated by about `1 / (1 - a / 2)`) matters.
    pub fn long(energy: AnalyticEnergy) -> Self {
        ToyChainConfig {
            n_chains: 1000,
            n_steps: 1250,
            step_size: 0.02f64.min(energy.toy_step_size()),
            burn_in: 0.2,
        }
    }

    pub fn kept_steps(&self) -> usize {
        self.n_steps - (self.n_steps as f64 * self.burn_in).round() as usize
    }
}

/// Position of chain `c` of `n` along axis `d`, as a fraction of the box:
/// evenly spaced on axis 0, a golden-ratio (Kronecker) sequence on axis 1.
fn start_fraction(c: usize, n: usize, d: usize) -> f64 {
    let u = (c as f64 + 0.5) / n as f64;
    match d {
        0 => u,
        _ => (c as f64 * 0.618_033_988_749_894_9 + 0.5).fract(),
    }
}

/// Independent chains whose starts cover the domain box evenly. Each chain
/// draws from its own stream derived from `seed`, so the result does not
/// depend on how chains are scheduled.
pub fn langevin_toy_chain(energy: AnalyticEnergy, cfg: &ToyChainConfig, seed: u64) -> Result<Samples, LabError> {
    if cfg.n_chains == 0 || cfg.n_steps == 0 {
        return Err(LabError::Invalid("need at least one chain and one step".into()));
    }
    if !(cfg.step_size > 0.0 && cfg.step_size <= energy.max_step()) {
        return Err(LabError::Invalid(format!(
            "step size {} outside (0, {}] for {}",
            cfg.step_size,
            energy.max_step(),
            energy.name()
        )));
    }
    if !(0.0..1.0).contains(&cfg.burn_in) {
        return Err(LabError::Invalid("burn-in fraction must be in [0, 1)".into()));
    }
    run_chains(energy, cfg, seed)
}

fn run_chains(energy: AnalyticEnergy, cfg: &ToyChainConfig, seed: u64) -> Result<Samples, LabError> {
    let dim = energy.dim();
    let domain = energy.domain();
    let skip = cfg.n_steps - cfg.kept_steps();
    let mut data = Vec::with_capacity(cfg.n_chains * cfg.kept_steps() * dim);
    let (mut x, mut z, mut g) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    for chain in 0..cfg.n_chains {
        let mut rng = seeded(derive_seed(seed, chain as u64));
        for (d, (v, &(lo, hi))) in x.iter_mut().zip(&domain).enumerate() {
            *v = lo + (hi - lo) * start_fraction(chain, cfg.n_chains, d);
        }
        for step in 0..cfg.n_steps {
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            toy_step(energy, &mut x, cfg.step_size, &z, &mut g);
            let escaped = x.iter().zip(&domain).any(|(&v, &(lo, hi))| {
                let (c, h) = (0.5 * (lo + hi), 0.5 * (hi - lo));
                !((v - c).abs() <= 2.0 * h)
            });
            if escaped {
                return Err(LabError::Diverged { chain, step });
            }
            if step >= skip {
                data.extend_from_slice(&x);
            }
        }
    }
    Ok(Samples { dim, data })
}

/// Histogram resolution used for chain-vs-quadrature comparisons.
pub const TV_BINS: usize = 20;
/// Quadrature cells per histogram bin.
pub const FINE_PER_BIN: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct LabRow {
    pub energy: AnalyticEnergy,
    pub z: f64,
    pub tv: f64,
    pub samples: usize,
    /// Per-coordinate sample mean and variance.
    pub moments: Vec<(f64, f64)>,
    /// Sample mass with `x_0 < 0`.
    pub left_mass: f64,
    pub mean_energy: f64,
    pub exact: GridDensity,
    pub empirical: GridDensity,
}

pub fn compare(energy: AnalyticEnergy, cfg: &ToyChainConfig, seed: u64) -> Result<LabRow, LabError> {
    let cells = if energy.dim() == 1 { TV_BINS * FINE_PER_BIN } else { TV_BINS * 20 };
    let fine = boltzmann_density(energy, cells)?;
    let exact = fine.coarsen(cells / TV_BINS)?;
    let samples = langevin_toy_chain(energy, cfg, seed)?;
    let empirical = GridDensity::histogram(&exact.axes, &samples)?;
    let left = samples.points().filter(|p| p[0] < 0.0).count();
    Ok(LabRow {
        energy,
        z: fine.z.expect("quadrature sets z"),
        tv: tv_distance(&empirical, &exact)?,
        samples: samples.len(),
        moments: (0..energy.dim()).map(|d| samples.moments(d)).collect(),
        left_mass: left as f64 / samples.len() as f64,
        mean_energy: mc_energy_mean(&samples, energy)?,
        exact,
        empirical,
    })
}

/// Median absolute error of the Monte Carlo mean of `0.5 x^2` under exact
/// `N(0, 1)` draws (true value 0.5), per sample size.
pub fn mc_convergence(sizes: &[usize], repeats: usize, seed: u64) -> Vec<(usize, f64)> {
    sizes
        .iter()
        .map(|&j| {
            let mut errs: Vec<f64> = (0..repeats)
                .map(|r| {
                    let mut rng = seeded(derive_seed(seed, ((j as u64) << 16) | r as u64));
                    let data: Vec<f64> = (0..j).map(|_| rng.sample(StandardNormal)).collect();
                    let m = mc_energy_mean(&Samples { dim: 1, data }, AnalyticEnergy::Quadratic).expect("j >= 1");
                    (m - 0.5).abs()
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            let mid = errs.len() / 2;
            let median = if errs.len() % 2 == 0 { 0.5 * (errs[mid - 1] + errs[mid]) } else { errs[mid] };
            (j, median)
        })
        .collect()
}

pub const CSV_HEADER: &str = "energy,dim,z,tv_distance,samples,mean0,var0,mean1,var1,left_mass,mean_energy";

pub fn report_csv(rows: &[LabRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let m = |d: usize| r.moments.get(d).map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
        let ((m0, v0), (m1, v1)) = (m(0), m(1));
        writeln!(
            out,
            "{},{},{},{},{},{m0},{v0},{m1},{v1},{},{}",
            r.energy.name(),
            r.energy.dim(),
            r.z,
            r.tv,
            r.samples,
            r.left_mass,
            r.mean_energy
        )
        .expect("string write");
    }
    out
}

pub fn report_text(rows: &[LabRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let moments: Vec<String> = r.moments.iter().map(|(m, v)| format!("mean {m:+.4} var {v:.4}")).collect();
        writeln!(
            out,
            "{:<20} Z {:<12.6} TV {:.4}  {}  left {:.3}  <E> {:.4}  (n={})",
            r.energy.name(),
            r.z,
            r.tv,
            moments.join(" | "),
            r.left_mass,
            r.mean_energy,
            r.samples
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn flat_energy_gives_uniform_cells() {
        let d = density_on_grid(&[Axis { lo: 0.0, hi: 1.0, cells: 100 }], |_| 0.0).unwrap();
        assert!(d.probs.iter().all(|&p| (p - 0.01).abs() < 1e-15));
        assert!((d.z.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_partition_function() {
        let d = boltzmann_density(AnalyticEnergy::Quadratic, 4000).unwrap();
        let want = (2.0 * std::f64::consts::PI).sqrt();
        assert!((d.z.unwrap() - want).abs() < 1e-5, "{}", d.z.unwrap());
        let d2 = boltzmann_density(AnalyticEnergy::Quadratic2d, 400).unwrap();
        assert!((d2.z.unwrap() - 2.0 * std::f64::consts::PI).abs() < 1e-3);
    }

    #[test]
    fn densities_normalized_and_nonnegative() {
        for e in AnalyticEnergy::ALL {
            let d = boltzmann_density(e, 200).unwrap();
            assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{}", e.name());
            assert!(d.probs.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn double_well_symmetric_with_modes_at_one() {
        let d = boltzmann_density(AnalyticEnergy::DoubleWell, 600).unwrap();
        let n = d.probs.len();
        for i in 0..n / 2 {
            assert!((d.probs[i] - d.probs[n - 1 - i]).abs() < 1e-15);
        }
        let argmax = (0..n).max_by(|&a, &b| d.probs[a].total_cmp(&d.probs[b])).unwrap();
        assert!((d.axes[0].centre(argmax).abs() - 1.0).abs() < 0.01);
    }

    #[test]
    fn gradients_match_central_differences() {
        let h = 1e-5;
        let mut rng = seeded(3);
        for e in AnalyticEnergy::ALL {
            let dom = e.domain();
            for _ in 0..50 {
                let x: Vec<f64> = dom.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect();
                let mut g = vec![0.0; e.dim()];
                e.grad(&x, &mut g);
                for d in 0..e.dim() {
                    let (mut a, mut b) = (x.clone(), x.clone());
                    a[d] += h;
                    b[d] -= h;
                    let fd = (e.energy(&a) - e.energy(&b)) / (2.0 * h);
                    assert!((fd - g[d]).abs() <= 1e-8 * g[d].abs().max(1.0), "{} {x:?}: {fd} vs {}", e.name(), g[d]);
                }
            }
        }
    }

    #[test]
    fn mc_mean_examples() {
        assert_eq!(mean_energy(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(mean_energy(&[]), Err(LabError::Empty));
        let one = Samples { dim: 1, data: vec![3.0] };
        assert_eq!(mc_energy_mean(&one, AnalyticEnergy::Quadratic).unwrap(), 4.5);
        let mut rng = seeded(8);
        let data: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
        let m = mc_energy_mean(&Samples { dim: 1, data }, AnalyticEnergy::Quadratic).unwrap();
        assert!((m - 0.5).abs() < 0.01, "{m}");
    }

    #[test]
    fn one_step_formula() {
        let (a, z) = (0.01, 0.7);
        let mut x = [1.0];
        toy_step(AnalyticEnergy::Quadratic, &mut x, a, &[z], &mut [0.0]);
        assert!((x[0] - (1.0 - a + (2.0 * a).sqrt() * z)).abs() < 1e-15);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance_probs(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(tv_distance_probs(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(tv_distance_probs(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert!(matches!(tv_distance_probs(&[1.0], &[0.5, 0.5]), Err(LabError::Binning(_))));
    }

    #[test]
    fn quadratic_chain_variance() {
        let s = langevin_toy_chain(AnalyticEnergy::Quadratic, &ToyChainConfig::long(AnalyticEnergy::Quadratic), 1).unwrap();
        assert_eq!(s.len(), 1_000_000);
        let (_, var) = s.moments(0);
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn catalog_chains_match_quadrature() {
        for e in AnalyticEnergy::ALL {
            let row = compare(e, &ToyChainConfig::standard(e), 2).unwrap();
            assert_eq!(row.samples, 100_000);
            assert!(row.tv <= 0.05, "{}: tv {}", e.name(), row.tv);
        }
    }

    #[test]
    fn double_well_chain_visits_both_modes() {
        let row = compare(AnalyticEnergy::DoubleWell, &ToyChainConfig::standard(AnalyticEnergy::DoubleWell), 4).unwrap();
        assert!((row.left_mass - 0.5).abs() <= 0.05, "{}", row.left_mass);
    }

    #[test]
    fn mc_error_shrinks_with_sample_size() {
        let errs = mc_convergence(&[100, 1000, 10_000], 20, 6);
        assert!(errs[0].1 > errs[1].1 && errs[1].1 > errs[2].1, "{errs:?}");
    }

    #[test]
    fn divergence_detected() {
        let cfg = ToyChainConfig { n_chains: 1, n_steps: 100, step_size: 0.05, burn_in: 0.2 };
        let big = ToyChainConfig { step_size: 0.5, ..cfg };
        assert!(matches!(langevin_toy_chain(AnalyticEnergy::DoubleWell, &big, 0), Err(LabError::Invalid(_))));
        assert!(langevin_toy_chain(AnalyticEnergy::DoubleWell, &cfg, 0).is_ok());
        // Past a = 2 the quadratic update x' = (1 - a) x + ... is unstable.
        let wild = ToyChainConfig { step_size: 2.5, ..cfg };
        assert!(matches!(run_chains(AnalyticEnergy::Quadratic, &wild, 0), Err(LabError::Diverged { chain: 0, .. })));
    }

    #[test]
    fn heatmap_of_2d_density() {
        let d = boltzmann_density(AnalyticEnergy::GaussianMixture2d, 40).unwrap();
        let img = d.heatmap().unwrap();
        assert_eq!((img.width, img.height), (40, 40));
        assert_eq!(*img.pixels.iter().min().unwrap(), 0);
        assert!(boltzmann_density(AnalyticEnergy::Quadratic, 40).unwrap().heatmap().is_err());
    }

    fn normalized(v: Vec<f64>) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn tv_symmetric_and_triangle(
            a in proptest::collection::vec(0.01f64..1.0, 8),
            b in proptest::collection::vec(0.01f64..1.0, 8),
            c in proptest::collection::vec(0.01f64..1.0, 8),
        ) {
            let (a, b, c) = (normalized(a), normalized(b), normalized(c));
            let ab = tv_distance_probs(&a, &b).unwrap();
            prop_assert!((ab - tv_distance_probs(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab));
            let ac = tv_distance_probs(&a, &c).unwrap();
            let cb = tv_distance_probs(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }
    }
}
