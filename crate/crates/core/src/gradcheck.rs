//! Finite-difference gradient checks.
//!
//! The oracle side never touches the tape or the GEMM path: [`reference`]
//! re-implements every layer with direct loops in f64, and central
//! differences are taken on that f64 function. The autodiff side runs the
//! production ops at storage precision.

use rand::seq::index::sample;
use rand::Rng;

use crate::net::{EnergyNet, NetError};
use crate::rng::EbmRng;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Float, Tensor, TensorError};

/// Central-difference step. The oracle is f64, so the step only has to beat
/// truncation error; 1e-3 leaves up to 3e-3 of it on train-mode nets.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn rel_err(autodiff: f64, numeric: f64) -> f64 {
    (autodiff - numeric).abs() / autodiff.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// (tensor label, flat index, autodiff, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    fn new(name: impl Into<String>) -> Self {
        GradCheck {
            name: name.into(),
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
        }
    }

    fn record(&mut self, label: &str, index: usize, autodiff: f64, numeric: f64) {
        let e = rel_err(autodiff, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((label.to_string(), index, autodiff, numeric));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

/// Direct-loop f64 implementations of the layers, channels-last.
pub mod reference {
    use crate::tape::Mode;

    pub fn conv2d(
        x: &[f64],
        xs: [usize; 4],
        k: &[f64],
        ks: [usize; 4],
        b: &[f64],
        stride: usize,
    ) -> (Vec<f64>, [usize; 4]) {
        let [n, h, w, cin] = xs;
        let [kh, kw, _, cout] = ks;
        let ho = h.div_ceil(stride);
        let wo = w.div_ceil(stride);
        let pad_t = ((ho - 1) * stride + kh).saturating_sub(h) / 2;
        let pad_l = ((wo - 1) * stride + kw).saturating_sub(w) / 2;
        let mut out = vec![0.0; n * ho * wo * cout];
        for bi in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = ((bi * ho + oy) * wo + ox) * cout;
                    let acc = &mut out[o..o + cout];
                    acc.copy_from_slice(b);
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad_t as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad_l as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x[((bi * h + iy as usize) * w + ix as usize) * cin + ci];
                                let kr = ((ky * kw + kx) * cin + ci) * cout;
                                for (a, kv) in acc.iter_mut().zip(&k[kr..kr + cout]) {
                                    *a += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        (out, [n, ho, wo, cout])
    }

    pub fn dense(x: &[f64], n: usize, d: usize, wgt: &[f64], u: usize, b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; n * u];
        for i in 0..n {
            for j in 0..u {
                let mut s = b[j];
                for p in 0..d {
                    s += x[i * d + p] * wgt[p * u + j];
                }
                out[i * u + j] = s;
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        x: &[f64],
        c: usize,
        gamma: &[f64],
        beta: &[f64],
        moving_mean: &[f64],
        moving_var: &[f64],
        mode: Mode,
        eps: f64,
    ) -> Vec<f64> {
        let m = x.len() / c;
        let (mean, var) = match mode {
            Mode::Infer => (moving_mean.to_vec(), moving_var.to_vec()),
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    mean[ch] = (0..m).map(|r| x[r * c + ch]).sum::<f64>() / m as f64;
                    var[ch] = (0..m).map(|r| (x[r * c + ch] - mean[ch]).powi(2)).sum::<f64>() / m as f64;
                }
                (mean, var)
            }
        };
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % c;
                gamma[ch] * (v - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch]
            })
            .collect()
    }

    pub fn swish(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| v / (1.0 + (-v).exp())).collect()
    }
}

fn to_f64(t: &[Float]) -> Vec<f64> {
    t.iter().map(|&v| v as f64).collect()
}

fn weights(n: usize, rng: &mut EbmRng) -> Vec<Float> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], w: &[Float]) -> f64 {
    a.iter().zip(w).map(|(x, &y)| x * y as f64).sum()
}

/// Check an op against its f64 reference on `coords` random coordinates of
/// every input.
///
/// `op` records the op on a tape; `reference` evaluates the same op in f64
/// given all inputs as flat f64 slices.
pub fn check_op(
    name: &str,
    inputs: &[(&str, Tensor)],
    coords: usize,
    rng: &mut EbmRng,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> Result<GradCheck, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
    let out = op(&mut tape, &vars)?;
    let r = weights(tape.value(out)?.len(), rng);
    let loss = tape.weighted_sum(out, &r)?;
    tape.backward(loss)?;

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, t)| to_f64(t.data())).collect();
    let mut report = GradCheck::new(name);
    for (slot, (label, t)) in inputs.iter().enumerate() {
        let grad = tape.grad(vars[slot])?.expect("leaf requires grad").to_vec();
        for idx in sample(rng, t.len(), coords.min(t.len())) {
            let mut probe = base.clone();
            probe[slot][idx] = base[slot][idx] + FD_STEP;
            let plus = dot(&reference(&probe), &r);
            probe[slot][idx] = base[slot][idx] - FD_STEP;
            let minus = dot(&reference(&probe), &r);
            report.record(label, idx, grad[idx] as f64, (plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

fn rand_tensor(shape: &[usize], rng: &mut EbmRng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng).expect("positive shape")
}

pub fn check_conv2d(rng: &mut EbmRng) -> Result<GradCheck, TensorError> {
    let xs = [2, 7, 9, 3];
    let ks = [3, 3, 3, 4];
    let inputs = [
        ("input", rand_tensor(&xs, rng)),
        ("kernel", rand_tensor(&ks, rng)),
        ("bias", rand_tensor(&[4], rng)),
    ];
    check_op(
        "conv2d",
        &inputs,
        24,
        rng,
        |t, v| t.conv2d(v[0], v[1], v[2], 2),
        |a| reference::conv2d(&a[0], xs, &a[1], ks, &a[2], 2).0,
    )
}

pub fn check_dense(rng: &mut EbmRng) -> Result<GradCheck, TensorError> {
    let inputs = [
        ("input", rand_tensor(&[3, 6], rng)),
        ("weight", rand_tensor(&[6, 4], rng)),
        ("bias", rand_tensor(&[4], rng)),
    ];
    check_op(
        "dense",
        &inputs,
        24,
        rng,
        |t, v| t.dense(v[0], v[1], v[2]),
        |a| reference::dense(&a[0], 3, 6, &a[1], 4, &a[2]),
    )
}

pub fn check_batchnorm(mode: Mode, rng: &mut EbmRng) -> Result<GradCheck, TensorError> {
    let c = 3;
    let eps = 1e-3;
    let mm: Vec<Float> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mv: Vec<Float> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    let inputs = [
        ("input", rand_tensor(&[2, 3, 2, c], rng)),
        ("gamma", Tensor::uniform(&[c], 0.5, 1.5, rng).expect("shape")),
        ("beta", rand_tensor(&[c], rng)),
    ];
    let (mm64, mv64) = (to_f64(&mm), to_f64(&mv));
    let name = match mode {
        Mode::Train => "batchnorm(train)",
        Mode::Infer => "batchnorm(infer)",
    };
    check_op(
        name,
        &inputs,
        12,
        rng,
        |t, v| Ok(t.batchnorm(v[0], v[1], v[2], &mm, &mv, mode, eps)?.0),
        |a| reference::batchnorm(&a[0], c, &a[1], &a[2], &mm64, &mv64, mode, eps),
    )
}

pub fn check_swish(rng: &mut EbmRng) -> Result<GradCheck, TensorError> {
    let inputs = [("input", Tensor::uniform(&[4, 5], -4.0, 4.0, rng).expect("shape"))];
    check_op("swish", &inputs, 20, rng, |t, v| t.swish(v[0]), |a| reference::swish(&a[0]))
}

pub fn check_flatten(rng: &mut EbmRng) -> Result<GradCheck, TensorError> {
    let inputs = [("input", rand_tensor(&[2, 2, 3, 2], rng))];
    check_op("flatten", &inputs, 12, rng, |t, v| t.flatten(v[0]), |a| a[0].clone())
}

/// Every single-op check, in a fixed order.
pub fn check_all_ops(rng: &mut EbmRng) -> Result<Vec<GradCheck>, TensorError> {
    Ok(vec![
        check_conv2d(rng)?,
        check_dense(rng)?,
        check_batchnorm(Mode::Train, rng)?,
        check_batchnorm(Mode::Infer, rng)?,
        check_swish(rng)?,
        check_flatten(rng)?,
    ])
}

/// f64 energies of the whole network with explicit parameter values
/// (registry order, moving statistics included).
pub fn reference_energy(net: &EnergyNet, params: &[Vec<f64>], images: &[f64], n: usize, mode: Mode) -> Vec<f64> {
    let a = net.arch();
    let eps = net.bn_epsilon;
    let mut x = images.to_vec();
    let mut shape = [n, a.height, a.width, 1];
    for (block, &cout) in a.channels.iter().enumerate() {
        let k = if block == 0 { a.first_kernel } else { a.kernel };
        let p = &params[block * 6..block * 6 + 6];
        let (y, s) = reference::conv2d(&x, shape, &p[0], [k, k, shape[3], cout], &p[1], 2);
        let y = reference::batchnorm(&y, cout, &p[2], &p[3], &p[4], &p[5], mode, eps);
        x = reference::swish(&y);
        shape = s;
    }
    let flat = a.flat_len();
    let d0 = params.len() - 4;
    let h = reference::dense(&x, n, flat, &params[d0], a.hidden, &params[d0 + 1]);
    let h = reference::swish(&h);
    reference::dense(&h, n, a.hidden, &params[d0 + 2], 1, &params[d0 + 3])
}

/// Autodiff vs central differences for the composed network: `pixels`
/// random input coordinates and `per_param` coordinates of every trainable
/// tensor, on the loss `sum_n r_n E(x_n)`.
pub fn check_energy_net(
    net: &EnergyNet,
    images: &Tensor,
    mode: Mode,
    pixels: usize,
    per_param: usize,
    rng: &mut EbmRng,
) -> Result<GradCheck, NetError> {
    let n = images.batch();
    let mut fwd = net.forward(images.clone(), mode, pixels > 0, per_param > 0)?;
    let r = weights(n, rng);
    let loss = fwd.tape.weighted_sum(fwd.output, &r)?;
    fwd.tape.backward(loss)?;

    let params: Vec<Vec<f64>> = net.params().iter().map(|p| to_f64(p.tensor.data())).collect();
    let x64 = to_f64(images.data());
    let mode_name = match mode {
        Mode::Train => "train",
        Mode::Infer => "infer",
    };
    let mut report = GradCheck::new(format!("energy_net({mode_name})"));
    let eval = |params: &[Vec<f64>], x: &[f64]| dot(&reference_energy(net, params, x, n, mode), &r);

    if pixels > 0 {
        let grad = fwd.tape.grad(fwd.input)?.expect("input requires grad").to_vec();
        let mut x = x64.clone();
        for idx in sample(rng, x64.len(), pixels.min(x64.len())) {
            x[idx] = x64[idx] + FD_STEP;
            let plus = eval(&params, &x);
            x[idx] = x64[idx] - FD_STEP;
            let minus = eval(&params, &x);
            x[idx] = x64[idx];
            report.record("input", idx, grad[idx] as f64, (plus - minus) / (2.0 * FD_STEP));
        }
    }
    if per_param > 0 {
        let trainable: Vec<usize> = (0..net.params().len()).filter(|&i| net.params()[i].trainable).collect();
        let mut probe = params.clone();
        for (slot, &pi) in trainable.iter().enumerate() {
            let grad = fwd.tape.grad(fwd.trainable[slot])?.expect("param requires grad").to_vec();
            let label = &net.params()[pi].name;
            for idx in sample(rng, grad.len(), per_param.min(grad.len())) {
                probe[pi][idx] = params[pi][idx] + FD_STEP;
                let plus = eval(&probe, &x64);
                probe[pi][idx] = params[pi][idx] - FD_STEP;
                let minus = eval(&probe, &x64);
                probe[pi][idx] = params[pi][idx];
                report.record(label, idx, grad[idx] as f64, (plus - minus) / (2.0 * FD_STEP));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Arch;
    use crate::rng::seeded;

    #[cfg(not(feature = "f64"))]
    const TOL: f64 = 1e-3;
    #[cfg(feature = "f64")]
    const TOL: f64 = 1e-6;

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = seeded(11);
        for c in check_all_ops(&mut rng).unwrap() {
            assert!(c.passes(TOL), "{c:?}");
        }
    }

    #[test]
    fn reference_matches_tape_forward() {
        let net = EnergyNet::with_arch(Arch::mini(), 2).unwrap();
        let mut rng = seeded(3);
        let x = Tensor::uniform(&[3, 8, 16, 1], 0.0, 1.0, &mut rng).unwrap();
        let params: Vec<Vec<f64>> = net.params().iter().map(|p| to_f64(p.tensor.data())).collect();
        for mode in [Mode::Train, Mode::Infer] {
            let want = reference_energy(&net, &params, &to_f64(x.data()), 3, mode);
            let got = net.forward(x.clone(), mode, false, false).unwrap();
            let got = got.tape.value(got.output).unwrap();
            for (g, w) in got.data().iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn mini_net_gradients_both_modes() {
        let net = EnergyNet::with_arch(Arch::mini(), 2).unwrap();
        let mut rng = seeded(5);
        let x = Tensor::uniform(&[3, 8, 16, 1], 0.0, 1.0, &mut rng).unwrap();
        for mode in [Mode::Train, Mode::Infer] {
            let c = check_energy_net(&net, &x, mode, 10, 4, &mut rng).unwrap();
            assert!(c.passes(TOL), "{c:?}");
        }
    }
}
