//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Ops append
//! nodes in execution order, so replaying the node list backwards is a valid
//! topological order for the chain rule. Leaves are created with an explicit
//! `requires_grad` flag; backward skips any sub-graph with no such leaf
//! upstream, which is how the same forward code serves input gradients
//! (Langevin) and parameter gradients (training).

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{gemm, Float, MatRef, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Batch normalization behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with moving statistics.
    Infer,
}

/// Per-channel statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

/// Geometry of a channels-last convolution with "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    /// Output is `ceil(in / stride)`; the total padding is split with the
    /// smaller half on the top/left.
    pub fn new(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("expected input [N,H,W,Cin] and kernel [kh,kw,Cin,Cout], got {input:?} and {kernel:?}"),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: "stride must be at least 1".into(),
            });
        }
        let (n, h, w, cin) = (input[0], input[1], input[2], input[3]);
        let (kh, kw, kcin, cout) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if cin != kcin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {cin} != kernel input channels {kcin}"),
            });
        }
        let ho = h.div_ceil(stride);
        let wo = w.div_ceil(stride);
        let pad_h = ((ho - 1) * stride + kh).saturating_sub(h);
        let pad_w = ((wo - 1) * stride + kw).saturating_sub(w);
        Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            ho,
            wo,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn out_rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Visit every (output row, patch column offset, input offset) triple
    /// whose input pixel is inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let plen = self.patch_len();
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = row * plen + (ky * self.kw + kx) * self.cin;
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            f(row, col, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[Float]) -> Vec<Float> {
        let mut cols = vec![0.0; self.out_rows() * self.patch_len()];
        let cin = self.cin;
        self.for_each_tap(|_, col, src| {
            cols[col..col + cin].copy_from_slice(&input[src..src + cin]);
        });
        cols
    }

    fn col2im(&self, cols: &[Float], out: &mut [Float]) {
        let cin = self.cin;
        self.for_each_tap(|_, col, src| {
            for (o, c) in out[src..src + cin].iter_mut().zip(&cols[col..col + cin]) {
                *o += *c;
            }
        });
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        geom: ConvGeom,
        cols: Option<Vec<Float>>,
    },
    Dense {
        input: usize,
        weight: usize,
        bias: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<Float>,
        inv_std: Vec<Float>,
        batch_stats: bool,
    },
    Swish {
        input: usize,
    },
    Reshape {
        input: usize,
    },
    SliceRows {
        input: usize,
        start: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: Float,
    },
    Square {
        input: usize,
    },
    Mean {
        input: usize,
    },
    WeightedSum {
        input: usize,
        weights: Vec<Float>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Vec<Float>>,
    op: Op,
}

/// Recorded computation for one forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn sigmoid(x: Float) -> Float {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVariable);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            requires_grad: false,
            needs_grad,
            grad: None,
            op,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Gradient of the last backward output with respect to a leaf.
    pub fn grad(&self, v: Var) -> Result<Option<&[Float]>> {
        Ok(self.nodes[self.idx(v)?].grad.as_deref())
    }

    /// Move a leaf gradient out as a tensor shaped like the leaf.
    pub fn take_grad(&mut self, v: Var) -> Result<Option<Tensor>> {
        let i = self.idx(v)?;
        let node = &mut self.nodes[i];
        match node.grad.take() {
            None => Ok(None),
            Some(g) => Ok(Some(Tensor::new(node.value.shape().to_vec(), g)?)),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (i, k, b) = (self.idx(input)?, self.idx(kernel)?, self.idx(bias)?);
        let geom = ConvGeom::new(self.nodes[i].value.shape(), self.nodes[k].value.shape(), stride)?;
        if self.nodes[b].value.shape() != [geom.cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {:?} != [{}]", self.nodes[b].value.shape(), geom.cout),
            });
        }
        let cols = geom.im2col(self.nodes[i].value.data());
        let m = geom.out_rows();
        let plen = geom.patch_len();
        let mut out = Vec::with_capacity(m * geom.cout);
        let bias_v = self.nodes[b].value.data();
        for _ in 0..m {
            out.extend_from_slice(bias_v);
        }
        gemm(
            m,
            plen,
            geom.cout,
            MatRef::rows(&cols, plen),
            MatRef::rows(self.nodes[k].value.data(), geom.cout),
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![geom.n, geom.ho, geom.wo, geom.cout], out)?;
        let keep_cols = self.nodes[k].needs_grad;
        Ok(self.push(
            value,
            Op::Conv2d {
                input: i,
                kernel: k,
                bias: b,
                geom,
                cols: keep_cols.then_some(cols),
            },
            &[i, k, b],
        ))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (i, w, b) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let (xs, ws, bs) = (
            self.nodes[i].value.shape(),
            self.nodes[w].value.shape(),
            self.nodes[b].value.shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                detail: format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            });
        }
        let (n, d, u) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(n * u);
        for _ in 0..n {
            out.extend_from_slice(self.nodes[b].value.data());
        }
        gemm(
            n,
            d,
            u,
            MatRef::rows(self.nodes[i].value.data(), d),
            MatRef::rows(self.nodes[w].value.data(), u),
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![n, u], out)?;
        Ok(self.push(value, Op::Dense { input: i, weight: w, bias: b }, &[i, w, b]))
    }

    /// Batch normalization over every axis but the last.
    ///
    /// In [`Mode::Train`] the batch statistics are used and returned so the
    /// caller can fold them into its moving averages; in [`Mode::Infer`] the
    /// given moving statistics are used and nothing is returned.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        moving_mean: &[Float],
        moving_var: &[Float],
        mode: Mode,
        epsilon: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (i, g, b) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        if epsilon <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "batchnorm",
                detail: format!("epsilon must be positive, got {epsilon}"),
            });
        }
        let shape = self.nodes[i].value.shape().to_vec();
        let c = *shape.last().expect("tensor shapes are non-empty");
        for (what, len) in [
            ("gamma", self.nodes[g].value.len()),
            ("beta", self.nodes[b].value.len()),
            ("moving_mean", moving_mean.len()),
            ("moving_var", moving_var.len()),
        ] {
            if len != c {
                return Err(TensorError::ShapeMismatch {
                    op: "batchnorm",
                    detail: format!("{what} has {len} channels, input has {c}"),
                });
            }
        }
        let x = self.nodes[i].value.data();
        let m = x.len() / c;
        let (mean, var, stats) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f64; c];
                for row in x.chunks_exact(c) {
                    for (acc, &v) in mean.iter_mut().zip(row) {
                        *acc += v as f64;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0f64; c];
                for row in x.chunks_exact(c) {
                    for ((acc, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v as f64 - mu;
                        *acc += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                (
                    mean.clone(),
                    var.clone(),
                    Some(BatchStats { mean, var }),
                )
            }
            Mode::Infer => (
                moving_mean.iter().map(|&v| v as f64).collect(),
                moving_var.iter().map(|&v| v as f64).collect(),
                None,
            ),
        };
        let inv_std: Vec<Float> = var.iter().map(|v| (1.0 / (v + epsilon).sqrt()) as Float).collect();
        let mean_f: Vec<Float> = mean.iter().map(|&v| v as Float).collect();
        let gv = self.nodes[g].value.data();
        let bv = self.nodes[b].value.data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(c) {
            for ch in 0..c {
                let xh = (row[ch] - mean_f[ch]) * inv_std[ch];
                xhat.push(xh);
                out.push(gv[ch] * xh + bv[ch]);
            }
        }
        let value = Tensor::new(shape, out)?;
        let var_out = self.push(
            value,
            Op::BatchNorm {
                input: i,
                gamma: g,
                beta: b,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            &[i, g, b],
        );
        Ok((var_out, stats))
    }

    pub fn swish(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let src = &self.nodes[i].value;
        let data = src.data().iter().map(|&x| x * sigmoid(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Swish { input: i }, &[i]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(input)?;
        let value = self.nodes[i].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input: i }, &[i]))
    }

    /// `[N, ...] -> [N, prod(...)]`, row-major.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let t = &self.nodes[i].value;
        let (n, r) = (t.batch(), t.row_len());
        self.reshape(input, &[n, r])
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let i = self.idx(input)?;
        let t = &self.nodes[i].value;
        if len == 0 || start + len > t.batch() {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                detail: format!("rows {start}..{} out of 0..{}", start + len, t.batch()),
            });
        }
        let r = t.row_len();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, t.data()[start * r..(start + len) * r].to_vec())?;
        Ok(self.push(value, Op::SliceRows { input: i, start }, &[i]))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.nodes[ia].value.shape() != self.nodes[ib].value.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[ia].value.shape(),
                    self.nodes[ib].value.shape()
                ),
            });
        }
        Ok((ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b, "add")?;
        let data = self.nodes[ia]
            .value
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.nodes[ia].value.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a: ia, b: ib }, &[ia, ib]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b, "sub")?;
        let data = self.nodes[ia]
            .value
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.nodes[ia].value.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub { a: ia, b: ib }, &[ia, ib]))
    }

    pub fn scale(&mut self, input: Var, factor: Float) -> Result<Var> {
        let i = self.idx(input)?;
        let t = &self.nodes[i].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * factor).collect())?;
        Ok(self.push(value, Op::Scale { input: i, factor }, &[i]))
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let t = &self.nodes[i].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * x).collect())?;
        Ok(self.push(value, Op::Square { input: i }, &[i]))
    }

    /// Mean over all entries (f64 accumulation), as a `[1]` tensor.
    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let value = Tensor::scalar(self.nodes[i].value.mean() as Float);
        Ok(self.push(value, Op::Mean { input: i }, &[i]))
    }

    /// `sum(input * weights)` with constant weights (f64 accumulation).
    pub fn weighted_sum(&mut self, input: Var, weights: &[Float]) -> Result<Var> {
        let i = self.idx(input)?;
        let t = &self.nodes[i].value;
        if weights.len() != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                detail: format!("{} weights for {} elements", weights.len(), t.len()),
            });
        }
        let s: f64 = t.data().iter().zip(weights).map(|(&x, &w)| x as f64 * w as f64).sum();
        let value = Tensor::scalar(s as Float);
        Ok(self.push(
            value,
            Op::WeightedSum {
                input: i,
                weights: weights.to_vec(),
            },
            &[i],
        ))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input)?.len();
        self.weighted_sum(input, &vec![1.0; n])
    }

    /// Populate `grad` on every `requires_grad` leaf upstream of `output`.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = self.idx(output)?;
        if self.nodes[out].value.len() != 1 {
            return Err(TensorError::NonScalarOutput(self.nodes[out].value.shape().to_vec()));
        }
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<Float>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(vec![1.0]);
        for idx in (0..=out).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    grads[idx] = Some(g);
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g.or_else(|| Some(vec![0.0; node.value.len()]));
            }
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn propagate(&self, idx: usize, g: &[Float], grads: &mut [Option<Vec<Float>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (m, plen, cout) = (geom.out_rows(), geom.patch_len(), geom.cout);
                if self.wants(*input) {
                    let mut dcols = vec![0.0; m * plen];
                    gemm(
                        m,
                        cout,
                        plen,
                        MatRef::rows(g, cout),
                        MatRef::transposed(self.nodes[*kernel].value.data(), cout),
                        0.0,
                        &mut dcols,
                    );
                    let dst = grad_slot(grads, *input, self.nodes[*input].value.len());
                    geom.col2im(&dcols, dst);
                }
                if self.wants(*kernel) {
                    let cols = cols.as_ref().expect("columns kept when kernel needs grad");
                    let len = plen * cout;
                    let (dst, beta) = gemm_slot(grads, *kernel, len);
                    gemm(
                        plen,
                        m,
                        cout,
                        MatRef::transposed(cols, plen),
                        MatRef::rows(g, cout),
                        beta,
                        dst,
                    );
                }
                if self.wants(*bias) {
                    add_col_sums(grad_slot(grads, *bias, cout), g, cout);
                }
            }
            Op::Dense { input, weight, bias } => {
                let ws = self.nodes[*weight].value.shape();
                let (d, u) = (ws[0], ws[1]);
                let n = g.len() / u;
                if self.wants(*input) {
                    let (dst, beta) = gemm_slot(grads, *input, n * d);
                    gemm(
                        n,
                        u,
                        d,
                        MatRef::rows(g, u),
                        MatRef::transposed(self.nodes[*weight].value.data(), u),
                        beta,
                        dst,
                    );
                }
                if self.wants(*weight) {
                    let (dst, beta) = gemm_slot(grads, *weight, d * u);
                    gemm(
                        d,
                        n,
                        u,
                        MatRef::transposed(self.nodes[*input].value.data(), d),
                        MatRef::rows(g, u),
                        beta,
                        dst,
                    );
                }
                if self.wants(*bias) {
                    add_col_sums(grad_slot(grads, *bias, u), g, u);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let m = g.len() / c;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for (dy_row, xh_row) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_dy[ch] += dy_row[ch] as f64;
                        sum_dy_xhat[ch] += dy_row[ch] as f64 * xh_row[ch] as f64;
                    }
                }
                if self.wants(*input) {
                    let gam = self.nodes[*gamma].value.data();
                    let dst = grad_slot(grads, *input, g.len());
                    if *batch_stats {
                        let mf = m as f64;
                        let coef: Vec<(f64, f64, f64)> = (0..c)
                            .map(|ch| {
                                let s = gam[ch] as f64 * inv_std[ch] as f64;
                                (s, s * sum_dy[ch] / mf, s * sum_dy_xhat[ch] / mf)
                            })
                            .collect();
                        for ((d_row, dy_row), xh_row) in
                            dst.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c))
                        {
                            for ch in 0..c {
                                let (s, a, b) = coef[ch];
                                let v = s * dy_row[ch] as f64 - a - b * xh_row[ch] as f64;
                                d_row[ch] = (d_row[ch] as f64 + v) as Float;
                            }
                        }
                    } else {
                        let s: Vec<Float> = (0..c).map(|ch| gam[ch] * inv_std[ch]).collect();
                        for (d_row, dy_row) in dst.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for ch in 0..c {
                                d_row[ch] += s[ch] * dy_row[ch];
                            }
                        }
                    }
                }
                if self.wants(*gamma) {
                    let dst = grad_slot(grads, *gamma, c);
                    for (d, s) in dst.iter_mut().zip(&sum_dy_xhat) {
                        *d += *s as Float;
                    }
                }
                if self.wants(*beta) {
                    let dst = grad_slot(grads, *beta, c);
                    for (d, s) in dst.iter_mut().zip(&sum_dy) {
                        *d += *s as Float;
                    }
                }
            }
            Op::Swish { input } => {
                let x = self.nodes[*input].value.data();
                let dst = grad_slot(grads, *input, x.len());
                for ((d, &gi), &xi) in dst.iter_mut().zip(g).zip(x) {
                    let s = sigmoid(xi);
                    *d += gi * (s + xi * s * (1.0 - s));
                }
            }
            Op::Reshape { input } => {
                let dst = grad_slot(grads, *input, g.len());
                dst.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
            Op::SliceRows { input, start } => {
                let src = &self.nodes[*input].value;
                let r = src.row_len();
                let dst = grad_slot(grads, *input, src.len());
                dst[start * r..start * r + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, gi)| *d += gi);
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign: Float = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    let dst = grad_slot(grads, *a, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                if self.wants(*b) {
                    let dst = grad_slot(grads, *b, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, gi)| *d += sign * gi);
                }
            }
            Op::Scale { input, factor } => {
                let dst = grad_slot(grads, *input, g.len());
                dst.iter_mut().zip(g).for_each(|(d, gi)| *d += factor * gi);
            }
            Op::Square { input } => {
                let x = self.nodes[*input].value.data();
                let dst = grad_slot(grads, *input, g.len());
                for ((d, gi), xi) in dst.iter_mut().zip(g).zip(x) {
                    *d += 2.0 * xi * gi;
                }
            }
            Op::Mean { input } => {
                let n = self.nodes[*input].value.len();
                let gi = g[0] / n as Float;
                let dst = grad_slot(grads, *input, n);
                dst.iter_mut().for_each(|d| *d += gi);
            }
            Op::WeightedSum { input, weights } => {
                let dst = grad_slot(grads, *input, weights.len());
                for (d, w) in dst.iter_mut().zip(weights) {
                    *d += g[0] * w;
                }
            }
        }
    }
}

fn grad_slot(grads: &mut [Option<Vec<Float>>], i: usize, len: usize) -> &mut [Float] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

/// Destination for a GEMM result plus the `beta` that accumulates into it.
fn gemm_slot(grads: &mut [Option<Vec<Float>>], i: usize, len: usize) -> (&mut [Float], Float) {
    let beta = if grads[i].is_some() { 1.0 } else { 0.0 };
    (grads[i].get_or_insert_with(|| vec![0.0; len]), beta)
}

fn add_col_sums(dst: &mut [Float], g: &[Float], cols: usize) {
    let mut acc = vec![0.0f64; cols];
    for row in g.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    for (d, a) in dst.iter_mut().zip(acc) {
        *d += a as Float;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Float]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn table_conv_shape_and_padding() {
        let g = ConvGeom::new(&[1, 48, 192, 1], &[5, 5, 1, 32], 2).unwrap();
        assert_eq!((g.ho, g.wo, g.pad_top, g.pad_left), (24, 96, 1, 1));
        let g = ConvGeom::new(&[1, 6, 24, 128], &[3, 3, 128, 128], 2).unwrap();
        assert_eq!((g.ho, g.wo, g.pad_top, g.pad_left), (3, 12, 0, 0));
        let err = ConvGeom::new(&[1, 6, 24, 3], &[3, 3, 4, 8], 2).unwrap_err();
        assert!(err.to_string().contains("input channels 3 != kernel input channels 4"));
    }

    #[test]
    fn conv_scalar_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 1, 1], &[3.0]), true);
        let k = tape.leaf(t(&[1, 1, 1, 1], &[2.0]), true);
        let b = tape.leaf(t(&[1], &[0.5]), true);
        let y = tape.conv2d(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[6.5]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[2.0]);
        assert_eq!(tape.grad(k).unwrap().unwrap(), &[3.0]);
        assert_eq!(tape.grad(b).unwrap().unwrap(), &[1.0]);
    }

    #[test]
    fn conv_zero_input_zero_bias_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 5, 7, 3]).unwrap(), false);
        let k = tape.leaf(Tensor::full(&[3, 3, 3, 4], 0.7).unwrap(), false);
        let b = tape.leaf(Tensor::zeros(&[4]).unwrap(), false);
        let y = tape.conv2d(x, k, b, 2).unwrap();
        let v = tape.value(y).unwrap();
        assert_eq!(v.shape(), &[2, 3, 4, 4]);
        assert!(v.data().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]), false);
        let w = tape.leaf(t(&[2, 1], &[1.0, 1.0]), false);
        let b = tape.leaf(t(&[1], &[0.0]), false);
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[3.0]);

        let mut tape = Tape::new();
        let data = [0.5, -1.0, 2.0, 4.0, 0.0, 3.0];
        let x = tape.leaf(t(&[2, 3], &data), false);
        let w = tape.leaf(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]), false);
        let b = tape.leaf(Tensor::zeros(&[3]).unwrap(), false);
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &data);

        let bad = tape.leaf(Tensor::zeros(&[4, 3]).unwrap(), false);
        assert!(matches!(tape.dense(x, bad, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn batchnorm_infer_identity_and_constant_train_input() {
        let eps = 1e-3;
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 4.0]), false);
        let g = tape.leaf(Tensor::full(&[2], 1.0).unwrap(), false);
        let b = tape.leaf(Tensor::zeros(&[2]).unwrap(), false);
        let (y, stats) = tape.batchnorm(x, g, b, &[0.0, 0.0], &[1.0, 1.0], Mode::Infer, eps).unwrap();
        assert!(stats.is_none());
        let scale = 1.0 / (1.0 + eps).sqrt();
        for (o, i) in tape.value(y).unwrap().data().iter().zip([1.0, -2.0, 3.0, 4.0]) {
            assert!((*o as f64 - i * scale).abs() < 1e-6);
        }

        // Constant input with batch size 1: zero variance falls back on epsilon.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 2, 3], 5.0).unwrap(), false);
        let g = tape.leaf(Tensor::full(&[3], 2.0).unwrap(), false);
        let b = tape.leaf(t(&[3], &[0.1, 0.2, 0.3]), false);
        let (y, stats) = tape.batchnorm(x, g, b, &[0.0; 3], &[1.0; 3], Mode::Train, eps).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.var, vec![0.0; 3]);
        assert_eq!(stats.mean, vec![5.0; 3]);
        for row in tape.value(y).unwrap().data().chunks(3) {
            assert_eq!(row, &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn swish_values_and_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 1.0]), true);
        let y = tape.swish(x).unwrap();
        let v = tape.value(y).unwrap().data().to_vec();
        assert_eq!(v[0], 0.0);
        assert!((v[1] as f64 - 0.731059).abs() < 5e-7);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap()[0], 0.5);
    }

    #[test]
    fn flatten_roundtrip() {
        let mut tape = Tape::new();
        let data: Vec<Float> = (0..24).map(|v| v as Float).collect();
        let x = tape.leaf(t(&[2, 1, 3, 4], &data), false);
        let f = tape.flatten(x).unwrap();
        assert_eq!(tape.value(f).unwrap().shape(), &[2, 12]);
        let back = tape.reshape(f, &[2, 1, 3, 4]).unwrap();
        assert_eq!(tape.value(back).unwrap(), tape.value(x).unwrap());
        let ff = tape.flatten(f).unwrap();
        assert_eq!(tape.value(ff).unwrap(), tape.value(f).unwrap());
    }

    #[test]
    fn backward_simple_reductions() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_error_paths() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarOutput(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::BackwardAlreadyRun)));
        tape.zero_grad();
        tape.backward(s).unwrap();

        let mut other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(tape.backward(y), Err(TensorError::ForeignVariable)));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 3.0]), true);
        let y = tape.add(x, x).unwrap();
        let z = tape.sub(y, x).unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[1.0, 1.0]);
    }
}
