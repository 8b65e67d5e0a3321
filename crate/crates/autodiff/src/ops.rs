//! Forward rules for every primitive. Each method validates shapes, computes
//! the output and records whatever its backward rule needs.

use crate::conv::{col_rows, im2col};
use crate::error::{AutodiffError, Result};
use crate::gemm::{gemm, Layout};
use crate::tape::{AxisSplit, ConvGeom, Op, Tape, Var};
use crate::tensor::Tensor;

/// Convolution stride and symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
        }
    }
}

/// Batch-norm statistics mode.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with tracked running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(AutodiffError::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(AutodiffError::shape(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(AutodiffError::shape(
            op,
            format!("expected an N×C×H×W tensor, got {shape:?}"),
        )),
    }
}

impl Tape {
    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.ensure_live()?;
        same_shape(op_name, self.shape(a), self.shape(b))?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), values);
        Ok(self.push(out, op, vec![a, b]))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.ensure_live()?;
        let values = self.value(a).values().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), values);
        Ok(self.push(out, op, vec![a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar, |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, f64::exp)
    }

    /// `ln(x + eps)`.
    pub fn log(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps < 0.0 {
            return Err(AutodiffError::invalid("log", "negative epsilon"));
        }
        self.unary(a, Op::Log { eps }, |x| (x + eps).ln())
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs, f64::abs)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus, |x| x.max(0.0) + (-x.abs()).exp().ln_1p())
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.ensure_live()?;
        let s: f64 = self.value(a).values().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum, vec![a]))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.ensure_live()?;
        let v = self.value(a).values();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean, vec![a]))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.ensure_live()?;
        let shape = self.shape(a).to_vec();
        check_axis("mean_axis", &shape, axis)?;
        let split = AxisSplit::new(&shape, axis);
        let x = self.value(a).values();
        let mut out = vec![0.0; split.outer * split.inner];
        for o in 0..split.outer {
            for l in 0..split.len {
                let src = &x[(o * split.len + l) * split.inner..][..split.inner];
                let dst = &mut out[o * split.inner..][..split.inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let inv = 1.0 / split.len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MeanAxis(split),
            vec![a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.contains(&0) {
            return Err(AutodiffError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(a)),
            ));
        }
        let out = Tensor::from_parts(shape.to_vec(), self.value(a).values().to_vec());
        Ok(self.push(out, Op::Reshape, vec![a]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(AutodiffError::shape(
                "permute",
                format!("{axes:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let values = permute_values(self.value(a).values(), &shape, axes);
        Ok(self.push(
            Tensor::from_parts(out_shape, values),
            Op::Permute {
                axes: axes.to_vec(),
            },
            vec![a],
        ))
    }

    /// Matrix product. Supported forms:
    /// `[M,K]·[K,N]`, batched `[B,M,K]·[B,K,N]`, and `[..,M,K]·[K,N]` with
    /// the right operand shared across all leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_live()?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || AutodiffError::shape("matmul", format!("{sa:?} · {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 || sb.len() > 3 {
            return Err(err());
        }
        let k = sa[sa.len() - 1];
        let (batch, m, n, out_shape) = if sb.len() == 2 {
            if sb[0] != k {
                return Err(err());
            }
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let mut out_shape = sa[..sa.len() - 1].to_vec();
            out_shape.push(sb[1]);
            (1, rows, sb[1], out_shape)
        } else {
            if sa.len() != 3 || sa[0] != sb[0] || sb[1] != k {
                return Err(err());
            }
            (sa[0], sa[1], sb[2], vec![sa[0], sa[1], sb[2]])
        };
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[bi * m * k..][..m * k],
                Layout::Normal,
                &bv[bi * k * n..][..k * n],
                Layout::Normal,
                0.0,
                &mut out[bi * m * n..][..m * n],
            );
        }
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Matmul { batch, m, k, n },
            vec![a, b],
        ))
    }

    /// Adds `bias[c]` along axis 1 of an `[N, C, ...]` tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.ensure_live()?;
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(AutodiffError::shape(
                "bias_add",
                format!("bias {:?} for input {shape:?}", self.shape(bias)),
            ));
        }
        let split = AxisSplit::new(&shape, 1);
        let b = self.value(bias).values();
        let mut out = self.value(x).values().to_vec();
        for o in 0..split.outer {
            for c in 0..split.len {
                out[(o * split.len + c) * split.inner..][..split.inner]
                    .iter_mut()
                    .for_each(|v| *v += b[c]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BiasAdd(split),
            vec![x, bias],
        ))
    }

    /// 2-D cross-correlation of `x: [N,Ci,H,W]` with `w: [Co,Ci,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        self.ensure_live()?;
        let (batch, in_ch, height, width) = nchw("conv2d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        let [out_ch, w_in, kh, kw] = ws[..] else {
            return Err(AutodiffError::shape("conv2d", format!("weight shape {ws:?}")));
        };
        if w_in != in_ch {
            return Err(AutodiffError::shape(
                "conv2d",
                format!("weight expects {w_in} input channels, input has {in_ch}"),
            ));
        }
        if spec.stride == 0 {
            return Err(AutodiffError::invalid("conv2d", "stride must be positive"));
        }
        if height + 2 * spec.padding < kh || width + 2 * spec.padding < kw {
            return Err(AutodiffError::shape(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {height}×{width}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_ch] {
                return Err(AutodiffError::shape(
                    "conv2d",
                    format!("bias {:?} for {out_ch} output channels", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            out_h: (height + 2 * spec.padding - kh) / spec.stride + 1,
            out_w: (width + 2 * spec.padding - kw) / spec.stride + 1,
        };
        let out = conv_forward(
            &geom,
            self.value(x).values(),
            self.value(w).values(),
            bias.map(|b| self.value(b).values()),
        );
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::from_parts(vec![batch, out_ch, geom.out_h, geom.out_w], out),
            Op::Conv2d {
                geom,
                has_bias: bias.is_some(),
            },
            inputs,
        ))
    }

    /// Batch normalization over axis 1 of an `[N, C, ...]` tensor, followed
    /// by the per-channel affine map `gamma·x̂ + beta`.
    ///
    /// Returns the batch statistics in training mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        self.ensure_live()?;
        if eps <= 0.0 {
            return Err(AutodiffError::invalid("batch_norm", "epsilon must be positive"));
        }
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(AutodiffError::shape("batch_norm", format!("input {shape:?}")));
        }
        let split = AxisSplit::new(&shape, 1);
        let c = split.len;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(AutodiffError::shape(
                "batch_norm",
                format!(
                    "affine params {:?}/{:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x).values();
        let count = split.outer * split.inner;
        let (mean, var, training) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for o in 0..split.outer {
                        s += xv[(o * c + ch) * split.inner..][..split.inner]
                            .iter()
                            .sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for o in 0..split.outer {
                        q += xv[(o * c + ch) * split.inner..][..split.inner]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count as f64;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(AutodiffError::shape(
                        "batch_norm",
                        format!("running stats of length {}/{} for {c} channels", mean.len(), var.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).values();
        let b = self.value(beta).values();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for o in 0..split.outer {
            for ch in 0..c {
                let base = (o * c + ch) * split.inner;
                for i in base..base + split.inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let stats = training.then(|| BatchStats {
            mean,
            var,
            count,
        });
        let var_out = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                split,
                xhat,
                inv_std,
                training,
            },
            vec![x, gamma, beta],
        );
        Ok((var_out, stats))
    }

    /// Softmax along `axis`, stabilized by subtracting the axis maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.ensure_live()?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::EmptyAxis { axis, shape });
        }
        let split = AxisSplit::new(&shape, axis);
        let x = self.value(a).values();
        let mut out = vec![0.0; x.len()];
        for o in 0..split.outer {
            for i in 0..split.inner {
                let idx = |l: usize| (o * split.len + l) * split.inner + i;
                let max = (0..split.len)
                    .map(|l| x[idx(l)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..split.len {
                    let e = (x[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..split.len {
                    out[idx(l)] /= z;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax(split),
            vec![a],
        ))
    }

    /// `x / Σ_axis x`; every slice along `axis` must have a positive sum.
    pub fn renormalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.ensure_live()?;
        let shape = self.shape(a).to_vec();
        check_axis("renormalize", &shape, axis)?;
        let split = AxisSplit::new(&shape, axis);
        let x = self.value(a).values();
        let mut sums = vec![0.0; split.outer * split.inner];
        for o in 0..split.outer {
            for l in 0..split.len {
                for i in 0..split.inner {
                    sums[o * split.inner + i] += x[(o * split.len + l) * split.inner + i];
                }
            }
        }
        if sums.iter().any(|s| !s.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "renormalize" });
        }
        if sums.iter().any(|&s| s <= 0.0) {
            return Err(AutodiffError::invalid(
                "renormalize",
                "a slice has no positive mass",
            ));
        }
        let mut out = x.to_vec();
        for o in 0..split.outer {
            for l in 0..split.len {
                for i in 0..split.inner {
                    out[(o * split.len + l) * split.inner + i] /= sums[o * split.inner + i];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Renormalize { split, sums },
            vec![a],
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.ensure_live()?;
        let (n, c, h, w) = nchw("upsample_nearest", self.shape(x))?;
        if factor == 0 {
            return Err(AutodiffError::invalid("upsample_nearest", "factor must be ≥ 1"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).values();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(p * oh + oy) * ow + ox] = xv[(p * h + oy / factor) * w + ox / factor];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::UpsampleNearest {
                planes: n * c,
                h,
                w,
                factor,
            },
            vec![x],
        ))
    }

    /// Bilinear upsampling by an integer factor; output pixel `o` samples
    /// input coordinate `o / factor` (integer pixel centres), clamped at the
    /// far border.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.ensure_live()?;
        let (n, c, h, w) = nchw("upsample_bilinear", self.shape(x))?;
        if factor == 0 {
            return Err(AutodiffError::invalid("upsample_bilinear", "factor must be ≥ 1"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let ys = bilinear_taps(h, factor);
        let xs = bilinear_taps(w, factor);
        let xv = self.value(x).values();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let plane = &xv[p * h * w..][..h * w];
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                    out[(p * oh + oy) * ow + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::UpsampleBilinear {
                planes: n * c,
                h,
                w,
                factor,
            },
            vec![x],
        ))
    }

    /// Non-overlapping `k×k` average pooling; `k` must divide H and W.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.ensure_live()?;
        let (n, c, h, w) = nchw("avg_pool", self.shape(x))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(AutodiffError::shape(
                "avg_pool",
                format!("window {k} does not tile {h}×{w}"),
            ));
        }
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x).values();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * oh + y / k) * ow + xx / k] += xv[(p * h + y) * w + xx] * inv;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::AvgPool {
                planes: n * c,
                h,
                w,
                k,
            },
            vec![x],
        ))
    }

    /// Spatial mean: `[N,C,H,W] → [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.ensure_live()?;
        let (n, c, h, w) = nchw("global_avg_pool", self.shape(x))?;
        let hw = h * w;
        let xv = self.value(x).values();
        let out = (0..n * c)
            .map(|p| xv[p * hw..][..hw].iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::GlobalAvgPool { planes: n * c, hw },
            vec![x],
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.ensure_live()?;
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::invalid("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::shape(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&self.value(p).values()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                outer,
                inner,
                sizes,
            },
            parts.to_vec(),
        ))
    }
}

pub(crate) fn permute_values(x: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// `(lower index, upper index, upper weight)` per output coordinate.
pub(crate) fn bilinear_taps(size: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..size * factor)
        .map(|o| {
            let pos = o as f64 / factor as f64;
            let lo = (o / factor).min(size - 1);
            let hi = (lo + 1).min(size - 1);
            let wt = if hi == lo { 0.0 } else { pos - lo as f64 };
            (lo, hi, wt)
        })
        .collect()
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let p = g.out_h * g.out_w;
    let k = col_rows(g);
    let in_plane = g.in_ch * g.height * g.width;
    let mut out = vec![0.0; g.batch * g.out_ch * p];
    let mut col = Vec::new();
    for n in 0..g.batch {
        let xn = &x[n * in_plane..][..in_plane];
        let col_ref: &[f64] = if crate::conv::is_pointwise(g) {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        let out_n = &mut out[n * g.out_ch * p..][..g.out_ch * p];
        gemm(g.out_ch, k, p, w, Layout::Normal, col_ref, Layout::Normal, 0.0, out_n);
        if let Some(b) = bias {
            for (co, row) in out_n.chunks_exact_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}
