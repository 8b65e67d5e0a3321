//! Vector-Jacobian products for every recorded primitive.

use crate::conv::{col2im, col_rows, im2col, is_pointwise};
use crate::error::Result;
use crate::gemm::{gemm, Layout};
use crate::ops::{bilinear_taps, permute_values};
use crate::tape::Op;
use crate::tensor::Tensor;

type Grads = Vec<Option<Vec<f64>>>;

fn elementwise(x: &[f64], g: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    x.iter().zip(g).map(|(&xi, &gi)| f(xi, gi)).collect()
}

pub(crate) fn op_backward(
    op: &Op,
    out: &Tensor,
    inputs: &[&Tensor],
    needs: &[bool],
    g: &[f64],
) -> Result<Grads> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let x = |i: usize| inputs[i].values();
    let grads: Grads = match op {
        Op::Leaf | Op::Constant | Op::Released => vec![None; inputs.len()],
        Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        Op::Sub => vec![
            want(0).then(|| g.to_vec()),
            want(1).then(|| g.iter().map(|v| -v).collect()),
        ],
        Op::Mul => vec![
            want(0).then(|| elementwise(x(1), g, |b, gi| b * gi)),
            want(1).then(|| elementwise(x(0), g, |a, gi| a * gi)),
        ],
        Op::Scale(c) => vec![Some(g.iter().map(|v| c * v).collect())],
        Op::AddScalar | Op::Reshape => vec![Some(g.to_vec())],
        Op::Relu => vec![Some(elementwise(x(0), g, |xi, gi| if xi > 0.0 { gi } else { 0.0 }))],
        Op::Exp => vec![Some(elementwise(out.values(), g, |y, gi| y * gi))],
        Op::Log { eps } => vec![Some(elementwise(x(0), g, |xi, gi| gi / (xi + eps)))],
        Op::Abs => vec![Some(elementwise(x(0), g, |xi, gi| {
            if xi > 0.0 {
                gi
            } else if xi < 0.0 {
                -gi
            } else {
                0.0
            }
        }))],
        Op::Softplus => vec![Some(elementwise(x(0), g, |xi, gi| {
            gi / (1.0 + (-xi).exp())
        }))],
        Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
        Op::Mean => {
            let n = inputs[0].numel();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        Op::MeanAxis(s) => {
            let inv = 1.0 / s.len as f64;
            let mut dx = vec![0.0; inputs[0].numel()];
            for o in 0..s.outer {
                let src = &g[o * s.inner..][..s.inner];
                for l in 0..s.len {
                    dx[(o * s.len + l) * s.inner..][..s.inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, v)| *d = v * inv);
                }
            }
            vec![Some(dx)]
        }
        Op::Permute { axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            vec![Some(permute_values(g, out.shape(), &inverse))]
        }
        Op::Matmul { batch, m, k, n } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let (a, b) = (x(0), x(1));
            let da = want(0).then(|| {
                let mut da = vec![0.0; a.len()];
                for bi in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..][..m * n],
                        Layout::Normal,
                        &b[bi * k * n..][..k * n],
                        Layout::Transposed,
                        0.0,
                        &mut da[bi * m * k..][..m * k],
                    );
                }
                da
            });
            let db = want(1).then(|| {
                let mut db = vec![0.0; b.len()];
                for bi in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &a[bi * m * k..][..m * k],
                        Layout::Transposed,
                        &g[bi * m * n..][..m * n],
                        Layout::Normal,
                        0.0,
                        &mut db[bi * k * n..][..k * n],
                    );
                }
                db
            });
            vec![da, db]
        }
        Op::BiasAdd(s) => {
            let db = want(1).then(|| {
                let mut db = vec![0.0; s.len];
                for o in 0..s.outer {
                    for (c, acc) in db.iter_mut().enumerate() {
                        *acc += g[(o * s.len + c) * s.inner..][..s.inner].iter().sum::<f64>();
                    }
                }
                db
            });
            vec![want(0).then(|| g.to_vec()), db]
        }
        Op::Conv2d { geom, has_bias } => {
            let geo = *geom;
            let p = geo.out_h * geo.out_w;
            let krows = col_rows(&geo);
            let in_plane = geo.in_ch * geo.height * geo.width;
            let (xv, wv) = (x(0), x(1));
            let mut dx = want(0).then(|| vec![0.0; xv.len()]);
            let mut dw = want(1).then(|| vec![0.0; wv.len()]);
            let mut col = Vec::new();
            let mut dcol = vec![0.0; krows * p];
            for n in 0..geo.batch {
                let gn = &g[n * geo.out_ch * p..][..geo.out_ch * p];
                let xn = &xv[n * in_plane..][..in_plane];
                if let Some(dw) = dw.as_mut() {
                    let col_ref: &[f64] = if is_pointwise(&geo) {
                        xn
                    } else {
                        im2col(&geo, xn, &mut col);
                        &col
                    };
                    gemm(
                        geo.out_ch,
                        p,
                        krows,
                        gn,
                        Layout::Normal,
                        col_ref,
                        Layout::Transposed,
                        1.0,
                        dw,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let dxn = &mut dx[n * in_plane..][..in_plane];
                    if is_pointwise(&geo) {
                        gemm(krows, geo.out_ch, p, wv, Layout::Transposed, gn, Layout::Normal, 0.0, dxn);
                    } else {
                        gemm(
                            krows,
                            geo.out_ch,
                            p,
                            wv,
                            Layout::Transposed,
                            gn,
                            Layout::Normal,
                            0.0,
                            &mut dcol,
                        );
                        col2im(&geo, &dcol, dxn);
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if *has_bias {
                grads.push(want(2).then(|| {
                    let mut db = vec![0.0; geo.out_ch];
                    for n in 0..geo.batch {
                        for (co, acc) in db.iter_mut().enumerate() {
                            *acc += g[(n * geo.out_ch + co) * p..][..p].iter().sum::<f64>();
                        }
                    }
                    db
                }));
            }
            grads
        }
        Op::BatchNorm {
            split,
            xhat,
            inv_std,
            training,
        } => {
            let c = split.len;
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for o in 0..split.outer {
                for ch in 0..c {
                    let base = (o * c + ch) * split.inner;
                    for i in base..base + split.inner {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            let gamma = x(1);
            let dx = want(0).then(|| {
                let m = (split.outer * split.inner) as f64;
                let mut dx = vec![0.0; g.len()];
                for o in 0..split.outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * split.inner;
                        let k = gamma[ch] * inv_std[ch];
                        for i in base..base + split.inner {
                            dx[i] = if *training {
                                k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                dx
            });
            vec![dx, want(1).then_some(sum_gx), want(2).then_some(sum_g)]
        }
        Op::Softmax(s) => {
            let y = out.values();
            let mut dx = vec![0.0; y.len()];
            for o in 0..s.outer {
                for i in 0..s.inner {
                    let idx = |l: usize| (o * s.len + l) * s.inner + i;
                    let dot: f64 = (0..s.len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                    for l in 0..s.len {
                        dx[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::Renormalize { split: s, sums } => {
            let y = out.values();
            let mut dx = vec![0.0; y.len()];
            for o in 0..s.outer {
                for i in 0..s.inner {
                    let idx = |l: usize| (o * s.len + l) * s.inner + i;
                    let dot: f64 = (0..s.len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                    let inv = 1.0 / sums[o * s.inner + i];
                    for l in 0..s.len {
                        dx[idx(l)] = (g[idx(l)] - dot) * inv;
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::UpsampleNearest {
            planes,
            h,
            w,
            factor,
        } => {
            let (oh, ow) = (h * factor, w * factor);
            let mut dx = vec![0.0; planes * h * w];
            for p in 0..*planes {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dx[(p * h + oy / factor) * w + ox / factor] += g[(p * oh + oy) * ow + ox];
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::UpsampleBilinear {
            planes,
            h,
            w,
            factor,
        } => {
            let (oh, ow) = (h * factor, w * factor);
            let ys = bilinear_taps(*h, *factor);
            let xs = bilinear_taps(*w, *factor);
            let mut dx = vec![0.0; planes * h * w];
            for p in 0..*planes {
                let plane = &mut dx[p * h * w..][..h * w];
                for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                        let gv = g[(p * oh + oy) * ow + ox];
                        plane[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                        plane[y0 * w + x1] += gv * (1.0 - wy) * wx;
                        plane[y1 * w + x0] += gv * wy * (1.0 - wx);
                        plane[y1 * w + x1] += gv * wy * wx;
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::AvgPool { planes, h, w, k } => {
            let (oh, ow) = (h / k, w / k);
            let inv = 1.0 / (k * k) as f64;
            let mut dx = vec![0.0; planes * h * w];
            for p in 0..*planes {
                for y in 0..*h {
                    for xx in 0..*w {
                        dx[(p * h + y) * w + xx] = g[(p * oh + y / k) * ow + xx / k] * inv;
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::GlobalAvgPool { planes, hw } => {
            let inv = 1.0 / *hw as f64;
            let mut dx = vec![0.0; planes * hw];
            for p in 0..*planes {
                dx[p * hw..][..*hw].iter_mut().for_each(|d| *d = g[p] * inv);
            }
            vec![Some(dx)]
        }
        Op::Concat {
            outer,
            inner,
            sizes,
        } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for (i, &len) in sizes.iter().enumerate() {
                grads.push(want(i).then(|| {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        d.extend_from_slice(&g[(o * total + offset) * inner..][..len * inner]);
                    }
                    d
                }));
                offset += len;
            }
            grads
        }
    };
    Ok(grads)
}
