use crate::tape::ConvGeom;

pub(crate) fn col_rows(g: &ConvGeom) -> usize {
    g.in_ch * g.kh * g.kw
}

/// 1×1, stride 1, no padding: the input plane already is the column matrix.
pub(crate) fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

/// Unfolds one `[Ci,H,W]` sample into a `[Ci·kh·kw, out_h·out_w]` matrix.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], col: &mut Vec<f64>) {
    let p = g.out_h * g.out_w;
    col.clear();
    col.resize(col_rows(g) * p, 0.0);
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..][..g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..][..g.width];
                    let dst_row = &mut dst[oy * g.out_w..][..g.out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a column matrix into `dx`.
pub(crate) fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let p = g.out_h * g.out_w;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..][..g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.width..][..g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
