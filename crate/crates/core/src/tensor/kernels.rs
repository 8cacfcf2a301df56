//! Raw buffer kernels shared by the graph ops: GEMM and im2col convolution.

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn matmul_into(
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents and strides describe in-bounds row-major views checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
    pub fn output_len(&self) -> usize {
        self.batch * self.cout * self.ho * self.wo
    }

    fn im2col(&self, input: &[f64], b: usize, g: usize, col: &mut [f64]) {
        let (h, w, ho, wo) = (self.h, self.w, self.ho, self.wo);
        let n = ho * wo;
        for ci in 0..self.cin_g() {
            let c = g * self.cin_g() + ci;
            let plane = &input[(b * self.cin + c) * h * w..][..h * w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let out = &mut col[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let dst = &mut out[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f64], b: usize, g: usize, grad_input: &mut [f64]) {
        let (h, w, ho, wo) = (self.h, self.w, self.ho, self.wo);
        let n = ho * wo;
        for ci in 0..self.cin_g() {
            let c = g * self.cin_g() + ci;
            let plane = &mut grad_input[(b * self.cin + c) * h * w..][..h * w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(geo: &ConvGeometry, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; geo.output_len()];
    let (rows, n) = (geo.col_rows(), geo.col_cols());
    let mut col = vec![0.0; rows * n];
    let cout_g = geo.cout_g();
    for b in 0..geo.batch {
        for g in 0..geo.groups {
            geo.im2col(input, b, g, &mut col);
            let w = &weight[g * cout_g * rows..(g + 1) * cout_g * rows];
            let o = &mut out[(b * geo.cout + g * cout_g) * n..][..cout_g * n];
            matmul_into(w, false, &col, false, o, cout_g, rows, n, 0.0);
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                out[(b * geo.cout + co) * n..][..n].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
/// Input, weight and bias gradients, each present only when requested.
pub type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

pub fn conv2d_backward(
    geo: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads {
    let (rows, n) = (geo.col_rows(), geo.col_cols());
    let cout_g = geo.cout_g();
    let mut gi = want_input.then(|| vec![0.0; input.len()]);
    let mut gw = want_weight.then(|| vec![0.0; weight.len()]);
    let mut gb = want_bias.then(|| vec![0.0; geo.cout]);
    let mut col = vec![0.0; rows * n];
    for b in 0..geo.batch {
        for g in 0..geo.groups {
            let go = &grad_out[(b * geo.cout + g * cout_g) * n..][..cout_g * n];
            if let Some(gw) = gw.as_mut() {
                geo.im2col(input, b, g, &mut col);
                let dst = &mut gw[g * cout_g * rows..(g + 1) * cout_g * rows];
                matmul_into(go, false, &col, true, dst, cout_g, n, rows, 1.0);
            }
            if let Some(gi) = gi.as_mut() {
                let w = &weight[g * cout_g * rows..(g + 1) * cout_g * rows];
                matmul_into(w, true, go, false, &mut col, rows, cout_g, n, 0.0);
                geo.col2im_add(&col, b, g, gi);
            }
        }
        if let Some(gb) = gb.as_mut() {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += grad_out[(b * geo.cout + co) * n..][..n].iter().sum::<f64>();
            }
        }
    }
    (gi, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_into(&a, false, &b, false, &mut c, 2, 2, 2, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul_into(&a, true, &b, false, &mut c, 2, 2, 2, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul_into(&a, false, &b, true, &mut c, 2, 2, 2, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn out_extent() {
        assert_eq!(conv_out_extent(5, 3, 1, 1), Some(5));
        assert_eq!(conv_out_extent(64, 3, 2, 1), Some(32));
        assert_eq!(conv_out_extent(2, 5, 1, 0), None);
    }
}
