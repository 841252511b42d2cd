//! Raw numeric kernels shared by the tape ops and by code that only needs
//! forward evaluation (feature extraction, sampling).
//!
//! Convolutions are im2col + gemm. The three convolution kernels
//! (`conv2d_raw`, `conv2d_input_grad`, `conv2d_weight_grad`) form a closed
//! family under differentiation: each one's adjoints are expressible with
//! the other two, which the tape exploits for second-order gradients.

use super::Tensor;

fn transpose_rm(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-major gemm: `c = alpha * op(a) * op(b) + beta * c`.
///
/// `a` is stored `ar x ac`; `op(a)` is `a` transposed when `ta`. Same for
/// `b`. Hand-rolled with a fixed accumulation order so results are bitwise
/// identical on every host; the k-blocked axpy form keeps the inner loop
/// vectorizable and the `b` panel hot in cache.
pub(crate) fn gemm(
    ar: usize,
    ac: usize,
    ta: bool,
    a: &[f64],
    br: usize,
    bc: usize,
    tb: bool,
    b: &[f64],
    alpha: f64,
    beta: f64,
    c: &mut [f64],
) {
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(ka, kb, "gemm inner dims {ka} vs {kb}");
    assert_eq!(c.len(), m * n);
    let at;
    let a = if ta {
        at = transpose_rm(a, ar, ac);
        &at[..]
    } else {
        a
    };
    let bt;
    let b = if tb {
        bt = transpose_rm(b, br, bc);
        &bt[..]
    } else {
        b
    };

    if beta == 0.0 {
        c.fill(0.0);
    } else if beta != 1.0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
    }
    const KB: usize = 256;
    let mut k0 = 0;
    while k0 < ka {
        let k1 = (k0 + KB).min(ka);
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for k in k0..k1 {
                let aik = alpha * a[i * ka + k];
                let brow = &b[k * n..(k + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
                    *cv += aik * bv;
                }
            }
        }
        k0 = k1;
    }
}

fn conv_out_size(h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> (usize, usize) {
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
    (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1)
}

/// cols[(ci*kh+dy)*kw+dx, y*wo+x] = img[ci, y+dy-pad, x+dx-pad], zero outside.
fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let mut row = 0;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                for y in 0..ho {
                    let sy = y + dy;
                    let out_row = &mut dst[y * wo..(y + 1) * wo];
                    if sy < pad || sy >= h + pad {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[(sy - pad) * w..(sy - pad + 1) * w];
                    for (x, out) in out_row.iter_mut().enumerate() {
                        let sx = x + dx;
                        *out = if sx < pad || sx >= w + pad {
                            0.0
                        } else {
                            src_row[sx - pad]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add transpose of `im2col`.
fn col2im_add(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    img: &mut [f64],
) {
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                for y in 0..ho {
                    let sy = y + dy;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let dst_row = &mut plane[(sy - pad) * w..(sy - pad + 1) * w];
                    let src_row = &src[y * wo..(y + 1) * wo];
                    for (x, &v) in src_row.iter().enumerate() {
                        let sx = x + dx;
                        if sx >= pad && sx < w + pad {
                            dst_row[sx - pad] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution, stride 1: `x [N,Cin,H,W] * w [Cout,Cin,kh,kw] -> [N,Cout,Ho,Wo]`.
pub fn conv2d_raw(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dim4();
    let (cout, cin2, kh, kw) = w.dim4();
    assert_eq!(cin, cin2, "conv channel mismatch");
    let (ho, wo) = conv_out_size(h, wd, kh, kw, pad);
    let ckk = cin * kh * kw;
    let mut cols = vec![0.0; ckk * ho * wo];
    let mut out = vec![0.0; n * cout * ho * wo];
    for s in 0..n {
        im2col(
            &x.data()[s * cin * h * wd..(s + 1) * cin * h * wd],
            cin,
            h,
            wd,
            kh,
            kw,
            pad,
            ho,
            wo,
            &mut cols,
        );
        gemm(
            cout,
            ckk,
            false,
            w.data(),
            ckk,
            ho * wo,
            false,
            &cols,
            1.0,
            0.0,
            &mut out[s * cout * ho * wo..(s + 1) * cout * ho * wo],
        );
    }
    Tensor::new(vec![n, cout, ho, wo], out)
}

/// Adjoint of `conv2d_raw` with respect to its input:
/// `g [N,Cout,Ho,Wo] x w -> [N,Cin,H,W]`.
pub(crate) fn conv2d_input_grad(g: &Tensor, w: &Tensor, pad: usize, h: usize, wd: usize) -> Tensor {
    let (n, cout, ho, wo) = g.dim4();
    let (cout2, cin, kh, kw) = w.dim4();
    assert_eq!(cout, cout2);
    let (eho, ewo) = conv_out_size(h, wd, kh, kw, pad);
    assert_eq!((ho, wo), (eho, ewo), "grad spatial shape mismatch");
    let ckk = cin * kh * kw;
    let mut cols = vec![0.0; ckk * ho * wo];
    let mut out = vec![0.0; n * cin * h * wd];
    for s in 0..n {
        gemm(
            cout,
            ckk,
            true,
            w.data(),
            cout,
            ho * wo,
            false,
            &g.data()[s * cout * ho * wo..(s + 1) * cout * ho * wo],
            1.0,
            0.0,
            &mut cols,
        );
        col2im_add(
            &cols,
            cin,
            h,
            wd,
            kh,
            kw,
            pad,
            ho,
            wo,
            &mut out[s * cin * h * wd..(s + 1) * cin * h * wd],
        );
    }
    Tensor::new(vec![n, cin, h, wd], out)
}

/// Adjoint of `conv2d_raw` with respect to its weights:
/// `x [N,Cin,H,W] x g [N,Cout,Ho,Wo] -> [Cout,Cin,kh,kw]`.
pub(crate) fn conv2d_weight_grad(x: &Tensor, g: &Tensor, pad: usize, kh: usize, kw: usize) -> Tensor {
    let (n, cin, h, wd) = x.dim4();
    let (n2, cout, ho, wo) = g.dim4();
    assert_eq!(n, n2);
    let (eho, ewo) = conv_out_size(h, wd, kh, kw, pad);
    assert_eq!((ho, wo), (eho, ewo), "grad spatial shape mismatch");
    let ckk = cin * kh * kw;
    let mut cols = vec![0.0; ckk * ho * wo];
    let mut out = vec![0.0; cout * ckk];
    for s in 0..n {
        im2col(
            &x.data()[s * cin * h * wd..(s + 1) * cin * h * wd],
            cin,
            h,
            wd,
            kh,
            kw,
            pad,
            ho,
            wo,
            &mut cols,
        );
        gemm(
            cout,
            ho * wo,
            false,
            &g.data()[s * cout * ho * wo..(s + 1) * cout * ho * wo],
            ckk,
            ho * wo,
            true,
            &cols,
            1.0,
            1.0,
            &mut out,
        );
    }
    Tensor::new(vec![cout, cin, kh, kw], out)
}

/// 2x2 average pooling; spatial dims must be even.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dim4();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let sp = &src[p * h * w..(p + 1) * h * w];
        let dp = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for x2 in 0..wo {
                let s = sp[2 * y * w + 2 * x2]
                    + sp[2 * y * w + 2 * x2 + 1]
                    + sp[(2 * y + 1) * w + 2 * x2]
                    + sp[(2 * y + 1) * w + 2 * x2 + 1];
                dp[y * wo + x2] = 0.25 * s;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dim4();
    let (ho, wo) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let sp = &src[p * h * w..(p + 1) * h * w];
        let dp = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            for x2 in 0..w {
                let v = sp[y * w + x2];
                dp[2 * y * wo + 2 * x2] = v;
                dp[2 * y * wo + 2 * x2 + 1] = v;
                dp[(2 * y + 1) * wo + 2 * x2] = v;
                dp[(2 * y + 1) * wo + 2 * x2 + 1] = v;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Leaky ReLU on raw values, for forward-only evaluation paths.
pub fn leaky_relu_raw(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    let j = if i < 0 { -i } else if i >= len { 2 * len - 2 - i } else { i };
    j as usize
}

/// Reflection padding (edge not repeated): `[N,C,H,W] -> [N,C,H+2p,W+2p]`.
pub fn reflect_pad2(x: &Tensor, p: usize) -> Tensor {
    let (n, c, h, w) = x.dim4();
    assert!(p < h && p < w, "reflect pad {p} too large for {h}x{w}");
    let (ho, wo) = (h + 2 * p, w + 2 * p);
    let src = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let sp = &src[plane * h * w..(plane + 1) * h * w];
        let dp = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..ho {
            let sy = reflect_index(y as isize - p as isize, h);
            for xx in 0..wo {
                let sx = reflect_index(xx as isize - p as isize, w);
                dp[y * wo + xx] = sp[sy * w + sx];
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Adjoint of [`reflect_pad2`]: scatter-add a padded gradient back to the
/// unpadded shape.
pub(crate) fn reflect_pad2_adjoint(g: &Tensor, p: usize) -> Tensor {
    let (n, c, ho, wo) = g.dim4();
    let (h, w) = (ho - 2 * p, wo - 2 * p);
    let src = g.data();
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let sp = &src[plane * ho * wo..(plane + 1) * ho * wo];
        let dp = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            let sy = reflect_index(y as isize - p as isize, h);
            for xx in 0..wo {
                let sx = reflect_index(xx as isize - p as isize, w);
                dp[sy * w + sx] += sp[y * wo + xx];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}
