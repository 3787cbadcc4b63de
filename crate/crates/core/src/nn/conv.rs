//! 3D convolution kernels (stride 1, "same" padding, cubic kernels of size
//! 1 or 3) with their input- and parameter-gradient counterparts.
//!
//! The k=3 path fuses the innermost kernel axis into a 3-tap stencil over
//! contiguous rows, which keeps the hot loops vectorizable and memory-lean.
//! Output channels (or input channels, for the input gradient) are processed
//! in parallel; every output element is reduced sequentially by one thread,
//! so results do not depend on the thread count.

use ndarray::Array4;
use rayon::prelude::*;

use super::Tensor;

/// Weight layout: `[oc][ic][kz][ky][kx]`, flattened.
#[inline]
fn w_at(weight: &[f64], ic_n: usize, k: usize, oc: usize, ic: usize, kz: usize, ky: usize) -> &[f64] {
    let base = (((oc * ic_n + ic) * k + kz) * k + ky) * k;
    &weight[base..base + k]
}

/// 3-tap stencil along a row: `out[x] += w0*in[x-1] + w1*in[x] + w2*in[x+1]`
/// with the out-of-range taps dropped.
#[inline]
fn stencil_row(out: &mut [f64], inp: &[f64], w: &[f64]) {
    let n = out.len();
    let (w0, w1, w2) = (w[0], w[1], w[2]);
    if n == 1 {
        out[0] += w1 * inp[0];
        return;
    }
    out[0] += w1 * inp[0] + w2 * inp[1];
    for x in 1..n - 1 {
        out[x] += w0 * inp[x - 1] + w1 * inp[x] + w2 * inp[x + 1];
    }
    out[n - 1] += w0 * inp[n - 2] + w1 * inp[n - 1];
}

/// Row-wise correlation for the weight gradient: returns the three dot
/// products `(Σ g[x]·in[x-1], Σ g[x]·in[x], Σ g[x]·in[x+1])`.
#[inline]
fn stencil_row_dots(g: &[f64], inp: &[f64]) -> (f64, f64, f64) {
    let n = g.len();
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for x in 0..n {
        let gx = g[x];
        if x >= 1 {
            d0 += gx * inp[x - 1];
        }
        d1 += gx * inp[x];
        if x + 1 < n {
            d2 += gx * inp[x + 1];
        }
    }
    (d0, d1, d2)
}

/// Forward convolution: `out[oc] = bias[oc] + Σ_ic weight[oc,ic] * in[ic]`.
pub(crate) fn forward(input: &Tensor, weight: &[f64], bias: &[f64], oc_n: usize, k: usize) -> Tensor {
    let (ic_n, d, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    debug_assert_eq!(weight.len(), oc_n * ic_n * k * k * k);
    let slab = d * h * w;
    let input_slice = input.as_slice().expect("tensors are standard layout");

    let mut out = Array4::<f64>::zeros((oc_n, d, h, w));
    out.as_slice_mut()
        .unwrap()
        .par_chunks_mut(slab)
        .enumerate()
        .for_each(|(oc, out_slab)| {
            out_slab.fill(bias[oc]);
            for ic in 0..ic_n {
                let in_slab = &input_slice[ic * slab..(ic + 1) * slab];
                if k == 1 {
                    let wv = w_at(weight, ic_n, 1, oc, ic, 0, 0)[0];
                    for (o, &i) in out_slab.iter_mut().zip(in_slab) {
                        *o += wv * i;
                    }
                    continue;
                }
                for kz in 0..3usize {
                    let dz = kz as isize - 1;
                    for ky in 0..3usize {
                        let dy = ky as isize - 1;
                        let wrow = w_at(weight, ic_n, 3, oc, ic, kz, ky);
                        for zo in 0..d {
                            let zi = zo as isize + dz;
                            if zi < 0 || zi >= d as isize {
                                continue;
                            }
                            for yo in 0..h {
                                let yi = yo as isize + dy;
                                if yi < 0 || yi >= h as isize {
                                    continue;
                                }
                                let orow = &mut out_slab[(zo * h + yo) * w..(zo * h + yo + 1) * w];
                                let irow = &in_slab
                                    [(zi as usize * h + yi as usize) * w..(zi as usize * h + yi as usize + 1) * w];
                                stencil_row(orow, irow, wrow);
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradient w.r.t. the input: convolution of the output gradient with the
/// kernel flipped along every axis and with (oc, ic) transposed.
pub(crate) fn backward_input(
    grad_out: &Tensor,
    weight: &[f64],
    ic_n: usize,
    k: usize,
) -> Tensor {
    let oc_n = grad_out.shape()[0];
    let mut flipped = vec![0.0; weight.len()];
    for oc in 0..oc_n {
        for ic in 0..ic_n {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let src = (((oc * ic_n + ic) * k + kz) * k + ky) * k + kx;
                        let dst = (((ic * oc_n + oc) * k + (k - 1 - kz)) * k + (k - 1 - ky)) * k
                            + (k - 1 - kx);
                        flipped[dst] = weight[src];
                    }
                }
            }
        }
    }
    let zero_bias = vec![0.0; ic_n];
    forward(grad_out, &flipped, &zero_bias, ic_n, k)
}

/// Accumulates the weight and bias gradients into `dw`/`db`.
pub(crate) fn backward_params(
    grad_out: &Tensor,
    input: &Tensor,
    k: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let (_oc_n, d, h, w) = {
        let s = grad_out.shape();
        (s[0], s[1], s[2], s[3])
    };
    let ic_n = input.shape()[0];
    let slab = d * h * w;
    let g_slice = grad_out.as_slice().expect("standard layout");
    let in_slice = input.as_slice().expect("standard layout");
    let per_oc = ic_n * k * k * k;

    dw.par_chunks_mut(per_oc).zip(db.par_iter_mut()).enumerate().for_each(
        |(oc, (dw_oc, db_oc))| {
            let g_slab = &g_slice[oc * slab..(oc + 1) * slab];
            *db_oc += g_slab.iter().sum::<f64>();
            for ic in 0..ic_n {
                let in_slab = &in_slice[ic * slab..(ic + 1) * slab];
                if k == 1 {
                    let mut acc = 0.0;
                    for (g, i) in g_slab.iter().zip(in_slab) {
                        acc += g * i;
                    }
                    dw_oc[ic] += acc;
                    continue;
                }
                for kz in 0..3usize {
                    let dz = kz as isize - 1;
                    for ky in 0..3usize {
                        let dy = ky as isize - 1;
                        let mut acc = (0.0, 0.0, 0.0);
                        for zo in 0..d {
                            let zi = zo as isize + dz;
                            if zi < 0 || zi >= d as isize {
                                continue;
                            }
                            for yo in 0..h {
                                let yi = yo as isize + dy;
                                if yi < 0 || yi >= h as isize {
                                    continue;
                                }
                                let grow = &g_slab[(zo * h + yo) * w..(zo * h + yo + 1) * w];
                                let irow = &in_slab[(zi as usize * h + yi as usize) * w
                                    ..(zi as usize * h + yi as usize + 1) * w];
                                let (d0, d1, d2) = stencil_row_dots(grow, irow);
                                acc.0 += d0;
                                acc.1 += d1;
                                acc.2 += d2;
                            }
                        }
                        let base = ((ic * 3 + kz) * 3 + ky) * 3;
                        dw_oc[base] += acc.0;
                        dw_oc[base + 1] += acc.1;
                        dw_oc[base + 2] += acc.2;
                    }
                }
            }
        },
    );
}
