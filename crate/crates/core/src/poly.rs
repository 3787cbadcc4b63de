//! Trivariate polynomial basis over voxel coordinates, shared by bias-field
//! synthesis and estimation. Coordinates are mapped to [-1, 1] per axis to
//! keep design matrices well conditioned.

/// Exponent triples (a, b, c) of all monomials x^a y^b z^c with
/// 0 < a+b+c <= degree, in a fixed deterministic order. The constant
/// monomial is excluded; callers add it themselves when needed.
pub(crate) fn monomial_exponents(degree: usize) -> Vec<[u32; 3]> {
    let mut out = Vec::new();
    for total in 1..=degree as u32 {
        for a in 0..=total {
            for b in 0..=(total - a) {
                let c = total - a - b;
                out.push([a, b, c]);
            }
        }
    }
    out
}

/// Maps an index to the normalized coordinate in [-1, 1]. Degenerate
/// single-voxel axes map to 0.
pub(crate) fn norm_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n as f64 - 1.0) - 1.0
    }
}

/// Evaluates the monomials at a normalized coordinate into `out`.
pub(crate) fn eval_monomials(exps: &[[u32; 3]], p: [f64; 3], out: &mut [f64]) {
    debug_assert_eq!(exps.len(), out.len());
    for (slot, e) in out.iter_mut().zip(exps) {
        *slot = p[0].powi(e[0] as i32) * p[1].powi(e[1] as i32) * p[2].powi(e[2] as i32);
    }
}
