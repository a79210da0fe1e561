//! Leg (tensor-factor) manipulation for operators and vectors living on a
//! finite tensor product ⊗_k C^{d_k}.
//!
//! Index convention is big-endian throughout the crate: the first leg is the
//! most significant digit of a flat index, matching the Kronecker convention
//! in [`crate::cmat::CMatrix::kron`].

use alloc::vec;
use alloc::vec::Vec;
use num_complex::Complex64;

use crate::cmat::CMatrix;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Big-endian strides: stride[k] = ∏_{j>k} dims[j].
pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * dims[k + 1];
    }
    s
}

/// Total dimension ∏ dims.
pub fn total_dim(dims: &[usize]) -> usize {
    dims.iter().product()
}

/// Decompose a flat index into big-endian digits.
pub fn decode_index(mut idx: usize, dims: &[usize], out: &mut [usize]) {
    for k in (0..dims.len()).rev() {
        out[k] = idx % dims[k];
        idx /= dims[k];
    }
}

/// Flatten big-endian digits into an index.
pub fn encode_index(digits: &[usize], dims: &[usize]) -> usize {
    let mut idx = 0;
    for (d, &dim) in digits.iter().zip(dims) {
        debug_assert!(*d < dim);
        idx = idx * dim + d;
    }
    idx
}

/// Permute the legs of a square operator on ⊗dims. The output's leg k is the
/// input's leg perm[k] (gather semantics), so the output lives on
/// ⊗_k dims[perm[k]].
pub fn permute_legs(m: &CMatrix, dims: &[usize], perm: &[usize]) -> CMatrix {
    let d = total_dim(dims);
    assert_eq!(m.nrows(), d);
    assert_eq!(m.ncols(), d);
    assert_eq!(perm.len(), dims.len());
    let in_strides = strides(dims);
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    // map[out_index] = in_index
    let mut map = vec![0usize; d];
    let mut digits = vec![0usize; dims.len()];
    for (out_idx, entry) in map.iter_mut().enumerate() {
        decode_index(out_idx, &out_dims, &mut digits);
        let mut in_idx = 0;
        for (k, &dg) in digits.iter().enumerate() {
            in_idx += dg * in_strides[perm[k]];
        }
        *entry = in_idx;
    }
    CMatrix::from_fn(d, d, |i, j| m[(map[i], map[j])])
}

/// Offsets of the active sub-index inside the flat index: for each flat
/// active index a (big-endian over dims[active]), the sum of digit·stride.
pub(crate) fn active_offsets(dims: &[usize], active: &[usize]) -> Vec<usize> {
    let st = strides(dims);
    let adims: Vec<usize> = active.iter().map(|&k| dims[k]).collect();
    let m = total_dim(&adims);
    let mut offs = vec![0usize; m];
    let mut digits = vec![0usize; active.len()];
    for (a, entry) in offs.iter_mut().enumerate() {
        decode_index(a, &adims, &mut digits);
        *entry = digits
            .iter()
            .zip(active)
            .map(|(&dg, &k)| dg * st[k])
            .sum();
    }
    offs
}

/// Flat offsets of all assignments to the *inactive* legs (active legs held
/// at digit 0).
pub(crate) fn base_offsets(dims: &[usize], active: &[usize]) -> Vec<usize> {
    let st = strides(dims);
    let inactive: Vec<usize> = (0..dims.len()).filter(|k| !active.contains(k)).collect();
    let idims: Vec<usize> = inactive.iter().map(|&k| dims[k]).collect();
    let count = total_dim(&idims);
    let mut out = vec![0usize; count];
    let mut digits = vec![0usize; inactive.len()];
    for (e, entry) in out.iter_mut().enumerate() {
        decode_index(e, &idims, &mut digits);
        *entry = digits
            .iter()
            .zip(&inactive)
            .map(|(&dg, &k)| dg * st[k])
            .sum();
    }
    out
}

/// Embed an operator `b` acting on the listed legs (in that order — b's
/// first tensor factor is legs `active[0]`) as a full operator on ⊗dims,
/// identity on the remaining legs.
pub fn op_on_legs(dims: &[usize], active: &[usize], b: &CMatrix) -> CMatrix {
    let d = total_dim(dims);
    let adims: Vec<usize> = active.iter().map(|&k| dims[k]).collect();
    let m = total_dim(&adims);
    assert_eq!(b.nrows(), m, "operator does not match active leg dims");
    assert_eq!(b.ncols(), m);
    let offs = active_offsets(dims, active);
    let bases = base_offsets(dims, active);
    let mut out = CMatrix::zeros(d, d);
    for &base in &bases {
        for r in 0..m {
            for c in 0..m {
                let v = b[(r, c)];
                if v != ZERO {
                    out[(base + offs[r], base + offs[c])] = v;
                }
            }
        }
    }
    out
}

/// Apply an operator on the listed legs to a state vector over ⊗dims,
/// in place.
pub fn apply_op_to_vec(dims: &[usize], active: &[usize], b: &CMatrix, v: &mut [Complex64]) {
    let d = total_dim(dims);
    assert_eq!(v.len(), d);
    let adims: Vec<usize> = active.iter().map(|&k| dims[k]).collect();
    let m = total_dim(&adims);
    assert_eq!(b.nrows(), m);
    let offs = active_offsets(dims, active);
    let bases = base_offsets(dims, active);
    let mut fiber = vec![ZERO; m];
    for &base in &bases {
        for (f, &o) in fiber.iter_mut().zip(&offs) {
            *f = v[base + o];
        }
        for r in 0..m {
            let mut acc = ZERO;
            let row = b.row(r);
            for (x, f) in row.iter().zip(&fiber) {
                acc += x * f;
            }
            v[base + offs[r]] = acc;
        }
    }
}

/// Left-multiply a square operator on ⊗dims by `b` embedded on `active`
/// legs: out = b̂ · m. (Applies the fiber matvec to every column.)
pub fn left_apply_on_legs(dims: &[usize], active: &[usize], b: &CMatrix, m: &mut CMatrix) {
    let d = total_dim(dims);
    assert_eq!(m.nrows(), d);
    let adims: Vec<usize> = active.iter().map(|&k| dims[k]).collect();
    let md = total_dim(&adims);
    let offs = active_offsets(dims, active);
    let bases = base_offsets(dims, active);
    let cols = m.ncols();
    let mut fiber = vec![ZERO; md];
    for j in 0..cols {
        for &base in &bases {
            for (f, &o) in fiber.iter_mut().zip(&offs) {
                *f = m[(base + o, j)];
            }
            for r in 0..md {
                let mut acc = ZERO;
                for (x, f) in b.row(r).iter().zip(&fiber) {
                    acc += x * f;
                }
                m[(base + offs[r], j)] = acc;
            }
        }
    }
}

/// Conjugate a square operator by a unitary embedded on the given legs:
/// out = b̂ · m · b̂†.
pub fn sandwich_on_legs(dims: &[usize], active: &[usize], b: &CMatrix, m: &CMatrix) -> CMatrix {
    let mut out = m.clone();
    left_apply_on_legs(dims, active, b, &mut out);
    // m · b̂† = (b̂ · m†)†; cheaper: right-multiplication acts on rows, which
    // equals applying conj(b) fibers across rows. Do it via adjoint twice.
    let mut tmp = out.adjoint();
    left_apply_on_legs(dims, active, b, &mut tmp);
    tmp.adjoint()
}

/// Partial trace keeping the listed legs (in that order). Input is a square
/// operator on ⊗dims; output lives on ⊗ dims[keep].
pub fn partial_trace(m: &CMatrix, dims: &[usize], keep: &[usize]) -> CMatrix {
    let d = total_dim(dims);
    assert_eq!(m.nrows(), d);
    assert_eq!(m.ncols(), d);
    let offs_keep = active_offsets(dims, keep);
    let bases = base_offsets(dims, keep);
    let k = offs_keep.len();
    let mut out = CMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let mut acc = ZERO;
            for &e in &bases {
                acc += m[(offs_keep[a] + e, offs_keep[b] + e)];
            }
            out[(a, b)] = acc;
        }
    }
    out
}

/// If `m` acts as the identity on leg `leg` (i.e. m = I_{d_leg} ⊗ rest up to
/// leg ordering), return the rest (an operator on the remaining legs) —
/// otherwise None. The deviation is measured in max-norm against `tol`,
/// scaled by the operator's max entry.
pub fn split_identity_leg(m: &CMatrix, dims: &[usize], leg: usize, tol: f64) -> Option<CMatrix> {
    let others: Vec<usize> = (0..dims.len()).filter(|&k| k != leg).collect();
    let g = partial_trace(m, dims, &others).scale(Complex64::new(1.0 / dims[leg] as f64, 0.0));
    let rebuilt = op_on_legs(dims, &others, &g);
    let scale = m.max_abs().max(1.0);
    if rebuilt.sub(m).max_abs() <= tol * scale {
        Some(g)
    } else {
        None
    }
}
