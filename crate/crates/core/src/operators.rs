//! Local operators on the quasi-local algebra and region density matrices.
//!
//! A [`LocalOperator`] is a finite-support element of the infinite tensor
//! product algebra: a complex matrix over ⊗_{s ∈ support} C^d together with
//! its (sorted) support; it acts as the identity elsewhere. The support may
//! be empty (scalars). Operators with different supports multiply by
//! embedding into their union support.

use alloc::format;
use alloc::vec::Vec;
use num_complex::Complex64;

// Required for f64 math in no_std builds; redundant (and reported unused)
// whenever a dependency links std and the inherent methods take over.
#[allow(unused_imports)]
use num_traits::Float;
use crate::cmat::CMatrix;
use crate::error::{Error, Result};
use crate::lattice::{Configuration, Site, SparseState};
use crate::tensor;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// A finite-support operator: `matrix` acts on ⊗ C^d over `support` (sorted,
/// distinct sites), identity everywhere else.
#[derive(Clone, PartialEq, Debug)]
pub struct LocalOperator {
    n: usize,
    d: usize,
    support: Vec<Site>,
    matrix: CMatrix,
}

/// Validate that a site list is sorted, distinct and of dimension n.
fn check_support(n: usize, sites: &[Site]) -> Result<()> {
    if sites.iter().any(|s| s.n() != n) {
        return Err(Error::invalid("support site dimension mismatch"));
    }
    if sites.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("support must be sorted and duplicate-free"));
    }
    Ok(())
}

impl LocalOperator {
    /// Wrap a matrix over the given support. The support may be listed in
    /// any order (it is canonicalized to lexicographic order, permuting the
    /// matrix legs accordingly), but must be duplicate-free.
    pub fn new(n: usize, d: usize, support: Vec<Site>, matrix: CMatrix) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("cell dimension must be ≥ 1"));
        }
        if support.iter().any(|s| s.n() != n) {
            return Err(Error::invalid("support site dimension mismatch"));
        }
        let dim = d.pow(support.len() as u32);
        if matrix.nrows() != dim || matrix.ncols() != dim {
            return Err(Error::invalid(format!(
                "operator matrix is {}x{}, expected {dim}x{dim} for {} sites",
                matrix.nrows(),
                matrix.ncols(),
                support.len()
            )));
        }
        // Sort the support, carrying matrix legs along.
        let mut order: Vec<usize> = (0..support.len()).collect();
        order.sort_by(|&a, &b| support[a].cmp(&support[b]));
        if order.windows(2).any(|w| support[w[0]] == support[w[1]]) {
            return Err(Error::invalid("support sites must be distinct"));
        }
        let sorted: Vec<Site> = order.iter().map(|&i| support[i].clone()).collect();
        let matrix = if order.iter().enumerate().all(|(k, &i)| k == i) {
            matrix
        } else {
            let dims = alloc::vec![d; support.len()];
            tensor::permute_legs(&matrix, &dims, &order)
        };
        Ok(LocalOperator {
            n,
            d,
            support: sorted,
            matrix,
        })
    }

    /// The scalar z (empty support).
    pub fn scalar(n: usize, d: usize, z: Complex64) -> Self {
        LocalOperator {
            n,
            d,
            support: Vec::new(),
            matrix: CMatrix::from_fn(1, 1, |_, _| z),
        }
    }

    /// The identity operator.
    pub fn identity(n: usize, d: usize) -> Self {
        LocalOperator::scalar(n, d, ONE)
    }

    /// The matrix unit e_ij localized at one site.
    pub fn matrix_unit(n: usize, d: usize, site: Site, i: usize, j: usize) -> Result<Self> {
        if i >= d || j >= d {
            return Err(Error::invalid("matrix unit index out of range"));
        }
        LocalOperator::new(n, d, alloc::vec![site], CMatrix::matrix_unit(d, i, j))
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn support(&self) -> &[Site] {
        &self.support
    }
    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    fn leg_dims(&self) -> Vec<usize> {
        alloc::vec![self.d; self.support.len()]
    }

    /// Matrix of this operator over a larger (sorted, distinct) support that
    /// contains the current one.
    pub fn embed_matrix(&self, target: &[Site]) -> Result<CMatrix> {
        check_support(self.n, target)?;
        let mut active = Vec::with_capacity(self.support.len());
        for s in &self.support {
            match target.binary_search(s) {
                Ok(k) => active.push(k),
                Err(_) => {
                    return Err(Error::invalid(
                        "embedding target does not contain operator support",
                    ))
                }
            }
        }
        let dims = alloc::vec![self.d; target.len()];
        Ok(tensor::op_on_legs(&dims, &active, &self.matrix))
    }

    /// Rewrap over a larger support (no reduction).
    pub fn embedded(&self, target: &[Site]) -> Result<LocalOperator> {
        let matrix = self.embed_matrix(target)?;
        Ok(LocalOperator {
            n: self.n,
            d: self.d,
            support: target.to_vec(),
            matrix,
        })
    }

    fn union_support(&self, other: &LocalOperator) -> Vec<Site> {
        let mut u: Vec<Site> = self.support.clone();
        u.extend(other.support.iter().cloned());
        u.sort();
        u.dedup();
        u
    }

    fn check_compat(&self, other: &LocalOperator) -> Result<()> {
        if self.n != other.n || self.d != other.d {
            return Err(Error::invalid(
                "operators live on different lattices or cell dimensions",
            ));
        }
        Ok(())
    }

    /// Operator product, supported on the union of supports (not reduced).
    pub fn multiply(&self, other: &LocalOperator) -> Result<LocalOperator> {
        self.check_compat(other)?;
        let u = self.union_support(other);
        let a = self.embed_matrix(&u)?;
        let b = other.embed_matrix(&u)?;
        Ok(LocalOperator {
            n: self.n,
            d: self.d,
            support: u,
            matrix: a.mul(&b),
        })
    }

    /// Linear combination self + z·other on the union support.
    pub fn add_scaled(&self, z: Complex64, other: &LocalOperator) -> Result<LocalOperator> {
        self.check_compat(other)?;
        let u = self.union_support(other);
        let mut a = self.embed_matrix(&u)?;
        let b = other.embed_matrix(&u)?;
        a.axpy(z, &b);
        Ok(LocalOperator {
            n: self.n,
            d: self.d,
            support: u,
            matrix: a,
        })
    }

    pub fn adjoint(&self) -> LocalOperator {
        LocalOperator {
            n: self.n,
            d: self.d,
            support: self.support.clone(),
            matrix: self.matrix.adjoint(),
        }
    }

    pub fn scale(&self, z: Complex64) -> LocalOperator {
        LocalOperator {
            n: self.n,
            d: self.d,
            support: self.support.clone(),
            matrix: self.matrix.scale(z),
        }
    }

    /// Shift the support by +z.
    pub fn translate(&self, z: &Site) -> Result<LocalOperator> {
        let support = self
            .support
            .iter()
            .map(|s| s.add(z))
            .collect::<Result<Vec<Site>>>()?;
        Ok(LocalOperator {
            n: self.n,
            d: self.d,
            support,
            matrix: self.matrix.clone(),
        })
    }

    /// Drop support sites on which the operator acts as the identity
    /// (within `tol`, relative to the max entry). The scalar factor of fully
    /// scalar operators is kept in the 1×1 matrix.
    pub fn reduce(&self, tol: f64) -> LocalOperator {
        let mut support = self.support.clone();
        let mut matrix = self.matrix.clone();
        loop {
            if support.is_empty() {
                break;
            }
            let dims = alloc::vec![self.d; support.len()];
            let mut dropped = false;
            for leg in 0..support.len() {
                if let Some(rest) = tensor::split_identity_leg(&matrix, &dims, leg, tol) {
                    matrix = rest;
                    support.remove(leg);
                    dropped = true;
                    break;
                }
            }
            if !dropped {
                break;
            }
        }
        LocalOperator {
            n: self.n,
            d: self.d,
            support,
            matrix,
        }
    }

    /// Apply to a sparse state: |ψ⟩ ↦ Â|ψ⟩. Exact (no pruning); each input
    /// term fans out to at most d^{|support|} terms.
    pub fn apply(&self, state: &SparseState) -> Result<SparseState> {
        if state.n() != self.n || state.d() != self.d {
            return Err(Error::invalid("operator/state space mismatch"));
        }
        let dims = self.leg_dims();
        let m = self.matrix.nrows();
        let mut out = SparseState::from_terms(self.n, self.d, core::iter::empty())?;
        let mut digits = alloc::vec![0usize; self.support.len()];
        for (config, amp) in state.terms() {
            // Column index from the digits over our support.
            for (k, s) in self.support.iter().enumerate() {
                digits[k] = config.value_at(s) as usize;
            }
            let col = tensor::encode_index(&digits, &dims);
            for r in 0..m {
                let coeff = self.matrix[(r, col)];
                if coeff == ZERO {
                    continue;
                }
                tensor::decode_index(r, &dims, &mut digits);
                let mut nc = config.clone();
                for (k, s) in self.support.iter().enumerate() {
                    nc.set(s.clone(), digits[k] as u32);
                }
                out.accumulate(nc, amp * coeff);
            }
        }
        Ok(out)
    }

    /// Frobenius norm of the matrix over its own support (not normalized).
    pub fn frob_norm(&self) -> f64 {
        self.matrix.frob_norm()
    }
}

/// Normalized Hilbert–Schmidt pairing τ(a†·b), where τ is the product
/// tracial state (trace divided by total dimension). Independent of the
/// ambient support the two operators are embedded into.
pub fn hs_inner(a: &LocalOperator, b: &LocalOperator) -> Result<Complex64> {
    if a.n() != b.n() || a.d() != b.d() {
        return Err(Error::invalid("hs_inner between mismatched operators"));
    }
    let sa = a.support();
    let sb = b.support();
    // Common legs C; trace out S_a\C from a and S_b\C from b, contract on C.
    let common: Vec<Site> = sa.iter().filter(|s| sb.binary_search(s).is_ok()).cloned().collect();
    let keep_a: Vec<usize> = common
        .iter()
        .map(|s| sa.binary_search(s).unwrap())
        .collect();
    let keep_b: Vec<usize> = common
        .iter()
        .map(|s| sb.binary_search(s).unwrap())
        .collect();
    let dims_a = alloc::vec![a.d(); sa.len()];
    let dims_b = alloc::vec![b.d(); sb.len()];
    let ra = tensor::partial_trace(a.matrix(), &dims_a, &keep_a);
    let rb = tensor::partial_trace(b.matrix(), &dims_b, &keep_b);
    // tr(ra† · rb)
    let acc = ra.hs_dot(&rb);
    let union_len = sa.len() + sb.len() - common.len();
    let denom = (a.d() as f64).powi(union_len as i32);
    Ok(acc / denom)
}

/// A density matrix of a state restricted to a finite region.
#[derive(Clone, PartialEq, Debug)]
pub struct RegionDensity {
    d: usize,
    region: Vec<Site>,
    matrix: CMatrix,
}

impl RegionDensity {
    pub fn region(&self) -> &[Site] {
        &self.region
    }
    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }
    pub fn d(&self) -> usize {
        self.d
    }
}

/// Reduced density matrix of a normalized state on a finite region: group
/// terms by their configuration outside the region, form the region-space
/// vectors, and sum their outer products. Trace is 1 by construction.
pub fn restrict_density(state: &SparseState, region: &[Site]) -> Result<RegionDensity> {
    if region.is_empty() {
        return Err(Error::invalid("density region must be nonempty"));
    }
    check_support(state.n(), region)?;
    if (state.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("restrict_density expects a normalized state"));
    }
    let d = state.d();
    let dim = d.pow(region.len() as u32);
    let dims = alloc::vec![d; region.len()];
    // env configuration -> dense region vector
    let mut groups: alloc::collections::BTreeMap<Configuration, Vec<Complex64>> =
        alloc::collections::BTreeMap::new();
    let mut digits = alloc::vec![0usize; region.len()];
    for (config, amp) in state.terms() {
        let mut env = config.clone();
        for (k, s) in region.iter().enumerate() {
            digits[k] = config.value_at(s) as usize;
            env.set(s.clone(), 0);
        }
        let idx = tensor::encode_index(&digits, &dims);
        groups
            .entry(env)
            .or_insert_with(|| alloc::vec![ZERO; dim])[idx] += amp;
    }
    let mut rho = CMatrix::zeros(dim, dim);
    for v in groups.values() {
        for i in 0..dim {
            if v[i] == ZERO {
                continue;
            }
            for j in 0..dim {
                rho[(i, j)] += v[i] * v[j].conj();
            }
        }
    }
    Ok(RegionDensity {
        d,
        region: region.to_vec(),
        matrix: rho,
    })
}
