//! Seeded generators for models, unitaries and states, used by validation
//! probes, tests and the CLI's trial machinery.

use alloc::vec::Vec;
use num_complex::Complex64;

// Required for f64 math in no_std builds; redundant (and reported unused)
// whenever a dependency links std and the inherent methods take over.
#[allow(unused_imports)]
use num_traits::Float;
use crate::cmat::CMatrix;
use crate::error::Result;
use crate::evolution::{PartitionedCircuit, QlgaModel, SubcellFactor};
use crate::lattice::{Configuration, Neighborhood, Site, SparseState};
use crate::rng::SeededRng;
use crate::tensor;
use crate::tol::Tolerances;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Haar-distributed unitary: complex Ginibre matrix orthonormalized by
/// modified Gram–Schmidt (the R factor has a positive diagonal, which makes
/// the distribution exactly Haar).
pub fn haar_unitary(d: usize, rng: &mut SeededRng) -> CMatrix {
    let mut g = CMatrix::from_fn(d, d, |_, _| rng.cnormal());
    for j in 0..d {
        for k in 0..j {
            let mut dot = ZERO;
            for i in 0..d {
                dot += g[(i, k)].conj() * g[(i, j)];
            }
            for i in 0..d {
                let sub = dot * g[(i, k)];
                g[(i, j)] -= sub;
            }
        }
        let nrm = (0..d).map(|i| g[(i, j)].norm_sqr()).sum::<f64>().sqrt();
        for i in 0..d {
            g[(i, j)] /= nrm;
        }
    }
    g
}

/// Random unitary fixing the first basis vector exactly: 1 ⊕ Haar(d−1).
/// This is the generic collision/block sampler.
pub fn random_collision(d: usize, rng: &mut SeededRng) -> CMatrix {
    assert!(d >= 2);
    let u = haar_unitary(d - 1, rng);
    let mut f = CMatrix::zeros(d, d);
    f[(0, 0)] = Complex64::new(1.0, 0.0);
    for i in 0..d - 1 {
        for j in 0..d - 1 {
            f[(i + 1, j + 1)] = u[(i, j)];
        }
    }
    f
}

/// A QLGA with the given per-offset factor dimensions and a random collision.
/// `dims[k]` pairs with the k-th offset of the (sorted) neighborhood.
pub fn random_qlga(
    neighborhood: Neighborhood,
    dims: &[usize],
    rng: &mut SeededRng,
) -> Result<QlgaModel> {
    let d: usize = dims.iter().product();
    let collision = random_collision(d, rng);
    qlga_with_collision(neighborhood, dims, collision)
}

/// A QLGA with an explicit collision matrix.
pub fn qlga_with_collision(
    neighborhood: Neighborhood,
    dims: &[usize],
    collision: CMatrix,
) -> Result<QlgaModel> {
    let factors: Vec<SubcellFactor> = neighborhood
        .offsets()
        .iter()
        .zip(dims)
        .map(|(off, &dim)| SubcellFactor {
            offset: off.clone(),
            dim,
            q: 0,
        })
        .collect();
    QlgaModel::new(neighborhood, factors, collision, &Tolerances::default())
}

/// The 1-D SWAP lattice gas: dims (2,2) on 𝒩 = {0,1}, collision exchanging
/// the two qubit factors.
pub fn swap_qlga() -> QlgaModel {
    let mut f = CMatrix::zeros(4, 4);
    f[(0, 0)] = Complex64::new(1.0, 0.0);
    f[(1, 2)] = Complex64::new(1.0, 0.0);
    f[(2, 1)] = Complex64::new(1.0, 0.0);
    f[(3, 3)] = Complex64::new(1.0, 0.0);
    qlga_with_collision(Neighborhood::line(&[0, 1]).unwrap(), &[2, 2], f).unwrap()
}

/// The trivial-collision mover: dims (1,2) on 𝒩 = {0,1}, F = I₂. A single
/// particle translates one site per step (toward −1, the σ convention).
pub fn mover_qlga() -> QlgaModel {
    qlga_with_collision(
        Neighborhood::line(&[0, 1]).unwrap(),
        &[1, 2],
        CMatrix::identity(2),
    )
    .unwrap()
}

/// A cell value for the given factor dims with at most `max_comps`
/// non-quiescent components (and at least one).
pub fn limited_value(dims: &[usize], max_comps: usize, rng: &mut SeededRng) -> u32 {
    let nontrivial: Vec<usize> = (0..dims.len()).filter(|&k| dims[k] > 1).collect();
    assert!(!nontrivial.is_empty());
    let comps = 1 + rng.below(max_comps.min(nontrivial.len()));
    let mut chosen = nontrivial.clone();
    // Partial Fisher–Yates for the first `comps` picks.
    for i in 0..comps {
        let j = i + rng.below(chosen.len() - i);
        chosen.swap(i, j);
    }
    let mut digits = alloc::vec![0u32; dims.len()];
    for &k in &chosen[..comps] {
        digits[k] = 1 + rng.below(dims[k] - 1) as u32;
    }
    let mut v = 0u32;
    for (dg, &dim) in digits.iter().zip(dims) {
        v = v * dim as u32 + dg;
    }
    v
}

/// A fully random nonzero cell value.
pub fn any_value(d: usize, rng: &mut SeededRng) -> u32 {
    1 + rng.below(d - 1) as u32
}

/// Random normalized sparse state: `terms` superposed configurations, each
/// with at most `max_active` active cells drawn from `block`, values drawn
/// by `value_of`. Keeping the block compact keeps one evolution step within
/// the sparse term budget even at larger cell dimensions.
pub fn random_sparse_state(
    n: usize,
    d: usize,
    block: &[Site],
    max_active: usize,
    terms: usize,
    rng: &mut SeededRng,
    mut value_of: impl FnMut(&mut SeededRng) -> u32,
) -> Result<SparseState> {
    assert!(!block.is_empty());
    let mut collected = Vec::with_capacity(terms);
    for _ in 0..terms {
        let active = 1 + rng.below(max_active.min(block.len()));
        let mut idxs: Vec<usize> = (0..block.len()).collect();
        for i in 0..active {
            let j = i + rng.below(idxs.len() - i);
            idxs.swap(i, j);
        }
        let mut pairs = Vec::with_capacity(active);
        for &bi in &idxs[..active] {
            pairs.push((block[bi].clone(), value_of(rng)));
        }
        let cfg = Configuration::from_pairs(pairs)?;
        collected.push((cfg, rng.cnormal()));
    }
    let st = SparseState::from_terms(n, d, collected)?;
    match st.normalize() {
        Ok(s) => Ok(s),
        Err(_) => {
            // Vanishingly unlikely cancellation; fall back to a basis state.
            let cfg = Configuration::from_pairs(alloc::vec![(block[0].clone(), value_of(rng))])?;
            SparseState::basis(n, d, cfg)
        }
    }
}

/// A contiguous block of `len` sites starting at `start` (1-D).
pub fn line_block(start: i64, len: usize) -> Vec<Site> {
    (0..len as i64).map(|k| Site(alloc::vec![start + k])).collect()
}

/// A compact 2-D block of `len` sites filled row-major from `start`.
pub fn square_block(start: (i64, i64), len: usize) -> Vec<Site> {
    let side = {
        let mut s = 1usize;
        while s * s < len {
            s += 1;
        }
        s
    };
    let mut out = Vec::with_capacity(len);
    'outer: for i in 0..side as i64 {
        for j in 0..side as i64 {
            out.push(Site(alloc::vec![start.0 + i, start.1 + j]));
            if out.len() == len {
                break 'outer;
            }
        }
    }
    out
}

/// Negative control: a strictly translation-invariant partitioned circuit on
/// blocked cells of dimension `d_half`² that is *not* a lattice gas.
///
/// Layer 1 applies a random on-site unitary fixing the quiescent vector;
/// layers 2 and 3 couple every adjacent pair of cells through a gadget
/// I_{d_half} ⊗ V ⊗ I_{d_half} (V on the two inner half-cells, fixing their
/// quiescent vector), split into even and odd sublayers so each tiles
/// disjointly. Because *every* adjacent pair is coupled the same way, the
/// circuit is translation-invariant at the cell scale, yet the interface
/// entanglement pattern admits no sub-cell factorization.
pub fn brickwork_circuit(d_half: usize, rng: &mut SeededRng) -> Result<PartitionedCircuit> {
    let d = d_half * d_half;
    let onsite = random_collision(d, rng);
    let v = random_collision(d_half * d_half, rng);
    // Gadget on a pair of cells: legs (a0, b0, a1, b1) with dims d_half each;
    // V couples (b0, a1).
    let pair_dims = alloc::vec![d_half; 4];
    let gadget = tensor::op_on_legs(&pair_dims, &[1, 2], &v);
    let site1 = |x: i64| Site(alloc::vec![x]);
    PartitionedCircuit::new(
        1,
        d,
        Neighborhood::line(&[-1, 0, 1])?,
        alloc::vec![
            (alloc::vec![site1(0)], onsite, alloc::vec![1], site1(0)),
            (
                alloc::vec![site1(0), site1(1)],
                gadget.clone(),
                alloc::vec![2],
                site1(0)
            ),
            (
                alloc::vec![site1(0), site1(1)],
                gadget,
                alloc::vec![2],
                site1(1)
            ),
        ],
        &Tolerances::default(),
    )
}
