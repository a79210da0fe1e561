//! Schrödinger-picture dynamics on sparse states.
//!
//! Two families of global evolutions are supported:
//!
//! * **Lattice-gas automata** ([`QlgaModel`]): the cell space factors into
//!   sub-cells indexed by the neighborhood offsets, W = ⊗_{y∈𝒩} V_y; one
//!   step is propagation σ (each y-component of cell x is fetched from cell
//!   x+y) followed by a cell-wise collision unitary F that fixes the
//!   quiescent vector exactly.
//! * **Partitioned circuits** ([`PartitionedCircuit`]): finitely many layers,
//!   each a disjoint periodic tiling of the lattice by a fixed unitary block
//!   that fixes the all-quiescent block state.
//!
//! Both preserve the vacuum exactly, so finite configurations stay finite.
//! Sparse application enforces a term cap ([`DEFAULT_TERM_CAP`]) to keep
//! runaway expansions from exhausting memory — exceeding it is an error, not
//! a truncation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;
use hashbrown::HashMap;
use num_complex::Complex64;

use crate::cmat::CMatrix;
use crate::error::{Error, Result};
use crate::lattice::{Configuration, Neighborhood, PeriodicWindow, Site, SparseState};
use crate::tensor;
use crate::tol::Tolerances;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Default bound on sparse term counts during evolution.
pub const DEFAULT_TERM_CAP: usize = 1_000_000;

/// Largest active-region size handled by the flat collision path; wider
/// (necessarily very sparse) regions fall back to per-term expansion.
const FLAT_REGION_LIMIT: usize = 64;

/// One tensor factor of the cell space, tied to a neighborhood offset.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SubcellFactor {
    /// The neighborhood offset this factor propagates along.
    pub offset: Site,
    /// Dimension of the factor (≥ 1).
    pub dim: usize,
    /// Quiescent index of the factor as declared by the model file; the
    /// in-memory convention requires the combined quiescent index to be 0,
    /// which forces every factor quiescent to be 0.
    pub q: u32,
}

/// A quantum lattice-gas automaton: sub-cell factorization + collision.
#[derive(Clone, Debug)]
pub struct QlgaModel {
    n: usize,
    neighborhood: Neighborhood,
    factors: Vec<SubcellFactor>,
    collision: CMatrix,
    d: usize,
}

impl QlgaModel {
    /// Validate and construct. `factors` must match the neighborhood offsets
    /// one-to-one (any order; both are canonicalized to sorted offset
    /// order). The collision must be unitary (within `tol.algebraic`) and
    /// fix the quiescent basis vector e₀ exactly — a phase-only fixation is
    /// rejected. After validation the quiescent row/column are snapped to
    /// exact (1, 0, …) so that vacuum preservation is bit-exact.
    pub fn new(
        neighborhood: Neighborhood,
        mut factors: Vec<SubcellFactor>,
        collision: CMatrix,
        tol: &Tolerances,
    ) -> Result<Self> {
        let n = neighborhood.n();
        if factors.len() != neighborhood.len() {
            return Err(Error::invalid(
                "need exactly one sub-cell factor per neighborhood offset",
            ));
        }
        factors.sort_by(|a, b| a.offset.cmp(&b.offset));
        for (f, y) in factors.iter().zip(neighborhood.offsets()) {
            if &f.offset != y {
                return Err(Error::invalid(
                    "sub-cell factor offsets do not match the neighborhood",
                ));
            }
            if f.dim == 0 {
                return Err(Error::invalid("sub-cell factor dimension must be ≥ 1"));
            }
        }
        // The combined quiescent index must encode to 0, i.e. every factor
        // quiescent index must be 0 (files with other labels are not
        // remapped, they are rejected).
        if factors.iter().any(|f| f.q != 0) {
            return Err(Error::model(
                "factor quiescent indices must encode to the cell quiescent index 0",
            ));
        }
        let d: usize = factors.iter().map(|f| f.dim).product();
        if d < 2 {
            return Err(Error::invalid("total cell dimension must be ≥ 2"));
        }
        if collision.nrows() != d || collision.ncols() != d {
            return Err(Error::invalid(format!(
                "collision must be {d}x{d}, got {}x{}",
                collision.nrows(),
                collision.ncols()
            )));
        }
        let udef = collision.unitarity_defect();
        if udef > tol.algebraic {
            return Err(Error::model(format!(
                "collision is not unitary (defect {udef:.3e})"
            )));
        }
        // Exact quiescent fixation: F e₀ = e₀ (not merely up to phase).
        let mut qdef: f64 = (collision[(0, 0)] - ONE).norm();
        for i in 1..d {
            qdef = qdef.max(collision[(i, 0)].norm());
        }
        if qdef > tol.algebraic {
            return Err(Error::model(format!(
                "collision does not fix the quiescent state exactly (defect {qdef:.3e})"
            )));
        }
        let mut collision = collision;
        // Snap the quiescent column and row so vacuum preservation is exact.
        for i in 0..d {
            collision[(i, 0)] = ZERO;
            collision[(0, i)] = ZERO;
        }
        collision[(0, 0)] = ONE;
        Ok(QlgaModel {
            n,
            neighborhood,
            factors,
            collision,
            d,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Total cell dimension d = ∏ factor dims.
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn neighborhood(&self) -> &Neighborhood {
        &self.neighborhood
    }

    pub fn factors(&self) -> &[SubcellFactor] {
        &self.factors
    }

    pub fn collision(&self) -> &CMatrix {
        &self.collision
    }

    pub fn factor_dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.dim).collect()
    }

    /// Mixed-radix encoding of per-factor digits into a cell value
    /// (big-endian: the first factor is most significant).
    pub fn encode(&self, digits: &[u32]) -> u32 {
        debug_assert_eq!(digits.len(), self.factors.len());
        let mut v = 0u32;
        for (dg, f) in digits.iter().zip(&self.factors) {
            debug_assert!((*dg as usize) < f.dim);
            v = v * f.dim as u32 + dg;
        }
        v
    }

    /// Inverse of [`QlgaModel::encode`].
    pub fn decode(&self, value: u32) -> Vec<u32> {
        let mut v = value;
        let mut out = alloc::vec![0u32; self.factors.len()];
        for k in (0..self.factors.len()).rev() {
            let dim = self.factors[k].dim as u32;
            out[k] = v % dim;
            v /= dim;
        }
        debug_assert_eq!(v, 0);
        out
    }

    /// Propagation: the y-component of output cell x is the y-component of
    /// input cell x + y. A permutation of configurations — term counts and
    /// amplitudes are untouched.
    pub fn apply_sigma(&self, state: &SparseState) -> Result<SparseState> {
        self.sigma_impl(state, false)
    }

    /// Inverse propagation (components travel the opposite way).
    pub fn apply_sigma_inverse(&self, state: &SparseState) -> Result<SparseState> {
        self.sigma_impl(state, true)
    }

    fn sigma_impl(&self, state: &SparseState, inverse: bool) -> Result<SparseState> {
        self.check_state(state)?;
        let k = self.factors.len();
        let mut out_terms = Vec::with_capacity(state.term_count());
        for (config, amp) in state.terms() {
            // Collect the propagated digits per target site.
            let mut gathered: BTreeMap<Site, Vec<u32>> = BTreeMap::new();
            for (s, v) in config.iter() {
                let digits = self.decode(v);
                for (idx, &dg) in digits.iter().enumerate() {
                    if dg == 0 {
                        continue;
                    }
                    let off = &self.factors[idx].offset;
                    let target = if inverse { s.add(off)? } else { s.sub(off)? };
                    let slot = gathered.entry(target).or_insert_with(|| alloc::vec![0u32; k]);
                    // Each (target, component) pair has a unique source.
                    debug_assert_eq!(slot[idx], 0);
                    slot[idx] = dg;
                }
            }
            let pairs = gathered
                .into_iter()
                .map(|(s, digits)| (s, self.encode(&digits)));
            out_terms.push((Configuration::from_pairs(pairs)?, amp));
        }
        SparseState::from_terms(state.n(), state.d(), out_terms)
    }

    /// Cell-wise collision F̂ = ⊗ F. Exact on amplitudes; enforces the term
    /// cap during expansion.
    pub fn apply_collision(&self, state: &SparseState, cap: usize) -> Result<SparseState> {
        self.collision_impl(state, cap, false)
    }

    /// Cell-wise inverse collision ⊗ F†.
    pub fn apply_collision_inverse(&self, state: &SparseState, cap: usize) -> Result<SparseState> {
        self.collision_impl(state, cap, true)
    }

    fn collision_impl(&self, state: &SparseState, cap: usize, inverse: bool) -> Result<SparseState> {
        self.check_state(state)?;
        let f = if inverse {
            self.collision.adjoint()
        } else {
            self.collision.clone()
        };
        // Compact active regions go through a flat fast path: terms become
        // value vectors over the shared site list, so the expansion avoids
        // per-leaf Configuration clones. Amplitude accumulation order is the
        // same as the generic path, so results are bit-identical.
        let region = Self::active_region(state);
        if region.len() <= FLAT_REGION_LIMIT {
            return self.collision_flat(state, &f, &region, cap);
        }
        let mut out = SparseState::from_terms(state.n(), state.d(), core::iter::empty())?;
        for (config, amp) in state.terms() {
            let sites: Vec<(Site, u32)> = config.iter().map(|(s, v)| (s.clone(), v)).collect();
            let mut work = config.clone();
            self.collide_rec(&f, &sites, 0, &mut work, amp, &mut out, cap)?;
        }
        Ok(out)
    }

    /// Sorted union of all sites touched by any term.
    fn active_region(state: &SparseState) -> Vec<Site> {
        let mut set: BTreeSet<Site> = BTreeSet::new();
        for (config, _) in state.terms() {
            for (s, _) in config.iter() {
                if !set.contains(s) {
                    set.insert(s.clone());
                }
            }
        }
        set.into_iter().collect()
    }

    fn collision_flat(
        &self,
        state: &SparseState,
        f: &CMatrix,
        region: &[Site],
        cap: usize,
    ) -> Result<SparseState> {
        // Nonzero entries per column, in ascending row order. Column 0 is
        // exactly e₀ (the constructor snaps it), so quiescent cells never
        // branch and never rescale the amplitude.
        let cols: Vec<Vec<(u32, Complex64)>> = (0..self.d)
            .map(|c| {
                (0..self.d)
                    .filter_map(|r| {
                        let z = f[(r, c)];
                        if z == ZERO {
                            None
                        } else {
                            Some((r as u32, z))
                        }
                    })
                    .collect()
            })
            .collect();
        let mut acc: HashMap<Vec<u32>, Complex64> =
            HashMap::with_capacity(state.term_count().saturating_mul(2).min(1 << 20));
        let mut vals = alloc::vec![0u32; region.len()];
        for (config, amp) in state.terms() {
            vals.fill(0);
            for (s, v) in config.iter() {
                let idx = region
                    .binary_search(s)
                    .expect("term site outside its own region");
                vals[idx] = v;
            }
            Self::flat_rec(&cols, 0, &mut vals, amp, &mut acc, cap)?;
        }
        let out_terms = acc.into_iter().map(|(vals, a)| {
            let pairs = region
                .iter()
                .zip(vals)
                .filter(|&(_, v)| v != 0)
                .map(|(s, v)| (s.clone(), v));
            (Configuration::from_pairs(pairs).expect("region sites are distinct"), a)
        });
        SparseState::from_terms(state.n(), state.d(), out_terms)
    }

    fn flat_rec(
        cols: &[Vec<(u32, Complex64)>],
        idx: usize,
        vals: &mut Vec<u32>,
        amp: Complex64,
        acc: &mut HashMap<Vec<u32>, Complex64>,
        cap: usize,
    ) -> Result<()> {
        if idx == vals.len() {
            if amp == ZERO {
                return Ok(());
            }
            match acc.entry(vals.clone()) {
                hashbrown::hash_map::Entry::Occupied(mut o) => {
                    let sum = *o.get() + amp;
                    if sum == ZERO {
                        o.remove();
                    } else {
                        *o.get_mut() = sum;
                    }
                }
                hashbrown::hash_map::Entry::Vacant(e) => {
                    e.insert(amp);
                }
            }
            let count = acc.len();
            if count > cap {
                return Err(Error::TermCap { cap, needed: count });
            }
            return Ok(());
        }
        let v = vals[idx];
        if v == 0 {
            return Self::flat_rec(cols, idx + 1, vals, amp, acc, cap);
        }
        for &(r, coeff) in &cols[v as usize] {
            vals[idx] = r;
            Self::flat_rec(cols, idx + 1, vals, amp * coeff, acc, cap)?;
        }
        vals[idx] = v;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn collide_rec(
        &self,
        f: &CMatrix,
        sites: &[(Site, u32)],
        idx: usize,
        work: &mut Configuration,
        amp: Complex64,
        out: &mut SparseState,
        cap: usize,
    ) -> Result<()> {
        if idx == sites.len() {
            out.accumulate(work.clone(), amp);
            let count = out.term_count();
            if count > cap {
                return Err(Error::TermCap { cap, needed: count });
            }
            return Ok(());
        }
        let (site, v) = &sites[idx];
        for r in 0..self.d {
            let coeff = f[(r, *v as usize)];
            if coeff == ZERO {
                continue;
            }
            work.set(site.clone(), r as u32);
            self.collide_rec(f, sites, idx + 1, work, amp * coeff, out, cap)?;
        }
        work.set(site.clone(), *v);
        Ok(())
    }

    /// One full step R = F̂ ∘ σ, pruned at `prune_tol`.
    pub fn step(&self, state: &SparseState, cap: usize, prune_tol: f64) -> Result<SparseState> {
        let moved = self.apply_sigma(state)?;
        Ok(self.apply_collision(&moved, cap)?.prune(prune_tol))
    }

    /// One inverse step R† = σ⁻¹ ∘ F̂†.
    pub fn step_inverse(
        &self,
        state: &SparseState,
        cap: usize,
        prune_tol: f64,
    ) -> Result<SparseState> {
        let collided = self.apply_collision_inverse(state, cap)?;
        Ok(self.apply_sigma_inverse(&collided)?.prune(prune_tol))
    }

    fn check_state(&self, state: &SparseState) -> Result<()> {
        if state.n() != self.n || state.d() != self.d {
            return Err(Error::invalid("state does not match model dimensions"));
        }
        Ok(())
    }

    // ---- periodic-window (wrapped) dense picture ------------------------

    /// The wrapped propagation as a permutation of window basis states:
    /// perm[c] = index of σ_w|c⟩. Cells are the window sites in enumeration
    /// order, each carrying a full cell index 0..d.
    pub fn windowed_sigma_perm(&self, win: &PeriodicWindow) -> Result<Vec<usize>> {
        if win.n() != self.n {
            return Err(Error::invalid("window dimension mismatch"));
        }
        let cells = win.len();
        let dim_total = self.d.checked_pow(cells as u32).ok_or(Error::CoordinateOverflow)?;
        let dims = alloc::vec![self.d; cells];
        let k = self.factors.len();
        // For output cell index i and factor y, the source cell index.
        let mut source = alloc::vec![0usize; cells * k];
        for (i, x) in win.sites().iter().enumerate() {
            for (kk, fac) in self.factors.iter().enumerate() {
                source[i * k + kk] = win.index_of(&x.add(&fac.offset)?);
            }
        }
        let mut perm = alloc::vec![0usize; dim_total];
        let mut digits = alloc::vec![0usize; cells];
        let mut sub = alloc::vec![Vec::<u32>::new(); cells];
        for (c, slot) in perm.iter_mut().enumerate() {
            tensor::decode_index(c, &dims, &mut digits);
            for i in 0..cells {
                sub[i] = self.decode(digits[i] as u32);
            }
            let mut outd = alloc::vec![0usize; cells];
            for i in 0..cells {
                let mut cellsub = alloc::vec![0u32; k];
                for kk in 0..k {
                    cellsub[kk] = sub[source[i * k + kk]][kk];
                }
                outd[i] = self.encode(&cellsub) as usize;
            }
            *slot = tensor::encode_index(&outd, &dims);
        }
        Ok(perm)
    }

    /// Column c of the wrapped one-step unitary F̂ σ_w, written into `out`
    /// (length d^cells). The column is a product state — per-cell collision
    /// columns — so this runs in O(d^cells · cells) without materializing
    /// the operator.
    pub fn windowed_step_column(
        &self,
        win: &PeriodicWindow,
        c: usize,
        out: &mut [Complex64],
    ) -> Result<()> {
        if win.n() != self.n {
            return Err(Error::invalid("window dimension mismatch"));
        }
        let cells = win.len();
        let dims = alloc::vec![self.d; cells];
        let k = self.factors.len();
        let mut digits = alloc::vec![0usize; cells];
        tensor::decode_index(c, &dims, &mut digits);
        let sub: Vec<Vec<u32>> = digits.iter().map(|&v| self.decode(v as u32)).collect();
        // σ_w digits of the permuted basis state.
        let mut moved = alloc::vec![0usize; cells];
        for (i, x) in win.sites().iter().enumerate() {
            let mut cellsub = alloc::vec![0u32; k];
            for (kk, fac) in self.factors.iter().enumerate() {
                cellsub[kk] = sub[win.index_of(&x.add(&fac.offset)?)][kk];
            }
            moved[i] = self.encode(&cellsub) as usize;
        }
        // Tensor product of collision columns F[:, moved[i]].
        assert_eq!(out.len(), dims.iter().product::<usize>());
        out[0] = ONE;
        let mut cur_len = 1usize;
        for &mv in &moved {
            for i in (0..cur_len).rev() {
                let base = out[i];
                for r in (0..self.d).rev() {
                    out[i * self.d + r] = base * self.collision[(r, mv)];
                }
            }
            cur_len *= self.d;
        }
        Ok(())
    }

    /// The full wrapped one-step unitary on a (small) window.
    pub fn windowed_unitary(&self, win: &PeriodicWindow) -> Result<CMatrix> {
        let cells = win.len();
        let dim_total = self
            .d
            .checked_pow(cells as u32)
            .ok_or(Error::CoordinateOverflow)?;
        if dim_total > 1 << 16 {
            return Err(Error::invalid(
                "window space too large to materialize densely",
            ));
        }
        let mut u = CMatrix::zeros(dim_total, dim_total);
        let mut col = alloc::vec![ZERO; dim_total];
        for c in 0..dim_total {
            self.windowed_step_column(win, c, &mut col)?;
            u.set_column(c, &col);
        }
        Ok(u)
    }
}

/// One layer of a partitioned circuit: a block unitary on `shape`, repeated
/// over the lattice with per-axis periods `step`, anchored at `offset`.
#[derive(Clone, Debug)]
pub struct CircuitLayer {
    shape: Vec<Site>,
    block: CMatrix,
    step: Vec<i64>,
    offset: Site,
}

impl CircuitLayer {
    pub fn shape(&self) -> &[Site] {
        &self.shape
    }
    pub fn block(&self) -> &CMatrix {
        &self.block
    }
    pub fn step(&self) -> &[i64] {
        &self.step
    }
    pub fn offset(&self) -> &Site {
        &self.offset
    }
}

/// A finite sequence of disjointly-tiling unitary layers.
#[derive(Clone, Debug)]
pub struct PartitionedCircuit {
    n: usize,
    d: usize,
    neighborhood: Neighborhood,
    layers: Vec<CircuitLayer>,
}

impl PartitionedCircuit {
    /// Validate and construct. Each layer must tile ℤⁿ disjointly: the tile
    /// volume ∏ step must equal |shape| and the shape sites must occupy
    /// pairwise distinct residue classes modulo the step lattice. Each block
    /// must be unitary and fix the all-quiescent block state exactly (then
    /// snapped, as for collisions). The declared neighborhood is the causal
    /// bound the circuit claims; checkers verify, they do not trust it.
    pub fn new(
        n: usize,
        d: usize,
        neighborhood: Neighborhood,
        layers: Vec<(Vec<Site>, CMatrix, Vec<i64>, Site)>,
        tol: &Tolerances,
    ) -> Result<Self> {
        if d < 2 {
            return Err(Error::invalid("cell dimension must be ≥ 2"));
        }
        if neighborhood.n() != n {
            return Err(Error::invalid("neighborhood dimension mismatch"));
        }
        if layers.is_empty() {
            return Err(Error::invalid("circuit needs at least one layer"));
        }
        let mut out_layers = Vec::with_capacity(layers.len());
        for (li, (mut shape, block, step, offset)) in layers.into_iter().enumerate() {
            if step.len() != n || offset.n() != n {
                return Err(Error::invalid(format!(
                    "layer {li}: step/offset dimension mismatch"
                )));
            }
            if step.iter().any(|&s| s < 1) {
                return Err(Error::invalid(format!("layer {li}: steps must be ≥ 1")));
            }
            shape.sort();
            if shape.is_empty() || shape.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid(format!(
                    "layer {li}: shape must be nonempty and duplicate-free"
                )));
            }
            if shape.iter().any(|s| s.n() != n) {
                return Err(Error::invalid(format!(
                    "layer {li}: shape site dimension mismatch"
                )));
            }
            let volume: i64 = step.iter().product();
            if volume as usize != shape.len() {
                return Err(Error::model(format!(
                    "layer {li}: tile volume {volume} does not match shape size {}",
                    shape.len()
                )));
            }
            // Distinct residues mod the step lattice ⇒ disjoint cover.
            let mut residues: Vec<Vec<i64>> = shape
                .iter()
                .map(|s| {
                    s.0.iter()
                        .zip(&step)
                        .map(|(&x, &st)| x.rem_euclid(st))
                        .collect()
                })
                .collect();
            residues.sort();
            if residues.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::model(format!(
                    "layer {li}: shape sites collide modulo the step lattice"
                )));
            }
            let dim = d.pow(shape.len() as u32);
            if block.nrows() != dim || block.ncols() != dim {
                return Err(Error::invalid(format!(
                    "layer {li}: block must be {dim}x{dim}"
                )));
            }
            let udef = block.unitarity_defect();
            if udef > tol.algebraic {
                return Err(Error::model(format!(
                    "layer {li}: block is not unitary (defect {udef:.3e})"
                )));
            }
            let mut qdef = (block[(0, 0)] - ONE).norm();
            for i in 1..dim {
                qdef = qdef.max(block[(i, 0)].norm());
            }
            if qdef > tol.algebraic {
                return Err(Error::model(format!(
                    "layer {li}: block does not fix the quiescent block state (defect {qdef:.3e})"
                )));
            }
            let mut block = block;
            for i in 0..dim {
                block[(i, 0)] = ZERO;
                block[(0, i)] = ZERO;
            }
            block[(0, 0)] = ONE;
            out_layers.push(CircuitLayer {
                shape,
                block,
                step,
                offset,
            });
        }
        Ok(PartitionedCircuit {
            n,
            d,
            neighborhood,
            layers: out_layers,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn neighborhood(&self) -> &Neighborhood {
        &self.neighborhood
    }
    pub fn layers(&self) -> &[CircuitLayer] {
        &self.layers
    }

    /// Anchor of the (unique) tile of `layer` containing `site`.
    fn anchor_of(&self, layer: &CircuitLayer, site: &Site) -> Result<Site> {
        // t ≡ (site − offset) mod step picks the shape site; anchor = site − t.
        let rel = site.sub(&layer.offset)?;
        let res: Vec<i64> = rel
            .0
            .iter()
            .zip(&layer.step)
            .map(|(&x, &st)| x.rem_euclid(st))
            .collect();
        for t in &layer.shape {
            let tres: Vec<i64> = t
                .0
                .iter()
                .zip(&layer.step)
                .map(|(&x, &st)| x.rem_euclid(st))
                .collect();
            if tres == res {
                return site.sub(t);
            }
        }
        // Unreachable for validated layers (complete residue system).
        Err(Error::model("tile lookup failed: incomplete residue system"))
    }

    fn apply_layer(
        &self,
        layer: &CircuitLayer,
        adjoint: bool,
        state: &SparseState,
        cap: usize,
    ) -> Result<SparseState> {
        let block = if adjoint {
            layer.block.adjoint()
        } else {
            layer.block.clone()
        };
        let shape_dims = alloc::vec![self.d; layer.shape.len()];
        let blockdim = block.nrows();
        let mut out = SparseState::from_terms(state.n(), state.d(), core::iter::empty())?;
        for (config, amp) in state.terms() {
            // Anchors of tiles meeting this configuration's support. A tile
            // application only activates sites inside the tile, and tiles of
            // one layer are disjoint, so this list is complete.
            let mut anchors: Vec<Site> = Vec::new();
            for (s, _) in config.iter() {
                let a = self.anchor_of(layer, s)?;
                if !anchors.contains(&a) {
                    anchors.push(a);
                }
            }
            anchors.sort();
            let mut work = config.clone();
            self.layer_rec(
                layer,
                &block,
                &shape_dims,
                blockdim,
                &anchors,
                0,
                &mut work,
                amp,
                &mut out,
                cap,
            )?;
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_rec(
        &self,
        layer: &CircuitLayer,
        block: &CMatrix,
        shape_dims: &[usize],
        blockdim: usize,
        anchors: &[Site],
        idx: usize,
        work: &mut Configuration,
        amp: Complex64,
        out: &mut SparseState,
        cap: usize,
    ) -> Result<()> {
        if idx == anchors.len() {
            out.accumulate(work.clone(), amp);
            let count = out.term_count();
            if count > cap {
                return Err(Error::TermCap { cap, needed: count });
            }
            return Ok(());
        }
        let anchor = &anchors[idx];
        let tile_sites: Vec<Site> = layer
            .shape
            .iter()
            .map(|t| anchor.add(t))
            .collect::<Result<_>>()?;
        let mut digits = alloc::vec![0usize; tile_sites.len()];
        for (k, s) in tile_sites.iter().enumerate() {
            digits[k] = work.value_at(s) as usize;
        }
        let col = tensor::encode_index(&digits, shape_dims);
        let saved = digits.clone();
        for r in 0..blockdim {
            let coeff = block[(r, col)];
            if coeff == ZERO {
                continue;
            }
            tensor::decode_index(r, shape_dims, &mut digits);
            for (k, s) in tile_sites.iter().enumerate() {
                work.set(s.clone(), digits[k] as u32);
            }
            self.layer_rec(
                layer, block, shape_dims, blockdim, anchors, idx + 1, work, amp * coeff, out, cap,
            )?;
        }
        for (k, s) in tile_sites.iter().enumerate() {
            work.set(s.clone(), saved[k] as u32);
        }
        Ok(())
    }

    /// Apply one full circuit step (all layers in order).
    pub fn apply(&self, state: &SparseState, cap: usize, prune_tol: f64) -> Result<SparseState> {
        if state.n() != self.n || state.d() != self.d {
            return Err(Error::invalid("state does not match circuit dimensions"));
        }
        let mut cur = state.clone();
        for layer in &self.layers {
            cur = self.apply_layer(layer, false, &cur, cap)?;
        }
        Ok(cur.prune(prune_tol))
    }

    /// Apply the inverse step (adjoint layers, reversed order).
    pub fn apply_inverse(
        &self,
        state: &SparseState,
        cap: usize,
        prune_tol: f64,
    ) -> Result<SparseState> {
        if state.n() != self.n || state.d() != self.d {
            return Err(Error::invalid("state does not match circuit dimensions"));
        }
        let mut cur = state.clone();
        for layer in self.layers.iter().rev() {
            cur = self.apply_layer(layer, true, &cur, cap)?;
        }
        Ok(cur.prune(prune_tol))
    }

    // ---- dense finite-hull picture (used for rule extraction) -----------

    /// Compute, for an application in the given direction seeded on `seed`
    /// sites, the per-layer tile anchors that can touch the reachable
    /// support, plus every site those tiles cover. Quiescent-preserving
    /// blocks act as the identity on untouched tiles, so this schedule is
    /// exhaustive for states supported in `seed`.
    pub fn schedule(&self, seed: &[Site], forward: bool) -> Result<DenseSchedule> {
        let mut reach: Vec<Site> = seed.to_vec();
        reach.sort();
        reach.dedup();
        let mut all_sites = reach.clone();
        let mut per_layer: Vec<Vec<Site>> = Vec::with_capacity(self.layers.len());
        let layer_order: Vec<&CircuitLayer> = if forward {
            self.layers.iter().collect()
        } else {
            self.layers.iter().rev().collect()
        };
        for layer in layer_order {
            let mut anchors: Vec<Site> = Vec::new();
            for s in &reach {
                let a = self.anchor_of(layer, s)?;
                if !anchors.contains(&a) {
                    anchors.push(a);
                }
            }
            anchors.sort();
            // Reachable set grows to cover the touched tiles entirely.
            for a in &anchors {
                for t in &layer.shape {
                    let site = a.add(t)?;
                    if let Err(pos) = reach.binary_search(&site) {
                        reach.insert(pos, site.clone());
                    }
                    if let Err(pos) = all_sites.binary_search(&site) {
                        all_sites.insert(pos, site);
                    }
                }
            }
            per_layer.push(anchors);
        }
        Ok(DenseSchedule {
            forward,
            sites: all_sites,
            per_layer,
        })
    }

    /// Apply the scheduled tiles to a dense vector over `window` (sorted
    /// sites, one d-dimensional leg each). The window must contain every
    /// scheduled tile.
    pub fn apply_schedule_dense(
        &self,
        sched: &DenseSchedule,
        window: &[Site],
        v: &mut [Complex64],
    ) -> Result<()> {
        let dims = alloc::vec![self.d; window.len()];
        let layer_order: Vec<&CircuitLayer> = if sched.forward {
            self.layers.iter().collect()
        } else {
            self.layers.iter().rev().collect()
        };
        for (layer, anchors) in layer_order.into_iter().zip(&sched.per_layer) {
            let block = if sched.forward {
                layer.block.clone()
            } else {
                layer.block.adjoint()
            };
            for a in anchors {
                let mut legs = Vec::with_capacity(layer.shape.len());
                for t in &layer.shape {
                    let site = a.add(t)?;
                    let leg = window
                        .binary_search(&site)
                        .map_err(|_| Error::invalid("window does not contain scheduled tile"))?;
                    legs.push(leg);
                }
                tensor::apply_op_to_vec(&dims, &legs, &block, v);
            }
        }
        Ok(())
    }
}

/// Tile schedule for dense finite-window application of a circuit.
#[derive(Clone, Debug)]
pub struct DenseSchedule {
    forward: bool,
    sites: Vec<Site>,
    per_layer: Vec<Vec<Site>>,
}

impl DenseSchedule {
    /// Every site covered by the scheduled tiles (plus the seed), sorted.
    pub fn sites(&self) -> &[Site] {
        &self.sites
    }
    pub fn is_forward(&self) -> bool {
        self.forward
    }
}

/// A global evolution: a QLGA step or a circuit step, together with a global
/// phase. The phase matters for state evolution but cancels in every
/// conjugation (the Heisenberg rule only sees the phase class [R]).
#[derive(Clone, Debug)]
pub enum EvolutionKind {
    Qlga(QlgaModel),
    Circuit(PartitionedCircuit),
}

#[derive(Clone, Debug)]
pub struct EvolutionHandle {
    kind: EvolutionKind,
    phase: Complex64,
}

impl EvolutionHandle {
    pub fn from_qlga(model: QlgaModel) -> Self {
        EvolutionHandle {
            kind: EvolutionKind::Qlga(model),
            phase: ONE,
        }
    }

    pub fn from_circuit(circuit: PartitionedCircuit) -> Self {
        EvolutionHandle {
            kind: EvolutionKind::Circuit(circuit),
            phase: ONE,
        }
    }

    /// Same evolution multiplied by the global phase e^{iθ}.
    pub fn with_phase(mut self, theta: f64) -> Self {
        self.phase = self.phase * Complex64::from_polar(1.0, theta);
        self
    }

    pub fn kind(&self) -> &EvolutionKind {
        &self.kind
    }

    pub fn phase(&self) -> Complex64 {
        self.phase
    }

    pub fn n(&self) -> usize {
        match &self.kind {
            EvolutionKind::Qlga(m) => m.n(),
            EvolutionKind::Circuit(c) => c.n(),
        }
    }

    pub fn d(&self) -> usize {
        match &self.kind {
            EvolutionKind::Qlga(m) => m.d(),
            EvolutionKind::Circuit(c) => c.d(),
        }
    }

    pub fn neighborhood(&self) -> &Neighborhood {
        match &self.kind {
            EvolutionKind::Qlga(m) => m.neighborhood(),
            EvolutionKind::Circuit(c) => c.neighborhood(),
        }
    }

    /// One step, including the global phase.
    pub fn apply(&self, state: &SparseState, cap: usize, prune_tol: f64) -> Result<SparseState> {
        let out = match &self.kind {
            EvolutionKind::Qlga(m) => m.step(state, cap, prune_tol)?,
            EvolutionKind::Circuit(c) => c.apply(state, cap, prune_tol)?,
        };
        Ok(out.scale(self.phase))
    }

    /// One inverse step, including the conjugate phase.
    pub fn apply_inverse(
        &self,
        state: &SparseState,
        cap: usize,
        prune_tol: f64,
    ) -> Result<SparseState> {
        let out = match &self.kind {
            EvolutionKind::Qlga(m) => m.step_inverse(state, cap, prune_tol)?,
            EvolutionKind::Circuit(c) => c.apply_inverse(state, cap, prune_tol)?,
        };
        Ok(out.scale(self.phase.conj()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use alloc::vec;

    fn site1(x: i64) -> Site {
        Site(vec![x])
    }

    fn c64(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// dims (2,2) lattice gas on 𝒩 = {0,1} with the given collision.
    fn qlga22(collision: CMatrix) -> QlgaModel {
        let nb = Neighborhood::line(&[0, 1]).unwrap();
        let factors = vec![
            SubcellFactor {
                offset: site1(0),
                dim: 2,
                q: 0,
            },
            SubcellFactor {
                offset: site1(1),
                dim: 2,
                q: 0,
            },
        ];
        QlgaModel::new(nb, factors, collision, &Tolerances::default()).unwrap()
    }

    fn swap_collision() -> CMatrix {
        // Swap the two qubit factors: basis (v0 v1) -> (v1 v0).
        let mut f = CMatrix::zeros(4, 4);
        f[(0, 0)] = c64(1.0, 0.0);
        f[(1, 2)] = c64(1.0, 0.0);
        f[(2, 1)] = c64(1.0, 0.0);
        f[(3, 3)] = c64(1.0, 0.0);
        f
    }

    #[test]
    fn encode_decode_mixed_radix() {
        let m = qlga22(CMatrix::identity(4));
        assert_eq!(m.encode(&[0, 1]), 1);
        assert_eq!(m.encode(&[1, 0]), 2);
        assert_eq!(m.encode(&[1, 1]), 3);
        assert_eq!(m.decode(2), vec![1, 0]);
        // Mixed dims (2,3): encode is big-endian.
        let nb = Neighborhood::line(&[0, 1]).unwrap();
        let factors = vec![
            SubcellFactor {
                offset: site1(0),
                dim: 2,
                q: 0,
            },
            SubcellFactor {
                offset: site1(1),
                dim: 3,
                q: 0,
            },
        ];
        let m23 = QlgaModel::new(nb, factors, CMatrix::identity(6), &Tolerances::default())
            .unwrap();
        assert_eq!(m23.encode(&[1, 0]), 3);
        assert_eq!(m23.encode(&[1, 2]), 5);
        assert_eq!(m23.decode(4), vec![1, 1]);
    }

    #[test]
    fn sigma_moves_components_against_their_offset() {
        let m = qlga22(CMatrix::identity(4));
        // Component of offset 1 at site 0 moves to site −1.
        let c = Configuration::from_pairs(vec![(site1(0), m.encode(&[0, 1]))]).unwrap();
        let st = SparseState::basis(1, 4, c).unwrap();
        let out = m.apply_sigma(&st).unwrap();
        let want = Configuration::from_pairs(vec![(site1(-1), m.encode(&[0, 1]))]).unwrap();
        assert_eq!(out.amplitude(&want), c64(1.0, 0.0));
        assert_eq!(out.term_count(), 1);
        // Mixed value splits across sites: (1,1) at 0 → (1,0) at 0, (0,1) at −1.
        let c2 = Configuration::from_pairs(vec![(site1(0), m.encode(&[1, 1]))]).unwrap();
        let st2 = SparseState::basis(1, 4, c2.clone()).unwrap();
        let out2 = m.apply_sigma(&st2).unwrap();
        let want2 = Configuration::from_pairs(vec![
            (site1(0), m.encode(&[1, 0])),
            (site1(-1), m.encode(&[0, 1])),
        ])
        .unwrap();
        assert_eq!(out2.amplitude(&want2), c64(1.0, 0.0));
        assert_eq!(out2.term_count(), 1);
        // σ⁻¹ undoes it.
        let back = m.apply_sigma_inverse(&out2).unwrap();
        assert_eq!(back.amplitude(&c2), c64(1.0, 0.0));
    }

    #[test]
    fn swap_step_spec_example() {
        let m = qlga22(swap_collision());
        // One step of |{0 ↦ (1,0)}⟩: σ keeps the stationary component at 0,
        // SWAP turns it into (0,1).
        let c = Configuration::from_pairs(vec![(site1(0), m.encode(&[1, 0]))]).unwrap();
        let st = SparseState::basis(1, 4, c).unwrap();
        let out = m.step(&st, DEFAULT_TERM_CAP, 0.0).unwrap();
        let want = Configuration::from_pairs(vec![(site1(0), m.encode(&[0, 1]))]).unwrap();
        assert_eq!(out.amplitude(&want), c64(1.0, 0.0));
        assert_eq!(out.term_count(), 1);
    }

    #[test]
    fn swap_particle_translates_one_site_every_two_steps() {
        let m = qlga22(swap_collision());
        let c = Configuration::from_pairs(vec![(site1(0), m.encode(&[0, 1]))]).unwrap();
        let mut st = SparseState::basis(1, 4, c).unwrap();
        let mut positions = Vec::new();
        for _ in 0..6 {
            st = m.step(&st, DEFAULT_TERM_CAP, 0.0).unwrap();
            assert_eq!(st.term_count(), 1);
            positions.push(st.support()[0].0[0]);
        }
        // Alternates moving/stationary: half-speed drift toward −∞.
        assert_eq!(positions, vec![-1, -1, -2, -2, -3, -3]);
    }

    #[test]
    fn vacuum_is_fixed_exactly() {
        let mut rng = SeededRng::new(42);
        let f = crate::samples::random_collision(4, &mut rng);
        let m = qlga22(f);
        let vac = SparseState::vacuum(1, 4);
        let out = m.step(&vac, DEFAULT_TERM_CAP, 0.0).unwrap();
        assert_eq!(out, vac);
    }

    #[test]
    fn step_is_unitary_and_invertible() {
        let mut rng = SeededRng::new(7);
        let f = crate::samples::random_collision(4, &mut rng);
        let m = qlga22(f);
        // Random state on a few sites.
        let mut terms = Vec::new();
        for _ in 0..5 {
            let s = rng.below(4) as i64 - 2;
            let v = 1 + rng.below(3) as u32;
            let cfg = Configuration::from_pairs(vec![(site1(s), v)]).unwrap();
            terms.push((cfg, rng.cnormal()));
        }
        let st = SparseState::from_terms(1, 4, terms).unwrap().normalize().unwrap();
        let fwd = m.step(&st, DEFAULT_TERM_CAP, 0.0).unwrap();
        assert!((fwd.norm() - 1.0).abs() < 1e-12);
        let back = m.step_inverse(&fwd, DEFAULT_TERM_CAP, 0.0).unwrap();
        let diff = back.sub(&st).unwrap().norm();
        assert!(diff < 1e-12, "roundtrip diff {diff}");
    }

    #[test]
    fn step_commutes_with_translation() {
        let mut rng = SeededRng::new(19);
        let f = crate::samples::random_collision(4, &mut rng);
        let m = qlga22(f);
        let cfg = Configuration::from_pairs(vec![(site1(0), 3), (site1(1), 2)]).unwrap();
        let st = SparseState::basis(1, 4, cfg).unwrap();
        let z = site1(5);
        let a = m
            .step(&st.translate(&z).unwrap(), DEFAULT_TERM_CAP, 0.0)
            .unwrap();
        let b = m
            .step(&st, DEFAULT_TERM_CAP, 0.0)
            .unwrap()
            .translate(&z)
            .unwrap();
        assert!(a.sub(&b).unwrap().norm() < 1e-13);
    }

    #[test]
    fn term_cap_is_enforced() {
        let mut rng = SeededRng::new(3);
        let f = crate::samples::random_collision(4, &mut rng);
        let m = qlga22(f);
        let cfg = Configuration::from_pairs(vec![
            (site1(0), 1),
            (site1(1), 2),
            (site1(2), 3),
        ])
        .unwrap();
        let st = SparseState::basis(1, 4, cfg).unwrap();
        let err = m.step(&st, 5, 0.0).unwrap_err();
        match err {
            Error::TermCap { cap, .. } => assert_eq!(cap, 5),
            other => panic!("expected TermCap, got {other:?}"),
        }
    }

    #[test]
    fn windowed_column_matches_perm_plus_collision() {
        let mut rng = SeededRng::new(11);
        let f = crate::samples::random_collision(4, &mut rng);
        let m = qlga22(f.clone());
        let win = PeriodicWindow::new(vec![3]).unwrap();
        let dim = 4usize.pow(3);
        let perm = m.windowed_sigma_perm(&win).unwrap();
        let dims = vec![4usize; 3];
        let mut col = vec![ZERO; dim];
        for c in [0usize, 5, 17, 63, 38] {
            m.windowed_step_column(&win, c, &mut col).unwrap();
            // Oracle: basis vector, permute, then apply F per cell densely.
            let mut v = vec![ZERO; dim];
            v[perm[c]] = c64(1.0, 0.0);
            for leg in 0..3 {
                tensor::apply_op_to_vec(&dims, &[leg], &f, &mut v);
            }
            for i in 0..dim {
                assert!((v[i] - col[i]).norm() < 1e-13);
            }
        }
        // The wrapped unitary is unitary.
        let u = m.windowed_unitary(&win).unwrap();
        assert!(u.unitarity_defect() < 1e-12);
    }

    fn two_layer_brickwork(d: usize, seed: u64) -> PartitionedCircuit {
        let mut rng = SeededRng::new(seed);
        let b0 = crate::samples::random_collision(d * d, &mut rng);
        let b1 = crate::samples::random_collision(d * d, &mut rng);
        PartitionedCircuit::new(
            1,
            d,
            Neighborhood::line(&[-1, 0, 1]).unwrap(),
            vec![
                (vec![site1(0), site1(1)], b0, vec![2], site1(0)),
                (vec![site1(0), site1(1)], b1, vec![2], site1(1)),
            ],
            &Tolerances::default(),
        )
        .unwrap()
    }

    #[test]
    fn circuit_apply_matches_dense_window() {
        let circ = two_layer_brickwork(2, 21);
        let mut rng = SeededRng::new(22);
        // A state on sites {0,1,2}; one circuit step spreads at most one
        // tile beyond, well inside the window {-2..4}.
        let mut terms = Vec::new();
        for _ in 0..4 {
            let cfg = Configuration::from_pairs(vec![
                (site1(rng.below(3) as i64), 1),
                (site1(3), rng.below(2) as u32),
            ])
            .unwrap();
            terms.push((cfg, rng.cnormal()));
        }
        let st = SparseState::from_terms(1, 2, terms).unwrap().normalize().unwrap();
        let out = circ.apply(&st, DEFAULT_TERM_CAP, 0.0).unwrap();

        // Dense oracle on the forward schedule window.
        let seed_sites: Vec<Site> = st.support();
        let sched = circ.schedule(&seed_sites, true).unwrap();
        let window = sched.sites().to_vec();
        let dims = vec![2usize; window.len()];
        let dim = 1usize << window.len();
        let mut v = vec![ZERO; dim];
        let mut digits = vec![0usize; window.len()];
        for (cfg, amp) in st.terms() {
            for (k, s) in window.iter().enumerate() {
                digits[k] = cfg.value_at(s) as usize;
            }
            v[tensor::encode_index(&digits, &dims)] += amp;
        }
        circ.apply_schedule_dense(&sched, &window, &mut v).unwrap();
        for (idx, amp) in v.iter().enumerate() {
            tensor::decode_index(idx, &dims, &mut digits);
            let cfg = Configuration::from_pairs(
                window
                    .iter()
                    .cloned()
                    .zip(digits.iter().map(|&x| x as u32)),
            )
            .unwrap();
            assert!(
                (out.amplitude(&cfg) - amp).norm() < 1e-12,
                "mismatch at dense index {idx}"
            );
        }
    }

    #[test]
    fn circuit_inverse_roundtrip() {
        let circ = two_layer_brickwork(2, 31);
        let cfg = Configuration::from_pairs(vec![(site1(0), 1), (site1(2), 1)]).unwrap();
        let st = SparseState::basis(1, 2, cfg).unwrap();
        let fwd = circ.apply(&st, DEFAULT_TERM_CAP, 0.0).unwrap();
        assert!((fwd.norm() - 1.0).abs() < 1e-12);
        let back = circ.apply_inverse(&fwd, DEFAULT_TERM_CAP, 0.0).unwrap();
        assert!(back.sub(&st).unwrap().norm() < 1e-12);
    }

    #[test]
    fn circuit_tiling_validation() {
        let t = Tolerances::default();
        let nb = Neighborhood::line(&[0, 1]).unwrap();
        // Volume mismatch: shape of 2 with step 3.
        let b = crate::samples::random_collision(4, &mut SeededRng::new(1));
        let r = PartitionedCircuit::new(
            1,
            2,
            nb.clone(),
            vec![(vec![site1(0), site1(1)], b.clone(), vec![3], site1(0))],
            &t,
        );
        assert!(r.is_err());
        // Residue collision: sites 0 and 2 with step 2.
        let r2 = PartitionedCircuit::new(
            1,
            2,
            nb,
            vec![(vec![site1(0), site1(2)], b, vec![2], site1(0))],
            &t,
        );
        assert!(r2.is_err());
    }

    #[test]
    fn phase_wrapper_scales_states_only() {
        let m = qlga22(swap_collision());
        let handle = EvolutionHandle::from_qlga(m.clone());
        let theta = 0.7;
        let phased = handle.clone().with_phase(theta);
        let cfg = Configuration::from_pairs(vec![(site1(0), 2)]).unwrap();
        let st = SparseState::basis(1, 4, cfg).unwrap();
        let a = handle.apply(&st, DEFAULT_TERM_CAP, 0.0).unwrap();
        let b = phased.apply(&st, DEFAULT_TERM_CAP, 0.0).unwrap();
        let expected = a.scale(Complex64::from_polar(1.0, theta));
        assert!(b.sub(&expected).unwrap().norm() < 1e-14);
        // Inverse uses the conjugate phase: roundtrip is exact.
        let rt = phased
            .apply_inverse(&b, DEFAULT_TERM_CAP, 0.0)
            .unwrap();
        assert!(rt.sub(&st).unwrap().norm() < 1e-13);
    }

    #[test]
    fn collision_must_fix_quiescent_exactly() {
        let nb = Neighborhood::line(&[0, 1]).unwrap();
        let factors = vec![
            SubcellFactor {
                offset: site1(0),
                dim: 2,
                q: 0,
            },
            SubcellFactor {
                offset: site1(1),
                dim: 2,
                q: 0,
            },
        ];
        // Phase-only fixation must be rejected.
        let mut f = CMatrix::identity(4);
        f[(0, 0)] = Complex64::from_polar(1.0, 0.3);
        let r = QlgaModel::new(nb, factors, f, &Tolerances::default());
        assert!(r.is_err());
    }
}
