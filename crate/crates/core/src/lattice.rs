//! Lattice geometry and finitely-supported quantum states.
//!
//! Cells live on ℤⁿ. A classical configuration assigns a cell value to every
//! site, all but finitely many being the quiescent value; the quiescent index
//! is 0 in memory (model files may label it differently, the loaders
//! normalize). States are finite complex combinations of configurations,
//! stored sparsely with deterministic (lexicographic) ordering.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;
use num_complex::Complex64;

// Required for f64 math in no_std builds; redundant (and reported unused)
// whenever a dependency links std and the inherent methods take over.
#[allow(unused_imports)]
use num_traits::Float;
use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// A lattice site: a point of ℤⁿ. Ordering is lexicographic, which fixes the
/// deterministic ordering of supports, configurations and state terms.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Site(pub Vec<i64>);

impl core::fmt::Debug for Site {
    /// Prints as e.g. `(1,-2)` instead of `Site([1, -2])`.
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "(")?;
        for (k, x) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{x}")?;
        }
        write!(f, ")")
    }
}

impl Site {
    pub fn new(coords: Vec<i64>) -> Self {
        Site(coords)
    }

    /// Dimension n of the lattice this site lives on.
    pub fn n(&self) -> usize {
        self.0.len()
    }

    /// Checked coordinate-wise sum.
    pub fn add(&self, other: &Site) -> Result<Site> {
        debug_assert_eq!(self.n(), other.n());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a.checked_add(*b).ok_or(Error::CoordinateOverflow))
            .collect::<Result<Vec<i64>>>()
            .map(Site)
    }

    /// Checked coordinate-wise difference.
    pub fn sub(&self, other: &Site) -> Result<Site> {
        debug_assert_eq!(self.n(), other.n());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a.checked_sub(*b).ok_or(Error::CoordinateOverflow))
            .collect::<Result<Vec<i64>>>()
            .map(Site)
    }

    pub fn neg(&self) -> Result<Site> {
        self.0
            .iter()
            .map(|a| a.checked_neg().ok_or(Error::CoordinateOverflow))
            .collect::<Result<Vec<i64>>>()
            .map(Site)
    }

    pub fn origin(n: usize) -> Site {
        Site(alloc::vec![0i64; n])
    }
}

/// A finite, nonempty set of offsets in ℤⁿ, stored sorted lexicographically
/// with no duplicates.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Neighborhood {
    n: usize,
    offsets: Vec<Site>,
}

impl Neighborhood {
    /// Canonicalizes (sorts) the offsets; rejects empties, duplicates and
    /// mixed dimensions.
    pub fn new(mut offsets: Vec<Site>) -> Result<Self> {
        let n = match offsets.first() {
            Some(s) => s.n(),
            None => return Err(Error::invalid("neighborhood must be nonempty")),
        };
        if offsets.iter().any(|s| s.n() != n) {
            return Err(Error::invalid("neighborhood offsets have mixed dimensions"));
        }
        offsets.sort();
        if offsets.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("neighborhood offsets must be distinct"));
        }
        Ok(Neighborhood { n, offsets })
    }

    /// 1-D convenience constructor.
    pub fn line(offsets: &[i64]) -> Result<Self> {
        Neighborhood::new(offsets.iter().map(|&x| Site(alloc::vec![x])).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        false // by construction
    }

    pub fn offsets(&self) -> &[Site] {
        &self.offsets
    }

    pub fn index_of(&self, s: &Site) -> Option<usize> {
        self.offsets.binary_search(s).ok()
    }

    /// The translated site set 𝒩_z = {z + y : y ∈ 𝒩}, sorted.
    pub fn sites_at(&self, z: &Site) -> Result<Vec<Site>> {
        // Translation preserves lexicographic order, so the result is sorted.
        self.offsets.iter().map(|y| z.add(y)).collect()
    }

    /// The reflected set −𝒩 (as a neighborhood). The dual neighborhood of a
    /// structurally reversible automaton: inverse images localize on
    /// 𝒱_z = z − 𝒩.
    pub fn reflected(&self) -> Result<Neighborhood> {
        Neighborhood::new(
            self.offsets
                .iter()
                .map(|s| s.neg())
                .collect::<Result<Vec<Site>>>()?,
        )
    }
}

/// The cell Hilbert space: dimension d with quiescent basis index 0.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CellSpace {
    dim: usize,
}

impl CellSpace {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("cell dimension must be ≥ 1"));
        }
        Ok(CellSpace { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The quiescent basis index; fixed to 0 in memory.
    pub fn quiescent(&self) -> u32 {
        0
    }
}

/// A finite configuration: finitely many sites carry a non-quiescent value
/// (1..d-1); everything else is quiescent. Quiescent values are never stored.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug, Default)]
pub struct Configuration {
    values: BTreeMap<Site, u32>,
}

impl Configuration {
    /// The all-quiescent configuration.
    pub fn vacuum() -> Self {
        Configuration::default()
    }

    /// Build from (site, value) pairs; zero values are dropped, duplicate
    /// sites rejected.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Site, u32)>) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (s, v) in pairs {
            if v == 0 {
                continue;
            }
            if values.insert(s, v).is_some() {
                return Err(Error::invalid("duplicate site in configuration"));
            }
        }
        Ok(Configuration { values })
    }

    pub fn value_at(&self, s: &Site) -> u32 {
        self.values.get(s).copied().unwrap_or(0)
    }

    /// Replace the value at a site (0 erases).
    pub fn set(&mut self, s: Site, v: u32) {
        if v == 0 {
            self.values.remove(&s);
        } else {
            self.values.insert(s, v);
        }
    }

    pub fn support(&self) -> impl Iterator<Item = &Site> {
        self.values.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Site, u32)> {
        self.values.iter().map(|(s, &v)| (s, v))
    }

    pub fn active_len(&self) -> usize {
        self.values.len()
    }

    pub fn is_vacuum(&self) -> bool {
        self.values.is_empty()
    }

    /// Shift every site by +z.
    pub fn translate(&self, z: &Site) -> Result<Configuration> {
        let values = self
            .values
            .iter()
            .map(|(s, &v)| Ok((s.add(z)?, v)))
            .collect::<Result<BTreeMap<Site, u32>>>()?;
        Ok(Configuration { values })
    }
}

/// A finite box {0..e₁-1} × … × {0..eₙ-1} of ℤⁿ with periodic (wrap-around)
/// identification, used for windowed evolution operators and intertwiners.
/// Sites are enumerated in lexicographic order.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PeriodicWindow {
    extents: Vec<usize>,
    sites: Vec<Site>,
}

impl PeriodicWindow {
    pub fn new(extents: Vec<usize>) -> Result<Self> {
        if extents.is_empty() || extents.iter().any(|&e| e == 0) {
            return Err(Error::invalid("window extents must be positive"));
        }
        let count: usize = extents.iter().product();
        let n = extents.len();
        let mut sites = Vec::with_capacity(count);
        let mut digits = alloc::vec![0usize; n];
        for _ in 0..count {
            sites.push(Site(digits.iter().map(|&x| x as i64).collect()));
            // Odometer increment, most significant digit first.
            for k in (0..n).rev() {
                digits[k] += 1;
                if digits[k] < extents[k] {
                    break;
                }
                digits[k] = 0;
            }
        }
        // Lexicographic enumeration above is already sorted.
        Ok(PeriodicWindow { extents, sites })
    }

    pub fn n(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    /// Number of cells in the window.
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are positive
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    /// Reduce an arbitrary site modulo the extents.
    pub fn wrap(&self, s: &Site) -> Site {
        Site(
            s.0.iter()
                .zip(&self.extents)
                .map(|(&x, &e)| x.rem_euclid(e as i64))
                .collect(),
        )
    }

    /// Index of a site (after wrapping) in the enumeration order.
    pub fn index_of(&self, s: &Site) -> usize {
        let w = self.wrap(s);
        let mut idx = 0usize;
        for (x, &e) in w.0.iter().zip(&self.extents) {
            idx = idx * e + *x as usize;
        }
        idx
    }
}

/// A finitely-supported state vector: a sparse complex combination of
/// configurations over a fixed lattice dimension n and cell dimension d.
#[derive(Clone, PartialEq, Debug)]
pub struct SparseState {
    n: usize,
    d: usize,
    terms: BTreeMap<Configuration, Complex64>,
}

impl SparseState {
    /// The vacuum state |quiescent everywhere⟩.
    pub fn vacuum(n: usize, d: usize) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(Configuration::vacuum(), Complex64::new(1.0, 0.0));
        SparseState { n, d, terms }
    }

    /// A single basis state |c⟩.
    pub fn basis(n: usize, d: usize, c: Configuration) -> Result<Self> {
        let mut st = SparseState {
            n,
            d,
            terms: BTreeMap::new(),
        };
        st.check_config(&c)?;
        st.terms.insert(c, Complex64::new(1.0, 0.0));
        Ok(st)
    }

    /// Build from (configuration, amplitude) terms; duplicates are summed,
    /// exact zeros dropped.
    pub fn from_terms(
        n: usize,
        d: usize,
        terms: impl IntoIterator<Item = (Configuration, Complex64)>,
    ) -> Result<Self> {
        let mut st = SparseState {
            n,
            d,
            terms: BTreeMap::new(),
        };
        for (c, a) in terms {
            st.check_config(&c)?;
            st.accumulate(c, a);
        }
        Ok(st)
    }

    fn check_config(&self, c: &Configuration) -> Result<()> {
        for (s, v) in c.iter() {
            if s.n() != self.n {
                return Err(Error::invalid(format!(
                    "configuration site has dimension {}, lattice has {}",
                    s.n(),
                    self.n
                )));
            }
            if v as usize >= self.d {
                return Err(Error::invalid(format!(
                    "cell value {v} out of range for d = {}",
                    self.d
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn accumulate(&mut self, c: Configuration, a: Complex64) {
        if a == ZERO {
            return;
        }
        let entry = self.terms.entry(c);
        match entry {
            alloc::collections::btree_map::Entry::Occupied(mut o) => {
                let v = *o.get() + a;
                if v == ZERO {
                    o.remove();
                } else {
                    *o.get_mut() = v;
                }
            }
            alloc::collections::btree_map::Entry::Vacant(v) => {
                v.insert(a);
            }
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Configuration, Complex64)> {
        self.terms.iter().map(|(c, &a)| (c, a))
    }

    pub fn amplitude(&self, c: &Configuration) -> Complex64 {
        self.terms.get(c).copied().unwrap_or(ZERO)
    }

    /// Union of the supports of all configurations, sorted.
    pub fn support(&self) -> Vec<Site> {
        let mut set = BTreeSet::new();
        for c in self.terms.keys() {
            for s in c.support() {
                set.insert(s.clone());
            }
        }
        set.into_iter().collect()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.terms.values().map(|a| a.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// ⟨self | other⟩ (antilinear in self).
    pub fn inner(&self, other: &SparseState) -> Result<Complex64> {
        if self.n != other.n || self.d != other.d {
            return Err(Error::invalid("inner product between mismatched spaces"));
        }
        // Iterate over the smaller map.
        let (small, big, flip) = if self.terms.len() <= other.terms.len() {
            (&self.terms, &other.terms, false)
        } else {
            (&other.terms, &self.terms, true)
        };
        let mut acc = ZERO;
        for (c, &a) in small {
            if let Some(&b) = big.get(c) {
                acc += if flip { b.conj() * a } else { a.conj() * b };
            }
        }
        Ok(acc)
    }

    pub fn scale(&self, a: Complex64) -> SparseState {
        if a == ZERO {
            return SparseState {
                n: self.n,
                d: self.d,
                terms: BTreeMap::new(),
            };
        }
        SparseState {
            n: self.n,
            d: self.d,
            terms: self.terms.iter().map(|(c, &x)| (c.clone(), x * a)).collect(),
        }
    }

    pub fn add(&self, other: &SparseState) -> Result<SparseState> {
        if self.n != other.n || self.d != other.d {
            return Err(Error::invalid("sum of states over mismatched spaces"));
        }
        let mut out = self.clone();
        for (c, &a) in &other.terms {
            out.accumulate(c.clone(), a);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &SparseState) -> Result<SparseState> {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    /// L²-normalize; errors on (numerically) zero states.
    pub fn normalize(&self) -> Result<SparseState> {
        let nrm = self.norm();
        if nrm < 1e-150 {
            return Err(Error::invalid("cannot normalize a zero state"));
        }
        Ok(self.scale(Complex64::new(1.0 / nrm, 0.0)))
    }

    /// Drop terms with |amplitude| ≤ tol (absolute threshold).
    pub fn prune(&self, tol: f64) -> SparseState {
        SparseState {
            n: self.n,
            d: self.d,
            terms: self
                .terms
                .iter()
                .filter(|(_, a)| a.norm() > tol)
                .map(|(c, &a)| (c.clone(), a))
                .collect(),
        }
    }

    /// Shift every configuration by +z.
    pub fn translate(&self, z: &Site) -> Result<SparseState> {
        let mut terms = BTreeMap::new();
        for (c, &a) in &self.terms {
            terms.insert(c.translate(z)?, a);
        }
        Ok(SparseState {
            n: self.n,
            d: self.d,
            terms,
        })
    }
}
