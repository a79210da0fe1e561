//! The tolerance ladder.
//!
//! Every numerical threshold used by validation and recovery lives here, in
//! one struct, so the set of knobs is explicit and overridable (the CLI maps
//! `--tol NAME=VALUE` onto [`Tolerances::set`]).

use crate::error::{Error, Result};

/// Numerical thresholds, loosest-to-tightest roughly:
/// `translation`/`rank`/`intertwiner` (1e-8) > `validation`/`causality`
/// (1e-9) > `algebraic` (1e-10) > `reduce` (1e-12) > `prune` (1e-14).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    /// Algebraic identities: unitarity, *-homomorphism deviation, quiescent
    /// fixation, patch closure under products/adjoints.
    pub algebraic: f64,
    /// Density-based causality deviation.
    pub causality: f64,
    /// Acceptance threshold for a Heisenberg rule's validation report (the
    /// per-invariant defects are measured against `algebraic`; random-probe
    /// aggregates accept at this coarser level).
    pub validation: f64,
    /// Residual for the translation-invariance check (after phase fitting).
    pub translation: f64,
    /// Support containment: Frobenius mass of a conjugated generator outside
    /// its allowed localization region, relative to the generator's norm.
    pub leakage: f64,
    /// Intertwiner residuals ‖R a − γ(a) R‖ and overlap defects.
    pub intertwiner: f64,
    /// Rank decisions: singular values / eigenvalues above this count toward
    /// rank; intersection keeps eigenvalues ≥ 1 − rank.
    pub rank: f64,
    /// Eigenvalue clustering gap for the isotypic split.
    pub cluster_gap: f64,
    /// Identity-factor detection when reducing local operator supports.
    pub reduce: f64,
    /// Sparse-state amplitude pruning.
    pub prune: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            algebraic: 1e-10,
            causality: 1e-9,
            validation: 1e-9,
            translation: 1e-8,
            leakage: 1e-10,
            intertwiner: 1e-8,
            rank: 1e-8,
            cluster_gap: 1e-6,
            reduce: 1e-12,
            prune: 1e-14,
        }
    }
}

impl Tolerances {
    /// Override a tolerance by name. Names match the field names.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::invalid("tolerance values must be finite and > 0"));
        }
        match name {
            "algebraic" => self.algebraic = value,
            "causality" => self.causality = value,
            "validation" => self.validation = value,
            "translation" => self.translation = value,
            "leakage" => self.leakage = value,
            "intertwiner" => self.intertwiner = value,
            "rank" => self.rank = value,
            "cluster_gap" => self.cluster_gap = value,
            "reduce" => self.reduce = value,
            "prune" => self.prune = value,
            other => {
                return Err(Error::invalid(alloc::format!(
                    "unknown tolerance name `{other}`"
                )))
            }
        }
        Ok(())
    }

    /// (name, value) pairs in a fixed order, for reporting.
    pub fn entries(&self) -> [(&'static str, f64); 10] {
        [
            ("algebraic", self.algebraic),
            ("causality", self.causality),
            ("validation", self.validation),
            ("translation", self.translation),
            ("leakage", self.leakage),
            ("intertwiner", self.intertwiner),
            ("rank", self.rank),
            ("cluster_gap", self.cluster_gap),
            ("reduce", self.reduce),
            ("prune", self.prune),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_known_and_unknown_names() {
        let mut t = Tolerances::default();
        t.set("rank", 1e-7).unwrap();
        assert_eq!(t.rank, 1e-7);
        assert!(t.set("bogus", 1e-7).is_err());
        assert!(t.set("rank", -1.0).is_err());
        assert!(t.set("rank", f64::NAN).is_err());
    }
}
