//! JSON forms for everything that crosses the CLI boundary: models, rules,
//! sparse states, and the reports the subcommands emit.
//!
//! Input conversions return `qca_core::Result` so that the error kind (and
//! with it the process exit code) survives the trip through the parser:
//! malformed JSON and shape mismatches are `Invalid`, while a collision
//! matrix that fails unitarity still surfaces as `ModelInvariant`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use qca_core::evolution::{EvolutionHandle, PartitionedCircuit, QlgaModel, SubcellFactor};
use qca_core::heisenberg::{
    CausalityReport, LocalRule, ReversibilityReport, RuleReport, TranslationReport,
};
use qca_core::lattice::{Configuration, Neighborhood, Site, SparseState};
use qca_core::operators::LocalOperator;
use qca_core::structure::{canonical_phase, DetectReport, IntertwinerResult};
use qca_core::{CMatrix, Error, Result, Tolerances};

fn invalid(msg: impl core::fmt::Display) -> Error {
    Error::invalid(msg.to_string())
}

// ---------------------------------------------------------------------------
// Matrices, sites, configurations, states
// ---------------------------------------------------------------------------

/// Row-major square matrix split into real and imaginary parts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixDto {
    pub dim: usize,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

pub fn matrix_to_dto(m: &CMatrix) -> MatrixDto {
    let dim = m.nrows();
    let re = (0..dim)
        .map(|i| m.row(i).iter().map(|z| z.re).collect())
        .collect();
    let im = (0..dim)
        .map(|i| m.row(i).iter().map(|z| z.im).collect())
        .collect();
    MatrixDto { dim, re, im }
}

pub fn matrix_from_dto(dto: &MatrixDto) -> Result<CMatrix> {
    let dim = dto.dim;
    if dto.re.len() != dim || dto.im.len() != dim {
        return Err(invalid(format!("matrix declares dim {dim} but has {} re / {} im rows", dto.re.len(), dto.im.len())));
    }
    let mut entries = Vec::with_capacity(dim * dim);
    for (re_row, im_row) in dto.re.iter().zip(&dto.im) {
        if re_row.len() != dim || im_row.len() != dim {
            return Err(invalid(format!("matrix row length differs from dim {dim}")));
        }
        for (&re, &im) in re_row.iter().zip(im_row) {
            entries.push(Complex64::new(re, im));
        }
    }
    CMatrix::from_rows(dim, dim, &entries)
}

fn site_from(coords: &[i64], n: usize, what: &str) -> Result<Site> {
    if coords.len() != n {
        return Err(invalid(format!("{what} has {} coordinates, expected {n}", coords.len())));
    }
    Ok(Site::new(coords.to_vec()))
}

fn sites_from(list: &[Vec<i64>], n: usize, what: &str) -> Result<Vec<Site>> {
    list.iter().map(|c| site_from(c, n, what)).collect()
}

fn sites_to(list: &[Site]) -> Vec<Vec<i64>> {
    list.iter().map(|s| s.0.clone()).collect()
}

/// A finite configuration as parallel arrays; quiescent (value 0) sites are
/// never listed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigurationDto {
    pub sites: Vec<Vec<i64>>,
    pub values: Vec<u32>,
}

pub fn config_to_dto(c: &Configuration) -> ConfigurationDto {
    let mut sites = Vec::new();
    let mut values = Vec::new();
    for (s, v) in c.iter() {
        sites.push(s.0.clone());
        values.push(v);
    }
    ConfigurationDto { sites, values }
}

pub fn config_from_dto(dto: &ConfigurationDto, n: usize, d: usize) -> Result<Configuration> {
    if dto.sites.len() != dto.values.len() {
        return Err(invalid("configuration sites/values arrays differ in length"));
    }
    let mut pairs = Vec::with_capacity(dto.sites.len());
    for (coords, &v) in dto.sites.iter().zip(&dto.values) {
        if v as usize >= d {
            return Err(invalid(format!("configuration value {v} out of range for cell dimension {d}")));
        }
        pairs.push((site_from(coords, n, "configuration site")?, v));
    }
    Configuration::from_pairs(pairs)
}

/// One term of a sparse state: configuration and complex amplitude.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermDto {
    pub config: ConfigurationDto,
    pub re: f64,
    pub im: f64,
}

pub fn state_to_dto(st: &SparseState) -> Vec<TermDto> {
    st.terms()
        .map(|(c, a)| TermDto {
            config: config_to_dto(c),
            re: a.re,
            im: a.im,
        })
        .collect()
}

pub fn state_from_dto(terms: &[TermDto], n: usize, d: usize) -> Result<SparseState> {
    let pairs: Result<Vec<_>> = terms
        .iter()
        .map(|t| Ok((config_from_dto(&t.config, n, d)?, Complex64::new(t.re, t.im))))
        .collect();
    SparseState::from_terms(n, d, pairs?)
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// One sub-cell factor of a lattice-gas cell: the neighborhood offset it is
/// attached to, its dimension, and its quiescent level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorDto {
    pub offset: Vec<i64>,
    pub dim: usize,
    #[serde(default)]
    pub q: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QlgaDto {
    pub n: usize,
    pub neighborhood: Vec<Vec<i64>>,
    pub factors: Vec<FactorDto>,
    pub collision: MatrixDto,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDto {
    pub shape: Vec<Vec<i64>>,
    pub block: MatrixDto,
    pub step: Vec<i64>,
    pub offset: Vec<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircuitDto {
    pub n: usize,
    pub d: usize,
    pub neighborhood: Vec<Vec<i64>>,
    pub layers: Vec<LayerDto>,
}

pub fn qlga_from_dto(dto: &QlgaDto, tol: &Tolerances) -> Result<QlgaModel> {
    let nb = Neighborhood::new(sites_from(&dto.neighborhood, dto.n, "neighborhood offset")?)?;
    let factors = dto
        .factors
        .iter()
        .map(|f| {
            Ok(SubcellFactor {
                offset: site_from(&f.offset, dto.n, "factor offset")?,
                dim: f.dim,
                q: f.q,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    QlgaModel::new(nb, factors, matrix_from_dto(&dto.collision)?, tol)
}

pub fn qlga_to_dto(m: &QlgaModel) -> QlgaDto {
    QlgaDto {
        n: m.n(),
        neighborhood: sites_to(m.neighborhood().offsets()),
        factors: m
            .factors()
            .iter()
            .map(|f| FactorDto {
                offset: f.offset.0.clone(),
                dim: f.dim,
                q: f.q,
            })
            .collect(),
        collision: matrix_to_dto(m.collision()),
    }
}

pub fn circuit_from_dto(dto: &CircuitDto, tol: &Tolerances) -> Result<PartitionedCircuit> {
    let nb = Neighborhood::new(sites_from(&dto.neighborhood, dto.n, "neighborhood offset")?)?;
    let layers = dto
        .layers
        .iter()
        .map(|l| {
            Ok((
                sites_from(&l.shape, dto.n, "layer shape site")?,
                matrix_from_dto(&l.block)?,
                l.step.clone(),
                site_from(&l.offset, dto.n, "layer offset")?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    PartitionedCircuit::new(dto.n, dto.d, nb, layers, tol)
}

/// Parse a model file. Lattice-gas models carry a `factors` key, partitioned
/// circuits a `layers` key; anything else is rejected with a pointer at both.
pub fn model_from_json(text: &str, tol: &Tolerances) -> Result<EvolutionHandle> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| invalid(format!("model file: {e}")))?;
    if value.get("factors").is_some() {
        let dto: QlgaDto =
            serde_json::from_value(value).map_err(|e| invalid(format!("lattice-gas model: {e}")))?;
        Ok(EvolutionHandle::from_qlga(qlga_from_dto(&dto, tol)?))
    } else if value.get("layers").is_some() {
        let dto: CircuitDto =
            serde_json::from_value(value).map_err(|e| invalid(format!("circuit model: {e}")))?;
        Ok(EvolutionHandle::from_circuit(circuit_from_dto(&dto, tol)?))
    } else {
        Err(invalid(
            "model file needs either \"factors\" (lattice gas) or \"layers\" (partitioned circuit)",
        ))
    }
}

// ---------------------------------------------------------------------------
// Rules
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalOperatorDto {
    pub support: Vec<Vec<i64>>,
    pub matrix: MatrixDto,
}

/// The image of the matrix unit e_ij under the rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageDto {
    pub i: usize,
    pub j: usize,
    pub op: LocalOperatorDto,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleDto {
    pub neighborhood: Vec<Vec<i64>>,
    pub images: Vec<ImageDto>,
}

fn operator_from_dto(dto: &LocalOperatorDto, n: usize, d: usize) -> Result<LocalOperator> {
    let support = sites_from(&dto.support, n, "operator support site")?;
    LocalOperator::new(n, d, support, matrix_from_dto(&dto.matrix)?)
}

fn operator_to_dto(op: &LocalOperator) -> LocalOperatorDto {
    LocalOperatorDto {
        support: sites_to(op.support()),
        matrix: matrix_to_dto(op.matrix()),
    }
}

pub fn rule_from_dto(dto: &RuleDto) -> Result<LocalRule> {
    if dto.neighborhood.is_empty() {
        return Err(invalid("rule neighborhood must not be empty"));
    }
    let n = dto.neighborhood[0].len();
    let declared = Neighborhood::new(sites_from(&dto.neighborhood, n, "neighborhood offset")?)?;
    let count = dto.images.len();
    let d = (1..).find(|&k| k * k >= count).unwrap_or(1);
    if d * d != count || count == 0 {
        return Err(invalid(format!("rule has {count} images; expected a perfect square d²")));
    }
    let mut slots: Vec<Option<LocalOperator>> = vec![None; d * d];
    for img in &dto.images {
        if img.i >= d || img.j >= d {
            return Err(invalid(format!("image index ({}, {}) out of range for d = {d}", img.i, img.j)));
        }
        let slot = &mut slots[img.i * d + img.j];
        if slot.is_some() {
            return Err(invalid(format!("duplicate image for e_{}{}", img.i, img.j)));
        }
        *slot = Some(operator_from_dto(&img.op, n, d)?);
    }
    let images = slots
        .into_iter()
        .enumerate()
        .map(|(k, s)| s.ok_or_else(|| invalid(format!("missing image for e_{}{}", k / d, k % d))))
        .collect::<Result<Vec<_>>>()?;
    let rule = LocalRule::new(n, d, images)?;
    for off in rule.neighborhood().offsets() {
        if declared.index_of(off).is_none() {
            return Err(invalid(format!("image supports reach {off:?}, outside the declared neighborhood")));
        }
    }
    Ok(rule)
}

pub fn rule_to_dto(rule: &LocalRule) -> RuleDto {
    let d = rule.d();
    let images = (0..d * d)
        .map(|k| ImageDto {
            i: k / d,
            j: k % d,
            op: operator_to_dto(&rule.images()[k]),
        })
        .collect();
    RuleDto {
        neighborhood: sites_to(rule.neighborhood().offsets()),
        images,
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Mirror of [`Tolerances`] so every report records the thresholds it was
/// judged against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TolerancesDto {
    pub algebraic: f64,
    pub causality: f64,
    pub validation: f64,
    pub translation: f64,
    pub leakage: f64,
    pub intertwiner: f64,
    pub rank: f64,
    pub cluster_gap: f64,
    pub reduce: f64,
    pub prune: f64,
}

impl From<&Tolerances> for TolerancesDto {
    fn from(t: &Tolerances) -> Self {
        TolerancesDto {
            algebraic: t.algebraic,
            causality: t.causality,
            validation: t.validation,
            translation: t.translation,
            leakage: t.leakage,
            intertwiner: t.intertwiner,
            rank: t.rank,
            cluster_gap: t.cluster_gap,
            reduce: t.reduce,
            prune: t.prune,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RuleReportDto {
    pub unit_defect: f64,
    pub star_defect: f64,
    pub homomorphism_defect: f64,
    pub commutation_defect: f64,
    pub trace_defect: f64,
    pub exhaustive: bool,
    pub pass: bool,
}

impl From<&RuleReport> for RuleReportDto {
    fn from(r: &RuleReport) -> Self {
        RuleReportDto {
            unit_defect: r.unit_defect,
            star_defect: r.star_defect,
            homomorphism_defect: r.homomorphism_defect,
            commutation_defect: r.commutation_defect,
            trace_defect: r.trace_defect,
            exhaustive: r.exhaustive,
            pass: r.pass,
        }
    }
}

/// Translation invariance along one axis: the unit shift tested, the box the
/// spanning set was built on, the fitted global phase and the residual.
#[derive(Debug, Clone, Serialize)]
pub struct TranslationDto {
    pub shift: Vec<i64>,
    pub extents: Vec<usize>,
    pub theta: f64,
    pub residual: f64,
    pub states: usize,
    pub pass: bool,
}

pub fn translation_to_dto(shift: &Site, extents: &[usize], r: &TranslationReport) -> TranslationDto {
    TranslationDto {
        shift: shift.0.clone(),
        extents: extents.to_vec(),
        theta: r.theta,
        residual: r.residual,
        states: r.states,
        pass: r.pass,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CausalityDto {
    pub max_deviation: f64,
    pub trials: usize,
    pub pass: bool,
}

impl From<&CausalityReport> for CausalityDto {
    fn from(r: &CausalityReport) -> Self {
        CausalityDto {
            max_deviation: r.max_deviation,
            trials: r.trials,
            pass: r.pass,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReversibilityDto {
    pub forward_supports_ok: bool,
    pub backward_supports_ok: bool,
    pub element_defect: f64,
    pub forward_density_dev: f64,
    pub backward_density_dev: f64,
    pub pass: bool,
}

impl From<&ReversibilityReport> for ReversibilityDto {
    fn from(r: &ReversibilityReport) -> Self {
        ReversibilityDto {
            forward_supports_ok: r.forward_supports_ok,
            backward_supports_ok: r.backward_supports_ok,
            element_defect: r.element_defect,
            forward_density_dev: r.forward_density_dev,
            backward_density_dev: r.backward_density_dev,
            pass: r.pass,
        }
    }
}

/// Everything `qca check` measured. Sections that need a concrete evolution
/// (not just a rule) are absent when only `--rule` was given; a section that
/// could not run at all leaves a message in `errors` instead.
#[derive(Debug, Clone, Serialize)]
pub struct CheckDto {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule: Option<RuleReportDto>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub translation: Option<Vec<TranslationDto>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub causality_forward: Option<CausalityDto>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub causality_backward: Option<CausalityDto>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reversibility: Option<ReversibilityDto>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
    pub pass: bool,
    pub seed: u64,
    pub tolerances: TolerancesDto,
}

/// Stage → residual map serialized as a JSON object whose keys keep the
/// pipeline order (patch, condition, factorize, collision, verify).
#[derive(Debug, Clone)]
pub struct ResidualsDto(pub Vec<(String, f64)>);

impl Serialize for ResidualsDto {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> core::result::Result<S::Ok, S::Error> {
        ser.collect_map(self.0.iter().map(|(k, v)| (k, v)))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectDto {
    pub qlga: bool,
    pub dims: Vec<usize>,
    #[serde(rename = "S", skip_serializing_if = "Option::is_none")]
    pub s: Option<MatrixDto>,
    #[serde(rename = "F", skip_serializing_if = "Option::is_none")]
    pub f: Option<MatrixDto>,
    pub rank: usize,
    pub residuals: ResidualsDto,
    pub seed: u64,
    pub tolerances: TolerancesDto,
}

pub fn detect_to_dto(rep: &DetectReport, tol: &Tolerances) -> DetectDto {
    DetectDto {
        qlga: rep.qlga,
        dims: rep.dims.clone(),
        s: rep.s.as_ref().map(|m| matrix_to_dto(&canonical_phase(m))),
        f: rep.f.as_ref().map(|m| matrix_to_dto(&canonical_phase(m))),
        rank: rep.rank,
        residuals: ResidualsDto(
            rep.residuals
                .iter()
                .map(|(stage, value)| ((*stage).to_string(), *value))
                .collect(),
        ),
        seed: rep.seed,
        tolerances: tol.into(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IntertwineDto {
    pub extent: usize,
    #[serde(rename = "R", skip_serializing_if = "Option::is_none")]
    pub r: Option<MatrixDto>,
    pub residual: f64,
    pub uniqueness: f64,
    pub phase_convention: String,
    pub seed: u64,
    pub tolerances: TolerancesDto,
}

pub fn intertwine_to_dto(res: &IntertwinerResult, seed: u64, tol: &Tolerances) -> IntertwineDto {
    IntertwineDto {
        extent: res.extent,
        r: res.r.as_ref().map(matrix_to_dto),
        residual: res.residual,
        uniqueness: res.uniqueness,
        phase_convention: res.phase_convention.to_string(),
        seed,
        tolerances: tol.into(),
    }
}
