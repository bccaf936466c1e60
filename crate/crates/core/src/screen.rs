//! Screening of candidate known covariates and principal-component
//! construction.

use faer::{Mat, MatRef};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{numerical_rank, CovariateBasis, SampleCovariance, DEFAULT_TOLERANCE};
use crate::solver::screen_single_covariate;

/// Why a candidate was kept or dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateStatus {
    Retained,
    /// `β̂² < θ · tr(C)`.
    BelowThreshold,
    /// `⟨u, C u⟩ ≤ tr(C)/n`.
    Inadmissible,
    /// Linearly dependent on higher-ranked retained candidates.
    Dependent,
    /// Zero or non-finite column.
    Degenerate,
}

impl CandidateStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CandidateStatus::Retained => "retained",
            CandidateStatus::BelowThreshold => "below_threshold",
            CandidateStatus::Inadmissible => "inadmissible",
            CandidateStatus::Dependent => "dependent",
            CandidateStatus::Degenerate => "degenerate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub id: String,
    /// `None` for degenerate candidates.
    pub beta2: Option<f64>,
    pub admissible: bool,
    pub status: CandidateStatus,
}

#[derive(Debug, Clone)]
pub struct ScreeningResult {
    /// One record per candidate, in input order.
    pub records: Vec<CandidateRecord>,
    /// Indices of retained candidates, by `β̂²` descending.
    pub retained: Vec<usize>,
    pub basis: CovariateBasis,
}

impl ScreeningResult {
    pub fn retained_ids(&self) -> Vec<&str> {
        self.retained.iter().map(|&i| self.records[i].id.as_str()).collect()
    }
}

/// Keeps admissible candidates with `β̂² ≥ θ · tr(C)`, ranks them by `β̂²`
/// (input order on ties) and greedily retains those that increase the
/// numerical rank of the growing covariate matrix.
pub fn screen_candidates(
    c: &SampleCovariance,
    candidates: MatRef<'_, f64>,
    ids: &[String],
    theta: f64,
) -> Result<ScreeningResult> {
    let n = c.n();
    if candidates.nrows() != n && candidates.ncols() > 0 {
        return Err(Error::Shape(format!(
            "candidates have {} rows, expected {n}",
            candidates.nrows()
        )));
    }
    if ids.len() != candidates.ncols() {
        return Err(Error::Shape(format!(
            "{} candidate labels for {} candidates",
            ids.len(),
            candidates.ncols()
        )));
    }
    if !(theta >= 0.0) {
        return Err(Error::InvalidConfig(format!("theta must be >= 0, got {theta}")));
    }
    let threshold = theta * c.trace();
    let mut records = Vec::with_capacity(ids.len());
    let mut survivors = Vec::new();
    for (k, id) in ids.iter().enumerate() {
        let column: Vec<f64> = (0..n).map(|i| candidates[(i, k)]).collect();
        let (beta2, admissible, status) = match screen_single_covariate(c, &column) {
            Err(Error::DegenerateCovariate) => (None, false, CandidateStatus::Degenerate),
            Err(e) => return Err(e),
            Ok(s) if !s.admissible => (Some(s.beta2), false, CandidateStatus::Inadmissible),
            Ok(s) if s.beta2 < threshold => (Some(s.beta2), true, CandidateStatus::BelowThreshold),
            Ok(s) => {
                survivors.push((k, s.beta2));
                (Some(s.beta2), true, CandidateStatus::Retained)
            }
        };
        records.push(CandidateRecord { id: id.clone(), beta2, admissible, status });
    }
    // stable sort keeps input order on ties
    survivors.sort_by(|a, b| b.1.total_cmp(&a.1));

    let mut retained = Vec::new();
    for (k, _) in survivors {
        let mut trial = retained.clone();
        trial.push(k);
        let z = Mat::from_fn(n, trial.len(), |i, j| candidates[(i, trial[j])]);
        let sv = z
            .singular_values()
            .map_err(|e| Error::Numerical(format!("SVD of candidates failed: {e:?}")))?;
        if numerical_rank(&sv, DEFAULT_TOLERANCE) == trial.len() {
            retained = trial;
        } else {
            records[k].status = CandidateStatus::Dependent;
        }
    }
    let z = Mat::from_fn(n, retained.len(), |i, j| candidates[(i, retained[j])]);
    let basis = CovariateBasis::new(z)?;
    Ok(ScreeningResult { records, retained, basis })
}

/// Top `count` left singular vectors of `raw`, unit norm and sign-normalized
/// (largest-magnitude entry positive). `raw` is expected to be centered by
/// the caller.
pub fn compute_pcs(raw: MatRef<'_, f64>, count: usize) -> Result<Mat<f64>> {
    let n = raw.nrows();
    if count == 0 {
        return Ok(Mat::zeros(n, 0));
    }
    if !raw.is_all_finite() {
        return Err(Error::Shape("principal-component input contains non-finite values".into()));
    }
    let svd = raw
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD of principal-component input failed: {e:?}")))?;
    let s: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let rank = numerical_rank(&s, DEFAULT_TOLERANCE);
    if count > rank {
        return Err(Error::RankDeficient { requested: count, achievable: rank });
    }
    let mut pcs = svd.U().subcols(0, count).to_owned();
    linalg::normalize_column_signs(&mut pcs);
    Ok(pcs)
}
