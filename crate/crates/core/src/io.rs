//! Tab-separated matrix files, sample centering, and fit artifacts.
//!
//! Matrix files carry column labels in the first row and row labels in the
//! first column; the top-left corner cell is optional. Numbers are written
//! with 17 significant digits so that text round trips are exact.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use faer::{Mat, MatRef};
use sha2::{Digest, Sha256};

use crate::error::{CellPosition, Error, ParseError, Result};
use crate::model::{default_labels, ExpressionMatrix, FitConfig, ModelFit};
use crate::select::SelectionReport;

/// Version of the summary schema.
pub const SUMMARY_FORMAT_VERSION: u32 = 1;

const MISSING_TOKENS: [&str; 8] = ["", "NA", "na", "N/A", "NaN", "nan", "NAN", "."];

/// Orientation of a matrix file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// One sample per row.
    SamplesRows,
    /// One sample per column (genes × samples, the usual expression layout).
    SamplesCols,
}

impl FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "samples-rows" => Ok(Layout::SamplesRows),
            "samples-cols" => Ok(Layout::SamplesCols),
            other => Err(format!("unknown layout {other:?}, expected samples-rows or samples-cols")),
        }
    }
}

/// A matrix with row (sample) and column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub values: Mat<f64>,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
}

impl LabeledMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    fn transposed(self) -> Self {
        Self { values: self.values.transpose().to_owned(), row_ids: self.col_ids, col_ids: self.row_ids }
    }
}

/// Parses matrix text; the result always has samples as rows.
pub fn parse_matrix(text: &str, layout: Layout) -> Result<LabeledMatrix, ParseError> {
    let mut lines: Vec<&str> = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)).collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    let Some(header) = lines.first() else {
        return Ok(LabeledMatrix { values: Mat::zeros(0, 0), row_ids: Vec::new(), col_ids: Vec::new() });
    };
    let header: Vec<&str> = header.split('\t').collect();
    let body = &lines[1..];
    let col_ids: Vec<String> = match body.first().map(|l| l.split('\t').count()) {
        Some(len) if len == header.len() + 1 => header.iter().map(|s| s.trim().to_string()).collect(),
        Some(len) if len != header.len() => return Err(ParseError::Ragged(2, header.len(), len)),
        _ => header[1..].iter().map(|s| s.trim().to_string()).collect(),
    };
    check_unique(&col_ids, "column")?;
    let ncols = col_ids.len();
    let mut row_ids = Vec::with_capacity(body.len());
    let mut data = Vec::with_capacity(body.len() * ncols);
    for (k, line) in body.iter().enumerate() {
        let line_no = k + 2;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != ncols + 1 {
            return Err(ParseError::Ragged(line_no, ncols + 1, fields.len()));
        }
        row_ids.push(fields[0].trim().to_string());
        for (j, raw) in fields[1..].iter().enumerate() {
            data.push(parse_cell(raw, CellPosition { line: line_no, column: j + 2 })?);
        }
    }
    check_unique(&row_ids, "row")?;
    let values = Mat::from_fn(row_ids.len(), ncols, |i, j| data[i * ncols + j]);
    let m = LabeledMatrix { values, row_ids, col_ids };
    Ok(match layout {
        Layout::SamplesRows => m,
        Layout::SamplesCols => m.transposed(),
    })
}

fn parse_cell(raw: &str, at: CellPosition) -> Result<f64, ParseError> {
    let cell = raw.trim();
    if MISSING_TOKENS.contains(&cell) {
        return Err(ParseError::Missing { at, value: cell.to_string() });
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) if v.is_nan() => Err(ParseError::Missing { at, value: cell.to_string() }),
        _ => Err(ParseError::NonNumeric { at, value: cell.to_string() }),
    }
}

fn check_unique(labels: &[String], axis: &'static str) -> Result<(), ParseError> {
    let mut seen = HashSet::with_capacity(labels.len());
    for label in labels {
        if !seen.insert(label.as_str()) {
            return Err(ParseError::DuplicateLabel { axis, label: label.clone() });
        }
    }
    Ok(())
}

/// Reads a matrix file; the result always has samples as rows.
pub fn read_matrix(path: impl AsRef<Path>, layout: Layout) -> Result<LabeledMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text, layout).map_err(|source| Error::Parse { path: path.to_path_buf(), source })
}

/// Formats a matrix with labels; `corner` fills the top-left cell.
pub fn format_matrix(
    values: MatRef<'_, f64>,
    row_ids: &[String],
    col_ids: &[String],
    corner: &str,
) -> String {
    let mut out = String::new();
    out.push_str(corner);
    for c in col_ids {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for (i, r) in row_ids.iter().enumerate() {
        out.push_str(r);
        for j in 0..values.ncols() {
            let _ = write!(out, "\t{:.16e}", values[(i, j)]);
        }
        out.push('\n');
    }
    out
}

/// Writes a samples-as-rows matrix file.
pub fn write_matrix(path: impl AsRef<Path>, m: &LabeledMatrix, corner: &str) -> Result<()> {
    let path = path.as_ref();
    let text = format_matrix(m.values.as_ref(), &m.row_ids, &m.col_ids, corner);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Subtracts each sample's mean across genes, recording the means.
pub fn center_samples(m: LabeledMatrix) -> ExpressionMatrix {
    let (n, g) = (m.nrows(), m.ncols());
    let means: Vec<f64> = (0..n)
        .map(|i| if g == 0 { 0.0 } else { (0..g).map(|j| m.values[(i, j)]).sum::<f64>() / g as f64 })
        .collect();
    let values = Mat::from_fn(n, g, |i, j| m.values[(i, j)] - means[i]);
    ExpressionMatrix::from_centered_parts(values, m.row_ids, m.col_ids, means)
}

/// Structured `key = value` text with `#` comments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    entries: Vec<(String, String)>,
}

impl Summary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry; keys must be unique and made of `[A-Za-z0-9_.-]`.
    pub fn insert(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        debug_assert!(valid_key(&key), "invalid summary key {key:?}");
        let value = value.to_string().replace(['\n', '\r'], " ");
        if let Some(slot) = self.entries.iter_mut().find(|(k, _)| *k == key) {
            slot.1 = value;
        } else {
            self.entries.push((key, value));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, ParseError> {
        self.get(key).ok_or_else(|| ParseError::MissingKey(key.to_string()))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T, ParseError> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| ParseError::InvalidValue { key: key.to_string(), value: raw.to_string() })
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# latent-reml fit summary\n");
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn valid_key(key: &str) -> bool {
    !key.is_empty() && key.bytes().all(|b| b.is_ascii_alphanumeric() || b"_.-".contains(&b))
}

/// Parses summary text.
pub fn parse_summary(text: &str) -> Result<Summary, ParseError> {
    let mut summary = Summary::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ParseError::Summary { line: k + 1, message: "expected `key = value`".into() });
        };
        let key = key.trim();
        if !valid_key(key) {
            return Err(ParseError::Summary { line: k + 1, message: format!("invalid key {key:?}") });
        }
        if summary.get(key).is_some() {
            return Err(ParseError::Summary { line: k + 1, message: format!("duplicate key {key:?}") });
        }
        summary.entries.push((key.to_string(), value.trim().to_string()));
    }
    Ok(summary)
}

/// Reads a summary file.
pub fn read_summary(path: impl AsRef<Path>) -> Result<Summary> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_summary(&text).map_err(|source| Error::Parse { path: path.to_path_buf(), source })
}

/// Labels and provenance written alongside a fit.
#[derive(Debug, Clone, Default)]
pub struct FitRecord<'a> {
    pub sample_ids: Option<&'a [String]>,
    pub covariate_ids: Option<&'a [String]>,
    pub n_genes: Option<usize>,
    pub config: Option<&'a FitConfig>,
    pub selection: Option<&'a SelectionReport>,
    /// Additional summary entries.
    pub extra: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const LATENT_FILE: &str = "latent.tsv";
pub const KNOWN_COV_FILE: &str = "B.tsv";
pub const LATENT_VAR_FILE: &str = "A.tsv";
pub const CROSS_COV_FILE: &str = "D.tsv";
pub const COVARIANCE_FILE: &str = "K.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Writes a fit with generated labels.
pub fn write_fit(fit: &ModelFit, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    write_fit_record(fit, &FitRecord::default(), out_dir)
}

/// Writes latent factors, parameter blocks, `K̂`, a summary and a checksum
/// manifest into `out_dir` (created if needed).
pub fn write_fit_record(
    fit: &ModelFit,
    record: &FitRecord<'_>,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, d, p) = (fit.n(), fit.d(), fit.p());
    let samples = labels_or_default(record.sample_ids, "s", n)?;
    let covariates = labels_or_default(record.covariate_ids, "z", d)?;
    let latents = default_labels("x", p);

    let shares = fit.shares();
    let share_sum = shares.sum();
    if (share_sum - 1.0).abs() > 1e-8 {
        return Err(Error::Numerical(format!("variance shares sum to {share_sum}, expected 1")));
    }

    let prm = fit.params();
    let a = crate::linalg::diag(prm.latent_var());
    let files: [(&str, String); 5] = [
        (LATENT_FILE, format_matrix(fit.latent(), &samples, &latents, "sample")),
        (KNOWN_COV_FILE, format_matrix(prm.known_cov(), &covariates, &covariates, "covariate")),
        (LATENT_VAR_FILE, format_matrix(a.as_ref(), &latents, &latents, "latent")),
        (CROSS_COV_FILE, format_matrix(prm.cross_cov(), &covariates, &latents, "covariate")),
        (COVARIANCE_FILE, format_matrix(fit.k(), &samples, &samples, "sample")),
    ];

    let mut s = Summary::new();
    s.insert("format_version", SUMMARY_FORMAT_VERSION);
    s.insert("software_version", env!("CARGO_PKG_VERSION"));
    s.insert("n_samples", n);
    if let Some(m) = record.n_genes {
        s.insert("n_genes", m);
    }
    s.insert("n_known", d);
    s.insert("n_latent", p);
    s.insert("sigma2", num(prm.sigma2()));
    s.insert("loglik", num(fit.loglik()));
    s.insert("share_known", num(shares.known));
    s.insert("share_latent", num(shares.latent));
    s.insert("share_residual", num(shares.residual));
    s.insert("share_sum", num(share_sum));
    s.insert("log_base", "e");
    for c in fit.conditions() {
        s.insert(format!("condition.{}.holds", c.name), c.holds);
        s.insert(format!("condition.{}.lhs", c.name), num(c.lhs));
        s.insert(format!("condition.{}.rhs", c.name), num(c.rhs));
    }
    if let Some(cfg) = record.config {
        s.insert("config.rho", num(cfg.rho));
        s.insert("config.theta", num(cfg.theta));
        s.insert("config.max_latent", cfg.max_latent.map_or("none".to_string(), |v| v.to_string()));
        s.insert("config.tolerance", num(cfg.tolerance));
    }
    if let Some(sel) = record.selection {
        s.insert("selection.unclamped_target", num(sel.unclamped_target));
        s.insert("selection.target_sigma2", num(sel.target_sigma2));
        s.insert("selection.clamp_active", sel.clamp_active);
        s.insert("selection.p_initial", sel.p_initial);
        s.insert("selection.p_final", sel.p_final);
        s.insert("selection.cap", sel.cap);
        s.insert("selection.retries", sel.retries.len());
        let trace: Vec<String> =
            sel.retries.iter().map(|r| format!("{}:{}", r.p, num(r.residual))).collect();
        s.insert("selection.retry_trace", trace.join(","));
        s.insert("selection.explained", num(sel.explained));
        s.insert("selection.exceeds_target", sel.exceeds_target);
    }
    for (k, v) in &record.extra {
        s.insert(k.clone(), v);
    }

    let mut entries = Vec::new();
    let summary_text = s.to_text();
    for (name, text) in files.iter().map(|(n, t)| (*n, t.as_str())).chain([(SUMMARY_FILE, summary_text.as_str())]) {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry { file: name.to_string(), sha256: sha256_hex(text.as_bytes()), bytes: text.len() });
    }
    let mut manifest = String::from("file\tsha256\tbytes\n");
    for e in &entries {
        let _ = writeln!(manifest, "{}\t{}\t{}", e.file, e.sha256, e.bytes);
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(Manifest { dir: dir.to_path_buf(), entries })
}

fn labels_or_default(given: Option<&[String]>, prefix: &str, count: usize) -> Result<Vec<String>> {
    match given {
        Some(ids) if ids.len() != count => {
            Err(Error::Shape(format!("{} labels for {count} entries", ids.len())))
        }
        Some(ids) => Ok(ids.to_vec()),
        None => Ok(default_labels(prefix, count)),
    }
}

/// Number formatting shared by every artifact (17 significant digits).
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{diag, max_abs_diff};

    #[test]
    fn parses_with_and_without_corner() {
        let with = "id\ta\tb\nr1\t1\t2\nr2\t3\t4\nr3\t5\t6\n";
        let without = "a\tb\nr1\t1\t2\nr2\t3\t4\nr3\t5\t6";
        let m1 = parse_matrix(with, Layout::SamplesRows).unwrap();
        let m2 = parse_matrix(without, Layout::SamplesRows).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.row_ids, vec!["r1", "r2", "r3"]);
        assert_eq!(m1.col_ids, vec!["a", "b"]);
        assert_eq!(m1.values[(2, 1)], 6.0);
    }

    #[test]
    fn missing_value_names_the_cell() {
        let err = parse_matrix("id\ta\tb\nr1\t1\tNA\n", Layout::SamplesRows).unwrap_err();
        assert!(matches!(
            err,
            ParseError::Missing { at: CellPosition { line: 2, column: 3 }, ref value } if value == "NA"
        ));
        assert_eq!(err.to_string(), "line 2, column 3: missing value \"NA\"");
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(matches!(
            parse_matrix("id\ta\tb\nr1\t1\t2\nr2\t3\n", Layout::SamplesRows),
            Err(ParseError::Ragged(3, 3, 2))
        ));
        assert!(matches!(
            parse_matrix("id\ta\nr1\tx\n", Layout::SamplesRows),
            Err(ParseError::NonNumeric { .. })
        ));
        assert!(matches!(
            parse_matrix("id\ta\nr1\tinf\n", Layout::SamplesRows),
            Err(ParseError::NonNumeric { .. })
        ));
        assert!(matches!(
            parse_matrix("id\ta\ta\nr1\t1\t2\n", Layout::SamplesRows),
            Err(ParseError::DuplicateLabel { axis: "column", .. })
        ));
        assert!(matches!(
            parse_matrix("id\ta\nr1\t1\nr1\t2\n", Layout::SamplesRows),
            Err(ParseError::DuplicateLabel { axis: "row", .. })
        ));
    }

    #[test]
    fn layouts_agree_on_transposed_files() {
        let rows = "id\tg1\tg2\ns1\t1\t2\ns2\t3\t4\ns3\t5\t6\n";
        let cols = "id\ts1\ts2\ts3\ng1\t1\t3\t5\ng2\t2\t4\t6\n";
        assert_eq!(
            parse_matrix(rows, Layout::SamplesRows).unwrap(),
            parse_matrix(cols, Layout::SamplesCols).unwrap()
        );
    }

    #[test]
    fn empty_text_is_empty_matrix() {
        let m = parse_matrix("", Layout::SamplesRows).unwrap();
        assert_eq!((m.nrows(), m.ncols()), (0, 0));
    }

    #[test]
    fn centering_examples() {
        let m = LabeledMatrix {
            values: Mat::from_fn(2, 2, |i, j| [[1.0, 3.0], [2.0, 2.0]][i][j]),
            row_ids: default_labels("s", 2),
            col_ids: default_labels("g", 2),
        };
        let y = center_samples(m);
        let expected = Mat::from_fn(2, 2, |i, j| [[-1.0, 1.0], [0.0, 0.0]][i][j]);
        assert_eq!(max_abs_diff(y.values(), expected.as_ref()), 0.0);
        assert_eq!(y.sample_means(), Some(&[2.0, 2.0][..]));
        assert!(y.is_centered());

        let constant = LabeledMatrix {
            values: Mat::from_fn(3, 4, |_, _| 7.5),
            row_ids: default_labels("s", 3),
            col_ids: default_labels("g", 4),
        };
        assert_eq!(crate::linalg::max_abs(center_samples(constant).values()), 0.0);
    }

    #[test]
    fn number_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0, -0.0] {
            assert_eq!(num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn summary_round_trip_and_errors() {
        let mut s = Summary::new();
        s.insert("a", 1);
        s.insert("b.c", "x y");
        let parsed = parse_summary(&s.to_text()).unwrap();
        assert_eq!(parsed, s);
        assert_eq!(parsed.parse_value::<u32>("a").unwrap(), 1);
        assert!(matches!(parsed.parse_value::<u32>("b.c"), Err(ParseError::InvalidValue { .. })));
        assert!(matches!(parsed.require("zz"), Err(ParseError::MissingKey(_))));
        assert!(matches!(parse_summary("a = 1\na = 2"), Err(ParseError::Summary { line: 2, .. })));
        assert!(matches!(parse_summary("no equals"), Err(ParseError::Summary { line: 1, .. })));
        assert!(matches!(parse_summary("bad key = 1"), Err(ParseError::Summary { .. })));
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn write_fit_empty_latent_block() {
        use crate::model::{CovariateBasis, SampleCovariance};
        let c = SampleCovariance::from_matrix(diag(&[4.0, 1.0, 1.0])).unwrap();
        let z = Mat::from_fn(3, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let fit = crate::solver::fit_full(&c, &CovariateBasis::new(z).unwrap(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_fit(&fit, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 6);
        let latent = fs::read_to_string(dir.path().join(LATENT_FILE)).unwrap();
        assert_eq!(latent, "sample\ns1\ns2\ns3\n");
        let back = read_matrix(dir.path().join(LATENT_FILE), Layout::SamplesRows).unwrap();
        assert_eq!((back.nrows(), back.ncols()), (3, 0));
        let summary = read_summary(dir.path().join(SUMMARY_FILE)).unwrap();
        assert_eq!(summary.parse_value::<usize>("n_latent").unwrap(), 0);
        let sum: f64 = summary.parse_value("share_sum").unwrap();
        assert!((sum - 1.0).abs() < 1e-8);
    }
}
