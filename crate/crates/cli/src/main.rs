//! `latent-reml`: fit, screen, verify and correct expression data with the
//! closed-form random-effect solution.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use faer::Mat;
use latent_reml::downstream::{correct_residuals, fit_gene_variances, GeneModel};
use latent_reml::io::{
    self, center_samples, format_matrix, num, read_matrix, FitRecord, LabeledMatrix, Layout,
};
use latent_reml::model::{CovariateBasis, FitConfig};
use latent_reml::oracle::{oracle_maximize, DEFAULT_RESTARTS, MAX_SAMPLES};
use latent_reml::screen::{compute_pcs, screen_candidates, ScreeningResult};
use latent_reml::select::fit_auto;
use latent_reml::solver::fit_full;
use latent_reml::{covariate_overlap, sample_covariance, synth, Error, ErrorCategory, ExpressionMatrix};

const VERIFY_GAP: f64 = -1e-6;

#[derive(Parser)]
#[command(name = "latent-reml", version, about = "Closed-form REML fits with known and latent covariates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Screen covariates, select the latent dimension and write the fit.
    Fit(FitArgs),
    /// Report the variance explained by each candidate covariate.
    Screen(ScreenArgs),
    /// Compare the closed-form fit with a numerical optimizer on a small instance.
    Verify(VerifyArgs),
    /// Write confounder-corrected residuals using a previous fit.
    Correct(CorrectArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Expression matrix (TSV).
    #[arg(long)]
    expression: PathBuf,
    /// Orientation of the expression file.
    #[arg(long, default_value = "samples-cols")]
    layout: Layout,
}

#[derive(Args)]
struct CandidateArgs {
    /// Candidate covariates (TSV, one sample per row, labels matching the expression samples).
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Use the top N principal components of the covariates file as candidates.
    #[arg(long, value_name = "N")]
    pcs: Option<usize>,
    /// Minimum share of the total variance a candidate must explain.
    #[arg(long, default_value_t = 0.0)]
    theta: f64,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    candidates: CandidateArgs,
    /// Target share of the total variance explained by covariates and latent factors.
    #[arg(long)]
    rho: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Recorded in the summary; the fit itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest latent dimension tried.
    #[arg(long)]
    max_latent: Option<usize>,
    /// Print and write cosine similarities between covariates and latent factors.
    #[arg(long)]
    report_overlap: bool,
}

#[derive(Args)]
struct ScreenArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    candidates: CandidateArgs,
    /// Report file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Optimizer restarts.
    #[arg(long, default_value_t = DEFAULT_RESTARTS as u64, value_parser = clap::value_parser!(u64).range(1..))]
    restarts: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples in the built-in synthetic instance.
    #[arg(long, default_value_t = 6)]
    samples: usize,
    /// Known covariates in the built-in synthetic instance.
    #[arg(long, default_value_t = 0)]
    known: usize,
    /// Latent dimension.
    #[arg(long, default_value_t = 1)]
    latent: usize,
    /// Genes in the built-in synthetic instance.
    #[arg(long, default_value_t = 100)]
    genes: usize,
    /// Use this expression file instead of synthetic data.
    #[arg(long)]
    expression: Option<PathBuf>,
    #[arg(long, default_value = "samples-cols")]
    layout: Layout,
    /// Known covariates for the expression file (one sample per row).
    #[arg(long, requires = "expression")]
    covariates: Option<PathBuf>,
}

#[derive(Args)]
struct CorrectArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    /// Corrected matrix, written in the input layout.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Lib(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Lib(e) => match e.category() {
                ErrorCategory::Usage => 2,
                ErrorCategory::Input => 3,
                ErrorCategory::ModelCondition | ErrorCategory::Numerical => 4,
            },
            Failure::Verification(_) => 5,
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Failure::Lib(e) => match e.category() {
                ErrorCategory::Usage => "usage",
                ErrorCategory::Input => "input",
                ErrorCategory::ModelCondition => "model-condition",
                ErrorCategory::Numerical => "numerical",
            },
            Failure::Verification(_) => "verification",
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Lib(e) => e.to_string(),
            Failure::Verification(m) => m.clone(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Screen(a) => cmd_screen(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Correct(a) => cmd_correct(a),
    };
    match result {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error[{}]: {}", f.label(), f.message());
            ExitCode::from(f.exit_code())
        }
    }
}

fn load_expression(input: &InputArgs) -> Result<ExpressionMatrix, Error> {
    let raw = read_matrix(&input.expression, input.layout)?;
    if raw.nrows() < 2 || raw.ncols() == 0 {
        return Err(Error::Shape(format!(
            "{}: need at least 2 samples and 1 gene, found {} samples and {} genes",
            input.expression.display(),
            raw.nrows(),
            raw.ncols()
        )));
    }
    Ok(center_samples(raw))
}

/// Reorders the rows of a samples-as-rows file to match `samples`.
fn align_samples(m: LabeledMatrix, samples: &[String], path: &Path) -> Result<LabeledMatrix, Error> {
    if m.ncols() == 0 {
        return Ok(LabeledMatrix { values: Mat::zeros(samples.len(), 0), row_ids: samples.to_vec(), col_ids: m.col_ids });
    }
    let mut order = Vec::with_capacity(samples.len());
    for s in samples {
        let Some(i) = m.row_ids.iter().position(|r| r == s) else {
            return Err(Error::Shape(format!("{}: sample {s:?} is missing", path.display())));
        };
        order.push(i);
    }
    if m.nrows() != samples.len() {
        return Err(Error::Shape(format!(
            "{}: {} samples, expression has {}",
            path.display(),
            m.nrows(),
            samples.len()
        )));
    }
    let values = Mat::from_fn(samples.len(), m.ncols(), |i, j| m.values[(order[i], j)]);
    Ok(LabeledMatrix { values, row_ids: samples.to_vec(), col_ids: m.col_ids })
}

/// Candidate covariates: the file columns, or their top principal components.
fn load_candidates(args: &CandidateArgs, y: &ExpressionMatrix) -> Result<LabeledMatrix, Error> {
    let n = y.n_samples();
    let Some(path) = &args.covariates else {
        if args.pcs.is_some() {
            return Err(Error::InvalidConfig("--pcs needs --covariates".into()));
        }
        return Ok(LabeledMatrix { values: Mat::zeros(n, 0), row_ids: y.sample_ids().to_vec(), col_ids: Vec::new() });
    };
    let raw = align_samples(read_matrix(path, Layout::SamplesRows)?, y.sample_ids(), path)?;
    let Some(count) = args.pcs else { return Ok(raw) };
    let centered = center_columns(&raw.values);
    let pcs = compute_pcs(centered.as_ref(), count)?;
    Ok(LabeledMatrix {
        values: pcs,
        row_ids: raw.row_ids,
        col_ids: (1..=count).map(|k| format!("pc{k}")).collect(),
    })
}

fn center_columns(m: &Mat<f64>) -> Mat<f64> {
    let n = m.nrows() as f64;
    let means: Vec<f64> = (0..m.ncols()).map(|j| (0..m.nrows()).map(|i| m[(i, j)]).sum::<f64>() / n).collect();
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - means[j])
}

fn screening_table(result: &ScreeningResult) -> String {
    let mut out = String::from("candidate\tbeta2\tadmissible\tstatus\trank\n");
    for (k, r) in result.records.iter().enumerate() {
        let beta2 = r.beta2.map_or("NA".to_string(), num);
        let rank = result.retained.iter().position(|&i| i == k).map_or("NA".to_string(), |p| (p + 1).to_string());
        let _ = writeln!(out, "{}\t{beta2}\t{}\t{}\t{rank}", r.id, r.admissible, r.status.as_str());
    }
    out
}

fn cmd_fit(args: FitArgs) -> Result<String, Failure> {
    let mut config = FitConfig::new(args.rho, args.candidates.theta)?;
    if let Some(cap) = args.max_latent {
        config = config.with_max_latent(cap);
    }
    let y = load_expression(&args.input)?;
    let c = sample_covariance(&y)?;
    let candidates = load_candidates(&args.candidates, &y)?;
    let screening = screen_candidates(&c, candidates.values.as_ref(), &candidates.col_ids, config.theta)?;
    let covariate_ids: Vec<String> = screening.retained_ids().into_iter().map(String::from).collect();
    let auto = fit_auto(&c, &screening.basis, &config)?;
    let fit = &auto.fit;

    let mut extra = vec![
        ("seed".to_string(), args.seed.to_string()),
        ("screening.candidates".to_string(), candidates.ncols().to_string()),
        ("screening.retained".to_string(), covariate_ids.len().to_string()),
        ("screening.retained_ids".to_string(), covariate_ids.join(",")),
        ("screening.fallback".to_string(), if covariate_ids.is_empty() { "ppca" } else { "none" }.to_string()),
    ];
    let overlap = if args.report_overlap {
        let cos = covariate_overlap(screening.basis.z(), fit.latent())?;
        let max = (0..cos.nrows())
            .flat_map(|i| (0..cos.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| cos[(i, j)].abs())
            .fold(0.0, f64::max);
        extra.push(("overlap.max_abs_cosine".to_string(), num(max)));
        Some(cos)
    } else {
        None
    };

    let record = FitRecord {
        sample_ids: Some(y.sample_ids()),
        covariate_ids: Some(&covariate_ids),
        n_genes: Some(y.n_genes()),
        config: Some(&config),
        selection: Some(&auto.report),
        extra,
    };
    io::write_fit_record(fit, &record, &args.out)?;

    let shares = fit.shares();
    let mut report = String::new();
    let _ = writeln!(report, "samples\t{}", fit.n());
    let _ = writeln!(report, "genes\t{}", y.n_genes());
    let _ = writeln!(report, "known\t{}", fit.d());
    let _ = writeln!(report, "latent\t{}", fit.p());
    let _ = writeln!(report, "sigma2\t{}", num(fit.sigma2()));
    let _ = writeln!(report, "loglik\t{}", num(fit.loglik()));
    let _ = writeln!(report, "share_known\t{}", num(shares.known));
    let _ = writeln!(report, "share_latent\t{}", num(shares.latent));
    let _ = writeln!(report, "share_residual\t{}", num(shares.residual));
    if covariate_ids.is_empty() {
        report.push_str("# no covariates retained: latent-only fit\n");
    }
    if let Some(cos) = overlap {
        let latents: Vec<String> = (1..=fit.p()).map(|k| format!("x{k}")).collect();
        let text = format_matrix(cos.as_ref(), &covariate_ids, &latents, "covariate");
        let path = args.out.join("overlap.tsv");
        fs::write(&path, &text).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        report.push_str("# cosine similarity between covariates and latent factors\n");
        report.push_str(&text);
    }
    Ok(report)
}

fn cmd_screen(args: ScreenArgs) -> Result<String, Failure> {
    if !(args.candidates.theta >= 0.0) {
        return Err(Error::InvalidConfig(format!("theta must be >= 0, got {}", args.candidates.theta)).into());
    }
    let y = load_expression(&args.input)?;
    let c = sample_covariance(&y)?;
    let candidates = load_candidates(&args.candidates, &y)?;
    let result = screen_candidates(&c, candidates.values.as_ref(), &candidates.col_ids, args.candidates.theta)?;
    let table = screening_table(&result);
    match args.out {
        Some(path) => {
            fs::write(&path, &table).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            Ok(format!("{} candidates, {} retained\n", result.records.len(), result.retained.len()))
        }
        None => Ok(table),
    }
}

fn cmd_verify(args: VerifyArgs) -> Result<String, Failure> {
    let (c, basis) = match &args.expression {
        Some(path) => {
            let y = load_expression(&InputArgs { expression: path.clone(), layout: args.layout })?;
            if y.n_samples() > MAX_SAMPLES {
                return Err(Error::SizeBound { what: "sample count", value: y.n_samples(), limit: MAX_SAMPLES }.into());
            }
            let z = match &args.covariates {
                Some(cp) => align_samples(read_matrix(cp, Layout::SamplesRows)?, y.sample_ids(), cp)?.values,
                None => Mat::zeros(y.n_samples(), 0),
            };
            (sample_covariance(&y)?, CovariateBasis::new(z)?)
        }
        None => {
            if args.samples > MAX_SAMPLES {
                return Err(Error::SizeBound { what: "sample count", value: args.samples, limit: MAX_SAMPLES }.into());
            }
            if args.samples < 2 || args.genes == 0 {
                return Err(Error::InvalidConfig("need at least 2 samples and 1 gene".into()).into());
            }
            let mut rng = synth::rng(args.seed);
            let planted = synth::planted_expression(args.samples, args.genes, args.known, args.latent, 4.0, &mut rng);
            (sample_covariance(&planted.y)?, CovariateBasis::new(planted.known)?)
        }
    };
    let fit = fit_full(&c, &basis, args.latent)?;
    let oracle = oracle_maximize(&c, &basis, args.latent, args.restarts as usize, args.seed)?;
    let gap = fit.loglik() - oracle.loglik;
    let mut report = String::new();
    let _ = writeln!(report, "samples\t{}", c.n());
    let _ = writeln!(report, "known\t{}", basis.d());
    let _ = writeln!(report, "latent\t{}", args.latent);
    let _ = writeln!(report, "analytic_loglik\t{}", num(fit.loglik()));
    let _ = writeln!(report, "oracle_loglik\t{}", num(oracle.loglik));
    let _ = writeln!(report, "gap\t{}", num(gap));
    let _ = writeln!(report, "oracle_converged\t{}", oracle.converged);
    let _ = writeln!(report, "oracle_evaluations\t{}", oracle.evaluations);
    if gap < VERIFY_GAP {
        print!("{report}");
        return Err(Failure::Verification(format!(
            "oracle exceeds the closed-form log-likelihood by {:.3e} (allowed {:.0e})",
            -gap, -VERIFY_GAP
        )));
    }
    Ok(report)
}

fn cmd_correct(args: CorrectArgs) -> Result<String, Failure> {
    let k_path = args.fit.join(io::COVARIANCE_FILE);
    let k = read_matrix(&k_path, Layout::SamplesRows)?;
    if k.row_ids != k.col_ids {
        return Err(Error::Shape(format!("{}: row and column labels differ", k_path.display())).into());
    }
    let y = load_expression(&args.input)?;
    if k.row_ids != y.sample_ids() {
        return Err(Error::Shape(format!(
            "fitted covariance has {} samples, expression has {}; sample labels must match in order",
            k.nrows(),
            y.n_samples()
        ))
        .into());
    }
    let model = GeneModel::new(k.values)?;
    let mut fits = Vec::with_capacity(y.n_genes());
    for g in 0..y.n_genes() {
        let profile: Vec<f64> = (0..y.n_samples()).map(|i| y.values()[(i, g)]).collect();
        fits.push(fit_gene_variances(&model, &profile)?);
    }
    let corrected = correct_residuals(&model, &y, &fits)?;
    let text = match args.input.layout {
        Layout::SamplesRows => format_matrix(corrected.values(), corrected.sample_ids(), corrected.gene_ids(), "sample"),
        Layout::SamplesCols => {
            format_matrix(corrected.values().transpose(), corrected.gene_ids(), corrected.sample_ids(), "gene")
        }
    };
    fs::write(&args.out, text).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    Ok(format!("corrected {} genes across {} samples\n", y.n_genes(), y.n_samples()))
}
