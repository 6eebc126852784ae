//! Stratified cross-validation, regression metrics, uplift, paired t-tests
//! on absolute errors and demand-tercile token trends.

use crate::semantics::SemanticCaption;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use thiserror::Error;

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{0}")]
    Domain(String),
    #[error("R² is undefined when all targets are equal")]
    ConstantTarget,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Rank-based equal-count bins: `label = floor(rank · k / N)`, ties broken by
/// input order.
pub fn rank_bins(y: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || y.len() < k {
        return Err(EvalError::Domain(format!(
            "cannot split {} samples into {k} rank bins",
            y.len()
        )));
    }
    if y.iter().any(|v| v.is_nan()) {
        return Err(EvalError::Domain("targets contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let n = y.len();
    let mut labels = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = rank * k / n;
    }
    Ok(labels)
}

pub fn quintile_strata(y: &[f64]) -> Result<Vec<usize>> {
    rank_bins(y, 5)
}

pub fn tercile_strata(y: &[f64]) -> Result<Vec<usize>> {
    rank_bins(y, 3)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<usize>,
    pub strata: Vec<usize>,
}

impl FoldAssignment {
    /// Indices of (train, test) rows for fold `f`.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.folds.len()).partition(|&i| self.folds[i] != f)
    }

    pub fn count(&self, fold: usize, stratum: usize) -> usize {
        self.folds
            .iter()
            .zip(&self.strata)
            .filter(|&(&f, &s)| f == fold && s == stratum)
            .count()
    }
}

/// Shuffles each stratum with one seeded stream, then deals samples
/// round-robin; the dealing position carries over between strata so leftover
/// samples spread across folds.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > labels.len() {
        return Err(EvalError::Domain(format!(
            "cannot make {k} folds from {} samples",
            labels.len()
        )));
    }
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in labels.iter().enumerate() {
        strata.entry(s).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldAssignment {
        k,
        seed,
        folds,
        strata: labels.to_vec(),
    })
}

fn check_pair(y: &[f64], pred: &[f64]) -> Result<()> {
    if y.len() != pred.len() {
        return Err(EvalError::Domain(format!(
            "length mismatch: {} targets, {} predictions",
            y.len(),
            pred.len()
        )));
    }
    if y.len() < 2 {
        return Err(EvalError::Domain("metrics need at least 2 samples".into()));
    }
    Ok(())
}

pub fn r_squared(y: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(y, pred)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::ConstantTarget);
    }
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mae(y: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(y, pred)?;
    Ok(y.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Relative R² improvement in percent, rounded to one decimal with exact
/// halves resolved toward zero. `None` when the reference R² is not positive.
pub fn uplift_percent(r2_ref: f64, r2_model: f64) -> Option<f64> {
    if !(r2_ref > 0.0) || !r2_model.is_finite() {
        return None;
    }
    let raw = (r2_model - r2_ref) / r2_ref * 100.0;
    Some(round_half_toward_zero(raw, 1))
}

/// Rounds to `decimals`; values within 1e-9 of a half step go toward zero
/// (absorbs binary noise such as 93.75 arriving as 93.750000000000014).
pub fn round_half_toward_zero(v: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let s = v.abs() * scale;
    let floor = s.floor();
    let frac = s - floor;
    let mag = if (frac - 0.5).abs() < 1e-9 || frac < 0.5 {
        floor
    } else {
        floor + 1.0
    };
    let out = mag.copysign(v) / scale;
    if out == 0.0 {
        0.0
    } else {
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub n: usize,
    pub mean_diff: f64,
    /// `None` when the differences have zero spread.
    pub t: Option<f64>,
    pub p_two_sided: Option<f64>,
    pub degenerate: bool,
}

/// Paired t-test on `|a| − |b|` with sample standard deviation and n − 1
/// degrees of freedom.
pub fn paired_t_abs_errors(errors_a: &[f64], errors_b: &[f64]) -> Result<PairedTTest> {
    if errors_a.len() != errors_b.len() {
        return Err(EvalError::Domain(format!(
            "paired test needs equal lengths, got {} and {}",
            errors_a.len(),
            errors_b.len()
        )));
    }
    let n = errors_a.len();
    if n < 2 {
        return Err(EvalError::Domain("paired test needs n >= 2".into()));
    }
    let d: Vec<f64> = errors_a.iter().zip(errors_b).map(|(a, b)| a.abs() - b.abs()).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Ok(PairedTTest {
            n,
            mean_diff: mean,
            t: None,
            p_two_sided: None,
            degenerate: true,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    Ok(PairedTTest {
        n,
        mean_diff: mean,
        t: Some(t),
        p_two_sided: Some(student_t_two_sided_p(t, (n - 1) as f64)),
        degenerate: false,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `nu` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, nu: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if !t.is_finite() {
        return 0.0;
    }
    let x = nu / (nu + t * t);
    regularized_incomplete_beta(nu / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, n = 9) of ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// I_x(a, b) by the modified Lentz continued fraction, using the symmetry
/// I_x(a, b) = 1 − I_{1−x}(b, a) where the fraction converges faster.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_fraction(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Words dropped from factor names before counting.
pub const STOP_WORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "by", "for", "from", "in", "into", "is", "of", "on", "or",
    "the", "to", "with",
];

/// Lowercased whitespace tokens of the factor names, stop words removed.
pub fn factor_name_tokens(caption: &SemanticCaption) -> BTreeSet<String> {
    caption
        .factors
        .iter()
        .flat_map(|f| f.name.split_whitespace())
        .map(|t| t.to_lowercase())
        .filter(|t| !STOP_WORDS.contains(&t.as_str()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTrend {
    pub token: String,
    /// Share of captions in each demand tercile (low, mid, high) that
    /// mention the token.
    pub frequencies: [f64; 3],
}

impl TokenTrend {
    pub fn range(&self) -> f64 {
        let max = self.frequencies.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.frequencies.iter().cloned().fold(f64::MAX, f64::min);
        max - min
    }
}

/// Per-tercile share of captions mentioning each factor-name token, sorted
/// by the spread across terciles (largest first, then token).
pub fn tercile_token_trends(captions: &[SemanticCaption], y: &[f64]) -> Result<Vec<TokenTrend>> {
    if captions.len() != y.len() {
        return Err(EvalError::Domain(format!(
            "{} captions but {} targets",
            captions.len(),
            y.len()
        )));
    }
    let terciles = tercile_strata(y)?;
    let mut sizes = [0usize; 3];
    terciles.iter().for_each(|&t| sizes[t] += 1);
    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for (cap, &t) in captions.iter().zip(&terciles) {
        for tok in factor_name_tokens(cap) {
            counts.entry(tok).or_default()[t] += 1;
        }
    }
    let mut trends: Vec<TokenTrend> = counts
        .into_iter()
        .map(|(token, c)| TokenTrend {
            token,
            frequencies: [0, 1, 2].map(|i| c[i] as f64 / sizes[i] as f64),
        })
        .collect();
    trends.sort_by(|a, b| b.range().total_cmp(&a.range()).then_with(|| a.token.cmp(&b.token)));
    Ok(trends)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_test: usize,
    pub r2: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population spread across folds.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std }
    }
}

/// Cross-validated result of one model on one feature variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: String,
    pub variant: String,
    pub feature_schema: String,
    pub folds: Vec<FoldMetrics>,
    pub r2: MeanStd,
    pub mae: MeanStd,
    /// Percent R² change versus the reference; `None` when undefined.
    pub uplift_percent: Option<f64>,
    /// Paired test of this model's absolute errors against the reference.
    pub vs_reference: Option<PairedTTest>,
    /// Out-of-fold predictions aligned with `CvReport::ids`.
    pub predictions: Vec<f64>,
}

impl ModelResult {
    pub fn new(model: &str, variant: &str, feature_schema: &str, folds: Vec<FoldMetrics>, predictions: Vec<f64>) -> Self {
        let r2: Vec<f64> = folds.iter().map(|f| f.r2).collect();
        let mae: Vec<f64> = folds.iter().map(|f| f.mae).collect();
        Self {
            model: model.into(),
            variant: variant.into(),
            feature_schema: feature_schema.into(),
            r2: MeanStd::of(&r2),
            mae: MeanStd::of(&mae),
            folds,
            uplift_percent: None,
            vs_reference: None,
            predictions,
        }
    }

    pub fn label(&self) -> String {
        format!("{} [{}]", self.model, self.variant)
    }

    pub fn abs_errors(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.predictions).map(|(a, b)| (a - b).abs()).collect()
    }
}

/// Paired comparison of one variant against another for the same model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantComparison {
    pub model: String,
    pub variant: String,
    pub against: String,
    pub r2_delta: f64,
    pub test: PairedTTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub ids: Vec<String>,
    pub y: Vec<f64>,
    pub folds: Vec<usize>,
    /// What uplift and the paired tests compare against.
    pub reference: String,
    pub results: Vec<ModelResult>,
    pub comparisons: Vec<VariantComparison>,
    /// Seeds, hyperparameters and schema versions that produced the report.
    pub settings: BTreeMap<String, serde_json::Value>,
}

impl CvReport {
    pub fn result(&self, model: &str, variant: &str) -> Option<&ModelResult> {
        self.results.iter().find(|r| r.model == model && r.variant == variant)
    }

    /// Fills uplift and reference tests; `reference_pred` are out-of-fold
    /// reference predictions with the reference's mean fold R².
    pub fn attach_reference(&mut self, name: &str, reference_r2: f64, reference_pred: &[f64]) -> Result<()> {
        self.reference = name.into();
        let ref_err: Vec<f64> = self.y.iter().zip(reference_pred).map(|(a, b)| (a - b).abs()).collect();
        for r in &mut self.results {
            r.uplift_percent = uplift_percent(reference_r2, r.r2.mean);
            let errs = r.abs_errors(&self.y);
            r.vs_reference = Some(paired_t_abs_errors(&errs, &ref_err)?);
        }
        Ok(())
    }

    /// Compares every later variant of each model with its first variant.
    pub fn compare_variants(&mut self) -> Result<()> {
        let mut comparisons = Vec::new();
        let mut first: BTreeMap<&str, &ModelResult> = BTreeMap::new();
        for r in &self.results {
            match first.get(r.model.as_str()) {
                None => {
                    first.insert(&r.model, r);
                }
                Some(base) => comparisons.push(VariantComparison {
                    model: r.model.clone(),
                    variant: r.variant.clone(),
                    against: base.variant.clone(),
                    r2_delta: r.r2.mean - base.r2.mean,
                    test: paired_t_abs_errors(&r.abs_errors(&self.y), &base.abs_errors(&self.y))?,
                }),
            }
        }
        self.comparisons = comparisons;
        Ok(())
    }

    /// Markdown table `Model | R² (± std) | MAE (± std) | %R²` followed by the
    /// variant comparisons.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "## Cross-validated results ({}-fold, n = {}, seed {})\n",
            self.k, self.n_samples, self.seed
        );
        let _ = writeln!(out, "Uplift reference: {}\n", self.reference);
        out.push_str("| Model | Features | R² (± std) | MAE (± std) | %R² | p vs reference |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for r in &self.results {
            let uplift = match r.uplift_percent {
                Some(u) => format!("{u:+.1}%"),
                None => "n/a".into(),
            };
            let p = match r.vs_reference.and_then(|t| t.p_two_sided) {
                Some(p) => format!("{p:.3e}"),
                None => "n/a".into(),
            };
            let _ = writeln!(
                out,
                "| {} | {} | {:.2} (± {:.2}) | {:.2} (± {:.2}) | {} | {} |",
                r.model, r.feature_schema, r.r2.mean, r.r2.std, r.mae.mean, r.mae.std, uplift, p
            );
        }
        if !self.comparisons.is_empty() {
            out.push_str("\n### Feature-set comparisons (paired t on absolute errors)\n\n");
            out.push_str("| Model | Variant | vs | ΔR² | t | p |\n|---|---|---|---|---|---|\n");
            for c in &self.comparisons {
                let (t, p) = match (c.test.t, c.test.p_two_sided) {
                    (Some(t), Some(p)) => (format!("{t:.3}"), format!("{p:.3e}")),
                    _ => ("degenerate".into(), "n/a".into()),
                };
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {:+.3} | {} | {} |",
                    c.model, c.variant, c.against, c.r2_delta, t, p
                );
            }
        }
        out
    }
}
