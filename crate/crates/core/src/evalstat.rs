//! Agreement statistics between predicted and reference lung volumes:
//! MAE, MAPE, Pearson r, nonparametric Bland-Altman limits, Shapiro-Wilk,
//! QQ data, and CSV/SVG report emission.
//!
//! Volumes enter in liters; MAE, bias and limits are reported in ml.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatError {
    #[error("paired inputs differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("reference value at index {0} is zero; MAPE is undefined")]
    ZeroReference(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("Shapiro-Wilk needs 3..=5000 values, got {0}")]
    SampleSize(usize),
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn check_pair(a: &[f64], b: &[f64], needed: usize) -> Result<(), StatError> {
    if a.len() != b.len() {
        return Err(StatError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < needed {
        return Err(StatError::TooFew { needed, got: a.len() });
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(StatError::NonFinite(i));
        }
    }
    Ok(())
}

/// Mean absolute error in ml.
pub fn mae_ml(pred: &[f64], reference: &[f64]) -> Result<f64, StatError> {
    check_pair(pred, reference, 1)?;
    let sum: f64 = pred.iter().zip(reference).map(|(p, r)| (p - r).abs()).sum();
    Ok(1000.0 * sum / pred.len() as f64)
}

/// Mean absolute percentage error relative to the reference.
pub fn mape_pct(pred: &[f64], reference: &[f64]) -> Result<f64, StatError> {
    check_pair(pred, reference, 1)?;
    if let Some(i) = reference.iter().position(|&r| r == 0.0) {
        return Err(StatError::ZeroReference(i));
    }
    let sum: f64 = pred.iter().zip(reference).map(|(p, r)| ((p - r) / r).abs()).sum();
    Ok(100.0 * sum / pred.len() as f64)
}

/// Pearson correlation, or an explicit marker when either input is constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    Defined(f64),
    Degenerate,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Defined(r) => Some(r),
            Correlation::Degenerate => None,
        }
    }
}

impl std::fmt::Display for Correlation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Correlation::Defined(r) => write!(f, "{r:.6}"),
            Correlation::Degenerate => f.write_str("degenerate"),
        }
    }
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<Correlation, StatError> {
    check_pair(x, y, 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation::Degenerate);
    }
    Ok(Correlation::Defined((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// Quantile of an ascending sample by linear interpolation between order
/// statistics at 1-based position `p (N - 1) + 1`.
///
/// # Panics
/// On an empty sample or `p` outside `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    assert!((0.0..=1.0).contains(&p), "quantile level {p} outside [0, 1]");
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    match sorted.get(lo + 1) {
        Some(&next) if frac > 0.0 => sorted[lo] + frac * (next - sorted[lo]),
        _ => sorted[lo],
    }
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, p)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Nonparametric Bland-Altman summary; all fields in ml.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    /// Median of `pred - ref`.
    pub bias_ml: f64,
    pub p2_5_ml: f64,
    pub p97_5_ml: f64,
    pub diffs_ml: Vec<f64>,
}

pub fn bland_altman_np(pred: &[f64], reference: &[f64]) -> Result<BlandAltman, StatError> {
    check_pair(pred, reference, 3)?;
    let diffs_ml: Vec<f64> = pred.iter().zip(reference).map(|(p, r)| 1000.0 * (p - r)).collect();
    let mut sorted = diffs_ml.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BlandAltman {
        bias_ml: quantile_sorted(&sorted, 0.5),
        p2_5_ml: quantile_sorted(&sorted, 0.025),
        p97_5_ml: quantile_sorted(&sorted, 0.975),
        diffs_ml,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p: f64,
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Shapiro-Wilk W and p-value using Royston's approximation for the
/// coefficients and the normalizing transformation of W (algorithm AS R94).
pub fn shapiro_wilk(x: &[f64]) -> Result<ShapiroWilk, StatError> {
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    const C3: [f64; 4] = [0.5440, -0.39978, 0.025054, -6.714e-4];
    const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
    const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
    const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
    const G: [f64; 2] = [-2.273, 0.459];

    let n = x.len();
    if !(3..=5000).contains(&n) {
        return Err(StatError::SampleSize(n));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(StatError::NonFinite(i));
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let range = s[n - 1] - s[0];
    if range <= 0.0 {
        return Err(StatError::ZeroVariance);
    }

    let half = n / 2;
    let an = n as f64;
    // Coefficients for the upper half, a[0] largest.
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let normal = std_normal();
        let m: Vec<f64> = (1..=half)
            .map(|i| -normal.inverse_cdf((i as f64 - 0.375) / (an + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) + m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = poly(&C2, rsn) + m[1] / ssumm2;
            a[1] = a2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            (2, fac)
        } else {
            (1, ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt())
        };
        a[0] = a1;
        for i in first..half {
            a[i] = m[i] / fac;
        }
    }

    let scaled: Vec<f64> = s.iter().map(|v| (v - s[0]) / range).collect();
    let mean = scaled.iter().sum::<f64>() / an;
    let ssq: f64 = scaled.iter().map(|v| (v - mean) * (v - mean)).sum();
    let num: f64 = (0..half).map(|i| a[i] * (scaled[n - 1 - i] - scaled[i])).sum();
    let w = ((num * num) / ssq).min(1.0);

    let p = if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        (pi6 * (w.sqrt().asin() - std::f64::consts::FRAC_PI_3)).clamp(0.0, 1.0)
    } else {
        let mut w1 = (1.0 - w).ln();
        let (mu, sigma) = if n <= 11 {
            let gamma = poly(&G, an);
            if w1 >= gamma {
                return Ok(ShapiroWilk { w, p: 0.0 });
            }
            w1 = -(gamma - w1).ln();
            (poly(&C3, an), poly(&C4, an).exp())
        } else {
            let ln_n = an.ln();
            (poly(&C5, ln_n), poly(&C6, ln_n).exp())
        };
        1.0 - std_normal().cdf((w1 - mu) / sigma)
    };
    Ok(ShapiroWilk { w, p })
}

/// `(Φ⁻¹((i - 0.5) / N), x_(i))` for the sorted sample.
pub fn qq_points(x: &[f64]) -> Result<Vec<(f64, f64)>, StatError> {
    if x.len() < 2 {
        return Err(StatError::TooFew { needed: 2, got: x.len() });
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let normal = std_normal();
    Ok(s.into_iter()
        .enumerate()
        .map(|(i, v)| (normal.inverse_cdf((i as f64 + 0.5) / n), v))
        .collect())
}

/// Full agreement report of predictions against a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub case_ids: Vec<String>,
    pub predicted: Vec<f64>,
    pub reference: Vec<f64>,
    pub n: usize,
    pub mae_ml: f64,
    pub mape_pct: f64,
    pub pearson: Correlation,
    pub bland_altman: BlandAltman,
    /// Normality of the differences; `None` when the differences are
    /// constant.
    pub shapiro: Option<ShapiroWilk>,
}

impl EvalReport {
    pub fn new(case_ids: Vec<String>, predicted: Vec<f64>, reference: Vec<f64>) -> Result<Self, StatError> {
        if case_ids.len() != predicted.len() {
            return Err(StatError::LengthMismatch(case_ids.len(), predicted.len()));
        }
        let bland_altman = bland_altman_np(&predicted, &reference)?;
        let shapiro = match shapiro_wilk(&bland_altman.diffs_ml) {
            Ok(sw) => Some(sw),
            Err(StatError::ZeroVariance) | Err(StatError::SampleSize(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            n: predicted.len(),
            mae_ml: mae_ml(&predicted, &reference)?,
            mape_pct: mape_pct(&predicted, &reference)?,
            pearson: pearson_r(&predicted, &reference)?,
            bland_altman,
            shapiro,
            case_ids,
            predicted,
            reference,
        })
    }
}

/// One row of the model comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub architecture: String,
    pub mape_pct: f64,
    pub mae_ml: f64,
    pub pearson: Correlation,
    pub n: usize,
}

impl MetricsRow {
    pub fn from_report(model: &str, architecture: &str, r: &EvalReport) -> Self {
        Self {
            model: model.to_string(),
            architecture: architecture.to_string(),
            mape_pct: r.mape_pct,
            mae_ml: r.mae_ml,
            pearson: r.pearson,
            n: r.n,
        }
    }
}

pub const METRICS_HEADER: [&str; 6] = ["model", "architecture", "mape_pct", "mae_ml", "pearson_r", "n"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StatError + '_ {
    move |source| StatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, StatError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(f))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), StatError> {
    let mut w = csv_writer(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.architecture.clone(),
            format!("{:.6}", r.mape_pct),
            format!("{:.6}", r.mae_ml),
            r.pearson.to_string(),
            r.n.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

/// Per-case predictions: `case_id,predicted_liters,reference_liters,diff_ml`.
pub fn write_predictions_csv(path: &Path, r: &EvalReport) -> Result<(), StatError> {
    let mut w = csv_writer(path)?;
    w.write_record(["case_id", "predicted_liters", "reference_liters", "diff_ml"])?;
    for i in 0..r.n {
        w.write_record([
            r.case_ids[i].clone(),
            format!("{:.6}", r.predicted[i]),
            format!("{:.6}", r.reference[i]),
            format!("{:.6}", r.bland_altman.diffs_ml[i]),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

/// Bland-Altman points plus the summary lines as trailing comment-free rows
/// of kind `bias`, `p2.5`, `p97.5`.
pub fn write_bland_altman_csv(path: &Path, r: &EvalReport) -> Result<(), StatError> {
    let mut w = csv_writer(path)?;
    w.write_record(["kind", "case_id", "mean_liters", "diff_ml"])?;
    for i in 0..r.n {
        w.write_record([
            "point".to_string(),
            r.case_ids[i].clone(),
            format!("{:.6}", 0.5 * (r.predicted[i] + r.reference[i])),
            format!("{:.6}", r.bland_altman.diffs_ml[i]),
        ])?;
    }
    let ba = &r.bland_altman;
    for (kind, v) in [("bias", ba.bias_ml), ("p2.5", ba.p2_5_ml), ("p97.5", ba.p97_5_ml)] {
        w.write_record([kind.to_string(), String::new(), String::new(), format!("{v:.6}")])?;
    }
    w.flush().map_err(io_err(path))
}

const SVG_SIZE: f64 = 800.0;
const MARGIN: f64 = 80.0;

/// Linear map from a data interval onto the plot area.
struct Axis {
    lo: f64,
    hi: f64,
    flip: bool,
}

impl Axis {
    fn new(lo: f64, hi: f64, flip: bool) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let pad = 0.05 * (hi - lo);
        Self {
            lo: lo - pad,
            hi: hi + pad,
            flip,
        }
    }

    fn px(&self, v: f64) -> f64 {
        let t = (v - self.lo) / (self.hi - self.lo);
        let span = SVG_SIZE - 2.0 * MARGIN;
        if self.flip {
            SVG_SIZE - MARGIN - t * span
        } else {
            MARGIN + t * span
        }
    }
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
        SVG_SIZE
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="40" font-size="20" text-anchor="middle">{}</text>"#,
        SVG_SIZE / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{w}" height="{w}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        w = SVG_SIZE - 2.0 * MARGIN
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axis_labels(s: &mut String, x: &Axis, y: &Axis, xlabel: &str, ylabel: &str) {
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = x.lo + t * (x.hi - x.lo);
        let yv = y.lo + t * (y.hi - y.lo);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{:.2}</text>"#,
            x.px(xv),
            SVG_SIZE - MARGIN + 18.0,
            xv
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{:.2}</text>"#,
            MARGIN - 6.0,
            y.px(yv) + 4.0,
            yv
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="16" text-anchor="middle">{}</text>"#,
        SVG_SIZE / 2.0,
        SVG_SIZE - 25.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="25" y="{0:.2}" font-size="16" text-anchor="middle" transform="rotate(-90 25 {0:.2})">{1}</text>"#,
        SVG_SIZE / 2.0,
        escape(ylabel)
    );
}

/// Scatter of reference (x) against prediction (y) in liters with the red
/// line of identity.
pub fn scatter_svg(r: &EvalReport, label_pred: &str, label_ref: &str) -> String {
    let all = r.predicted.iter().chain(&r.reference).copied();
    let lo = all.clone().fold(f64::INFINITY, f64::min);
    let hi = all.fold(f64::NEG_INFINITY, f64::max);
    let (x, y) = (Axis::new(lo, hi, false), Axis::new(lo, hi, true));
    let mut s = svg_open(&format!("{label_pred} vs {label_ref} (N = {})", r.n));
    let _ = writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="red" stroke-width="2"/>"#,
        x.px(x.lo),
        y.px(x.lo),
        x.px(x.hi),
        y.px(x.hi)
    );
    for (p, rf) in r.predicted.iter().zip(&r.reference) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
            x.px(*rf),
            y.px(*p)
        );
    }
    axis_labels(&mut s, &x, &y, &format!("{label_ref} TLV (L)"), &format!("{label_pred} TLV (L)"));
    s.push_str("</svg>\n");
    s
}

/// Bland-Altman plot: mean of the pair (L) against the difference (L) with
/// the median bias and the 2.5/97.5 percentile limits.
pub fn bland_altman_svg(r: &EvalReport, label_pred: &str, label_ref: &str) -> String {
    let means: Vec<f64> = r.predicted.iter().zip(&r.reference).map(|(a, b)| 0.5 * (a + b)).collect();
    let diffs: Vec<f64> = r.bland_altman.diffs_ml.iter().map(|d| d / 1000.0).collect();
    let ba = &r.bland_altman;
    let lines = [ba.bias_ml / 1000.0, ba.p2_5_ml / 1000.0, ba.p97_5_ml / 1000.0];
    let mn = means.iter().copied().fold(f64::INFINITY, f64::min);
    let mx = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let dlo = diffs.iter().chain(&lines).copied().fold(0.0, f64::min);
    let dhi = diffs.iter().chain(&lines).copied().fold(0.0, f64::max);
    let (x, y) = (Axis::new(mn, mx, false), Axis::new(dlo, dhi, true));
    let mut s = svg_open(&format!(
        "{label_pred} - {label_ref}: bias {:.0} ml, P2.5 {:.0} ml, P97.5 {:.0} ml",
        ba.bias_ml, ba.p2_5_ml, ba.p97_5_ml
    ));
    for (v, dash) in lines.iter().zip(["", r#" stroke-dasharray="6 4""#, r#" stroke-dasharray="6 4""#]) {
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="red" stroke-width="2"{dash}/>"#,
            x.px(x.lo),
            y.px(*v),
            x.px(x.hi),
            y.px(*v)
        );
    }
    for (m, d) in means.iter().zip(&diffs) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
            x.px(*m),
            y.px(*d)
        );
    }
    axis_labels(
        &mut s,
        &x,
        &y,
        "Mean of measurements (L)",
        &format!("{label_pred} - {label_ref} (L)"),
    );
    s.push_str("</svg>\n");
    s
}

fn write_file(path: &Path, content: &str) -> Result<(), StatError> {
    fs::write(path, content).map_err(io_err(path))
}

/// Writes `predictions.csv`, `bland_altman.csv`, `scatter.svg` and
/// `bland_altman.svg` for a report into `dir`.
pub fn write_report_files(dir: &Path, r: &EvalReport, label_pred: &str, label_ref: &str) -> Result<(), StatError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_predictions_csv(&dir.join("predictions.csv"), r)?;
    write_bland_altman_csv(&dir.join("bland_altman.csv"), r)?;
    write_file(&dir.join("scatter.svg"), &scatter_svg(r, label_pred, label_ref))?;
    write_file(&dir.join("bland_altman.svg"), &bland_altman_svg(r, label_pred, label_ref))
}

/// Compares two paired measurement series, `a` treated as the prediction
/// and `b` as the reference, and writes the plots and CSVs into `out_dir`.
pub fn compare_measurements(
    case_ids: Vec<String>,
    a: &[f64],
    b: &[f64],
    label_a: &str,
    label_b: &str,
    out_dir: &Path,
) -> Result<EvalReport, StatError> {
    let report = EvalReport::new(case_ids, a.to_vec(), b.to_vec())?;
    write_report_files(out_dir, &report, label_a, label_b)?;
    Ok(report)
}
