//! Offset power-law and log-law fits of metric-vs-size points.
//!
//! The offset law is `P(N) = P0 - (N / N0)^(-a)` with `N0 > 0`, `a > 0`.
//! Internally the solver works on `(P0, ln N0, s)` with `a = softplus(s)`,
//! so both constraints hold by construction. The log law is
//! `P(N) = slope · ln N + intercept`. RMSE is on raw metric values.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};

/// `(N, P)` with `N` the backbone parameter count and `P` a metric value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n: f64,
    pub p: f64,
}

/// Keeps one point per `N` (the one with the largest `P`), sorted by `N`.
pub fn dedup_max(points: &[ScalingPoint]) -> Vec<ScalingPoint> {
    let mut sorted = canonical(points);
    sorted.dedup_by(|later, kept| {
        if later.n == kept.n {
            kept.p = kept.p.max(later.p);
            true
        } else {
            false
        }
    });
    sorted
}

fn canonical(points: &[ScalingPoint]) -> Vec<ScalingPoint> {
    let mut v = points.to_vec();
    v.sort_by(|x, y| x.n.total_cmp(&y.n).then(x.p.total_cmp(&y.p)));
    v
}

fn distinct_n(points: &[ScalingPoint]) -> usize {
    dedup_max(points).len()
}

fn check_points(points: &[ScalingPoint]) -> Result<()> {
    for q in points {
        if q.n.is_nan() || q.n < 1.0 || !q.n.is_finite() || !q.p.is_finite() {
            return input_err(format!("invalid scaling point (N={}, P={})", q.n, q.p));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetFit {
    pub p0: f64,
    pub n0: f64,
    pub a: f64,
    pub rmse: f64,
}

impl OffsetFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.p0 - self.headroom(n)
    }

    /// Residual headroom `P0 - P(N) = (N / N0)^(-a)`.
    pub fn headroom(&self, n: f64) -> f64 {
        (-self.a * (n.ln() - self.n0.ln())).exp()
    }

    /// Norm of the Gauss-Newton gradient `Jᵀr` at this fit, in the solver's
    /// `(P0, ln N0, s)` coordinates.
    pub fn gradient_norm(&self, points: &[ScalingPoint]) -> f64 {
        let theta = [self.p0, self.n0.ln(), softplus_inv(self.a)];
        let (g, _, _) = normal_equations(&canonical(points), &theta);
        g.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogFit {
    pub slope: f64,
    pub intercept: f64,
    pub rmse: f64,
}

impl LogFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.slope * n.ln() + self.intercept
    }
}

fn softplus(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        s.exp().ln_1p()
    }
}

fn softplus_inv(a: f64) -> f64 {
    if a > 30.0 {
        a
    } else {
        a.exp_m1().ln()
    }
}

fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

/// Residuals `P(N_i) - P_i` for parameters `(P0, ln N0, s)`.
fn residuals(points: &[ScalingPoint], theta: &[f64; 3]) -> Vec<f64> {
    let a = softplus(theta[2]);
    points
        .iter()
        .map(|q| theta[0] - (-a * (q.n.ln() - theta[1])).exp() - q.p)
        .collect()
}

fn cost(points: &[ScalingPoint], theta: &[f64; 3]) -> f64 {
    residuals(points, theta).iter().map(|r| r * r).sum()
}

/// `(Jᵀr, JᵀJ, Σr²)` at `theta`.
fn normal_equations(points: &[ScalingPoint], theta: &[f64; 3]) -> ([f64; 3], [[f64; 3]; 3], f64) {
    let a = softplus(theta[2]);
    let da = sigmoid(theta[2]);
    let mut g = [0.0; 3];
    let mut h = [[0.0; 3]; 3];
    let mut sse = 0.0;
    for q in points {
        let x = q.n.ln() - theta[1];
        let e = (-a * x).exp();
        let r = theta[0] - e - q.p;
        let j = [1.0, -a * e, e * x * da];
        for i in 0..3 {
            g[i] += j[i] * r;
            for k in 0..3 {
                h[i][k] += j[i] * j[k];
            }
        }
        sse += r * r;
    }
    (g, h, sse)
}

/// Solves a 3×3 system by Gaussian elimination with partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            let pivot_row = m[col];
            for (x, p) in m[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| m[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / m[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub const MAX_ITERATIONS: usize = 500;
pub const STEP_TOLERANCE: f64 = 1e-10;

/// Damped Gauss-Newton (Levenberg-Marquardt) from one start.
fn refine(points: &[ScalingPoint], start: [f64; 3]) -> [f64; 3] {
    let mut theta = start;
    let mut current = cost(points, &theta);
    let mut lambda = 1e-3;
    for _ in 0..MAX_ITERATIONS {
        let (g, h, _) = normal_equations(points, &theta);
        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = h;
            for i in 0..3 {
                damped[i][i] += lambda * h[i][i].max(1e-12);
            }
            let Some(step) = solve3(damped, [-g[0], -g[1], -g[2]]) else {
                lambda *= 10.0;
                continue;
            };
            let cand = [theta[0] + step[0], theta[1] + step[1], theta[2] + step[2]];
            let c = cost(points, &cand);
            if c.is_finite() && c <= current {
                let norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
                theta = cand;
                current = c;
                lambda = (lambda / 3.0).max(1e-15);
                accepted = true;
                if norm < STEP_TOLERANCE {
                    return theta;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    theta
}

fn starts(points: &[ScalingPoint]) -> Vec<[f64; 3]> {
    let max_p = points.iter().map(|q| q.p).fold(f64::NEG_INFINITY, f64::max);
    let lo = points[0].n.log10().floor() as i32;
    let hi = points[points.len() - 1].n.log10().ceil() as i32;
    let mut out = Vec::new();
    for i in 0..10 {
        let a = 0.05 + (1.0 - 0.05) * i as f64 / 9.0;
        for dec in lo..=hi {
            for j in 0..4 {
                let p0 = max_p + 0.1 * j as f64;
                out.push([p0, dec as f64 * std::f64::consts::LN_10, softplus_inv(a)]);
            }
        }
    }
    out
}

/// Least-squares offset power-law fit.
pub fn fit_offset(points: &[ScalingPoint]) -> Result<OffsetFit> {
    check_points(points)?;
    if points.len() < 4 {
        return input_err(format!("offset fit needs at least 4 points, got {}", points.len()));
    }
    if distinct_n(points) < 3 {
        return input_err("offset fit needs at least 3 distinct N");
    }
    let pts = canonical(points);
    if pts.iter().all(|q| q.p == pts[0].p) {
        return Err(Error::DegenerateFit("all metric values are identical".into()));
    }
    let fits: Vec<OffsetFit> = starts(&pts)
        .into_par_iter()
        .map(|s| {
            let theta = refine(&pts, s);
            let rmse = (cost(&pts, &theta) / pts.len() as f64).sqrt();
            OffsetFit { p0: theta[0], n0: theta[1].exp(), a: softplus(theta[2]), rmse }
        })
        .filter(|f| f.rmse.is_finite() && f.n0.is_finite() && f.n0 > 0.0 && f.a > 0.0)
        .collect();
    fits.into_iter()
        .min_by(|x, y| x.rmse.total_cmp(&y.rmse).then(x.a.total_cmp(&y.a)))
        .ok_or_else(|| Error::DegenerateFit("no start converged to a finite fit".into()))
}

/// Ordinary least squares of `P` on `ln N`.
pub fn fit_log(points: &[ScalingPoint]) -> Result<LogFit> {
    check_points(points)?;
    if distinct_n(points) < 2 {
        return input_err("log fit needs at least 2 distinct N");
    }
    let pts = canonical(points);
    let m = pts.len() as f64;
    let mx = pts.iter().map(|q| q.n.ln()).sum::<f64>() / m;
    let my = pts.iter().map(|q| q.p).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|q| (q.n.ln() - mx) * (q.p - my)).sum();
    let sxx: f64 = pts.iter().map(|q| (q.n.ln() - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = pts.iter().map(|q| (slope * q.n.ln() + intercept - q.p).powi(2)).sum();
    Ok(LogFit { slope, intercept, rmse: (sse / m).sqrt() })
}

/// Relative RMSE reduction of the offset law over the log law.
pub fn rmse_reduction(rmse_offset: f64, rmse_log: f64) -> f64 {
    if rmse_log == 0.0 {
        return 0.0;
    }
    1.0 - rmse_offset / rmse_log
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitComparison {
    pub offset: OffsetFit,
    pub log: LogFit,
    pub reduction: f64,
}

pub fn compare_fits(points: &[ScalingPoint]) -> Result<FitComparison> {
    let offset = fit_offset(points)?;
    let log = fit_log(points)?;
    Ok(FitComparison { offset, log, reduction: rmse_reduction(offset.rmse, log.rmse) })
}

/// Points grouped by task label, in label order.
pub type TaskPoints = BTreeMap<String, Vec<ScalingPoint>>;

pub const POINTS_CSV_HEADER: &str = "task,n,p";
pub const FIT_CSV_HEADER: &str =
    "task,p0,n0,a,rmse_offset,log_slope,log_intercept,rmse_log,reduction";
pub const CURVE_CSV_HEADER: &str = "task,n,p_offset,p_log";

/// Reads `task,n,p` rows (header required).
pub fn read_points_csv<R: BufRead>(r: R) -> Result<TaskPoints> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != POINTS_CSV_HEADER {
        return input_err(format!("expected header `{POINTS_CSV_HEADER}`"));
    }
    let mut out = TaskPoints::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [task, n, p] = fields[..] else {
            return input_err(format!("line {}: expected 3 fields", i + 2));
        };
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Input(format!("line {}: bad number `{s}`: {e}", i + 2)))
        };
        let q = ScalingPoint { n: parse(n)?, p: parse(p)? };
        out.entry(task.to_string()).or_default().push(q);
    }
    for pts in out.values() {
        check_points(pts)?;
    }
    Ok(out)
}

pub fn write_points_csv<W: Write>(mut w: W, points: &TaskPoints) -> Result<()> {
    writeln!(w, "{POINTS_CSV_HEADER}")?;
    for (task, pts) in points {
        for q in pts {
            writeln!(w, "{task},{},{}", q.n, q.p)?;
        }
    }
    Ok(())
}

pub fn write_fits_csv<W: Write>(mut w: W, fits: &[(String, FitComparison)]) -> Result<()> {
    writeln!(w, "{FIT_CSV_HEADER}")?;
    for (task, f) in fits {
        writeln!(
            w,
            "{task},{},{},{},{},{},{},{},{}",
            f.offset.p0,
            f.offset.n0,
            f.offset.a,
            f.offset.rmse,
            f.log.slope,
            f.log.intercept,
            f.log.rmse,
            f.reduction
        )?;
    }
    Ok(())
}

/// Both fitted curves at `count` log-spaced sizes over `[n_min, n_max]`.
pub fn write_curves_csv<W: Write>(
    mut w: W,
    fits: &[(String, FitComparison)],
    n_min: f64,
    n_max: f64,
    count: usize,
) -> Result<()> {
    writeln!(w, "{CURVE_CSV_HEADER}")?;
    let count = count.max(2);
    for (task, f) in fits {
        for i in 0..count {
            let x = n_min.ln() + (n_max.ln() - n_min.ln()) * i as f64 / (count - 1) as f64;
            let n = x.exp();
            writeln!(w, "{task},{n},{},{}", f.offset.predict(n), f.log.predict(n))?;
        }
    }
    Ok(())
}
