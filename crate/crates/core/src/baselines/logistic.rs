use nalgebra::{DMatrix, DVector};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};

/// Coefficient magnitude beyond which a fit is reported as separated.
const SEPARATION_BETA: f64 = 30.0;
/// Fitted probabilities this close to every label also indicate separation.
const SEPARATION_FIT: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitOptions {
    pub ridge: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub fit_intercept: bool,
}

impl Default for LogitOptions {
    fn default() -> Self {
        LogitOptions {
            ridge: 1e-6,
            max_iter: 100,
            tol: 1e-8,
            fit_intercept: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitWarning {
    NotConverged,
    Separation,
}

/// A fitted logistic regression.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Standard errors from the inverse observed information, intercept
    /// first when one was fitted.
    pub std_errors: Vec<f64>,
    pub iterations: usize,
    pub warnings: Vec<LogitWarning>,
}

impl LogitFit {
    pub fn converged(&self) -> bool {
        !self.warnings.contains(&LogitWarning::NotConverged)
    }

    pub fn odds_ratios(&self) -> Vec<f64> {
        self.coefficients.iter().map(|b| b.exp()).collect()
    }

    /// Standard error of coefficient `j` (not the intercept).
    pub fn coefficient_se(&self, j: usize) -> f64 {
        let offset = usize::from(self.std_errors.len() > self.coefficients.len());
        self.std_errors[offset + j]
    }

    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum::<f64>()
    }
}

/// Maximum-likelihood logistic regression of `y` on the rows of `x` by
/// iteratively reweighted least squares with a ridge penalty `ridge * |β|²/2`.
/// An optional per-row `offset` enters the linear predictor with a fixed
/// coefficient of one.
pub fn logit_fit(
    x: &[Vec<f64>],
    y: &[f64],
    offset: Option<&[f64]>,
    options: &LogitOptions,
) -> Result<LogitFit> {
    let n = y.len();
    if x.len() != n || offset.is_some_and(|o| o.len() != n) {
        return Err(Error::Shape(format!(
            "{} rows, {} labels, {} offsets",
            x.len(),
            n,
            offset.map_or(n, <[f64]>::len)
        )));
    }
    if n == 0 {
        return Err(Error::Shape("logistic regression on no rows".into()));
    }
    let k = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("ragged design matrix".into()));
    }
    let icpt = usize::from(options.fit_intercept);
    let p = k + icpt;
    if p == 0 {
        return Err(Error::Shape("no coefficients to fit".into()));
    }
    let design = DMatrix::from_fn(n, p, |i, j| if j < icpt { 1.0 } else { x[i][j - icpt] });
    let off = DVector::from_fn(n, |i, _| offset.map_or(0.0, |o| o[i]));
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(p);
    let mut warnings = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut info = DMatrix::zeros(p, p);

    while iterations < options.max_iter {
        iterations += 1;
        let eta = &design * &beta + &off;
        let prob = eta.map(sigmoid);
        let w = prob.map(|q| (q * (1.0 - q)).max(1e-12));
        let grad = design.transpose() * (&yv - &prob) - &beta * options.ridge;
        info = weighted_gram(&design, &w);
        for d in 0..p {
            info[(d, d)] += options.ridge;
        }
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => match info.clone().lu().solve(&grad) {
                Some(s) => s,
                None => return Err(Error::Internal("singular information matrix".into())),
            },
        };
        beta += &step;
        if !beta.iter().all(|b| b.is_finite()) {
            return Err(Error::Internal("logistic regression diverged".into()));
        }
        if step.amax() < options.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("logistic regression did not converge in {} iterations", options.max_iter);
        warnings.push(LogitWarning::NotConverged);
    }
    let eta = &design * &beta + &off;
    let fitted_exactly = eta
        .iter()
        .zip(y)
        .all(|(&e, &yy)| (sigmoid(e) - yy).abs() < SEPARATION_FIT);
    if beta.amax() > SEPARATION_BETA || fitted_exactly {
        log::debug!("logistic regression data appear separated");
        warnings.push(LogitWarning::Separation);
    }
    let std_errors = match info.try_inverse() {
        Some(inv) => (0..p).map(|d| inv[(d, d)].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; p],
    };
    let coefficients = beta.iter().skip(icpt).copied().collect();
    Ok(LogitFit {
        intercept: if icpt == 1 { beta[0] } else { 0.0 },
        coefficients,
        std_errors,
        iterations,
        warnings,
    })
}

fn weighted_gram(design: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = design.clone();
    for (mut row, &wi) in scaled.row_iter_mut().zip(w.iter()) {
        row *= wi;
    }
    design.transpose() * scaled
}

/// Probability and linear predictor for each row.
pub fn logit_predict(fit: &LogitFit, x: &[Vec<f64>]) -> Vec<(f64, f64)> {
    x.iter()
        .map(|row| {
            let eta = fit.linear_predictor(row);
            (sigmoid(eta), eta)
        })
        .collect()
}

/// `feature,beta,odds_ratio` rows, intercept first.
pub fn coefficients_csv(fit: &LogitFit, names: &[String]) -> String {
    let mut out = String::from("feature,beta,odds_ratio\n");
    out.push_str(&format!("intercept,{},{}\n", fit.intercept, fit.intercept.exp()));
    for (name, b) in names.iter().zip(&fit.coefficients) {
        out.push_str(&format!("{name},{b},{}\n", b.exp()));
    }
    out
}
