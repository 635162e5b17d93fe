//! Linear prediction models and the four evaluation metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: Task,
    pub lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl ModelSpec {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            lambda: 1e-6,
            max_iter: 100,
            tol: 1e-10,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tolerance {} must be > 0", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    Logloss,
    R2,
    Rmse,
}

impl Metric {
    pub fn higher_better(self) -> bool {
        matches!(self, Metric::Auc | Metric::R2)
    }

    /// Sign that turns a raw augmented-minus-baseline difference into an
    /// improvement-positive one.
    pub fn orientation(self) -> f64 {
        if self.higher_better() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn for_task(task: Task) -> [Metric; 2] {
        match task {
            Task::Binary => [Metric::Auc, Metric::Logloss],
            Task::Continuous => [Metric::R2, Metric::Rmse],
        }
    }

    pub fn primary(task: Task) -> Metric {
        Metric::for_task(task)[0]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::Logloss => "logloss",
            Metric::R2 => "r2",
            Metric::Rmse => "rmse",
        }
    }

    pub fn compute(self, preds: &[f64], targets: &[f64]) -> Result<f64> {
        match self {
            Metric::Auc => auc(preds, targets),
            Metric::Logloss => logloss(preds, targets),
            Metric::R2 => r2(preds, targets),
            Metric::Rmse => rmse(preds, targets),
        }
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(format!("{} predictions, {} targets", a.len(), b.len())));
    }
    Ok(())
}

fn check_labels(labels: &[f64]) -> Result<()> {
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidParameter("binary labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Rank statistic with average ranks for ties.
pub fn auc(probs: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(probs, labels)?;
    check_labels(labels)?;
    let n = probs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count() as f64;
    let n_neg = n as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::Precondition("AUC needs both classes".into()));
    }
    let rank_sum: f64 = (0..n).filter(|&k| labels[k] == 1.0).map(|k| ranks[k]).sum();
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

pub const LOGLOSS_CLAMP: f64 = 1e-12;

pub fn logloss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(probs, labels)?;
    check_labels(labels)?;
    let s: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / probs.len() as f64)
}

pub fn r2(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets)?;
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let sst: f64 = targets.iter().map(|y| (y - mean) * (y - mean)).sum();
    if sst == 0.0 {
        return Err(Error::ZeroVarianceTarget);
    }
    let sse: f64 = preds.iter().zip(targets).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(1.0 - sse / sst)
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets)?;
    let sse: f64 = preds.iter().zip(targets).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

/// Column-major feature block without intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub n: usize,
    pub columns: Vec<Vec<f64>>,
}

impl Features {
    pub fn new(n: usize, columns: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(c) = columns.iter().find(|c| c.len() != n) {
            return Err(Error::LengthMismatch(format!("column of length {}, expected {n}", c.len())));
        }
        Ok(Self { n, columns })
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }
}

/// Fitted linear index on internally standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub task: Task,
    /// Kept training columns and their (mean, sd).
    kept: Vec<(usize, f64, f64)>,
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl FittedModel {
    pub fn predict(&self, x: &Features) -> Vec<f64> {
        (0..x.n)
            .map(|i| {
                let mut eta = self.intercept;
                for (b, &(j, m, s)) in self.coef.iter().zip(&self.kept) {
                    eta += b * (x.columns[j][i] - m) / s;
                }
                match self.task {
                    Task::Binary => sigmoid(eta),
                    Task::Continuous => eta,
                }
            })
            .collect()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Standardizes columns on the training rows, dropping constant columns and
/// exact duplicates of earlier columns.
fn standardize(x: &Features) -> (Vec<(usize, f64, f64)>, Vec<Vec<f64>>) {
    let n = x.n as f64;
    let mut kept = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for (j, c) in x.columns.iter().enumerate() {
        let m = c.iter().sum::<f64>() / n;
        let v = c.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
        let s = v.sqrt();
        if !(s > 1e-12 * m.abs().max(1.0)) {
            continue;
        }
        let z: Vec<f64> = c.iter().map(|a| (a - m) / s).collect();
        let dup = cols.iter().any(|o| {
            o.iter().zip(&z).all(|(a, b)| (a - b).abs() <= 1e-9)
                || o.iter().zip(&z).all(|(a, b)| (a + b).abs() <= 1e-9)
        });
        if dup {
            continue;
        }
        kept.push((j, m, s));
        cols.push(z);
    }
    (kept, cols)
}

fn solve(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = h.clone().cholesky() {
        return ch.solve(g);
    }
    let svd = h.clone().svd(true, true);
    svd.solve(g, 1e-12).unwrap_or_else(|_| DVector::zeros(g.len()))
}

pub fn fit(x: &Features, y: &[f64], spec: &ModelSpec) -> Result<FittedModel> {
    spec.check()?;
    if x.n == 0 {
        return Err(Error::EmptyInput);
    }
    if y.len() != x.n {
        return Err(Error::LengthMismatch(format!("{} rows, {} targets", x.n, y.len())));
    }
    let (kept, cols) = standardize(x);
    let n = x.n;
    let p = cols.len() + 1;
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { cols[j - 1][i] });
    let yv = DVector::from_column_slice(y);
    let mut penalty = DMatrix::<f64>::identity(p, p) * spec.lambda;
    penalty[(0, 0)] = 0.0;
    let nf = n as f64;

    let (beta, converged, iterations) = match spec.task {
        Task::Continuous => {
            let h = design.tr_mul(&design) / nf + &penalty;
            let g = design.tr_mul(&yv) / nf;
            (solve(&h, &g), true, 1)
        }
        Task::Binary => {
            check_labels(y)?;
            let pos = y.iter().filter(|&&v| v == 1.0).count();
            if pos == 0 || pos == n {
                return Err(Error::SingleClassTrain);
            }
            let objective = |b: &DVector<f64>| -> f64 {
                let eta = &design * b;
                let mut s = 0.0;
                for i in 0..n {
                    // log(1 + e^eta) - y*eta, computed stably
                    let e = eta[i];
                    let sp = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
                    s += sp - y[i] * e;
                }
                s / nf + 0.5 * spec.lambda * b.rows(1, p - 1).norm_squared()
            };
            let rate = pos as f64 / nf;
            let mut beta = DVector::zeros(p);
            beta[0] = (rate / (1.0 - rate)).ln();
            let mut obj = objective(&beta);
            let mut converged = false;
            let mut iters = 0;
            for it in 0..spec.max_iter {
                iters = it + 1;
                let eta = &design * &beta;
                let mu: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
                let wts: Vec<f64> = mu.iter().map(|m| (m * (1.0 - m)).max(1e-12)).collect();
                let resid = DVector::from_iterator(n, mu.iter().zip(y).map(|(m, t)| m - t));
                let mut g = design.tr_mul(&resid) / nf;
                g += &penalty * &beta;
                let mut wx = design.clone();
                for (i, w) in wts.iter().enumerate() {
                    wx.row_mut(i).scale_mut(*w);
                }
                let h = design.tr_mul(&wx) / nf + &penalty;
                let step = solve(&h, &g);
                let mut t = 1.0;
                let mut accepted = false;
                for _ in 0..40 {
                    let cand = &beta - &step * t;
                    let c_obj = objective(&cand);
                    if c_obj <= obj {
                        let small = (obj - c_obj).abs() <= spec.tol * (1.0 + obj.abs());
                        beta = cand;
                        obj = c_obj;
                        accepted = true;
                        if small || step.amax() * t < spec.tol.sqrt() * 1e-3 {
                            converged = true;
                        }
                        break;
                    }
                    t *= 0.5;
                }
                if !accepted {
                    converged = true;
                }
                if converged {
                    break;
                }
            }
            (beta, converged, iters)
        }
    };
    Ok(FittedModel {
        task: spec.task,
        kept,
        intercept: beta[0],
        coef: beta.iter().skip(1).copied().collect(),
        converged,
        iterations,
    })
}

pub fn fit_predict(train: &Features, y: &[f64], test: &Features, spec: &ModelSpec) -> Result<Vec<f64>> {
    if train.p() != test.p() {
        return Err(Error::ShapeMismatch(format!(
            "{} training features, {} test features",
            train.p(),
            test.p()
        )));
    }
    Ok(fit(train, y, spec)?.predict(test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(cols: Vec<Vec<f64>>) -> Features {
        let n = cols.first().map_or(0, |c| c.len());
        Features::new(n, cols).unwrap()
    }

    #[test]
    fn separable_binary_orders_probs() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..20).map(|i| if i >= 10 { 1.0 } else { 0.0 }).collect();
        let f = feats(vec![x]);
        let p = fit_predict(&f, &y, &f, &ModelSpec::new(Task::Binary)).unwrap();
        assert!(p.windows(2).all(|w| w[0] <= w[1]));
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(auc(&p, &y).unwrap(), 1.0);
    }

    #[test]
    fn exact_linear_fit() {
        let x: Vec<f64> = (0..30).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.5).collect();
        let spec = ModelSpec { lambda: 0.0, ..ModelSpec::new(Task::Continuous) };
        let f = feats(vec![x]);
        let p = fit_predict(&f, &y, &f, &spec).unwrap();
        for (a, b) in p.iter().zip(&y) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn single_class_rejected() {
        let f = feats(vec![vec![1.0, 2.0, 3.0]]);
        let r = fit(&f, &[1.0, 1.0, 1.0], &ModelSpec::new(Task::Binary));
        assert!(matches!(r, Err(Error::SingleClassTrain)));
    }

    #[test]
    fn duplicate_column_is_ignored() {
        let x: Vec<f64> = (0..50).map(|i| ((i * 7) % 11) as f64).collect();
        let y: Vec<f64> = (0..50).map(|i| ((i * 3) % 2) as f64).collect();
        let a = fit_predict(&feats(vec![x.clone()]), &y, &feats(vec![x.clone()]), &ModelSpec::new(Task::Binary)).unwrap();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let both = feats(vec![x.clone(), x2]);
        let b = fit_predict(&both, &y, &both, &ModelSpec::new(Task::Binary)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(auc(&[0.3; 4], &[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.5);
        let t = [1.0, 2.0, 3.0, 6.0];
        assert_eq!(r2(&[3.0; 4], &t).unwrap(), 0.0);
        let ll = logloss(&[0.25, 0.75], &[0.0, 1.0]).unwrap();
        assert!((ll - (-(0.75f64.ln()))).abs() < 1e-12);
        assert!((ll - 0.2877).abs() < 1e-4);
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert!(matches!(r2(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::ZeroVarianceTarget)));
        assert!(matches!(auc(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn logloss_clamps() {
        let v = logloss(&[0.0], &[1.0]).unwrap();
        assert!((v + LOGLOSS_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn orientation() {
        assert_eq!(Metric::Auc.orientation(), 1.0);
        assert_eq!(Metric::Rmse.orientation(), -1.0);
        assert_eq!(Metric::Logloss.orientation(), -1.0);
        assert_eq!(Metric::R2.orientation(), 1.0);
    }
}
