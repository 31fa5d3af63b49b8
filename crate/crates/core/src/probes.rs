//! Frozen-embedding evaluation: logistic probes scored by macro one-vs-rest
//! AUROC, cross-modal retrieval, and Cox probes scored by Harrell's C.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_LOGISTIC_LAMBDA: f64 = 1e-3;
pub const DEFAULT_COX_RIDGE: f64 = 1e-6;
const LOGISTIC_GRAD_TOL: f64 = 1e-6;
const LOGISTIC_MAX_ITERS: usize = 5000;
const COX_TOL: f64 = 1e-9;
const COX_MAX_ITERS: usize = 100;

/// Multinomial logistic model over the classes seen in training.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    /// `[C x classes.len()]`.
    pub weights: Tensor<f64>,
    pub bias: Vec<f64>,
    /// Sorted class ids, one per output column.
    pub classes: Vec<usize>,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn check_features(x: &Tensor<f64>, n: usize, what: &'static str) -> Result<()> {
    if x.ndim() != 2 {
        return Err(Error::dim(what, format!("features must be 2-D, got {:?}", x.shape())));
    }
    if x.rows() != n {
        return Err(Error::dim(what, format!("{} feature rows for {n} targets", x.rows())));
    }
    if n == 0 {
        return Err(Error::EmptyInput(what));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

struct Multinomial<'d> {
    x: &'d Tensor<f64>,
    y: Vec<usize>,
    k: usize,
    lambda: f64,
}

impl Multinomial<'_> {
    fn width(&self) -> usize {
        self.x.cols() + 1
    }

    fn probs(&self, theta: &DVector<f64>, row: &[f64]) -> Vec<f64> {
        let w = self.width();
        let logits: Vec<f64> = (0..self.k)
            .map(|c| {
                let t = &theta.as_slice()[c * w..(c + 1) * w];
                t[w - 1] + row.iter().zip(t).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn loss(&self, theta: &DVector<f64>) -> f64 {
        let n = self.x.rows();
        let w = self.width();
        let mut total = 0.0;
        for i in 0..n {
            let p = self.probs(theta, self.x.row(i));
            total -= p[self.y[i]].max(f64::MIN_POSITIVE).ln();
        }
        let penalty: f64 =
            (0..self.k).flat_map(|c| (0..w - 1).map(move |d| c * w + d)).map(|i| theta[i] * theta[i]).sum();
        total / n as f64 + 0.5 * self.lambda * penalty
    }

    fn grad_hess(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.x.rows();
        let w = self.width();
        let dim = self.k * w;
        let mut g = DVector::zeros(dim);
        let mut h = DMatrix::zeros(dim, dim);
        let mut aug = vec![1.0; w];
        for i in 0..n {
            aug[..w - 1].copy_from_slice(self.x.row(i));
            let p = self.probs(theta, self.x.row(i));
            for c in 0..self.k {
                let r = p[c] - f64::from(u8::from(self.y[i] == c));
                for d in 0..w {
                    g[c * w + d] += r * aug[d];
                }
                for c2 in 0..self.k {
                    let m = p[c] * (f64::from(u8::from(c == c2)) - p[c2]);
                    if m == 0.0 {
                        continue;
                    }
                    for d in 0..w {
                        let md = m * aug[d];
                        for e in 0..w {
                            h[(c * w + d, c2 * w + e)] += md * aug[e];
                        }
                    }
                }
            }
        }
        g /= n as f64;
        h /= n as f64;
        for c in 0..self.k {
            for d in 0..w - 1 {
                let i = c * w + d;
                g[i] += self.lambda * theta[i];
                h[(i, i)] += self.lambda;
            }
        }
        (g, h)
    }
}

/// Damped Newton solve of `(H + delta I) x = rhs`, raising `delta` until the
/// matrix factors.
fn damped_solve(h: &DMatrix<f64>, rhs: &DVector<f64>, mut delta: f64) -> Result<DVector<f64>> {
    for _ in 0..20 {
        let mut m = h.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += delta;
        }
        if let Some(ch) = m.cholesky() {
            return Ok(ch.solve(rhs));
        }
        delta *= 100.0;
    }
    Err(Error::Evaluation("Newton system could not be factored".into()))
}

/// Full-batch Newton fit of an L2-regularized multinomial logistic model
/// (penalty on weights, not biases) from a zero start.
pub fn fit_logistic_probe(x: &Tensor<f64>, labels: &[usize], lambda: f64) -> Result<LogisticProbe> {
    check_features(x, labels.len(), "fit_logistic_probe")?;
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("logistic lambda must be > 0, got {lambda}")));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::DegenerateLabels(format!("training labels contain {} distinct class(es)", classes.len())));
    }
    let y = labels.iter().map(|l| classes.binary_search(l).expect("label collected above")).collect();
    let model = Multinomial { x, y, k: classes.len(), lambda };
    let w = model.width();
    let mut theta = DVector::zeros(model.k * w);
    let mut loss = model.loss(&theta);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < LOGISTIC_MAX_ITERS {
        let (g, h) = model.grad_hess(&theta);
        if g.amax() < LOGISTIC_GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let step = damped_solve(&h, &(-&g), 1e-8)?;
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta + &step * t;
            let l = model.loss(&cand);
            if l <= loss + 1e-4 * t * slope {
                theta = cand;
                loss = l;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            converged = model.grad_hess(&theta).0.amax() < LOGISTIC_GRAD_TOL;
            break;
        }
    }
    let c = x.cols();
    let mut weights = Tensor::zeros(&[c, model.k]);
    let mut bias = vec![0.0; model.k];
    for k in 0..model.k {
        for d in 0..c {
            weights.data_mut()[d * model.k + k] = theta[k * w + d];
        }
        bias[k] = theta[k * w + c];
    }
    Ok(LogisticProbe { weights, bias, classes, loss, iterations, converged })
}

impl LogisticProbe {
    /// Class probabilities `[N x n_classes]`; classes unseen in training get 0.
    pub fn predict_proba(&self, x: &Tensor<f64>, n_classes: usize) -> Result<Tensor<f64>> {
        if x.ndim() != 2 || x.cols() != self.weights.rows() {
            return Err(Error::dim(
                "predict_proba",
                format!("expected [N x {}], got {:?}", self.weights.rows(), x.shape()),
            ));
        }
        if let Some(&top) = self.classes.last() {
            if top >= n_classes {
                return Err(Error::Contract(format!("probe knows class {top} but only {n_classes} requested")));
            }
        }
        let logits = x.matmul(&self.weights)?;
        let mut out = Tensor::zeros(&[x.rows(), n_classes]);
        for i in 0..x.rows() {
            let row: Vec<f64> = logits.row(i).iter().zip(&self.bias).map(|(a, b)| a + b).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for (k, &cls) in self.classes.iter().enumerate() {
                out.row_mut(i)[cls] = e[k] / s;
            }
        }
        Ok(out)
    }
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUROC of `scores` for `positive` against the rest.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::dim("binary_auroc", format!("{} scores, {} labels", scores.len(), positive.len())));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Evaluation("AUROC needs both positives and negatives".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocReport {
    pub macro_auroc: f64,
    /// `None` for classes that could not be evaluated.
    pub per_class: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
}

/// Macro one-vs-rest AUROC over the classes that have both positives and
/// negatives in `labels`.
pub fn macro_auroc_ovr(scores: &Tensor<f64>, labels: &[usize]) -> Result<AurocReport> {
    check_features(scores, labels.len(), "macro_auroc_ovr")?;
    let n_classes = scores.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Contract(format!("label {bad} outside {n_classes} score columns")));
    }
    let mut per_class = Vec::with_capacity(n_classes);
    let mut skipped_classes = Vec::new();
    for k in 0..n_classes {
        let positive: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let column: Vec<f64> = (0..scores.rows()).map(|i| scores.at(i, k)).collect();
        match binary_auroc(&column, &positive) {
            Ok(a) => per_class.push(Some(a)),
            Err(_) => {
                per_class.push(None);
                skipped_classes.push(k);
            }
        }
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Evaluation("no class has both positives and negatives".into()));
    }
    Ok(AurocReport { macro_auroc: valid.iter().sum::<f64>() / valid.len() as f64, per_class, skipped_classes })
}

fn unit_rows(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Normalization { row: r });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Fraction of queries whose aligned gallery row ranks in the top `k` by
/// cosine similarity, ties going to the lower gallery index.
pub fn retrieval_recall_at_k(query: &Tensor<f64>, gallery: &Tensor<f64>, k: usize) -> Result<f64> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::EmptyInput("retrieval_recall_at_k"));
    }
    if query.ndim() != 2 || query.shape() != gallery.shape() {
        return Err(Error::dim(
            "retrieval_recall_at_k",
            format!("query {:?} vs gallery {:?}", query.shape(), gallery.shape()),
        ));
    }
    let n = query.rows();
    if k == 0 || k > n {
        return Err(Error::Contract(format!("k must lie in 1..={n}, got {k}")));
    }
    let q = unit_rows(query)?;
    let g = unit_rows(gallery)?;
    let sims = q.matmul(&g.transpose())?;
    let hits = (0..n)
        .filter(|&i| {
            let row = sims.row(i);
            let target = row[i];
            let ahead = row.iter().enumerate().filter(|&(j, &s)| s > target || (s == target && j < i)).count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub beta: Vec<f64>,
    /// Penalized log partial likelihood at `beta`.
    pub log_lik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized log-likelihood after each accepted iterate, starting at zero.
    pub trace: Vec<f64>,
}

fn check_survival(times: &[f64], events: &[bool]) -> Result<()> {
    if times.len() != events.len() {
        return Err(Error::dim("survival", format!("{} times, {} events", times.len(), events.len())));
    }
    if times.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::Contract("survival times must be positive and finite".into()));
    }
    Ok(())
}

struct CoxData<'d> {
    x: &'d Tensor<f64>,
    times: &'d [f64],
    events: &'d [bool],
    /// Indices sorted by decreasing time.
    order: Vec<usize>,
    ridge: f64,
}

impl CoxData<'_> {
    /// Penalized Breslow log partial likelihood, gradient and Hessian.
    fn evaluate(&self, beta: &DVector<f64>, derivatives: bool) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = self.x.cols();
        let eta: Vec<f64> =
            (0..self.x.rows()).map(|i| self.x.row(i).iter().zip(beta.iter()).map(|(a, b)| a * b).sum()).collect();
        let shift = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(p);
        let mut s2 = DMatrix::zeros(if derivatives { p } else { 0 }, if derivatives { p } else { 0 });
        let mut ll = 0.0;
        let mut g = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        let mut i = 0;
        while i < self.order.len() {
            // Everyone tied at this time enters the risk set before any of
            // their events is scored.
            let t = self.times[self.order[i]];
            let mut j = i;
            while j < self.order.len() && self.times[self.order[j]] == t {
                let idx = self.order[j];
                let w = (eta[idx] - shift).exp();
                s0 += w;
                let xr = DVector::from_row_slice(self.x.row(idx));
                if derivatives {
                    s1 += &xr * w;
                    s2 += &xr * xr.transpose() * w;
                }
                j += 1;
            }
            for &idx in &self.order[i..j] {
                if !self.events[idx] {
                    continue;
                }
                ll += eta[idx] - shift - s0.ln();
                if derivatives {
                    let mean = &s1 / s0;
                    g += DVector::from_row_slice(self.x.row(idx)) - &mean;
                    h -= &s2 / s0 - &mean * mean.transpose();
                }
            }
            i = j;
        }
        ll -= 0.5 * self.ridge * beta.norm_squared();
        g -= beta * self.ridge;
        for d in 0..p {
            h[(d, d)] -= self.ridge;
        }
        (ll, g, h)
    }
}

/// Ridge-penalized Cox proportional-hazards fit with Breslow ties, by
/// Newton iteration with step halving.
pub fn fit_cox_ph(x: &Tensor<f64>, times: &[f64], events: &[bool], ridge: f64) -> Result<CoxFit> {
    check_features(x, times.len(), "fit_cox_ph")?;
    check_survival(times, events)?;
    if !events.iter().any(|&e| e) {
        return Err(Error::Evaluation("Cox fit needs at least one event".into()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Config(format!("Cox ridge must be >= 0, got {ridge}")));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let data = CoxData { x, times, events, order, ridge };
    let mut beta = DVector::zeros(x.cols());
    let (mut ll, mut g, mut h) = data.evaluate(&beta, true);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < COX_MAX_ITERS {
        iterations += 1;
        let neg_h = -&h;
        let step = damped_solve(&neg_h, &g, 0.0)?;
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let (l, _, _) = data.evaluate(&cand, false);
            if l.is_finite() && l >= ll {
                next = Some((cand, l));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, l)) = next else {
            converged = g.amax() < 1e-9;
            break;
        };
        let delta = l - ll;
        beta = cand;
        (ll, g, h) = data.evaluate(&beta, true);
        trace.push(ll);
        if delta.abs() < COX_TOL {
            converged = true;
            break;
        }
    }
    if g.amax() == 0.0 {
        converged = true;
    }
    Ok(CoxFit { beta: beta.iter().copied().collect(), log_lik: ll, iterations, converged, trace })
}

/// Penalized Breslow log partial likelihood at `beta`.
pub fn cox_log_likelihood(x: &Tensor<f64>, times: &[f64], events: &[bool], beta: &[f64], ridge: f64) -> Result<f64> {
    check_features(x, times.len(), "cox_log_likelihood")?;
    check_survival(times, events)?;
    if beta.len() != x.cols() {
        return Err(Error::dim("cox_log_likelihood", format!("{} coefficients for {} columns", beta.len(), x.cols())));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let data = CoxData { x, times, events, order, ridge };
    Ok(data.evaluate(&DVector::from_row_slice(beta), false).0)
}

/// Harrell's concordance over pairs with `t_i < t_j` and an event at `i`.
pub fn concordance_index(times: &[f64], events: &[bool], risk: &[f64]) -> Result<f64> {
    check_survival(times, events)?;
    if risk.len() != times.len() {
        return Err(Error::dim("concordance_index", format!("{} risks for {} times", risk.len(), times.len())));
    }
    let mut comparable = 0usize;
    let mut score = 0.0;
    for i in 0..times.len() {
        if !events[i] {
            continue;
        }
        for j in 0..times.len() {
            if times[i] < times[j] {
                comparable += 1;
                if risk[i] > risk[j] {
                    score += 1.0;
                } else if risk[i] == risk[j] {
                    score += 0.5;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::Evaluation("no comparable pairs".into()));
    }
    Ok(score / comparable as f64)
}

/// Seeded stratified fold assignment: each stratum is shuffled and dealt
/// round-robin, continuing the rotation across strata.
pub fn stratified_folds(strata: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > strata.len() {
        return Err(Error::Config(format!("fold count {k} must lie in 2..={}", strata.len())));
    }
    let mut rng = Stream::new(seed, streams::FOLDS);
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &s) in strata.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let mut folds = vec![0; strata.len()];
    let mut next = 0;
    for members in groups.values_mut() {
        rng.shuffle(members);
        for &i in members.iter() {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(folds)
}

/// Z-scores both splits with the training split's statistics; constant
/// training columns are centered only.
pub fn standardize(train: &Tensor<f64>, test: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if train.rows() == 0 || train.cols() != test.cols() {
        return Err(Error::dim("standardize", format!("{:?} vs {:?}", train.shape(), test.shape())));
    }
    let (n, c) = (train.rows() as f64, train.cols());
    let mut mean = vec![0.0; c];
    let mut sd = vec![0.0; c];
    for r in 0..train.rows() {
        for (m, v) in mean.iter_mut().zip(train.row(r)) {
            *m += v / n;
        }
    }
    for r in 0..train.rows() {
        for d in 0..c {
            sd[d] += (train.at(r, d) - mean[d]).powi(2) / n;
        }
    }
    let scale: Vec<f64> = sd.iter().map(|v| if v.sqrt() > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    let apply = |x: &Tensor<f64>| {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (d, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[d]) * scale[d];
            }
        }
        out
    };
    Ok((apply(train), apply(test)))
}

/// One JSONL result line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub task: String,
    pub fold: usize,
    pub metric: String,
    pub value: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub converged: bool,
    pub skipped_classes: Vec<usize>,
}

fn split(folds: &[usize], f: usize) -> (Vec<usize>, Vec<usize>) {
    (0..folds.len()).partition(|&i| folds[i] != f)
}

/// Stratified k-fold logistic probing, one macro-AUROC record per fold.
pub fn cross_validate_logistic(
    task: &str,
    x: &Tensor<f64>,
    labels: &[usize],
    k: usize,
    lambda: f64,
    seed: u64,
) -> Result<Vec<ProbeRecord>> {
    check_features(x, labels.len(), "cross_validate_logistic")?;
    let folds = stratified_folds(labels, k, seed)?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    (0..k)
        .into_par_iter()
        .map(|f| {
            let (tr, te) = split(&folds, f);
            let (xtr, xte) = standardize(&x.gather_rows(&tr), &x.gather_rows(&te))?;
            let ytr: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
            let yte: Vec<usize> = te.iter().map(|&i| labels[i]).collect();
            let probe = fit_logistic_probe(&xtr, &ytr, lambda)?;
            let report = macro_auroc_ovr(&probe.predict_proba(&xte, n_classes)?, &yte)?;
            Ok(ProbeRecord {
                task: task.to_string(),
                fold: f,
                metric: "macro_auroc_ovr".into(),
                value: report.macro_auroc,
                n_train: tr.len(),
                n_test: te.len(),
                converged: probe.converged,
                skipped_classes: report.skipped_classes,
            })
        })
        .collect()
}

/// Event-stratified k-fold Cox probing, one C-index record per fold.
pub fn cross_validate_cox(
    task: &str,
    x: &Tensor<f64>,
    times: &[f64],
    events: &[bool],
    k: usize,
    ridge: f64,
    seed: u64,
) -> Result<Vec<ProbeRecord>> {
    check_features(x, times.len(), "cross_validate_cox")?;
    check_survival(times, events)?;
    let strata: Vec<usize> = events.iter().map(|&e| usize::from(e)).collect();
    let folds = stratified_folds(&strata, k, seed)?;
    (0..k)
        .into_par_iter()
        .map(|f| {
            let (tr, te) = split(&folds, f);
            let (xtr, xte) = standardize(&x.gather_rows(&tr), &x.gather_rows(&te))?;
            let pick = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) { idx.iter().map(|&i| (times[i], events[i])).unzip() };
            let (ttr, etr) = pick(&tr);
            let (tte, ete) = pick(&te);
            let fit = fit_cox_ph(&xtr, &ttr, &etr, ridge)?;
            let risk: Vec<f64> =
                (0..xte.rows()).map(|r| xte.row(r).iter().zip(&fit.beta).map(|(a, b)| a * b).sum()).collect();
            Ok(ProbeRecord {
                task: task.to_string(),
                fold: f,
                metric: "c_index".into(),
                value: concordance_index(&tte, &ete, &risk)?,
                n_train: tr.len(),
                n_test: te.len(),
                converged: fit.converged,
                skipped_classes: Vec::new(),
            })
        })
        .collect()
}

pub fn mean_value(records: &[ProbeRecord]) -> f64 {
    records.iter().map(|r| r.value).sum::<f64>() / records.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        let s = Tensor::matrix(2, 2, vec![0.9, 0.1, 0.1, 0.9]).unwrap();
        assert_eq!(macro_auroc_ovr(&s, &[0, 1]).unwrap().macro_auroc, 1.0);
        let flat = Tensor::full(&[6, 3], 0.3);
        assert_eq!(macro_auroc_ovr(&flat, &[0, 1, 2, 0, 1, 2]).unwrap().macro_auroc, 0.5);
        let a = binary_auroc(&[0.2, 0.4, 0.6, 0.8], &[false, true, false, true]).unwrap();
        assert!((a - 0.75).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_skipped_and_flagged() {
        let s = Tensor::matrix(3, 3, vec![0.9, 0.1, 0.0, 0.2, 0.8, 0.0, 0.7, 0.3, 0.0]).unwrap();
        let r = macro_auroc_ovr(&s, &[0, 1, 0]).unwrap();
        assert_eq!(r.skipped_classes, vec![2]);
        assert_eq!(r.per_class[2], None);
        assert!(macro_auroc_ovr(&Tensor::full(&[2, 1], 0.5), &[0, 0]).is_err());
    }

    #[test]
    fn separable_probe_is_perfect() {
        let x = col(&[-1.0, -1.0, 1.0, 1.0]);
        let probe = fit_logistic_probe(&x, &[0, 0, 1, 1], DEFAULT_LOGISTIC_LAMBDA).unwrap();
        assert!(probe.converged);
        let p = probe.predict_proba(&x, 2).unwrap();
        assert_eq!(macro_auroc_ovr(&p, &[0, 0, 1, 1]).unwrap().macro_auroc, 1.0);
        assert!(matches!(fit_logistic_probe(&x, &[1, 1, 1, 1], 1e-3), Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn recall_examples() {
        let mut rng = Stream::new(3, 3);
        let q = Tensor::matrix(10, 4, rng.normal_vec(40, 1.0)).unwrap();
        assert_eq!(retrieval_recall_at_k(&q, &q, 1).unwrap(), 1.0);
        let g = Tensor::matrix(10, 4, rng.normal_vec(40, 1.0)).unwrap();
        assert_eq!(retrieval_recall_at_k(&q, &g, 10).unwrap(), 1.0);
        assert!(retrieval_recall_at_k(&q, &g, 0).is_err());
        let ties = Tensor::full(&[3, 2], 1.0);
        assert!((retrieval_recall_at_k(&ties, &ties, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn concordance_examples() {
        assert_eq!(concordance_index(&[1.0, 2.0, 3.0], &[true; 3], &[3.0, 2.0, 1.0]).unwrap(), 1.0);
        let c = concordance_index(&[2.0, 1.0, 3.0], &[true, true, false], &[2.0, 1.0, 0.5]).unwrap();
        assert!((c - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(concordance_index(&[1.0, 2.0, 3.0], &[true; 3], &[1.0; 3]).unwrap(), 0.5);
        assert!(concordance_index(&[1.0, 2.0], &[false, false], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cox_constant_covariate_and_no_events() {
        let x = col(&[1.0; 5]);
        let t = [1.0, 2.0, 3.0, 4.0, 5.0];
        let fit = fit_cox_ph(&x, &t, &[true; 5], DEFAULT_COX_RIDGE).unwrap();
        assert_eq!(fit.beta, vec![0.0]);
        assert!(fit.converged);
        assert!(fit_cox_ph(&x, &t, &[false; 5], DEFAULT_COX_RIDGE).is_err());
    }

    #[test]
    fn cox_breslow_ties_share_the_risk_set() {
        let x = col(&[1.0, 0.0, 0.5]);
        let t = [1.0, 1.0, 2.0];
        let b = 0.7f64;
        let ll = cox_log_likelihood(&x, &t, &[true, true, true], &[b], 0.0).unwrap();
        let denom = b.exp() + 1.0 + (0.5 * b).exp();
        let expected = b - 2.0 * denom.ln();
        assert!((ll - expected).abs() < 1e-12, "{ll} vs {expected}");
    }

    #[test]
    fn folds_are_stratified_and_seeded() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let f = stratified_folds(&labels, 5, 9).unwrap();
        assert_eq!(f, stratified_folds(&labels, 5, 9).unwrap());
        for fold in 0..5 {
            assert_eq!(f.iter().filter(|&&v| v == fold).count(), 8);
        }
        assert!(stratified_folds(&labels, 1, 0).is_err());
    }
}
