//! Contrastive objectives over similarity values, with analytic gradients
//! and a central-difference gradient checker.
//!
//! Nothing here touches model parameters: inputs are similarity scores and
//! gradients are with respect to those scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Similarities for a batch of queries.
///
/// `cross[i][k]` is `sim(q_i, p_k)`; its diagonal is ignored. It is required
/// when `in_batch` is set, where the off-diagonal entries of row `i` join
/// query `i`'s negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimBatch {
    pub pos: Vec<f64>,
    pub neg: Vec<Vec<f64>>,
    #[serde(default)]
    pub cross: Option<Vec<Vec<f64>>>,
    pub tau: f64,
    #[serde(default)]
    pub in_batch: bool,
}

fn check_temperature(name: &str, t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be > 0, got {t}")))
    }
}

impl SimBatch {
    pub fn new(pos: Vec<f64>, neg: Vec<Vec<f64>>, tau: f64) -> Self {
        Self {
            pos,
            neg,
            cross: None,
            tau,
            in_batch: false,
        }
    }

    /// Cosine similarities from raw embeddings. `negatives[i]` are query `i`'s
    /// hard negatives; the full query × positive matrix is always computed.
    pub fn from_embeddings(
        queries: &[Vec<f64>],
        positives: &[Vec<f64>],
        negatives: &[Vec<Vec<f64>>],
        tau: f64,
        in_batch: bool,
    ) -> Result<Self> {
        if queries.len() != positives.len() || queries.len() != negatives.len() {
            return Err(Error::invalid(
                "queries, positives and negatives must align",
            ));
        }
        let pos = queries
            .iter()
            .zip(positives)
            .map(|(q, p)| cosine_sim(q, p))
            .collect::<Result<Vec<_>>>()?;
        let neg = queries
            .iter()
            .zip(negatives)
            .map(|(q, ns)| {
                ns.iter()
                    .map(|n| cosine_sim(q, n))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let cross = queries
            .iter()
            .map(|q| {
                positives
                    .iter()
                    .map(|p| cosine_sim(q, p))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = Self {
            pos,
            neg,
            cross: Some(cross),
            tau,
            in_batch,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        check_temperature("temperature", self.tau)?;
        let n = self.pos.len();
        if self.neg.len() != n {
            return Err(Error::invalid(format!(
                "{} positive similarities but {} negative lists",
                n,
                self.neg.len()
            )));
        }
        if let Some(cross) = &self.cross {
            if cross.len() != n || cross.iter().any(|r| r.len() != n) {
                return Err(Error::invalid(format!(
                    "cross similarities must be {n}×{n}"
                )));
            }
        } else if self.in_batch {
            return Err(Error::invalid(
                "in-batch negatives need the query × positive cross similarities",
            ));
        }
        let all_finite = self.pos.iter().all(|x| x.is_finite())
            && self.neg.iter().flatten().all(|x| x.is_finite())
            && self.cross.iter().flatten().flatten().all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("similarity batch".into()));
        }
        Ok(())
    }

    /// Query `i`'s logits before temperature: positive first, then hard
    /// negatives, then in-batch negatives (other queries' positives).
    fn candidates(&self, i: usize) -> Vec<f64> {
        let mut c = Vec::with_capacity(1 + self.neg[i].len() + self.len());
        c.push(self.pos[i]);
        c.extend_from_slice(&self.neg[i]);
        if self.in_batch {
            if let Some(cross) = &self.cross {
                c.extend(
                    cross[i]
                        .iter()
                        .enumerate()
                        .filter(|&(k, _)| k != i)
                        .map(|(_, &s)| s),
                );
            }
        }
        c
    }

    /// Number of free similarity coordinates (the gradient length).
    pub fn num_coords(&self) -> usize {
        let n = self.len();
        let base = n + self.neg.iter().map(Vec::len).sum::<usize>();
        if self.in_batch {
            base + n * n.saturating_sub(1)
        } else {
            base
        }
    }

    /// Flattens the free coordinates: positives, then negatives row by row,
    /// then off-diagonal cross entries row by row when `in_batch`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_coords());
        v.extend_from_slice(&self.pos);
        for row in &self.neg {
            v.extend_from_slice(row);
        }
        if self.in_batch {
            if let Some(cross) = &self.cross {
                for (i, row) in cross.iter().enumerate() {
                    v.extend(
                        row.iter()
                            .enumerate()
                            .filter(|&(k, _)| k != i)
                            .map(|(_, &s)| s),
                    );
                }
            }
        }
        v
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_coords() {
            return Err(Error::invalid(format!(
                "expected {} coordinates, got {}",
                self.num_coords(),
                flat.len()
            )));
        }
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        for p in out.pos.iter_mut() {
            *p = it.next().unwrap();
        }
        for row in out.neg.iter_mut() {
            for x in row.iter_mut() {
                *x = it.next().unwrap();
            }
        }
        if out.in_batch {
            if let Some(cross) = out.cross.as_mut() {
                for (i, row) in cross.iter_mut().enumerate() {
                    for (k, x) in row.iter_mut().enumerate() {
                        if k != i {
                            *x = it.next().unwrap();
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Scatters per-query candidate gradients into flat coordinate order.
    fn scatter(&self, per_query: &[Vec<f64>]) -> Vec<f64> {
        let n = self.len();
        let mut g = Vec::with_capacity(self.num_coords());
        g.extend(per_query.iter().map(|q| q[0]));
        for (i, row) in self.neg.iter().enumerate() {
            g.extend_from_slice(&per_query[i][1..1 + row.len()]);
        }
        if self.in_batch {
            for (i, row) in self.neg.iter().enumerate() {
                let start = 1 + row.len();
                g.extend_from_slice(&per_query[i][start..start + n - 1]);
            }
        }
        g
    }
}

/// Per-query teacher scores over `[positive, hard negatives...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherDistribution {
    pub scores: Vec<Vec<f64>>,
    pub tau: f64,
}

impl TeacherDistribution {
    fn validate_against(&self, batch: &SimBatch) -> Result<()> {
        check_temperature("teacher temperature", self.tau)?;
        if self.scores.len() != batch.len() {
            return Err(Error::invalid(format!(
                "teacher covers {} queries, batch has {}",
                self.scores.len(),
                batch.len()
            )));
        }
        for (i, (t, negs)) in self.scores.iter().zip(&batch.neg).enumerate() {
            if t.len() != 1 + negs.len() {
                return Err(Error::invalid(format!(
                    "query {i}: {} teacher scores for {} candidates",
                    t.len(),
                    1 + negs.len()
                )));
            }
            if t.len() < 2 {
                return Err(Error::invalid(format!(
                    "query {i}: need at least 2 candidates"
                )));
            }
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("teacher scores for query {i}")));
            }
        }
        Ok(())
    }
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "vector length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// `ln Σ exp(x_j / t)` with the maximum subtracted first.
fn log_sum_exp(xs: &[f64], t: f64) -> f64 {
    let m = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / t;
    let s: f64 = xs.iter().map(|&x| (x / t - m).exp()).sum();
    m + s.ln()
}

/// `−log softmax(xs / t)[0]`. When `xs[0]` is the largest entry this is
/// `ln(1 + Σ_{j>0} exp((x_j − x_0)/t))`, evaluated with `ln_1p` so that a
/// well-separated positive still yields a positive, strictly monotone loss.
fn neg_log_softmax_first(xs: &[f64], t: f64) -> f64 {
    let x0 = xs[0] / t;
    if xs[1..].iter().all(|&x| x / t <= x0) {
        xs[1..]
            .iter()
            .map(|&x| (x / t - x0).exp())
            .sum::<f64>()
            .ln_1p()
    } else {
        log_sum_exp(xs, t) - x0
    }
}

fn softmax(xs: &[f64], t: f64) -> Vec<f64> {
    let lse = log_sum_exp(xs, t);
    xs.iter().map(|&x| (x / t - lse).exp()).collect()
}

fn log_softmax(xs: &[f64], t: f64) -> Vec<f64> {
    let lse = log_sum_exp(xs, t);
    xs.iter().map(|&x| x / t - lse).collect()
}

/// `−Σ_i log softmax(candidates_i / τ)[positive]`, summed over queries.
pub fn infonce_loss(batch: &SimBatch) -> Result<f64> {
    batch.validate()?;
    Ok((0..batch.len())
        .map(|i| {
            let c = batch.candidates(i);
            neg_log_softmax_first(&c, batch.tau)
        })
        .sum())
}

pub fn infonce_gradient(batch: &SimBatch) -> Result<Vec<f64>> {
    batch.validate()?;
    let per_query: Vec<Vec<f64>> = (0..batch.len())
        .map(|i| {
            let mut p = softmax(&batch.candidates(i), batch.tau);
            // p0 − 1 written as −Σ_{j>0} p_j keeps precision when p0 ≈ 1.
            p[0] = -p[1..].iter().sum::<f64>();
            p.iter().map(|x| x / batch.tau).collect()
        })
        .collect();
    Ok(batch.scatter(&per_query))
}

fn student_rows(batch: &SimBatch, i: usize) -> Vec<f64> {
    let mut c = Vec::with_capacity(1 + batch.neg[i].len());
    c.push(batch.pos[i]);
    c.extend_from_slice(&batch.neg[i]);
    c
}

/// Mean over queries of `KL(softmax(teacher/τ_t) ‖ softmax(student/τ))`,
/// over the positive and hard negatives only.
pub fn soft_distill_loss(batch: &SimBatch, teacher: &TeacherDistribution) -> Result<f64> {
    batch.validate()?;
    teacher.validate_against(batch)?;
    let total: f64 = (0..batch.len())
        .map(|i| {
            let pt = softmax(&teacher.scores[i], teacher.tau);
            let log_pt = log_softmax(&teacher.scores[i], teacher.tau);
            let log_ps = log_softmax(&student_rows(batch, i), batch.tau);
            pt.iter()
                .zip(&log_pt)
                .zip(&log_ps)
                .filter(|((&p, _), _)| p > 0.0)
                .map(|((p, lt), ls)| p * (lt - ls))
                .sum::<f64>()
        })
        .sum();
    Ok((total / batch.len() as f64).max(0.0))
}

pub fn soft_distill_gradient(batch: &SimBatch, teacher: &TeacherDistribution) -> Result<Vec<f64>> {
    batch.validate()?;
    teacher.validate_against(batch)?;
    let n = batch.len() as f64;
    let per_query: Vec<Vec<f64>> = (0..batch.len())
        .map(|i| {
            let pt = softmax(&teacher.scores[i], teacher.tau);
            let ps = softmax(&student_rows(batch, i), batch.tau);
            let mut g: Vec<f64> = ps
                .iter()
                .zip(&pt)
                .map(|(s, t)| (s - t) / (batch.tau * n))
                .collect();
            // in-batch coordinates do not enter the distillation term
            if batch.in_batch {
                g.extend(std::iter::repeat_n(0.0, batch.len() - 1));
            }
            g
        })
        .collect();
    Ok(batch.scatter(&per_query))
}

/// A differentiable scalar objective over a [`SimBatch`].
pub trait SimObjective {
    fn value(&self, batch: &SimBatch) -> Result<f64>;
    /// Gradient in [`SimBatch::to_flat`] order.
    fn gradient(&self, batch: &SimBatch) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct InfoNce;

impl SimObjective for InfoNce {
    fn value(&self, batch: &SimBatch) -> Result<f64> {
        infonce_loss(batch)
    }

    fn gradient(&self, batch: &SimBatch) -> Result<Vec<f64>> {
        infonce_gradient(batch)
    }
}

#[derive(Debug, Clone)]
pub struct SoftDistill {
    pub teacher: TeacherDistribution,
}

impl SimObjective for SoftDistill {
    fn value(&self, batch: &SimBatch) -> Result<f64> {
        soft_distill_loss(batch, &self.teacher)
    }

    fn gradient(&self, batch: &SimBatch) -> Result<Vec<f64>> {
        soft_distill_gradient(batch, &self.teacher)
    }
}

/// `λ·InfoNCE + (1 − λ)·distill`.
#[derive(Debug, Clone)]
pub struct Blended {
    pub lambda: f64,
    pub teacher: TeacherDistribution,
}

impl Blended {
    fn check(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.lambda) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )))
        }
    }
}

impl SimObjective for Blended {
    fn value(&self, batch: &SimBatch) -> Result<f64> {
        self.check()?;
        Ok(self.lambda * infonce_loss(batch)?
            + (1.0 - self.lambda) * soft_distill_loss(batch, &self.teacher)?)
    }

    fn gradient(&self, batch: &SimBatch) -> Result<Vec<f64>> {
        self.check()?;
        let a = infonce_gradient(batch)?;
        let b = soft_distill_gradient(batch, &self.teacher)?;
        Ok(a.iter()
            .zip(&b)
            .map(|(x, y)| self.lambda * x + (1.0 - self.lambda) * y)
            .collect())
    }
}

/// Relative differences are taken against `max(|analytic|, |numeric|, floor)`
/// so that coordinates with vanishing gradients are judged absolutely.
///
/// Central differences of a loss of magnitude `L` carry round-off near
/// `1e-16·L/eps`; with summed losses in the tens and `eps = 1e-5` that is
/// about 1e-9, which a smaller floor would report as a large relative error
/// on coordinates whose true gradient is itself ~1e-9.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the analytic gradient with central differences of step `eps`.
pub fn grad_check<O: SimObjective + ?Sized>(
    objective: &O,
    point: &SimBatch,
    eps: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!(
            "eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    let analytic = objective.gradient(point)?;
    let base = point.to_flat();
    let mut numeric = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for j in 0..base.len() {
        probe[j] = base[j] + eps;
        let up = objective.value(&point.with_flat(&probe)?)?;
        probe[j] = base[j] - eps;
        let down = objective.value(&point.with_flat(&probe)?)?;
        probe[j] = base[j];
        numeric.push((up - down) / (2.0 * eps));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coord: 0,
        analytic,
        numeric,
    };
    for (j, (a, n)) in report.analytic.iter().zip(&report.numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coord = j;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn infonce_hand_values() {
        let sym = SimBatch::new(vec![0.0], vec![vec![0.0]], 1.0);
        assert!((infonce_loss(&sym).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let b = SimBatch::new(vec![1.0], vec![vec![0.0]], 1.0);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((infonce_loss(&b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn empty_negatives_give_zero_loss() {
        let b = SimBatch::new(vec![0.3], vec![vec![]], 0.1);
        assert_eq!(infonce_loss(&b).unwrap(), 0.0);
    }

    #[test]
    fn bad_temperature_rejected() {
        let b = SimBatch::new(vec![0.0], vec![vec![0.0]], 0.0);
        assert!(infonce_loss(&b).is_err());
        let b = SimBatch::new(vec![0.0], vec![vec![0.0]], -1.0);
        assert!(infonce_loss(&b).is_err());
    }

    #[test]
    fn symmetric_point_gradient() {
        let b = SimBatch::new(vec![0.0], vec![vec![0.0]], 1.0);
        let g = infonce_gradient(&b).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-15);
        assert!((g[1] - 0.5).abs() < 1e-15);
        let r = grad_check(&InfoNce, &b, 1e-5).unwrap();
        assert!((r.numeric[0] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn in_batch_uses_cross_similarities() {
        let mut b = SimBatch::new(vec![0.0, 0.0], vec![vec![], vec![]], 1.0);
        b.cross = Some(vec![vec![9.0, 0.0], vec![0.0, 9.0]]);
        assert_eq!(infonce_loss(&b).unwrap(), 0.0);
        b.in_batch = true;
        // each query sees one extra negative at similarity 0: 2·ln 2
        assert!((infonce_loss(&b).unwrap() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        b.cross = None;
        assert!(infonce_loss(&b).is_err());
    }

    #[test]
    fn distill_hand_values() {
        let b = SimBatch::new(vec![0.0], vec![vec![0.0]], 1.0);
        let one_hot = TeacherDistribution {
            scores: vec![vec![1000.0, 0.0]],
            tau: 1.0,
        };
        let kl = soft_distill_loss(&b, &one_hot).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);

        let b = SimBatch::new(vec![0.7], vec![vec![0.1, -0.2]], 0.5);
        let same = TeacherDistribution {
            scores: vec![vec![0.7, 0.1, -0.2]],
            tau: 0.5,
        };
        assert!(soft_distill_loss(&b, &same).unwrap().abs() < 1e-15);

        let misaligned = TeacherDistribution {
            scores: vec![vec![0.7, 0.1]],
            tau: 0.5,
        };
        assert!(soft_distill_loss(&b, &misaligned).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let mut b = SimBatch::new(vec![0.1, 0.2], vec![vec![0.3], vec![0.4, 0.5]], 1.0);
        b.cross = Some(vec![vec![0.1, 0.6], vec![0.7, 0.2]]);
        b.in_batch = true;
        let flat = b.to_flat();
        assert_eq!(flat, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]);
        assert_eq!(b.with_flat(&flat).unwrap(), b);
    }

    #[test]
    fn eps_range_enforced() {
        let b = SimBatch::new(vec![0.0], vec![vec![0.0]], 1.0);
        assert!(grad_check(&InfoNce, &b, 1e-2).is_err());
        assert!(grad_check(&InfoNce, &b, 1e-8).is_err());
    }
}
