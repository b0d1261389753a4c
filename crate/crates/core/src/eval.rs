//! Leaderboard aggregation: task means, category means, weighted means, and
//! a tournament-style Borda count where every task votes.
//!
//! Borda points per task: one point for each model scored strictly lower and
//! half a point for each other model with an equal score. Totals are
//! therefore conserved at `T·m(m−1)/2`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::{read_records, record_error};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub task: String,
    pub category: String,
    pub score: f64,
}

/// Complete model × task score table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMatrix {
    models: Vec<String>,
    tasks: Vec<(String, String)>,
    /// `scores[m][t]`
    scores: Vec<Vec<f64>>,
}

impl EvalMatrix {
    /// Models and tasks keep first-appearance order.
    pub fn from_rows(rows: &[EvalRow]) -> Result<Self> {
        let mut models: Vec<String> = Vec::new();
        let mut model_idx: HashMap<&str, usize> = HashMap::new();
        let mut tasks: Vec<(String, String)> = Vec::new();
        let mut task_idx: HashMap<&str, usize> = HashMap::new();
        for r in rows {
            if !model_idx.contains_key(r.model.as_str()) {
                model_idx.insert(&r.model, models.len());
                models.push(r.model.clone());
            }
            match task_idx.get(r.task.as_str()) {
                Some(&t) if tasks[t].1 != r.category => {
                    return Err(Error::invalid(format!(
                        "task \"{}\" listed under categories \"{}\" and \"{}\"",
                        r.task, tasks[t].1, r.category
                    )))
                }
                Some(_) => {}
                None => {
                    task_idx.insert(&r.task, tasks.len());
                    tasks.push((r.task.clone(), r.category.clone()));
                }
            }
        }
        let mut cells: Vec<Vec<Option<f64>>> = vec![vec![None; tasks.len()]; models.len()];
        for r in rows {
            if !(r.score.is_finite() && (0.0..=100.0).contains(&r.score)) {
                return Err(Error::invalid(format!(
                    "score for ({}, {}) must lie in [0, 100], got {}",
                    r.model, r.task, r.score
                )));
            }
            let cell = &mut cells[model_idx[r.model.as_str()]][task_idx[r.task.as_str()]];
            if cell.replace(r.score).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate cell ({}, {})",
                    r.model, r.task
                )));
            }
        }
        let mut scores = Vec::with_capacity(models.len());
        for (m, row) in cells.into_iter().enumerate() {
            let row = row
                .into_iter()
                .enumerate()
                .map(|(t, c)| {
                    c.ok_or_else(|| {
                        Error::invalid(format!("missing cell ({}, {})", models[m], tasks[t].0))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            scores.push(row);
        }
        Ok(Self {
            models,
            tasks,
            scores,
        })
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn tasks(&self) -> &[(String, String)] {
        &self.tasks
    }

    pub fn score(&self, model: &str, task: &str) -> Option<f64> {
        let m = self.models.iter().position(|x| x == model)?;
        let t = self.tasks.iter().position(|(x, _)| x == task)?;
        Some(self.scores[m][t])
    }

    fn model_row(&self, model: &str) -> Result<&[f64]> {
        self.models
            .iter()
            .position(|m| m == model)
            .map(|i| self.scores[i].as_slice())
            .ok_or_else(|| Error::invalid(format!("unknown model \"{model}\"")))
    }

    /// Categories in first-appearance order with their task counts.
    pub fn categories(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (_, cat) in &self.tasks {
            match out.iter_mut().find(|(c, _)| c == cat) {
                Some(entry) => entry.1 += 1,
                None => out.push((cat.clone(), 1)),
            }
        }
        out
    }

    pub fn task_mean(&self, model: &str) -> Result<f64> {
        let row = self.model_row(model)?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    pub fn category_mean(&self, model: &str, category: &str) -> Result<f64> {
        let row = self.model_row(model)?;
        let (sum, n) = self
            .tasks
            .iter()
            .zip(row)
            .filter(|((_, c), _)| c == category)
            .fold((0.0, 0usize), |(s, n), (_, &x)| (s + x, n + 1));
        if n == 0 {
            return Err(Error::UnknownCategory(category.to_string()));
        }
        Ok(sum / n as f64)
    }

    /// Weighted mean of category means. Without explicit weights every
    /// category is weighted by its task count, which equals [`Self::task_mean`].
    pub fn weighted_mean(
        &self,
        model: &str,
        weights: Option<&BTreeMap<String, f64>>,
    ) -> Result<f64> {
        let mut parts = Vec::new();
        for (cat, count) in self.categories() {
            let w = match weights {
                Some(ws) => *ws
                    .get(&cat)
                    .ok_or_else(|| Error::invalid(format!("no weight for category \"{cat}\"")))?,
                None => count as f64,
            };
            parts.push((self.category_mean(model, &cat)?, w));
        }
        weighted_average(&parts)
    }
}

/// `Σ value·weight / Σ weight`.
pub fn weighted_average(parts: &[(f64, f64)]) -> Result<f64> {
    let total: f64 = parts.iter().map(|(_, w)| w).sum();
    if parts.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) || total <= 0.0 {
        return Err(Error::invalid(
            "weights must be non-negative with a positive sum",
        ));
    }
    Ok(parts.iter().map(|(v, w)| v * w).sum::<f64>() / total)
}

pub fn load_eval(path: &Path) -> Result<EvalMatrix> {
    let rows: Vec<(usize, EvalRow)> = read_records(path)?;
    for (line, r) in &rows {
        if !r.score.is_finite() {
            return Err(record_error(path, *line, "non-finite score"));
        }
    }
    let rows: Vec<EvalRow> = rows.into_iter().map(|(_, r)| r).collect();
    EvalMatrix::from_rows(&rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BordaResult {
    pub points: BTreeMap<String, f64>,
    /// Points descending, equal totals ordered by model name.
    pub ranking: Vec<String>,
    /// Set when the name tie-break decided at least one adjacent pair.
    pub tie_broken: bool,
}

pub fn borda_rank(matrix: &EvalMatrix) -> Result<BordaResult> {
    let m = matrix.models.len();
    if m < 2 {
        return Err(Error::invalid("Borda ranking needs at least two models"));
    }
    let mut totals = vec![0.0f64; m];
    for t in 0..matrix.tasks.len() {
        for (a, total) in totals.iter_mut().enumerate() {
            let sa = matrix.scores[a][t];
            let mut pts = 0.0;
            for b in (0..m).filter(|&b| b != a) {
                let sb = matrix.scores[b][t];
                if sa > sb {
                    pts += 1.0;
                } else if sa == sb {
                    pts += 0.5;
                }
            }
            *total += pts;
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        totals[b]
            .total_cmp(&totals[a])
            .then_with(|| matrix.models[a].cmp(&matrix.models[b]))
    });
    let tie_broken = order.windows(2).any(|w| totals[w[0]] == totals[w[1]]);
    Ok(BordaResult {
        points: matrix
            .models
            .iter()
            .cloned()
            .zip(totals.iter().copied())
            .collect(),
        ranking: order.iter().map(|&i| matrix.models[i].clone()).collect(),
        tie_broken,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub model: String,
    pub rank: usize,
    pub borda_points: f64,
    pub task_mean: f64,
    pub weighted_mean: f64,
    pub category_means: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub categories: Vec<(String, usize)>,
    pub models: Vec<ModelSummary>,
    pub tie_broken: bool,
}

pub fn build_report(
    matrix: &EvalMatrix,
    weights: Option<&BTreeMap<String, f64>>,
) -> Result<EvalReport> {
    let borda = borda_rank(matrix)?;
    let categories = matrix.categories();
    let models = borda
        .ranking
        .iter()
        .enumerate()
        .map(|(i, model)| {
            let category_means = categories
                .iter()
                .map(|(c, _)| Ok((c.clone(), matrix.category_mean(model, c)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(ModelSummary {
                model: model.clone(),
                rank: i + 1,
                borda_points: borda.points[model],
                task_mean: matrix.task_mean(model)?,
                weighted_mean: matrix.weighted_mean(model, weights)?,
                category_means,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        categories,
        models,
        tie_broken: borda.tie_broken,
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "{:<4} {:<32} {:>8} {:>10} {:>10}",
            "rank", "model", "borda", "mean", "weighted"
        );
        for (c, n) in &self.categories {
            let _ = write!(out, " {:>14}", format!("{c}({n})"));
        }
        out.push('\n');
        for m in &self.models {
            let _ = write!(
                out,
                "{:<4} {:<32} {:>8.1} {:>10.2} {:>10.2}",
                m.rank, m.model, m.borda_points, m.task_mean, m.weighted_mean
            );
            for (c, _) in &self.categories {
                let _ = write!(out, " {:>14.2}", m.category_means[c]);
            }
            out.push('\n');
        }
        if self.tie_broken {
            out.push_str("note: equal Borda totals ordered by model name\n");
        }
        out
    }
}
