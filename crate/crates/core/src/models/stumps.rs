//! Gradient-boosted decision stumps for tabular tasks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{label_of, target_of};
use crate::config::ValidatedProject;
use crate::dataset::{ProcessedDataset, Record};
use crate::monitoring::Split;
use crate::rng::RngStream;
use crate::trainer::{
    classification_metrics, config_digest, regression_metrics, resume_for, save_checkpoint, write_model_bin,
    MetricReport, OptimizerState, Outcome, RunContext, Tensor, TrainOutput, TrainState, Trainer, TrainerError,
};

pub const FEATURES_ROLE: &str = "feature_columns";
pub const TARGET_ROLE: &str = "target_column";

/// Candidates within this fraction of the residual energy count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    SquaredError,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub left: f64,
    pub right: f64,
}

impl Stump {
    pub fn predict(&self, x: &[f64]) -> f64 {
        if x[self.feature] <= self.threshold {
            self.left
        } else {
            self.right
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedStumpModel {
    pub objective: Objective,
    pub f0: f64,
    pub shrinkage: f64,
    pub stumps: Vec<Stump>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl BoostedStumpModel {
    pub fn new(objective: Objective, y: &[f64], shrinkage: f64) -> Self {
        BoostedStumpModel {
            objective,
            f0: initial_prediction(objective, y),
            shrinkage,
            stumps: Vec::new(),
        }
    }

    /// `F0 + shrinkage * sum(stump(x))`; log-odds for the logistic objective.
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        self.f0 + self.shrinkage * self.stumps.iter().map(|s| s.predict(x)).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.objective {
            Objective::SquaredError => self.predict_raw(x),
            Objective::Logistic => sigmoid(self.predict_raw(x)),
        }
    }

    /// Flat encoding used in checkpoints: `f0` then four numbers per stump.
    pub fn to_params(&self) -> Vec<f64> {
        let mut p = vec![self.f0];
        for s in &self.stumps {
            p.extend([s.feature as f64, s.threshold, s.left, s.right]);
        }
        p
    }

    pub fn from_params(objective: Objective, shrinkage: f64, p: &[f64]) -> Option<Self> {
        let (&f0, rest) = p.split_first()?;
        if rest.len() % 4 != 0 {
            return None;
        }
        let stumps = rest
            .chunks(4)
            .map(|c| Stump {
                feature: c[0] as usize,
                threshold: c[1],
                left: c[2],
                right: c[3],
            })
            .collect();
        Some(BoostedStumpModel {
            objective,
            f0,
            shrinkage,
            stumps,
        })
    }
}

/// Mean target, or log-odds of the positive rate (clamped away from 0 and 1).
pub fn initial_prediction(objective: Objective, y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    match objective {
        Objective::SquaredError => mean,
        Objective::Logistic => {
            let p = mean.clamp(1e-12, 1.0 - 1e-12);
            (p / (1.0 - p)).ln()
        }
    }
}

/// Residuals `y - F` (squared error) or `y - sigmoid(F)` (logistic).
pub fn negative_gradient(objective: Objective, y: &[f64], f: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(f)
        .map(|(y, f)| match objective {
            Objective::SquaredError => y - f,
            Objective::Logistic => y - sigmoid(*f),
        })
        .collect()
}

/// Mean squared error or mean log loss of raw predictions `f`.
pub fn objective_loss(objective: Objective, y: &[f64], f: &[f64]) -> f64 {
    let n = y.len().max(1) as f64;
    let total: f64 = y
        .iter()
        .zip(f)
        .map(|(y, f)| match objective {
            Objective::SquaredError => (y - f) * (y - f),
            // log(1 + e^f) - y f, written stably
            Objective::Logistic => f.max(0.0) + (-f.abs()).exp().ln_1p() - y * f,
        })
        .sum();
    total / n
}

/// Least-squares stump for `r` over all features and midpoint thresholds.
///
/// Candidates are visited by ascending feature, then ascending threshold; a
/// later candidate wins only when it beats the incumbent by more than the
/// tie tolerance. With no split available the stump predicts mean `r` on
/// both sides.
pub fn best_stump(x: &[Vec<f64>], r: &[f64]) -> Stump {
    let n = r.len();
    let total: f64 = r.iter().sum();
    let mean = if n > 0 { total / n as f64 } else { 0.0 };
    let energy: f64 = r.iter().map(|v| v * v).sum();
    let tol = TIE_TOLERANCE * energy.max(1.0);
    let features = x.first().map_or(0, Vec::len);
    let mut best = Stump {
        feature: 0,
        threshold: x.first().and_then(|row| row.first()).copied().unwrap_or(0.0),
        left: mean,
        right: mean,
    };
    let mut best_gain = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..n).collect();
    for j in 0..features {
        order.sort_by(|&a, &b| x[a][j].total_cmp(&x[b][j]));
        let mut sum_left = 0.0;
        for pos in 0..n.saturating_sub(1) {
            let i = order[pos];
            sum_left += r[i];
            let v = x[i][j];
            let next = x[order[pos + 1]][j];
            if v == next {
                continue;
            }
            let n_left = (pos + 1) as f64;
            let n_right = (n - pos - 1) as f64;
            let sum_right = total - sum_left;
            // SSE = energy - gain, so maximizing gain minimizes SSE
            let gain = sum_left * sum_left / n_left + sum_right * sum_right / n_right;
            if gain > best_gain + tol {
                best_gain = gain;
                best = Stump {
                    feature: j,
                    threshold: v + (next - v) / 2.0,
                    left: sum_left / n_left,
                    right: sum_right / n_right,
                };
            }
        }
    }
    best
}

/// Fits one stump to the current negative gradients and updates `f`.
pub fn boosting_round(model: &mut BoostedStumpModel, x: &[Vec<f64>], y: &[f64], f: &mut [f64]) -> Stump {
    let r = negative_gradient(model.objective, y, f);
    let stump = best_stump(x, &r);
    for (fi, xi) in f.iter_mut().zip(x) {
        *fi += model.shrinkage * stump.predict(xi);
    }
    model.stumps.push(stump);
    stump
}

pub fn fit_boosted_stumps(
    x: &[Vec<f64>],
    y: &[f64],
    objective: Objective,
    rounds: usize,
    shrinkage: f64,
) -> BoostedStumpModel {
    let mut model = BoostedStumpModel::new(objective, y, shrinkage);
    let mut f = vec![model.f0; y.len()];
    for _ in 0..rounds {
        boosting_round(&mut model, x, y, &mut f);
    }
    model
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnEncoding {
    Numeric { column: String },
    OneHot { column: String, categories: Vec<String> },
}

/// Maps the `feature_columns` object of a record to a dense row: numeric and
/// boolean columns pass through (null as 0), anything else is one-hot over
/// the categories seen in train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularEncoder {
    pub columns: Vec<ColumnEncoding>,
}

fn features_of(r: &Record, i: usize) -> Result<&serde_json::Map<String, Value>, TrainerError> {
    r.get(FEATURES_ROLE)
        .and_then(Value::as_object)
        .ok_or_else(|| TrainerError::MissingColumn {
            column: FEATURES_ROLE.into(),
            record: i,
        })
}

fn category(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl TabularEncoder {
    pub fn fit(records: &[Record]) -> Result<Self, TrainerError> {
        let mut numeric: BTreeMap<String, bool> = BTreeMap::new();
        let mut cats: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            for (k, v) in features_of(r, i)? {
                let is_num = matches!(v, Value::Number(_) | Value::Bool(_) | Value::Null);
                let entry = numeric.entry(k.clone()).or_insert(true);
                *entry &= is_num;
                if !v.is_null() {
                    cats.entry(k.clone()).or_default().insert(category(v));
                }
            }
        }
        let columns = numeric
            .into_iter()
            .map(|(column, is_num)| {
                if is_num {
                    ColumnEncoding::Numeric { column }
                } else {
                    let categories = cats.remove(&column).unwrap_or_default().into_iter().collect();
                    ColumnEncoding::OneHot { column, categories }
                }
            })
            .collect();
        Ok(TabularEncoder { columns })
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for c in &self.columns {
            match c {
                ColumnEncoding::Numeric { column } => names.push(column.clone()),
                ColumnEncoding::OneHot { column, categories } => {
                    names.extend(categories.iter().map(|v| format!("{column}={v}")))
                }
            }
        }
        names
    }

    pub fn encode(&self, r: &Record, i: usize) -> Result<Vec<f64>, TrainerError> {
        let obj = features_of(r, i)?;
        let mut row = Vec::new();
        for c in &self.columns {
            match c {
                ColumnEncoding::Numeric { column } => row.push(match obj.get(column) {
                    Some(Value::Number(n)) => n.as_f64().unwrap_or(0.0),
                    Some(Value::Bool(b)) => f64::from(u8::from(*b)),
                    _ => 0.0,
                }),
                ColumnEncoding::OneHot { column, categories } => {
                    let v = obj.get(column).filter(|v| !v.is_null()).map(category);
                    row.extend(categories.iter().map(|c| f64::from(u8::from(v.as_deref() == Some(c)))));
                }
            }
        }
        Ok(row)
    }
}

struct TabularData {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

pub struct TabularTrainer {
    pub objective: Objective,
}

impl TabularTrainer {
    fn targets(&self, records: &[Record], labels: &[String]) -> Result<Vec<f64>, TrainerError> {
        records
            .iter()
            .enumerate()
            .map(|(i, r)| match self.objective {
                Objective::SquaredError => target_of(r, TARGET_ROLE, i),
                Objective::Logistic => {
                    let l = label_of(r, TARGET_ROLE, i)?;
                    match labels.iter().position(|x| *x == l) {
                        Some(k) => Ok(k as f64),
                        None => Err(TrainerError::InvalidTarget {
                            record: i,
                            reason: format!("label `{l}` not seen in train"),
                        }),
                    }
                }
            })
            .collect()
    }

    fn report(&self, model: &BoostedStumpModel, data: &TabularData) -> Result<MetricReport, TrainerError> {
        let raw: Vec<f64> = data.x.iter().map(|x| model.predict_raw(x)).collect();
        let mut report = match self.objective {
            Objective::SquaredError => regression_metrics(&raw, &data.y)?,
            Objective::Logistic => {
                let pred: Vec<usize> = raw.iter().map(|f| usize::from(*f >= 0.0)).collect();
                let truth: Vec<usize> = data.y.iter().map(|y| *y as usize).collect();
                classification_metrics(&pred, &truth)?
            }
        };
        report.insert("loss", objective_loss(self.objective, &data.y, &raw));
        Ok(report)
    }
}

impl Trainer for TabularTrainer {
    fn train(
        &self,
        project: &ValidatedProject,
        data: &ProcessedDataset,
        ctx: &RunContext<'_>,
    ) -> Result<TrainOutput, TrainerError> {
        if data.train.is_empty() {
            return Err(TrainerError::EmptyDataset);
        }
        let encoder = TabularEncoder::fit(&data.train)?;
        if encoder.feature_names().is_empty() {
            return Err(TrainerError::NoNumericFeatures);
        }
        let labels: Vec<String> = if self.objective == Objective::Logistic {
            let set: BTreeSet<String> = data
                .train
                .iter()
                .enumerate()
                .map(|(i, r)| label_of(r, TARGET_ROLE, i))
                .collect::<Result<_, _>>()?;
            match set.len() {
                0 | 1 => return Err(TrainerError::SingleClass),
                2 => set.into_iter().collect(),
                classes => return Err(TrainerError::UnsupportedMulticlass { classes }),
            }
        } else {
            Vec::new()
        };
        let encode = |records: &[Record]| -> Result<TabularData, TrainerError> {
            let x = records
                .iter()
                .enumerate()
                .map(|(i, r)| encoder.encode(r, i))
                .collect::<Result<_, _>>()?;
            Ok(TabularData {
                x,
                y: self.targets(records, &labels)?,
            })
        };
        let train = encode(&data.train)?;
        let valid = match &data.valid {
            Some(v) if !v.is_empty() => Some(encode(v)?),
            _ => None,
        };

        let rounds = project.params.int("rounds").unwrap_or(100).max(0) as u64;
        let shrinkage = project.params.float("shrinkage").unwrap_or(0.1);
        let seed = project.params.int("seed").unwrap_or(42) as u64;
        let root = ctx.checkpoint_root();
        let mut model = if ctx.control.resume {
            let st = resume_for(&root, &data.fingerprint)?;
            BoostedStumpModel::from_params(self.objective, shrinkage, &st.params).ok_or_else(|| {
                TrainerError::CheckpointCorrupt {
                    path: root.clone(),
                    reason: "stump parameters".into(),
                }
            })?
        } else {
            BoostedStumpModel::new(self.objective, &train.y, shrinkage)
        };
        let mut f: Vec<f64> = train.x.iter().map(|x| model.predict_raw(x)).collect();
        let digest = config_digest(project);
        let state_of = |m: &BoostedStumpModel| TrainState {
            params: m.to_params(),
            optimizer: OptimizerState::new(0),
            global_step: m.stumps.len() as u64,
            total_steps: rounds,
            epoch: 0,
            window: m.stumps.len() as u64,
            shuffle: RngStream::new(seed, "shuffle/epoch-0").state(),
            fingerprint: data.fingerprint.clone(),
            config_digest: digest.clone(),
        };

        let mut losses = Vec::new();
        while (model.stumps.len() as u64) < rounds {
            let step = model.stumps.len() as u64;
            if ctx.control.should_stop(step) {
                save_checkpoint(&state_of(&model), &root)?;
                return Ok(TrainOutput {
                    outcome: Outcome::Stopped,
                    global_step: step,
                    losses,
                    train_metrics: None,
                    valid_metrics: None,
                    metadata: Value::Null,
                });
            }
            boosting_round(&mut model, &train.x, &train.y, &mut f);
            let loss = objective_loss(self.objective, &train.y, &f);
            if !loss.is_finite() {
                return Err(TrainerError::NonFiniteLoss { step: step + 1 });
            }
            losses.push((step + 1, loss));
            ctx.emit(step + 1, 0, Split::Train, "loss", loss)?;
        }
        let steps = model.stumps.len() as u64;
        save_checkpoint(&state_of(&model), &root)?;

        let train_metrics = self.report(&model, &train)?;
        ctx.emit_report(steps, 0, Split::Train, &train_metrics)?;
        let valid_metrics = match &valid {
            Some(v) => {
                let r = self.report(&model, v)?;
                ctx.emit_report(steps, 0, Split::Valid, &r)?;
                Some(r)
            }
            None => None,
        };

        let mut stump_data = Vec::with_capacity(model.stumps.len() * 4);
        for s in &model.stumps {
            stump_data.extend([s.feature as f64, s.threshold, s.left, s.right]);
        }
        let tensors = vec![
            Tensor::new("f0", vec![1], vec![model.f0]),
            Tensor::new("stumps", vec![model.stumps.len(), 4], stump_data),
        ];
        let dir = ctx.artifact_dir();
        write_model_bin(&dir, &tensors).map_err(|source| TrainerError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(TrainOutput {
            outcome: Outcome::Completed,
            global_step: steps,
            losses,
            train_metrics: Some(train_metrics),
            valid_metrics,
            metadata: json!({
                "kind": "boosted-stumps",
                "objective": self.objective,
                "shrinkage": shrinkage,
                "rounds": steps,
                "features": encoder.feature_names(),
                "encoder": encoder,
                "labels": labels,
            }),
        })
    }
}
