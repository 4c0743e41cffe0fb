//! Linear models over hashed bag-of-words features.

use serde_json::json;

use super::featurize::{HashedBowFeaturizer, SparseVec};
use super::{label_of, target_of, text_of};
use crate::dataset::{ProcessedDataset, Record};
use crate::registry::ValidatedParams;
use crate::rng::RngStream;
use crate::trainer::{
    classification_metrics, regression_metrics, BatchGrad, EvalSplit, ExportedModel, GradientModel, MetricReport,
    Tensor, TrainerError,
};

pub const TEXT_ROLE: &str = "text_column";
pub const TARGET_ROLE: &str = "target_column";

fn featurizer(params: &ValidatedParams) -> Result<HashedBowFeaturizer, TrainerError> {
    let dim = params.int("feature_dim").unwrap_or(1 << 15);
    let max_tokens = params.int("max_seq_length").unwrap_or(128).max(1) as usize;
    usize::try_from(dim)
        .ok()
        .and_then(|d| HashedBowFeaturizer::new(d, max_tokens))
        .ok_or(TrainerError::InvalidSetting {
            name: "feature_dim",
            value: dim.to_string(),
        })
}

fn featurize_texts(f: &HashedBowFeaturizer, records: &[Record]) -> Result<Vec<SparseVec>, TrainerError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let text = text_of(r, TEXT_ROLE, i)?;
            if text.trim().is_empty() {
                return Err(TrainerError::EmptyText { record: i });
            }
            Ok(f.featurize(&text))
        })
        .collect()
}

fn dot(x: &SparseVec, w: &[f64], stride: usize, col: usize) -> f64 {
    x.iter().map(|(j, v)| v * w[*j as usize * stride + col]).sum()
}

/// Softmax regression: `W` is D x C (row-major), followed by bias `b` (C).
/// Mean cross-entropy loss; weights start at zero.
#[derive(Debug, Clone)]
pub struct SoftmaxTextModel {
    pub featurizer: HashedBowFeaturizer,
    pub labels: Vec<String>,
    train: Vec<(SparseVec, usize)>,
    valid: Option<Vec<(SparseVec, usize)>>,
}

impl SoftmaxTextModel {
    pub fn from_dataset(data: &ProcessedDataset, params: &ValidatedParams) -> Result<Self, TrainerError> {
        let featurizer = featurizer(params)?;
        let train_labels: Vec<String> = data
            .train
            .iter()
            .enumerate()
            .map(|(i, r)| label_of(r, TARGET_ROLE, i))
            .collect::<Result<_, _>>()?;
        let mut labels = train_labels.clone();
        labels.sort();
        labels.dedup();
        if labels.len() < 2 {
            return Err(TrainerError::SingleClass);
        }
        let index = |l: &str| labels.binary_search_by(|x| x.as_str().cmp(l));
        let xs = featurize_texts(&featurizer, &data.train)?;
        let train = xs
            .into_iter()
            .zip(&train_labels)
            .map(|(x, l)| (x, index(l).expect("train label in vocab")))
            .collect();
        let valid = match &data.valid {
            Some(records) if !records.is_empty() => {
                let xs = featurize_texts(&featurizer, records)?;
                let mut rows = Vec::with_capacity(xs.len());
                for (i, x) in xs.into_iter().enumerate() {
                    let l = label_of(&records[i], TARGET_ROLE, i)?;
                    // labels unseen in train get an index no prediction can hit
                    rows.push((x, index(&l).unwrap_or(labels.len())));
                }
                Some(rows)
            }
            _ => None,
        };
        Ok(SoftmaxTextModel {
            featurizer,
            labels,
            train,
            valid,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn logits(&self, params: &[f64], x: &SparseVec) -> Vec<f64> {
        let c = self.num_classes();
        let bias = &params[self.featurizer.dim * c..];
        (0..c).map(|k| bias[k] + dot(x, params, c, k)).collect()
    }

    pub fn predict(&self, params: &[f64], text: &str) -> &str {
        let z = self.logits(params, &self.featurizer.featurize(text));
        &self.labels[argmax(&z)]
    }

    fn split(&self, split: EvalSplit) -> Option<&[(SparseVec, usize)]> {
        match split {
            EvalSplit::Train => Some(&self.train),
            EvalSplit::Valid => self.valid.as_deref(),
        }
    }
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable `log(sum(exp(z)))`.
pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl GradientModel for SoftmaxTextModel {
    fn num_params(&self) -> usize {
        (self.featurizer.dim + 1) * self.num_classes()
    }

    fn init_params(&self, _rng: &mut RngStream) -> Vec<f64> {
        vec![0.0; self.num_params()]
    }

    fn num_examples(&self) -> usize {
        self.train.len()
    }

    fn loss_and_grad(&self, params: &[f64], batch: &[usize]) -> BatchGrad {
        let c = self.num_classes();
        let bias_at = self.featurizer.dim * c;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for &i in batch {
            let (x, y) = &self.train[i];
            let z = self.logits(params, x);
            let lse = log_sum_exp(&z);
            loss += lse - z[*y];
            for k in 0..c {
                let dz = (z[k] - lse).exp() - if k == *y { 1.0 } else { 0.0 };
                grad[bias_at + k] += dz;
                for (j, v) in x {
                    grad[*j as usize * c + k] += v * dz;
                }
            }
        }
        let m = batch.len() as f64;
        if m > 0.0 {
            grad.iter_mut().for_each(|g| *g /= m);
            loss /= m;
        }
        BatchGrad { loss, grad, weight: m }
    }

    fn evaluate(&self, params: &[f64], split: EvalSplit) -> Result<Option<MetricReport>, TrainerError> {
        let Some(rows) = self.split(split) else {
            return Ok(None);
        };
        let mut predicted = Vec::with_capacity(rows.len());
        let mut targets = Vec::with_capacity(rows.len());
        let mut loss = 0.0;
        for (x, y) in rows {
            let z = self.logits(params, x);
            predicted.push(argmax(&z));
            targets.push(*y);
            // unseen labels have no logit; their loss is left out
            if *y < z.len() {
                loss += log_sum_exp(&z) - z[*y];
            }
        }
        let mut report = classification_metrics(&predicted, &targets)?;
        report.insert("loss", loss / rows.len() as f64);
        Ok(Some(report))
    }

    fn export(&self, params: &[f64]) -> ExportedModel {
        let c = self.num_classes();
        let d = self.featurizer.dim;
        ExportedModel {
            tensors: vec![
                Tensor::new("weight", vec![d, c], params[..d * c].to_vec()),
                Tensor::new("bias", vec![c], params[d * c..].to_vec()),
            ],
            metadata: json!({
                "kind": "softmax-text",
                "labels": self.labels,
                "feature_dim": d,
                "max_seq_length": self.featurizer.max_tokens,
                "hash": "fnv1a64",
            }),
        }
    }
}

/// One-output linear head with mean squared error: `w` (D) then bias.
#[derive(Debug, Clone)]
pub struct LinearTextRegressor {
    pub featurizer: HashedBowFeaturizer,
    train: Vec<(SparseVec, f64)>,
    valid: Option<Vec<(SparseVec, f64)>>,
}

fn regression_rows(
    f: &HashedBowFeaturizer,
    records: &[Record],
) -> Result<Vec<(SparseVec, f64)>, TrainerError> {
    let xs = featurize_texts(f, records)?;
    xs.into_iter()
        .enumerate()
        .map(|(i, x)| Ok((x, target_of(&records[i], TARGET_ROLE, i)?)))
        .collect()
}

impl LinearTextRegressor {
    pub fn from_dataset(data: &ProcessedDataset, params: &ValidatedParams) -> Result<Self, TrainerError> {
        let featurizer = featurizer(params)?;
        let train = regression_rows(&featurizer, &data.train)?;
        let valid = match &data.valid {
            Some(r) if !r.is_empty() => Some(regression_rows(&featurizer, r)?),
            _ => None,
        };
        Ok(LinearTextRegressor {
            featurizer,
            train,
            valid,
        })
    }

    pub fn predict_features(&self, params: &[f64], x: &SparseVec) -> f64 {
        params[self.featurizer.dim] + dot(x, params, 1, 0)
    }

    pub fn predict(&self, params: &[f64], text: &str) -> f64 {
        self.predict_features(params, &self.featurizer.featurize(text))
    }
}

impl GradientModel for LinearTextRegressor {
    fn num_params(&self) -> usize {
        self.featurizer.dim + 1
    }

    fn init_params(&self, _rng: &mut RngStream) -> Vec<f64> {
        vec![0.0; self.num_params()]
    }

    fn num_examples(&self) -> usize {
        self.train.len()
    }

    fn loss_and_grad(&self, params: &[f64], batch: &[usize]) -> BatchGrad {
        let bias_at = self.featurizer.dim;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for &i in batch {
            let (x, y) = &self.train[i];
            let r = self.predict_features(params, x) - y;
            loss += r * r;
            grad[bias_at] += 2.0 * r;
            for (j, v) in x {
                grad[*j as usize] += 2.0 * r * v;
            }
        }
        let m = batch.len() as f64;
        if m > 0.0 {
            grad.iter_mut().for_each(|g| *g /= m);
            loss /= m;
        }
        BatchGrad { loss, grad, weight: m }
    }

    fn evaluate(&self, params: &[f64], split: EvalSplit) -> Result<Option<MetricReport>, TrainerError> {
        let rows = match split {
            EvalSplit::Train => &self.train,
            EvalSplit::Valid => match &self.valid {
                Some(v) => v,
                None => return Ok(None),
            },
        };
        let predicted: Vec<f64> = rows.iter().map(|(x, _)| self.predict_features(params, x)).collect();
        let targets: Vec<f64> = rows.iter().map(|(_, y)| *y).collect();
        let mut report = regression_metrics(&predicted, &targets)?;
        let mse = report.get("mse").unwrap_or(0.0);
        report.insert("loss", mse);
        Ok(Some(report))
    }

    fn export(&self, params: &[f64]) -> ExportedModel {
        let d = self.featurizer.dim;
        ExportedModel {
            tensors: vec![
                Tensor::new("weight", vec![d], params[..d].to_vec()),
                Tensor::new("bias", vec![1], vec![params[d]]),
            ],
            metadata: json!({
                "kind": "linear-text-regression",
                "feature_dim": d,
                "max_seq_length": self.featurizer.max_tokens,
                "hash": "fnv1a64",
            }),
        }
    }
}
