//! Byte-level causal LM: `logits(x_t) = U^T E[x_t]`.

use serde_json::json;

use super::text::log_sum_exp;
use super::text_of;
use crate::dataset::{ProcessedDataset, Record};
use crate::registry::ValidatedParams;
use crate::rng::RngStream;
use crate::trainer::{BatchGrad, EvalSplit, ExportedModel, GradientModel, MetricReport, Tensor, TrainerError};

pub const PAD: u16 = 256;
pub const EOS: u16 = 257;
pub const VOCAB: usize = 258;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadSide {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackSettings {
    pub block_size: usize,
    pub model_max_length: usize,
    pub padding: PadSide,
}

impl PackSettings {
    pub fn from_params(p: &ValidatedParams) -> Result<Self, TrainerError> {
        let block_size = p.int("block_size").unwrap_or(1024).max(2) as usize;
        let model_max_length = p.int("model_max_length").unwrap_or(2048).max(2) as usize;
        if block_size > model_max_length {
            return Err(TrainerError::BlockSizeExceedsMaxLength {
                block_size,
                model_max_length,
            });
        }
        let padding = match p.str("padding").unwrap_or("right") {
            "left" => PadSide::Left,
            _ => PadSide::Right,
        };
        Ok(PackSettings {
            block_size,
            model_max_length,
            padding,
        })
    }
}

/// Bytes of every text truncated to `model_max_length - 1`, each followed by
/// EOS, concatenated and cut into `block_size` blocks; the short last block
/// is padded on the configured side.
pub fn pack(texts: &[String], s: &PackSettings) -> Vec<Vec<u16>> {
    let mut stream: Vec<u16> = Vec::new();
    for t in texts {
        stream.extend(t.bytes().take(s.model_max_length - 1).map(u16::from));
        stream.push(EOS);
    }
    stream
        .chunks(s.block_size)
        .map(|chunk| {
            let mut block = chunk.to_vec();
            let pad = s.block_size - block.len();
            if pad > 0 {
                match s.padding {
                    PadSide::Right => block.extend(std::iter::repeat_n(PAD, pad)),
                    PadSide::Left => {
                        let mut left = vec![PAD; pad];
                        left.extend(block);
                        block = left;
                    }
                }
            }
            block
        })
        .collect()
}

/// `(input, target)` pairs of a block, skipping any pair touching PAD.
pub fn target_pairs(block: &[u16]) -> impl Iterator<Item = (usize, usize)> + '_ {
    block
        .windows(2)
        .filter(|w| w[0] != PAD && w[1] != PAD)
        .map(|w| (w[0] as usize, w[1] as usize))
}

#[derive(Debug, Clone)]
pub struct TinyCausalLM {
    pub dim: usize,
    pub pack: PackSettings,
    train: Vec<Vec<u16>>,
    valid: Option<Vec<Vec<u16>>>,
}

fn texts(records: &[Record]) -> Result<Vec<String>, TrainerError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let t = text_of(r, "text_column", i)?;
            if t.is_empty() {
                return Err(TrainerError::EmptyText { record: i });
            }
            Ok(t)
        })
        .collect()
}

impl TinyCausalLM {
    pub fn new(train_texts: &[String], valid_texts: Option<&[String]>, dim: usize, pack_settings: PackSettings) -> Result<Self, TrainerError> {
        if train_texts.is_empty() {
            return Err(TrainerError::EmptyText { record: 0 });
        }
        if let Some(i) = train_texts.iter().position(String::is_empty) {
            return Err(TrainerError::EmptyText { record: i });
        }
        Ok(TinyCausalLM {
            dim,
            pack: pack_settings,
            train: pack(train_texts, &pack_settings),
            valid: valid_texts.filter(|v| !v.is_empty()).map(|v| pack(v, &pack_settings)),
        })
    }

    pub fn from_dataset(data: &ProcessedDataset, params: &ValidatedParams) -> Result<Self, TrainerError> {
        let pack_settings = PackSettings::from_params(params)?;
        let dim = params.int("embed_dim").unwrap_or(32).max(1) as usize;
        let train = texts(&data.train)?;
        let valid = match &data.valid {
            Some(r) => Some(texts(r)?),
            None => None,
        };
        TinyCausalLM::new(&train, valid.as_deref(), dim, pack_settings)
    }

    pub fn blocks(&self) -> &[Vec<u16>] {
        &self.train
    }

    /// Next-token logits after token `a`.
    pub fn logits(&self, params: &[f64], a: usize) -> Vec<f64> {
        let d = self.dim;
        let (e, u) = params.split_at(VOCAB * d);
        let h = &e[a * d..(a + 1) * d];
        let mut z = vec![0.0; VOCAB];
        for (k, hk) in h.iter().enumerate() {
            let row = &u[k * VOCAB..(k + 1) * VOCAB];
            for (zv, uv) in z.iter_mut().zip(row) {
                *zv += hk * uv;
            }
        }
        z
    }

    fn blocks_loss(&self, params: &[f64], blocks: &[Vec<u16>]) -> (f64, f64) {
        let mut loss = 0.0;
        let mut count = 0.0;
        for b in blocks {
            for (a, t) in target_pairs(b) {
                let z = self.logits(params, a);
                loss += log_sum_exp(&z) - z[t];
                count += 1.0;
            }
        }
        (loss, count)
    }
}

impl GradientModel for TinyCausalLM {
    fn num_params(&self) -> usize {
        2 * VOCAB * self.dim
    }

    fn init_params(&self, rng: &mut RngStream) -> Vec<f64> {
        let scale = 1.0 / (self.dim as f64).sqrt();
        (0..self.num_params()).map(|_| rng.symmetric(scale)).collect()
    }

    fn num_examples(&self) -> usize {
        self.train.len()
    }

    fn loss_and_grad(&self, params: &[f64], batch: &[usize]) -> BatchGrad {
        let d = self.dim;
        let u_at = VOCAB * d;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        let mut count = 0.0;
        let mut dz = vec![0.0; VOCAB];
        for &bi in batch {
            for (a, t) in target_pairs(&self.train[bi]) {
                let z = self.logits(params, a);
                let lse = log_sum_exp(&z);
                loss += lse - z[t];
                count += 1.0;
                for v in 0..VOCAB {
                    dz[v] = (z[v] - lse).exp();
                }
                dz[t] -= 1.0;
                for k in 0..d {
                    let hk = params[a * d + k];
                    let row = u_at + k * VOCAB;
                    let mut de = 0.0;
                    for v in 0..VOCAB {
                        grad[row + v] += hk * dz[v];
                        de += params[row + v] * dz[v];
                    }
                    grad[a * d + k] += de;
                }
            }
        }
        if count > 0.0 {
            grad.iter_mut().for_each(|g| *g /= count);
            loss /= count;
        }
        BatchGrad {
            loss,
            grad,
            weight: count,
        }
    }

    fn evaluate(&self, params: &[f64], split: EvalSplit) -> Result<Option<MetricReport>, TrainerError> {
        let blocks = match split {
            EvalSplit::Train => &self.train,
            EvalSplit::Valid => match &self.valid {
                Some(v) => v,
                None => return Ok(None),
            },
        };
        let (loss, count) = self.blocks_loss(params, blocks);
        let mean = if count > 0.0 { loss / count } else { 0.0 };
        let mut report = MetricReport::default();
        report.insert("loss", mean);
        report.insert("perplexity", mean.exp());
        Ok(Some(report))
    }

    fn export(&self, params: &[f64]) -> ExportedModel {
        let d = self.dim;
        ExportedModel {
            tensors: vec![
                Tensor::new("embedding", vec![VOCAB, d], params[..VOCAB * d].to_vec()),
                Tensor::new("output", vec![d, VOCAB], params[VOCAB * d..].to_vec()),
            ],
            metadata: json!({
                "kind": "tiny-causal-lm",
                "tokenizer": "bytes",
                "vocab_size": VOCAB,
                "pad_id": PAD,
                "eos_id": EOS,
                "embed_dim": d,
                "block_size": self.pack.block_size,
                "model_max_length": self.pack.model_max_length,
                "padding": match self.pack.padding {
                    PadSide::Left => "left",
                    PadSide::Right => "right",
                },
            }),
        }
    }
}
