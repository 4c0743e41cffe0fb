//! Reference trainers and the external-adapter binding table.
//!
//! Five tasks ship with built-in trainers: `text-classification`,
//! `text-regression`, `llm:sft`, `tabular:classification` and
//! `tabular:regression`. Every other task runs through an adapter bound
//! with [`TrainerBindings::bind_external_adapter`].

pub mod causal_lm;
pub mod featurize;
pub mod stumps;
pub mod text;

use std::collections::BTreeMap;
use std::fs;
use std::sync::{Arc, RwLock};

use serde_json::{json, Value};

use crate::config::ValidatedProject;
use crate::dataset::{ProcessedDataset, Record};
use crate::registry::{self, TaskId, TaskSpec, TrainerBinding};
use crate::trainer::{train_gradient_model, Outcome, RunContext, TrainOutput, Trainer, TrainerError};

pub use causal_lm::{PackSettings, PadSide, TinyCausalLM};
pub use featurize::{tokenize, HashedBowFeaturizer, SparseVec};
pub use stumps::{best_stump, fit_boosted_stumps, BoostedStumpModel, Objective, Stump, TabularEncoder, TabularTrainer};
pub use text::{LinearTextRegressor, SoftmaxTextModel};

fn column<'r>(r: &'r Record, role: &str, i: usize) -> Result<&'r Value, TrainerError> {
    r.get(role).ok_or_else(|| TrainerError::MissingColumn {
        column: role.to_string(),
        record: i,
    })
}

/// String value of a role; non-string values are rendered as JSON.
pub(crate) fn text_of(r: &Record, role: &str, i: usize) -> Result<String, TrainerError> {
    Ok(match column(r, role, i)? {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    })
}

pub(crate) fn label_of(r: &Record, role: &str, i: usize) -> Result<String, TrainerError> {
    match column(r, role, i)? {
        Value::String(s) => Ok(s.clone()),
        v @ (Value::Number(_) | Value::Bool(_)) => Ok(v.to_string()),
        other => Err(TrainerError::InvalidTarget {
            record: i,
            reason: format!("label must be a scalar, got {other}"),
        }),
    }
}

pub(crate) fn target_of(r: &Record, role: &str, i: usize) -> Result<f64, TrainerError> {
    let v = column(r, role, i)?;
    let x = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    x.filter(|x| x.is_finite()).ok_or_else(|| TrainerError::InvalidTarget {
        record: i,
        reason: format!("expected a finite number, got {v}"),
    })
}

pub struct TextClassificationTrainer;
pub struct TextRegressionTrainer;
pub struct CausalLmSftTrainer;

impl Trainer for TextClassificationTrainer {
    fn train(&self, project: &ValidatedProject, data: &ProcessedDataset, ctx: &RunContext<'_>) -> Result<TrainOutput, TrainerError> {
        let model = SoftmaxTextModel::from_dataset(data, &project.params)?;
        train_gradient_model(&model, project, data, ctx)
    }
}

impl Trainer for TextRegressionTrainer {
    fn train(&self, project: &ValidatedProject, data: &ProcessedDataset, ctx: &RunContext<'_>) -> Result<TrainOutput, TrainerError> {
        let model = LinearTextRegressor::from_dataset(data, &project.params)?;
        train_gradient_model(&model, project, data, ctx)
    }
}

impl Trainer for CausalLmSftTrainer {
    fn train(&self, project: &ValidatedProject, data: &ProcessedDataset, ctx: &RunContext<'_>) -> Result<TrainOutput, TrainerError> {
        let model = TinyCausalLM::from_dataset(data, &project.params)?;
        train_gradient_model(&model, project, data, ctx)
    }
}

/// Built-in trainer for a task, if it has one.
pub fn reference_trainer(task: &TaskId) -> Option<Arc<dyn Trainer>> {
    let t: Arc<dyn Trainer> = match task.canonical().as_str() {
        "text-classification" => Arc::new(TextClassificationTrainer),
        "text-regression" => Arc::new(TextRegressionTrainer),
        "llm:sft" => Arc::new(CausalLmSftTrainer),
        "tabular:classification" => Arc::new(TabularTrainer {
            objective: Objective::Logistic,
        }),
        "tabular:regression" => Arc::new(TabularTrainer {
            objective: Objective::SquaredError,
        }),
        _ => return None,
    };
    Some(t)
}

/// Adapters bound to external-adapter tasks.
#[derive(Default)]
pub struct TrainerBindings {
    adapters: RwLock<BTreeMap<String, Arc<dyn Trainer>>>,
}

impl std::fmt::Debug for TrainerBindings {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let bound: Vec<String> = self.adapters.read().map(|m| m.keys().cloned().collect()).unwrap_or_default();
        f.debug_struct("TrainerBindings").field("bound", &bound).finish()
    }
}

impl TrainerBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind_external_adapter(&self, task: &TaskId, adapter: Arc<dyn Trainer>) -> Result<(), TrainerError> {
        let spec = registry::Registry::global()
            .get(task)
            .ok_or_else(|| TrainerError::UnknownTask(task.canonical()))?;
        if spec.trainer_binding == TrainerBinding::Reference {
            return Err(TrainerError::TaskHasReferenceTrainer(task.clone()));
        }
        self.adapters
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(task.canonical(), adapter);
        Ok(())
    }

    /// Binds `adapter` to every external-adapter task.
    pub fn bind_all_external(&self, adapter: Arc<dyn Trainer>) {
        for spec in registry::list_tasks() {
            if spec.trainer_binding == TrainerBinding::ExternalAdapter {
                self.bind_external_adapter(&spec.id, adapter.clone())
                    .expect("adapter task accepts a binding");
            }
        }
    }

    pub fn is_bound(&self, task: &TaskId) -> bool {
        self.adapters
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .contains_key(&task.canonical())
    }

    /// The trainer that executes `spec`: its reference trainer or the bound
    /// adapter.
    pub fn resolve(&self, spec: &TaskSpec) -> Result<Arc<dyn Trainer>, TrainerError> {
        match spec.trainer_binding {
            TrainerBinding::Reference => {
                reference_trainer(&spec.id).ok_or_else(|| TrainerError::TrainerUnbound(spec.id.clone()))
            }
            TrainerBinding::ExternalAdapter => self
                .adapters
                .read()
                .unwrap_or_else(|e| e.into_inner())
                .get(&spec.id.canonical())
                .cloned()
                .ok_or_else(|| TrainerError::TrainerUnbound(spec.id.clone())),
        }
    }
}

/// Adapter that trains nothing: it records the inputs it was handed in
/// `artifact/adapter-inputs.json` and succeeds. Useful for checking configs
/// and dataset plumbing of adapter-bound tasks end to end.
pub struct DryRunAdapter;

pub const DRY_RUN_FILE: &str = "adapter-inputs.json";

impl Trainer for DryRunAdapter {
    fn train(&self, project: &ValidatedProject, data: &ProcessedDataset, ctx: &RunContext<'_>) -> Result<TrainOutput, TrainerError> {
        let dir = ctx.artifact_dir();
        fs::create_dir_all(&dir).map_err(|source| TrainerError::Io {
            path: dir.clone(),
            source,
        })?;
        let inputs = json!({
            "task": project.spec.id.canonical(),
            "base_model": project.config.base_model,
            "params": project.params.as_set(),
            "train_records": data.train.len(),
            "valid_records": data.valid.as_ref().map(Vec::len),
            "schema": data.schema,
            "fingerprint": data.fingerprint,
        });
        let path = dir.join(DRY_RUN_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&inputs).expect("json")).map_err(|source| TrainerError::Io {
            path: path.clone(),
            source,
        })?;
        ctx.log("dry-run adapter: inputs recorded, no training performed");
        Ok(TrainOutput {
            outcome: Outcome::Completed,
            global_step: 0,
            losses: Vec::new(),
            train_metrics: None,
            valid_metrics: None,
            metadata: json!({ "kind": "dry-run-adapter" }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_rules() {
        let b = TrainerBindings::new();
        let orpo: TaskId = "llm:orpo".parse().unwrap();
        let tc: TaskId = "text-classification".parse().unwrap();
        let spec = registry::resolve_task("llm:orpo").unwrap();
        assert!(matches!(b.resolve(spec), Err(TrainerError::TrainerUnbound(_))));
        assert!(matches!(
            b.bind_external_adapter(&tc, Arc::new(DryRunAdapter)),
            Err(TrainerError::TaskHasReferenceTrainer(_))
        ));
        b.bind_external_adapter(&orpo, Arc::new(DryRunAdapter)).unwrap();
        assert!(b.is_bound(&orpo));
        assert!(b.resolve(spec).is_ok());
    }

    #[test]
    fn every_reference_task_has_a_trainer() {
        for spec in registry::list_tasks() {
            let has = reference_trainer(&spec.id).is_some();
            assert_eq!(has, spec.trainer_binding == TrainerBinding::Reference, "{}", spec.id);
        }
    }

    #[test]
    fn value_helpers() {
        let mut r = Record::new();
        r.insert("t".into(), json!("  2.5 "));
        r.insert("n".into(), json!(3));
        r.insert("o".into(), json!({"a": 1}));
        assert_eq!(target_of(&r, "t", 0).unwrap(), 2.5);
        assert_eq!(label_of(&r, "n", 0).unwrap(), "3");
        assert!(label_of(&r, "o", 0).is_err());
        assert!(matches!(text_of(&r, "missing", 4), Err(TrainerError::MissingColumn { record: 4, .. })));
    }
}
