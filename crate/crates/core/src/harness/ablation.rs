//! Cross-product runs over alignment loss type, locations and weights.

use std::fmt::Write as _;

use crate::alignment::{Location, LossType};
use crate::error::{bail, Result};
use crate::harness::dataset::SegSample;
use crate::harness::train::{train_student, TeacherRef, TrainConfig};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub loss_types: Vec<LossType>,
    pub location_sets: Vec<Vec<Location>>,
    pub weight_vectors: Vec<[f64; 4]>,
}

impl AblationSpec {
    pub fn runs(&self) -> usize {
        self.loss_types.len() * self.location_sets.len() * self.weight_vectors.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub loss_type: LossType,
    pub locations: Vec<Location>,
    pub weights: [f64; 4],
    pub miou: f64,
    pub final_loss: f64,
}

/// One student training run per combination, in loss-type-major order.
pub fn run_ablation(
    spec: &AblationSpec,
    base: &TrainConfig,
    model: &ModelConfig,
    teacher: Option<TeacherRef>,
    train: &[SegSample],
    val: &[SegSample],
) -> Result<Vec<AblationRow>> {
    if spec.runs() == 0 {
        bail!(Config, "ablation matrix has an empty axis");
    }
    if val.is_empty() {
        bail!(Data, "ablation needs a validation split");
    }
    let mut rows = Vec::with_capacity(spec.runs());
    for &loss_type in &spec.loss_types {
        for locations in &spec.location_sets {
            for &weights in &spec.weight_vectors {
                let mut cfg = base.clone();
                cfg.alignment.loss_type = loss_type;
                cfg.alignment.locations = locations.clone();
                cfg.alignment.weights = weights;
                let t = teacher.as_ref().map(|t| TeacherRef { cfg: t.cfg, params: t.params });
                let run = train_student(model, t, train, Some(val), &cfg)?;
                let miou = run.final_metrics.as_ref().map(|m| m.miou).unwrap_or(f64::NAN);
                let final_loss = run.log.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
                rows.push(AblationRow { loss_type, locations: locations.clone(), weights, miou, final_loss });
            }
        }
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "loss_type\tlocations\tw_logits\tw_decoder\tw_stage4\tw_stage3\tmiou\tfinal_loss";

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        let locs = if r.locations.is_empty() {
            "none".to_string()
        } else {
            r.locations.iter().map(|l| l.name()).collect::<Vec<_>>().join("+")
        };
        let w = r.weights;
        let _ = writeln!(s, "{}\t{locs}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}", r.loss_type, w[0], w[1], w[2], w[3], r.miou, r.final_loss);
    }
    s
}
