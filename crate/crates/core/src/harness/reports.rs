//! CSV/JSON report writers. Every header here is part of the output schema.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde_json::{json, Value};

use super::trainer::StepMetrics;
use super::HarnessError;
use crate::model::Model;
use crate::moe::{normalized_entropy, NeRow};
use crate::sequence::{Modality, TokenSequence};

pub const METRICS_CSV_HEADER: &str = "step,lr,batch,text_loss,vision_loss,audio_loss,objective";
/// Fraction of most-loaded experts compared by the IoU report.
pub const IOU_TOP_FRACTION: f64 = 0.25;

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn metrics_csv(log: &[StepMetrics]) -> String {
    let mut s = format!("{METRICS_CSV_HEADER}\n");
    for m in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.step,
            m.lr,
            m.batch,
            opt(m.losses[0]),
            opt(m.losses[1]),
            opt(m.losses[2]),
            m.objective
        );
    }
    s
}

/// `{"<modality>": loss, ...}` for the modalities that were present.
pub fn losses_json(losses: &[Option<f64>; 3]) -> Value {
    let map: BTreeMap<&str, f64> =
        Modality::ALL.iter().filter_map(|m| losses[m.index()].map(|v| (m.tag(), v))).collect();
    json!(map)
}

pub fn pretty(value: &Value) -> String {
    serde_json::to_string_pretty(value).expect("JSON values serialize") + "\n"
}

/// Per-layer expert loads of one modality's validation sequences under the
/// full model.
pub type ModalityLoads = Vec<(usize, Vec<(String, Vec<f64>)>)>;

/// Normalized entropy per (layer, modality) and per-layer tagged loads for
/// the IoU report.
pub fn route_stats(model: &Model, val: &[TokenSequence]) -> Result<(Vec<NeRow>, ModalityLoads), HarnessError> {
    let layers = model.num_layers();
    let mut sums: Vec<[Vec<f64>; 3]> = (0..layers).map(|l| [0, 1, 2].map(|_| vec![0.0; model.num_experts(l)])).collect();
    let plan = model.full_plan();
    for seq in val {
        let e = model.evaluate(seq, &plan)?;
        for l in &e.loads {
            for m in 0..3 {
                for (acc, x) in sums[l.layer][m].iter_mut().zip(&l.per_modality[m]) {
                    *acc += x;
                }
            }
        }
    }
    let mut rows = Vec::new();
    let mut tagged = Vec::new();
    for (layer, per_mod) in sums.into_iter().enumerate() {
        let mut present = Vec::new();
        for m in Modality::ALL {
            let loads = &per_mod[m.index()];
            if loads.iter().sum::<f64>() > 0.0 {
                rows.push(NeRow { layer, tag: m.tag().into(), ne: normalized_entropy(loads).map_err(crate::model::ModelError::from)? });
                present.push((m.tag().to_string(), loads.clone()));
            }
        }
        tagged.push((layer, present));
    }
    Ok((rows, tagged))
}
