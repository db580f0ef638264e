//! Elastic ablation grid: train per seed, then evaluate the supernet under
//! reduced depth, width and top-k.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::corpus::prepare;
use super::trainer::{evaluate, TrainState};
use super::HarnessError;
use crate::elastic::{kept_layers, SubModelSpec};
use crate::model::Model;

/// One named inference restriction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub name: String,
    pub spec: SubModelSpec,
}

fn restriction(model: &Model, layers: usize, experts: usize, top_k: usize) -> SubModelSpec {
    let kept = kept_layers(model.num_layers(), layers);
    SubModelSpec {
        experts: kept.iter().map(|_| (0..experts).collect()).collect(),
        top_k: kept.iter().map(|_| top_k.min(experts)).collect(),
        layers: kept,
    }
}

/// `full`, then `depth-L'`, `width-E'` (the first `E'` experts of every
/// layer) and `topk-k` restrictions. Unset lists default to `L − 1`,
/// `E / 2` and the powers of two up to the model's top-k.
pub fn inference_configs(config: &RunConfig, model: &Model) -> Vec<InferenceConfig> {
    let (l, e, k) = (config.model.layers, config.model.experts, config.model.top_k);
    let a = &config.ablation;
    let or = |v: &Vec<usize>, d: Vec<usize>| if v.is_empty() { d } else { v.clone() };
    let depths = or(&a.depths, if l > 1 { vec![l - 1] } else { Vec::new() });
    let widths = or(&a.widths, if e > 1 { vec![e / 2] } else { Vec::new() });
    let top_ks = or(&a.top_ks, (0..).map(|p| 1usize << p).take_while(|&x| x <= k).collect());
    let mut out = vec![InferenceConfig { name: "full".into(), spec: restriction(model, l, e, k) }];
    out.extend(depths.into_iter().map(|d| InferenceConfig { name: format!("depth-{d}"), spec: restriction(model, d, e, k) }));
    out.extend(widths.into_iter().map(|w| InferenceConfig { name: format!("width-{w}"), spec: restriction(model, l, w, k) }));
    out.extend(top_ks.into_iter().map(|t| InferenceConfig { name: format!("topk-{t}"), spec: restriction(model, l, e, t) }));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub train_config: String,
    pub inference_config: String,
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    /// Token-weighted validation loss over every modality.
    pub val_loss: f64,
}

pub const ABLATION_CSV_HEADER: &str = "seed,train_config,inference_config,layers,experts,top_k,val_loss";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.seed, r.train_config, r.inference_config, r.layers, r.experts, r.top_k, r.val_loss
        );
    }
    s
}

/// Config for seed index `i` of one training recipe. The corpus stays that
/// of the base config.
pub fn seed_config(base: &RunConfig, train_config: &str, i: usize) -> RunConfig {
    let mut c = base.clone();
    c.data.seed = Some(base.data_seed());
    c.seed = base.seed.wrapping_add(i as u64);
    c.elastic.enabled = train_config == "elastic";
    c
}

/// Trains one seed and evaluates every inference restriction.
pub fn ablate_seed(base: &RunConfig, train_config: &str, i: usize) -> Result<Vec<AblationRow>, HarnessError> {
    let config = seed_config(base, train_config, i);
    let data = prepare(&config)?;
    let mut state = TrainState::new(config.clone())?;
    state.run(&data)?;
    let mut rows = Vec::new();
    for ic in inference_configs(&config, &state.model) {
        let losses = evaluate(&state.model, &ic.spec, &data.val)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for seq in &data.val {
            let w: f64 = seq.weights.iter().sum();
            let m = seq.modality.first().map(|m| m.index()).unwrap_or(0);
            if let Some(l) = losses[m] {
                num += l * w;
                den += w;
            }
        }
        rows.push(AblationRow {
            seed: config.seed,
            train_config: train_config.into(),
            inference_config: ic.name,
            layers: ic.spec.layers.len(),
            experts: ic.spec.experts[0].len(),
            top_k: ic.spec.top_k[0],
            val_loss: num / den,
        });
    }
    Ok(rows)
}

pub fn run_ablation(config: &RunConfig) -> Result<Vec<AblationRow>, HarnessError> {
    let mut rows = Vec::new();
    for tc in &config.ablation.train_configs {
        for i in 0..config.ablation.seeds {
            rows.extend(ablate_seed(config, tc, i)?);
        }
    }
    Ok(rows)
}

/// Sample standard deviation (`n − 1`); zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Outcome of "loss(worse) > loss(better)" across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub worse: String,
    pub better: String,
    /// Larger of the two configs' seed-to-seed sample std.
    pub sigma: f64,
    /// Per-seed `loss(worse) − loss(better)`.
    pub diffs: Vec<f64>,
    /// Seeds whose difference exceeds `3σ`.
    pub passing: usize,
}

impl OrderingCheck {
    pub fn holds(&self, required: usize) -> bool {
        self.passing >= required
    }
}

/// Compares two inference configs of one training recipe.
pub fn ordering(rows: &[AblationRow], train_config: &str, worse: &str, better: &str) -> Option<OrderingCheck> {
    let pick = |name: &str| -> Vec<(u64, f64)> {
        rows.iter()
            .filter(|r| r.train_config == train_config && r.inference_config == name)
            .map(|r| (r.seed, r.val_loss))
            .collect()
    };
    let w = pick(worse);
    let b = pick(better);
    if w.is_empty() || w.len() != b.len() || w.iter().zip(&b).any(|(x, y)| x.0 != y.0) {
        return None;
    }
    let wl: Vec<f64> = w.iter().map(|x| x.1).collect();
    let bl: Vec<f64> = b.iter().map(|x| x.1).collect();
    let sigma = sample_std(&wl).max(sample_std(&bl));
    let diffs: Vec<f64> = wl.iter().zip(&bl).map(|(x, y)| x - y).collect();
    let passing = diffs.iter().filter(|&&d| d > 3.0 * sigma).count();
    Some(OrderingCheck { worse: worse.into(), better: better.into(), sigma, diffs, passing })
}

pub const ORDERING_CSV_HEADER: &str = "worse,better,sigma,passing_seeds,total_seeds";

pub fn orderings_csv(checks: &[OrderingCheck]) -> String {
    let mut s = format!("{ORDERING_CSV_HEADER}\n");
    for c in checks {
        let _ = writeln!(s, "{},{},{},{},{}", c.worse, c.better, c.sigma, c.passing, c.diffs.len());
    }
    s
}

/// The depth, width and top-k orderings of the default grid.
pub fn standard_orderings(config: &RunConfig, rows: &[AblationRow], train_config: &str) -> Vec<OrderingCheck> {
    let (l, e, k) = (config.model.layers, config.model.experts, config.model.top_k);
    let mut pairs = vec![(format!("depth-{}", l - 1), "full".to_string()), (format!("width-{}", e / 2), "full".to_string())];
    let ks: Vec<usize> = (0..).map(|p| 1usize << p).take_while(|&x| x <= k).collect();
    pairs.extend(ks.windows(2).map(|w| (format!("topk-{}", w[0]), format!("topk-{}", w[1]))));
    pairs.iter().filter_map(|(a, b)| ordering(rows, train_config, a, b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::smoke_config;

    fn row(seed: u64, name: &str, loss: f64) -> AblationRow {
        AblationRow {
            seed,
            train_config: "elastic".into(),
            inference_config: name.into(),
            layers: 1,
            experts: 1,
            top_k: 1,
            val_loss: loss,
        }
    }

    #[test]
    fn sample_std_matches_hand_value() {
        assert_eq!(sample_std(&[1.0]), 0.0);
        assert!((sample_std(&[1.0, 2.0, 3.0, 4.0]) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ordering_counts_margins() {
        let rows: Vec<AblationRow> = (0..5)
            .flat_map(|s| [row(s, "a", 2.0 + 0.01 * s as f64), row(s, "b", 1.0 + 0.01 * s as f64)])
            .collect();
        let c = ordering(&rows, "elastic", "a", "b").unwrap();
        assert_eq!(c.passing, 5);
        assert!(ordering(&rows, "elastic", "b", "a").unwrap().passing == 0);
        assert!(ordering(&rows, "static", "a", "b").is_none());
    }

    #[test]
    fn default_grid_names() {
        let c = smoke_config(0);
        let m = Model::new(c.model.clone(), 0).unwrap();
        let names: Vec<String> = inference_configs(&c, &m).into_iter().map(|i| i.name).collect();
        assert_eq!(names, ["full", "depth-1", "width-4", "topk-1", "topk-2"]);
        let full = &inference_configs(&c, &m)[0].spec;
        assert_eq!(full, &SubModelSpec::full(&m));
    }
}
