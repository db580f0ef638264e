//! `omnimoe` command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::ablation::{ablation_csv, orderings_csv, run_ablation, standard_orderings};
use super::checkpoint;
use super::config::RunConfig;
use super::corpus::{gen_split, prepare, unigram_entropy, CorpusShape, Dataset};
use super::reports::{losses_json, metrics_csv, pretty, route_stats, IOU_TOP_FRACTION};
use super::trainer::{evaluate, TrainState};
use super::{read_file, write_file, HarnessError};
use crate::elastic::{extract, restrict_forward, SubModelSpec};
use crate::kernel::{softmax_row, Tensor};
use crate::moe::{iou_csv, ne_csv};
use crate::rlopt::{
    build_hinted_query, chain_to_logits, hint_prob, logp_from_logits, long_tail_workload, mean_token_entropy,
    simulate_rollout_scheduling, traces_csv, Objective, Rollout, RolloutGroup, SchedulePolicy,
};
use crate::sequence::{Modality, Target, TokenInput};
use crate::vision::{build_nfsp_sequence, build_pyramid_codes, codes_to_hex, NfspOptions};

#[derive(Debug, Parser)]
#[command(name = "omnimoe", version, about = "Unified multimodal MoE toy harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run configuration (TOML, or JSON starting with `{`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the synthetic train/validation corpora as JSON.
    GenData(Common),
    /// Trains a model and writes metrics, checkpoint and routing reports.
    Train(Common),
    /// Evaluates a checkpoint on its validation data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional sub-model spec (JSON file) to evaluate under.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Extracts a standalone sub-model from a checkpoint.
    ExtractSubmodel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        spec: PathBuf,
    },
    /// Trains per seed and evaluates reduced depth, width and top-k.
    ElasticAblate(Common),
    /// Normalized routing entropy and cross-modality expert overlap.
    RouteStats {
        #[command(flatten)]
        common: Common,
        /// Defaults to a freshly initialized model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rollout scheduling simulation on long-tail workloads.
    RlSim(Common),
    /// Evaluates the policy objectives on synthetic rollout groups.
    RlObjectives(Common),
    /// Dumps visual bit codes and the serialized token sequence.
    NfspDump {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        frames: usize,
    },
}

fn load_config(common: &Common, fallback: Option<&RunConfig>) -> Result<RunConfig, HarnessError> {
    let mut config = match (&common.config, fallback) {
        (Some(path), _) => {
            let text = read_file(path).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
            RunConfig::parse(&text)?
        }
        (None, Some(c)) => c.clone(),
        (None, None) => return Err(HarnessError::ConfigInvalid("--config is required".into())),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.to_string_lossy().into_owned();
    }
    config.validate()?;
    Ok(config)
}

fn out_path(config: &RunConfig, name: &str) -> PathBuf {
    Path::new(&config.out_dir).join(name)
}

/// Runs a parsed command, returning the files written.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    let mut emit = |config: &RunConfig, name: &str, text: &str| -> Result<(), HarnessError> {
        let p = out_path(config, name);
        write_file(&p, text)?;
        written.push(p);
        Ok(())
    };
    match cli.command {
        Command::GenData(common) => {
            let config = load_config(&common, None)?;
            let shape = CorpusShape::of(&config);
            let d = &config.data;
            let mut summary = serde_json::Map::new();
            for (m, tr, va) in [
                (Modality::Text, d.text_train, d.text_val),
                (Modality::Vision, d.vision_train, d.vision_val),
                (Modality::Audio, d.audio_train, d.audio_val),
            ] {
                let (train, val) = gen_split(m, tr, va, config.data_seed(), &shape);
                if let Dataset::Text(items) = &train {
                    summary.insert("text_unigram_entropy".into(), json!(unigram_entropy(items, shape.vocab)));
                }
                summary.insert(format!("{}_train", m.tag()), json!(train.len()));
                summary.insert(format!("{}_val", m.tag()), json!(val.len()));
                let body = json!({ "train": train, "val": val });
                emit(&config, &format!("{}.json", m.tag()), &(body.to_string() + "\n"))?;
            }
            emit(&config, "data_summary.json", &pretty(&serde_json::Value::Object(summary)))?;
        }
        Command::Train(common) => {
            let config = load_config(&common, None)?;
            let data = prepare(&config)?;
            let mut state = TrainState::new(config.clone())?;
            let log = state.run(&data)?;
            emit(&config, "metrics.csv", &metrics_csv(&log))?;
            let spec = SubModelSpec::full(&state.model);
            let losses = evaluate(&state.model, &spec, &data.val)?;
            emit(&config, "eval.json", &pretty(&json!({ "spec": "full", "val_loss": losses_json(&losses) })))?;
            let (ne, tagged) = route_stats(&state.model, &data.val)?;
            emit(&config, "ne.csv", &ne_csv(&ne))?;
            emit(&config, "iou.csv", &iou_csv(&tagged, IOU_TOP_FRACTION).map_err(crate::model::ModelError::from)?)?;
            let p = out_path(&config, "checkpoint.json");
            checkpoint::save(&state, &p)?;
            written.push(p);
        }
        Command::Eval { common, checkpoint: ck, spec } => {
            let state = checkpoint::load(&ck)?;
            let config = load_config(&common, Some(&state.config))?;
            let data = prepare(&state.config)?;
            let spec = match spec {
                Some(p) => SubModelSpec::from_json(&read_file(&p)?)?,
                None => SubModelSpec::full(&state.model),
            };
            let losses = evaluate(&state.model, &spec, &data.val)?;
            let body = json!({ "spec": serde_json::to_value(&spec).expect("spec serializes"), "val_loss": losses_json(&losses) });
            emit(&config, "eval.json", &pretty(&body))?;
        }
        Command::ExtractSubmodel { common, checkpoint: ck, spec } => {
            let state = checkpoint::load(&ck)?;
            let config = load_config(&common, Some(&state.config))?;
            let spec = SubModelSpec::from_json(&read_file(&spec)?)?;
            let sub = extract(&state.model, &spec)?;
            let data = prepare(&state.config)?;
            let mut worst: f64 = 0.0;
            for seq in &data.val {
                let a = restrict_forward(&state.model, &spec, seq)?;
                let b = sub.evaluate(seq, &sub.full_plan())?;
                worst = worst.max(a.hidden.max_abs_diff(&b.hidden));
            }
            let losses = evaluate(&sub, &SubModelSpec::full(&sub), &data.val)?;
            emit(&config, "submodel.json", &(serde_json::to_string(&sub).expect("model serializes") + "\n"))?;
            emit(&config, "spec.json", &(spec.to_json() + "\n"))?;
            let body = json!({
                "params_full": state.model.param_count(),
                "params_submodel": sub.param_count(),
                "max_abs_hidden_diff": worst,
                "val_loss": losses_json(&losses),
            });
            emit(&config, "extract.json", &pretty(&body))?;
        }
        Command::ElasticAblate(common) => {
            let config = load_config(&common, None)?;
            let rows = run_ablation(&config)?;
            emit(&config, "ablation.csv", &ablation_csv(&rows))?;
            let mut checks = Vec::new();
            for tc in &config.ablation.train_configs {
                checks.extend(standard_orderings(&config, &rows, tc));
            }
            emit(&config, "orderings.csv", &orderings_csv(&checks))?;
        }
        Command::RouteStats { common, checkpoint: ck } => {
            let (config, model) = match ck {
                Some(p) => {
                    let s = checkpoint::load(&p)?;
                    (load_config(&common, Some(&s.config))?, s.model)
                }
                None => {
                    let c = load_config(&common, None)?;
                    let m = crate::model::Model::new(c.model.clone(), c.seed)?;
                    (c, m)
                }
            };
            let data = prepare(&config)?;
            let (ne, tagged) = route_stats(&model, &data.val)?;
            emit(&config, "ne.csv", &ne_csv(&ne))?;
            emit(&config, "iou.csv", &iou_csv(&tagged, IOU_TOP_FRACTION).map_err(crate::model::ModelError::from)?)?;
        }
        Command::RlSim(common) => {
            let config = load_config(&common, None)?;
            let r = &config.rl;
            let mut summary = String::from("workload,policy,iterations,idle-slot-steps,wall-steps,first-mean-length,population-mean\n");
            let mut first = Vec::new();
            for wi in 0..r.workloads.max(1) {
                let seed = config.seed.wrapping_add(wi as u64);
                let workload = long_tail_workload(&r.workload, seed);
                let lens: Vec<usize> = workload.iter().flatten().copied().collect();
                let pop = lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64;
                for policy in SchedulePolicy::ALL {
                    let t = simulate_rollout_scheduling(policy, &workload, r.pools, r.workload.group, seed)?;
                    let first_mean = t.iterations.first().map_or(0.0, |i| i.trained_mean_length);
                    let _ = writeln!(
                        summary,
                        "{wi},{},{},{},{},{first_mean},{pop}",
                        policy.tag(),
                        t.iterations.len(),
                        t.total_idle_slot_steps,
                        t.total_wall_steps
                    );
                    if wi == 0 {
                        first.push(t);
                    }
                }
            }
            emit(&config, "rl_trace.csv", &traces_csv(&first))?;
            emit(&config, "rl_summary.csv", &summary)?;
        }
        Command::RlObjectives(common) => {
            let config = load_config(&common, None)?;
            let r = &config.rl;
            let objectives = [
                Objective::GrpoIcepop(r.misc),
                Objective::GspoIcepop(r.misc),
                Objective::MixedIcepop(r.misc),
                Objective::Wpsm(r.wpsm),
            ];
            let mut lines = String::new();
            for gi in 0..r.groups {
                let (group, logits, tokens) = synthetic_group(&config, gi)?;
                for obj in &objectives {
                    let e = obj.evaluate(&group);
                    let grad_sq: f64 = logits
                        .iter()
                        .zip(&tokens)
                        .zip(&e.grad_logp)
                        .map(|((z, y), g)| chain_to_logits(z, y, g).data().iter().map(|x| x * x).sum::<f64>())
                        .sum();
                    let silent = e.grad_logp.iter().filter(|g| g.iter().all(|&x| x == 0.0)).count();
                    let line = json!({
                        "group": gi,
                        "objective": obj.name(),
                        "value": e.value,
                        "grad_norm": grad_sq.sqrt(),
                        "accuracy": group.accuracy,
                        "zero_gradient_rollouts": silent,
                    });
                    lines.push_str(&line.to_string());
                    lines.push('\n');
                }
            }
            emit(&config, "objectives.jsonl", &lines)?;
            let think: Vec<usize> = (0..20).collect();
            let mut hint = String::from("t,pass_initial,p_hint,hint_tokens\n");
            for pass in [0.0, 0.25, 0.5, 1.0] {
                for t in (0..=50).step_by(10) {
                    let p = hint_prob(&r.hint, t, pass);
                    let n = build_hinted_query(&[] as &[usize], &think, p).len();
                    let _ = writeln!(hint, "{t},{pass},{p},{n}");
                }
            }
            emit(&config, "hint.csv", &hint)?;
        }
        Command::NfspDump { common, frames } => {
            let config = load_config(&common, None)?;
            let shape = CorpusShape::of(&config);
            let pyramid = &config.data.vision_pyramid;
            let Dataset::Vision(latents) = super::corpus::gen_corpus(Modality::Vision, frames.max(1), config.data_seed(), &shape) else {
                unreachable!("vision corpus");
            };
            let codes = latents.iter().map(|l| build_pyramid_codes(l, pyramid)).collect::<Result<Vec<_>, _>>()?;
            emit(&config, "nfsp.hex", &codes_to_hex(&codes))?;
            let opts = NfspOptions { flip_prob: config.data.vision_flip_prob, seed: config.seed, start_t: 0 };
            let seq = build_nfsp_sequence(&codes, pyramid, opts)?;
            let bits = |b: &[u8]| b.iter().map(|x| char::from(b'0' + x)).collect::<String>();
            let mut csv = String::from("index,input,target,weight,t,h,w\n");
            for i in 0..seq.len() {
                let input = match &seq.inputs[i] {
                    TokenInput::Start => "start".to_string(),
                    TokenInput::Bits(b) => bits(b),
                    other => format!("{other:?}"),
                };
                let target = match &seq.targets[i] {
                    Target::Bits(b) => bits(b),
                    other => format!("{other:?}"),
                };
                let p = seq.positions[i];
                let _ = writeln!(csv, "{i},{input},{target},{},{},{},{}", seq.weights[i], p.t, p.h, p.w);
            }
            emit(&config, "nfsp_tokens.csv", &csv)?;
            let body = json!({ "tokens": seq.len(), "visible_pairs": seq.mask.visible_pairs(), "frames": codes.len() });
            emit(&config, "nfsp_summary.json", &pretty(&body))?;
        }
    }
    Ok(written)
}

/// A seeded rollout group parameterized by per-token logits.
pub fn synthetic_group(config: &RunConfig, index: usize) -> Result<(RolloutGroup, Vec<Tensor>, Vec<Vec<usize>>), HarnessError> {
    let r = &config.rl;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(31).wrapping_add(index as u64));
    let mut rollouts = Vec::new();
    let mut logits = Vec::new();
    let mut tokens = Vec::new();
    for _ in 0..r.workload.group.max(2) {
        let n = rng.gen_range(1..=r.max_length);
        let sharp = rng.gen_range(0.5..4.0);
        let z = Tensor::matrix(n, r.vocab, (0..n * r.vocab).map(|_| sharp * rng.gen_range(-1.0..1.0)).collect());
        let ys: Vec<usize> = (0..n)
            .map(|j| WeightedIndex::new(softmax_row(z.row(j))).expect("softmax weights").sample(&mut rng))
            .collect();
        let cur = logp_from_logits(&z, &ys);
        let old: Vec<f64> = cur.iter().map(|c| c + rng.gen_range(-0.1..0.1)).collect();
        let infer = old.iter().map(|o| o + rng.gen_range(-r.mismatch..=r.mismatch)).collect();
        let reward = if rng.gen_bool(0.6) { 1.0 } else { 0.0 };
        rollouts.push(Rollout::new(infer, old, cur, reward, mean_token_entropy(&z))?);
        logits.push(z);
        tokens.push(ys);
    }
    Ok((RolloutGroup::new(index, rollouts)?, logits, tokens))
}

/// Parses arguments, runs, and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
