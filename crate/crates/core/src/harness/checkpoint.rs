//! JSON checkpoints of the full training state.

use std::path::Path;

use super::trainer::TrainState;
use super::{read_file, write_file, HarnessError};
use crate::model::Model;

pub fn save(state: &TrainState, path: &Path) -> Result<(), HarnessError> {
    let text = serde_json::to_string(state).map_err(|e| HarnessError::CheckpointCorrupt(e.to_string()))?;
    write_file(path, &text)
}

pub fn load(path: &Path) -> Result<TrainState, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::CheckpointMissing(path.to_path_buf()));
    }
    parse(&read_file(path)?)
}

/// Parses checkpoint text and re-validates the embedded config and model.
pub fn parse(text: &str) -> Result<TrainState, HarnessError> {
    let state: TrainState = serde_json::from_str(text).map_err(|e| HarnessError::CheckpointCorrupt(e.to_string()))?;
    state.config.validate()?;
    check_model(&state.model)?;
    if state.adam.m.len() != state.model.weights.flat().len() || state.adam.v.len() != state.adam.m.len() {
        return Err(HarnessError::CheckpointCorrupt("optimizer state does not match the model".into()));
    }
    Ok(state)
}

/// Structural checks on deserialized weights.
pub fn check_model(model: &Model) -> Result<(), HarnessError> {
    let corrupt = |m: String| Err(HarnessError::CheckpointCorrupt(m));
    let c = &model.config;
    c.validate()?;
    let w = &model.weights;
    let d = c.d_model;
    let n = model.num_layers();
    if n == 0 || model.biases.len() != n || model.layer_top_k.len() != n {
        return corrupt("per-layer arrays disagree".into());
    }
    let shape2 = |t: &crate::kernel::Tensor, r: usize, cc: usize| t.shape() == [r, cc];
    let tops = shape2(&w.embed, c.text_vocab, d)
        && shape2(&w.bit_in, c.bits, d)
        && shape2(&w.start, 1, d)
        && shape2(&w.final_norm, 1, d)
        && shape2(&w.text_head, d, c.text_vocab)
        && shape2(&w.bit_head, d, c.bits)
        && w.audio_tables.len() == c.audio_levels
        && w.audio_heads.len() == c.audio_levels
        && w.audio_tables.iter().all(|t| shape2(t, c.audio_codes, d))
        && w.audio_heads.iter().all(|t| shape2(t, d, c.audio_codes));
    if !tops {
        return corrupt("embedding or head shapes".into());
    }
    for (l, b) in w.blocks.iter().enumerate() {
        let e = b.experts.len();
        let ok = e > 0
            && shape2(&b.attn_norm, 1, d)
            && shape2(&b.ffn_norm, 1, d)
            && [&b.wq, &b.wk, &b.wv, &b.wo].iter().all(|t| shape2(t, d, d))
            && shape2(&b.gate, d, e)
            && b.experts.iter().all(|x| x.w_in.rows() == d && x.w_out.cols() == d && x.w_in.cols() == x.w_out.rows())
            && b.experts.windows(2).all(|p| p[0].w_in.shape() == p[1].w_in.shape())
            && model.biases[l].len() == e
            && (1..=e).contains(&model.layer_top_k[l]);
        if !ok {
            return corrupt(format!("block {l} shapes"));
        }
    }
    if !w.flat().iter().all(|t| t.is_finite()) || !model.biases.iter().flatten().all(|b| b.is_finite()) {
        return Err(HarnessError::NumericFailure("checkpoint holds non-finite weights".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elastic::SubModelSpec;
    use crate::harness::config::smoke_config;
    use crate::harness::corpus::prepare;
    use crate::harness::trainer::evaluate;

    #[test]
    fn round_trip_preserves_evaluation_bits() {
        let mut c = smoke_config(2);
        c.train.steps = 5;
        let data = prepare(&c).unwrap();
        let mut state = TrainState::new(c).unwrap();
        state.run(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save(&state, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded, state);
        let spec = SubModelSpec::full(&state.model);
        let before = evaluate(&state.model, &spec, &data.val).unwrap();
        let after = evaluate(&loaded.model, &spec, &data.val).unwrap();
        assert_eq!(before.map(|v| v.map(f64::to_bits)), after.map(|v| v.map(f64::to_bits)));
    }

    #[test]
    fn missing_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(&dir.path().join("nope.json")), Err(HarnessError::CheckpointMissing(_))));
        assert!(matches!(parse("{"), Err(HarnessError::CheckpointCorrupt(_))));
    }

    #[test]
    fn shape_tampering_detected() {
        let state = TrainState::new(smoke_config(3)).unwrap();
        let mut bad = state.clone();
        bad.model.biases[0].pop();
        assert!(check_model(&bad.model).is_err());
        let mut bad = state;
        bad.model.weights.blocks[1].gate = crate::kernel::Tensor::zeros(&[2, 2]);
        assert!(check_model(&bad.model).is_err());
    }
}
