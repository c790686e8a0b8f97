//! Training configuration assembly: default, then config file, then flags.

use std::path::Path;

use anyhow::{Context, Result};
use serde_json::Value;
use tcc::train::{LossKind, TrainConfig};

use crate::TrainArgs;

/// Recursively overlay `patch` onto `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => tcc::TccError::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

pub fn resolve(args: &TrainArgs, input_dim: usize) -> Result<TrainConfig> {
    let file = args.config.as_deref().map(read_file).transpose()?;

    // the loss must be known before defaults are built
    let file_loss = file.as_ref().and_then(|f| f.get("loss")).and_then(Value::as_str);
    let loss: LossKind = match (args.loss.as_deref(), file_loss) {
        (Some(s), _) | (None, Some(s)) => s.parse()?,
        (None, None) => LossKind::TccRegression,
    };

    let mut value = serde_json::to_value(TrainConfig::new(loss, input_dim))?;
    if let Some(f) = file {
        merge(&mut value, f);
    }
    let mut cfg: TrainConfig = serde_json::from_value(value).context("invalid training configuration")?;

    cfg.loss = loss;
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.frames {
        cfg.frames_per_seq = v;
    }
    if let Some(v) = args.lambda {
        cfg.tcc.lambda = v;
    }
    if let Some(v) = args.combine_weight {
        cfg.combine_weight = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if args.early_stop {
        cfg.early_stop = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_is_deep() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge(&mut base, json!({"b": {"d": 4}, "e": 5}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 2, "d": 4}, "e": 5}));
    }
}
