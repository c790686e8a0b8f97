//! Training loop: batch sampling, loss assembly, Adam updates, checkpoints
//! and the per-step loss log.
//!
//! All randomness of step `t` is derived from `(seed, t)`, so a run resumed
//! from a checkpoint written after step `k` continues exactly as the
//! uninterrupted run would have.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{combined_loss, sal_loss, tcn_npairs_loss, BaselineConfig, SalHead};
use crate::data::{jitter_augment, Dataset, FeatureSequence, Split};
use crate::embedder::{decode_checkpoint, encode_checkpoint, init_params, EmbedderConfig, EmbedderParams, Reader};
use crate::error::{ensure, Result, TccError};
use crate::losses::{tcc_batch_loss, TccConfig, TccVariant};
use crate::optim::{adam_step, AdamState};
use crate::tape::{Tape, Var};

const STATE_MAGIC: [u8; 4] = *b"TRST";
const STATE_VERSION: u32 = 1;
/// Moving-average window of the early-stop rule.
pub const PLATEAU_WINDOW: usize = 200;
/// Relative improvement between consecutive windows below which training stops.
pub const PLATEAU_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "tcc_classification")]
    TccClassification,
    #[serde(rename = "tcc_regression")]
    TccRegression,
    #[serde(rename = "tcc_mse")]
    TccMse,
    #[serde(rename = "tcn")]
    Tcn,
    #[serde(rename = "sal")]
    Sal,
    #[serde(rename = "tcc+tcn")]
    TccTcn,
    #[serde(rename = "tcc+sal")]
    TccSal,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::TccClassification,
        LossKind::TccRegression,
        LossKind::TccMse,
        LossKind::Tcn,
        LossKind::Sal,
        LossKind::TccTcn,
        LossKind::TccSal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::TccClassification => "tcc_classification",
            LossKind::TccRegression => "tcc_regression",
            LossKind::TccMse => "tcc_mse",
            LossKind::Tcn => "tcn",
            LossKind::Sal => "sal",
            LossKind::TccTcn => "tcc+tcn",
            LossKind::TccSal => "tcc+sal",
        }
    }

    /// The cycle-consistency variant, for losses that include one. The two
    /// combinations use the regression variant.
    pub fn tcc_variant(self) -> Option<TccVariant> {
        match self {
            LossKind::TccClassification => Some(TccVariant::Classification),
            LossKind::TccRegression | LossKind::TccTcn | LossKind::TccSal => Some(TccVariant::Regression),
            LossKind::TccMse => Some(TccVariant::RegressionMse),
            LossKind::Tcn | LossKind::Sal => None,
        }
    }

    pub fn uses_sal_head(self) -> bool {
        matches!(self, LossKind::Sal | LossKind::TccSal)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = TccError;
    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TccError::Contract(format!("unknown loss {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub batch_size: usize,
    /// Overrides `tcc.frames_per_seq`.
    pub frames_per_seq: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub seed: u64,
    /// Overrides `baseline.combine_weight`.
    pub combine_weight: f64,
    /// Standard deviation of the feature jitter applied to every batch.
    pub jitter_std: f64,
    /// Write the checkpoint every this many steps; 0 writes only at the end.
    pub checkpoint_every: usize,
    pub early_stop: bool,
    pub embedder: EmbedderConfig,
    pub tcc: TccConfig,
    pub baseline: BaselineConfig,
}

impl TrainConfig {
    pub fn new(loss: LossKind, input_dim: usize) -> Self {
        Self {
            loss,
            batch_size: 4,
            frames_per_seq: 20,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            steps: 2000,
            seed: 0,
            combine_weight: 0.5,
            jitter_std: 0.05,
            checkpoint_every: 500,
            early_stop: false,
            embedder: EmbedderConfig::new(input_dim),
            tcc: TccConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Contract, "steps must be >= 1");
        ensure!(self.batch_size >= 2, Contract, "batch_size must be >= 2");
        ensure!(self.frames_per_seq >= 1, Contract, "frames_per_seq must be >= 1");
        ensure!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            Contract,
            "learning rate must be >= 0"
        );
        ensure!(self.weight_decay >= 0.0, Contract, "weight decay must be >= 0");
        ensure!(self.jitter_std >= 0.0, Contract, "jitter std must be >= 0");
        self.embedder.validate()?;
        self.effective_tcc().validate()?;
        self.effective_baseline().validate()
    }

    /// Cycle-loss settings with this config's variant and frame count applied.
    pub fn effective_tcc(&self) -> TccConfig {
        TccConfig {
            variant: self.loss.tcc_variant().unwrap_or(self.tcc.variant),
            frames_per_seq: self.frames_per_seq,
            ..self.tcc.clone()
        }
    }

    pub fn effective_baseline(&self) -> BaselineConfig {
        BaselineConfig {
            combine_weight: self.combine_weight,
            ..self.baseline.clone()
        }
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Steps completed.
    pub step: usize,
    pub params: EmbedderParams,
    pub head: Option<SalHead>,
    pub adam: AdamState,
}

impl TrainState {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.embedder, config.seed)?;
        let head = config.loss.uses_sal_head().then(|| {
            SalHead::init(
                config.embedder.embedding_dim,
                &config.baseline.sal_head_sizes,
                step_seed(config.seed, u64::MAX, 0),
            )
        });
        let len = params.param_count() + head.as_ref().map_or(0, |h| h.flat().len());
        Ok(Self {
            config: config.clone(),
            step: 0,
            params,
            head,
            adam: AdamState::new(len),
        })
    }

    fn flat(&self) -> Vec<f64> {
        let mut flat = self.params.flat();
        if let Some(h) = &self.head {
            flat.extend(h.flat());
        }
        flat
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.params.param_count();
        self.params = EmbedderParams::from_flat(&self.config.embedder, &flat[..n])?;
        if self.head.is_some() {
            self.head = Some(SalHead::from_flat(
                self.config.embedder.embedding_dim,
                &self.config.baseline.sal_head_sizes,
                &flat[n..],
            )?);
        }
        Ok(())
    }

    /// A `TCCE` checkpoint whose trailer carries the optimizer state.
    pub fn encode(&self) -> Vec<u8> {
        let mut t = Vec::new();
        t.extend_from_slice(&STATE_MAGIC);
        t.extend_from_slice(&STATE_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        t.extend_from_slice(&(json.len() as u64).to_le_bytes());
        t.extend_from_slice(&json);
        t.extend_from_slice(&(self.step as u64).to_le_bytes());
        t.extend_from_slice(&self.adam.t.to_le_bytes());
        t.extend_from_slice(&(self.adam.m.len() as u64).to_le_bytes());
        for x in self.adam.m.iter().chain(&self.adam.v) {
            t.extend_from_slice(&x.to_le_bytes());
        }
        let head = self.head.as_ref().map(SalHead::flat).unwrap_or_default();
        t.extend_from_slice(&(head.len() as u64).to_le_bytes());
        for x in head {
            t.extend_from_slice(&x.to_le_bytes());
        }
        encode_checkpoint(&self.params, &t)
    }

    pub fn decode(bytes: &[u8], path: &str) -> Result<Self> {
        let (params, rest) = decode_checkpoint(bytes, path)?;
        let mut r = Reader::new(rest, path);
        let magic = r.take(4, "trainer state magic")?;
        if magic != STATE_MAGIC {
            return Err(TccError::BadMagic {
                path: path.into(),
                expected: STATE_MAGIC,
                found: magic.try_into().expect("4 bytes"),
            });
        }
        let version = r.u32("trainer state version")?;
        if version != STATE_VERSION {
            return Err(TccError::Version {
                path: path.into(),
                expected: STATE_VERSION,
                found: version,
            });
        }
        let json_len = r.u64("config length")? as usize;
        let config: TrainConfig =
            serde_json::from_slice(r.take(json_len, "config")?).map_err(|e| TccError::Truncated {
                path: path.into(),
                detail: format!("bad trainer config: {e}"),
            })?;
        ensure!(
            config.embedder == params.config,
            Contract,
            "{path}: trainer config disagrees with checkpoint architecture"
        );
        let step = r.u64("step")? as usize;
        let t = r.u64("adam step")?;
        let n = r.u64("moment length")?;
        let m = r.f64s(n, "first moments")?;
        let v = r.f64s(n, "second moments")?;
        let head_len = r.u64("head length")?;
        let head_flat = r.f64s(head_len, "head parameters")?;
        let head = if config.loss.uses_sal_head() {
            Some(SalHead::from_flat(
                config.embedder.embedding_dim,
                &config.baseline.sal_head_sizes,
                &head_flat,
            )?)
        } else {
            None
        };
        let state = Self {
            config,
            step,
            params,
            head,
            adam: AdamState { m, v, t },
        };
        ensure!(
            state.adam.m.len() == state.flat().len(),
            Contract,
            "{path}: optimizer state has {} entries for {} parameters",
            state.adam.m.len(),
            state.flat().len()
        );
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => TccError::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::decode(&bytes, &path.display().to_string())
    }
}

/// Independent stream for `(seed, step, slot)`.
fn step_seed(seed: u64, step: u64, slot: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ slot.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean of a per-sequence loss over the batch.
fn mean_over<'t, F>(batch: &[FeatureSequence], mut f: F) -> Result<Var<'t>>
where
    F: FnMut(usize, &FeatureSequence) -> Result<Var<'t>>,
{
    let mut total: Option<Var<'t>> = None;
    for (i, s) in batch.iter().enumerate() {
        let l = f(i, s)?;
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    Ok(total.expect("batch is nonempty").scale(1.0 / batch.len() as f64))
}

/// The configured loss on one batch, recorded on `tape`.
pub fn batch_loss<'t>(
    tape: &'t Tape,
    state: &TrainState,
    theta: &crate::embedder::LayerVars<'t>,
    head: Option<&crate::embedder::LayerVars<'t>>,
    batch: &[FeatureSequence],
    seed: u64,
) -> Result<Var<'t>> {
    let cfg = &state.config;
    let tcc = cfg.effective_tcc();
    let base = cfg.effective_baseline();
    let params = &state.params;
    let refs: Vec<&FeatureSequence> = batch.iter().collect();
    let tcc_loss = || tcc_batch_loss(tape, theta, params, &refs, &tcc, seed);
    let tcn = || {
        mean_over(batch, |i, s| {
            tcn_npairs_loss(
                tape,
                theta,
                params,
                s,
                base.tcn_anchors,
                base.tcn_window,
                step_seed(seed, i as u64, 1),
            )
        })
    };
    let sal = || {
        let head = head.expect("sal head registered");
        mean_over(batch, |i, s| {
            sal_loss(tape, theta, params, head, s, &base, step_seed(seed, i as u64, 2))
        })
    };
    match cfg.loss {
        LossKind::TccClassification | LossKind::TccRegression | LossKind::TccMse => tcc_loss(),
        LossKind::Tcn => tcn(),
        LossKind::Sal => sal(),
        LossKind::TccTcn => combined_loss(&tcc_loss()?, &tcn()?, base.combine_weight),
        LossKind::TccSal => combined_loss(&tcc_loss()?, &sal()?, base.combine_weight),
    }
}

/// Drives [`TrainState`] over a fixed set of training sequences.
pub struct Trainer<'a> {
    pub state: TrainState,
    train: Vec<&'a FeatureSequence>,
}

impl<'a> Trainer<'a> {
    pub fn new(state: TrainState, train: Vec<&'a FeatureSequence>) -> Result<Self> {
        state.config.validate()?;
        let cfg = &state.config;
        ensure!(
            train.len() >= cfg.batch_size,
            Contract,
            "{} training sequences, batch size {} needs at least that many",
            train.len(),
            cfg.batch_size
        );
        if let Some(s) = train.iter().find(|s| s.dim() != cfg.embedder.input_dim) {
            return Err(TccError::Shape(format!(
                "sequence {} has feature dim {}, embedder expects {}",
                s.id,
                s.dim(),
                cfg.embedder.input_dim
            )));
        }
        Ok(Self { state, train })
    }

    /// Sequences and loss seed of step `step` (0-based).
    pub fn batch_for(&self, step: usize) -> Result<(Vec<FeatureSequence>, u64)> {
        let cfg = &self.state.config;
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, step as u64, 0));
        let mut pick = sample(&mut rng, self.train.len(), cfg.batch_size).into_vec();
        pick.sort_unstable();
        let batch = pick
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                jitter_augment(
                    self.train[i],
                    cfg.jitter_std,
                    step_seed(cfg.seed, step as u64, 10 + slot as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((batch, step_seed(cfg.seed, step as u64, 3)))
    }

    /// Run one optimizer step and return the loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.state.step;
        let (batch, seed) = self.batch_for(step)?;
        let tape = Tape::new();
        let theta = self.state.params.register(&tape);
        let head = self.state.head.as_ref().map(|h| h.register(&tape));
        let loss = batch_loss(&tape, &self.state, &theta, head.as_ref(), &batch, seed)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(TccError::Degenerate(format!("non-finite loss {value} at step {step}")));
        }
        let grads = tape.backward(&loss)?;
        let mut g = theta.flat_grad(&grads);
        if let Some(h) = &head {
            g.extend(h.flat_grad(&grads));
        }
        drop(grads);
        drop(tape);
        let mut flat = self.state.flat();
        let cfg = &self.state.config;
        adam_step(
            &mut flat,
            &g,
            &mut self.state.adam,
            cfg.learning_rate,
            cfg.weight_decay,
            step as u64 + 1,
        )?;
        self.state.set_flat(&flat)?;
        self.state.step += 1;
        Ok(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub wallclock_ms: u128,
}

impl LogEntry {
    pub fn line(&self) -> String {
        format!("{} {:e} {}", self.step, self.loss, self.wallclock_ms)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub state: TrainState,
    pub log: Vec<LogEntry>,
    pub early_stopped: bool,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|e| e.loss).collect()
    }
}

/// Output locations of a run: the checkpoint, its loss log (`<ckpt>.log`)
/// and the JSON summary written at exit (`<ckpt>.summary.json`).
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub checkpoint: PathBuf,
}

impl RunFiles {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint: checkpoint.into(),
        }
    }

    pub fn log(&self) -> PathBuf {
        suffixed(&self.checkpoint, ".log")
    }

    pub fn summary(&self) -> PathBuf {
        suffixed(&self.checkpoint, ".summary.json")
    }
}

fn suffixed(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// True once the latest window's mean improves on the previous window's by
/// less than [`PLATEAU_TOL`] relative.
pub fn plateaued(losses: &[f64]) -> bool {
    let n = losses.len();
    if n < 2 * PLATEAU_WINDOW {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let prev = mean(&losses[n - 2 * PLATEAU_WINDOW..n - PLATEAU_WINDOW]);
    let cur = mean(&losses[n - PLATEAU_WINDOW..]);
    (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < PLATEAU_TOL
}

/// Train from scratch on the training split of `dataset`.
pub fn train(config: &TrainConfig, dataset: &Dataset, files: Option<&RunFiles>) -> Result<TrainReport> {
    run(TrainState::init(config)?, dataset, files, false)
}

/// Continue `state` until `steps` total steps have been taken.
pub fn resume(mut state: TrainState, steps: usize, dataset: &Dataset, files: Option<&RunFiles>) -> Result<TrainReport> {
    ensure!(
        steps >= state.step,
        Contract,
        "checkpoint is already at step {}, beyond the requested {steps}",
        state.step
    );
    state.config.steps = steps;
    run(state, dataset, files, true)
}

fn run(state: TrainState, dataset: &Dataset, files: Option<&RunFiles>, append: bool) -> Result<TrainReport> {
    let train_seqs = dataset.split(Split::Train);
    let mut trainer = Trainer::new(state, train_seqs)?;
    let total = trainer.state.config.steps;
    let every = trainer.state.config.checkpoint_every;
    let mut log_file = match files {
        Some(f) => {
            let file = if append {
                OpenOptions::new().create(true).append(true).open(f.log())?
            } else {
                File::create(f.log())?
            };
            Some(BufWriter::new(file))
        }
        None => None,
    };
    let start = Instant::now();
    let mut log = Vec::new();
    let mut early_stopped = false;
    while trainer.state.step < total {
        let loss = trainer.step()?;
        let entry = LogEntry {
            step: trainer.state.step,
            loss,
            wallclock_ms: start.elapsed().as_millis(),
        };
        if let Some(w) = log_file.as_mut() {
            writeln!(w, "{}", entry.line())?;
            w.flush()?;
        }
        log.push(entry);
        if let Some(f) = files {
            if every > 0 && trainer.state.step % every == 0 && trainer.state.step < total {
                trainer.state.save(&f.checkpoint)?;
            }
        }
        if trainer.state.config.early_stop && plateaued(&log.iter().map(|e| e.loss).collect::<Vec<_>>()) {
            early_stopped = true;
            break;
        }
    }
    if let Some(f) = files {
        trainer.state.save(&f.checkpoint)?;
        let summary = serde_json::json!({
            "loss": trainer.state.config.loss.name(),
            "steps": trainer.state.step,
            "seed": trainer.state.config.seed,
            "first_loss": log.first().map(|e| e.loss),
            "final_loss": log.last().map(|e| e.loss),
            "early_stopped": early_stopped,
            "wallclock_ms": start.elapsed().as_millis() as u64,
        });
        std::fs::write(
            f.summary(),
            serde_json::to_string_pretty(&summary).expect("json") + "\n",
        )?;
    }
    Ok(TrainReport {
        state: trainer.state,
        log,
        early_stopped,
    })
}
