use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use tcc::align::{
    anomaly_score, dtw_align, nn_align, similarity_matrix, similarity_to_text, transfer_labels, AlignMode,
};
use tcc::data::{
    generate_synthetic, load_dataset, save_dataset, split_by_hash, write_frames, Dataset, FeatureSequence,
    SyntheticConfig,
};
use tcc::embedder::{load_params, EmbedderParams};
use tcc::eval::{evaluate, EvalConfig};
use tcc::gradcheck::loss_suite;
use tcc::train::{resume, train as run_training, RunFiles, TrainState};
use tcc::{TccError, Tensor};

use crate::*;

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Checkpoint and dataset shared by the embedding-space subcommands.
struct Loaded {
    params: EmbedderParams,
    dataset: Dataset,
}

impl Loaded {
    fn open(data: &Path, ckpt: &Path) -> Result<Self> {
        Ok(Self {
            params: load_params(ckpt)?,
            dataset: load_dataset(data)?,
        })
    }

    fn seq(&self, id: &str) -> Result<&FeatureSequence> {
        Ok(self.dataset.get(id)?)
    }

    fn embed(&self, id: &str) -> Result<Tensor> {
        Ok(self.params.embed_sequence(self.seq(id)?)?)
    }
}

fn align_pair(u: &Tensor, v: &Tensor, mode: &str, band: Option<usize>) -> Result<tcc::align::AlignmentResult> {
    Ok(match mode.parse::<AlignMode>()? {
        AlignMode::Nn => nn_align(u, v)?,
        AlignMode::Dtw => dtw_align(u, v, band)?,
    })
}

pub fn synth_gen(a: SynthGenArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        num_sequences: a.num,
        min_len: a.min_len,
        max_len: a.max_len,
        obs_dim: a.dim,
        num_phases: a.phases,
        noise_std: a.noise,
        warp_strength: a.warp,
        seed: a.seed,
        ..Default::default()
    };
    let seqs = generate_synthetic(&cfg)?;
    let ids: Vec<&str> = seqs.iter().map(|s| s.id.as_str()).collect();
    let splits = split_by_hash(&ids, a.seed, a.train_fraction);
    let manifest = save_dataset(&a.out, &Dataset::with_splits(seqs, splits))?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let files = RunFiles::new(&a.out);
    let report = match &a.resume {
        Some(ckpt) => {
            let state = TrainState::load(ckpt)?;
            let steps = a.steps.unwrap_or(state.config.steps);
            resume(state, steps, &dataset, Some(&files))?
        }
        None => {
            let dim = dataset
                .sequences
                .first()
                .ok_or_else(|| TccError::Contract("dataset is empty".into()))?
                .dim();
            let cfg = config::resolve(&a, dim)?;
            run_training(&cfg, &dataset, Some(&files))?
        }
    };
    let last = report.log.last().map_or(f64::NAN, |e| e.loss);
    println!(
        "step={} loss={last:e} early_stopped={} checkpoint={}",
        report.state.step,
        report.early_stopped,
        a.out.display()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let params = load_params(&a.ckpt)?;
    let dataset = load_dataset(&a.data)?;
    let mut cfg = if a.alignment_only {
        EvalConfig::alignment_only()
    } else {
        EvalConfig::default()
    };
    if !a.label_fractions.is_empty() {
        cfg.label_fractions = a.label_fractions.clone();
    }
    let report = evaluate(&params, &dataset, a.split.parse()?, &cfg)?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        write(out, &report.to_json())?;
    }
    Ok(())
}

pub fn align(a: AlignArgs) -> Result<()> {
    let p = &a.pair;
    let l = Loaded::open(&p.data, &p.ckpt)?;
    let result = align_pair(&l.embed(&p.a)?, &l.embed(&p.b)?, &a.mode, a.band)?;
    write(&p.out, &result.to_text())
}

pub fn simmat(a: PairArgs) -> Result<()> {
    let l = Loaded::open(&a.data, &a.ckpt)?;
    let sim = similarity_matrix(&l.embed(&a.a)?, &l.embed(&a.b)?)?;
    write(&a.out, &similarity_to_text(&sim))
}

pub fn anomaly(a: AnomalyArgs) -> Result<()> {
    let l = Loaded::open(&a.data, &a.ckpt)?;
    let query = l.embed(&a.query)?;
    let refs = a.refs.iter().map(|id| l.embed(id)).collect::<Result<Vec<_>>>()?;
    let scores = anomaly_score(&query, &refs.iter().collect::<Vec<_>>())?;
    let mut text = String::new();
    for (i, s) in scores.iter().enumerate() {
        writeln!(text, "{i} {s}")?;
    }
    write(&a.out, &text)
}

pub fn transfer(a: TransferArgs) -> Result<()> {
    let l = Loaded::open(&a.data, &a.ckpt)?;
    let labels = &l.seq(&a.source)?.annotation()?.phase_labels;
    let target = l.embed(&a.target)?;
    let alignment = align_pair(&target, &l.embed(&a.source)?, &a.mode, a.band)?;
    let moved = transfer_labels(&alignment, labels, target.rows())?;
    let mut text = String::new();
    for (i, label) in moved.iter().enumerate() {
        writeln!(text, "{i} {label}")?;
    }
    write(&a.out, &text)
}

pub fn grad_check(a: GradCheckArgs) -> Result<()> {
    let suite = loss_suite(a.instances, a.seed, a.step, a.tol)?;
    let mut failed = vec![];
    for e in &suite {
        println!(
            "{:<28} instances={} max_rel_error={:.3e} {}",
            e.loss,
            e.instances,
            e.max_rel_error,
            if e.passed { "ok" } else { "FAIL" }
        );
        if !e.passed {
            failed.push(e.loss);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient check failed at tol {}: {}", a.tol, failed.join(", "))).into())
    }
}

pub fn export_embeddings(a: ExportArgs) -> Result<()> {
    let l = Loaded::open(&a.data, &a.ckpt)?;
    match &a.seq {
        Some(id) => {
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_frames(&a.out, &l.embed(id)?)?;
        }
        None => {
            let embedded = l
                .dataset
                .sequences
                .iter()
                .map(|s| {
                    let e = l.params.embed_sequence(s)?;
                    Ok(FeatureSequence::new(s.id.clone(), e, s.fps, s.annotation.clone())?)
                })
                .collect::<Result<Vec<_>>>()?;
            let out = Dataset {
                sequences: embedded,
                splits: l.dataset.splits.clone(),
            };
            println!("{}", save_dataset(&a.out, &out)?.display());
        }
    }
    Ok(())
}
