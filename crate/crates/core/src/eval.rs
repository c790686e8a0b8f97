//! Frozen-embedding evaluation: phase classification at several label
//! budgets, phase progression, Kendall's tau and cycle consistency.
//!
//! Fitting functions only ever see embeddings; parameters are used once, up
//! front, to embed every sequence.

use serde::Serialize;

use crate::data::{Dataset, FeatureSequence, PhaseAnnotation, Split};
use crate::embedder::EmbedderParams;
use crate::error::{ensure, Result, TccError};
use crate::metrics::{cycle_consistency_fraction, kendalls_tau, phase_progression_targets};
use crate::par;
use crate::probe::{
    classify_accuracy, fit_linear_classifier, fit_linear_regressor, mean_r_squared, DEFAULT_L2, DEFAULT_RIDGE,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Fractions of training videos whose labels the phase classifier sees.
    /// Empty disables phase classification.
    pub label_fractions: Vec<f64>,
    pub progression: bool,
    pub l2: f64,
    pub ridge: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            label_fractions: vec![0.1, 0.5, 1.0],
            progression: true,
            l2: DEFAULT_L2,
            ridge: DEFAULT_RIDGE,
        }
    }
}

impl EvalConfig {
    /// Only the label-free alignment measures.
    pub fn alignment_only() -> Self {
        Self {
            label_fractions: vec![],
            progression: false,
            ..Self::default()
        }
    }

    fn needs_labels(&self) -> bool {
        !self.label_fractions.is_empty() || self.progression
    }
}

/// Embedding of one whole sequence.
#[derive(Debug, Clone)]
pub struct Embedded<'a> {
    pub id: &'a str,
    pub embedding: Tensor,
    pub annotation: Option<&'a PhaseAnnotation>,
}

impl Embedded<'_> {
    fn labels(&self) -> Result<&PhaseAnnotation> {
        self.annotation
            .ok_or_else(|| TccError::MissingAnnotation(self.id.to_string()))
    }
}

pub fn embed_all<'a>(params: &EmbedderParams, seqs: &[&'a FeatureSequence]) -> Result<Vec<Embedded<'a>>> {
    par::map(seqs, |s| {
        Ok(Embedded {
            id: &s.id,
            embedding: params.embed_sequence(s)?,
            annotation: s.annotation.as_ref(),
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FractionAccuracy {
    pub fraction: f64,
    pub videos: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub sequences: usize,
    pub phase_accuracy: Vec<FractionAccuracy>,
    pub phase_progression_r2: Option<f64>,
    /// Mean over ordered pairs of distinct evaluated sequences; absent with
    /// fewer than two sequences.
    pub kendalls_tau: Option<f64>,
    pub cycle_consistency: Option<f64>,
}

impl EvalReport {
    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let split = match self.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        let mut out = format!("split={split}\nsequences={}\n", self.sequences);
        for a in &self.phase_accuracy {
            out += &format!("phase_accuracy@{}={:.6}\n", a.fraction, a.accuracy);
        }
        let opt = |name: &str, v: Option<f64>| v.map(|v| format!("{name}={v:.6}\n")).unwrap_or_default();
        out += &opt("phase_progression_r2", self.phase_progression_r2);
        out += &opt("kendalls_tau", self.kendalls_tau);
        out += &opt("cycle_consistency", self.cycle_consistency);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
    ensure!(!parts.is_empty(), Contract, "nothing to stack");
    let d = parts[0].cols();
    ensure!(
        parts.iter().all(|t| t.cols() == d),
        Shape,
        "stacked rows differ in width"
    );
    let rows = parts.iter().map(|t| t.rows()).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::matrix(rows, d, data)
}

/// Accuracy on `test` of a classifier fitted to the phase labels of `train`.
pub fn phase_accuracy(train: &[(&Tensor, &[usize])], test: &[(&Tensor, &[usize])], l2: f64) -> Result<f64> {
    let x = stack_rows(&train.iter().map(|(t, _)| *t).collect::<Vec<_>>())?;
    let y: Vec<usize> = train.iter().flat_map(|(_, l)| l.iter().copied()).collect();
    let model = fit_linear_classifier(&x, &y, l2)?;
    let tx = stack_rows(&test.iter().map(|(t, _)| *t).collect::<Vec<_>>())?;
    let ty: Vec<usize> = test.iter().flat_map(|(_, l)| l.iter().copied()).collect();
    classify_accuracy(&model, &tx, &ty)
}

/// Mean R² over evaluated videos of a ridge regressor fitted on all training
/// videos' progression targets.
pub fn progression_r2(train: &[Embedded], test: &[Embedded], ridge: f64) -> Result<f64> {
    let targets = |e: &Embedded| phase_progression_targets(e.labels()?, e.embedding.rows());
    let train_t = train.iter().map(targets).collect::<Result<Vec<_>>>()?;
    let x = stack_rows(&train.iter().map(|e| &e.embedding).collect::<Vec<_>>())?;
    let y = stack_rows(&train_t.iter().collect::<Vec<_>>())?;
    let model = fit_linear_regressor(&x, &y, ridge)?;
    let scores = test
        .iter()
        .map(|e| mean_r_squared(&model, &e.embedding, &targets(e)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Kendall's tau and cycle-consistency fraction averaged over all ordered
/// pairs, evaluated in parallel and reduced in pair order.
pub fn pairwise_alignment(embs: &[&Tensor]) -> Result<Option<(f64, f64)>> {
    let n = embs.len();
    if n < 2 {
        return Ok(None);
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    let scores = par::map(&pairs, |&(a, b)| {
        Ok((
            kendalls_tau(embs[a], embs[b])?,
            cycle_consistency_fraction(embs[a], embs[b])?,
        ))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let m = scores.len() as f64;
    let tau = scores.iter().map(|s| s.0).sum::<f64>() / m;
    let cyc = scores.iter().map(|s| s.1).sum::<f64>() / m;
    Ok(Some((tau, cyc)))
}

pub fn evaluate_embeddings(
    train: &[Embedded],
    test: &[Embedded],
    split: Split,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    ensure!(!test.is_empty(), Contract, "evaluation split is empty");
    let mut phase = Vec::new();
    if cfg.needs_labels() {
        ensure!(
            !train.is_empty(),
            Contract,
            "label-dependent metrics need training sequences"
        );
        for e in train.iter().chain(test) {
            e.labels()?;
        }
    }
    if !cfg.label_fractions.is_empty() {
        let labelled = |e: &Embedded<'_>| -> (Tensor, Vec<usize>) {
            (e.embedding.clone(), e.annotation.expect("checked").phase_labels.clone())
        };
        let train_l: Vec<_> = train.iter().map(labelled).collect();
        let test_l: Vec<_> = test.iter().map(labelled).collect();
        let test_refs: Vec<(&Tensor, &[usize])> = test_l.iter().map(|(t, l)| (t, l.as_slice())).collect();
        for &f in &cfg.label_fractions {
            ensure!(f > 0.0 && f <= 1.0, Contract, "label fraction {f} outside (0, 1]");
            let videos = ((f * train.len() as f64).ceil() as usize).clamp(1, train.len());
            let train_refs: Vec<(&Tensor, &[usize])> =
                train_l[..videos].iter().map(|(t, l)| (t, l.as_slice())).collect();
            phase.push(FractionAccuracy {
                fraction: f,
                videos,
                accuracy: phase_accuracy(&train_refs, &test_refs, cfg.l2)?,
            });
        }
    }
    let phase_progression_r2 = if cfg.progression {
        Some(progression_r2(train, test, cfg.ridge)?)
    } else {
        None
    };
    let align = pairwise_alignment(&test.iter().map(|e| &e.embedding).collect::<Vec<_>>())?;
    Ok(EvalReport {
        split,
        sequences: test.len(),
        phase_accuracy: phase,
        phase_progression_r2,
        kendalls_tau: align.map(|a| a.0),
        cycle_consistency: align.map(|a| a.1),
    })
}

/// Embed with frozen `params` and evaluate on `split`; classifiers and
/// regressors are fitted on the training split.
pub fn evaluate(params: &EmbedderParams, dataset: &Dataset, split: Split, cfg: &EvalConfig) -> Result<EvalReport> {
    let test = embed_all(params, &dataset.split(split))?;
    let train = if cfg.needs_labels() {
        embed_all(params, &dataset.split(Split::Train))?
    } else {
        Vec::new()
    };
    evaluate_embeddings(&train, &test, split, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::embedder::{init_params, EmbedderConfig};

    fn setup() -> (EmbedderParams, Dataset) {
        let seqs = generate_synthetic(&SyntheticConfig {
            num_sequences: 6,
            min_len: 20,
            max_len: 30,
            obs_dim: 4,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let splits = vec![
            Split::Train,
            Split::Train,
            Split::Train,
            Split::Train,
            Split::Val,
            Split::Val,
        ];
        let cfg = EmbedderConfig {
            hidden_sizes: vec![16],
            embedding_dim: 8,
            context_stride: 3,
            ..EmbedderConfig::new(4)
        };
        (init_params(&cfg, 1).unwrap(), Dataset::with_splits(seqs, splits))
    }

    #[test]
    fn report_is_deterministic_and_complete() {
        let (p, ds) = setup();
        let a = evaluate(&p, &ds, Split::Val, &EvalConfig::default()).unwrap();
        let b = evaluate(&p, &ds, Split::Val, &EvalConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sequences, 2);
        assert_eq!(
            a.phase_accuracy.iter().map(|f| f.videos).collect::<Vec<_>>(),
            vec![1, 2, 4]
        );
        assert!(a.kendalls_tau.unwrap().abs() <= 1.0);
        let text = a.to_text();
        assert!(text.contains("phase_accuracy@0.5="));
        assert!(text.contains("kendalls_tau="));
        assert!(a.to_json().contains("\"phase_progression_r2\""));
    }

    #[test]
    fn missing_labels_are_reported() {
        let (p, mut ds) = setup();
        ds.sequences[5].annotation = None;
        let err = evaluate(&p, &ds, Split::Val, &EvalConfig::default()).unwrap_err();
        assert!(matches!(err, TccError::MissingAnnotation(id) if id == ds.sequences[5].id));
        assert!(evaluate(&p, &ds, Split::Val, &EvalConfig::alignment_only()).is_ok());
    }

    #[test]
    fn pairwise_alignment_averages_ordered_pairs() {
        let a = Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let b = Tensor::matrix(3, 1, vec![2.0, 1.0, 0.0]).unwrap();
        let (tau, cyc) = pairwise_alignment(&[&a, &a]).unwrap().unwrap();
        assert_eq!((tau, cyc), (1.0, 1.0));
        let (tau, _) = pairwise_alignment(&[&a, &b]).unwrap().unwrap();
        assert_eq!(tau, -1.0);
        assert!(pairwise_alignment(&[&a]).unwrap().is_none());
    }
}
