//! Comparison self-supervised losses: time-contrastive n-pairs, frame-order
//! (shuffle) classification, and weighted sums with the cycle loss.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::embedder::{flatten_layers, init_dense_layers, unflatten_layers, Dense, EmbedderParams, LayerVars};
use crate::error::{ensure, Result};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Positives are drawn within `±tcn_window` frames of their anchor.
    pub tcn_window: usize,
    pub tcn_anchors: usize,
    pub sal_fraction_shuffled: f64,
    pub sal_head_sizes: Vec<usize>,
    /// Triplets drawn per sequence for the order classifier.
    pub sal_triplets: usize,
    pub combine_weight: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            tcn_window: 5,
            tcn_anchors: 4,
            sal_fraction_shuffled: 0.75,
            sal_head_sizes: vec![128, 64],
            sal_triplets: 8,
            combine_weight: 0.5,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tcn_window >= 1, Contract, "tcn_window must be >= 1");
        ensure!(self.tcn_anchors >= 2, Contract, "tcn_anchors must be >= 2");
        ensure!(
            self.sal_fraction_shuffled > 0.0 && self.sal_fraction_shuffled < 1.0,
            Contract,
            "sal_fraction_shuffled must lie in (0, 1)"
        );
        ensure!(self.sal_triplets >= 1, Contract, "sal_triplets must be >= 1");
        ensure!(self.combine_weight >= 0.0, Contract, "combine_weight must be >= 0");
        Ok(())
    }
}

/// Mean cross-entropy of an n-way softmax whose correct class is the diagonal.
pub fn npairs_cross_entropy<'t>(logits: &Var<'t>) -> Result<Var<'t>> {
    let shape = logits.shape();
    ensure!(
        shape.len() == 2 && shape[0] == shape[1] && shape[0] >= 1,
        Shape,
        "n-pairs logits must be square, got {:?}",
        shape
    );
    let n = shape[0];
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    Ok(logits.log_softmax()?.gather(&diag)?.neg().mean())
}

/// n-pairs loss over anchor/positive embeddings with similarity
/// `−‖a_i − p_j‖²`: each anchor must pick its own positive among all of them.
pub fn npairs_loss<'t>(anchors: &Var<'t>, positives: &Var<'t>) -> Result<Var<'t>> {
    npairs_cross_entropy(&anchors.pairwise_sq_dist(positives)?.neg())
}

/// Sorted distinct anchors and, for each, a positive within `±window`.
pub fn sample_tcn_pairs(len: usize, n_anchors: usize, window: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut anchors = sample(rng, len, n_anchors).into_vec();
    anchors.sort_unstable();
    let positives = anchors
        .iter()
        .map(|&a| {
            let lo = a.saturating_sub(window);
            let hi = (a + window).min(len - 1);
            // draw from [lo, hi] \ {a}
            let k = rng.random_range(lo..hi);
            if k >= a {
                k + 1
            } else {
                k
            }
        })
        .collect();
    (anchors, positives)
}

/// Time-contrastive n-pairs loss on one sequence.
pub fn tcn_npairs_loss<'t>(
    tape: &'t Tape,
    vars: &LayerVars<'t>,
    params: &EmbedderParams,
    seq: &FeatureSequence,
    n_anchors: usize,
    window: usize,
    seed: u64,
) -> Result<Var<'t>> {
    ensure!(n_anchors >= 2, Contract, "n-pairs needs at least 2 anchors");
    ensure!(window >= 1, Contract, "positive window must be >= 1");
    ensure!(
        seq.len() >= 2 * n_anchors,
        Contract,
        "sequence {} has {} frames, n-pairs with {} anchors needs {}",
        seq.id,
        seq.len(),
        n_anchors,
        2 * n_anchors
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (anchors, positives) = sample_tcn_pairs(seq.len(), n_anchors, window, &mut rng);
    let a = params.embed_frames_on(vars, tape, seq, &anchors)?;
    let p = params.embed_frames_on(vars, tape, seq, &positives)?;
    npairs_loss(&a, &p)
}

/// Order classifier on three concatenated frame embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SalHead {
    pub layers: Vec<Dense>,
}

impl SalHead {
    /// `(fan_in, fan_out)` of every head layer.
    pub fn layer_dims(embedding_dim: usize, hidden: &[usize]) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut fan_in = 3 * embedding_dim;
        for &h in hidden.iter().chain(std::iter::once(&2)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    pub fn init(embedding_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            layers: init_dense_layers(&Self::layer_dims(embedding_dim, hidden), &mut rng),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn from_flat(embedding_dim: usize, hidden: &[usize], flat: &[f64]) -> Result<Self> {
        Ok(Self {
            layers: unflatten_layers(&Self::layer_dims(embedding_dim, hidden), flat)?,
        })
    }

    pub fn param_count(embedding_dim: usize, hidden: &[usize]) -> usize {
        Self::layer_dims(embedding_dim, hidden)
            .iter()
            .map(|(i, o)| i * o + o)
            .sum()
    }

    pub fn register<'t>(&self, tape: &'t Tape) -> LayerVars<'t> {
        LayerVars::register(tape, &self.layers)
    }
}

/// One presented triplet: frame indices in presentation order and whether the
/// order was shuffled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub frames: [usize; 3],
    pub shuffled: bool,
}

/// Non-identity orderings of `(a, b, c)`.
const SHUFFLES: [[usize; 3]; 5] = [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

pub fn sample_triplets(len: usize, count: usize, fraction_shuffled: f64, rng: &mut ChaCha8Rng) -> Vec<Triplet> {
    (0..count)
        .map(|_| {
            let mut abc = sample(rng, len, 3).into_vec();
            abc.sort_unstable();
            let shuffled = rng.random_bool(fraction_shuffled);
            let order = if shuffled {
                SHUFFLES[rng.random_range(0..SHUFFLES.len())]
            } else {
                [0, 1, 2]
            };
            Triplet {
                frames: [abc[order[0]], abc[order[1]], abc[order[2]]],
                shuffled,
            }
        })
        .collect()
}

/// Binary cross-entropy of the order classifier on sampled triplets of `seq`.
#[allow(clippy::too_many_arguments)]
pub fn sal_loss<'t>(
    tape: &'t Tape,
    vars: &LayerVars<'t>,
    params: &EmbedderParams,
    head: &LayerVars<'t>,
    seq: &FeatureSequence,
    config: &BaselineConfig,
    seed: u64,
) -> Result<Var<'t>> {
    ensure!(
        seq.len() >= 3,
        Contract,
        "sequence {} has {} frames, order classification needs 3",
        seq.id,
        seq.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triplets = sample_triplets(seq.len(), config.sal_triplets, config.sal_fraction_shuffled, &mut rng);
    sal_loss_on(tape, vars, params, head, seq, &triplets)
}

/// [`sal_loss`] for explicit triplets.
pub fn sal_loss_on<'t>(
    tape: &'t Tape,
    vars: &LayerVars<'t>,
    params: &EmbedderParams,
    head: &LayerVars<'t>,
    seq: &FeatureSequence,
    triplets: &[Triplet],
) -> Result<Var<'t>> {
    ensure!(!triplets.is_empty(), Contract, "no triplets");
    let frames: Vec<usize> = triplets.iter().flat_map(|t| t.frames).collect();
    let t = triplets.len();
    let e = params.config.embedding_dim;
    let emb = params.embed_frames_on(vars, tape, seq, &frames)?;
    let joined = emb.reshape(&[t, 3 * e])?;
    let logits = head.forward(joined)?;
    let picks: Vec<usize> = triplets
        .iter()
        .enumerate()
        .map(|(r, tr)| 2 * r + usize::from(tr.shuffled))
        .collect();
    Ok(logits.log_softmax()?.gather(&picks)?.neg().mean())
}

/// `loss_a + weight · loss_b`.
pub fn combined_loss<'t>(loss_a: &Var<'t>, loss_b: &Var<'t>, weight: f64) -> Result<Var<'t>> {
    ensure!(weight >= 0.0, Contract, "combination weight must be >= 0, got {weight}");
    loss_a.add(&loss_b.scale(weight))
}
