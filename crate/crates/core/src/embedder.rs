//! Per-frame embedding network.
//!
//! Each frame is encoded together with `k − 1` later context frames spaced
//! `context_stride` apart (clamped at the last frame). The stacked features go
//! through fully connected ReLU layers and a final linear projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{ensure, Result, TccError};
use crate::tape::{Tape, Var};
use crate::tensor::{gemm, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TCCE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub input_dim: usize,
    pub context_frames: usize,
    pub context_stride: usize,
    pub hidden_sizes: Vec<usize>,
    pub embedding_dim: usize,
}

impl EmbedderConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            context_frames: 2,
            context_stride: 15,
            hidden_sizes: vec![512, 512],
            embedding_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_dim >= 1, Contract, "input_dim must be >= 1");
        ensure!(self.context_frames >= 1, Contract, "context_frames must be >= 1");
        ensure!(self.context_stride >= 1, Contract, "context_stride must be >= 1");
        ensure!(self.embedding_dim >= 1, Contract, "embedding_dim must be >= 1");
        ensure!(
            self.hidden_sizes.iter().all(|&h| h >= 1),
            Contract,
            "hidden sizes must be positive"
        );
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 1);
        let mut fan_in = self.input_dim * self.context_frames;
        for &h in self.hidden_sizes.iter().chain(std::iter::once(&self.embedding_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    pub config: EmbedderConfig,
    pub layers: Vec<Dense>,
}

/// Glorot-uniform weights, zero biases.
pub(crate) fn init_dense_layers(dims: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Vec<Dense> {
    dims.iter()
        .map(|&(fan_in, fan_out)| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            Dense {
                weight: Tensor::matrix(fan_in, fan_out, w).unwrap(),
                bias: Tensor::zeros(&[fan_out]),
            }
        })
        .collect()
}

pub fn init_params(config: &EmbedderConfig, seed: u64) -> Result<EmbedderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(EmbedderParams {
        config: config.clone(),
        layers: init_dense_layers(&config.layer_dims(), &mut rng),
    })
}

pub(crate) fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.weight.data());
        out.extend_from_slice(l.bias.data());
    }
    out
}

pub(crate) fn unflatten_layers(dims: &[(usize, usize)], flat: &[f64]) -> Result<Vec<Dense>> {
    let need: usize = dims.iter().map(|(i, o)| i * o + o).sum();
    ensure!(
        flat.len() == need,
        Shape,
        "flat parameter vector has {} values, layers need {}",
        flat.len(),
        need
    );
    let mut off = 0;
    let mut layers = Vec::with_capacity(dims.len());
    for &(i, o) in dims {
        let weight = Tensor::matrix(i, o, flat[off..off + i * o].to_vec())?;
        off += i * o;
        let bias = Tensor::vector(flat[off..off + o].to_vec());
        off += o;
        layers.push(Dense { weight, bias });
    }
    Ok(layers)
}

/// Layer parameters registered as leaves on a tape.
#[derive(Debug, Clone)]
pub struct LayerVars<'t> {
    pub layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> LayerVars<'t> {
    pub fn register(tape: &'t Tape, layers: &[Dense]) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    /// Layers of shapes `dims` carved out of the flat leaf `theta` starting at
    /// `offset`, in [`flatten_layers`] order. Also returns the end offset.
    pub fn slice(theta: Var<'t>, mut offset: usize, dims: &[(usize, usize)]) -> Result<(Self, usize)> {
        let mut layers = Vec::with_capacity(dims.len());
        for &(i, o) in dims {
            let w = theta
                .gather(&(offset..offset + i * o).collect::<Vec<_>>())?
                .reshape(&[i, o])?;
            offset += i * o;
            let b = theta.gather(&(offset..offset + o).collect::<Vec<_>>())?;
            offset += o;
            layers.push((w, b));
        }
        Ok((Self { layers }, offset))
    }

    /// MLP forward pass: ReLU after every layer but the last.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add_row_bias(b)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Flattened gradient in the same order as [`flatten_layers`].
    pub fn flat_grad(&self, grads: &crate::tape::Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(grads.wrt(w).data());
            out.extend_from_slice(grads.wrt(b).data());
        }
        out
    }
}

/// Plain (tape-free) MLP forward pass.
pub(crate) fn mlp_forward(layers: &[Dense], x: &Tensor) -> Tensor {
    let mut h = x.clone();
    let last = layers.len() - 1;
    for (i, l) in layers.iter().enumerate() {
        let (n, k) = (h.rows(), h.cols());
        let m = l.weight.cols();
        let mut out = vec![0.0; n * m];
        gemm(h.data(), n, k, false, l.weight.data(), k, m, false, &mut out, false);
        for row in out.chunks_mut(m) {
            for (x, b) in row.iter_mut().zip(l.bias.data()) {
                *x += b;
                if i < last && *x < 0.0 {
                    *x = 0.0;
                }
            }
        }
        h = Tensor::matrix(n, m, out).unwrap();
    }
    h
}

impl EmbedderParams {
    pub fn flat(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn from_flat(config: &EmbedderConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            layers: unflatten_layers(&config.layer_dims(), flat)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    pub fn register<'t>(&self, tape: &'t Tape) -> LayerVars<'t> {
        LayerVars::register(tape, &self.layers)
    }

    /// Stacked context features for frames `idx` of `seq`: `|idx| × (k·d)`.
    pub fn stack_context(&self, seq: &FeatureSequence, idx: &[usize]) -> Result<Tensor> {
        let cfg = &self.config;
        ensure!(
            seq.dim() == cfg.input_dim,
            Shape,
            "sequence {} has feature dim {}, embedder expects {}",
            seq.id,
            seq.dim(),
            cfg.input_dim
        );
        ensure!(!seq.is_empty(), Contract, "sequence {} is empty", seq.id);
        let n = seq.len();
        let width = cfg.input_dim * cfg.context_frames;
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= n {
                return Err(TccError::Contract(format!("frame {i} out of range 0..{n}")));
            }
            for c in 0..cfg.context_frames {
                let j = (i + c * cfg.context_stride).min(n - 1);
                data.extend_from_slice(seq.frames.row(j));
            }
        }
        Tensor::matrix(idx.len(), width, data)
    }

    /// Embed every frame of `seq` without recording gradients.
    pub fn embed_sequence(&self, seq: &FeatureSequence) -> Result<Tensor> {
        let idx: Vec<usize> = (0..seq.len()).collect();
        self.embed_frames(seq, &idx)
    }

    pub fn embed_frames(&self, seq: &FeatureSequence, idx: &[usize]) -> Result<Tensor> {
        let x = self.stack_context(seq, idx)?;
        Ok(mlp_forward(&self.layers, &x))
    }

    /// Differentiable embedding of frames `idx` of `seq`.
    pub fn embed_frames_on<'t>(
        &self,
        vars: &LayerVars<'t>,
        tape: &'t Tape,
        seq: &FeatureSequence,
        idx: &[usize],
    ) -> Result<Var<'t>> {
        let x = tape.constant(self.stack_context(seq, idx)?);
        vars.forward(x)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serialize parameters as a `TCCE` checkpoint followed by `trailer`.
pub fn encode_checkpoint(params: &EmbedderParams, trailer: &[u8]) -> Vec<u8> {
    let cfg = &params.config;
    let mut buf = Vec::with_capacity(64 + 8 * params.param_count() + trailer.len());
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, cfg.input_dim);
    put_u32(&mut buf, cfg.context_frames);
    put_u32(&mut buf, cfg.context_stride);
    put_u32(&mut buf, cfg.hidden_sizes.len());
    for &h in &cfg.hidden_sizes {
        put_u32(&mut buf, h);
    }
    put_u32(&mut buf, cfg.embedding_dim);
    let flat = params.flat();
    buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for x in flat {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(trailer);
    buf
}

/// Sequential little-endian reader with typed truncation errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a str) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TccError::Truncated {
                path: self.path.into(),
                detail: format!("ran out of bytes reading {what} at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: u64, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .filter(|&b| b <= (self.bytes.len() - self.pos) as u64)
            .ok_or_else(|| TccError::Truncated {
                path: self.path.into(),
                detail: format!("{what} claims {n} values beyond end of file"),
            })?;
        Ok(self
            .take(bytes as usize, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

/// Parse a `TCCE` checkpoint; returns the parameters and any trailing bytes.
pub fn decode_checkpoint<'a>(bytes: &'a [u8], path: &'a str) -> Result<(EmbedderParams, &'a [u8])> {
    let mut r = Reader::new(bytes, path);
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(TccError::BadMagic {
            path: path.into(),
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(TccError::Version {
            path: path.into(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let input_dim = r.u32("input_dim")? as usize;
    let context_frames = r.u32("context_frames")? as usize;
    let context_stride = r.u32("context_stride")? as usize;
    let n_hidden = r.u32("hidden layer count")? as usize;
    ensure!(
        n_hidden <= 1024,
        Contract,
        "{path}: implausible hidden layer count {n_hidden}"
    );
    let hidden_sizes = (0..n_hidden)
        .map(|_| r.u32("hidden size").map(|h| h as usize))
        .collect::<Result<Vec<_>>>()?;
    let embedding_dim = r.u32("embedding_dim")? as usize;
    let config = EmbedderConfig {
        input_dim,
        context_frames,
        context_stride,
        hidden_sizes,
        embedding_dim,
    };
    config.validate()?;
    let count = r.u64("parameter count")?;
    ensure!(
        count == config.param_count() as u64,
        Contract,
        "{path}: {count} parameters stored, config needs {}",
        config.param_count()
    );
    let flat = r.f64s(count, "parameters")?;
    let params = EmbedderParams::from_flat(&config, &flat)?;
    Ok((params, r.rest()))
}

pub fn save_params(path: &std::path::Path, params: &EmbedderParams) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, &[]))?;
    Ok(())
}

pub fn load_params(path: &std::path::Path) -> Result<EmbedderParams> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => TccError::MissingFile(path.to_path_buf()),
        _ => TccError::Io(e),
    })?;
    let p = path.display().to_string();
    Ok(decode_checkpoint(&bytes, &p)?.0)
}
