//! Small embedding network: per-frame ReLU MLP, temporal mean pooling, a final
//! affine projection and unit normalization.
//!
//! The last layer is affine, so applying it per frame and then averaging is the
//! same as averaging first; the implementation averages first.
//!
//! # Checkpoint layout
//!
//! ```text
//! magic        8 bytes  "LGLENC\0\0"
//! version      u32 LE   1
//! num_sizes    u32 LE
//! sizes        num_sizes x u32 LE   (input dim, hidden..., embedding dim)
//! per layer:   weights (in x out, row-major) then bias (out), f64 LE
//! ```

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::UnlabeledCorpus;
use crate::error::{config, domain, numeric, Error, Result};
use crate::math::{axpy, dot, norm, AdamState, Matrix};
use crate::seed;

const CKPT_MAGIC: &[u8; 8] = b"LGLENC\0\0";
const CKPT_VERSION: u32 = 1;

/// Norm below which the pooled output is considered degenerate.
pub const MIN_POOLED_NORM: f64 = 1e-12;

/// Layer sizes from input feature dim to embedding dim.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub sizes: Vec<usize>,
}

impl Architecture {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        let arch = Self { sizes };
        arch.validate()?;
        Ok(arch)
    }

    /// `input -> 64 -> 64 -> embedding_dim`.
    pub fn default_for(input_dim: usize, embedding_dim: usize) -> Self {
        Self {
            sizes: vec![input_dim, 64, 64, embedding_dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 {
            return Err(config("encoder architecture needs at least input and output sizes"));
        }
        if self.sizes.contains(&0) {
            return Err(config("encoder layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }
}

/// Unit-norm speaker embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalize `v`; fails if its norm is below [`MIN_POOLED_NORM`].
    pub fn normalize(v: Vec<f64>) -> Result<Self> {
        let n = norm(&v);
        if !(n >= MIN_POOLED_NORM) {
            return Err(numeric(format!("degenerate embedding: norm {n:e}")));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    arch: Architecture,
    /// `in x out` per layer.
    pub weights: Vec<Matrix>,
    /// `1 x out` per layer.
    pub biases: Vec<Matrix>,
}

/// Gradients with the same layout as [`EncoderParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

impl EncoderGrads {
    pub fn zeros_for(params: &EncoderParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: params.biases.iter().map(|b| Matrix::zeros(b.rows(), b.cols())).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.weights.iter_mut().chain(self.biases.iter_mut()).for_each(|m| m.fill(0.0));
    }

    pub fn scale(&mut self, alpha: f64) {
        self.weights.iter_mut().chain(self.biases.iter_mut()).for_each(|m| m.scale(alpha));
    }

    pub fn add(&mut self, other: &EncoderGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_scaled(b, 1.0);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.weights.iter().chain(&self.biases).map(Matrix::max_abs).fold(0.0, f64::max)
    }
}

impl EncoderParams {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed, "encoder-init");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in arch.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = init_bound(fan_in);
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            weights.push(Matrix::from_vec(fan_in, fan_out, data)?);
            biases.push(Matrix::zeros(1, fan_out));
        }
        Ok(Self {
            arch: arch.clone(),
            weights,
            biases,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(|m| m.as_slice().len()).sum()
    }

    fn check_input(&self, frames: &Matrix) -> Result<()> {
        if frames.cols() != self.arch.input_dim() {
            return Err(domain(format!(
                "encoder expects {} input features, got {}",
                self.arch.input_dim(),
                frames.cols()
            )));
        }
        if frames.rows() == 0 {
            return Err(domain("encoder needs at least one frame"));
        }
        Ok(())
    }

    pub fn encode(&self, frames: &Matrix) -> Result<Embedding> {
        Ok(self.forward(frames)?.embedding)
    }

    /// Forward pass keeping the activations needed by [`EncoderTrace::backward`].
    pub fn forward(&self, frames: &Matrix) -> Result<EncoderTrace> {
        self.check_input(frames)?;
        let t = frames.rows();
        let hidden = self.arch.num_layers() - 1;
        let mut activations: Vec<Matrix> = Vec::with_capacity(hidden);
        for l in 0..hidden {
            let input = if l == 0 { frames } else { &activations[l - 1] };
            let w = &self.weights[l];
            let b = self.biases[l].as_slice();
            let mut z = Matrix::zeros(t, w.cols());
            for r in 0..t {
                let out = z.row_mut(r);
                out.copy_from_slice(b);
                for (k, &x) in input.row(r).iter().enumerate() {
                    if x != 0.0 {
                        axpy(x, w.row(k), out);
                    }
                }
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            activations.push(z);
        }
        let last = activations.last().unwrap_or(frames);
        let mut pooled = vec![0.0; last.cols()];
        for row in last.iter_rows() {
            axpy(1.0, row, &mut pooled);
        }
        let inv_t = 1.0 / t as f64;
        pooled.iter_mut().for_each(|v| *v *= inv_t);

        let w = self.weights.last().unwrap();
        let mut out = self.biases.last().unwrap().as_slice().to_vec();
        for (k, &p) in pooled.iter().enumerate() {
            axpy(p, w.row(k), &mut out);
        }
        let out_norm = norm(&out);
        if !(out_norm >= MIN_POOLED_NORM) {
            return Err(numeric(format!(
                "degenerate embedding: pooled output norm {out_norm:e}"
            )));
        }
        let embedding = Embedding(out.iter().map(|v| v / out_norm).collect());
        Ok(EncoderTrace {
            frames: frames.clone(),
            activations,
            pooled,
            out_norm,
            embedding,
        })
    }

    /// Recompute the forward pass and return gradients of `upstream . encode(frames)`.
    pub fn encode_backward(&self, frames: &Matrix, upstream: &[f64]) -> Result<EncoderGrads> {
        let trace = self.forward(frames)?;
        let mut grads = EncoderGrads::zeros_for(self);
        trace.backward(self, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Embed every utterance of the corpus using all of its frames; one row per utterance.
    pub fn embed_corpus(&self, corpus: UnlabeledCorpus<'_>) -> Result<Matrix> {
        let d = self.embedding_dim();
        let mut out = Matrix::zeros(corpus.len(), d);
        for id in 0..corpus.len() {
            let e = self.encode(corpus.frames(id))?;
            out.row_mut(id).copy_from_slice(e.as_slice());
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(self.arch.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.arch.sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for (wm, b) in self.weights.iter().zip(&self.biases) {
            for v in wm.as_slice().iter().chain(b.as_slice()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("not an encoder checkpoint (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b4)?;
            sizes.push(u32::from_le_bytes(b4) as usize);
        }
        let arch = Architecture::new(sizes).map_err(|e| Error::Format(e.to_string()))?;
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Matrix> {
            let mut data = vec![0.0; rows * cols];
            let mut b8 = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut b8)?;
                *v = f64::from_le_bytes(b8);
            }
            Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format(e.to_string()))
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for s in arch.sizes.windows(2) {
            weights.push(read_matrix(s[0], s[1])?);
            biases.push(read_matrix(1, s[1])?);
        }
        Ok(Self {
            arch,
            weights,
            biases,
        })
    }
}

pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Activations of one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    frames: Matrix,
    /// Post-ReLU activations of the hidden layers.
    activations: Vec<Matrix>,
    pooled: Vec<f64>,
    out_norm: f64,
    pub embedding: Embedding,
}

impl EncoderTrace {
    /// Accumulate into `grads` the parameter gradient of `upstream . embedding`.
    pub fn backward(
        &self,
        params: &EncoderParams,
        upstream: &[f64],
        grads: &mut EncoderGrads,
    ) -> Result<()> {
        let e = self.embedding.as_slice();
        if upstream.len() != e.len() {
            return Err(domain(format!(
                "upstream gradient has length {}, embedding dim is {}",
                upstream.len(),
                e.len()
            )));
        }
        // d(out/|out|) = (I - e e^T) / |out|
        let radial = dot(upstream, e);
        let g_out: Vec<f64> = upstream
            .iter()
            .zip(e)
            .map(|(g, ei)| (g - radial * ei) / self.out_norm)
            .collect();

        let last = params.weights.len() - 1;
        let w_last = &params.weights[last];
        {
            let gw = &mut grads.weights[last];
            for (k, &p) in self.pooled.iter().enumerate() {
                if p != 0.0 {
                    axpy(p, &g_out, gw.row_mut(k));
                }
            }
            axpy(1.0, &g_out, grads.biases[last].as_mut_slice());
        }
        if last == 0 {
            return Ok(());
        }

        // Every frame receives the same share of the pooled gradient.
        let t = self.frames.rows();
        let inv_t = 1.0 / t as f64;
        let g_pooled: Vec<f64> = (0..w_last.rows()).map(|k| dot(w_last.row(k), &g_out) * inv_t).collect();
        let mut g_act = Matrix::zeros(t, g_pooled.len());
        for r in 0..t {
            g_act.row_mut(r).copy_from_slice(&g_pooled);
        }

        for l in (0..last).rev() {
            let act = &self.activations[l];
            let input = if l == 0 { &self.frames } else { &self.activations[l - 1] };
            let w = &params.weights[l];
            // ReLU mask.
            for (g, &a) in g_act.as_mut_slice().iter_mut().zip(act.as_slice()) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            {
                let gw = &mut grads.weights[l];
                let gb = grads.biases[l].as_mut_slice();
                for r in 0..t {
                    let gz = g_act.row(r);
                    axpy(1.0, gz, gb);
                    for (k, &x) in input.row(r).iter().enumerate() {
                        if x != 0.0 {
                            axpy(x, gz, gw.row_mut(k));
                        }
                    }
                }
            }
            if l > 0 {
                let mut g_in = Matrix::zeros(t, w.rows());
                for r in 0..t {
                    let gz = g_act.row(r);
                    for (k, v) in g_in.row_mut(r).iter_mut().enumerate() {
                        *v = dot(gz, w.row(k));
                    }
                }
                g_act = g_in;
            }
        }
        Ok(())
    }
}

/// Adam state for every tensor of an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOptimizer {
    weights: Vec<AdamState>,
    biases: Vec<AdamState>,
}

impl EncoderOptimizer {
    pub fn new(params: &EncoderParams) -> Self {
        Self {
            weights: params.weights.iter().map(AdamState::for_param).collect(),
            biases: params.biases.iter().map(AdamState::for_param).collect(),
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderGrads, lr: f64) -> Result<()> {
        for ((p, g), s) in params.weights.iter_mut().zip(&grads.weights).zip(&mut self.weights) {
            s.step(p, g, lr)?;
        }
        for ((p, g), s) in params.biases.iter_mut().zip(&grads.biases).zip(&mut self.biases) {
            s.step(p, g, lr)?;
        }
        Ok(())
    }
}
