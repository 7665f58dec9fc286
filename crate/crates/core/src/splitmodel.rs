//! A small split classifier with hand-written forward and backward passes.
//!
//! Client segment: a shared per-patch affine embedding squashed into
//! `[0, Δ]` by a scaled logistic, so every smashed tensor respects the
//! accountant's pixel bound by construction.
//!
//! Server segment: flatten, one rectifier hidden layer, linear logits and a
//! soft-target cross-entropy.

use std::io::Read;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::RawInput;
use crate::error::{Error, Result};
use crate::mechanisms::MixedBatch;
use crate::tensor::SmashedData;

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSegment {
    /// `raw_dim × features`, row-major.
    pub embed_weights: Vec<f64>,
    pub embed_bias: Vec<f64>,
    pub pixel_bound: f64,
    raw_dim: usize,
    features: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientGrads {
    pub embed_weights: Vec<f64>,
    pub embed_bias: Vec<f64>,
}

/// What `client_backward` needs from the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientCache {
    input: RawInput,
    /// Logistic activations before scaling by Δ.
    activations: Vec<f64>,
}

impl ClientSegment {
    pub fn zeros(raw_dim: usize, features: usize, pixel_bound: f64) -> Result<Self> {
        Self::from_parts(vec![0.0; raw_dim * features], vec![0.0; features], pixel_bound, raw_dim, features)
    }

    pub fn random<R: Rng + ?Sized>(raw_dim: usize, features: usize, pixel_bound: f64, rng: &mut R) -> Result<Self> {
        let sd = (1.0 / raw_dim.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, sd).map_err(|e| Error::Numeric(e.to_string()))?;
        let w = (0..raw_dim * features).map(|_| normal.sample(rng)).collect();
        let b = (0..features).map(|_| 0.1 * normal.sample(rng)).collect();
        Self::from_parts(w, b, pixel_bound, raw_dim, features)
    }

    pub fn from_parts(
        embed_weights: Vec<f64>,
        embed_bias: Vec<f64>,
        pixel_bound: f64,
        raw_dim: usize,
        features: usize,
    ) -> Result<Self> {
        if raw_dim == 0 || features == 0 {
            return Err(Error::Dimension("client segment needs raw_dim, features >= 1".into()));
        }
        if embed_weights.len() != raw_dim * features || embed_bias.len() != features {
            return Err(Error::Dimension("client segment parameter shapes".into()));
        }
        if !(pixel_bound > 0.0) {
            return Err(Error::param("pixel_bound", "must be > 0"));
        }
        if embed_weights.iter().chain(&embed_bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite client weights".into()));
        }
        Ok(Self {
            embed_weights,
            embed_bias,
            pixel_bound,
            raw_dim,
            features,
        })
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn sgd_step(&mut self, g: &ClientGrads, lr: f64) -> Result<()> {
        sgd_step(&mut self.embed_weights, &g.embed_weights, lr)?;
        sgd_step(&mut self.embed_bias, &g.embed_bias, lr)
    }
}

impl ClientGrads {
    pub fn zeros_like(seg: &ClientSegment) -> Self {
        Self {
            embed_weights: vec![0.0; seg.embed_weights.len()],
            embed_bias: vec![0.0; seg.embed_bias.len()],
        }
    }

    pub fn accumulate(&mut self, other: &ClientGrads) {
        add_into(&mut self.embed_weights, &other.embed_weights);
        add_into(&mut self.embed_bias, &other.embed_bias);
    }

    pub fn norm_sq(&self) -> f64 {
        self.embed_weights.iter().chain(&self.embed_bias).map(|v| v * v).sum()
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Embed every patch: `s[p, f] = Δ · logistic(x[p]·W[:, f] + b[f])`.
pub fn client_forward(x: &RawInput, seg: &ClientSegment) -> Result<(SmashedData, ClientCache)> {
    if x.raw_dim() != seg.raw_dim {
        return Err(Error::Dimension(format!(
            "input raw_dim {} but segment expects {}",
            x.raw_dim(),
            seg.raw_dim
        )));
    }
    let f = seg.features;
    let mut activations = Vec::with_capacity(x.n_patches() * f);
    for p in 0..x.n_patches() {
        let patch = x.patch(p);
        for j in 0..f {
            let mut z = seg.embed_bias[j];
            for (r, &xv) in patch.iter().enumerate() {
                z += xv * seg.embed_weights[r * f + j];
            }
            activations.push(logistic(z));
        }
    }
    let values = activations.iter().map(|a| seg.pixel_bound * a).collect();
    let smashed = SmashedData::new(values, x.n_patches(), f, seg.pixel_bound)?;
    Ok((
        smashed,
        ClientCache {
            input: x.clone(),
            activations,
        },
    ))
}

/// Back-propagate a cut-layer gradient through the squashing and the
/// embedding.
pub fn client_backward(grad: &[f64], cache: &ClientCache, seg: &ClientSegment) -> Result<ClientGrads> {
    if grad.len() != cache.activations.len() {
        return Err(Error::Dimension(format!(
            "cut gradient has {} entries, forward produced {}",
            grad.len(),
            cache.activations.len()
        )));
    }
    let f = seg.features;
    let mut out = ClientGrads::zeros_like(seg);
    for p in 0..cache.input.n_patches() {
        let patch = cache.input.patch(p);
        for j in 0..f {
            let idx = p * f + j;
            let a = cache.activations[idx];
            let dz = grad[idx] * seg.pixel_bound * a * (1.0 - a);
            if dz == 0.0 {
                continue;
            }
            out.embed_bias[j] += dz;
            for (r, &xv) in patch.iter().enumerate() {
                out.embed_weights[r * f + j] += xv * dz;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSegment {
    /// `input_dim × hidden`, row-major.
    pub hidden_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    /// `hidden × classes`, row-major.
    pub out_weights: Vec<f64>,
    pub out_bias: Vec<f64>,
    input_dim: usize,
    hidden: usize,
    classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerGrads {
    pub hidden_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub out_weights: Vec<f64>,
    pub out_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerCache {
    input: Vec<f64>,
    pre_activation: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelLoss {
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerForward {
    pub logits: Vec<f64>,
    pub loss: SoftLabelLoss,
    /// Gradient of the loss with respect to the logits.
    pub logit_grad: Vec<f64>,
    pub cache: ServerCache,
}

impl ServerSegment {
    pub fn zeros(input_dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        Self::from_parts(
            vec![0.0; input_dim * hidden],
            vec![0.0; hidden],
            vec![0.0; hidden * classes],
            vec![0.0; classes],
            input_dim,
            hidden,
            classes,
        )
    }

    pub fn random<R: Rng + ?Sized>(input_dim: usize, hidden: usize, classes: usize, rng: &mut R) -> Result<Self> {
        let n1 = Normal::new(0.0, (2.0 / input_dim.max(1) as f64).sqrt()).map_err(|e| Error::Numeric(e.to_string()))?;
        let n2 = Normal::new(0.0, (1.0 / hidden.max(1) as f64).sqrt()).map_err(|e| Error::Numeric(e.to_string()))?;
        let w1 = (0..input_dim * hidden).map(|_| n1.sample(rng)).collect();
        let b1 = (0..hidden).map(|_| 0.1 * n2.sample(rng)).collect();
        let w2 = (0..hidden * classes).map(|_| n2.sample(rng)).collect();
        let b2 = vec![0.0; classes];
        Self::from_parts(w1, b1, w2, b2, input_dim, hidden, classes)
    }

    pub fn from_parts(
        hidden_weights: Vec<f64>,
        hidden_bias: Vec<f64>,
        out_weights: Vec<f64>,
        out_bias: Vec<f64>,
        input_dim: usize,
        hidden: usize,
        classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || classes == 0 {
            return Err(Error::Dimension("server segment dims must be >= 1".into()));
        }
        if hidden_weights.len() != input_dim * hidden
            || hidden_bias.len() != hidden
            || out_weights.len() != hidden * classes
            || out_bias.len() != classes
        {
            return Err(Error::Dimension("server segment parameter shapes".into()));
        }
        let seg = Self {
            hidden_weights,
            hidden_bias,
            out_weights,
            out_bias,
            input_dim,
            hidden,
            classes,
        };
        if seg.params().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite server weights".into()));
        }
        Ok(seg)
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.hidden_weights
            .iter()
            .chain(&self.hidden_bias)
            .chain(&self.out_weights)
            .chain(&self.out_bias)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sgd_step(&mut self, g: &ServerGrads, lr: f64) -> Result<()> {
        sgd_step(&mut self.hidden_weights, &g.hidden_weights, lr)?;
        sgd_step(&mut self.hidden_bias, &g.hidden_bias, lr)?;
        sgd_step(&mut self.out_weights, &g.out_weights, lr)?;
        sgd_step(&mut self.out_bias, &g.out_bias, lr)
    }
}

impl ServerGrads {
    pub fn zeros_like(seg: &ServerSegment) -> Self {
        Self {
            hidden_weights: vec![0.0; seg.hidden_weights.len()],
            hidden_bias: vec![0.0; seg.hidden_bias.len()],
            out_weights: vec![0.0; seg.out_weights.len()],
            out_bias: vec![0.0; seg.out_bias.len()],
        }
    }

    pub fn accumulate(&mut self, other: &ServerGrads) {
        add_into(&mut self.hidden_weights, &other.hidden_weights);
        add_into(&mut self.hidden_bias, &other.hidden_bias);
        add_into(&mut self.out_weights, &other.out_weights);
        add_into(&mut self.out_bias, &other.out_bias);
    }

    pub fn scale(&mut self, a: f64) {
        for v in self
            .hidden_weights
            .iter_mut()
            .chain(&mut self.hidden_bias)
            .chain(&mut self.out_weights)
            .chain(&mut self.out_bias)
        {
            *v *= a;
        }
    }
}

/// Turn a released (possibly clamped) label into a cross-entropy target.
///
/// Nonnegative labels that no longer sum to one are renormalised; an
/// all-zero label becomes uniform. Labels with negative entries (noise
/// without clamping) are used unchanged.
pub fn prepare_target(label: &[f64]) -> Vec<f64> {
    if label.iter().any(|&v| v < 0.0) {
        return label.to_vec();
    }
    let sum: f64 = label.iter().sum();
    if sum == 0.0 {
        return vec![1.0 / label.len() as f64; label.len()];
    }
    if sum == 1.0 {
        return label.to_vec();
    }
    label.iter().map(|v| v / sum).collect()
}

/// Soft-target cross-entropy `-Σ tⱼ log softmax(z)ⱼ` and its logit gradient
/// `(Σt)·softmax(z) − t`.
pub fn soft_cross_entropy(logits: &[f64], target: &[f64]) -> Result<(SoftLabelLoss, Vec<f64>)> {
    if logits.len() != target.len() {
        return Err(Error::Dimension(format!(
            "{} logits vs {} targets",
            logits.len(),
            target.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum_exp.ln();
    let mass: f64 = target.iter().sum();
    let value = -logits.iter().zip(target).map(|(z, t)| t * (z - lse)).sum::<f64>();
    let grad = logits
        .iter()
        .zip(target)
        .map(|(z, t)| mass * (z - lse).exp() - t)
        .collect();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    Ok((SoftLabelLoss { value }, grad))
}

/// Server forward pass on raw smashed values against `target`.
pub fn server_forward_values(smashed: &[f64], target: &[f64], seg: &ServerSegment) -> Result<ServerForward> {
    if smashed.len() != seg.input_dim {
        return Err(Error::Dimension(format!(
            "server expects {} inputs, got {}",
            seg.input_dim,
            smashed.len()
        )));
    }
    if target.len() != seg.classes {
        return Err(Error::Dimension(format!(
            "server has {} classes, label has {}",
            seg.classes,
            target.len()
        )));
    }
    if smashed.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite server input".into()));
    }
    let h = seg.hidden;
    let mut pre = seg.hidden_bias.clone();
    for (i, &x) in smashed.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &seg.hidden_weights[i * h..(i + 1) * h];
        for (acc, w) in pre.iter_mut().zip(row) {
            *acc += x * w;
        }
    }
    let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
    let l = seg.classes;
    let mut logits = seg.out_bias.clone();
    for (j, &a) in hidden.iter().enumerate() {
        let row = &seg.out_weights[j * l..(j + 1) * l];
        for (acc, w) in logits.iter_mut().zip(row) {
            *acc += a * w;
        }
    }
    let (loss, logit_grad) = soft_cross_entropy(&logits, target)?;
    Ok(ServerForward {
        logits,
        loss,
        logit_grad,
        cache: ServerCache {
            input: smashed.to_vec(),
            pre_activation: pre,
            hidden,
        },
    })
}

/// Server forward pass on a released batch; the label is passed through
/// [`prepare_target`].
pub fn server_forward(batch: &MixedBatch, seg: &ServerSegment) -> Result<ServerForward> {
    server_forward_values(batch.smashed.values(), &prepare_target(&batch.label), seg)
}

/// Reverse-mode pass for a given logit gradient. Returns the cut-layer
/// gradient (same layout as the smashed tensor) and the weight gradients.
pub fn server_backward(cache: &ServerCache, logit_grad: &[f64], seg: &ServerSegment) -> Result<(Vec<f64>, ServerGrads)> {
    if logit_grad.len() != seg.classes || cache.input.len() != seg.input_dim {
        return Err(Error::Dimension("server backward shapes".into()));
    }
    let h = seg.hidden;
    let l = seg.classes;
    let mut g = ServerGrads::zeros_like(seg);
    g.out_bias.copy_from_slice(logit_grad);
    let mut d_hidden = vec![0.0; h];
    for j in 0..h {
        let a = cache.hidden[j];
        let row = &seg.out_weights[j * l..(j + 1) * l];
        let mut acc = 0.0;
        for c in 0..l {
            g.out_weights[j * l + c] = a * logit_grad[c];
            acc += row[c] * logit_grad[c];
        }
        d_hidden[j] = if cache.pre_activation[j] > 0.0 { acc } else { 0.0 };
    }
    g.hidden_bias.copy_from_slice(&d_hidden);
    let mut cut = vec![0.0; seg.input_dim];
    for (i, &x) in cache.input.iter().enumerate() {
        let row = &seg.hidden_weights[i * h..(i + 1) * h];
        let mut acc = 0.0;
        for j in 0..h {
            g.hidden_weights[i * h + j] = x * d_hidden[j];
            acc += row[j] * d_hidden[j];
        }
        cut[i] = acc;
    }
    Ok((cut, g))
}

/// `w ← w − lr·g`.
pub fn sgd_step(weights: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::param("lr", format!("must be finite and >= 0, got {lr}")));
    }
    if weights.len() != grads.len() {
        return Err(Error::Dimension("weights and gradients differ in length".into()));
    }
    for (w, g) in weights.iter_mut().zip(grads) {
        *w -= lr * g;
    }
    Ok(())
}

/// Client and server segments of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitModel {
    pub client: ClientSegment,
    pub server: ServerSegment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub client: ClientGrads,
    pub server: ServerGrads,
}

impl ModelGrads {
    /// All gradient entries in parameter declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(&self.client.embed_weights);
        v.extend_from_slice(&self.client.embed_bias);
        v.extend_from_slice(&self.server.hidden_weights);
        v.extend_from_slice(&self.server.hidden_bias);
        v.extend_from_slice(&self.server.out_weights);
        v.extend_from_slice(&self.server.out_bias);
        v
    }
}

impl SplitModel {
    pub fn random<R: Rng + ?Sized>(
        n_patches: usize,
        raw_dim: usize,
        features: usize,
        hidden: usize,
        classes: usize,
        pixel_bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            client: ClientSegment::random(raw_dim, features, pixel_bound, rng)?,
            server: ServerSegment::random(n_patches * features, hidden, classes, rng)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.client.embed_weights.len()
            + self.client.embed_bias.len()
            + self.server.hidden_weights.len()
            + self.server.hidden_bias.len()
            + self.server.out_weights.len()
            + self.server.out_bias.len()
    }

    /// Mutable access to parameter `i` in declaration order.
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        let slices: [&mut Vec<f64>; 6] = [
            &mut self.client.embed_weights,
            &mut self.client.embed_bias,
            &mut self.server.hidden_weights,
            &mut self.server.hidden_bias,
            &mut self.server.out_weights,
            &mut self.server.out_bias,
        ];
        for s in slices {
            if i < s.len() {
                return &mut s[i];
            }
            i -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn loss(&self, x: &RawInput, target: &[f64]) -> Result<f64> {
        let (s, _) = client_forward(x, &self.client)?;
        Ok(server_forward_values(s.values(), target, &self.server)?.loss.value)
    }

    pub fn loss_and_grads(&self, x: &RawInput, target: &[f64]) -> Result<(f64, ModelGrads)> {
        let (s, ccache) = client_forward(x, &self.client)?;
        let fwd = server_forward_values(s.values(), target, &self.server)?;
        let (cut, server) = server_backward(&fwd.cache, &fwd.logit_grad, &self.server)?;
        let client = client_backward(&cut, &ccache, &self.client)?;
        Ok((fwd.loss.value, ModelGrads { client, server }))
    }

    pub fn predict(&self, x: &RawInput) -> Result<usize> {
        let (s, _) = client_forward(x, &self.client)?;
        let uniform = vec![1.0 / self.server.classes as f64; self.server.classes];
        let fwd = server_forward_values(s.values(), &uniform, &self.server)?;
        Ok(argmax(&fwd.logits))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

const WEIGHTS_MAGIC: &[u8; 4] = b"CMSL";
const WEIGHTS_VERSION: u32 = 1;

fn write_tensor(out: &mut Vec<u8>, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialise a model: `CMSL`, version (u32 LE), then each tensor as
/// `ndim: u32`, `dims: u64 × ndim`, `values: f64 × Π dims`, all little
/// endian, in field order: embed_weights, embed_bias, pixel_bound,
/// hidden_weights, hidden_bias, out_weights, out_bias.
pub fn encode_weights(model: &SplitModel) -> Vec<u8> {
    let c = &model.client;
    let s = &model.server;
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    write_tensor(&mut out, &[c.raw_dim, c.features], &c.embed_weights);
    write_tensor(&mut out, &[c.features], &c.embed_bias);
    write_tensor(&mut out, &[], &[c.pixel_bound]);
    write_tensor(&mut out, &[s.input_dim, s.hidden], &s.hidden_weights);
    write_tensor(&mut out, &[s.hidden], &s.hidden_bias);
    write_tensor(&mut out, &[s.hidden, s.classes], &s.out_weights);
    write_tensor(&mut out, &[s.classes], &s.out_bias);
    out
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated weights file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated weights file".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor(r: &mut &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(Error::Format(format!("implausible tensor rank {ndim}")));
    }
    let shape = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count: usize = shape.iter().product();
    if count * 8 > r.len() {
        return Err(Error::Format("tensor larger than remaining payload".into()));
    }
    let data = (0..count)
        .map(|_| read_u64(r).map(f64::from_bits))
        .collect::<Result<Vec<_>>>()?;
    Ok((shape, data))
}

pub fn decode_weights(bytes: &[u8]) -> Result<SplitModel> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("missing magic".into()))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let mut tensors = Vec::with_capacity(7);
    while !r.is_empty() {
        tensors.push(read_tensor(&mut r)?);
    }
    let [(ws, w), (_, b), (_, pb), (w1s, w1), (_, b1), (w2s, w2), (_, b2)]: [(Vec<usize>, Vec<f64>); 7] = tensors
        .try_into()
        .map_err(|t: Vec<_>| Error::Format(format!("expected 7 tensors, found {}", t.len())))?;
    if ws.len() != 2 || w1s.len() != 2 || w2s.len() != 2 || pb.len() != 1 {
        return Err(Error::Format("unexpected tensor ranks".into()));
    }
    Ok(SplitModel {
        client: ClientSegment::from_parts(w, b, pb[0], ws[0], ws[1])
            .map_err(|e| Error::Format(e.to_string()))?,
        server: ServerSegment::from_parts(w1, b1, w2, b2, w1s[0], w1s[1], w2s[1])
            .map_err(|e| Error::Format(e.to_string()))?,
    })
}
