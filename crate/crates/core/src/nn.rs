//! Actor and critic networks with hand-written backpropagation.
//!
//! Both networks share one topology:
//!
//! ```text
//! throughput (k) ─ causal conv (F filters, kernel K) ─ relu ─┐
//! download   (k) ─ causal conv                       ─ relu ─┤
//! sizes      (m) ─ causal conv                       ─ relu ─┼─ concat ─ dense H ─ relu ─ dense m ─ head
//! (buffer, last level, remaining) ─ dense S          ─ relu ─┘
//! ```
//!
//! The actor's head is a softmax over the `m` levels, the critic's is linear
//! and emits one action value per level. Defaults: F = 64, K = 3, S = H = 128.
//! All arithmetic is `f64`.

use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::playback::EnvState;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("parameter file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Layer sizes. Two networks are compatible iff their architectures are equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub history_len: usize,
    pub level_count: usize,
    pub filters: usize,
    pub kernel: usize,
    pub scalar_units: usize,
    pub hidden_units: usize,
}

/// Number of scalar inputs: buffer, last level, remaining chunks.
pub const SCALAR_INPUTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Actor,
    Critic,
}

/// Parameter arrays in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    ThroughputConvWeight,
    ThroughputConvBias,
    DownloadConvWeight,
    DownloadConvBias,
    SizeConvWeight,
    SizeConvBias,
    ScalarWeight,
    ScalarBias,
    HiddenWeight,
    HiddenBias,
    HeadWeight,
    HeadBias,
}

impl Layer {
    pub const ALL: [Layer; 12] = [
        Layer::ThroughputConvWeight,
        Layer::ThroughputConvBias,
        Layer::DownloadConvWeight,
        Layer::DownloadConvBias,
        Layer::SizeConvWeight,
        Layer::SizeConvBias,
        Layer::ScalarWeight,
        Layer::ScalarBias,
        Layer::HiddenWeight,
        Layer::HiddenBias,
        Layer::HeadWeight,
        Layer::HeadBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::ThroughputConvWeight => "conv_throughput.weight",
            Layer::ThroughputConvBias => "conv_throughput.bias",
            Layer::DownloadConvWeight => "conv_download.weight",
            Layer::DownloadConvBias => "conv_download.bias",
            Layer::SizeConvWeight => "conv_sizes.weight",
            Layer::SizeConvBias => "conv_sizes.bias",
            Layer::ScalarWeight => "scalar.weight",
            Layer::ScalarBias => "scalar.bias",
            Layer::HiddenWeight => "hidden.weight",
            Layer::HiddenBias => "hidden.bias",
            Layer::HeadWeight => "head.weight",
            Layer::HeadBias => "head.bias",
        }
    }

    pub fn is_bias(self) -> bool {
        matches!(
            self,
            Layer::ThroughputConvBias
                | Layer::DownloadConvBias
                | Layer::SizeConvBias
                | Layer::ScalarBias
                | Layer::HiddenBias
                | Layer::HeadBias
        )
    }

    fn index(self) -> usize {
        Layer::ALL.iter().position(|&l| l == self).unwrap()
    }
}

impl Architecture {
    /// Default layer widths for the given observation shape.
    pub fn new(history_len: usize, level_count: usize) -> Self {
        Self {
            history_len,
            level_count,
            filters: 64,
            kernel: 3,
            scalar_units: 128,
            hidden_units: 128,
        }
    }

    /// Width of the concatenated feature vector entering the hidden layer.
    pub fn merged_width(&self) -> usize {
        self.filters * (2 * self.history_len + self.level_count) + self.scalar_units
    }

    /// `[rows, cols]` (or `[len]`) of each layer.
    pub fn shape(&self, layer: Layer) -> Vec<usize> {
        let (f, k) = (self.filters, self.kernel);
        match layer {
            Layer::ThroughputConvWeight | Layer::DownloadConvWeight | Layer::SizeConvWeight => {
                vec![f, k]
            }
            Layer::ThroughputConvBias | Layer::DownloadConvBias | Layer::SizeConvBias => vec![f],
            Layer::ScalarWeight => vec![self.scalar_units, SCALAR_INPUTS],
            Layer::ScalarBias => vec![self.scalar_units],
            Layer::HiddenWeight => vec![self.hidden_units, self.merged_width()],
            Layer::HiddenBias => vec![self.hidden_units],
            Layer::HeadWeight => vec![self.level_count, self.hidden_units],
            Layer::HeadBias => vec![self.level_count],
        }
    }

    fn layout(&self) -> [Range<usize>; 12] {
        let mut offset = 0;
        Layer::ALL.map(|l| {
            let len: usize = self.shape(l).iter().product();
            let r = offset..offset + len;
            offset += len;
            r
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout()[11].end
    }

    fn validate(&self) -> Result<(), NnError> {
        if self.history_len == 0
            || self.level_count < 2
            || self.filters == 0
            || self.kernel == 0
            || self.scalar_units == 0
            || self.hidden_units == 0
        {
            return Err(NnError::ShapeMismatch(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

/// Normalized network input derived from an [`EnvState`].
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub throughput: Vec<f64>,
    pub download: Vec<f64>,
    pub sizes: Vec<f64>,
    pub scalars: [f64; SCALAR_INPUTS],
}

impl Features {
    fn check(&self, arch: &Architecture) -> Result<(), NnError> {
        let k = arch.history_len;
        if self.throughput.len() != k || self.download.len() != k || self.sizes.len() != arch.level_count
        {
            return Err(NnError::ShapeMismatch(format!(
                "input lengths ({}, {}, {}) do not match architecture ({k}, {k}, {})",
                self.throughput.len(),
                self.download.len(),
                self.sizes.len(),
                arch.level_count
            )));
        }
        Ok(())
    }
}

/// Flat parameter storage plus its shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    arch: Architecture,
    role: Role,
    values: Vec<f64>,
}

/// Gradient with the same layout as a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    arch: Architecture,
    role: Role,
    values: Vec<f64>,
}

macro_rules! flat_storage {
    ($t:ty) => {
        impl $t {
            pub fn architecture(&self) -> &Architecture {
                &self.arch
            }

            pub fn role(&self) -> Role {
                self.role
            }

            /// All values in storage order.
            pub fn flat(&self) -> &[f64] {
                &self.values
            }

            pub fn flat_mut(&mut self) -> &mut [f64] {
                &mut self.values
            }

            pub fn layer(&self, layer: Layer) -> &[f64] {
                &self.values[self.arch.layout()[layer.index()].clone()]
            }

            pub fn layer_mut(&mut self, layer: Layer) -> &mut [f64] {
                let r = self.arch.layout()[layer.index()].clone();
                &mut self.values[r]
            }

            /// Storage range of `layer` within [`Self::flat`].
            pub fn layer_range(&self, layer: Layer) -> Range<usize> {
                self.arch.layout()[layer.index()].clone()
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            pub fn is_finite(&self) -> bool {
                self.values.iter().all(|v| v.is_finite())
            }
        }
    };
}

flat_storage!(ParameterSet);
flat_storage!(GradientSet);

impl ParameterSet {
    pub fn zeros(arch: Architecture, role: Role) -> Self {
        Self {
            values: vec![0.0; arch.param_count()],
            arch,
            role,
        }
    }

    /// Wraps a flat vector, checking its length against the architecture.
    pub fn from_flat(arch: Architecture, role: Role, values: Vec<f64>) -> Result<Self, NnError> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} values, got {}",
                arch.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NnError::Format("non-finite parameter value".into()));
        }
        Ok(Self { arch, role, values })
    }

    pub fn congruent(&self, g: &GradientSet) -> bool {
        self.arch == g.arch && self.role == g.role
    }
}

impl GradientSet {
    pub fn zeros_like(p: &ParameterSet) -> Self {
        Self {
            arch: p.arch,
            role: p.role,
            values: vec![0.0; p.values.len()],
        }
    }

    pub fn from_flat(p: &ParameterSet, values: Vec<f64>) -> Result<Self, NnError> {
        if values.len() != p.values.len() {
            return Err(NnError::ShapeMismatch("gradient length".into()));
        }
        Ok(Self {
            arch: p.arch,
            role: p.role,
            values,
        })
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }
}

/// Seeded Glorot-uniform weights, zero biases.
pub fn init_params(seed: u64, arch: Architecture, role: Role) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::zeros(arch, role);
    for layer in Layer::ALL {
        if layer.is_bias() {
            continue;
        }
        let shape = arch.shape(layer);
        let (fan_in, fan_out) = match layer {
            // one input channel; each filter spans `kernel` taps
            Layer::ThroughputConvWeight | Layer::DownloadConvWeight | Layer::SizeConvWeight => {
                (arch.kernel, arch.filters * arch.kernel)
            }
            _ => (shape[1], shape[0]),
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in p.layer_mut(layer) {
            *v = rng.random_range(-limit..limit);
        }
    }
    p
}

/// Causal 1-D convolution without bias or activation. `weights` holds one
/// row of `kernel` taps per filter; the input is left-padded with
/// `kernel - 1` zeros so that output `i` only sees inputs `..=i`.
pub fn causal_conv1d(sequence: &[f64], weights: &[f64], kernel: usize) -> Vec<Vec<f64>> {
    weights
        .chunks_exact(kernel)
        .map(|w| {
            (0..sequence.len())
                .map(|i| conv_tap(sequence, w, i))
                .collect()
        })
        .collect()
}

/// `sum_j w[j] * padded[i + j]` with `padded = [0; kernel-1] ++ sequence`.
fn conv_tap(sequence: &[f64], w: &[f64], i: usize) -> f64 {
    let pad = w.len() - 1;
    let mut acc = 0.0;
    for (j, wj) in w.iter().enumerate() {
        if i + j >= pad {
            acc += wj * sequence[i + j - pad];
        }
    }
    acc
}

/// Activations kept for the backward pass.
struct Cache {
    /// Post-relu merged vector: the three conv blocks (filter-major) then the scalar block.
    merged: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

const CONV_BLOCKS: [(Layer, Layer); 3] = [
    (Layer::ThroughputConvWeight, Layer::ThroughputConvBias),
    (Layer::DownloadConvWeight, Layer::DownloadConvBias),
    (Layer::SizeConvWeight, Layer::SizeConvBias),
];

fn conv_inputs(x: &Features) -> [&[f64]; 3] {
    [&x.throughput, &x.download, &x.sizes]
}

fn forward(p: &ParameterSet, x: &Features) -> Result<Cache, NnError> {
    let arch = &p.arch;
    x.check(arch)?;
    let mut merged = Vec::with_capacity(arch.merged_width());
    for ((wl, bl), seq) in CONV_BLOCKS.iter().zip(conv_inputs(x)) {
        let w = p.layer(*wl);
        let b = p.layer(*bl);
        for (f, taps) in w.chunks_exact(arch.kernel).enumerate() {
            for i in 0..seq.len() {
                merged.push(relu(b[f] + conv_tap(seq, taps, i)));
            }
        }
    }
    let sw = p.layer(Layer::ScalarWeight);
    let sb = p.layer(Layer::ScalarBias);
    for (u, row) in sw.chunks_exact(SCALAR_INPUTS).enumerate() {
        merged.push(relu(sb[u] + dot(row, &x.scalars)));
    }
    let hw = p.layer(Layer::HiddenWeight);
    let hb = p.layer(Layer::HiddenBias);
    let hidden: Vec<f64> = hw
        .chunks_exact(merged.len())
        .zip(hb)
        .map(|(row, b)| relu(b + dot(row, &merged)))
        .collect();
    let ow = p.layer(Layer::HeadWeight);
    let ob = p.layer(Layer::HeadBias);
    let out: Vec<f64> = ow
        .chunks_exact(hidden.len())
        .zip(ob)
        .map(|(row, b)| b + dot(row, &hidden))
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFiniteActivation("output layer"));
    }
    Ok(Cache {
        merged,
        hidden,
        out,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums let the compiler vectorize
    let mut acc = [0.0; 4];
    let (ca, ra) = a.split_at(a.len() - a.len() % 4);
    let (cb, rb) = b.split_at(ca.len().min(b.len()));
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gradient of `sum_i dout[i] * out[i]` with respect to every parameter,
/// overwriting every entry of `g`.
fn backward_into(p: &ParameterSet, x: &Features, cache: &Cache, dout: &[f64], g: &mut GradientSet) {
    let arch = &p.arch;

    // head
    {
        let gw = g.layer_mut(Layer::HeadWeight);
        for (row, &d) in gw.chunks_exact_mut(cache.hidden.len()).zip(dout) {
            for (gv, h) in row.iter_mut().zip(&cache.hidden) {
                *gv = d * h;
            }
        }
        g.layer_mut(Layer::HeadBias).copy_from_slice(dout);
    }

    // hidden layer, through its relu
    let ow = p.layer(Layer::HeadWeight);
    let mut dhidden = vec![0.0; cache.hidden.len()];
    for (row, &d) in ow.chunks_exact(cache.hidden.len()).zip(dout) {
        for (dh, w) in dhidden.iter_mut().zip(row) {
            *dh += d * w;
        }
    }
    for (dh, h) in dhidden.iter_mut().zip(&cache.hidden) {
        if *h <= 0.0 {
            *dh = 0.0;
        }
    }
    let width = cache.merged.len();
    let hw = p.layer(Layer::HiddenWeight);
    let mut dmerged = vec![0.0; width];
    {
        let gw = g.layer_mut(Layer::HiddenWeight);
        for (u, &dh) in dhidden.iter().enumerate() {
            let grow = &mut gw[u * width..(u + 1) * width];
            if dh == 0.0 {
                grow.fill(0.0);
                continue;
            }
            for (gv, m) in grow.iter_mut().zip(&cache.merged) {
                *gv = dh * m;
            }
            for (dm, w) in dmerged.iter_mut().zip(&hw[u * width..(u + 1) * width]) {
                *dm += dh * w;
            }
        }
        g.layer_mut(Layer::HiddenBias).copy_from_slice(&dhidden);
    }
    for (dm, m) in dmerged.iter_mut().zip(&cache.merged) {
        if *m <= 0.0 {
            *dm = 0.0;
        }
    }

    // conv blocks
    let mut offset = 0;
    for ((wl, bl), seq) in CONV_BLOCKS.iter().zip(conv_inputs(x)) {
        let n = seq.len();
        let pad = arch.kernel - 1;
        let mut gw = vec![0.0; arch.filters * arch.kernel];
        let mut gb = vec![0.0; arch.filters];
        for f in 0..arch.filters {
            let d = &dmerged[offset + f * n..offset + (f + 1) * n];
            gb[f] = d.iter().sum();
            for j in 0..arch.kernel {
                let mut acc = 0.0;
                for (i, di) in d.iter().enumerate() {
                    if i + j >= pad {
                        acc += di * seq[i + j - pad];
                    }
                }
                gw[f * arch.kernel + j] = acc;
            }
        }
        g.layer_mut(*wl).copy_from_slice(&gw);
        g.layer_mut(*bl).copy_from_slice(&gb);
        offset += arch.filters * n;
    }

    // scalar block
    let ds = &dmerged[offset..];
    g.layer_mut(Layer::ScalarBias).copy_from_slice(ds);
    let gsw = g.layer_mut(Layer::ScalarWeight);
    for (row, d) in gsw.chunks_exact_mut(SCALAR_INPUTS).zip(ds) {
        for (gv, s) in row.iter_mut().zip(&x.scalars) {
            *gv = d * s;
        }
    }
}

/// Activations of one forward pass, reusable for an in-place update of the
/// same parameters.
pub struct ForwardPass {
    cache: Cache,
}

impl ForwardPass {
    /// Raw network outputs (logits for an actor, action values for a critic).
    pub fn outputs(&self) -> &[f64] {
        &self.cache.out
    }
}

pub fn forward_pass(p: &ParameterSet, x: &Features) -> Result<ForwardPass, NnError> {
    Ok(ForwardPass {
        cache: forward(p, x)?,
    })
}

/// In-place step `p += sum_k scale_k * grad(dout_k . out)` where `pass` is
/// a forward pass of `p` on `x`. Each entry becomes
/// `v + (s_1 g_1 + s_2 g_2 + ...)` with the same roundings as materializing the gradients first,
/// but no gradient is stored.
pub fn apply_gradient_step(
    p: &mut ParameterSet,
    x: &Features,
    pass: &ForwardPass,
    terms: &[(f64, &[f64])],
) -> Result<(), NnError> {
    let arch = p.arch;
    x.check(&arch)?;
    let cache = &pass.cache;
    let m = arch.level_count;
    if cache.out.len() != m || terms.iter().any(|(_, d)| d.len() != m) {
        return Err(NnError::ShapeMismatch("output gradient length".into()));
    }
    let nh = cache.hidden.len();
    let width = cache.merged.len();
    let combine = |grads: &mut dyn Iterator<Item = f64>| -> f64 {
        let mut acc = 0.0;
        for (k, g) in grads.enumerate() {
            if k == 0 {
                acc = terms[0].0 * g;
            } else {
                acc += terms[k].0 * g;
            }
        }
        acc
    };

    // back-propagated signals use the weights before this step
    let ow_range = p.layer_range(Layer::HeadWeight);
    let dhidden: Vec<Vec<f64>> = terms
        .iter()
        .map(|(_, dout)| {
            let ow = &p.values[ow_range.clone()];
            let mut dh = vec![0.0; nh];
            for (row, &d) in ow.chunks_exact(nh).zip(dout.iter()) {
                for (v, w) in dh.iter_mut().zip(row) {
                    *v += d * w;
                }
            }
            for (v, h) in dh.iter_mut().zip(&cache.hidden) {
                if *h <= 0.0 {
                    *v = 0.0;
                }
            }
            dh
        })
        .collect();

    // head
    {
        let ow = &mut p.values[ow_range];
        for (o, row) in ow.chunks_exact_mut(nh).enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                *v += combine(&mut terms.iter().map(|(_, d)| d[o] * cache.hidden[i]));
            }
        }
        let ob_range = p.layer_range(Layer::HeadBias);
        for (o, v) in p.values[ob_range].iter_mut().enumerate() {
            *v += combine(&mut terms.iter().map(|(_, d)| d[o]));
        }
    }

    // hidden layer: read each row into dmerged, then update it
    let mut dmerged = vec![vec![0.0; width]; terms.len()];
    {
        let hw_range = p.layer_range(Layer::HiddenWeight);
        let hw = &mut p.values[hw_range];
        for (u, row) in hw.chunks_exact_mut(width).enumerate() {
            let active: Vec<f64> = dhidden.iter().map(|dh| dh[u]).collect();
            if active.iter().all(|&d| d == 0.0) {
                continue;
            }
            for (dm, &d) in dmerged.iter_mut().zip(&active) {
                if d != 0.0 {
                    for (acc, w) in dm.iter_mut().zip(row.iter()) {
                        *acc += d * w;
                    }
                }
            }
            match active[..] {
                [d0] => {
                    let s0 = terms[0].0;
                    for (v, mj) in row.iter_mut().zip(&cache.merged) {
                        *v += s0 * (d0 * mj);
                    }
                }
                [d0, d1] => {
                    let (s0, s1) = (terms[0].0, terms[1].0);
                    for (v, mj) in row.iter_mut().zip(&cache.merged) {
                        *v += s0 * (d0 * mj) + s1 * (d1 * mj);
                    }
                }
                _ => {
                    for (j, v) in row.iter_mut().enumerate() {
                        let mj = cache.merged[j];
                        *v += combine(&mut active.iter().map(|&d| d * mj));
                    }
                }
            }
        }
        let hb_range = p.layer_range(Layer::HiddenBias);
        for (u, v) in p.values[hb_range].iter_mut().enumerate() {
            *v += combine(&mut dhidden.iter().map(|dh| dh[u]));
        }
    }
    for dm in dmerged.iter_mut() {
        for (d, mv) in dm.iter_mut().zip(&cache.merged) {
            if *mv <= 0.0 {
                *d = 0.0;
            }
        }
    }

    // conv blocks
    let mut offset = 0;
    let pad = arch.kernel - 1;
    for ((wl, bl), seq) in CONV_BLOCKS.iter().zip(conv_inputs(x)) {
        let n = seq.len();
        let w_range = p.layer_range(*wl);
        let b_range = p.layer_range(*bl);
        for f in 0..arch.filters {
            let span = offset + f * n..offset + (f + 1) * n;
            let gb: Vec<f64> = dmerged.iter().map(|dm| dm[span.clone()].iter().sum()).collect();
            p.values[b_range.start + f] += combine(&mut gb.iter().copied());
            for j in 0..arch.kernel {
                let gw: Vec<f64> = dmerged
                    .iter()
                    .map(|dm| {
                        let mut acc = 0.0;
                        for (i, di) in dm[span.clone()].iter().enumerate() {
                            if i + j >= pad {
                                acc += di * seq[i + j - pad];
                            }
                        }
                        acc
                    })
                    .collect();
                p.values[w_range.start + f * arch.kernel + j] += combine(&mut gw.iter().copied());
            }
        }
        offset += arch.filters * n;
    }

    // scalar block
    let sb_range = p.layer_range(Layer::ScalarBias);
    let sw_range = p.layer_range(Layer::ScalarWeight);
    for u in 0..arch.scalar_units {
        let ds: Vec<f64> = dmerged.iter().map(|dm| dm[offset + u]).collect();
        p.values[sb_range.start + u] += combine(&mut ds.iter().copied());
        for (c, s) in x.scalars.iter().enumerate() {
            p.values[sw_range.start + u * SCALAR_INPUTS + c] +=
                combine(&mut ds.iter().map(|d| d * s));
        }
    }
    Ok(())
}

/// Output-layer signal whose back-propagation gives `grad log pi(a)`.
pub fn log_policy_signal(probs: &[f64], a: usize) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(j, p)| if j == a { 1.0 - p } else { -p })
        .collect()
}

/// Output-layer signal whose back-propagation gives the entropy gradient.
pub fn entropy_signal(probs: &[f64]) -> Vec<f64> {
    // dH / dz_j = -pi_j (log pi_j + H)
    let h = entropy_of(probs);
    probs
        .iter()
        .map(|&p| if p > 0.0 { -p * (p.ln() + h) } else { 0.0 })
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn expect_role(p: &ParameterSet, role: Role) -> Result<(), NnError> {
    if p.role != role {
        return Err(NnError::ShapeMismatch(format!(
            "expected {role:?} parameters, got {:?}",
            p.role
        )));
    }
    Ok(())
}

fn check_action(p: &ParameterSet, action: usize) -> Result<(), NnError> {
    if action >= p.arch.level_count {
        return Err(NnError::ShapeMismatch(format!(
            "action {action} outside {} levels",
            p.arch.level_count
        )));
    }
    Ok(())
}

/// Policy distribution over ladder levels.
pub fn forward_actor(theta: &ParameterSet, s: &EnvState) -> Result<Vec<f64>, NnError> {
    actor_probs(theta, &s.features())
}

pub fn actor_probs(theta: &ParameterSet, x: &Features) -> Result<Vec<f64>, NnError> {
    expect_role(theta, Role::Actor)?;
    Ok(softmax(&forward(theta, x)?.out))
}

/// Action values, one per ladder level.
pub fn forward_critic(w: &ParameterSet, s: &EnvState) -> Result<Vec<f64>, NnError> {
    critic_values(w, &s.features())
}

pub fn critic_values(w: &ParameterSet, x: &Features) -> Result<Vec<f64>, NnError> {
    expect_role(w, Role::Critic)?;
    Ok(forward(w, x)?.out)
}

/// Gradient of `log pi(a | s)` with respect to the actor parameters.
pub fn grad_log_policy(theta: &ParameterSet, s: &EnvState, a: usize) -> Result<GradientSet, NnError> {
    Ok(actor_gradients(theta, &s.features(), a, false)?.log_policy)
}

/// Outputs of one actor forward pass plus the requested gradients.
pub struct ActorGradients {
    pub probs: Vec<f64>,
    pub log_policy: GradientSet,
    /// Gradient of the policy entropy, when requested.
    pub entropy: Option<GradientSet>,
}

/// Shares one forward pass between the log-policy and entropy gradients.
pub fn actor_gradients(
    theta: &ParameterSet,
    x: &Features,
    a: usize,
    with_entropy: bool,
) -> Result<ActorGradients, NnError> {
    let mut log_policy = GradientSet::zeros_like(theta);
    let mut entropy = with_entropy.then(|| GradientSet::zeros_like(theta));
    let probs = actor_gradients_into(theta, x, a, &mut log_policy, entropy.as_mut())?;
    Ok(ActorGradients {
        probs,
        log_policy,
        entropy,
    })
}

fn expect_buffer(p: &ParameterSet, g: &GradientSet) -> Result<(), NnError> {
    if !p.congruent(g) {
        return Err(NnError::ShapeMismatch("gradient buffer does not match parameters".into()));
    }
    Ok(())
}

/// As [`actor_gradients`], writing into caller-owned buffers. Returns the
/// action probabilities.
pub fn actor_gradients_into(
    theta: &ParameterSet,
    x: &Features,
    a: usize,
    log_policy: &mut GradientSet,
    entropy: Option<&mut GradientSet>,
) -> Result<Vec<f64>, NnError> {
    expect_role(theta, Role::Actor)?;
    check_action(theta, a)?;
    expect_buffer(theta, log_policy)?;
    let cache = forward(theta, x)?;
    let probs = softmax(&cache.out);
    // d log pi_a / d z = onehot(a) - pi
    let dlogp: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(j, p)| if j == a { 1.0 - p } else { -p })
        .collect();
    backward_into(theta, x, &cache, &dlogp, log_policy);
    if let Some(eg) = entropy {
        expect_buffer(theta, eg)?;
        // dH / dz_j = -pi_j (log pi_j + H)
        let h = entropy_of(&probs);
        let dh: Vec<f64> = probs
            .iter()
            .map(|&p| if p > 0.0 { -p * (p.ln() + h) } else { 0.0 })
            .collect();
        backward_into(theta, x, &cache, &dh, eg);
    }
    Ok(probs)
}

/// Shannon entropy in nats.
pub fn entropy_of(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Gradient of `q(s, a)` with respect to the critic parameters.
pub fn grad_q(w: &ParameterSet, s: &EnvState, a: usize) -> Result<GradientSet, NnError> {
    Ok(critic_gradient(w, &s.features(), a)?.1)
}

/// `(q(s, ·), d q(s, a) / d w)` from one forward pass.
pub fn critic_gradient(
    w: &ParameterSet,
    x: &Features,
    a: usize,
) -> Result<(Vec<f64>, GradientSet), NnError> {
    let mut g = GradientSet::zeros_like(w);
    let q = critic_gradient_into(w, x, a, &mut g)?;
    Ok((q, g))
}

/// As [`critic_gradient`], writing into a caller-owned buffer. Returns the
/// action values.
pub fn critic_gradient_into(
    w: &ParameterSet,
    x: &Features,
    a: usize,
    g: &mut GradientSet,
) -> Result<Vec<f64>, NnError> {
    expect_role(w, Role::Critic)?;
    check_action(w, a)?;
    expect_buffer(w, g)?;
    let cache = forward(w, x)?;
    let mut dout = vec![0.0; cache.out.len()];
    dout[a] = 1.0;
    backward_into(w, x, &cache, &dout, g);
    Ok(cache.out)
}

// ---------------------------------------------------------------------------
// Parameter container
//
//   magic "SMBRPAR1" | u64 LE header length | JSON header | f64 LE values
//
// The header is the architecture fingerprint: role, layer sizes, and every
// layer's name and shape in storage order.

const PARAM_MAGIC: &[u8; 8] = b"SMBRPAR1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamHeader {
    version: u32,
    role: Role,
    architecture: Architecture,
    layers: Vec<LayerEntry>,
    count: usize,
}

fn header_for(arch: &Architecture, role: Role) -> ParamHeader {
    ParamHeader {
        version: FORMAT_VERSION,
        role,
        architecture: *arch,
        layers: Layer::ALL
            .iter()
            .map(|&l| LayerEntry {
                name: l.name().to_string(),
                shape: arch.shape(l),
            })
            .collect(),
        count: arch.param_count(),
    }
}

impl ParameterSet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&header_for(&self.arch, self.role)).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.values.len());
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a container, returning the parameters and the bytes consumed.
    pub fn from_bytes_prefix(bytes: &[u8]) -> Result<(Self, usize), NnError> {
        let bad = |m: &str| NnError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != PARAM_MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: ParamHeader =
            serde_json::from_slice(body).map_err(|e| NnError::Format(e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(NnError::Format(format!("unsupported version {}", header.version)));
        }
        header.architecture.validate()?;
        let expected = header_for(&header.architecture, header.role);
        if header != expected {
            return Err(NnError::ShapeMismatch(
                "layer list does not match the declared architecture".into(),
            ));
        }
        let start = 16 + hlen;
        let end = start + 8 * header.count;
        let data = bytes.get(start..end).ok_or_else(|| bad("truncated values"))?;
        let values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((
            Self::from_flat(header.architecture, header.role, values)?,
            end,
        ))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let (p, used) = Self::from_bytes_prefix(bytes)?;
        if used != bytes.len() {
            return Err(NnError::Format("trailing bytes after values".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let io = |source| NnError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = fs::read(path).map_err(|source| NnError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Loads an actor from a parameter file or a training checkpoint.
pub fn load_actor(path: &Path) -> Result<ParameterSet, NnError> {
    let bytes = fs::read(path).map_err(|source| NnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let actor = if bytes.starts_with(PARAM_MAGIC) {
        ParameterSet::from_bytes(&bytes)?
    } else {
        crate::rl::Checkpoint::from_bytes(&bytes)
            .map_err(|e| NnError::Format(e.to_string()))?
            .actor
    };
    expect_role(&actor, Role::Actor)?;
    Ok(actor)
}
