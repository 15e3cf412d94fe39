use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use crate::error::{Error, Result};
use crate::fingerprint::NormStats;

/// Side of the square detector grid that convolutional models operate on.
pub const GRID: usize = 3;
const CELLS: usize = GRID * GRID;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    Cnn,
    Unet,
    /// Free-form dense stack.
    Dense,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::Cnn => "cnn",
            Architecture::Unet => "unet",
            Architecture::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "mlp" => Architecture::Mlp,
            "cnn" => Architecture::Cnn,
            "unet" => Architecture::Unet,
            "dense" => Architecture::Dense,
            _ => return None,
        })
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture descriptor. Convolutions are 3×3 with same padding on the
/// 3×3 detector grid; hidden layers use ReLU and the output is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Convolution filters (CNN) or encoder filters (U-Net).
    pub conv_filters: Vec<usize>,
    /// U-Net decoder filters; stage s ≥ 1 also sees encoder stage n−1−s.
    pub decoder_filters: Vec<usize>,
    pub dense_widths: Vec<usize>,
    pub input_dim: usize,
    pub output_dim: usize,
}

const HEAD: [usize; 4] = [64, 256, 64, 256];

impl ModelSpec {
    /// Dense 9 → 64 → 256 → 64 → 256 → 2.
    pub fn mlp() -> Self {
        Self::custom(Architecture::Mlp, vec![], vec![], HEAD.to_vec())
    }

    pub fn cnn() -> Self {
        Self::custom(Architecture::Cnn, vec![32, 64, 128], vec![], HEAD.to_vec())
    }

    pub fn unet() -> Self {
        Self::custom(
            Architecture::Unet,
            vec![32, 64, 128],
            vec![128, 64, 32],
            HEAD.to_vec(),
        )
    }

    /// Dense stack with the given hidden widths, e.g. `[64, 256]`.
    pub fn dense(hidden: &[usize]) -> Self {
        Self::custom(Architecture::Dense, vec![], vec![], hidden.to_vec())
    }

    pub fn for_architecture(a: Architecture) -> Self {
        match a {
            Architecture::Mlp => Self::mlp(),
            Architecture::Cnn => Self::cnn(),
            Architecture::Unet => Self::unet(),
            Architecture::Dense => Self::dense(&[64, 256]),
        }
    }

    pub fn custom(
        architecture: Architecture,
        conv: Vec<usize>,
        decoder: Vec<usize>,
        dense: Vec<usize>,
    ) -> Self {
        ModelSpec {
            architecture,
            conv_filters: conv,
            decoder_filters: decoder,
            dense_widths: dense,
            input_dim: CELLS,
            output_dim: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| {
            Err(Error::Config(format!(
                "inconsistent {} spec: {m}",
                self.architecture
            )))
        };
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("zero input or output width");
        }
        if self
            .conv_filters
            .iter()
            .chain(&self.decoder_filters)
            .chain(&self.dense_widths)
            .any(|&w| w == 0)
        {
            return bad("zero-width layer");
        }
        let convolutional = matches!(self.architecture, Architecture::Cnn | Architecture::Unet);
        if convolutional && self.input_dim != CELLS {
            return bad("convolutional models need a 3×3 input grid");
        }
        match self.architecture {
            Architecture::Mlp | Architecture::Dense => {
                if !self.conv_filters.is_empty() || !self.decoder_filters.is_empty() {
                    return bad("dense models take no convolution filters");
                }
            }
            Architecture::Cnn => {
                if self.conv_filters.is_empty() || !self.decoder_filters.is_empty() {
                    return bad("CNN needs convolution filters and no decoder");
                }
            }
            Architecture::Unet => {
                if self.conv_filters.is_empty()
                    || self.decoder_filters.len() != self.conv_filters.len()
                {
                    return bad("U-Net decoder must mirror the encoder depth");
                }
            }
        }
        Ok(())
    }

    /// Layer graph realizing this description.
    pub fn layers(&self) -> Result<Vec<LayerDef>> {
        self.validate()?;
        let mut layers = Vec::new();
        // Activation 0 is the input; layer k writes activation k + 1.
        let mut width = self.input_dim;
        let mut channels = 1;
        match self.architecture {
            Architecture::Mlp | Architecture::Dense => {}
            Architecture::Cnn => {
                for &f in &self.conv_filters {
                    let src = layers.len();
                    layers.push(LayerDef::conv(channels, f, src, None));
                    channels = f;
                }
                width = CELLS * channels;
            }
            Architecture::Unet => {
                let mut encoder_out = Vec::new();
                for &f in &self.conv_filters {
                    let src = layers.len();
                    layers.push(LayerDef::conv(channels, f, src, None));
                    channels = f;
                    encoder_out.push((layers.len(), f));
                }
                let depth = self.conv_filters.len();
                for (s, &f) in self.decoder_filters.iter().enumerate() {
                    let src = layers.len();
                    let skip = (s >= 1).then(|| encoder_out[depth - 1 - s]);
                    let in_ch = channels + skip.map_or(0, |(_, c)| c);
                    layers.push(LayerDef::conv(in_ch, f, src, skip));
                    channels = f;
                }
                width = CELLS * channels;
            }
        }
        for &w in &self.dense_widths {
            let src = layers.len();
            layers.push(LayerDef::dense(width, w, src, true));
            width = w;
        }
        let src = layers.len();
        layers.push(LayerDef::dense(width, self.output_dim, src, false));
        Ok(layers)
    }

    /// Trainable parameter count from layer shapes alone.
    pub fn param_count(&self) -> Result<usize> {
        Ok(param_count_of(&self.layers()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// 3×3 same-padding convolution over the detector grid.
    Conv {
        in_channels: usize,
        out_channels: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDef {
    pub kind: LayerKind,
    pub relu: bool,
    /// Activation index feeding the layer.
    pub source: usize,
    /// Extra activation concatenated channel-wise after `source`, with its
    /// channel count.
    pub skip: Option<(usize, usize)>,
}

impl LayerDef {
    fn dense(inputs: usize, outputs: usize, source: usize, relu: bool) -> Self {
        LayerDef {
            kind: LayerKind::Dense { inputs, outputs },
            relu,
            source,
            skip: None,
        }
    }

    fn conv(
        in_channels: usize,
        out_channels: usize,
        source: usize,
        skip: Option<(usize, usize)>,
    ) -> Self {
        LayerDef {
            kind: LayerKind::Conv {
                in_channels,
                out_channels,
            },
            relu: true,
            source,
            skip,
        }
    }

    /// (rows, cols) of the weight matrix.
    pub fn weight_shape(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => (inputs, outputs),
            LayerKind::Conv {
                in_channels,
                out_channels,
            } => (CELLS * in_channels, out_channels),
        }
    }

    pub fn weight_count(&self) -> usize {
        let (r, c) = self.weight_shape();
        r * c
    }

    pub fn bias_count(&self) -> usize {
        self.weight_shape().1
    }

    /// Width of the activation this layer produces, per sample.
    pub fn output_width(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv { out_channels, .. } => CELLS * out_channels,
        }
    }

    /// Keras-style fan values for Glorot initialization.
    fn fans(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => (inputs, outputs),
            LayerKind::Conv {
                in_channels,
                out_channels,
            } => (CELLS * in_channels, CELLS * out_channels),
        }
    }
}

/// Sum of all weight and bias elements.
pub fn param_count_of(layers: &[LayerDef]) -> usize {
    layers
        .iter()
        .map(|l| l.weight_count() + l.bias_count())
        .sum()
}

/// Per-epoch mean absolute error in meters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_mae: Vec<f64>,
    pub val_mae: Vec<f64>,
}

/// Parameters of one network plus everything needed to run it on raw ΔRSS.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub spec: ModelSpec,
    pub layers: Vec<LayerDef>,
    /// All weights then biases of each layer in order; weights row-major.
    pub params: Vec<f64>,
    pub init_seed: u64,
    pub train_seed: Option<u64>,
    pub history: TrainHistory,
    pub norm: Option<NormStats>,
}

/// Glorot-uniform weights and zero biases.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelWeights> {
    let layers = spec.layers()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(param_count_of(&layers));
    for l in &layers {
        let (fan_in, fan_out) = l.fans();
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        params.extend((0..l.weight_count()).map(|_| rng.random_range(-limit..limit)));
        params.extend(std::iter::repeat_n(0.0, l.bias_count()));
    }
    Ok(ModelWeights {
        spec: spec.clone(),
        layers,
        params,
        init_seed: seed,
        train_seed: None,
        history: TrainHistory::default(),
        norm: None,
    })
}

/// Number of trainable parameters.
pub fn param_count(weights: &ModelWeights) -> usize {
    weights.params.len()
}

/// Mean over samples and both coordinates of |prediction − truth|.
pub fn mae_loss(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return 0.0;
    }
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p[0] - t[0]).abs() + (p[1] - t[1]).abs())
        .sum();
    total / (2 * pred.len()) as f64
}

fn offsets(layers: &[LayerDef]) -> Vec<usize> {
    let mut out = Vec::with_capacity(layers.len());
    let mut at = 0;
    for l in layers {
        out.push(at);
        at += l.weight_count() + l.bias_count();
    }
    out
}

/// Forward-pass state kept for back-propagation.
struct Trace {
    acts: Vec<Vec<f64>>,
    /// im2col matrices of convolution layers (empty for dense layers).
    cols: Vec<Vec<f64>>,
}

/// Channel-wise concatenation of two per-cell feature maps.
fn concat_cells(a: &[f64], ca: usize, b: &[f64], cb: usize, batch: usize) -> Vec<f64> {
    let c = ca + cb;
    let mut out = vec![0.0; batch * CELLS * c];
    for cell in 0..batch * CELLS {
        out[cell * c..cell * c + ca].copy_from_slice(&a[cell * ca..(cell + 1) * ca]);
        out[cell * c + ca..(cell + 1) * c].copy_from_slice(&b[cell * cb..(cell + 1) * cb]);
    }
    out
}

/// Grid cells feeding output cell `p` through kernel tap `t`, or None at
/// the zero-padded border.
#[inline]
fn tap(p: usize, t: usize) -> Option<usize> {
    let (py, px) = ((p / GRID) as isize, (p % GRID) as isize);
    let (qy, qx) = (py + (t / 3) as isize - 1, px + (t % 3) as isize - 1);
    let g = GRID as isize;
    (qy >= 0 && qy < g && qx >= 0 && qx < g).then(|| (qy * g + qx) as usize)
}

fn im2col(x: &[f64], channels: usize, batch: usize) -> Vec<f64> {
    let row = CELLS * channels;
    let mut cols = vec![0.0; batch * CELLS * row];
    for b in 0..batch {
        let xb = &x[b * CELLS * channels..(b + 1) * CELLS * channels];
        for p in 0..CELLS {
            let dst = &mut cols[(b * CELLS + p) * row..(b * CELLS + p + 1) * row];
            for t in 0..9 {
                if let Some(q) = tap(p, t) {
                    dst[t * channels..(t + 1) * channels]
                        .copy_from_slice(&xb[q * channels..(q + 1) * channels]);
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], channels: usize, batch: usize) -> Vec<f64> {
    let row = CELLS * channels;
    let mut dx = vec![0.0; batch * CELLS * channels];
    for b in 0..batch {
        for p in 0..CELLS {
            let src = &dcols[(b * CELLS + p) * row..(b * CELLS + p + 1) * row];
            for t in 0..9 {
                if let Some(q) = tap(p, t) {
                    let d = &mut dx[(b * CELLS + q) * channels..(b * CELLS + q + 1) * channels];
                    for (o, v) in d.iter_mut().zip(&src[t * channels..(t + 1) * channels]) {
                        *o += v;
                    }
                }
            }
        }
    }
    dx
}

impl ModelWeights {
    /// Named tensors with their shapes, in storage order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let offs = offsets(&self.layers);
        let mut out = Vec::new();
        for (k, (l, &off)) in self.layers.iter().zip(&offs).enumerate() {
            let w = l.weight_count();
            let shape = match l.kind {
                LayerKind::Dense { inputs, outputs } => vec![inputs, outputs],
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                } => vec![3, 3, in_channels, out_channels],
            };
            out.push((
                format!("layer{k}.weight"),
                shape,
                &self.params[off..off + w],
            ));
            out.push((
                format!("layer{k}.bias"),
                vec![l.bias_count()],
                &self.params[off + w..off + w + l.bias_count()],
            ));
        }
        out
    }

    fn input_of(&self, layer: &LayerDef, acts: &[Vec<f64>], batch: usize) -> Vec<f64> {
        match (layer.skip, layer.kind) {
            (Some((skip, cb)), LayerKind::Conv { in_channels, .. }) => {
                let ca = in_channels - cb;
                concat_cells(&acts[layer.source], ca, &acts[skip], cb, batch)
            }
            _ => acts[layer.source].clone(),
        }
    }

    fn forward_trace(&self, x: &[f64], batch: usize) -> Trace {
        let offs = offsets(&self.layers);
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let mut cols = Vec::with_capacity(self.layers.len());
        for (l, &off) in self.layers.iter().zip(&offs) {
            let (rows, out_w) = l.weight_shape();
            let w = &self.params[off..off + rows * out_w];
            let bias = &self.params[off + rows * out_w..off + rows * out_w + out_w];
            let input = self.input_of(l, &acts, batch);
            let (lhs, m) = match l.kind {
                LayerKind::Dense { .. } => (input, batch),
                LayerKind::Conv { in_channels, .. } => {
                    (im2col(&input, in_channels, batch), batch * CELLS)
                }
            };
            let mut z = vec![0.0; m * out_w];
            for r in z.chunks_mut(out_w) {
                r.copy_from_slice(bias);
            }
            gemm(m, rows, out_w, &lhs, false, w, false, 1.0, &mut z);
            if l.relu {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cols.push(if matches!(l.kind, LayerKind::Conv { .. }) {
                lhs
            } else {
                Vec::new()
            });
            acts.push(z);
        }
        Trace { acts, cols }
    }

    /// Raw network outputs for a batch of feature rows.
    pub fn forward_batch(&self, inputs: &[[f64; 9]]) -> Vec<[f64; 2]> {
        assert_eq!(self.spec.input_dim, 9);
        assert_eq!(self.spec.output_dim, 2);
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(256) {
            let x: Vec<f64> = chunk.iter().flatten().copied().collect();
            let trace = self.forward_trace(&x, chunk.len());
            let y = trace.acts.last().expect("output");
            out.extend(y.chunks(2).map(|p| [p[0], p[1]]));
        }
        out
    }

    /// Network output for one normalized feature row.
    pub fn forward(&self, input: &[f64]) -> Result<(f64, f64)> {
        if input.len() != 9 {
            return Err(Error::Length {
                expected: 9,
                got: input.len(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("model input {input:?}")));
        }
        let row: [f64; 9] = input.try_into().expect("length checked");
        let [x, y] = self.forward_batch(&[row])[0];
        Ok((x, y))
    }

    /// MAE loss of a batch and its gradient with respect to `params`.
    pub fn loss_and_grad(&self, inputs: &[[f64; 9]], targets: &[[f64; 2]]) -> (f64, Vec<f64>) {
        let batch = inputs.len();
        assert_eq!(batch, targets.len());
        let x: Vec<f64> = inputs.iter().flatten().copied().collect();
        let trace = self.forward_trace(&x, batch);
        let out = trace.acts.last().expect("output");
        let scale = 1.0 / (2 * batch) as f64;
        let mut loss = 0.0;
        let mut grad_out = vec![0.0; out.len()];
        for (i, (o, g)) in out.iter().zip(grad_out.iter_mut()).enumerate() {
            let diff = o - targets[i / 2][i % 2];
            loss += diff.abs();
            *g = if diff > 0.0 {
                scale
            } else if diff < 0.0 {
                -scale
            } else {
                0.0
            };
        }
        (loss * scale, self.backward(&trace, grad_out, batch))
    }

    fn backward(&self, trace: &Trace, grad_out: Vec<f64>, batch: usize) -> Vec<f64> {
        let offs = offsets(&self.layers);
        let mut grads = vec![0.0; self.params.len()];
        let mut act_grads: Vec<Option<Vec<f64>>> = vec![None; self.layers.len() + 1];
        act_grads[self.layers.len()] = Some(grad_out);
        for (k, l) in self.layers.iter().enumerate().rev() {
            let Some(mut dz) = act_grads[k + 1].take() else {
                continue;
            };
            if l.relu {
                for (d, a) in dz.iter_mut().zip(&trace.acts[k + 1]) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let (rows, out_w) = l.weight_shape();
            let off = offs[k];
            let w = &self.params[off..off + rows * out_w];
            let (lhs, m) = match l.kind {
                LayerKind::Dense { .. } => (self.input_of(l, &trace.acts, batch), batch),
                LayerKind::Conv { .. } => (trace.cols[k].clone(), batch * CELLS),
            };
            let (gw, gb) = grads[off..off + rows * out_w + out_w].split_at_mut(rows * out_w);
            gemm(rows, m, out_w, &lhs, true, &dz, false, 0.0, gw);
            for r in dz.chunks(out_w) {
                for (b, v) in gb.iter_mut().zip(r) {
                    *b += v;
                }
            }
            if k == 0 && l.source == 0 && l.skip.is_none() {
                // Input gradient not needed.
                continue;
            }
            let mut dx = vec![0.0; m * rows];
            gemm(m, out_w, rows, &dz, false, w, true, 0.0, &mut dx);
            if let LayerKind::Conv { in_channels, .. } = l.kind {
                dx = col2im(&dx, in_channels, batch);
            }
            let mut add = |idx: usize, g: Vec<f64>| match &mut act_grads[idx] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                slot @ None => *slot = Some(g),
            };
            match (l.skip, l.kind) {
                (Some((skip, cb)), LayerKind::Conv { in_channels, .. }) => {
                    let ca = in_channels - cb;
                    let mut ga = vec![0.0; batch * CELLS * ca];
                    let mut gs = vec![0.0; batch * CELLS * cb];
                    for cell in 0..batch * CELLS {
                        let src = &dx[cell * in_channels..(cell + 1) * in_channels];
                        ga[cell * ca..(cell + 1) * ca].copy_from_slice(&src[..ca]);
                        gs[cell * cb..(cell + 1) * cb].copy_from_slice(&src[ca..]);
                    }
                    add(l.source, ga);
                    add(skip, gs);
                }
                _ => add(l.source, dx),
            }
        }
        grads
    }
}
