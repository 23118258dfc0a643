//! Fully connected fusion network.
//!
//! Each input descriptor runs through its own three-layer intra-feature
//! block (`n_intra`, `n_intra`, `n_intra / 2` nodes). The block outputs are
//! concatenated and passed through the inter-feature block: four hidden
//! layers of `n_inter` nodes and an output layer of `n_out` nodes. Every
//! hidden layer is affine + ReLU; the output layer carries a ReLU when
//! `relu_on_output` is set. With `use_intra == false` the raw descriptors
//! are concatenated and fed straight to the inter-feature block.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{triplet_term, triplet_value, LossConfig};

pub const INTRA_LAYERS: usize = 3;
pub const INTER_HIDDEN_LAYERS: usize = 4;
pub const INIT_STD: f64 = 0.1;

const MODEL_MAGIC: &[u8; 4] = b"GFNN";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub descriptor_dims: Vec<usize>,
    pub n_intra: usize,
    pub n_inter: usize,
    pub n_out: usize,
    pub use_intra: bool,
    pub relu_on_output: bool,
}

/// Architecture and epoch count keyed by descriptor combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkPreset {
    pub n_intra: usize,
    pub n_inter: usize,
    pub n_out: usize,
    pub epochs: usize,
}

impl NetworkPreset {
    /// LFSH: 48/256 → 16, RCS: 48/512 → 48, SI+SHOT and the three-descriptor
    /// combinations: 512/512 → 256. Unlisted combinations fall back on the
    /// LFSH row when the total input width is at most 100, else on the
    /// SI+SHOT row.
    pub fn for_descriptors(names: &[String], dims: &[usize]) -> Self {
        let mut key: Vec<&str> = names
            .iter()
            .map(|n| if n == "si" { "spin_image" } else { n.as_str() })
            .collect();
        key.sort_unstable();
        let small = NetworkPreset {
            n_intra: 48,
            n_inter: 256,
            n_out: 16,
            epochs: 3,
        };
        let large = NetworkPreset {
            n_intra: 512,
            n_inter: 512,
            n_out: 256,
            epochs: 5,
        };
        match key.as_slice() {
            ["lfsh"] => small,
            ["rcs"] => NetworkPreset {
                n_intra: 48,
                n_inter: 512,
                n_out: 48,
                epochs: 3,
            },
            ["shot", "spin_image"] | ["rcs", "shot", "spin_image"] | ["rcs", "rops", "shot"] => large,
            _ if dims.iter().sum::<usize>() <= 100 => small,
            _ => large,
        }
    }
}

impl NetworkConfig {
    pub fn new(descriptor_dims: Vec<usize>, n_intra: usize, n_inter: usize, n_out: usize) -> Self {
        Self {
            descriptor_dims,
            n_intra,
            n_inter,
            n_out,
            use_intra: true,
            relu_on_output: true,
        }
    }

    pub fn from_preset(descriptor_dims: Vec<usize>, preset: NetworkPreset) -> Self {
        Self::new(descriptor_dims, preset.n_intra, preset.n_inter, preset.n_out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.descriptor_dims.is_empty() || self.descriptor_dims.contains(&0) {
            return Err(Error::Config(format!(
                "descriptor dims must be non-empty and positive: {:?}",
                self.descriptor_dims
            )));
        }
        if self.n_inter == 0 || self.n_out == 0 {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        if self.use_intra && (self.n_intra < 2 || !self.n_intra.is_multiple_of(2)) {
            return Err(Error::Config(format!(
                "n_intra must be even and >= 2, got {}",
                self.n_intra
            )));
        }
        Ok(())
    }

    pub fn inter_input_dim(&self) -> usize {
        if self.use_intra {
            self.descriptor_dims.len() * (self.n_intra / 2)
        } else {
            self.descriptor_dims.iter().sum()
        }
    }

    /// `(out, in)` for every layer in storage order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        if self.use_intra {
            for &d in &self.descriptor_dims {
                shapes.push((self.n_intra, d));
                shapes.push((self.n_intra, self.n_intra));
                shapes.push((self.n_intra / 2, self.n_intra));
            }
        }
        let mut width = self.inter_input_dim();
        for _ in 0..INTER_HIDDEN_LAYERS {
            shapes.push((self.n_inter, width));
            width = self.n_inter;
        }
        shapes.push((self.n_out, width));
        shapes
    }

    fn intra_layer_count(&self) -> usize {
        if self.use_intra {
            INTRA_LAYERS * self.descriptor_dims.len()
        } else {
            0
        }
    }
}

/// Affine layer `y = W x + b`, `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn zeros(out: usize, input: usize) -> Self {
        Self {
            weights: DMatrix::zeros(out, input),
            bias: DVector::zeros(out),
        }
    }

    fn apply(&self, x: &DMatrix<f64>, relu: bool) -> DMatrix<f64> {
        let mut z = &self.weights * x;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        if relu {
            z.apply(|v| *v = v.max(0.0));
        }
        z
    }
}

/// All weights and biases of one network, plus the config that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    config: NetworkConfig,
    layers: Vec<Dense>,
}

/// Gradient (or optimizer moment) with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.weights.nrows(), l.weights.ncols()))
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| *v == 0.0))
    }
}

impl NetworkParams {
    /// Weights drawn from N(0, 0.1²) using a seeded generator; biases zero.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(out, input)| {
                let mut layer = Dense::zeros(out, input);
                for r in 0..out {
                    for c in 0..input {
                        layer.weights[(r, c)] = normal.sample(&mut rng);
                    }
                }
                layer
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn from_layers(config: NetworkConfig, layers: Vec<Dense>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::Shape(format!(
                "{} layers supplied, architecture needs {}",
                layers.len(),
                shapes.len()
            )));
        }
        for (i, ((out, input), l)) in shapes.iter().zip(&layers).enumerate() {
            if l.weights.shape() != (*out, *input) || l.bias.len() != *out {
                return Err(Error::Shape(format!(
                    "layer {i} is {:?}, expected ({out}, {input})",
                    l.weights.shape()
                )));
            }
        }
        let params = Self { config, layers };
        if params.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::NumericOverflow("non-finite parameter".into()));
        }
        Ok(params)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.weights.nrows(), l.weights.ncols()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    fn intra(&self, descriptor: usize) -> &[Dense] {
        let start = descriptor * INTRA_LAYERS;
        &self.layers[start..start + INTRA_LAYERS]
    }

    fn inter(&self) -> &[Dense] {
        &self.layers[self.config.intra_layer_count()..]
    }

    fn check_tuple(&self, tuple: &[impl AsRef<[f64]>]) -> Result<()> {
        let dims = &self.config.descriptor_dims;
        if tuple.len() != dims.len() {
            return Err(Error::Shape(format!(
                "expected {} descriptors, got {}",
                dims.len(),
                tuple.len()
            )));
        }
        for (i, (v, &d)) in tuple.iter().zip(dims).enumerate() {
            if v.as_ref().len() != d {
                return Err(Error::Shape(format!(
                    "descriptor {i} has {} values, expected {d}",
                    v.as_ref().len()
                )));
            }
        }
        Ok(())
    }

    /// Column-per-sample input blocks, one per descriptor.
    fn input_blocks<T: AsRef<[f64]>>(&self, tuples: &[&[T]]) -> Result<Vec<DMatrix<f64>>> {
        for t in tuples {
            self.check_tuple(t)?;
        }
        Ok(self
            .config
            .descriptor_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                DMatrix::from_fn(d, tuples.len(), |r, c| tuples[c][i].as_ref()[r])
            })
            .collect())
    }

    fn forward_traced(&self, inputs: Vec<DMatrix<f64>>) -> Trace {
        let mut intra = Vec::new();
        let inter_input = if self.config.use_intra {
            let mut outs = Vec::with_capacity(inputs.len());
            for (i, x) in inputs.into_iter().enumerate() {
                let mut acts = vec![x];
                for layer in self.intra(i) {
                    let next = layer.apply(acts.last().expect("activation"), true);
                    acts.push(next);
                }
                outs.push(acts.last().expect("activation").clone());
                intra.push(acts);
            }
            stack_rows(&outs)
        } else {
            stack_rows(&inputs)
        };
        let mut inter = vec![inter_input];
        let n = self.inter().len();
        for (k, layer) in self.inter().iter().enumerate() {
            let relu = k + 1 < n || self.config.relu_on_output;
            let next = layer.apply(inter.last().expect("activation"), relu);
            inter.push(next);
        }
        Trace { intra, inter }
    }

    /// Fused feature of one descriptor tuple.
    pub fn forward<T: AsRef<[f64]>>(&self, tuple: &[T]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(&[tuple])?.pop().expect("one output"))
    }

    /// Fused features of many tuples, in input order.
    pub fn forward_batch<T: AsRef<[f64]>>(&self, tuples: &[&[T]]) -> Result<Vec<Vec<f64>>> {
        if tuples.is_empty() {
            return Ok(Vec::new());
        }
        let trace = self.forward_traced(self.input_blocks(tuples)?);
        let out = trace.output();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("non-finite network output".into()));
        }
        Ok(out.column_iter().map(|c| c.iter().copied().collect()).collect())
    }

    /// Backpropagates `d_out` (`n_out × batch`) through a recorded forward.
    fn backprop(&self, trace: &Trace, d_out: DMatrix<f64>) -> Gradients {
        let mut grads = Gradients::zeros_like(self);
        let offset = self.config.intra_layer_count();
        let n_inter = self.inter().len();
        let mut delta = d_out;
        for k in (0..n_inter).rev() {
            let relu = k + 1 < n_inter || self.config.relu_on_output;
            let output = &trace.inter[k + 1];
            if relu {
                mask_relu(&mut delta, output);
            }
            let input = &trace.inter[k];
            let g = &mut grads.layers[offset + k];
            g.weights = &delta * input.transpose();
            g.bias = row_sums(&delta);
            delta = self.inter()[k].weights.transpose() * &delta;
        }
        if self.config.use_intra {
            let half = self.config.n_intra / 2;
            for (i, acts) in trace.intra.iter().enumerate() {
                let mut d = delta.rows(i * half, half).into_owned();
                for k in (0..INTRA_LAYERS).rev() {
                    mask_relu(&mut d, &acts[k + 1]);
                    let g = &mut grads.layers[i * INTRA_LAYERS + k];
                    g.weights = &d * acts[k].transpose();
                    g.bias = row_sums(&d);
                    if k > 0 {
                        d = self.intra(i)[k].weights.transpose() * &d;
                    }
                }
            }
        }
        grads
    }

    /// Mean loss over the triplets and its exact gradient. The three
    /// branches go through this one parameter set in a single pass.
    pub fn backward<T: AsRef<[f64]>>(
        &self,
        triplets: &[TripletSample<'_, T>],
        loss: &LossConfig,
    ) -> Result<(f64, Gradients)> {
        if triplets.is_empty() {
            return Err(Error::EmptyBatch("no triplets in batch".into()));
        }
        let b = triplets.len();
        let mut tuples: Vec<&[T]> = Vec::with_capacity(3 * b);
        tuples.extend(triplets.iter().map(|t| t.anchor));
        tuples.extend(triplets.iter().map(|t| t.positive));
        tuples.extend(triplets.iter().map(|t| t.negative));
        let trace = self.forward_traced(self.input_blocks(&tuples)?);
        let out = trace.output();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("non-finite network output".into()));
        }
        let mut d_out = DMatrix::zeros(out.nrows(), out.ncols());
        let mut total = 0.0;
        let scale = 1.0 / b as f64;
        for j in 0..b {
            let a = out.column(j);
            let p = out.column(b + j);
            let n = out.column(2 * b + j);
            let term = triplet_term(a.as_slice(), p.as_slice(), n.as_slice(), loss);
            total += term.loss;
            for r in 0..out.nrows() {
                d_out[(r, j)] = term.grad_anchor[r] * scale;
                d_out[(r, b + j)] = term.grad_positive[r] * scale;
                d_out[(r, 2 * b + j)] = term.grad_negative[r] * scale;
            }
        }
        let mean = total * scale;
        if !mean.is_finite() {
            return Err(Error::NumericOverflow(format!("loss is {mean}")));
        }
        let grads = self.backprop(&trace, d_out);
        if grads.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::NumericOverflow("non-finite gradient".into()));
        }
        Ok((mean, grads))
    }

    /// Mean loss of triplets evaluated on their fused features.
    pub fn batch_loss<T: AsRef<[f64]>>(
        &self,
        triplets: &[TripletSample<'_, T>],
        loss: &LossConfig,
    ) -> Result<f64> {
        if triplets.is_empty() {
            return Err(Error::EmptyBatch("no triplets in batch".into()));
        }
        let mut total = 0.0;
        for chunk in triplets.chunks(1024) {
            let mut tuples: Vec<&[T]> = Vec::with_capacity(3 * chunk.len());
            for t in chunk {
                tuples.extend([t.anchor, t.positive, t.negative]);
            }
            let fused = self.forward_batch(&tuples)?;
            for f in fused.chunks(3) {
                total += triplet_value(&f[0], &f[1], &f[2], loss)?;
            }
        }
        let mean = total / triplets.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NumericOverflow(format!("loss is {mean}")));
        }
        Ok(mean)
    }

    /// Serialized model bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        save_model(self)
    }

    /// Hex SHA-256 of the serialized model.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(save_model(self)))
    }
}

/// One training triplet: anchor, positive and negative descriptor tuples.
#[derive(Debug)]
pub struct TripletSample<'a, T> {
    pub anchor: &'a [T],
    pub positive: &'a [T],
    pub negative: &'a [T],
}

impl<T> Clone for TripletSample<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for TripletSample<'_, T> {}

struct Trace {
    /// Per descriptor: input then each intra layer's activation.
    intra: Vec<Vec<DMatrix<f64>>>,
    /// Inter block input then each layer's activation.
    inter: Vec<DMatrix<f64>>,
}

impl Trace {
    fn output(&self) -> &DMatrix<f64> {
        self.inter.last().expect("output activation")
    }
}

fn stack_rows(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.rows_mut(r, b.nrows()).copy_from(b);
        r += b.nrows();
    }
    out
}

/// ReLU derivative, with the subgradient at 0 taken as 0.
fn mask_relu(delta: &mut DMatrix<f64>, activation: &DMatrix<f64>) {
    delta.zip_apply(activation, |d, a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |r, _| m.row(r).sum())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len(),
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        let at = self.pos;
        let v = self.u32("format version")?;
        if v != version {
            return Err(Error::Format {
                offset: at,
                message: format!("unsupported format version {v}, expected {version}"),
            });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub(crate) fn write_header(magic: &[u8; 4], version: u32) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&version.to_le_bytes());
    out
}

/// Model file layout, all little-endian:
///
/// ```text
/// "GFNN"  u32 version
/// u32 descriptor count, u32 per descriptor dim
/// u32 n_intra, u32 n_inter, u32 n_out, u8 use_intra, u8 relu_on_output
/// per layer: out×in f64 weights (row-major), then out f64 biases
/// ```
pub fn save_model(params: &NetworkParams) -> Vec<u8> {
    let cfg = &params.config;
    let mut w = Writer(write_header(MODEL_MAGIC, MODEL_VERSION));
    w.u32(cfg.descriptor_dims.len() as u32);
    for &d in &cfg.descriptor_dims {
        w.u32(d as u32);
    }
    w.u32(cfg.n_intra as u32);
    w.u32(cfg.n_inter as u32);
    w.u32(cfg.n_out as u32);
    w.u8(cfg.use_intra as u8);
    w.u8(cfg.relu_on_output as u8);
    for layer in &params.layers {
        for r in 0..layer.weights.nrows() {
            for c in 0..layer.weights.ncols() {
                w.f64(layer.weights[(r, c)]);
            }
        }
        for &b in layer.bias.iter() {
            w.f64(b);
        }
    }
    w.0
}

pub fn load_model(bytes: &[u8]) -> Result<NetworkParams> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC, MODEL_VERSION)?;
    let n_desc = r.u32("descriptor count")? as usize;
    if n_desc == 0 || n_desc > 1024 {
        return Err(Error::Format {
            offset: r.pos() - 4,
            message: format!("implausible descriptor count {n_desc}"),
        });
    }
    let dims = (0..n_desc)
        .map(|_| r.u32("descriptor dim").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n_intra = r.u32("n_intra")? as usize;
    let n_inter = r.u32("n_inter")? as usize;
    let n_out = r.u32("n_out")? as usize;
    let flag = |r: &mut Reader, what: &str| -> Result<bool> {
        let at = r.pos();
        match r.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format {
                offset: at,
                message: format!("{what} flag must be 0 or 1, got {v}"),
            }),
        }
    };
    let use_intra = flag(&mut r, "use_intra")?;
    let relu_on_output = flag(&mut r, "relu_on_output")?;
    let config = NetworkConfig {
        descriptor_dims: dims,
        n_intra,
        n_inter,
        n_out,
        use_intra,
        relu_on_output,
    };
    let config_end = r.pos();
    config.validate().map_err(|e| Error::Format {
        offset: config_end,
        message: e.to_string(),
    })?;
    let mut layers = Vec::new();
    for (out, input) in config.layer_shapes() {
        let mut layer = Dense::zeros(out, input);
        for row in 0..out {
            for col in 0..input {
                layer.weights[(row, col)] = r.f64("weights")?;
            }
        }
        for b in layer.bias.iter_mut() {
            *b = r.f64("biases")?;
        }
        layers.push(layer);
    }
    r.finish()?;
    NetworkParams::from_layers(config, layers).map_err(|e| Error::Format {
        offset: config_end,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LossConfig, LossKind};
    use rand::Rng;

    fn lfsh_config() -> NetworkConfig {
        NetworkConfig::new(vec![30], 48, 256, 16)
    }

    fn random_tuple(dims: &[usize], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        dims.iter()
            .map(|&d| (0..d).map(|_| rng.random::<f64>()).collect())
            .collect()
    }

    #[test]
    fn lfsh_layer_shapes() {
        let params = NetworkParams::init(lfsh_config(), 1).unwrap();
        assert_eq!(
            params.shapes(),
            vec![
                (48, 30),
                (48, 48),
                (24, 48),
                (256, 24),
                (256, 256),
                (256, 256),
                (256, 256),
                (16, 256)
            ]
        );
    }

    #[test]
    fn preset_lookup() {
        let names = |l: &[&str]| l.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(NetworkPreset::for_descriptors(&names(&["lfsh"]), &[30]).n_out, 16);
        let rcs = NetworkPreset::for_descriptors(&names(&["rcs"]), &[72]);
        assert_eq!((rcs.n_intra, rcs.n_inter, rcs.n_out, rcs.epochs), (48, 512, 48, 3));
        let si_shot = NetworkPreset::for_descriptors(&names(&["si", "shot"]), &[153, 352]);
        assert_eq!((si_shot.n_intra, si_shot.n_inter, si_shot.epochs), (512, 512, 5));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = NetworkParams::init(lfsh_config(), 42).unwrap();
        let b = NetworkParams::init(lfsh_config(), 42).unwrap();
        assert_eq!(save_model(&a), save_model(&b));
        let c = NetworkParams::init(lfsh_config(), 43).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn init_statistics() {
        let cfg = NetworkConfig::new(vec![500], 1000, 700, 8);
        let params = NetworkParams::init(cfg, 9).unwrap();
        let weights: Vec<f64> = params
            .layers()
            .iter()
            .flat_map(|l| l.weights.iter().copied())
            .take(1_000_000)
            .collect();
        assert_eq!(weights.len(), 1_000_000);
        let n = weights.len() as f64;
        let mean = weights.iter().sum::<f64>() / n;
        let std = (weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((std - 0.1).abs() < 1e-3, "std {std}");
        assert!(params.layers().iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut params = NetworkParams::init(lfsh_config(), 3).unwrap();
        for s in params.slices_mut() {
            s.fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = params.forward(&random_tuple(&[30], &mut rng)).unwrap();
        assert_eq!(out, vec![0.0; 16]);
    }

    #[test]
    fn identity_layers_pass_input_through() {
        let cfg = NetworkConfig {
            descriptor_dims: vec![4],
            n_intra: 2,
            n_inter: 4,
            n_out: 4,
            use_intra: false,
            relu_on_output: true,
        };
        let layers = cfg
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| Dense {
                weights: DMatrix::identity(o, i),
                bias: DVector::zeros(o),
            })
            .collect();
        let params = NetworkParams::from_layers(cfg, layers).unwrap();
        let x = vec![vec![0.5, 0.0, 2.0, 7.0]];
        assert_eq!(params.forward(&x).unwrap(), x[0]);
    }

    #[test]
    fn scaled_to_zero_input() {
        let params = NetworkParams::init(NetworkConfig::new(vec![5, 3], 4, 8, 4), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Vec<f64>> = random_tuple(&[5, 3], &mut rng)
            .into_iter()
            .map(|v| v.into_iter().map(|e| e * 0.0).collect())
            .collect();
        let zero = vec![vec![0.0; 5], vec![0.0; 3]];
        assert_eq!(params.forward(&x).unwrap(), params.forward(&zero).unwrap());
    }

    #[test]
    fn shape_error_names_descriptor() {
        let params = NetworkParams::init(NetworkConfig::new(vec![5, 3], 4, 8, 4), 5).unwrap();
        let err = params.forward(&[vec![0.0; 5], vec![0.0; 4]]).unwrap_err();
        assert!(matches!(err, Error::Shape(ref m) if m.contains("descriptor 1")));
    }

    #[test]
    fn bounded_inputs_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = NetworkParams::init(NetworkConfig::new(vec![8, 6], 4, 8, 4), 2).unwrap();
        for s in params.slices_mut() {
            for v in s.iter_mut() {
                *v = rng.random_range(-10.0..10.0);
            }
        }
        for _ in 0..50 {
            let out = params.forward(&random_tuple(&[8, 6], &mut rng)).unwrap();
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn without_intra_equals_raw_concatenation() {
        let mut cfg = NetworkConfig::new(vec![3, 2], 4, 6, 3);
        cfg.use_intra = false;
        let ablated = NetworkParams::init(cfg.clone(), 4).unwrap();
        // Same inter block applied by hand to the concatenated input.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tuple = random_tuple(&[3, 2], &mut rng);
        let mut h = DMatrix::from_column_slice(5, 1, &tuple.concat());
        for (k, layer) in ablated.layers().iter().enumerate() {
            h = layer.apply(&h, k < 4 || cfg.relu_on_output);
        }
        assert_eq!(ablated.forward(&tuple).unwrap(), h.as_slice().to_vec());
    }

    #[test]
    fn flat_hinge_has_zero_gradient() {
        let params = NetworkParams::init(NetworkConfig::new(vec![4], 4, 8, 4), 7).unwrap();
        let a = [vec![0.1, 0.2, 0.3, 0.4]];
        let triplets = [TripletSample {
            anchor: &a[..],
            positive: &a[..],
            negative: &a[..],
        }];
        let loss = LossConfig {
            tau_tri: -5.0,
            ..LossConfig::default()
        };
        let (value, grads) = params.backward(&triplets, &loss).unwrap();
        assert_eq!(value, 0.0);
        assert!(grads.is_zero());
    }

    #[test]
    fn duplicated_triplet_doubles_contribution() {
        let params = NetworkParams::init(NetworkConfig::new(vec![4, 3], 4, 8, 4), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tuples: Vec<_> = (0..6).map(|_| random_tuple(&[4, 3], &mut rng)).collect();
        let t0 = TripletSample {
            anchor: &tuples[0][..],
            positive: &tuples[1][..],
            negative: &tuples[2][..],
        };
        let t1 = TripletSample {
            anchor: &tuples[3][..],
            positive: &tuples[4][..],
            negative: &tuples[5][..],
        };
        let loss = LossConfig {
            kind: LossKind::Improved,
            ..LossConfig::default()
        };
        // Batch-sum numerators: (t0 + t1) * 2 vs (t0 + t0 + t1).
        let (_, g_single) = params.backward(&[t0, t1], &loss).unwrap();
        let (_, g_dup) = params.backward(&[t0, t0, t1], &loss).unwrap();
        let (_, g_t0) = params.backward(&[t0], &loss).unwrap();
        for ((s, d), o) in g_single
            .slices()
            .iter()
            .zip(g_dup.slices())
            .zip(g_t0.slices())
        {
            for ((s, d), o) in s.iter().zip(d).zip(o) {
                assert!(((2.0 * s + o) - 3.0 * d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_loss_matches_batch_loss() {
        let params = NetworkParams::init(NetworkConfig::new(vec![4, 3], 4, 8, 4), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let tuples: Vec<_> = (0..30).map(|_| random_tuple(&[4, 3], &mut rng)).collect();
        let triplets: Vec<_> = tuples
            .chunks(3)
            .map(|c| TripletSample {
                anchor: &c[0][..],
                positive: &c[1][..],
                negative: &c[2][..],
            })
            .collect();
        let loss = LossConfig::default();
        let (value, _) = params.backward(&triplets, &loss).unwrap();
        assert!((value - params.batch_loss(&triplets, &loss).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let params = NetworkParams::init(NetworkConfig::new(vec![7, 2], 6, 5, 3), 21).unwrap();
        let bytes = save_model(&params);
        assert_eq!(&bytes[..4], b"GFNN");
        let loaded = load_model(&bytes).unwrap();
        assert_eq!(loaded, params);
        let x = vec![vec![0.3; 7], vec![0.9, 0.1]];
        assert_eq!(loaded.forward(&x).unwrap(), params.forward(&x).unwrap());
    }

    #[test]
    fn load_rejects_bad_files() {
        let params = NetworkParams::init(NetworkConfig::new(vec![3], 2, 3, 2), 1).unwrap();
        let bytes = save_model(&params);
        assert!(matches!(
            load_model(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_model(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(load_model(&bad), Err(Error::Format { offset: 4, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(load_model(&long).is_err());
    }
}
