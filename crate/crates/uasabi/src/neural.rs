//! Minimal dense networks with hand-derived reverse-mode gradients, the
//! permutation-invariant DeepSet summary network, the conditional affine
//! coupling flow with exact log-density, and the Adam optimizer with a
//! cosine learning-rate schedule. Everything runs in f64.

use crate::numerics::RngStream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("input width {got} does not match spec width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("observation set is empty")]
    EmptySet,
    #[error("non-finite activation in coupling block {block}")]
    NumericalOverflow { block: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("standardization sd must be positive, got {0}")]
    BadStandardization(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed from the pre-activation value.
    fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer widths including the input width; the final layer is always
/// linear (identity activation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden_activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden_activation: Activation) -> Result<Self, NeuralError> {
        if widths.len() < 2 {
            return Err(NeuralError::InvalidSpec(
                "need at least an input and an output width".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(NeuralError::InvalidSpec("zero layer width".into()));
        }
        Ok(Self {
            widths,
            hidden_activation,
        })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    /// `w[i][j]` maps input j to output i.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

/// Forward-pass cache: the input to each layer and each layer's
/// pre-activation, as needed for the backward pass.
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Parameter gradients in the same shape as the network, plus the
/// gradient with respect to the input vector.
pub struct MlpGrad {
    pub layers: Vec<Layer>,
    pub input: Vec<f64>,
}

impl Mlp {
    /// Fan-in scaled uniform init; biases zero.
    pub fn random(spec: MlpSpec, rng: &mut RngStream) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let scale = 1.0 / (n_in as f64).sqrt();
                Layer {
                    w: (0..n_out)
                        .map(|_| (0..n_in).map(|_| rng.gen_range(-scale..scale)).collect())
                        .collect(),
                    b: vec![0.0; n_out],
                }
            })
            .collect();
        Self { spec, layers }
    }

    /// Zeroes the final layer so the network is the constant-zero map.
    pub fn zero_final_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        for row in &mut last.w {
            for v in row {
                *v = 0.0;
            }
        }
        for v in &mut last.b {
            *v = 0.0;
        }
    }

    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>, NeuralError> {
        Ok(self.apply_cached(input)?.output)
    }

    pub fn apply_cached(&self, input: &[f64]) -> Result<MlpCache, NeuralError> {
        if input.len() != self.spec.input_width() {
            return Err(NeuralError::WidthMismatch {
                expected: self.spec.input_width(),
                got: input.len(),
            });
        }
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut a = input.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let z: Vec<f64> = layer
                .w
                .iter()
                .zip(&layer.b)
                .map(|(row, &b)| row.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>() + b)
                .collect();
            inputs.push(std::mem::take(&mut a));
            a = if l + 1 == n_layers {
                z.clone()
            } else {
                z.iter().map(|&v| self.spec.hidden_activation.apply(v)).collect()
            };
            pre.push(z);
        }
        Ok(MlpCache {
            inputs,
            pre,
            output: a,
        })
    }

    /// Reverse-mode pass from an output cotangent.
    pub fn backward(&self, cache: &MlpCache, output_cot: &[f64]) -> MlpGrad {
        let n_layers = self.layers.len();
        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer {
                w: l.w.iter().map(|r| vec![0.0; r.len()]).collect(),
                b: vec![0.0; l.b.len()],
            })
            .collect();
        let mut delta = output_cot.to_vec();
        for l in (0..n_layers).rev() {
            // delta is currently d(loss)/d(post-activation of layer l);
            // fold in the activation derivative (identity on the final
            // layer).
            if l + 1 != n_layers {
                for (d, &z) in delta.iter_mut().zip(&cache.pre[l]) {
                    *d *= self.spec.hidden_activation.deriv(z);
                }
            }
            let input = &cache.inputs[l];
            for (i, &d) in delta.iter().enumerate() {
                grads[l].b[i] = d;
                for (j, &x) in input.iter().enumerate() {
                    grads[l].w[i][j] = d * x;
                }
            }
            let mut cot_in = vec![0.0; input.len()];
            for (i, &d) in delta.iter().enumerate() {
                for (j, &w) in self.layers[l].w[i].iter().enumerate() {
                    cot_in[j] += d * w;
                }
            }
            delta = cot_in;
        }
        MlpGrad {
            layers: grads,
            input: delta,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.b.len() * (l.w[0].len() + 1))
            .sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            for row in &l.w {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(&l.b);
        }
    }

    /// Loads parameters from a flat slice, returning how many were read.
    pub fn load_from(&mut self, flat: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            for row in &mut l.w {
                let n = row.len();
                row.copy_from_slice(&flat[k..k + n]);
                k += n;
            }
            let n = l.b.len();
            l.b.copy_from_slice(&flat[k..k + n]);
            k += n;
        }
        k
    }
}

#[cfg(test)]
fn flatten_grad_into(grad: &MlpGrad, out: &mut Vec<f64>) {
    for l in &grad.layers {
        for row in &l.w {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&l.b);
    }
}

fn accumulate_grad(acc: &mut [f64], grad: &MlpGrad, offset: usize) -> usize {
    let mut k = offset;
    for l in &grad.layers {
        for row in &l.w {
            for &v in row {
                acc[k] += v;
                k += 1;
            }
        }
        for &v in &l.b {
            acc[k] += v;
            k += 1;
        }
    }
    k
}

/// DeepSet summary network: per-element MLP, mean pooling, post MLP.
/// Permutation invariance is exact because pooling is an arithmetic
/// mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeepSet {
    pub element_net: Mlp,
    pub post_net: Mlp,
}

pub struct DeepSetCache {
    element: Vec<MlpCache>,
    post: MlpCache,
}

impl DeepSet {
    pub fn new(element_net: Mlp, post_net: Mlp) -> Result<Self, NeuralError> {
        if element_net.spec.output_width() != post_net.spec.input_width() {
            return Err(NeuralError::WidthMismatch {
                expected: post_net.spec.input_width(),
                got: element_net.spec.output_width(),
            });
        }
        Ok(Self {
            element_net,
            post_net,
        })
    }

    pub fn summary_dim(&self) -> usize {
        self.post_net.spec.output_width()
    }

    pub fn summary(&self, elements: &[Vec<f64>]) -> Result<Vec<f64>, NeuralError> {
        Ok(self.summary_cached(elements)?.0)
    }

    pub fn summary_cached(
        &self,
        elements: &[Vec<f64>],
    ) -> Result<(Vec<f64>, DeepSetCache), NeuralError> {
        if elements.is_empty() {
            return Err(NeuralError::EmptySet);
        }
        let caches: Vec<MlpCache> = elements
            .iter()
            .map(|e| self.element_net.apply_cached(e))
            .collect::<Result<_, _>>()?;
        let dim = self.element_net.spec.output_width();
        // Pool each coordinate in a canonical order so the mean is
        // exactly permutation invariant despite f64 non-associativity,
        // and as an offset from the smallest value so a set of identical
        // elements pools to that element exactly.
        let n = elements.len() as f64;
        let pooled: Vec<f64> = (0..dim)
            .map(|j| {
                let mut vals: Vec<f64> = caches.iter().map(|c| c.output()[j]).collect();
                vals.sort_by(f64::total_cmp);
                let base = vals[0];
                base + vals.iter().map(|v| v - base).sum::<f64>() / n
            })
            .collect();
        let post = self.post_net.apply_cached(&pooled)?;
        let s = post.output.clone();
        Ok((s, DeepSetCache { element: caches, post }))
    }

    /// Accumulates parameter gradients into `acc` starting at `offset`
    /// (element net first, then post net) and returns the next offset.
    pub fn backward_into(
        &self,
        cache: &DeepSetCache,
        cot_summary: &[f64],
        acc: &mut [f64],
        offset: usize,
    ) -> usize {
        let post_grad = self.post_net.backward(&cache.post, cot_summary);
        let inv = 1.0 / cache.element.len() as f64;
        let cot_pooled: Vec<f64> = post_grad.input.iter().map(|v| v * inv).collect();
        let mut k = offset;
        let element_offset = k;
        for c in &cache.element {
            let g = self.element_net.backward(c, &cot_pooled);
            accumulate_grad(acc, &g, element_offset);
        }
        k = element_offset + self.element_net.param_count();
        k = accumulate_grad(&mut acc[..], &post_grad, k);
        k
    }

    pub fn param_count(&self) -> usize {
        self.element_net.param_count() + self.post_net.param_count()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.element_net.flatten_into(out);
        self.post_net.flatten_into(out);
    }

    pub fn load_from(&mut self, flat: &[f64]) -> usize {
        let k = self.element_net.load_from(flat);
        k + self.post_net.load_from(&flat[k..])
    }
}

/// One affine coupling block. Coordinates whose index parity equals
/// `transform_odd` pass through; the others are scaled and shifted by a
/// network conditioned on the pass-through coordinates and the summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingBlock {
    pub net: Mlp,
    pub transform_odd: bool,
}

/// Conditional affine coupling flow on the augmented parameter space.
/// `param_dim` is the modeled dimension q; `augmented_dim` is q when
/// q >= 2 and q + 1 otherwise (one auxiliary standard-normal
/// coordinate so the coupling split is nontrivial in 1D).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingFlow {
    pub param_dim: usize,
    pub augmented_dim: usize,
    pub summary_dim: usize,
    pub clamp: f64,
    pub blocks: Vec<CouplingBlock>,
}

pub struct FlowCache {
    /// Per block: coordinates entering the block, net cache, clamped
    /// scales per transformed coordinate.
    per_block: Vec<(Vec<f64>, MlpCache, Vec<f64>)>,
    pub z: Vec<f64>,
    pub log_det: f64,
}

fn block_indices(dim: usize, transform_odd: bool) -> (Vec<usize>, Vec<usize>) {
    let (mut kept, mut trans) = (Vec::new(), Vec::new());
    for i in 0..dim {
        if (i % 2 == 1) == transform_odd {
            trans.push(i);
        } else {
            kept.push(i);
        }
    }
    (kept, trans)
}

impl CouplingFlow {
    pub fn augmented_dim_for(param_dim: usize) -> usize {
        if param_dim >= 2 {
            param_dim
        } else {
            param_dim + 1
        }
    }

    /// Builds a flow whose scale/shift nets have the given hidden
    /// widths. Final layers are zero-initialized so the flow starts at
    /// the identity map.
    pub fn new(
        param_dim: usize,
        summary_dim: usize,
        n_blocks: usize,
        hidden: &[usize],
        clamp: f64,
        rng: &mut RngStream,
    ) -> Result<Self, NeuralError> {
        if param_dim == 0 {
            return Err(NeuralError::InvalidSpec("param_dim must be positive".into()));
        }
        if n_blocks < 2 {
            return Err(NeuralError::InvalidSpec(
                "need at least 2 blocks so every coordinate is transformed".into(),
            ));
        }
        let augmented_dim = Self::augmented_dim_for(param_dim);
        let blocks = (0..n_blocks)
            .map(|b| {
                let transform_odd = b % 2 == 0;
                let (kept, trans) = block_indices(augmented_dim, transform_odd);
                let mut widths = vec![kept.len() + summary_dim];
                widths.extend_from_slice(hidden);
                widths.push(2 * trans.len());
                let spec = MlpSpec::new(widths, Activation::Tanh)?;
                let mut net = Mlp::random(spec, rng);
                net.zero_final_layer();
                Ok(CouplingBlock { net, transform_odd })
            })
            .collect::<Result<Vec<_>, NeuralError>>()?;
        Ok(Self {
            param_dim,
            augmented_dim,
            summary_dim,
            clamp,
            blocks,
        })
    }

    pub fn forward(&self, omega: &[f64], s: &[f64]) -> Result<(Vec<f64>, f64), NeuralError> {
        let c = self.forward_cached(omega, s)?;
        Ok((c.z, c.log_det))
    }

    pub fn forward_cached(&self, omega: &[f64], s: &[f64]) -> Result<FlowCache, NeuralError> {
        self.check_dims(omega, s)?;
        let mut v = omega.to_vec();
        let mut log_det = 0.0;
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let (kept, trans) = block_indices(self.augmented_dim, block.transform_odd);
            let input = v.clone();
            let mut net_in: Vec<f64> = kept.iter().map(|&i| v[i]).collect();
            net_in.extend_from_slice(s);
            let cache = block.net.apply_cached(&net_in)?;
            if cache.output().iter().any(|o| !o.is_finite()) {
                return Err(NeuralError::NumericalOverflow { block: b });
            }
            let t = trans.len();
            let mut scales = Vec::with_capacity(t);
            for (k, &i) in trans.iter().enumerate() {
                let sc = self.clamp * (cache.output()[k] / self.clamp).tanh();
                let shift = cache.output()[t + k];
                v[i] = v[i] * sc.exp() + shift;
                log_det += sc;
                scales.push(sc);
            }
            per_block.push((input, cache, scales));
        }
        Ok(FlowCache {
            per_block,
            z: v,
            log_det,
        })
    }

    pub fn inverse(&self, z: &[f64], s: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.check_dims(z, s)?;
        let mut v = z.to_vec();
        for (b, block) in self.blocks.iter().enumerate().rev() {
            let (kept, trans) = block_indices(self.augmented_dim, block.transform_odd);
            let mut net_in: Vec<f64> = kept.iter().map(|&i| v[i]).collect();
            net_in.extend_from_slice(s);
            let out = block.net.apply(&net_in)?;
            if out.iter().any(|o| !o.is_finite()) {
                return Err(NeuralError::NumericalOverflow { block: b });
            }
            let t = trans.len();
            for (k, &i) in trans.iter().enumerate() {
                let sc = self.clamp * (out[k] / self.clamp).tanh();
                v[i] = (v[i] - out[t + k]) * (-sc).exp();
            }
        }
        Ok(v)
    }

    /// Exact log q(omega_augmented | s) by change of variables.
    pub fn log_density(&self, omega: &[f64], s: &[f64]) -> Result<f64, NeuralError> {
        let (z, log_det) = self.forward(omega, s)?;
        let quad: f64 = z.iter().map(|v| v * v).sum();
        Ok(-0.5 * quad - 0.5 * self.augmented_dim as f64 * LN_2PI + log_det)
    }

    /// Draws the augmented vector and drops the auxiliary coordinate.
    pub fn sample(&self, s: &[f64], rng: &mut RngStream) -> Result<Vec<f64>, NeuralError> {
        let z: Vec<f64> = (0..self.augmented_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let full = self.inverse(&z, s)?;
        Ok(full[..self.param_dim].to_vec())
    }

    /// Reverse-mode pass. `cot_z` is the cotangent of the base vector,
    /// `cot_log_det` that of the log-determinant. Parameter gradients
    /// accumulate into `acc` at `offset` (blocks in order); returns the
    /// summary cotangent and next offset.
    pub fn backward_into(
        &self,
        cache: &FlowCache,
        cot_z: &[f64],
        cot_log_det: f64,
        acc: &mut [f64],
        offset: usize,
    ) -> (Vec<f64>, usize) {
        let mut cot_v = cot_z.to_vec();
        let mut cot_s = vec![0.0; self.summary_dim];
        // Walk blocks in reverse; track per-block parameter offsets
        // first since accumulation happens back-to-front.
        let mut offsets = Vec::with_capacity(self.blocks.len());
        let mut k = offset;
        for block in &self.blocks {
            offsets.push(k);
            k += block.net.param_count();
        }
        let end = k;
        for (b, block) in self.blocks.iter().enumerate().rev() {
            let (kept, trans) = block_indices(self.augmented_dim, block.transform_odd);
            let (input, net_cache, scales) = &cache.per_block[b];
            let t = trans.len();
            let mut cot_net_out = vec![0.0; 2 * t];
            for (j, &i) in trans.iter().enumerate() {
                let e = scales[j].exp();
                let d_sc = cot_v[i] * input[i] * e + cot_log_det;
                // Chain through the clamp: sc = clamp * tanh(raw/clamp).
                let raw = net_cache.output()[j];
                let th = (raw / self.clamp).tanh();
                cot_net_out[j] = d_sc * (1.0 - th * th);
                cot_net_out[t + j] = cot_v[i];
                cot_v[i] *= e;
            }
            let g = block.net.backward(net_cache, &cot_net_out);
            accumulate_grad(acc, &g, offsets[b]);
            for (j, &i) in kept.iter().enumerate() {
                cot_v[i] += g.input[j];
            }
            for (cs, gi) in cot_s.iter_mut().zip(&g.input[kept.len()..]) {
                *cs += gi;
            }
        }
        (cot_s, end)
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.net.param_count()).sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for b in &self.blocks {
            b.net.flatten_into(out);
        }
    }

    pub fn load_from(&mut self, flat: &[f64]) -> usize {
        let mut k = 0;
        for b in &mut self.blocks {
            k += b.net.load_from(&flat[k..]);
        }
        k
    }

    fn check_dims(&self, omega: &[f64], s: &[f64]) -> Result<(), NeuralError> {
        if omega.len() != self.augmented_dim {
            return Err(NeuralError::WidthMismatch {
                expected: self.augmented_dim,
                got: omega.len(),
            });
        }
        if s.len() != self.summary_dim {
            return Err(NeuralError::WidthMismatch {
                expected: self.summary_dim,
                got: s.len(),
            });
        }
        Ok(())
    }
}

/// Per-coordinate standardization statistics for inputs, outputs, and
/// parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_sd: Vec<f64>,
    pub omega_mean: Vec<f64>,
    pub omega_sd: Vec<f64>,
}

impl Standardization {
    pub fn validate(&self) -> Result<(), NeuralError> {
        for sd in self.x_sd.iter().chain(&self.y_sd).chain(&self.omega_sd) {
            if !(*sd > 0.0) {
                return Err(NeuralError::BadStandardization(*sd));
            }
        }
        Ok(())
    }

    /// Concatenated standardized (x, y) element vector.
    pub fn element(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut e: Vec<f64> = x
            .iter()
            .zip(self.x_mean.iter().zip(&self.x_sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        e.extend(
            y.iter()
                .zip(self.y_mean.iter().zip(&self.y_sd))
                .map(|(v, (m, s))| (v - m) / s),
        );
        e
    }

    pub fn standardize_omega(&self, omega: &[f64]) -> Vec<f64> {
        omega
            .iter()
            .zip(self.omega_mean.iter().zip(&self.omega_sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn destandardize_omega(&self, omega: &[f64]) -> Vec<f64> {
        omega
            .iter()
            .zip(self.omega_mean.iter().zip(&self.omega_sd))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSchedule {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub alpha: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            epochs: 100,
            batches_per_epoch: 128,
            batch_size: 64,
            lr0: 5e-4,
            alpha: 1e-6,
        }
    }
}

impl TrainingSchedule {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NpeProvenance {
    pub mode: String,
    pub seed: u64,
    pub schedule: TrainingSchedule,
}

/// Complete amortized posterior estimator: summary network, flow,
/// standardization statistics, and training provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NpeModel {
    pub deepset: DeepSet,
    pub flow: CouplingFlow,
    pub standardization: Standardization,
    pub provenance: NpeProvenance,
}

impl NpeModel {
    pub fn param_count(&self) -> usize {
        self.deepset.param_count() + self.flow.param_count()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.deepset.flatten_into(&mut out);
        self.flow.flatten_into(&mut out);
        out
    }

    pub fn load_params(&mut self, flat: &[f64]) {
        let k = self.deepset.load_from(flat);
        self.flow.load_from(&flat[k..]);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// One standardized training item: the standardized (x, y) element
/// vectors of its observation set and the standardized (augmented)
/// parameter vector.
pub struct TrainItem {
    pub elements: Vec<Vec<f64>>,
    pub omega_aug: Vec<f64>,
}

/// Batch-mean negative log-density of the flow at the items' parameters
/// (the training loss), plus its gradient with respect to the flat
/// parameter vector (deepset first, then flow).
pub fn npe_nll_and_grad(
    deepset: &DeepSet,
    flow: &CouplingFlow,
    batch: &[TrainItem],
) -> Result<(f64, Vec<f64>), NeuralError> {
    let n_params = deepset.param_count() + flow.param_count();
    let mut grad = vec![0.0; n_params];
    let mut loss = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for item in batch {
        let (s, ds_cache) = deepset.summary_cached(&item.elements)?;
        let f_cache = flow.forward_cached(&item.omega_aug, &s)?;
        let quad: f64 = f_cache.z.iter().map(|v| v * v).sum();
        loss += inv * (0.5 * quad + 0.5 * flow.augmented_dim as f64 * LN_2PI - f_cache.log_det);
        // d(nll)/dz = z, d(nll)/d(log_det) = -1, scaled by batch mean.
        let cot_z: Vec<f64> = f_cache.z.iter().map(|v| v * inv).collect();
        let (cot_s, _) =
            flow.backward_into(&f_cache, &cot_z, -inv, &mut grad, deepset.param_count());
        deepset.backward_into(&ds_cache, &cot_s, &mut grad, 0);
    }
    Ok((loss, grad))
}

/// Bias-corrected Adam state over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) {
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

/// Cosine learning-rate schedule. Steps past `total_steps` clamp to the
/// minimum rate lr0 * alpha.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, alpha: f64) -> f64 {
    let t = step.min(total_steps) as f64;
    let frac = t / total_steps as f64;
    lr0 * alpha + 0.5 * lr0 * (1.0 - alpha) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> RngStream {
        RngStream::new(seed, 0)
    }

    #[test]
    fn zero_final_layer_is_zero_map() {
        let mut r = rng(1);
        let mut net = Mlp::random(MlpSpec::new(vec![3, 5, 2], Activation::Tanh).unwrap(), &mut r);
        net.zero_final_layer();
        let out = net.apply(&[0.4, -1.2, 2.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_closed_form() {
        let net = Mlp {
            spec: MlpSpec::new(vec![2, 2], Activation::Tanh).unwrap(),
            layers: vec![Layer {
                w: vec![vec![1.0, 2.0], vec![-0.5, 3.0]],
                b: vec![0.1, -0.2],
            }],
        };
        let x = [0.7, -0.3];
        let cache = net.apply_cached(&x).unwrap();
        assert!((cache.output()[0] - (0.7 - 0.6 + 0.1)).abs() < 1e-15);
        assert!((cache.output()[1] - (-0.35 - 0.9 - 0.2)).abs() < 1e-15);
        let delta = [1.5, -2.0];
        let g = net.backward(&cache, &delta);
        for i in 0..2 {
            for j in 0..2 {
                assert!((g.layers[0].w[i][j] - delta[i] * x[j]).abs() < 1e-15);
            }
            assert_eq!(g.layers[0].b[i], delta[i]);
        }
        // Input gradient is W^T delta.
        assert!((g.input[0] - (1.0 * 1.5 + -0.5 * -2.0)).abs() < 1e-15);
        assert!((g.input[1] - (2.0 * 1.5 + 3.0 * -2.0)).abs() < 1e-15);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut r = rng(2);
        let net = Mlp::random(MlpSpec::new(vec![3, 2], Activation::Tanh).unwrap(), &mut r);
        assert!(matches!(
            net.apply(&[1.0, 2.0]),
            Err(NeuralError::WidthMismatch { expected: 3, got: 2 })
        ));
    }

    /// Scalar loss 0.5*||out||^2; checks parameter and input gradients
    /// against central finite differences.
    fn finite_diff_check(net: &Mlp, input: &[f64], tol: f64) {
        let cache = net.apply_cached(input).unwrap();
        let g = net.backward(&cache, &cache.output().to_vec());
        let loss = |n: &Mlp, x: &[f64]| -> f64 {
            n.apply(x).unwrap().iter().map(|v| 0.5 * v * v).sum()
        };
        let mut flat = Vec::new();
        net.flatten_into(&mut flat);
        let mut gflat = Vec::new();
        flatten_grad_into(&g, &mut gflat);
        let h = 1e-6;
        for k in 0..flat.len() {
            let mut hi = net.clone();
            let mut lo = net.clone();
            let mut fh = flat.clone();
            fh[k] += h;
            hi.load_from(&fh);
            fh[k] -= 2.0 * h;
            lo.load_from(&fh);
            let fd = (loss(&hi, input) - loss(&lo, input)) / (2.0 * h);
            assert!(
                (fd - gflat[k]).abs() < tol * (1.0 + fd.abs()),
                "param {k}: fd={fd} ad={}",
                gflat[k]
            );
        }
        for j in 0..input.len() {
            let mut xh = input.to_vec();
            xh[j] += h;
            let up = loss(net, &xh);
            xh[j] -= 2.0 * h;
            let dn = loss(net, &xh);
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - g.input[j]).abs() < tol * (1.0 + fd.abs()),
                "input {j}: fd={fd} ad={}",
                g.input[j]
            );
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut r = rng(3);
        let net = Mlp::random(MlpSpec::new(vec![3, 10, 10, 2], Activation::Tanh).unwrap(), &mut r);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| r.gen_range(-2.0..2.0)).collect();
            finite_diff_check(&net, &x, 1e-5);
        }
        let relu = Mlp::random(MlpSpec::new(vec![2, 8, 1], Activation::Relu).unwrap(), &mut r);
        for _ in 0..5 {
            let x: Vec<f64> = (0..2).map(|_| r.gen_range(-2.0..2.0)).collect();
            finite_diff_check(&relu, &x, 1e-4);
        }
    }

    fn small_deepset(r: &mut RngStream) -> DeepSet {
        DeepSet::new(
            Mlp::random(MlpSpec::new(vec![2, 10, 10, 4], Activation::Tanh).unwrap(), r),
            Mlp::random(MlpSpec::new(vec![4, 10, 3], Activation::Tanh).unwrap(), r),
        )
        .unwrap()
    }

    #[test]
    fn deepset_permutation_invariance_exact() {
        let mut r = rng(4);
        let ds = small_deepset(&mut r);
        let set: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let s1 = ds.summary(&set).unwrap();
        let permuted = vec![set[2].clone(), set[0].clone(), set[3].clone(), set[1].clone()];
        let s2 = ds.summary(&permuted).unwrap();
        assert_eq!(s1, s2);
        // Mean pooling: a duplicated element equals the single element.
        let single = vec![set[0].clone()];
        let dup = vec![set[0].clone(), set[0].clone(), set[0].clone()];
        assert_eq!(ds.summary(&single).unwrap(), ds.summary(&dup).unwrap());
    }

    #[test]
    fn deepset_zero_nets_and_empty_set() {
        let mut r = rng(5);
        let mut ds = small_deepset(&mut r);
        ds.element_net.zero_final_layer();
        ds.post_net.zero_final_layer();
        let s = ds.summary(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(s, vec![0.0, 0.0, 0.0]);
        assert!(matches!(ds.summary(&[]), Err(NeuralError::EmptySet)));
    }

    #[test]
    fn identity_flow_anchors() {
        let mut r = rng(6);
        let flow = CouplingFlow::new(1, 3, 4, &[8], 1.9, &mut r).unwrap();
        assert_eq!(flow.augmented_dim, 2);
        let s = [0.3, -0.1, 0.7];
        let omega = [0.8, -1.3];
        let (z, log_det) = flow.forward(&omega, &s).unwrap();
        assert_eq!(z, omega.to_vec());
        assert_eq!(log_det, 0.0);
        let lq = flow.log_density(&omega, &s).unwrap();
        let expect = -0.5 * (0.8f64 * 0.8 + 1.3 * 1.3) - LN_2PI;
        assert!((lq - expect).abs() < 1e-12);
        // Marginalizing the auxiliary coordinate of an identity flow at
        // omega = 0 yields the standard-normal constant.
        let marginal = marginal_log_density_1d(&flow, 0.0, &s);
        assert!((marginal - (-0.9189385)).abs() < 1e-6, "marginal {marginal}");
    }

    /// Marginal density of the first coordinate by trapezoid quadrature
    /// over the auxiliary coordinate.
    fn marginal_log_density_1d(flow: &CouplingFlow, omega: f64, s: &[f64]) -> f64 {
        let n = 4001;
        let (lo, hi) = (-10.0, 10.0);
        let h = (hi - lo) / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            let a = lo + i as f64 * h;
            let d = flow.log_density(&[omega, a], s).unwrap().exp();
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            total += w * d * h;
        }
        total.ln()
    }

    fn perturb_flow(flow: &mut CouplingFlow, scale: f64, r: &mut RngStream) {
        let mut flat = Vec::new();
        flow.flatten_into(&mut flat);
        for v in &mut flat {
            *v += scale * r.gen_range(-1.0f64..1.0);
        }
        flow.load_from(&flat);
    }

    #[test]
    fn round_trip_random_weights() {
        let mut r = rng(7);
        let mut flow = CouplingFlow::new(2, 3, 4, &[8], 1.9, &mut r).unwrap();
        perturb_flow(&mut flow, 0.5, &mut r);
        let s = [0.2, -0.4, 1.1];
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let omega: Vec<f64> = (0..2).map(|_| r.gen_range(-3.0..3.0)).collect();
            let (z, _) = flow.forward(&omega, &s).unwrap();
            let back = flow.inverse(&z, &s).unwrap();
            for (a, b) in omega.iter().zip(&back) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-9, "round-trip error {worst}");
    }

    #[test]
    fn normalization_random_weights_2d() {
        // Change of variables: the density must integrate to 1 over a
        // wide box for arbitrary weights.
        let mut r = rng(8);
        let mut flow = CouplingFlow::new(2, 2, 4, &[8], 1.9, &mut r).unwrap();
        perturb_flow(&mut flow, 0.4, &mut r);
        let s = [0.5, -0.2];
        let n = 301;
        let (lo, hi) = (-9.0, 9.0);
        let h = (hi - lo) / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 }
                    * if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                let omega = [lo + i as f64 * h, lo + j as f64 * h];
                total += w * flow.log_density(&omega, &s).unwrap().exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-2, "integral {total}");
    }

    #[test]
    fn marginal_quadrature_identity_flow() {
        let mut r = rng(9);
        let flow = CouplingFlow::new(1, 2, 4, &[8], 1.9, &mut r).unwrap();
        let s = [0.0, 0.0];
        let n = 801;
        let (lo, hi) = (-8.0, 8.0);
        let h = (hi - lo) / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            let omega = lo + i as f64 * h;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            total += w * marginal_log_density_1d(&flow, omega, &s).exp() * h;
        }
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn sampler_matches_density_ks() {
        let mut r = rng(10);
        let mut flow = CouplingFlow::new(1, 2, 4, &[8], 1.9, &mut r).unwrap();
        perturb_flow(&mut flow, 0.3, &mut r);
        let s = [0.4, -0.6];
        let n_samp = 10_000;
        let mut samples: Vec<f64> = (0..n_samp)
            .map(|_| flow.sample(&s, &mut r).unwrap()[0])
            .collect();
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Density-implied CDF of the first-coordinate marginal on a grid.
        let n_grid = 2001;
        let (lo, hi) = (-12.0, 12.0);
        let h = (hi - lo) / (n_grid - 1) as f64;
        let dens: Vec<f64> = (0..n_grid)
            .map(|i| marginal_log_density_1d(&flow, lo + i as f64 * h, &s).exp())
            .collect();
        let mut cdf = vec![0.0; n_grid];
        for i in 1..n_grid {
            cdf[i] = cdf[i - 1] + 0.5 * (dens[i - 1] + dens[i]) * h;
        }
        let norm = cdf[n_grid - 1];
        let mut d: f64 = 0.0;
        for (k, &x) in samples.iter().enumerate() {
            let idx = (((x - lo) / h) as usize).min(n_grid - 1);
            let c = cdf[idx] / norm;
            let e_hi = (k + 1) as f64 / n_samp as f64;
            let e_lo = k as f64 / n_samp as f64;
            d = d.max((c - e_hi).abs()).max((c - e_lo).abs());
        }
        let crit = 1.9495 / (n_samp as f64).sqrt();
        assert!(d < crit, "KS {d} >= {crit}");
    }

    #[test]
    fn identity_flow_sample_moments() {
        let mut r = rng(11);
        let flow = CouplingFlow::new(1, 1, 4, &[6], 1.9, &mut r).unwrap();
        let n = 50_000;
        let draws: Vec<f64> = (0..n).map(|_| flow.sample(&[0.0], &mut r).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((sd - 1.0).abs() < 0.02);
    }

    #[test]
    fn npe_gradient_matches_finite_differences() {
        for seed in [12, 13, 14] {
            let mut r = rng(seed);
            let mut deepset = DeepSet::new(
                Mlp::random(MlpSpec::new(vec![2, 6, 4], Activation::Tanh).unwrap(), &mut r),
                Mlp::random(MlpSpec::new(vec![4, 5, 3], Activation::Tanh).unwrap(), &mut r),
            )
            .unwrap();
            let mut flow = CouplingFlow::new(1, 3, 4, &[6], 1.9, &mut r).unwrap();
            perturb_flow(&mut flow, 0.3, &mut r);
            // Perturb the deepset too so gradients are generic.
            let mut flat = Vec::new();
            deepset.flatten_into(&mut flat);
            for v in &mut flat {
                *v += 0.1 * r.gen_range(-1.0f64..1.0);
            }
            deepset.load_from(&flat);

            let batch: Vec<TrainItem> = (0..3)
                .map(|_| TrainItem {
                    elements: (0..4)
                        .map(|_| (0..2).map(|_| r.gen_range(-1.0..1.0)).collect())
                        .collect(),
                    omega_aug: (0..2).map(|_| r.gen_range(-1.5..1.5)).collect(),
                })
                .collect();
            let (_, grad) = npe_nll_and_grad(&deepset, &flow, &batch).unwrap();
            let mut params = Vec::new();
            deepset.flatten_into(&mut params);
            flow.flatten_into(&mut params);
            let n_ds = deepset.param_count();
            let eval = |p: &[f64]| {
                let mut ds = deepset.clone();
                let mut fl = flow.clone();
                ds.load_from(&p[..n_ds]);
                fl.load_from(&p[n_ds..]);
                npe_nll_and_grad(&ds, &fl, &batch).unwrap().0
            };
            let h = 1e-6;
            // Spot-check a spread of parameters rather than all of them.
            let step = (params.len() / 40).max(1);
            for k in (0..params.len()).step_by(step) {
                let mut p = params.clone();
                p[k] += h;
                let up = eval(&p);
                p[k] -= 2.0 * h;
                let dn = eval(&p);
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (fd - grad[k]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "seed {seed} param {k}: fd={fd} ad={}",
                    grad[k]
                );
            }
        }
    }

    #[test]
    fn batch_loss_is_mean_nll() {
        // Identity flow: the loss must equal the hand-computed mean
        // standard-normal NLL of the two items.
        let mut r = rng(15);
        let deepset = small_deepset(&mut r);
        let flow = CouplingFlow::new(1, 3, 4, &[6], 1.9, &mut r).unwrap();
        let batch = vec![
            TrainItem {
                elements: vec![vec![0.1, 0.2]],
                omega_aug: vec![0.5, -0.5],
            },
            TrainItem {
                elements: vec![vec![-0.3, 0.4]],
                omega_aug: vec![1.0, 2.0],
            },
        ];
        let (loss, _) = npe_nll_and_grad(&deepset, &flow, &batch).unwrap();
        let nll = |v: &[f64]| 0.5 * v.iter().map(|x| x * x).sum::<f64>() + LN_2PI;
        let expect = 0.5 * (nll(&[0.5, -0.5]) + nll(&[1.0, 2.0]));
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn adam_and_cosine_anchors() {
        assert!((cosine_lr(0, 12800, 5e-4, 1e-6) - 5e-4).abs() < 1e-16);
        let end = cosine_lr(12800, 12800, 5e-4, 1e-6);
        assert!((end - 5e-10).abs() < 1e-22);
        // Past the end the rate clamps to the minimum.
        assert_eq!(cosine_lr(20000, 12800, 5e-4, 1e-6), end);
        let mid = cosine_lr(6400, 12800, 5e-4, 1e-6);
        assert!((mid - 0.5 * (5e-4 + 5e-10)).abs() < 1e-12);

        let mut state = AdamState::new(1);
        let mut p = [1.0];
        adam_step(&mut state, &mut p, &[1.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-7, "first step {}", p[0]);
    }

    #[test]
    fn flow_trains_to_gaussian_target() {
        // Fit the flow alone (fixed summary) to N(2, 0.5) by NLL descent.
        let mut r = rng(16);
        let mut flow = CouplingFlow::new(1, 1, 4, &[10, 10], 1.9, &mut r).unwrap();
        let deepset = DeepSet::new(
            {
                let mut m =
                    Mlp::random(MlpSpec::new(vec![1, 2], Activation::Tanh).unwrap(), &mut r);
                m.zero_final_layer();
                m
            },
            {
                let mut m =
                    Mlp::random(MlpSpec::new(vec![2, 1], Activation::Tanh).unwrap(), &mut r);
                m.zero_final_layer();
                m
            },
        )
        .unwrap();
        let n_ds = deepset.param_count();
        let mut params = Vec::new();
        deepset.flatten_into(&mut params);
        flow.flatten_into(&mut params);
        let mut adam = AdamState::new(params.len());
        let total = 2000;
        let mut ds = deepset.clone();
        for step in 0..total {
            let batch: Vec<TrainItem> = (0..64)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    TrainItem {
                        elements: vec![vec![0.0]],
                        omega_aug: vec![2.0 + 0.5 * z, StandardNormal.sample(&mut r)],
                    }
                })
                .collect();
            let (_, grad) = npe_nll_and_grad(&ds, &flow, &batch).unwrap();
            let lr = cosine_lr(step, total, 2e-3, 1e-6);
            adam_step(&mut adam, &mut params, &grad, lr);
            ds.load_from(&params[..n_ds]);
            flow.load_from(&params[n_ds..]);
        }
        let s = ds.summary(&[vec![0.0]]).unwrap();
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| flow.sample(&s, &mut r).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - 2.0).abs() < 0.05 * 2.0, "mean {mean}");
        assert!((sd - 0.5).abs() < 0.05 * 0.5, "sd {sd}");
    }

    #[test]
    fn model_json_round_trip_byte_identical() {
        let mut r = rng(17);
        let mut flow = CouplingFlow::new(1, 3, 4, &[10, 10], 1.9, &mut r).unwrap();
        perturb_flow(&mut flow, 0.3, &mut r);
        let model = NpeModel {
            deepset: small_deepset(&mut r),
            flow,
            standardization: Standardization {
                x_mean: vec![100.5],
                x_sd: vec![57.4],
                y_mean: vec![5.1],
                y_sd: vec![1.3],
                omega_mean: vec![1.0],
                omega_sd: vec![0.23],
            },
            provenance: NpeProvenance {
                mode: "uncertainty_aware".into(),
                seed: 42,
                schedule: TrainingSchedule::default(),
            },
        };
        let json = model.to_json();
        let loaded = NpeModel::from_json(&json).unwrap();
        let json2 = loaded.to_json();
        if json != json2 {
            let i = json
                .bytes()
                .zip(json2.bytes())
                .position(|(a, b)| a != b)
                .unwrap_or(json.len().min(json2.len()));
            let lo = i.saturating_sub(60);
            panic!(
                "serialization differs at byte {i}:\n{}\nvs\n{}",
                &json[lo..(i + 20).min(json.len())],
                &json2[lo..(i + 20).min(json2.len())]
            );
        }
        assert_eq!(model.params_flat(), loaded.params_flat());
    }

    #[test]
    fn standardization_validation_and_round_trip() {
        let st = Standardization {
            x_mean: vec![1.0],
            x_sd: vec![2.0],
            y_mean: vec![0.5],
            y_sd: vec![0.25],
            omega_mean: vec![-1.0],
            omega_sd: vec![3.0],
        };
        st.validate().unwrap();
        let e = st.element(&[3.0], &[1.0]);
        assert_eq!(e, vec![1.0, 2.0]);
        let w = st.standardize_omega(&[2.0]);
        assert_eq!(w, vec![1.0]);
        assert_eq!(st.destandardize_omega(&w), vec![2.0]);
        let bad = Standardization {
            x_sd: vec![0.0],
            ..st
        };
        assert!(bad.validate().is_err());
    }
}
