//! Cross-attention adapters with a gated residual.
//!
//! Both adapters share one computation. Each query row `x` attends over a set
//! of key/value rows `V`:
//!
//! ```text
//! q   = MLP_Q(x)              k_j = MLP_K(v_j)
//! a   = softmax_j(<k_j, q> / sqrt(d_head))     (per head)
//! agg = sum_j a_j v_j                           (values are not projected)
//! out = x + p(x) ⊙ agg
//! ```
//!
//! The memory adapter uses the category embeddings as queries over the
//! support features; the local-global adapter uses an image's global feature
//! as the single query over its local features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, softmax_in_place, LinearLayer, Matrix};
use crate::seeding;

/// Tolerance on unit-norm checks for stored embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnAdapter {
    pub query: LinearLayer,
    pub key: LinearLayer,
    /// Gating projector `p`, D → D.
    pub gate: LinearLayer,
    pub heads: usize,
}

pub type MemoryAdapterParams = CrossAttnAdapter;
pub type LocalGlobalAdapterParams = CrossAttnAdapter;

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct AttnTrace {
    projected_keys: Matrix,
    steps: Vec<QueryTrace>,
}

#[derive(Debug, Clone)]
struct QueryTrace {
    q: Vec<f64>,
    /// heads × S, row-major.
    weights: Vec<f64>,
    aggregated: Vec<f64>,
    gate: Vec<f64>,
}

impl AttnTrace {
    /// Attention weights of query `i`, head `h`, over all key rows.
    pub fn weights(&self, i: usize, h: usize) -> &[f64] {
        let s = self.projected_keys.rows();
        &self.steps[i].weights[h * s..(h + 1) * s]
    }

    /// The aggregated (pre-gate) value for query `i`.
    pub fn aggregated(&self, i: usize) -> &[f64] {
        &self.steps[i].aggregated
    }
}

impl CrossAttnAdapter {
    pub fn new(
        query: LinearLayer,
        key: LinearLayer,
        gate: LinearLayer,
        heads: usize,
    ) -> Result<Self> {
        let dim = gate.in_dim();
        let hidden = query.out_dim();
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if heads == 0 {
            return bad("head count must be positive".into());
        }
        if query.in_dim() != dim || key.in_dim() != dim || gate.out_dim() != dim {
            return bad(format!(
                "adapter layers disagree on embedding dim {dim}: query {}→{}, key {}→{}, gate {}→{}",
                query.in_dim(),
                query.out_dim(),
                key.in_dim(),
                key.out_dim(),
                gate.in_dim(),
                gate.out_dim()
            ));
        }
        if key.out_dim() != hidden {
            return bad(format!(
                "query width {hidden} != key width {}",
                key.out_dim()
            ));
        }
        if !hidden.is_multiple_of(heads) || !dim.is_multiple_of(heads) {
            return bad(format!(
                "hidden dim {hidden} and embedding dim {dim} must both be divisible by {heads} heads"
            ));
        }
        Ok(Self {
            query,
            key,
            gate,
            heads,
        })
    }

    /// All-zero adapter with the standard layout (key layer has no bias).
    pub fn zeros(dim: usize, hidden: usize, heads: usize) -> Result<Self> {
        Self::new(
            LinearLayer::zeros(dim, hidden, true),
            LinearLayer::zeros(dim, hidden, false),
            LinearLayer::zeros(dim, dim, true),
            heads,
        )
    }

    pub fn embed_dim(&self) -> usize {
        self.gate.in_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.query.out_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim() / self.heads
    }

    fn check_inputs(&self, queries: &Matrix, keys: &Matrix) -> Result<()> {
        let d = self.embed_dim();
        if queries.cols() != d {
            return Err(Error::DimensionMismatch {
                op: "adapter queries",
                left: queries.shape(),
                right: (d, self.hidden_dim()),
            });
        }
        if keys.cols() != d {
            return Err(Error::DimensionMismatch {
                op: "adapter keys",
                left: keys.shape(),
                right: (d, self.hidden_dim()),
            });
        }
        Ok(())
    }

    /// Refines every row of `queries` by attending over `keys` (which double
    /// as values). `keys` must be non-empty; callers map emptiness to their
    /// own error.
    pub fn forward(&self, queries: &Matrix, keys: &Matrix) -> Result<(Matrix, AttnTrace)> {
        self.check_inputs(queries, keys)?;
        let s = keys.rows();
        let d = self.embed_dim();
        let dh = self.head_dim();
        let dv = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut projected_keys = Matrix::zeros(s, self.hidden_dim());
        for j in 0..s {
            projected_keys
                .row_mut(j)
                .copy_from_slice(&self.key.forward(keys.row(j)));
        }

        let mut out = Matrix::zeros(queries.rows(), d);
        let mut steps = Vec::with_capacity(queries.rows());
        for (i, x) in queries.row_iter().enumerate() {
            let q = self.query.forward(x);
            let mut weights = vec![0.0; self.heads * s];
            let mut aggregated = vec![0.0; d];
            for h in 0..self.heads {
                let hs = h * dh..(h + 1) * dh;
                let vs = h * dv..(h + 1) * dv;
                let w = &mut weights[h * s..(h + 1) * s];
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj = dot(&projected_keys.row(j)[hs.clone()], &q[hs.clone()]) * scale;
                }
                softmax_in_place(w);
                let agg = &mut aggregated[vs.clone()];
                for (j, &a) in w.iter().enumerate() {
                    for (acc, v) in agg.iter_mut().zip(&keys.row(j)[vs.clone()]) {
                        *acc += a * v;
                    }
                }
            }
            let gate = self.gate.forward(x);
            let row = out.row_mut(i);
            for k in 0..d {
                row[k] = x[k] + gate[k] * aggregated[k];
            }
            steps.push(QueryTrace {
                q,
                weights,
                aggregated,
                gate,
            });
        }
        Ok((
            out,
            AttnTrace {
                projected_keys,
                steps,
            },
        ))
    }

    /// Accumulates parameter gradients into `grad` given the upstream
    /// gradient `d_out` of the refined rows.
    pub fn backward(
        &self,
        queries: &Matrix,
        keys: &Matrix,
        trace: &AttnTrace,
        d_out: &Matrix,
        grad: &mut CrossAttnAdapter,
    ) {
        let s = keys.rows();
        let d = self.embed_dim();
        let dh = self.head_dim();
        let dv = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut d_keys = Matrix::zeros(s, self.hidden_dim());
        let mut d_weights = vec![0.0; s];

        for (i, step) in trace.steps.iter().enumerate() {
            let x = queries.row(i);
            let dy = d_out.row(i);
            if dy.iter().all(|v| *v == 0.0) {
                continue;
            }
            let d_gate: Vec<f64> = dy
                .iter()
                .zip(&step.aggregated)
                .map(|(a, b)| a * b)
                .collect();
            self.gate.accumulate_grad(&mut grad.gate, x, &d_gate);
            let d_agg: Vec<f64> = dy.iter().zip(&step.gate).map(|(a, b)| a * b).collect();

            let mut dq = vec![0.0; self.hidden_dim()];
            for h in 0..self.heads {
                let hs = h * dh..(h + 1) * dh;
                let vs = h * dv..(h + 1) * dv;
                let w = &step.weights[h * s..(h + 1) * s];
                let mut mean = 0.0;
                for j in 0..s {
                    d_weights[j] = dot(&d_agg[vs.clone()], &keys.row(j)[vs.clone()]);
                    mean += w[j] * d_weights[j];
                }
                for j in 0..s {
                    let ds = w[j] * (d_weights[j] - mean) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let k = &trace.projected_keys.row(j)[hs.clone()];
                    for (g, kv) in dq[hs.clone()].iter_mut().zip(k) {
                        *g += ds * kv;
                    }
                    let dk = &mut d_keys.row_mut(j)[hs.clone()];
                    for (g, qv) in dk.iter_mut().zip(&step.q[hs.clone()]) {
                        *g += ds * qv;
                    }
                }
            }
            self.query.accumulate_grad(&mut grad.query, x, &dq);
        }
        for j in 0..s {
            self.key
                .accumulate_grad(&mut grad.key, keys.row(j), d_keys.row(j));
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            gate: self.gate.zeros_like(),
            heads: self.heads,
        }
    }
}

/// The few-shot exemplars: unit-norm features with one-hot labels,
/// exactly `shots` rows per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    features: Matrix,
    labels: Vec<usize>,
    one_hot: Matrix,
    n_classes: usize,
    shots: usize,
}

impl SupportSet {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptySupport);
        }
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                op: "support labels",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        let mut counts = vec![0usize; n_classes];
        for &l in &labels {
            if l >= n_classes {
                return Err(Error::InvalidTarget {
                    index: l,
                    classes: n_classes,
                });
            }
            counts[l] += 1;
        }
        let shots = counts[0];
        if shots == 0 || counts.iter().any(|&c| c != shots) {
            return Err(Error::InvalidSupport(format!(
                "every class needs the same nonzero shot count, got {counts:?}"
            )));
        }
        for (j, row) in features.row_iter().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidSupport(format!(
                    "row {j} has norm {n}, expected 1"
                )));
            }
        }
        let mut one_hot = Matrix::zeros(labels.len(), n_classes);
        for (j, &l) in labels.iter().enumerate() {
            one_hot.set(j, l, 1.0);
        }
        Ok(Self {
            features,
            labels,
            one_hot,
            n_classes,
            shots,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn one_hot(&self) -> &Matrix {
        &self.one_hot
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Refines category embeddings `w` (N × D) with the support set.
pub fn memory_attn_forward(
    params: &MemoryAdapterParams,
    w: &Matrix,
    support: &SupportSet,
) -> Result<Matrix> {
    memory_attn_trace(params, w, support).map(|(out, _)| out)
}

pub fn memory_attn_trace(
    params: &MemoryAdapterParams,
    w: &Matrix,
    support: &SupportSet,
) -> Result<(Matrix, AttnTrace)> {
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    if w.rows() != support.n_classes() {
        return Err(Error::DimensionMismatch {
            op: "memory adapter categories",
            left: w.shape(),
            right: support.one_hot().shape(),
        });
    }
    params.forward(w, support.features())
}

/// Refines a global image feature `g` with its local features `l` (M × D).
pub fn local_global_forward(
    params: &LocalGlobalAdapterParams,
    g: &[f64],
    l: &Matrix,
) -> Result<Vec<f64>> {
    local_global_trace(params, g, l).map(|(f, _)| f)
}

pub fn local_global_trace(
    params: &LocalGlobalAdapterParams,
    g: &[f64],
    l: &Matrix,
) -> Result<(Vec<f64>, AttnTrace)> {
    if l.rows() == 0 {
        return Err(Error::NoLocalFeatures);
    }
    let query = Matrix::from_vec(1, g.len(), g.to_vec())?;
    let (out, trace) = params.forward(&query, l)?;
    Ok((out.into_vec(), trace))
}

/// All trainable weights of both adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub memory: MemoryAdapterParams,
    pub local_global: LocalGlobalAdapterParams,
    /// Seed the parameters were initialized from.
    pub seed: u64,
}

impl AdapterParams {
    pub fn zeros(dim: usize, hidden: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            memory: CrossAttnAdapter::zeros(dim, hidden, heads)?,
            local_global: CrossAttnAdapter::zeros(dim, hidden, heads)?,
            seed: 0,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.memory.embed_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.memory.hidden_dim()
    }

    pub fn heads(&self) -> usize {
        self.memory.heads
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            memory: self.memory.zeros_like(),
            local_global: self.local_global.zeros_like(),
            seed: self.seed,
        }
    }

    /// Named parameter tensors in canonical order: (name, (rows, cols), data).
    pub fn tensors(&self) -> Vec<(String, (usize, usize), &[f64])> {
        let mut out = Vec::new();
        for (prefix, adapter) in [
            ("memory", &self.memory),
            ("local_global", &self.local_global),
        ] {
            for (layer_name, layer) in [
                ("query", &adapter.query),
                ("key", &adapter.key),
                ("gate", &adapter.gate),
            ] {
                out.push((
                    format!("{prefix}.{layer_name}.weight"),
                    layer.weight.shape(),
                    layer.weight.data(),
                ));
                if let Some(b) = &layer.bias {
                    out.push((
                        format!("{prefix}.{layer_name}.bias"),
                        (b.len(), 1),
                        b.as_slice(),
                    ));
                }
            }
        }
        out
    }

    /// Mutable views of the tensors, in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for adapter in [&mut self.memory, &mut self.local_global] {
            for layer in [&mut adapter.query, &mut adapter.key, &mut adapter.gate] {
                out.push(layer.weight.data_mut());
                if let Some(b) = &mut layer.bias {
                    out.push(b.as_mut_slice());
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (_, _, data) in self.tensors() {
            flat.extend_from_slice(data);
        }
        flat
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                op: "assign_flat",
                left: (self.param_count(), 1),
                right: (flat.len(), 1),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }
}

/// Initializes both adapters. Query/key weights (and the query bias) are
/// drawn uniformly from `[-1/sqrt(D), 1/sqrt(D)]`; both gating projectors are
/// zero so the adapters start as exact identities.
pub fn init_params(seed: u64, dim: usize, hidden: usize, heads: usize) -> Result<AdapterParams> {
    if dim == 0 || hidden == 0 {
        return Err(Error::InvalidConfig(format!(
            "adapter dims must be positive, got D={dim}, D_h={hidden}"
        )));
    }
    let mut params = AdapterParams::zeros(dim, hidden, heads)?;
    params.seed = seed;
    let bound = 1.0 / (dim as f64).sqrt();
    for (name, adapter) in [
        ("memory", &mut params.memory),
        ("local_global", &mut params.local_global),
    ] {
        let mut rng = seeding::rng(seeding::sub_seed(seed, name));
        for layer in [&mut adapter.query, &mut adapter.key] {
            for v in layer.weight.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
            if let Some(b) = &mut layer.bias {
                for v in b.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
    }
    Ok(params)
}
