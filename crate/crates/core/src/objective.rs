//! Full training objective over a query batch with hand-derived backprop
//! through both adapters, the cosine logits, cross-entropy and the anchor
//! term.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::adapters::{
    init_params, local_global_trace, memory_attn_trace, AdapterParams, SupportSet,
};
use crate::error::{Error, Result};
use crate::losses::{argmax, l2_anchor, LossConfig};
use crate::numerics::{dot, grad_check, l2_normalize, log_sum_exp, norm, softmax_in_place, Matrix};
use crate::seeding;

/// One query image: global feature plus its local features.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub global: &'a [f64],
    pub locals: &'a Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLoss {
    /// Mean cross-entropy.
    pub ce: f64,
    /// Mean squared distance between refined and original global features.
    pub l2: f64,
    pub total: f64,
    pub correct: usize,
    pub count: usize,
}

struct Pass {
    loss: BatchLoss,
    refined: Matrix,
    memory_trace: crate::adapters::AttnTrace,
    lg: Vec<(Vec<f64>, crate::adapters::AttnTrace)>,
    /// Per query, softmax(logits / tau).
    probs: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
}

fn forward(
    params: &AdapterParams,
    categories: &Matrix,
    support: &SupportSet,
    queries: &[Query<'_>],
    targets: &[usize],
    cfg: &LossConfig,
) -> Result<Pass> {
    if queries.is_empty() || queries.len() != targets.len() {
        return Err(Error::InvalidConfig(format!(
            "batch needs matching nonempty queries/targets, got {}/{}",
            queries.len(),
            targets.len()
        )));
    }
    let n = categories.rows();
    let (refined, memory_trace) = memory_attn_trace(&params.memory, categories, support)?;
    let refined_norms: Vec<f64> = refined.row_iter().map(norm).collect();
    if refined_norms.contains(&0.0) {
        return Err(Error::ZeroNorm);
    }
    let batch = queries.len() as f64;
    let mut loss = BatchLoss {
        count: queries.len(),
        ..BatchLoss::default()
    };
    let mut lg = Vec::with_capacity(queries.len());
    let mut probs = Vec::with_capacity(queries.len());
    let mut all_logits = Vec::with_capacity(queries.len());
    for (q, &t) in queries.iter().zip(targets) {
        if t >= n {
            return Err(Error::InvalidTarget {
                index: t,
                classes: n,
            });
        }
        let (f, trace) = local_global_trace(&params.local_global, q.global, q.locals)?;
        let fnorm = norm(&f);
        if fnorm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let logits: Vec<f64> = refined
            .row_iter()
            .zip(&refined_norms)
            .map(|(w, wn)| dot(w, &f) / (wn * fnorm))
            .collect();
        let scaled: Vec<f64> = logits.iter().map(|l| l / cfg.tau).collect();
        loss.ce += (log_sum_exp(&scaled) - scaled[t]) / batch;
        loss.l2 += l2_anchor(&f, q.global)? / batch;
        if argmax(&logits) == t {
            loss.correct += 1;
        }
        let mut p = scaled;
        softmax_in_place(&mut p);
        probs.push(p);
        all_logits.push(logits);
        lg.push((f, trace));
    }
    loss.total = loss.ce + cfg.lambda * loss.l2;
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss(loss.total));
    }
    Ok(Pass {
        loss,
        refined,
        memory_trace,
        lg,
        probs,
        logits: all_logits,
    })
}

/// Evaluates the objective `L = CE + lambda * L2` on a batch.
pub fn batch_loss(
    params: &AdapterParams,
    categories: &Matrix,
    support: &SupportSet,
    queries: &[Query<'_>],
    targets: &[usize],
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    forward(params, categories, support, queries, targets, cfg).map(|p| p.loss)
}

/// Evaluates the objective and its gradient with respect to every adapter
/// parameter. The gradient is returned in the same layout as `params`.
pub fn batch_loss_and_grad(
    params: &AdapterParams,
    categories: &Matrix,
    support: &SupportSet,
    queries: &[Query<'_>],
    targets: &[usize],
    cfg: &LossConfig,
) -> Result<(BatchLoss, AdapterParams)> {
    let pass = forward(params, categories, support, queries, targets, cfg)?;
    let mut grad = params.zeros_like();
    let dim = categories.cols();
    let batch = queries.len() as f64;
    let mut d_refined = Matrix::zeros(categories.rows(), dim);
    let refined_norms: Vec<f64> = pass.refined.row_iter().map(norm).collect();

    for (b, (q, &t)) in queries.iter().zip(targets).enumerate() {
        let (f, trace) = &pass.lg[b];
        let fnorm = norm(f);
        let mut d_f: Vec<f64> = f
            .iter()
            .zip(q.global)
            .map(|(fi, gi)| 2.0 * cfg.lambda * (fi - gi) / batch)
            .collect();
        for (i, w) in pass.refined.row_iter().enumerate() {
            let target = if i == t { 1.0 } else { 0.0 };
            let d_logit = (pass.probs[b][i] - target) / (cfg.tau * batch);
            if d_logit == 0.0 {
                continue;
            }
            let c = pass.logits[b][i];
            let wn = refined_norms[i];
            // d cos(w, f) / dw = f / (|w||f|) - cos * w / |w|^2, symmetric in f
            let dw = d_refined.row_mut(i);
            for k in 0..dim {
                dw[k] += d_logit * (f[k] / (wn * fnorm) - c * w[k] / (wn * wn));
                d_f[k] += d_logit * (w[k] / (wn * fnorm) - c * f[k] / (fnorm * fnorm));
            }
        }
        let query = Matrix::from_vec(1, dim, q.global.to_vec())?;
        let d_out = Matrix::from_vec(1, dim, d_f)?;
        params
            .local_global
            .backward(&query, q.locals, trace, &d_out, &mut grad.local_global);
    }
    params.memory.backward(
        categories,
        support.features(),
        &pass.memory_trace,
        &d_refined,
        &mut grad.memory,
    );
    Ok((pass.loss, grad))
}

/// Shape of a randomly generated gradient-check instance.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProblemDims {
    pub n_classes: usize,
    pub shots: usize,
    pub dim: usize,
    pub hidden: usize,
    pub locals: usize,
    pub heads: usize,
    pub queries: usize,
}

impl Default for ProblemDims {
    fn default() -> Self {
        Self {
            n_classes: 5,
            shots: 3,
            dim: 8,
            hidden: 8,
            locals: 4,
            heads: 1,
            queries: 6,
        }
    }
}

/// A random small instance of the full objective, with non-zero gates so
/// every parameter receives gradient.
#[derive(Debug, Clone)]
pub struct GradCheckProblem {
    pub params: AdapterParams,
    pub categories: Matrix,
    pub support: SupportSet,
    pub globals: Vec<Vec<f64>>,
    pub locals: Vec<Matrix>,
    pub targets: Vec<usize>,
    pub loss: LossConfig,
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

fn random_units(rng: &mut impl Rng, rows: usize, dim: usize) -> Matrix {
    let rs: Vec<Vec<f64>> = (0..rows).map(|_| random_unit(rng, dim)).collect();
    Matrix::from_rows(&rs).expect("rows share a width")
}

impl GradCheckProblem {
    pub fn random(seed: u64, dims: ProblemDims, loss: LossConfig) -> Result<Self> {
        let mut params = init_params(
            seeding::sub_seed(seed, "init"),
            dims.dim,
            dims.hidden,
            dims.heads,
        )?;
        let mut rng = seeding::rng(seeding::sub_seed(seed, "gradcheck"));
        for adapter in [&mut params.memory, &mut params.local_global] {
            for v in adapter.gate.weight.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            if let Some(b) = &mut adapter.gate.bias {
                for v in b.iter_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        let categories = random_units(&mut rng, dims.n_classes, dims.dim);
        let s = dims.n_classes * dims.shots;
        let labels: Vec<usize> = (0..s).map(|j| j % dims.n_classes).collect();
        let support = SupportSet::new(random_units(&mut rng, s, dims.dim), labels, dims.n_classes)?;
        let globals = (0..dims.queries)
            .map(|_| random_unit(&mut rng, dims.dim))
            .collect();
        let locals = (0..dims.queries)
            .map(|_| random_units(&mut rng, dims.locals, dims.dim))
            .collect();
        let targets = (0..dims.queries)
            .map(|_| rng.random_range(0..dims.n_classes))
            .collect();
        Ok(Self {
            params,
            categories,
            support,
            globals,
            locals,
            targets,
            loss,
        })
    }

    fn queries(&self) -> Vec<Query<'_>> {
        self.globals
            .iter()
            .zip(&self.locals)
            .map(|(g, l)| Query {
                global: g,
                locals: l,
            })
            .collect()
    }

    pub fn loss_at(&self, flat: &[f64]) -> Result<f64> {
        let mut p = self.params.clone();
        p.assign_flat(flat)?;
        let queries = self.queries();
        Ok(batch_loss(
            &p,
            &self.categories,
            &self.support,
            &queries,
            &self.targets,
            &self.loss,
        )?
        .total)
    }

    pub fn analytic_gradient(&self) -> Result<Vec<f64>> {
        let queries = self.queries();
        let (_, grad) = batch_loss_and_grad(
            &self.params,
            &self.categories,
            &self.support,
            &queries,
            &self.targets,
            &self.loss,
        )?;
        Ok(grad.to_flat())
    }

    /// Maximum relative error between the analytic gradient and central
    /// differences. `corrupt` perturbs the analytic gradient as a negative
    /// control.
    pub fn check(&self, eps: f64, corrupt: bool) -> Result<f64> {
        let mut analytic = self.analytic_gradient()?;
        if corrupt {
            for (i, g) in analytic.iter_mut().enumerate() {
                if i % 7 == 0 {
                    *g = *g * 1.5 + 1e-3;
                }
            }
        }
        grad_check(|p| self.loss_at(p), &self.params.to_flat(), &analytic, eps)
    }
}
