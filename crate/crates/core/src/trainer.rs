//! Training the adapters and scoring any of the three classifiers on an
//! episode.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_params, local_global_forward, memory_attn_forward, AdapterParams};
use crate::archive::EmbeddingArchive;
use crate::episodes::{sample_episode, Episode, DEFAULT_SHOTS};
use crate::error::{Error, Result};
use crate::losses::{
    adapter_logits, argmax, cross_entropy, l2_anchor, tip_adapter_logits, zero_shot_logits,
    LossConfig, TipConfig,
};
use crate::numerics::{dot, norm, Matrix};
use crate::objective::{batch_loss, batch_loss_and_grad, Query};
use crate::optim::{AdamW, CosineSchedule};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub shots: usize,
    pub loss: LossConfig,
    /// Attention width; `None` means the embedding dim.
    pub hidden: Option<usize>,
    pub heads: usize,
    /// Keep the epoch-0 support set for every epoch instead of resampling.
    pub fixed_support: bool,
    /// Classes to train on; `None` means all of them.
    pub classes: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-2,
            weight_decay: 1e-2,
            seed: 0,
            shots: DEFAULT_SHOTS,
            loss: LossConfig::default(),
            hidden: None,
            heads: 1,
            fixed_support: false,
            classes: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.shots == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig(
                "batch size, shot count and head count must be positive".into(),
            ));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "weight decay must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// One line of training history. Epoch 0 describes the initial parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

fn queries_of(episode: &Episode) -> Vec<Query<'_>> {
    episode
        .query_locals
        .iter()
        .enumerate()
        .map(|(i, l)| Query {
            global: episode.query_globals.row(i),
            locals: l,
        })
        .collect()
}

fn training_episode(
    archive: &EmbeddingArchive,
    classes: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Episode> {
    let index = if cfg.fixed_support { 0 } else { epoch as u64 };
    sample_episode(
        archive,
        classes,
        cfg.shots,
        seeding::indexed_seed(cfg.seed, "support", index),
    )
}

/// Trains both adapters from a fresh initialization. Returns the final
/// parameters and one record per epoch, starting with epoch 0 (untrained).
pub fn train(
    archive: &EmbeddingArchive,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, Vec<EpochRecord>)> {
    cfg.validate()?;
    let classes: Vec<usize> = cfg
        .classes
        .clone()
        .unwrap_or_else(|| (0..archive.num_classes()).collect());
    let dim = archive.dim();
    let mut params = init_params(
        seeding::sub_seed(cfg.seed, "init"),
        dim,
        cfg.hidden.unwrap_or(dim),
        cfg.heads,
    )?;

    let first = training_episode(archive, &classes, cfg, 0)?;
    let steps_per_epoch = first.num_queries().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        total_steps: cfg.epochs * steps_per_epoch,
    };

    let initial = {
        let queries = queries_of(&first);
        let mut loss = 0.0;
        let mut correct = 0;
        for (qs, ts) in queries
            .chunks(cfg.batch_size)
            .zip(first.query_labels.chunks(cfg.batch_size))
        {
            let b = batch_loss(
                &params,
                &first.categories,
                &first.support,
                qs,
                ts,
                &cfg.loss,
            )?;
            loss += b.total * b.count as f64;
            correct += b.correct;
        }
        EpochRecord {
            epoch: 0,
            lr: schedule.lr_at(0),
            loss: loss / queries.len() as f64,
            train_acc: correct as f64 / queries.len() as f64,
        }
    };
    let mut history = vec![initial];

    let mut opt = AdamW::new(params.param_count(), cfg.weight_decay);
    let mut flat = params.to_flat();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let episode = training_episode(archive, &classes, cfg, epoch)?;
        let queries = queries_of(&episode);
        let mut order: Vec<usize> = (0..queries.len()).collect();
        order.shuffle(&mut seeding::rng(seeding::indexed_seed(
            cfg.seed,
            "batches",
            epoch as u64,
        )));

        let epoch_lr = schedule.lr_at(step);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let qs: Vec<Query<'_>> = chunk.iter().map(|&i| queries[i]).collect();
            let ts: Vec<usize> = chunk.iter().map(|&i| episode.query_labels[i]).collect();
            let (loss, grad) = match batch_loss_and_grad(
                &params,
                &episode.categories,
                &episode.support,
                &qs,
                &ts,
                &cfg.loss,
            ) {
                Ok(v) => v,
                Err(Error::NonFiniteLoss(l)) => {
                    return Err(Error::Diverged {
                        epoch,
                        step: batch_no,
                        loss: l,
                    })
                }
                Err(e) => return Err(e),
            };
            opt.step(&mut flat, &grad.to_flat(), schedule.lr_at(step));
            params.assign_flat(&flat)?;
            if !params.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: batch_no,
                    loss: loss.total,
                });
            }
            loss_sum += loss.total * loss.count as f64;
            correct += loss.correct;
            step += 1;
        }
        history.push(EpochRecord {
            epoch,
            lr: epoch_lr,
            loss: loss_sum / queries.len() as f64,
            train_acc: correct as f64 / queries.len() as f64,
        });
    }
    Ok((params, history))
}

/// The classifier to score an episode with.
#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    ZeroShot,
    Tip(TipConfig),
    Attn(&'a AdapterParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub accuracy: f64,
    /// Mean objective over the queries under the default loss settings
    /// (the anchor term is zero for methods without adapters).
    pub mean_loss: f64,
    /// Accuracy per class, in the caller's class order.
    pub per_class_acc: Vec<f64>,
    /// Predicted archive class id per query.
    pub predictions: Vec<usize>,
    /// True archive class id per query.
    pub labels: Vec<usize>,
}

struct Scored {
    logits: Vec<f64>,
    anchor: f64,
}

fn score_queries(method: Method<'_>, episode: &Episode) -> Result<Vec<Scored>> {
    let refined = match method {
        Method::Attn(p) => Some(memory_attn_forward(
            &p.memory,
            &episode.categories,
            &episode.support,
        )?),
        _ => None,
    };
    (0..episode.num_queries())
        .into_par_iter()
        .map(|i| {
            let g = episode.query_globals.row(i);
            match method {
                Method::ZeroShot => Ok(Scored {
                    logits: zero_shot_logits(g, &episode.categories)?,
                    anchor: 0.0,
                }),
                Method::Tip(cfg) => Ok(Scored {
                    logits: tip_adapter_logits(g, &episode.categories, &episode.support, cfg)?,
                    anchor: 0.0,
                }),
                Method::Attn(p) => {
                    let f = local_global_forward(&p.local_global, g, &episode.query_locals[i])?;
                    Ok(Scored {
                        logits: adapter_logits(&f, refined.as_ref().expect("refined for attn"))?,
                        anchor: l2_anchor(&f, g)?,
                    })
                }
            }
        })
        .collect()
}

/// Samples one episode over `classes` and scores its queries with `method`.
///
/// Classes are processed in ascending id order so the result does not
/// depend on how the caller orders them; `per_class_acc` follows the
/// caller's order.
pub fn evaluate_method(
    method: Method<'_>,
    archive: &EmbeddingArchive,
    classes: &[usize],
    shots: usize,
    seed: u64,
) -> Result<EpisodeResult> {
    if let Method::Tip(cfg) = method {
        cfg.validate()?;
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    let episode = sample_episode(archive, &sorted, shots, seed)?;
    let scored = score_queries(method, &episode)?;
    let loss_cfg = LossConfig::default();
    let logits = Matrix::from_rows(
        &scored
            .iter()
            .map(|s| s.logits.as_slice())
            .collect::<Vec<_>>(),
    )?;
    let ce = cross_entropy(&logits, &episode.query_labels, loss_cfg.tau)?;
    let anchor = scored.iter().map(|s| s.anchor).sum::<f64>() / scored.len() as f64;

    let predictions: Vec<usize> = scored.iter().map(|s| sorted[argmax(&s.logits)]).collect();
    let labels: Vec<usize> = episode.query_labels.iter().map(|&l| sorted[l]).collect();
    let mut hits = vec![0usize; archive.num_classes()];
    let mut totals = vec![0usize; archive.num_classes()];
    for (p, l) in predictions.iter().zip(&labels) {
        totals[*l] += 1;
        if p == l {
            hits[*l] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(EpisodeResult {
        accuracy: correct as f64 / labels.len() as f64,
        mean_loss: ce + loss_cfg.lambda * anchor,
        per_class_acc: classes
            .iter()
            .map(|&c| hits[c] as f64 / totals[c] as f64)
            .collect(),
        predictions,
        labels,
    })
}

/// Scores frozen adapter parameters on a freshly sampled episode.
pub fn evaluate(
    params: &AdapterParams,
    archive: &EmbeddingArchive,
    classes: &[usize],
    shots: usize,
    seed: u64,
) -> Result<EpisodeResult> {
    if params.embed_dim() != archive.dim() {
        return Err(Error::DimensionMismatch {
            op: "evaluate",
            left: (params.embed_dim(), params.hidden_dim()),
            right: archive.category_embeddings.shape(),
        });
    }
    evaluate_method(Method::Attn(params), archive, classes, shots, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TipSearchResult {
    pub config: TipConfig,
    pub accuracy: f64,
}

/// Exhaustive grid search of the cache-model hyperparameters on the query
/// split of one episode. Ties go to the smaller alpha, then smaller beta.
pub fn tip_hyperparam_search(
    archive: &EmbeddingArchive,
    classes: &[usize],
    alphas: &[f64],
    betas: &[f64],
    shots: usize,
    seed: u64,
) -> Result<TipSearchResult> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::InvalidConfig(
            "tip search grids must be nonempty".into(),
        ));
    }
    let mut alphas = alphas.to_vec();
    let mut betas = betas.to_vec();
    alphas.sort_by(f64::total_cmp);
    betas.sort_by(f64::total_cmp);
    for &a in &alphas {
        for &b in &betas {
            TipConfig { alpha: a, beta: b }.validate()?;
        }
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    let episode = sample_episode(archive, &sorted, shots, seed)?;

    // Per query: zero-shot logits and the support affinities.
    let cached: Vec<(Vec<f64>, Vec<f64>)> = (0..episode.num_queries())
        .map(|i| {
            let g = episode.query_globals.row(i);
            let gn = norm(g);
            let aff = episode
                .support
                .features()
                .row_iter()
                .map(|r| dot(r, g) / gn)
                .collect();
            Ok((zero_shot_logits(g, &episode.categories)?, aff))
        })
        .collect::<Result<_>>()?;

    let mut best: Option<TipSearchResult> = None;
    for &alpha in &alphas {
        for &beta in &betas {
            let mut correct = 0usize;
            for ((zs, aff), &label) in cached.iter().zip(&episode.query_labels) {
                let mut logits = zs.clone();
                for (a, &l) in aff.iter().zip(episode.support.labels()) {
                    logits[l] += alpha * (-beta * (1.0 - a)).exp();
                }
                if argmax(&logits) == label {
                    correct += 1;
                }
            }
            let accuracy = correct as f64 / cached.len() as f64;
            if best.is_none_or(|b| accuracy > b.accuracy) {
                best = Some(TipSearchResult {
                    config: TipConfig { alpha, beta },
                    accuracy,
                });
            }
        }
    }
    Ok(best.expect("grids are nonempty"))
}
