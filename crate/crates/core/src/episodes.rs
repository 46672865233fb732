//! Synthetic archives, the base/novel split, and N-way K-shot episodes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::adapters::SupportSet;
use crate::archive::{EmbeddingArchive, Sample, VERSION};
use crate::error::{Error, Result};
use crate::losses::{argmax, zero_shot_logits};
use crate::numerics::{l2_normalize, Matrix};
use crate::seeding;

/// Default shot count.
pub const DEFAULT_SHOTS: usize = 16;

/// Generator settings for a synthetic embedding archive.
///
/// Noise levels are relative: the perturbation added to a unit prototype is
/// `noise * z` with `z ~ N(0, I/D)`, so its expected norm is about `noise`
/// regardless of `D`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_classes: usize,
    /// Samples per class reserved for support.
    pub shots: usize,
    /// Additional samples per class.
    pub queries: usize,
    pub dim: usize,
    pub locals: usize,
    /// Image-side noise on the global features (scaled down for the signal
    /// local row).
    pub noise: f64,
    /// Text-side noise on the category embeddings.
    pub text_noise: f64,
}

impl Default for SynthConfig {
    /// The standard fixture: 10 classes, 16 + 50 samples each, D = 64, M = 8.
    fn default() -> Self {
        Self {
            seed: 7,
            n_classes: 10,
            shots: 16,
            queries: 50,
            dim: 64,
            locals: 8,
            noise: STANDARD_NOISE,
            text_noise: STANDARD_TEXT_NOISE,
        }
    }
}

impl SynthConfig {
    /// Sets the image noise and scales the text noise in the standard
    /// proportion, so `with_noise(0.0)` is noiseless.
    pub fn with_noise(self, noise: f64) -> Self {
        Self {
            noise,
            text_noise: noise * STANDARD_TEXT_NOISE / STANDARD_NOISE,
            ..self
        }
    }
}

/// Image noise of the standard fixture. Together with
/// [`STANDARD_TEXT_NOISE`] this puts zero-shot accuracy in [0.55, 0.75].
pub const STANDARD_NOISE: f64 = 2.2;
pub const STANDARD_TEXT_NOISE: f64 = 1.5;

/// The signal local row is a cleaner view of the prototype than the pooled
/// global feature: its noise is `noise * SIGNAL_NOISE_RATIO`.
pub const SIGNAL_NOISE_RATIO: f64 = 0.5;

fn gaussian_direction(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    let s = scale / (dim as f64).sqrt();
    (0..dim)
        .map(|_| s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn noisy_unit(rng: &mut impl Rng, center: &[f64], noise: f64) -> Vec<f64> {
    loop {
        let z = gaussian_direction(rng, center.len(), noise);
        let v: Vec<f64> = center.iter().zip(&z).map(|(c, e)| c + e).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    noisy_unit(rng, &vec![0.0; dim], 1.0)
}

/// Generates a synthetic archive. Class prototypes are uniform on the unit
/// sphere; each image's global feature is a noisy view of its prototype;
/// one randomly placed local row is a less noisy view and the remaining
/// local rows are unit-norm distractors; category embeddings are noisy text
/// views of the prototypes. Values are rounded through `f32` so the
/// in-memory archive equals its on-disk form.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<EmbeddingArchive> {
    if cfg.n_classes < 2 || cfg.dim < 2 || cfg.locals == 0 {
        return Err(Error::InvalidConfig(format!(
            "synth needs N >= 2, D >= 2, M >= 1; got N={}, D={}, M={}",
            cfg.n_classes, cfg.dim, cfg.locals
        )));
    }
    if !(cfg.noise >= 0.0 && cfg.text_noise >= 0.0) {
        return Err(Error::InvalidConfig(
            "noise levels must be nonnegative".into(),
        ));
    }
    let mut proto_rng = seeding::rng(seeding::sub_seed(cfg.seed, "prototypes"));
    let mut text_rng = seeding::rng(seeding::sub_seed(cfg.seed, "text"));
    let mut image_rng = seeding::rng(seeding::sub_seed(cfg.seed, "images"));

    let prototypes: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| random_unit(&mut proto_rng, cfg.dim))
        .collect();
    let text: Vec<Vec<f64>> = prototypes
        .iter()
        .map(|p| noisy_unit(&mut text_rng, p, cfg.text_noise))
        .collect();

    let per_class = cfg.shots + cfg.queries;
    let mut samples = Vec::with_capacity(cfg.n_classes * per_class);
    for (label, proto) in prototypes.iter().enumerate() {
        for _ in 0..per_class {
            let global = noisy_unit(&mut image_rng, proto, cfg.noise);
            let signal_at = image_rng.random_range(0..cfg.locals);
            let rows: Vec<Vec<f64>> = (0..cfg.locals)
                .map(|m| {
                    if m == signal_at {
                        noisy_unit(&mut image_rng, proto, cfg.noise * SIGNAL_NOISE_RATIO)
                    } else {
                        random_unit(&mut image_rng, cfg.dim)
                    }
                })
                .collect();
            samples.push(Sample {
                global,
                locals: Matrix::from_rows(&rows)?,
                label,
            });
        }
    }

    let mut archive = EmbeddingArchive {
        version: VERSION,
        class_names: (0..cfg.n_classes)
            .map(|i| format!("class_{i:03}"))
            .collect(),
        category_embeddings: Matrix::from_rows(&text)?,
        samples,
        per_class_zero_shot_acc: None,
    };
    archive.quantize();
    archive.per_class_zero_shot_acc = Some(per_class_zero_shot_accuracy(&archive)?);
    archive.quantize();
    Ok(archive)
}

/// Zero-shot accuracy of each class over all of its samples.
pub fn per_class_zero_shot_accuracy(archive: &EmbeddingArchive) -> Result<Vec<f64>> {
    let n = archive.num_classes();
    let mut hits = vec![0usize; n];
    let mut totals = vec![0usize; n];
    for s in &archive.samples {
        let logits = zero_shot_logits(&s.global, &archive.category_embeddings)?;
        totals[s.label] += 1;
        if argmax(&logits) == s.label {
            hits[s.label] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect())
}

/// Splits classes at the median of their zero-shot accuracy: the easier
/// half (plus the middle class when N is odd) is `base`, the rest `novel`.
/// Ties go to the lower class index first.
pub fn base_novel_split(per_class_acc: Option<&[f64]>) -> Result<(Vec<usize>, Vec<usize>)> {
    let acc = per_class_acc.ok_or(Error::MissingAccuracies)?;
    let mut order: Vec<usize> = (0..acc.len()).collect();
    order.sort_by(|&a, &b| acc[b].total_cmp(&acc[a]).then(a.cmp(&b)));
    let novel = order.split_off(acc.len().div_ceil(2));
    Ok((order, novel))
}

/// One N-way K-shot task drawn from an archive.
#[derive(Debug, Clone)]
pub struct Episode {
    /// Archive class ids; local label `i` refers to `class_subset[i]`.
    pub class_subset: Vec<usize>,
    /// Category embeddings of the subset, in subset order.
    pub categories: Matrix,
    pub support: SupportSet,
    pub query_globals: Matrix,
    pub query_locals: Vec<Matrix>,
    pub query_labels: Vec<usize>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

impl Episode {
    pub fn num_queries(&self) -> usize {
        self.query_labels.len()
    }
}

/// Draws `shots` support samples per class by a seeded shuffle; every other
/// sample of those classes becomes a query. Each class's draw depends only
/// on `(seed, class id)`, not on its position in `class_subset`.
pub fn sample_episode(
    archive: &EmbeddingArchive,
    class_subset: &[usize],
    shots: usize,
    seed: u64,
) -> Result<Episode> {
    if class_subset.is_empty() {
        return Err(Error::InvalidConfig("empty class subset".into()));
    }
    if shots == 0 {
        return Err(Error::InvalidConfig("shot count must be positive".into()));
    }
    let n = archive.num_classes();
    let mut seen = vec![false; n];
    for &c in class_subset {
        if c >= n {
            return Err(Error::InvalidTarget {
                index: c,
                classes: n,
            });
        }
        if std::mem::replace(&mut seen[c], true) {
            return Err(Error::InvalidConfig(format!("class {c} listed twice")));
        }
    }
    let by_class = archive.indices_by_class();
    let mut support_indices = Vec::with_capacity(shots * class_subset.len());
    let mut support_labels = Vec::with_capacity(shots * class_subset.len());
    let mut query_indices = Vec::new();
    let mut query_labels = Vec::new();
    for (local, &c) in class_subset.iter().enumerate() {
        let mut idx = by_class[c].clone();
        if idx.len() <= shots {
            return Err(Error::InsufficientSamples {
                class: c,
                available: idx.len(),
                shots,
            });
        }
        idx.shuffle(&mut seeding::rng(seeding::indexed_seed(
            seed,
            "episode-class",
            c as u64,
        )));
        let queries = idx.split_off(shots);
        support_labels.extend(std::iter::repeat_n(local, idx.len()));
        support_indices.extend(idx);
        query_labels.extend(std::iter::repeat_n(local, queries.len()));
        query_indices.extend(queries);
    }
    let support_rows = support_indices
        .iter()
        .map(|&i| l2_normalize(&archive.samples[i].global))
        .collect::<Result<Vec<_>>>()?;
    let support = SupportSet::new(
        Matrix::from_rows(&support_rows)?,
        support_labels,
        class_subset.len(),
    )?;
    let query_globals = Matrix::from_rows(
        &query_indices
            .iter()
            .map(|&i| archive.samples[i].global.as_slice())
            .collect::<Vec<_>>(),
    )?;
    let query_locals = query_indices
        .iter()
        .map(|&i| archive.samples[i].locals.clone())
        .collect();
    Ok(Episode {
        class_subset: class_subset.to_vec(),
        categories: archive.category_embeddings.select_rows(class_subset),
        support,
        query_globals,
        query_locals,
        query_labels,
        support_indices,
        query_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, noise: f64) -> SynthConfig {
        SynthConfig {
            seed,
            n_classes: 4,
            shots: 3,
            queries: 5,
            dim: 8,
            locals: 3,
            noise,
            text_noise: noise,
        }
    }

    #[test]
    fn split_examples() {
        let (b, n) = base_novel_split(Some(&[0.9, 0.2, 0.5, 0.7])).unwrap();
        assert_eq!((b, n), (vec![0, 3], vec![2, 1]));
        let (b, n) = base_novel_split(Some(&[0.5; 4])).unwrap();
        assert_eq!((b, n), (vec![0, 1], vec![2, 3]));
        let (b, n) = base_novel_split(Some(&[0.3])).unwrap();
        assert_eq!((b, n), (vec![0], vec![]));
        let (b, n) = base_novel_split(Some(&[0.1, 0.2, 0.3])).unwrap();
        assert_eq!((b, n), (vec![2, 1], vec![0]));
        assert!(matches!(
            base_novel_split(None),
            Err(Error::MissingAccuracies)
        ));
    }

    #[test]
    fn synth_is_deterministic_and_valid() {
        let a = synth_dataset(&small(3, 0.5)).unwrap();
        let b = synth_dataset(&small(3, 0.5)).unwrap();
        let c = synth_dataset(&small(4, 0.5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
        assert_eq!(a.samples.len(), 4 * 8);
        assert_eq!(a.num_locals(), 3);
    }

    #[test]
    fn noiseless_synth_is_perfectly_separable() {
        let a = synth_dataset(&small(5, 0.0)).unwrap();
        assert_eq!(a.per_class_zero_shot_acc.as_deref(), Some(&[1.0; 4][..]));
    }

    #[test]
    fn episode_boundaries() {
        let cfg = SynthConfig {
            shots: 2,
            queries: 1,
            ..small(1, 0.3)
        };
        let a = synth_dataset(&cfg).unwrap();
        let ep = sample_episode(&a, &[0, 2], 2, 9).unwrap();
        assert_eq!(ep.num_queries(), 2);
        assert_eq!(ep.support.len(), 4);
        assert_eq!(ep.query_labels, vec![0, 1]);
        assert!(matches!(
            sample_episode(&a, &[0], 3, 9),
            Err(Error::InsufficientSamples {
                class: 0,
                available: 3,
                shots: 3
            })
        ));
        assert!(sample_episode(&a, &[0, 0], 1, 9).is_err());
        assert!(sample_episode(&a, &[9], 1, 9).is_err());
    }

    #[test]
    fn episode_draws_are_order_independent() {
        let a = synth_dataset(&small(2, 0.3)).unwrap();
        let e1 = sample_episode(&a, &[1, 3], 3, 11).unwrap();
        let e2 = sample_episode(&a, &[3, 1], 3, 11).unwrap();
        let e3 = sample_episode(&a, &[1, 3], 3, 11).unwrap();
        assert_eq!(e1.support_indices, e3.support_indices);
        assert_eq!(&e1.support_indices[..3], &e2.support_indices[3..]);
    }

    #[test]
    fn support_and_query_are_disjoint() {
        for seed in 0..20 {
            let a = synth_dataset(&small(seed, 0.4)).unwrap();
            let ep = sample_episode(&a, &[0, 1, 2, 3], 3, seed * 31).unwrap();
            let mut all: Vec<usize> = ep
                .support_indices
                .iter()
                .chain(&ep.query_indices)
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..a.samples.len()).collect::<Vec<_>>());
            let mut hist = [0usize; 4];
            for &l in ep.support.labels() {
                hist[l] += 1;
            }
            assert_eq!(hist, [3; 4]);
        }
    }
}
