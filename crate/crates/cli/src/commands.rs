use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use attn_adapter::adapters::init_params;
use attn_adapter::archive::{
    load_archive, load_checkpoint, save_archive, save_checkpoint, write_atomic, EmbeddingArchive,
};
use attn_adapter::episodes::{
    base_novel_split, per_class_zero_shot_accuracy, synth_dataset, SynthConfig,
};
use attn_adapter::losses::{LossConfig, TipConfig};
use attn_adapter::objective::{GradCheckProblem, ProblemDims};
use attn_adapter::seeding::{indexed_seed, sub_seed};
use attn_adapter::trainer::{self, evaluate_method, tip_hyperparam_search, Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::manifest::ManifestBuilder;
use crate::{EvalArgs, GradcheckArgs, MethodArg, Split, SynthArgs, TrainArgs};

pub const TIP_ALPHAS: [f64; 7] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
pub const TIP_BETAS: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 5.5, 8.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub name: String,
    pub accuracy: f64,
}

/// Contents of an `eval --report` file. Holds no timing information so that
/// reruns with the same flags are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub method: String,
    pub archive: String,
    pub split: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub per_class_acc: Vec<ClassAccuracy>,
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::All => "all",
        Split::Base => "base",
        Split::Novel => "novel",
    }
}

fn method_name(method: MethodArg) -> &'static str {
    match method {
        MethodArg::Attn => "attn",
        MethodArg::Tip => "tip",
        MethodArg::Zeroshot => "zeroshot",
    }
}

fn classes_for(archive: &EmbeddingArchive, split: Split) -> Result<Vec<usize>> {
    if split == Split::All {
        return Ok((0..archive.num_classes()).collect());
    }
    let acc = match &archive.per_class_zero_shot_acc {
        Some(acc) => acc.clone(),
        None => per_class_zero_shot_accuracy(archive)?,
    };
    let (base, novel) = base_novel_split(Some(&acc))?;
    Ok(if split == Split::Base { base } else { novel })
}

fn load_data(path: &Path) -> Result<EmbeddingArchive> {
    Ok(load_archive(path)?)
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig {
        seed: args.seed,
        n_classes: args.n_classes,
        shots: args.shots,
        queries: args.queries,
        dim: args.dim,
        locals: args.locals,
        ..SynthConfig::default()
    }
    .with_noise(args.noise);
    if let Some(t) = args.text_noise {
        cfg.text_noise = t;
    }
    let mut manifest = ManifestBuilder::new("synth", cfg)?;
    manifest.seed("seed", args.seed);
    for name in ["prototypes", "text", "images"] {
        manifest.seed(name, sub_seed(args.seed, name));
    }
    let archive = synth_dataset(&cfg)?;
    save_archive(&args.out, &archive)?;
    manifest.finish(&args.out, &[&args.out])?;
    Ok(())
}

fn history_path(args: &TrainArgs) -> PathBuf {
    args.history.clone().unwrap_or_else(|| {
        let mut name = args.out.file_name().unwrap_or_default().to_os_string();
        name.push(".history.jsonl");
        args.out.with_file_name(name)
    })
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let archive = load_data(&args.data)?;
    let classes = classes_for(&archive, args.split)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        weight_decay: args.weight_decay,
        seed: args.seed,
        shots: args.shots,
        loss: LossConfig {
            tau: args.tau,
            lambda: args.lambda,
        },
        hidden: args.hidden,
        heads: args.heads,
        fixed_support: args.fixed_support,
        classes: Some(classes),
    };
    let mut manifest = ManifestBuilder::new("train", &cfg)?;
    manifest.input(&args.data).seed("seed", args.seed);
    for name in ["init", "support", "batches"] {
        manifest.seed(name, sub_seed(args.seed, name));
    }

    let (params, history) = trainer::train(&archive, &cfg)?;
    let history_out = history_path(args);
    let mut lines = Vec::new();
    for record in &history {
        serde_json::to_writer(&mut lines, record)?;
        lines.push(b'\n');
    }
    save_checkpoint(&args.out, &params)?;
    write_atomic(&history_out, &lines)?;
    manifest.finish(&args.out, &[&args.out, &history_out])?;
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let archive = load_data(&args.data)?;
    let classes = classes_for(&archive, args.split)?;
    let mut manifest = ManifestBuilder::new("eval", args)?;
    manifest.input(&args.data).seed("seed", args.seed);
    manifest.seed("episode-class", sub_seed(args.seed, "episode-class"));

    let result = match args.method {
        MethodArg::Zeroshot => {
            evaluate_method(Method::ZeroShot, &archive, &classes, args.shots, args.seed)?
        }
        MethodArg::Tip => {
            let tip = match (args.alpha, args.beta) {
                (Some(alpha), Some(beta)) => TipConfig { alpha, beta },
                _ => {
                    tip_hyperparam_search(
                        &archive,
                        &classes,
                        &TIP_ALPHAS,
                        &TIP_BETAS,
                        args.shots,
                        args.seed,
                    )?
                    .config
                }
            };
            manifest.resolved("tip", tip)?;
            evaluate_method(Method::Tip(tip), &archive, &classes, args.shots, args.seed)?
        }
        MethodArg::Attn => {
            let params = match &args.checkpoint {
                Some(path) => {
                    manifest.input(path);
                    load_checkpoint(path)?
                }
                None => {
                    let init = sub_seed(args.seed, "init");
                    manifest.seed("init", init);
                    init_params(init, archive.dim(), archive.dim(), 1)?
                }
            };
            trainer::evaluate(&params, &archive, &classes, args.shots, args.seed)?
        }
    };

    let metrics = Metrics {
        method: method_name(args.method).to_string(),
        archive: args.data.display().to_string(),
        split: split_name(args.split).to_string(),
        k: args.shots,
        seed: args.seed,
        accuracy: result.accuracy,
        per_class_acc: classes
            .iter()
            .zip(&result.per_class_acc)
            .map(|(&c, &a)| ClassAccuracy {
                class: c,
                name: archive.class_names[c].clone(),
                accuracy: a,
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec_pretty(&metrics)?;
    bytes.push(b'\n');
    match &args.report {
        Some(path) => {
            write_atomic(path, &bytes)?;
            manifest.finish(path, &[path])?;
        }
        None => std::io::stdout().write_all(&bytes)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckLine {
    instance: u64,
    seed: u64,
    max_rel_error: f64,
    pass: bool,
}

/// Returns whether every instance stayed under the tolerance.
pub fn gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let dims = ProblemDims {
        n_classes: args.n_classes,
        shots: args.shots,
        dim: args.dim,
        hidden: args.hidden,
        locals: args.locals,
        heads: args.heads,
        queries: args.queries,
    };
    let loss = LossConfig {
        tau: args.tau,
        lambda: args.lambda,
    };
    let mut worst = 0.0f64;
    let mut out = std::io::stdout().lock();
    for i in 0..args.instances {
        let seed = indexed_seed(args.seed, "gradcheck", i);
        let problem = GradCheckProblem::random(seed, dims, loss)?;
        let err = problem.check(args.eps, args.corrupt_gradient)?;
        worst = worst.max(err);
        let line = GradcheckLine {
            instance: i,
            seed,
            max_rel_error: err,
            pass: err < args.tolerance,
        };
        serde_json::to_writer(&mut out, &line)?;
        writeln!(out)?;
    }
    let pass = worst < args.tolerance;
    writeln!(
        out,
        "{} max relative error {worst:.3e} over {} instance(s), tolerance {:.0e}",
        if pass { "PASS" } else { "FAIL" },
        args.instances,
        args.tolerance
    )?;
    Ok(pass)
}
