//! Training loop wiring: per-step graph construction (distances,
//! logits, assignment, batch prototypes, all loss terms), SGD +
//! momentum-bank updates, per-epoch validation and checkpointing, and
//! the finite-difference gradient audit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{sgd_step, Backbone, OptimizerState, DOWNSAMPLE_FACTOR};
use crate::checkpoint::Checkpoint;
use crate::classifier::{class_logits, pairwise_distances, predict};
use crate::config::RunConfig;
use crate::data::{load_manifest, load_sample, Manifest, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, dice_loss, loss_fp1, loss_fp2, loss_pp1, loss_pp2, total_loss, LossReport,
    LossTerms, LossWeights,
};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::prototype::{
    batch_prototypes, downsample_labels, extract_centers, gumbel_assign, sample_gumbel,
    split_patches, PrototypeBank, SoftMask, IGNORE_INDEX,
};
use crate::scalar::Scalar;
use crate::tensor::ops::stack;
use crate::tensor::{finite_diff_check, Tensor};

/// How centers are routed to sub-prototypes inside the step graph.
/// `Hard` is the training path: Gumbel noise plus straight-through
/// one-hot rows. `Soft` drops the noise and uses the softmax weights
/// directly, which finite differences can see; the gradient audit runs
/// in this mode.
pub enum AssignMode<'a> {
    Hard(&'a mut ChaCha8Rng),
    Soft,
}

/// Everything one optimization step produces before `backward`.
pub struct StepGraph<T: Scalar> {
    pub total: Tensor<T>,
    pub terms: LossTerms<T>,
    pub report: LossReport,
    /// Per-class detached batch prototypes + assignment counts, applied
    /// to the bank after the optimizer step (training mode only).
    pub updates: Vec<(usize, Vec<T>, Vec<usize>)>,
    pub ce_warned: bool,
}

fn loss_weights<T: Scalar>(cfg: &RunConfig) -> LossWeights<T> {
    LossWeights {
        lambda_pp: T::from_f64(if cfg.baseline { 0.0 } else { cfg.lambda_pp }),
        lambda_fp: T::from_f64(if cfg.baseline { 0.0 } else { cfg.lambda_fp }),
        lambda_dice: T::from_f64(cfg.lambda_dice),
        margin: T::from_f64(cfg.margin),
    }
}

/// Soft-weighted analogue of `batch_prototypes`: rows are softmax-mass
/// weighted means of the centers.
fn soft_prototypes<T: Scalar>(soft: &Tensor<T>, centers: &Tensor<T>) -> Result<Tensor<T>> {
    let m = soft.shape()[1];
    let c = centers.shape()[1];
    let sums = soft.transpose2d()?.matmul(centers)?; // [m, C]
    let mass = soft.sum_axis(0)?; // [m]
    // expand the per-row mass to [m, C] so the division is elementwise
    let ones = Tensor::new(vec![T::one(); c], &[1, c])?;
    let denom = mass.reshape(&[m, 1])?.matmul(&ones)?;
    sums.div(&denom)
}

/// Builds the full loss graph for one batch of feature maps. Feature
/// tensors must share the caller's parameter leaves when gradients are
/// wanted.
pub fn build_step_graph<T: Scalar>(
    features: &[Tensor<T>],
    masks: &[SoftMask<T>],
    bank: &PrototypeBank<T>,
    cfg: &RunConfig,
    mut mode: AssignMode,
) -> Result<StepGraph<T>> {
    if features.is_empty() || features.len() != masks.len() {
        return Err(Error::Contract("batch features/masks mismatch".into()));
    }
    let batch = features.len();
    let k = bank.num_classes;
    let m = bank.per_class;
    let inv_b = T::one() / T::from_f64(batch as f64);
    let weights = loss_weights::<T>(cfg);
    let alpha = T::from_f64(cfg.alpha);
    let tau = T::from_f64(cfg.temperature);

    // ---- pixel losses, per sample against the frozen bank
    let mut ce_acc = Tensor::scalar(T::zero());
    let mut dice_acc = Tensor::scalar(T::zero());
    let mut fp1_acc = Tensor::scalar(T::zero());
    let mut fp2_acc = Tensor::scalar(T::zero());
    let mut ce_warned = false;
    for (f, mask) in features.iter().zip(masks) {
        let dist = pairwise_distances(f, bank)?;
        let logits = class_logits(&dist, (k, m), alpha)?;
        let (ce, warned) = cross_entropy(&logits, mask)?;
        ce_warned |= warned;
        ce_acc = ce_acc.add(&ce)?;
        dice_acc = dice_acc.add(&dice_loss(&logits.softmax_axis(0)?, mask)?)?;
        if weights.lambda_fp > T::zero() {
            fp1_acc = fp1_acc.add(&loss_fp1(&dist, mask, m)?)?;
            fp2_acc = fp2_acc.add(&loss_fp2(&dist, mask, m, weights.margin)?)?;
        }
    }
    let ce = ce_acc.mul_scalar(inv_b);
    let dice = dice_acc.mul_scalar(inv_b);
    let fp1 = fp1_acc.mul_scalar(inv_b);
    let fp2 = fp2_acc.mul_scalar(inv_b);

    // ---- class centers across the batch
    let mut center_tensors = Vec::with_capacity(batch);
    let mut validity = Vec::with_capacity(batch);
    let mut patches_per_sample = 0usize;
    for (f, mask) in features.iter().zip(masks) {
        let (patches, mpatches) = split_patches(f, mask, cfg.grid_rows, cfg.grid_cols)?;
        let cc = extract_centers(&patches, &mpatches)?;
        patches_per_sample = mpatches.num_patches;
        center_tensors.push(cc.centers);
        validity.push(cc.validity);
    }
    let c = bank.feature_dim;
    let n = patches_per_sample;
    let all_centers = stack(&center_tensors)?.reshape(&[batch * k * n, c])?;

    // ---- assignment and effective per-class prototype blocks
    let mut blocks: Vec<Tensor<T>> = Vec::with_capacity(k);
    let mut updates: Vec<(usize, Vec<T>, Vec<usize>)> = Vec::new();
    let need_pp = weights.lambda_pp > T::zero();
    for kk in 0..k {
        let rows: Vec<usize> = (0..batch)
            .flat_map(|b| {
                let v = &validity[b];
                (0..n)
                    .filter(move |&p| v[kk * n + p])
                    .map(move |p| (b * k + kk) * n + p)
            })
            .collect();
        if rows.is_empty() {
            if need_pp {
                blocks.push(bank.class_tensor(kk));
            }
            continue;
        }
        let centers_k = all_centers.select_axis0(&rows)?;
        let proto_k = bank.class_tensor(kk);
        match &mut mode {
            AssignMode::Hard(rng) => {
                let noise: Vec<T> = sample_gumbel(rng, rows.len() * m);
                let assign = gumbel_assign(&centers_k, &proto_k, Some(&noise), tau)?;
                let (p_hat, counts) = batch_prototypes(&assign, &centers_k)?;
                updates.push((kk, p_hat.data().to_vec(), counts.clone()));
                if need_pp {
                    // empty slots keep their bank rows so the block
                    // stays full rank
                    let mut fill = vec![T::zero(); m * c];
                    for (i, &cnt) in counts.iter().enumerate() {
                        if cnt == 0 {
                            for ch in 0..c {
                                fill[i * c + ch] = bank.data[(kk * m + i) * c + ch];
                            }
                        }
                    }
                    blocks.push(p_hat.add(&Tensor::new(fill, &[m, c])?)?);
                }
            }
            AssignMode::Soft => {
                let assign = gumbel_assign(&centers_k, &proto_k, None, tau)?;
                let p_hat = soft_prototypes(&assign.soft, &centers_k)?;
                if need_pp {
                    blocks.push(p_hat);
                }
            }
        }
    }
    let (pp1, pp2) = if need_pp {
        (loss_pp1(&blocks)?, loss_pp2(&blocks)?)
    } else {
        (Tensor::scalar(T::zero()), Tensor::scalar(T::zero()))
    };

    let terms = LossTerms { ce, dice, pp1, pp2, fp1, fp2 };
    let (total, report) = total_loss(&terms, &weights)?;
    Ok(StepGraph { total, terms, report, updates, ce_warned })
}

// ------------------------------------------------------------- evaluation

/// Nearest-neighbour upsampling of a feature-resolution label map back
/// to pixel resolution.
pub fn upsample_labels(pred: &[usize], fh: usize, fw: usize, factor: usize) -> Vec<u8> {
    let (h, w) = (fh * factor, fw * factor);
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = pred[(y / factor) * fw + x / factor] as u8;
        }
    }
    out
}

pub fn predict_sample<T: Scalar>(
    backbone: &Backbone<T>,
    bank: &PrototypeBank<T>,
    sample: &Sample<T>,
) -> Result<Vec<u8>> {
    let image = Tensor::new(sample.image.clone(), &[3, sample.height, sample.width])?;
    let features = backbone.forward(&image)?;
    let s = features.shape();
    let pred = predict(&features, bank)?;
    Ok(upsample_labels(&pred, s[1], s[2], DOWNSAMPLE_FACTOR))
}

pub fn evaluate<T: Scalar>(
    backbone: &Backbone<T>,
    bank: &PrototypeBank<T>,
    manifest: &Manifest,
    split: &str,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    if manifest.spec.num_classes != bank.num_classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            bank.num_classes, manifest.spec.num_classes
        )));
    }
    let count = manifest.split(split)?.len();
    let mut cm = ConfusionMatrix::new(bank.num_classes);
    for idx in 0..count {
        let sample: Sample<T> = load_sample(manifest, split, idx)?;
        let pred = predict_sample(backbone, bank, &sample)?;
        cm.accumulate(&pred, &sample.labels)?;
    }
    let report = cm.compute()?;
    Ok((cm, report))
}

// --------------------------------------------------------------- training

fn mix_seed(seed: u64, epoch: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct TrainArtifacts {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    /// (epoch, val mIoU) per completed epoch.
    pub val_history: Vec<(usize, f64)>,
}

/// Runs (or resumes) training and returns the final state. Single
/// threaded and fully deterministic given the config.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<(Checkpoint<T>, TrainArtifacts)> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let manifest = load_manifest(Path::new(&cfg.dataset))?;
    if manifest.spec.num_classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "config has {} classes, dataset has {}",
            cfg.num_classes, manifest.spec.num_classes
        )));
    }

    let m = cfg.effective_per_class();
    let (mut backbone, mut bank, mut opt, start_epoch) = match resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            if ck.config.to_text() != cfg.to_text() {
                return Err(Error::Config(
                    "resume config differs from checkpoint config".into(),
                ));
            }
            (ck.backbone, ck.bank, ck.optimizer, ck.epoch as usize)
        }
        None => {
            let backbone = Backbone::<T>::init(cfg.seed, cfg.feature_dim);
            let bank = PrototypeBank::<T>::init(
                cfg.num_classes,
                m,
                cfg.feature_dim,
                cfg.seed,
                T::from_f64(cfg.momentum),
            );
            let opt = OptimizerState::new(
                &backbone,
                T::from_f64(cfg.lr),
                T::from_f64(cfg.weight_decay),
            );
            (backbone, bank, opt, 0usize)
        }
    };

    let log_path = out_dir.join("loss.csv");
    let checkpoint_path = out_dir.join("checkpoint.ckpt");
    let mut log = String::new();
    if start_epoch == 0 {
        // header records the effective run configuration
        for line in cfg.to_text().lines() {
            let _ = writeln!(log, "# {}", line);
        }
        if cfg.baseline {
            let _ = writeln!(log, "# effective lambda_pp=0 lambda_fp=0 (baseline)");
        }
        let _ = writeln!(log, "step,ce,dice,pp1,pp2,fp1,fp2,total");
    } else {
        if !log_path.exists() {
            return Err(Error::Contract("resume requires the existing loss log".into()));
        }
        log = std::fs::read_to_string(&log_path)?;
        if !log.ends_with('\n') && !log.is_empty() {
            log.push('\n');
        }
    }

    let train_count = manifest.split("train")?.len();
    if train_count == 0 {
        return Err(Error::Contract("empty training split".into()));
    }
    let steps_per_epoch = train_count.div_ceil(cfg.batch_size);
    let mut val_history = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..train_count).collect();
        for i in (1..train_count).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + b;
            let bound = backbone.bind()?;
            let mut feats = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let sample: Sample<T> = load_sample(&manifest, "train", idx)?;
                let image =
                    Tensor::new(sample.image.clone(), &[3, sample.height, sample.width])?;
                feats.push(bound.forward(&image)?);
                masks.push(downsample_labels(
                    &sample.labels,
                    sample.height,
                    sample.width,
                    cfg.num_classes,
                    DOWNSAMPLE_FACTOR,
                    IGNORE_INDEX,
                )?);
            }
            let graph =
                build_step_graph(&feats, &masks, &bank, cfg, AssignMode::Hard(&mut rng))?;
            if !graph.report.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {}: {:?}",
                    step, graph.report
                )));
            }
            graph.total.backward()?;
            let grads = bound.grads()?;
            sgd_step(&mut backbone, &grads, &mut opt)?;
            for (kk, data, counts) in &graph.updates {
                bank.momentum_update(*kk, data, counts)?;
            }
            let r = &graph.report;
            let _ = writeln!(
                log,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                step, r.ce, r.dice, r.pp1, r.pp2, r.fp1, r.fp2, r.total
            );
        }
        // per-epoch validation + checkpoint
        if manifest.split("val")?.is_empty() {
            let _ = writeln!(log, "# epoch {} (no val split)", epoch);
        } else {
            let (_, report) = evaluate(&backbone, &bank, &manifest, "val")?;
            let _ = writeln!(log, "# epoch {} val_miou={:.6}", epoch, report.miou);
            val_history.push((epoch, report.miou));
        }
        let ck = Checkpoint {
            config: cfg.clone(),
            epoch: (epoch + 1) as u32,
            backbone,
            bank,
            optimizer: opt,
        };
        ck.save(&checkpoint_path)?;
        std::fs::write(&log_path, &log)?;
        backbone = ck.backbone;
        bank = ck.bank;
        opt = ck.optimizer;
    }

    let ck = Checkpoint {
        config: cfg.clone(),
        epoch: cfg.epochs as u32,
        backbone,
        bank,
        optimizer: opt,
    };
    // ensure a checkpoint exists even for zero-epoch runs
    ck.save(&checkpoint_path)?;
    Ok((ck, TrainArtifacts { checkpoint_path, log_path, val_history }))
}

// ------------------------------------------------------------- grad audit

/// Relative finite-difference error of every loss term and the
/// composite, on a seeded 2-class instance with an 8x8 feature map.
/// All differentiation runs through the soft assignment path; the
/// straight-through surrogate is validated separately by its exact
/// gradient-identity contract.
pub fn grad_check_report() -> Result<Vec<(&'static str, f64)>> {
    let (k, m, c, h, w) = (2usize, 2usize, 8usize, 8usize, 8usize);
    let mut rng = ChaCha8Rng::seed_from_u64(424242);
    let feat0: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let features = Tensor::new(feat0, &[c, h, w])?;
    // left half class 0, right half class 1: both classes span several
    // patches so the soft blocks stay full rank
    let labels: Vec<u8> = (0..h * w).map(|i| if i % w < w / 2 { 0 } else { 1 }).collect();
    let mask = downsample_labels(&labels, h, w, k, 1, IGNORE_INDEX)?;
    let mut bank = PrototypeBank::<f64>::init(k, m, c, 7, 0.999);
    for v in bank.data.iter_mut() {
        *v = *v + rng.gen_range(-0.05..0.05);
    }
    let mut cfg = RunConfig {
        num_classes: k,
        per_class: m,
        feature_dim: c,
        ..RunConfig::default()
    };
    cfg.seed = 3;

    let term = |name: &'static str, idx: usize| -> (
        &'static str,
        Box<dyn Fn(&Tensor<f64>) -> crate::error::Result<Tensor<f64>>>,
    ) {
        let bank = bank_clone(&bank);
        let mask = mask.clone();
        let cfg = cfg.clone();
        (
            name,
            Box::new(move |f: &Tensor<f64>| {
                let g = build_step_graph(
                    std::slice::from_ref(f),
                    std::slice::from_ref(&mask),
                    &bank,
                    &cfg,
                    AssignMode::Soft,
                )?;
                Ok(match idx {
                    0 => g.terms.ce,
                    1 => g.terms.dice,
                    2 => g.terms.pp1,
                    3 => g.terms.pp2,
                    4 => g.terms.fp1,
                    5 => g.terms.fp2,
                    _ => g.total,
                })
            }),
        )
    };
    let cases = [
        term("ce", 0),
        term("dice", 1),
        term("pp1", 2),
        term("pp2", 3),
        term("fp1", 4),
        term("fp2", 5),
        term("total", 6),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (name, f) in cases {
        let err = finite_diff_check(move |x| f(x), &features, 1e-6)?;
        out.push((name, err));
    }
    Ok(out)
}

fn bank_clone<T: Scalar>(bank: &PrototypeBank<T>) -> PrototypeBank<T> {
    PrototypeBank {
        num_classes: bank.num_classes,
        per_class: bank.per_class,
        feature_dim: bank.feature_dim,
        momentum: bank.momentum,
        data: bank.data.clone(),
        update_counts: bank.update_counts.clone(),
    }
}
