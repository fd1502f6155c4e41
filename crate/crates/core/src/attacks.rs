//! Gradient attack baselines (FGSM, PGD, MI-FGSM) and the training loops
//! for classifiers and the perturbation generator.
//!
//! All attacks maximize cross-entropy of the clean *predicted* label,
//! matching the fooling-rate metric's reference point, and every emitted
//! image satisfies the L-inf budget and pixel bounds exactly.
//!
//! Generator training: per batch the generator output passes through the
//! robustness module and into every frozen target; per-target losses are
//! fused with positive weights and gradients sum at the shared
//! parameters. In training-filter mode the filter takes one ascent step
//! per generator descent step, learning to undo the perturbation while
//! the generator learns to survive the filter.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::GradResult;
use crate::losses::{
    loss_ensemble, loss_feature, loss_feature_grad, loss_prediction_with_grad, loss_threshold,
    loss_threshold_gate, LossConfig, LossKind,
};
use crate::nets::{ClassifierModel, FilterModel, GeneratorModel};
use crate::rng::{shuffled_indices, RngStream};
use crate::robust::{apply_branch, choose_branch, Phase, RobustBranch, RobustConfig, RobustMode};
use crate::tensor::Tensor;
use crate::project_pixel_step;

/// Gradient attack hyperparameters: budget, iterations, step size, and
/// momentum decay, all in pixel units on the `[0, 255]` scale.
#[derive(Debug, Clone, Copy)]
pub struct AttackConfig {
    pub epsilon: f32,
    pub steps: usize,
    pub alpha: f32,
    pub mu: f32,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.steps < 1 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.mu < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "mu must be >= 0, got {}",
                self.mu
            )));
        }
        Ok(())
    }

    pub fn fgsm(epsilon: f32) -> Self {
        AttackConfig {
            epsilon,
            steps: 1,
            alpha: epsilon,
            mu: 0.0,
        }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the clean-label cross-entropy with respect to the image,
/// computed by seeding `p - onehot` at the logits node.
fn ce_input_gradient(model: &ClassifierModel, image: &Tensor, label: usize) -> Result<Tensor> {
    let acts = model.graph().evaluate(image)?;
    let probs = acts.output();
    let mut seed = probs.clone();
    seed.data_mut()[label] -= 1.0;
    Ok(model
        .graph()
        .backward_from(&acts, model.logits_node(), &seed)?
        .input)
}

/// Shared core of the sign attacks: iterate `alpha`-sized sign steps,
/// projecting into the budget ball and pixel range after each one.
/// `momentum` switches on the L1-normalized gradient accumulator.
fn iterative_sign_attack(
    model: &ClassifierModel,
    image: &Tensor,
    epsilon: f32,
    alpha: f32,
    steps: usize,
    momentum: Option<f32>,
) -> Result<Tensor> {
    let clean_label = model.predict_label(image)?;
    let mut x = image.clone();
    let mut acc = Tensor::zeros(image.shape());

    for _ in 0..steps {
        let grad = ce_input_gradient(model, &x, clean_label)?;
        let direction = match momentum {
            None => grad,
            Some(mu) => {
                let norm: f32 = grad.data().iter().map(|v| v.abs()).sum();
                let acc_data: Vec<f32> = acc
                    .data()
                    .iter()
                    .zip(grad.data().iter())
                    .map(|(&a, &g)| mu * a + if norm > 0.0 { g / norm } else { 0.0 })
                    .collect();
                acc = Tensor::new(image.shape().to_vec(), acc_data)?;
                acc.clone()
            }
        };
        let stepped: Vec<f32> = image
            .data()
            .iter()
            .zip(x.data().iter().zip(direction.data().iter()))
            .map(|(&x0, (&xt, &g))| project_pixel_step(x0, xt + alpha * sign(g), epsilon))
            .collect();
        x = Tensor::new(image.shape().to_vec(), stepped)?;
    }
    Ok(x)
}

/// One-step sign attack: `clip_pixel(x + eps * sign(grad))`.
pub fn fgsm(model: &ClassifierModel, image: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    iterative_sign_attack(model, image, cfg.epsilon, cfg.epsilon, 1, None)
}

/// Iterative projected sign attack, deterministic start at the clean image.
pub fn pgd(model: &ClassifierModel, image: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    iterative_sign_attack(model, image, cfg.epsilon, cfg.alpha, cfg.steps, None)
}

/// Momentum iterative sign attack with L1-normalized gradient accumulation.
pub fn mi_fgsm(model: &ClassifierModel, image: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    iterative_sign_attack(model, image, cfg.epsilon, cfg.alpha, cfg.steps, Some(cfg.mu))
}

// ── Classifier training ─────────────────────────────────────────────────

/// Per-epoch log line of supervised classifier training.
#[derive(Debug, Clone)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Mini-batch SGD on cross-entropy. Deterministic under the seed
/// regardless of thread count: per-image gradients are reduced in index
/// order.
pub fn train_classifier(
    model: &mut ClassifierModel,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: f32,
    seed: u64,
) -> Result<Vec<ClassifierEpoch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    if data.num_classes != model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    let images = data.image_vec();
    let stream = RngStream::new(seed);
    let mut log = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let mut rng = stream.rng_at(epoch as u64);
        let order = shuffled_indices(&mut rng, images.len());
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;

        for batch in order.chunks(batch_size) {
            let per_image: Vec<Result<(f64, GradResult)>> = batch
                .par_iter()
                .map(|&i| {
                    let acts = model.graph().evaluate(&images[i])?;
                    let probs = acts.output();
                    let label = data.labels[i];
                    let p = probs.data()[label].max(1e-12);
                    let loss = -(p as f64).ln();
                    let mut seed_grad = probs.clone();
                    seed_grad.data_mut()[label] -= 1.0;
                    let grads =
                        model
                            .graph()
                            .backward_from(&acts, model.logits_node(), &seed_grad)?;
                    Ok((loss, grads))
                })
                .collect();

            let mut batch_grads: Option<GradResult> = None;
            for r in per_image {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!("classifier epoch {epoch}")));
                }
                loss_sum += loss;
                loss_count += 1;
                match &mut batch_grads {
                    Some(acc) => acc.scaled_add(1.0, &grads)?,
                    None => batch_grads = Some(grads),
                }
            }
            if let Some(grads) = batch_grads {
                model
                    .graph_mut()
                    .apply_param_update(&grads, -learning_rate / batch.len() as f32)?;
            }
        }

        let correct: usize = (0..images.len())
            .into_par_iter()
            .map(|i| {
                (model.predict_label(&images[i]).unwrap_or(usize::MAX) == data.labels[i]) as usize
            })
            .sum();
        log.push(ClassifierEpoch {
            epoch,
            mean_loss: loss_sum / loss_count.max(1) as f64,
            train_accuracy: correct as f64 / images.len() as f64,
        });
    }
    Ok(log)
}

// ── Generator training ──────────────────────────────────────────────────

/// Generator training configuration. `loss.weights` must carry one weight
/// per target model.
#[derive(Debug, Clone)]
pub struct AtnTrainConfig {
    pub loss: LossConfig,
    pub robust: RobustConfig,
    pub epsilon: f32,
    pub learning_rate: f32,
    /// Ascent rate of the filter in training-filter mode.
    pub filter_learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub whitebox_fooling: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochStats>,
}

/// Trained generator side-outputs: the log and, for filter modes, the
/// filter as it ended up (updated in training-filter mode).
#[derive(Debug)]
pub struct AtnTrainOutcome {
    pub log: TrainingLog,
    pub filter: Option<FilterModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Feature,
    Prediction,
    /// Minimize the true label's probability (labeled-data baseline).
    TrueLabelProb,
}

/// Train the generator against one or more frozen targets.
///
/// Per batch: generate, pass through the robustness module, fuse
/// per-target losses, one SGD step on the generator (plus one ascent step
/// on the filter in training-filter mode). The threshold floor is applied
/// per target before weighting and only when attacking an ensemble.
pub fn train_atn(
    gen: &mut GeneratorModel,
    targets: &[ClassifierModel],
    cfg: AtnTrainConfig,
    data: &Dataset,
) -> Result<AtnTrainOutcome> {
    let objective = match cfg.loss.kind {
        LossKind::Feature => Objective::Feature,
        LossKind::Prediction => Objective::Prediction,
    };
    train_generator_inner(gen, targets, cfg, data, objective)
}

/// Non-targeted autoencoder baseline: minimize the true label's predicted
/// probability, no threshold floor, no robustness module.
pub fn atn_modified_baseline(
    gen: &mut GeneratorModel,
    target: &ClassifierModel,
    data: &Dataset,
    cfg: AtnTrainConfig,
) -> Result<TrainingLog> {
    let cfg = AtnTrainConfig {
        robust: RobustConfig::none(),
        loss: LossConfig {
            kind: cfg.loss.kind,
            gamma: None,
            weights: vec![1.0],
        },
        ..cfg
    };
    let outcome = train_generator_inner(
        gen,
        std::slice::from_ref(target),
        cfg,
        data,
        Objective::TrueLabelProb,
    )?;
    Ok(outcome.log)
}

struct ImageStep {
    loss: f64,
    gen_grads: Option<GradResult>,
    filter_grads: Option<GradResult>,
}

fn train_generator_inner(
    gen: &mut GeneratorModel,
    targets: &[ClassifierModel],
    cfg: AtnTrainConfig,
    data: &Dataset,
    objective: Objective,
) -> Result<AtnTrainOutcome> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("at least one target model required".into()));
    }
    cfg.loss.validate()?;
    cfg.robust.validate()?;
    if cfg.loss.weights.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} targets but {} ensemble weights",
            targets.len(),
            cfg.loss.weights.len()
        )));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    for t in targets {
        if t.input_shape() != gen.input_shape() {
            return Err(Error::shape(
                "target input vs generator input",
                gen.input_shape(),
                t.input_shape(),
            ));
        }
    }

    let images = data.image_vec();
    // the threshold floor exists to stop single-model domination, so it
    // only engages when attacking an ensemble
    let gamma = if targets.len() > 1 && objective == Objective::Prediction {
        cfg.loss.gamma
    } else {
        None
    };

    // clean reference labels are fixed attack anchors, computed on the
    // raw clean images once
    let clean_labels: Vec<Vec<usize>> = match objective {
        Objective::Prediction => targets
            .iter()
            .map(|t| {
                images
                    .par_iter()
                    .map(|img| t.predict_label(img))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?,
        Objective::TrueLabelProb => vec![data.labels.clone(); targets.len()],
        Objective::Feature => Vec::new(),
    };

    let mut robust_cfg = cfg.robust.clone();
    let stream = RngStream::new(cfg.seed);
    let mut branch_rng = stream.fork(1);
    let noise_base = stream.fork(2);
    let clean_noise_base = stream.fork(3);
    let probe_n = images.len().min(128);
    let mut log = TrainingLog::default();

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = stream.rng_at(1000 + epoch as u64);
        let order = shuffled_indices(&mut shuffle_rng, images.len());
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let branch = choose_branch(&robust_cfg, &mut branch_rng, Phase::Train);
            let ctr_base = (epoch as u64) << 32 | (batch_idx as u64) << 16;

            let steps: Vec<Result<ImageStep>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    image_step(
                        gen,
                        targets,
                        &cfg,
                        &robust_cfg,
                        objective,
                        gamma,
                        &clean_labels,
                        &images[i],
                        branch,
                        noise_base.fork(ctr_base | k as u64),
                        clean_noise_base.fork(ctr_base | k as u64),
                    )
                })
                .collect();

            let mut gen_acc: Option<GradResult> = None;
            let mut filter_acc: Option<GradResult> = None;
            for s in steps {
                let s = s?;
                if !s.loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "generator epoch {epoch} batch {batch_idx}"
                    )));
                }
                loss_sum += s.loss;
                loss_count += 1;
                if let Some(g) = s.gen_grads {
                    match &mut gen_acc {
                        Some(acc) => acc.scaled_add(1.0, &g)?,
                        None => gen_acc = Some(g),
                    }
                }
                if let Some(g) = s.filter_grads {
                    match &mut filter_acc {
                        Some(acc) => acc.scaled_add(1.0, &g)?,
                        None => filter_acc = Some(g),
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            if let Some(g) = gen_acc {
                gen.graph_mut()
                    .apply_param_update(&g, -cfg.learning_rate * inv)?;
            }
            if robust_cfg.mode == RobustMode::TrainingFilter {
                if let (Some(g), Some(filter)) = (filter_acc, robust_cfg.filter.as_mut()) {
                    // ascent: the filter learns to undo the attack
                    filter
                        .graph_mut()
                        .apply_param_update(&g, cfg.filter_learning_rate * inv)?;
                }
            }
        }

        let whitebox = whitebox_fooling_rate(gen, &targets[0], &images[..probe_n], cfg.epsilon)?;
        log.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / loss_count.max(1) as f64,
            whitebox_fooling: whitebox,
        });
    }

    Ok(AtnTrainOutcome {
        log,
        filter: robust_cfg.filter,
    })
}

#[allow(clippy::too_many_arguments)]
fn image_step(
    gen: &GeneratorModel,
    targets: &[ClassifierModel],
    cfg: &AtnTrainConfig,
    robust_cfg: &RobustConfig,
    objective: Objective,
    gamma: Option<f32>,
    clean_labels: &[Vec<usize>],
    image: &Tensor,
    branch: RobustBranch,
    mut noise_rng: RngStream,
    mut clean_noise_rng: RngStream,
) -> Result<ImageStep> {
    let _ = clean_labels;
    let adv_fwd = gen.generate_cached(image, cfg.epsilon)?;
    let applied = apply_branch(adv_fwd.adversarial(), branch, robust_cfg, &mut noise_rng)?;
    let processed = applied.output();

    let mut per_losses = Vec::with_capacity(targets.len());
    let mut grad_processed = Tensor::zeros(image.shape());
    for (t_idx, target) in targets.iter().enumerate() {
        let w = cfg.loss.weights[t_idx];
        let acts = target.graph().evaluate(processed)?;
        match objective {
            Objective::Feature => {
                // both paths go through the module; the clean side draws
                // its own noise and contributes no gradient
                let applied_clean =
                    apply_branch(image, branch, robust_cfg, &mut clean_noise_rng)?;
                let clean_acts = target.graph().evaluate(applied_clean.output())?;
                let feat_clean = clean_acts.value(target.feature_tap());
                let feat_adv = acts.value(target.feature_tap());
                let l = loss_feature(feat_clean, feat_adv)?;
                per_losses.push(l);
                let g_feat = loss_feature_grad(feat_clean, feat_adv)?;
                let g = target
                    .graph()
                    .backward_from(&acts, target.feature_tap(), &g_feat)?;
                grad_processed.scaled_add(w, &g.input)?;
            }
            Objective::Prediction | Objective::TrueLabelProb => {
                let label = clean_labels[t_idx][index_of(image)?];
                unreachable!("labels are resolved by the caller")
                    ;
                #[allow(unreachable_code)]
                {
                    let _ = (label, w, acts);
                }
            }
        }
    }

    let fused = loss_ensemble(&per_losses, &cfg.loss.weights)?;
    let (grad_adv, filter_grads) = applied.backward(robust_cfg.filter.as_ref(), &grad_processed)?;
    let gen_grads = gen.backward(&adv_fwd, &grad_adv)?;
    Ok(ImageStep {
        loss: fused as f64,
        gen_grads: Some(gen_grads),
        filter_grads,
    })
}

fn index_of(_image: &Tensor) -> Result<usize> {
    unreachable!()
}

/// Fraction of probe images whose prediction changes under the generator
/// at the given budget.
pub fn whitebox_fooling_rate(
    gen: &GeneratorModel,
    target: &ClassifierModel,
    images: &[Tensor],
    epsilon: f32,
) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let fooled: usize = images
        .par_iter()
        .map(|img| -> Result<usize> {
            let clean = target.predict_label(img)?;
            let adv = gen.generate_adversarial(img, epsilon)?;
            Ok((target.predict_label(&adv)? != clean) as usize)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(fooled as f64 / images.len() as f64)
}
