//! Training-time robustness module, inserted between the generator output
//! and the target models to imitate preprocessing defenses.
//!
//! Three variants: random noise, a frozen pre-trained filter network, and
//! a filter trained adversarially alongside the generator. At evaluation
//! time the module is always the identity.

use crate::error::{Error, Result};
use crate::graph::{Activations, GradResult};
use crate::nets::FilterModel;
use crate::rng::{uniform_in, RngStream};
use crate::tensor::Tensor;
use crate::{PIXEL_MAX, PIXEL_MIN};

/// Robustness variant used during generator training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobustMode {
    None,
    RandomNoise,
    PretrainedFilter,
    TrainingFilter,
}

impl RobustMode {
    pub fn parse(s: &str) -> Result<RobustMode> {
        match s {
            "none" => Ok(RobustMode::None),
            "noise" | "random-noise" => Ok(RobustMode::RandomNoise),
            "pretrained-filter" => Ok(RobustMode::PretrainedFilter),
            "training-filter" => Ok(RobustMode::TrainingFilter),
            other => Err(Error::InvalidArgument(format!(
                "unknown robust mode '{other}', expected none|noise|pretrained-filter|training-filter"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RobustMode::None => "none",
            RobustMode::RandomNoise => "noise",
            RobustMode::PretrainedFilter => "pretrained-filter",
            RobustMode::TrainingFilter => "training-filter",
        }
    }

    pub fn uses_filter(&self) -> bool {
        matches!(self, RobustMode::PretrainedFilter | RobustMode::TrainingFilter)
    }
}

/// Training vs evaluation: the module only acts during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Robustness configuration.
///
/// `beta` is the mean absolute noise amplitude in pixels: draws are
/// uniform on `[-2 beta, 2 beta]`, whose mean absolute value is exactly
/// `beta`.
#[derive(Debug, Clone)]
pub struct RobustConfig {
    pub mode: RobustMode,
    pub beta: f32,
    pub filter: Option<FilterModel>,
    pub seed: u64,
    /// Probability of picking the filter branch (vs noise) per batch.
    pub filter_choice_prob: f32,
}

impl RobustConfig {
    pub fn none() -> Self {
        RobustConfig {
            mode: RobustMode::None,
            beta: 0.0,
            filter: None,
            seed: 0,
            filter_choice_prob: 0.5,
        }
    }

    pub fn noise(beta: f32, seed: u64) -> Self {
        RobustConfig {
            mode: RobustMode::RandomNoise,
            beta,
            filter: None,
            seed,
            filter_choice_prob: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.filter_choice_prob) {
            return Err(Error::InvalidArgument(format!(
                "filter_choice_prob must lie in [0, 1], got {}",
                self.filter_choice_prob
            )));
        }
        if self.mode.uses_filter() && self.filter.is_none() {
            return Err(Error::InvalidArgument(format!(
                "robust mode '{}' requires a filter model",
                self.mode.as_str()
            )));
        }
        Ok(())
    }
}

/// Which transformation a batch actually gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobustBranch {
    Identity,
    Noise,
    Filter,
}

/// Draw the branch for one batch. Identity outside training; the
/// filter/noise split follows `filter_choice_prob`.
pub fn choose_branch(cfg: &RobustConfig, rng: &mut RngStream, phase: Phase) -> RobustBranch {
    if phase == Phase::Eval {
        return RobustBranch::Identity;
    }
    match cfg.mode {
        RobustMode::None => RobustBranch::Identity,
        RobustMode::RandomNoise => RobustBranch::Noise,
        RobustMode::PretrainedFilter | RobustMode::TrainingFilter => {
            let u = uniform_in(&mut rng.next_rng(), 0.0, 1.0);
            if u < cfg.filter_choice_prob {
                RobustBranch::Filter
            } else {
                RobustBranch::Noise
            }
        }
    }
}

/// `clip_pixel(image + u)` with `u` elementwise uniform on `[-2 beta, 2 beta]`.
pub fn apply_random_noise(image: &Tensor, beta: f32, rng: &mut RngStream) -> Tensor {
    apply_random_noise_cached(image, beta, rng).out
}

/// Noise application plus the clip mask needed to gate gradients: the
/// noise itself is a constant of the forward pass, so the gradient to the
/// input is 1 where the sum stayed strictly inside the pixel range.
pub fn apply_random_noise_cached(image: &Tensor, beta: f32, rng: &mut RngStream) -> NoiseCache {
    let mut draw = rng.next_rng();
    let mut out = Vec::with_capacity(image.len());
    let mut mask = Vec::with_capacity(image.len());
    for &x in image.data() {
        let u = if beta > 0.0 {
            uniform_in(&mut draw, -2.0 * beta, 2.0 * beta)
        } else {
            0.0
        };
        let pre = x + u;
        mask.push(if pre > PIXEL_MIN && pre < PIXEL_MAX { 1.0 } else { 0.0 });
        out.push(pre.clamp(PIXEL_MIN, PIXEL_MAX));
    }
    NoiseCache {
        out: Tensor::new(image.shape().to_vec(), out).expect("noise shape"),
        mask,
    }
}

#[derive(Debug, Clone)]
pub struct NoiseCache {
    pub out: Tensor,
    mask: Vec<f32>,
}

/// `clip_pixel(filter(image))`, fully differentiable through the filter.
pub fn apply_filter(image: &Tensor, filter: &FilterModel) -> Result<Tensor> {
    filter.apply(image)
}

/// One applied robustness transformation with everything the backward
/// pass needs.
#[derive(Debug)]
pub enum AppliedRobust {
    Identity(Tensor),
    Noise(NoiseCache),
    Filter { out: Tensor, acts: Activations },
}

impl AppliedRobust {
    pub fn output(&self) -> &Tensor {
        match self {
            AppliedRobust::Identity(t) => t,
            AppliedRobust::Noise(c) => &c.out,
            AppliedRobust::Filter { out, .. } => out,
        }
    }

    /// Gradient with respect to the incoming image, plus filter parameter
    /// gradients when the filter branch was taken.
    pub fn backward(
        &self,
        filter: Option<&FilterModel>,
        grad_out: &Tensor,
    ) -> Result<(Tensor, Option<GradResult>)> {
        match self {
            AppliedRobust::Identity(_) => Ok((grad_out.clone(), None)),
            AppliedRobust::Noise(c) => {
                let mut g = grad_out.clone();
                for (gi, &m) in g.data_mut().iter_mut().zip(c.mask.iter()) {
                    *gi *= m;
                }
                Ok((g, None))
            }
            AppliedRobust::Filter { acts, .. } => {
                let f = filter.ok_or_else(|| {
                    Error::InvalidArgument("filter branch recorded but no filter supplied".into())
                })?;
                let grads = f.graph().backward(acts, grad_out)?;
                let input = grads.input.clone();
                Ok((input, Some(grads)))
            }
        }
    }
}

/// Apply one already-chosen branch to one image.
pub fn apply_branch(
    image: &Tensor,
    branch: RobustBranch,
    cfg: &RobustConfig,
    rng: &mut RngStream,
) -> Result<AppliedRobust> {
    match branch {
        RobustBranch::Identity => Ok(AppliedRobust::Identity(image.clone())),
        RobustBranch::Noise => Ok(AppliedRobust::Noise(apply_random_noise_cached(
            image, cfg.beta, rng,
        ))),
        RobustBranch::Filter => {
            let filter = cfg.filter.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "robust mode '{}' requires a filter model",
                    cfg.mode.as_str()
                ))
            })?;
            let acts = filter.graph().evaluate(image)?;
            Ok(AppliedRobust::Filter {
                out: acts.output().clone(),
                acts,
            })
        }
    }
}

/// The full module: draw a branch, apply it. Identity for every config at
/// evaluation time.
pub fn robust_enhance(
    image: &Tensor,
    cfg: &RobustConfig,
    rng: &mut RngStream,
    phase: Phase,
) -> Result<Tensor> {
    cfg.validate()?;
    let branch = choose_branch(cfg, rng, phase);
    Ok(apply_branch(image, branch, cfg, rng)?.output().clone())
}

/// Pre-train a filter as a denoiser: minimize `mean|filter(x + u) - x|`
/// over clean images with the same noise amplitude the robust module will
/// use. SGD with a fixed learning rate; deterministic under the seed.
pub fn train_denoising_filter(
    filter: &mut FilterModel,
    images: &[Tensor],
    beta: f32,
    steps: usize,
    learning_rate: f32,
    seed: u64,
) -> Result<f32> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("denoising needs at least one image".into()));
    }
    let mut rng = RngStream::new(seed);
    let mut last_loss = 0.0;
    for step in 0..steps {
        let img = &images[step % images.len()];
        let noisy = apply_random_noise(img, beta, &mut rng);
        let acts = filter.graph().evaluate(&noisy)?;
        let out = acts.output();
        let n = out.len() as f32;
        last_loss = out
            .data()
            .iter()
            .zip(img.data().iter())
            .map(|(&o, &x)| (o - x).abs())
            .sum::<f32>()
            / n;
        let grad = out.zip_map(img, |o, x| {
            if o > x {
                1.0 / n
            } else if o < x {
                -1.0 / n
            } else {
                0.0
            }
        })?;
        let grads = filter.graph().backward(&acts, &grad)?;
        filter.graph_mut().apply_param_update(&grads, -learning_rate)?;
    }
    Ok(last_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::build_filter;
    use crate::rng::uniform_in;

    fn image(seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed).next_rng();
        Tensor::new(
            vec![1, 8, 8],
            (0..64).map(|_| uniform_in(&mut rng, 0.0, 255.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_beta_is_identity() {
        let img = image(1);
        let out = apply_random_noise(&img, 0.0, &mut RngStream::new(2));
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn noise_mean_absolute_amplitude_matches_beta() {
        // Monte-Carlo check: uniform on [-12, 12] has mean |u| of 6
        let mut rng = RngStream::new(3).next_rng();
        let n = 1_000_000;
        let mut acc = 0.0f64;
        for _ in 0..n {
            acc += uniform_in(&mut rng, -12.0, 12.0).abs() as f64;
        }
        let mean = acc / n as f64;
        assert!((5.9..=6.1).contains(&mean), "mean |u| = {mean}");
    }

    #[test]
    fn same_seed_and_counter_give_identical_noise() {
        let img = image(4);
        let a = apply_random_noise(&img, 6.0, &mut RngStream::new(5));
        let b = apply_random_noise(&img, 6.0, &mut RngStream::new(5));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn noise_is_bounded_by_twice_beta() {
        let img = Tensor::filled(&[1, 8, 8], 128.0);
        let out = apply_random_noise(&img, 6.0, &mut RngStream::new(6));
        let d = out.max_abs_diff(&img).unwrap();
        assert!(d <= 12.0, "support bound violated: {d}");
    }

    #[test]
    fn eval_phase_is_identity_for_every_mode() {
        let img = image(7);
        for mode in [RobustMode::None, RobustMode::RandomNoise, RobustMode::TrainingFilter] {
            let cfg = RobustConfig {
                mode,
                beta: 6.0,
                filter: mode.uses_filter().then(|| build_filter(&[1, 8, 8], 1).unwrap()),
                seed: 8,
                filter_choice_prob: 0.5,
            };
            let out = robust_enhance(&img, &cfg, &mut RngStream::new(8), Phase::Eval).unwrap();
            assert_eq!(out.data(), img.data(), "mode {mode:?}");
        }
    }

    #[test]
    fn mode_none_is_identity_in_training_too() {
        let img = image(9);
        let cfg = RobustConfig::none();
        let out = robust_enhance(&img, &cfg, &mut RngStream::new(10), Phase::Train).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn zero_filter_probability_behaves_as_noise() {
        let cfg = RobustConfig {
            mode: RobustMode::PretrainedFilter,
            beta: 6.0,
            filter: Some(build_filter(&[1, 8, 8], 1).unwrap()),
            seed: 12,
            filter_choice_prob: 0.0,
        };
        for _ in 0..16 {
            let b = choose_branch(&cfg, &mut RngStream::new(12), Phase::Train);
            assert_eq!(b, RobustBranch::Noise);
        }
    }

    #[test]
    fn filter_modes_require_a_filter() {
        let cfg = RobustConfig {
            mode: RobustMode::PretrainedFilter,
            beta: 6.0,
            filter: None,
            seed: 0,
            filter_choice_prob: 0.5,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn noise_branch_gradient_is_the_clip_mask() {
        // values near the boundary get clamped; their gradient must vanish
        let img = Tensor::new(vec![1, 2, 2], vec![0.5, 254.8, 128.0, 1.0]).unwrap();
        let applied = apply_branch(
            &img,
            RobustBranch::Noise,
            &RobustConfig::noise(6.0, 13),
            &mut RngStream::new(13),
        )
        .unwrap();
        let ones = Tensor::filled(&[1, 2, 2], 1.0);
        let (g, fg) = applied.backward(None, &ones).unwrap();
        assert!(fg.is_none());
        for (i, (&o, &gi)) in applied
            .output()
            .data()
            .iter()
            .zip(g.data().iter())
            .enumerate()
        {
            let clamped = o == PIXEL_MIN || o == PIXEL_MAX;
            assert_eq!(gi == 0.0, clamped, "pixel {i}: out {o}, grad {gi}");
        }
    }

    #[test]
    fn filter_branch_gradient_matches_graph_backward() {
        let mut filter = build_filter(&[1, 8, 8], 14).unwrap();
        // train briefly so the filter is not exactly identity
        let imgs = vec![image(15), image(16)];
        train_denoising_filter(&mut filter, &imgs, 6.0, 20, 0.05, 17).unwrap();
        let img = image(18);
        let cfg = RobustConfig {
            mode: RobustMode::PretrainedFilter,
            beta: 6.0,
            filter: Some(filter.clone()),
            seed: 19,
            filter_choice_prob: 1.0,
        };
        let applied = apply_branch(&img, RobustBranch::Filter, &cfg, &mut RngStream::new(19)).unwrap();
        let seed_grad = image(20).map(|v| v / 255.0 - 0.5);
        let (g, fg) = applied.backward(Some(&filter), &seed_grad).unwrap();
        let acts = filter.graph().evaluate(&img).unwrap();
        let reference = filter.graph().backward(&acts, &seed_grad).unwrap();
        assert_eq!(g.data(), reference.input.data());
        assert!(fg.is_some());
    }

    #[test]
    fn denoising_filter_training_reduces_loss() {
        let mut filter = build_filter(&[1, 8, 8], 21).unwrap();
        // smooth images: denoising has structure to exploit
        let imgs: Vec<Tensor> = (0..8)
            .map(|i| {
                let base = 40.0 + 22.0 * i as f32;
                Tensor::new(
                    vec![1, 8, 8],
                    (0..64).map(|p| base + (p % 8) as f32).collect(),
                )
                .unwrap()
            })
            .collect();
        // identity filter on noisy input: loss equals mean |u| which is about beta
        let first = train_denoising_filter(&mut filter, &imgs, 6.0, 1, 0.0, 22).unwrap();
        assert!((first - 6.0).abs() < 2.0, "initial denoise loss {first}");
        let trained = train_denoising_filter(&mut filter, &imgs, 6.0, 600, 1e-3, 23).unwrap();
        assert!(
            trained < first,
            "denoise loss did not improve: {first} -> {trained}"
        );
    }
}
