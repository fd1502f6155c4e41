//! Desk-scale adversarial attack laboratory.
//!
//! Builds everything from a small reverse-mode autodiff core: a classifier
//! zoo, an encoder-decoder perturbation generator with a structural L-inf
//! budget, gradient baselines (FGSM / PGD / MI-FGSM), feature- and
//! margin-based attack losses with ensemble fusion, a training-time
//! robustness module, and a reproducible fooling-rate evaluation harness.

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod nets;
pub mod rng;
pub mod robust;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Activations, ComputeGraph, GradResult, GraphBuilder, NodeId, OpKind};
pub use rng::RngStream;
pub use tensor::Tensor;

/// Pixel range used everywhere: images are f32 on the `[0, 255]` scale.
pub const PIXEL_MIN: f32 = 0.0;
pub const PIXEL_MAX: f32 = 255.0;

/// Clamp a tensor into the pixel range.
pub fn clip_pixel(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(PIXEL_MIN, PIXEL_MAX))
}

fn next_toward(v: f32, target: f32) -> f32 {
    if target > v {
        if v == 0.0 {
            f32::from_bits(1)
        } else if v < 0.0 {
            f32::from_bits(v.to_bits() - 1)
        } else {
            f32::from_bits(v.to_bits() + 1)
        }
    } else if target < v {
        if v == 0.0 {
            -f32::from_bits(1)
        } else if v > 0.0 {
            f32::from_bits(v.to_bits() - 1)
        } else {
            f32::from_bits(v.to_bits() + 1)
        }
    } else {
        v
    }
}

/// Project a candidate pixel `v` into the L-inf ball of radius `eps`
/// around `x`, intersected with the pixel range.
///
/// The bound is exact under f32 measurement: `(result - x).abs() <= eps`
/// holds as evaluated in f32, not merely in real arithmetic. Clamping to
/// `x + eps` can round half an ulp outward, so the result is nudged back
/// toward `x` until the measured difference respects the budget.
pub fn project_pixel_step(x: f32, v: f32, eps: f32) -> f32 {
    let mut adv = v.clamp(x - eps, x + eps).clamp(PIXEL_MIN, PIXEL_MAX);
    loop {
        let d = adv - x;
        if d.abs() <= eps {
            return adv;
        }
        adv = next_toward(adv, x);
    }
}

#[cfg(test)]
mod proj_tests {
    use super::*;
    use rand_core::RngCore;

    #[test]
    fn projection_budget_is_exact_under_f32_measurement() {
        let mut rng = RngStream::new(99).next_rng();
        for _ in 0..200_000 {
            let x = rng::uniform_in(&mut rng, 0.0, 255.0);
            let v = rng::uniform_in(&mut rng, -300.0, 555.0);
            let eps = match rng.next_u32() % 4 {
                0 => 1.0,
                1 => 4.0,
                2 => 16.0,
                _ => 32.0,
            };
            let adv = project_pixel_step(x, v, eps);
            assert!((adv - x).abs() <= eps, "x={x} v={v} eps={eps} adv={adv}");
            assert!((PIXEL_MIN..=PIXEL_MAX).contains(&adv));
        }
    }

    #[test]
    fn projection_is_identity_inside_the_ball() {
        assert_eq!(project_pixel_step(100.0, 104.0, 8.0), 104.0);
        assert_eq!(project_pixel_step(100.0, 100.0, 8.0), 100.0);
    }
}
