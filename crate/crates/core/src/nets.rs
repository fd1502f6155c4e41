//! Classifier zoo, perturbation generator, and filter network.
//!
//! Three small convnet topologies (`cnn-a`, `cnn-b`, `cnn-c`) stand in for
//! a model zoo with enough architectural diversity for transfer studies.
//! Every classifier ends with feature-tap relu -> global average pool ->
//! dense -> softmax, so the activation before the final pooling is always
//! available as the feature map.
//!
//! The generator is an encoder-decoder producing a raw residual; the
//! attack image is `clip_pixel(x + eps * tanh(residual))`, which makes the
//! L-inf budget structural: it holds by construction, not by penalty.

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{ArchDescriptor, Checkpoint, TrainMeta};
use crate::error::{Error, Result};
use crate::graph::{Activations, ComputeGraph, GradResult, GraphBuilder, NodeId};
use crate::rng::{uniform_in, RngStream};
use crate::tensor::Tensor;
use crate::{PIXEL_MAX, PIXEL_MIN};

pub const CLASSIFIER_ARCHS: [&str; 3] = ["cnn-a", "cnn-b", "cnn-c"];

/// Pixel normalization applied as the first node of every network:
/// maps [0, 255] to [-1, 1].
const NORM_SCALE: f32 = 1.0 / 127.5;
const NORM_SHIFT: f32 = -1.0;

/// A differentiable classifier: softmax output plus a tap on the
/// activation before the final global average pooling.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    graph: ComputeGraph,
    arch_name: String,
    num_classes: usize,
    feature_tap: NodeId,
    logits: NodeId,
}

/// Encoder-decoder residual generator. The stored graph maps an image to
/// a raw residual of the same shape; the budget head is applied at
/// generation time.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    graph: ComputeGraph,
    epsilon_train: f32,
}

/// Shallow convolutional image-to-image map with a residual connection,
/// identity at initialization.
#[derive(Debug, Clone)]
pub struct FilterModel {
    graph: ComputeGraph,
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| uniform_in(rng, -limit, limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn conv_init(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> (Tensor, Tensor) {
    let w = glorot(rng, &[c_out, c_in, k, k], c_in * k * k, c_out * k * k);
    (w, Tensor::zeros(&[c_out]))
}

fn check_image_shape(input_shape: &[usize]) -> Result<(usize, usize, usize)> {
    if input_shape.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "image input shape must be [C, H, W], got {input_shape:?}"
        )));
    }
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    if h < 8 || w < 8 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "spatial dims must be >= 8 and divisible by 4, got {h}x{w}"
        )));
    }
    Ok((c, h, w))
}

/// Build a seeded, deterministically initialized classifier.
pub fn build_classifier(
    arch_name: &str,
    num_classes: usize,
    input_shape: &[usize],
    seed: u64,
) -> Result<ClassifierModel> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    let (c_in, _, _) = check_image_shape(input_shape)?;
    let mut rng = RngStream::new(seed).next_rng();
    let mut b = GraphBuilder::new(input_shape)?;
    let x = b.input();
    let n = b.scale_shift(x, NORM_SCALE, NORM_SHIFT)?;

    let feature_tap = match arch_name {
        "cnn-a" => {
            // 3x3 stride-1 convs with max-pool downsampling
            let (w, bias) = conv_init(&mut rng, 8, c_in, 3);
            let c1 = b.conv2d(n, "conv1", w, bias, 1, 1)?;
            let r1 = b.relu(c1)?;
            let p1 = b.max_pool_2x2(r1)?;
            let (w, bias) = conv_init(&mut rng, 16, 8, 3);
            let c2 = b.conv2d(p1, "conv2", w, bias, 1, 1)?;
            let r2 = b.relu(c2)?;
            let p2 = b.max_pool_2x2(r2)?;
            let (w, bias) = conv_init(&mut rng, 32, 16, 3);
            let c3 = b.conv2d(p2, "conv3", w, bias, 1, 1)?;
            b.relu(c3)?
        }
        "cnn-b" => {
            // 5x5 stride-2 convs
            let (w, bias) = conv_init(&mut rng, 12, c_in, 5);
            let c1 = b.conv2d(n, "conv1", w, bias, 2, 2)?;
            let r1 = b.relu(c1)?;
            let (w, bias) = conv_init(&mut rng, 24, 12, 5);
            let c2 = b.conv2d(r1, "conv2", w, bias, 2, 2)?;
            let r2 = b.relu(c2)?;
            let (w, bias) = conv_init(&mut rng, 24, 24, 3);
            let c3 = b.conv2d(r2, "conv3", w, bias, 1, 1)?;
            b.relu(c3)?
        }
        "cnn-c" => {
            // deeper 3x3 stack with strided downsampling
            let (w, bias) = conv_init(&mut rng, 10, c_in, 3);
            let c1 = b.conv2d(n, "conv1", w, bias, 1, 1)?;
            let r1 = b.relu(c1)?;
            let (w, bias) = conv_init(&mut rng, 20, 10, 3);
            let c2 = b.conv2d(r1, "conv2", w, bias, 2, 1)?;
            let r2 = b.relu(c2)?;
            let (w, bias) = conv_init(&mut rng, 20, 20, 3);
            let c3 = b.conv2d(r2, "conv3", w, bias, 1, 1)?;
            let r3 = b.relu(c3)?;
            let (w, bias) = conv_init(&mut rng, 40, 20, 3);
            let c4 = b.conv2d(r3, "conv4", w, bias, 2, 1)?;
            b.relu(c4)?
        }
        other => {
            return Err(Error::UnknownArch {
                name: other.to_string(),
                valid: CLASSIFIER_ARCHS.to_vec(),
            })
        }
    };

    let pooled = b.global_avg_pool(feature_tap)?;
    let channels = b.node_shape(pooled)?[0];
    let head_w = glorot(&mut rng, &[num_classes, channels], channels, num_classes);
    let logits = b.dense(pooled, "head", head_w, Tensor::zeros(&[num_classes]))?;
    b.softmax(logits)?;

    Ok(ClassifierModel {
        graph: b.finish(),
        arch_name: arch_name.to_string(),
        num_classes,
        feature_tap,
        logits,
    })
}

impl ClassifierModel {
    pub fn graph(&self) -> &ComputeGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut ComputeGraph {
        &mut self.graph
    }

    pub fn arch_name(&self) -> &str {
        &self.arch_name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        self.graph.input_shape()
    }

    pub fn feature_tap(&self) -> NodeId {
        self.feature_tap
    }

    /// Node producing the pre-softmax logits.
    pub fn logits_node(&self) -> NodeId {
        self.logits
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.graph.input_shape() {
            return Err(Error::shape(
                "classifier input",
                self.graph.input_shape(),
                image.shape(),
            ));
        }
        Ok(())
    }

    /// Softmax probability vector for an image.
    pub fn classify(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        self.graph.forward(image)
    }

    /// Activation at the feature tap (the map before the final pooling).
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        Ok(self.graph.evaluate(image)?.value(self.feature_tap).clone())
    }

    /// Index of the most likely class.
    pub fn predict_label(&self, image: &Tensor) -> Result<usize> {
        Ok(self.classify(image)?.argmax())
    }
}

/// Build the encoder-decoder generator. Inputs whose side is divisible by
/// 8 get three stride-2 encoder levels (channels 16/32/64); sides only
/// divisible by 4 get two levels (16/32).
pub fn build_generator(
    input_shape: &[usize],
    epsilon_train: f32,
    seed: u64,
) -> Result<GeneratorModel> {
    if epsilon_train <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon_train must be positive, got {epsilon_train}"
        )));
    }
    let (c_in, h, w) = check_image_shape(input_shape)?;
    let channels: &[usize] = if h % 8 == 0 && w % 8 == 0 {
        &[16, 32, 64]
    } else {
        &[16, 32]
    };

    let mut rng = RngStream::new(seed).next_rng();
    let mut b = GraphBuilder::new(input_shape)?;
    let x = b.input();
    let mut cur = b.scale_shift(x, NORM_SCALE, NORM_SHIFT)?;
    let mut cur_c = c_in;

    for (i, &ch) in channels.iter().enumerate() {
        let (wt, bias) = conv_init(&mut rng, ch, cur_c, 3);
        let c = b.conv2d(cur, &format!("enc{}", i + 1), wt, bias, 2, 1)?;
        cur = b.relu(c)?;
        cur_c = ch;
    }
    for (i, &ch) in channels.iter().rev().skip(1).enumerate() {
        let up = b.upsample_2x(cur)?;
        let (wt, bias) = conv_init(&mut rng, ch, cur_c, 3);
        let c = b.conv2d(up, &format!("dec{}", i + 1), wt, bias, 1, 1)?;
        cur = b.relu(c)?;
        cur_c = ch;
    }
    // final decoder level outputs the raw residual; zero init makes the
    // generator start as the identity map
    let up = b.upsample_2x(cur)?;
    b.conv2d(
        up,
        &format!("dec{}", channels.len()),
        Tensor::zeros(&[c_in, cur_c, 3, 3]),
        Tensor::zeros(&[c_in]),
        1,
        1,
    )?;

    let graph = b.finish();
    debug_assert_eq!(graph.output_shape(), input_shape);
    Ok(GeneratorModel {
        graph,
        epsilon_train,
    })
}

/// Forward state of one adversarial generation, kept for the backward pass.
#[derive(Debug)]
pub struct AdvForward {
    acts: Activations,
    tanh_res: Vec<f32>,
    pre_clip: Vec<f32>,
    epsilon: f32,
    adv: Tensor,
}

impl AdvForward {
    pub fn adversarial(&self) -> &Tensor {
        &self.adv
    }

    pub fn into_adversarial(self) -> Tensor {
        self.adv
    }
}

impl GeneratorModel {
    pub fn graph(&self) -> &ComputeGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut ComputeGraph {
        &mut self.graph
    }

    pub fn epsilon_train(&self) -> f32 {
        self.epsilon_train
    }

    pub fn input_shape(&self) -> &[usize] {
        self.graph.input_shape()
    }

    fn check_image(&self, image: &Tensor, epsilon: f32) -> Result<()> {
        if epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if image.shape() != self.graph.input_shape() {
            return Err(Error::shape(
                "generator input",
                self.graph.input_shape(),
                image.shape(),
            ));
        }
        if image
            .data()
            .iter()
            .any(|&v| !(PIXEL_MIN..=PIXEL_MAX).contains(&v))
        {
            return Err(Error::InvalidArgument(
                "generator input pixels must lie in [0, 255]".into(),
            ));
        }
        Ok(())
    }

    /// `x' = clip_pixel(x + eps * tanh(residual(x)))`, keeping the forward
    /// state so gradients can flow back through the budget head.
    pub fn generate_cached(&self, image: &Tensor, epsilon: f32) -> Result<AdvForward> {
        self.check_image(image, epsilon)?;
        let acts = self.graph.evaluate(image)?;
        let tanh_res: Vec<f32> = acts.output().data().iter().map(|&v| v.tanh()).collect();
        let pre_clip: Vec<f32> = image
            .data()
            .iter()
            .zip(tanh_res.iter())
            .map(|(&x, &t)| x + epsilon * t)
            .collect();
        let adv = Tensor::new(
            image.shape().to_vec(),
            image
                .data()
                .iter()
                .zip(pre_clip.iter())
                .map(|(&x, &v)| crate::project_pixel_step(x, v, epsilon))
                .collect(),
        )?;
        Ok(AdvForward {
            acts,
            tanh_res,
            pre_clip,
            epsilon,
            adv,
        })
    }

    /// Budget-bounded adversarial image: `max|x' - x| <= epsilon` and
    /// `x'` in `[0, 255]`, both exact by construction.
    pub fn generate_adversarial(&self, image: &Tensor, epsilon: f32) -> Result<Tensor> {
        Ok(self.generate_cached(image, epsilon)?.into_adversarial())
    }

    /// Backpropagate a gradient on the adversarial image through the
    /// budget head (clip mask, tanh saturation, skip connection) into the
    /// generator parameters and the input.
    pub fn backward(&self, fwd: &AdvForward, grad_adv: &Tensor) -> Result<GradResult> {
        if grad_adv.shape() != self.graph.input_shape() {
            return Err(Error::shape(
                "adversarial gradient",
                self.graph.input_shape(),
                grad_adv.shape(),
            ));
        }
        // clip passes gradient only strictly inside the pixel range
        let gate: Vec<f32> = fwd
            .pre_clip
            .iter()
            .zip(grad_adv.data().iter())
            .map(|(&p, &g)| {
                if p > PIXEL_MIN && p < PIXEL_MAX {
                    g
                } else {
                    0.0
                }
            })
            .collect();
        let d_res: Vec<f32> = gate
            .iter()
            .zip(fwd.tanh_res.iter())
            .map(|(&g, &t)| g * fwd.epsilon * (1.0 - t * t))
            .collect();
        let d_res = Tensor::new(self.graph.output_shape().to_vec(), d_res)?;
        let mut grads = self.graph.backward(&fwd.acts, &d_res)?;
        // skip path: the image feeds the output directly
        for (gi, &g) in grads.input.data_mut().iter_mut().zip(gate.iter()) {
            *gi += g;
        }
        Ok(grads)
    }

    /// The generation pipeline expressed as a single graph (trunk plus
    /// budget head); used to cross-check the hand-chained backward pass
    /// and by tooling that wants one differentiable object.
    pub fn attack_graph(&self, epsilon: f32) -> Result<(ComputeGraph, NodeId)> {
        if epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        let (mut b, rho) = GraphBuilder::from_graph(&self.graph);
        let input = b.input();
        let t = b.tanh(rho)?;
        let s = b.scale_shift(t, epsilon, 0.0)?;
        let a = b.add(s, input)?;
        let c = b.clip(a, PIXEL_MIN, PIXEL_MAX)?;
        Ok((b.finish(), c))
    }
}

/// Build the shallow residual filter network, identity at initialization.
pub fn build_filter(input_shape: &[usize], seed: u64) -> Result<FilterModel> {
    let (c_in, _, _) = check_image_shape(input_shape)?;
    let mut rng = RngStream::new(seed).next_rng();
    let mut b = GraphBuilder::new(input_shape)?;
    let x = b.input();
    let n = b.scale_shift(x, NORM_SCALE, NORM_SHIFT)?;
    let (w, bias) = conv_init(&mut rng, 8, c_in, 3);
    let c1 = b.conv2d(n, "conv1", w, bias, 1, 1)?;
    let r1 = b.relu(c1)?;
    let c2 = b.conv2d(
        r1,
        "conv2",
        Tensor::zeros(&[c_in, 8, 3, 3]),
        Tensor::zeros(&[c_in]),
        1,
        1,
    )?;
    // residual learned in normalized units, rescaled to pixels
    let s = b.scale_shift(c2, 127.5, 0.0)?;
    let a = b.add(s, x)?;
    b.clip(a, PIXEL_MIN, PIXEL_MAX)?;
    Ok(FilterModel { graph: b.finish() })
}

impl FilterModel {
    pub fn graph(&self) -> &ComputeGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut ComputeGraph {
        &mut self.graph
    }

    pub fn input_shape(&self) -> &[usize] {
        self.graph.input_shape()
    }

    /// Filtered image, clamped to the pixel range inside the graph.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape() != self.graph.input_shape() {
            return Err(Error::shape(
                "filter input",
                self.graph.input_shape(),
                image.shape(),
            ));
        }
        self.graph.forward(image)
    }
}

// ── Persistence ─────────────────────────────────────────────────────────

/// A model loaded from a checkpoint without knowing its kind in advance.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Classifier(ClassifierModel),
    Generator(GeneratorModel),
    Filter(FilterModel),
}

fn params_to_tensors(graph: &ComputeGraph) -> Vec<(String, Tensor)> {
    graph
        .param_names()
        .map(|n| (n.to_string(), graph.param(n).expect("param exists").clone()))
        .collect()
}

fn restore_params(graph: &mut ComputeGraph, ckpt: &Checkpoint) -> Result<()> {
    let expected: Vec<String> = graph.param_names().map(String::from).collect();
    if expected.len() != ckpt.tensors.len() {
        return Err(Error::CorruptHeader(format!(
            "checkpoint holds {} tensors, model needs {}",
            ckpt.tensors.len(),
            expected.len()
        )));
    }
    for name in expected {
        let t = ckpt.tensor(&name).ok_or_else(|| {
            Error::CorruptHeader(format!("checkpoint is missing tensor '{name}'"))
        })?;
        graph.set_param(&name, t.clone())?;
    }
    Ok(())
}

impl ClassifierModel {
    pub fn to_checkpoint(&self, metadata: TrainMeta) -> Checkpoint {
        Checkpoint {
            descriptor: ArchDescriptor::Classifier {
                arch: self.arch_name.clone(),
                num_classes: self.num_classes,
                input_shape: self.graph.input_shape().to_vec(),
            },
            tensors: params_to_tensors(&self.graph),
            metadata,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<ClassifierModel> {
        match &ckpt.descriptor {
            ArchDescriptor::Classifier {
                arch,
                num_classes,
                input_shape,
            } => {
                let mut model = build_classifier(arch, *num_classes, input_shape, 0)?;
                restore_params(&mut model.graph, ckpt)?;
                Ok(model)
            }
            other => Err(Error::KindMismatch {
                expected: "classifier".into(),
                found: other.kind().into(),
            }),
        }
    }

    pub fn save(&self, path: &std::path::Path, metadata: TrainMeta) -> Result<()> {
        self.to_checkpoint(metadata).save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<ClassifierModel> {
        ClassifierModel::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Load and insist on a particular topology.
    pub fn load_expecting(path: &std::path::Path, arch: &str) -> Result<ClassifierModel> {
        let model = ClassifierModel::load(path)?;
        if model.arch_name != arch {
            return Err(Error::ArchMismatch {
                expected: arch.into(),
                found: model.arch_name,
            });
        }
        Ok(model)
    }
}

impl GeneratorModel {
    pub fn to_checkpoint(&self, metadata: TrainMeta) -> Checkpoint {
        Checkpoint {
            descriptor: ArchDescriptor::Generator {
                epsilon_train: self.epsilon_train,
                input_shape: self.graph.input_shape().to_vec(),
            },
            tensors: params_to_tensors(&self.graph),
            metadata,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<GeneratorModel> {
        match &ckpt.descriptor {
            ArchDescriptor::Generator {
                epsilon_train,
                input_shape,
            } => {
                let mut model = build_generator(input_shape, *epsilon_train, 0)?;
                restore_params(&mut model.graph, ckpt)?;
                Ok(model)
            }
            other => Err(Error::KindMismatch {
                expected: "generator".into(),
                found: other.kind().into(),
            }),
        }
    }

    pub fn save(&self, path: &std::path::Path, metadata: TrainMeta) -> Result<()> {
        self.to_checkpoint(metadata).save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<GeneratorModel> {
        GeneratorModel::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl FilterModel {
    pub fn to_checkpoint(&self, metadata: TrainMeta) -> Checkpoint {
        Checkpoint {
            descriptor: ArchDescriptor::Filter {
                input_shape: self.graph.input_shape().to_vec(),
            },
            tensors: params_to_tensors(&self.graph),
            metadata,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<FilterModel> {
        match &ckpt.descriptor {
            ArchDescriptor::Filter { input_shape } => {
                let mut model = build_filter(input_shape, 0)?;
                restore_params(&mut model.graph, ckpt)?;
                Ok(model)
            }
            other => Err(Error::KindMismatch {
                expected: "filter".into(),
                found: other.kind().into(),
            }),
        }
    }

    pub fn save(&self, path: &std::path::Path, metadata: TrainMeta) -> Result<()> {
        self.to_checkpoint(metadata).save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<FilterModel> {
        FilterModel::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Load any model checkpoint, dispatching on its descriptor.
pub fn load_model(path: &std::path::Path) -> Result<(LoadedModel, TrainMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let meta = ckpt.metadata.clone();
    let model = match ckpt.descriptor {
        ArchDescriptor::Classifier { .. } => {
            LoadedModel::Classifier(ClassifierModel::from_checkpoint(&ckpt)?)
        }
        ArchDescriptor::Generator { .. } => {
            LoadedModel::Generator(GeneratorModel::from_checkpoint(&ckpt)?)
        }
        ArchDescriptor::Filter { .. } => LoadedModel::Filter(FilterModel::from_checkpoint(&ckpt)?),
        ref other => {
            return Err(Error::KindMismatch {
                expected: "classifier|generator|filter".into(),
                found: other.kind().into(),
            })
        }
    };
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform_in;

    fn rand_image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed).next_rng();
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| uniform_in(&mut rng, 0.0, 255.0)).collect(),
        )
        .unwrap()
    }

    fn perturb_params(gen: &mut GeneratorModel, seed: u64, amp: f32) {
        let mut rng = RngStream::new(seed).next_rng();
        let names: Vec<String> = gen.graph().param_names().map(String::from).collect();
        for name in &names {
            let old = gen.graph().param(name).unwrap().clone();
            let data = old
                .data()
                .iter()
                .map(|&v| v + uniform_in(&mut rng, -amp, amp))
                .collect();
            let t = Tensor::new(old.shape().to_vec(), data).unwrap();
            gen.graph_mut().set_param(name, t).unwrap();
        }
    }

    #[test]
    fn classifier_output_has_num_classes_entries() {
        let m = build_classifier("cnn-a", 10, &[1, 28, 28], 1).unwrap();
        assert_eq!(m.graph().output_shape(), &[10]);
        let p = m.classify(&rand_image(&[1, 28, 28], 2)).unwrap();
        assert_eq!(p.len(), 10);
        let sum: f32 = p.data().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-5);
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn feature_tap_has_multiple_channels() {
        for arch in CLASSIFIER_ARCHS {
            let m = build_classifier(arch, 10, &[1, 28, 28], 1).unwrap();
            let f = m.features(&rand_image(&[1, 28, 28], 3)).unwrap();
            assert!(f.shape()[0] > 1, "{arch} feature channels {:?}", f.shape());
            assert_eq!(f.shape().len(), 3);
        }
    }

    #[test]
    fn unknown_arch_is_rejected_with_valid_names() {
        let err = build_classifier("cnn-z", 10, &[1, 28, 28], 1).unwrap_err();
        match err {
            Error::UnknownArch { name, valid } => {
                assert_eq!(name, "cnn-z");
                assert_eq!(valid, CLASSIFIER_ARCHS.to_vec());
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn classify_is_deterministic() {
        let m = build_classifier("cnn-b", 10, &[1, 32, 32], 5).unwrap();
        let img = rand_image(&[1, 32, 32], 6);
        assert_eq!(m.classify(&img).unwrap(), m.classify(&img).unwrap());
    }

    #[test]
    fn feature_distance_of_image_with_itself_is_zero() {
        let m = build_classifier("cnn-c", 10, &[1, 32, 32], 7).unwrap();
        let img = rand_image(&[1, 32, 32], 8);
        let f = m.features(&img).unwrap();
        assert_eq!(f.max_abs_diff(&f).unwrap(), 0.0);
    }

    #[test]
    fn zero_initialized_generator_is_identity() {
        let gen = build_generator(&[1, 32, 32], 16.0, 9).unwrap();
        let img = rand_image(&[1, 32, 32], 10);
        let adv = gen.generate_adversarial(&img, 16.0).unwrap();
        assert_eq!(adv.data(), img.data());
    }

    #[test]
    fn generator_budget_is_exact_for_any_parameters() {
        let mut gen = build_generator(&[1, 32, 32], 16.0, 11).unwrap();
        // blow up the final layer so the residual saturates
        let names: Vec<String> = gen.graph().param_names().map(String::from).collect();
        for name in names {
            let t = gen.graph().param(&name).unwrap().map(|_| 3.0);
            gen.graph_mut().set_param(&name, t).unwrap();
        }
        let img = rand_image(&[1, 32, 32], 12);
        for eps in [4.0_f32, 16.0] {
            let adv = gen.generate_adversarial(&img, eps).unwrap();
            let d = adv.max_abs_diff(&img).unwrap();
            assert!(d <= eps, "budget {eps} violated: {d}");
            assert!(adv
                .data()
                .iter()
                .all(|&v| (PIXEL_MIN..=PIXEL_MAX).contains(&v)));
        }
    }

    #[test]
    fn generator_rejects_nonpositive_epsilon() {
        let gen = build_generator(&[1, 32, 32], 16.0, 13).unwrap();
        let img = rand_image(&[1, 32, 32], 14);
        assert!(gen.generate_adversarial(&img, 0.0).is_err());
        assert!(gen.generate_adversarial(&img, -1.0).is_err());
    }

    #[test]
    fn two_level_generator_handles_sides_not_divisible_by_8() {
        let gen = build_generator(&[1, 28, 28], 16.0, 15).unwrap();
        assert_eq!(gen.graph().output_shape(), &[1, 28, 28]);
        let img = rand_image(&[1, 28, 28], 16);
        assert_eq!(gen.generate_adversarial(&img, 8.0).unwrap().shape(), img.shape());
    }

    #[test]
    fn hand_chained_backward_matches_graph_head() {
        let mut gen = build_generator(&[1, 16, 16], 12.0, 17).unwrap();
        // perturb the zero final layer so gradients flow everywhere
        perturb_params(&mut gen, 18, 0.05);
        let img = rand_image(&[1, 16, 16], 19);
        let eps = 12.0;

        let fwd = gen.generate_cached(&img, eps).unwrap();
        let (head_graph, clip_node) = gen.attack_graph(eps).unwrap();
        let head_acts = head_graph.evaluate(&img).unwrap();
        // production output may sit a few ulps inside the graph clip due
        // to the exact-budget projection
        let fdiff = head_acts
            .value(clip_node)
            .max_abs_diff(fwd.adversarial())
            .unwrap();
        assert!(fdiff <= 1e-4, "forward paths differ by {fdiff}");

        let seed_grad = rand_image(&[1, 16, 16], 20).map(|v| v / 255.0 - 0.5);
        let ours = gen.backward(&fwd, &seed_grad).unwrap();
        let reference = head_graph
            .backward_from(&head_acts, clip_node, &seed_grad)
            .unwrap();
        for (name, g) in &reference.params {
            let o = &ours.params[name];
            let diff = o.max_abs_diff(g).unwrap();
            assert!(diff <= 1e-6, "{name} differs by {diff}");
        }
        assert!(ours.input.max_abs_diff(&reference.input).unwrap() <= 1e-6);
    }

    #[test]
    fn budget_head_grad_check_passes() {
        // miniature encoder-decoder trunk with the same op composition as
        // the generator (strided conv / relu / upsample / tanh budget head),
        // small enough for an exhaustive finite-difference sweep; the seed
        // keeps every relu pre-activation away from the kink
        let seed = 303u64;
        let rt = |shape: &[usize], s: u64, lo: f32, hi: f32| {
            let mut rng = RngStream::new(s).next_rng();
            let n: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| uniform_in(&mut rng, lo, hi)).collect(),
            )
            .unwrap()
        };
        let mut b = GraphBuilder::new(&[1, 8, 8]).unwrap();
        let x = b.input();
        let n = b.scale_shift(x, NORM_SCALE, NORM_SHIFT).unwrap();
        let c1 = b
            .conv2d(n, "enc1", rt(&[2, 1, 3, 3], seed, -0.4, 0.4), rt(&[2], seed + 10, 0.1, 0.3), 2, 1)
            .unwrap();
        let r1 = b.relu(c1).unwrap();
        let c2 = b
            .conv2d(r1, "enc2", rt(&[4, 2, 3, 3], seed + 1, -0.4, 0.4), rt(&[4], seed + 11, 0.1, 0.3), 2, 1)
            .unwrap();
        let r2 = b.relu(c2).unwrap();
        let u1 = b.upsample_2x(r2).unwrap();
        let d1 = b
            .conv2d(u1, "dec1", rt(&[2, 4, 3, 3], seed + 2, -0.4, 0.4), rt(&[2], seed + 12, 0.1, 0.3), 1, 1)
            .unwrap();
        let rd = b.relu(d1).unwrap();
        let u2 = b.upsample_2x(rd).unwrap();
        let rho = b
            .conv2d(u2, "dec2", rt(&[1, 2, 3, 3], seed + 3, -0.2, 0.2), rt(&[1], seed + 13, -0.05, 0.05), 1, 1)
            .unwrap();
        let t = b.tanh(rho).unwrap();
        let s = b.scale_shift(t, 6.0, 0.0).unwrap();
        let a = b.add(s, x).unwrap();
        let c = b.clip(a, PIXEL_MIN, PIXEL_MAX).unwrap();
        let gp = b.global_avg_pool(c).unwrap();
        b.dense(gp, "probe", Tensor::new(vec![1, 1], vec![0.7]).unwrap(), Tensor::zeros(&[1]))
            .unwrap();
        let g = b.finish();
        // pixels away from the clip kink: interior values only
        let img = rt(&[1, 8, 8], seed + 20, 40.0, 215.0);
        let err = g.grad_check(&img, 1e-3).unwrap();
        assert!(err <= 1e-3, "budget head grad_check error {err}");
    }

    #[test]
    fn filter_starts_as_identity_and_stays_in_range() {
        let f = build_filter(&[1, 16, 16], 24).unwrap();
        let img = rand_image(&[1, 16, 16], 25);
        let out = f.apply(&img).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn classifier_checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = build_classifier("cnn-a", 10, &[1, 28, 28], 42).unwrap();
        m.save(
            &path,
            TrainMeta {
                seed: Some(42),
                epochs: Some(0),
                dataset_id: None,
            },
        )
        .unwrap();
        let back = ClassifierModel::load(&path).unwrap();
        assert_eq!(back.arch_name(), "cnn-a");
        for name in m.graph().param_names() {
            let a = m.graph().param(name).unwrap();
            let b = back.graph().param(name).unwrap();
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{name}");
        }
    }

    #[test]
    fn loading_wrong_arch_is_an_arch_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = build_classifier("cnn-a", 10, &[1, 28, 28], 1).unwrap();
        m.save(&path, TrainMeta::default()).unwrap();
        let err = ClassifierModel::load_expecting(&path, "cnn-b").unwrap_err();
        assert!(matches!(err, Error::ArchMismatch { .. }), "{err:?}");
    }

    #[test]
    fn loading_wrong_kind_is_a_kind_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let gen = build_generator(&[1, 32, 32], 16.0, 2).unwrap();
        gen.save(&path, TrainMeta::default()).unwrap();
        let err = ClassifierModel::load(&path).unwrap_err();
        assert!(matches!(err, Error::KindMismatch { .. }), "{err:?}");
        let (loaded, _) = load_model(&path).unwrap();
        assert!(matches!(loaded, LoadedModel::Generator(_)));
    }

    #[test]
    fn generator_checkpoint_restores_epsilon_train() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let gen = build_generator(&[1, 32, 32], 8.0, 3).unwrap();
        gen.save(&path, TrainMeta::default()).unwrap();
        let back = GeneratorModel::load(&path).unwrap();
        assert_eq!(back.epsilon_train(), 8.0);
        assert_eq!(back.input_shape(), &[1, 32, 32]);
    }
}
