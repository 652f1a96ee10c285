//! Training objectives and the train step.
//!
//! Every variant minimizes the flow loss on its (possibly heterogeneously)
//! noised input. The self-supervised variants add a feature-prediction term:
//! the student's projected layer-l state must match, under cosine similarity,
//! the layer-k state an EMA teacher computes from a cleaner view of the same
//! sample. The teacher runs in inference mode and its features enter the
//! student graph as constants, so no gradient ever reaches teacher weights;
//! teacher weights move only through the EMA blend.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::{self, DatasetSpec, Split};
use crate::dualts::{apply_plan, sample_plans, NoisingPlan, PlanMode};
use crate::error::{Error, Result};
use crate::flow::{gen_loss, TokenBatch};
use crate::model::{
    self, encoder_forward, encoder_init, register_encoder_params, register_params,
    EncoderConfig, EncoderParams, ModelParams, TransformerConfig,
};
use crate::rng::Philox;
use crate::schedules::TimestepDistribution;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveVariant {
    /// Flow matching only.
    Vanilla,
    /// Dual-timestep scheduling with the teacher-alignment loss.
    #[serde(rename = "selfflow")]
    SelfFlow,
    /// Alignment against a frozen, separately trained encoder on clean data.
    RepaExternal,
    /// Cross-layer self-alignment without masking; teacher sees 0.8·t.
    SraLike,
    /// Teacher alignment with homogeneous noise (no masking).
    #[serde(rename = "selfflow_no_mask")]
    SelfFlowNoMask,
    /// Dual scheduling with s confined just below t.
    #[serde(rename = "selfflow_near_dual")]
    SelfFlowNearDual,
    /// Cosine replaced by an l1 alignment metric.
    #[serde(rename = "selfflow_l1")]
    SelfFlowL1,
}

impl ObjectiveVariant {
    /// The noising plan each variant trains under.
    pub fn default_plan_mode(&self) -> PlanMode {
        match self {
            ObjectiveVariant::Vanilla
            | ObjectiveVariant::RepaExternal
            | ObjectiveVariant::SraLike
            | ObjectiveVariant::SelfFlowNoMask => PlanMode::Vanilla,
            ObjectiveVariant::SelfFlow | ObjectiveVariant::SelfFlowL1 => PlanMode::Dual,
            ObjectiveVariant::SelfFlowNearDual => PlanMode::NearDual,
        }
    }

    pub fn uses_teacher_alignment(&self) -> bool {
        matches!(
            self,
            ObjectiveVariant::SelfFlow
                | ObjectiveVariant::SraLike
                | ObjectiveVariant::SelfFlowNoMask
                | ObjectiveVariant::SelfFlowNearDual
                | ObjectiveVariant::SelfFlowL1
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepMetric {
    Cosine,
    L1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub variant: ObjectiveVariant,
    /// Representation-loss weight.
    pub gamma: f64,
    pub ema_decay: f64,
    pub student_tap: usize,
    pub teacher_tap: usize,
    pub masking_ratio: f64,
    /// Noising plan; defaults from the variant but an override lets the
    /// degraded schedules (full masking, per-token independence) run under
    /// the plain flow objective.
    pub plan_mode: PlanMode,
    /// Teacher timestep multiplier for the SRA-style baseline.
    pub sra_teacher_scale: f64,
}

impl ObjectiveConfig {
    pub fn for_variant(variant: ObjectiveVariant, model: &TransformerConfig) -> ObjectiveConfig {
        ObjectiveConfig {
            variant,
            gamma: 0.8,
            ema_decay: 0.9999,
            student_tap: model.student_tap(),
            teacher_tap: model.teacher_tap(),
            masking_ratio: 0.25,
            plan_mode: variant.default_plan_mode(),
            sra_teacher_scale: 0.8,
        }
    }

    pub fn validate(&self, model: &TransformerConfig) -> Result<()> {
        if self.student_tap >= self.teacher_tap {
            return Err(Error::Config(format!(
                "student tap {} must be below teacher tap {}",
                self.student_tap, self.teacher_tap
            )));
        }
        if self.teacher_tap >= model.depth {
            return Err(Error::Config(format!(
                "teacher tap {} out of range for depth {}",
                self.teacher_tap, model.depth
            )));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) && self.ema_decay != 0.0 {
            // decay 1.0 freezes the teacher; allowed for diagnostics
            if self.ema_decay != 1.0 {
                return Err(Error::Config(format!(
                    "ema decay must lie in [0,1], got {}",
                    self.ema_decay
                )));
            }
        }
        if self.variant.uses_teacher_alignment() && self.gamma > 0.0 && self.ema_decay <= 0.0 {
            return Err(Error::Config(
                "self-distilling variants need ema_decay > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn rep_metric(&self) -> RepMetric {
        match self.variant {
            ObjectiveVariant::SelfFlowL1 => RepMetric::L1,
            _ => RepMetric::Cosine,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Student, teacher, and optimizer state. The teacher never receives
/// gradients; it is exclusively the EMA blend of past students.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub opt_m: Vec<Tensor>,
    pub opt_v: Vec<Tensor>,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ModelParams) -> TrainState {
        let zeros: Vec<Tensor> = params.flat().iter().map(|t| Tensor::zeros(t.shape())).collect();
        TrainState {
            teacher: params.clone(),
            student: params,
            opt_m: zeros.clone(),
            opt_v: zeros,
            step: 0,
        }
    }
}

/// θ′ ← d·θ′ + (1−d)·θ over congruent parameter trees.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, decay: f64) -> Result<()> {
    let svals = student.flat();
    let mut tvals = teacher.flat_mut();
    if svals.len() != tvals.len() {
        return Err(Error::InvalidArg("parameter trees are not congruent".into()));
    }
    for (t, s) in tvals.iter_mut().zip(svals) {
        if t.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                lhs: tensor::fmt_shape(t.shape()),
                rhs: tensor::fmt_shape(s.shape()),
            });
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = decay * *tv + (1.0 - decay) * sv;
        }
    }
    Ok(())
}

/// Negative mean cosine similarity (or mean absolute difference) between
/// the student projection and detached teacher features over all tokens.
pub fn rep_loss(
    g: &mut Graph,
    student_proj: NodeId,
    teacher_hidden: &Tensor,
    metric: RepMetric,
) -> Result<NodeId> {
    let target = g.input(teacher_hidden.clone())?;
    match metric {
        RepMetric::Cosine => {
            let cos = g.cosine_sim_last(student_proj, target)?;
            let mean = g.mean_all(cos);
            Ok(g.scale(mean, -1.0))
        }
        RepMetric::L1 => {
            let diff = g.sub(student_proj, target)?;
            let a = g.abs(diff);
            Ok(g.mean_all(a))
        }
    }
}

/// Alignment against the frozen external encoder's features on clean data.
pub fn repa_external_loss(
    g: &mut Graph,
    student_proj: NodeId,
    encoder_feats: &Tensor,
) -> Result<NodeId> {
    rep_loss(g, student_proj, encoder_feats, RepMetric::Cosine)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_gen: f64,
    pub l_rep: f64,
    pub grad_norm: f64,
    /// Cosine slots zeroed by the norm guard, if any.
    pub degenerate_cosine_slots: usize,
}

#[allow(clippy::too_many_arguments)]
fn teacher_hidden_for(
    variant: ObjectiveVariant,
    teacher: &ModelParams,
    obj: &ObjectiveConfig,
    plans: &[NoisingPlan],
    x_taumin: &Tensor,
    x0: &Tensor,
    x1: &Tensor,
    labels: Option<&[usize]>,
) -> Result<Tensor> {
    let (b, n) = (x0.shape()[0], x0.shape()[1]);
    match variant {
        ObjectiveVariant::SelfFlow
        | ObjectiveVariant::SelfFlowNearDual
        | ObjectiveVariant::SelfFlowL1
        | ObjectiveVariant::SelfFlowNoMask => {
            // cleaner homogeneous view at tau_min (== t without masking)
            let mut tau = Vec::with_capacity(b * n);
            for p in plans {
                tau.extend(std::iter::repeat_n(p.tau_min, n));
            }
            let tau = Tensor::new(vec![b, n], tau)?;
            let (_, hiddens) = model::forward_eval(teacher, x_taumin, &tau, labels)?;
            Ok(hiddens[obj.teacher_tap].clone())
        }
        ObjectiveVariant::SraLike => {
            // fixed cleaner-teacher rule: teacher timestep = scale · t
            let mut tau = Vec::with_capacity(b * n);
            for p in plans {
                tau.extend(std::iter::repeat_n(p.t * obj.sra_teacher_scale, n));
            }
            let tau = Tensor::new(vec![b, n], tau)?;
            let x_teacher = crate::flow::interpolate(x0, x1, &tau)?;
            let (_, hiddens) = model::forward_eval(teacher, &x_teacher, &tau, labels)?;
            Ok(hiddens[obj.teacher_tap].clone())
        }
        _ => unreachable!("no teacher for this variant"),
    }
}

/// Frozen-encoder features on clean x0 at the encoder's feature tap.
pub fn encoder_features(encoder: &EncoderParams, x0: &Tensor) -> Result<Tensor> {
    let mut g = Graph::eval();
    let nodes = register_encoder_params(&mut g, encoder, false)?;
    let out = encoder_forward(&mut g, &nodes, &encoder.config, x0)?;
    Ok(g.value(out.hiddens[encoder.config.feature_tap()]).clone())
}

/// One optimization step.
///
/// Plan sampling order is fixed (one split per batch element, drawn before
/// anything else), so two objectives sharing a plan mode consume identical
/// randomness. With gamma = 0 the alignment branch is skipped entirely and
/// the update is bitwise identical to the plain flow objective under the
/// same plan mode and rng.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    state: &mut TrainState,
    batch: &TokenBatch,
    x1: &Tensor,
    obj: &ObjectiveConfig,
    dist: &TimestepDistribution,
    opt: &AdamConfig,
    encoder: Option<&EncoderParams>,
    rng: &mut Philox,
) -> Result<StepMetrics> {
    let cfg = state.student.config.clone();
    obj.validate(&cfg)?;
    let x0 = &batch.x;
    if x0.shape() != x1.shape() {
        return Err(Error::ShapeMismatch {
            op: "train_step",
            lhs: tensor::fmt_shape(x0.shape()),
            rhs: tensor::fmt_shape(x1.shape()),
        });
    }
    let (b, n) = (x0.shape()[0], x0.shape()[1]);
    let labels = batch.labels.as_deref();

    // (1) one independent plan per batch element
    let plans = sample_plans(dist, obj.masking_ratio, n, b, obj.plan_mode, rng)?;
    let (x_tau, x_taumin) = apply_plan(&plans, x0, x1)?;
    let mut tau = Vec::with_capacity(b * n);
    for p in &plans {
        tau.extend_from_slice(&p.tau);
    }
    let tau = Tensor::new(vec![b, n], tau)?;

    // (2) student forward on the heterogeneous view
    let mut g = Graph::new();
    let nodes = register_params(&mut g, &state.student, true)?;
    let out = model::forward(&mut g, &nodes, &cfg, &x_tau, &tau, labels)?;

    // (3) flow loss; the regression target x1 − x0 is shared by all tokens
    let l_gen = gen_loss(&mut g, out.velocity, x0, x1)?;

    // (4) variant-specific alignment term
    let use_rep = obj.gamma > 0.0
        && (obj.variant.uses_teacher_alignment()
            || obj.variant == ObjectiveVariant::RepaExternal);
    let (total, l_rep_id) = if use_rep {
        let target = match obj.variant {
            ObjectiveVariant::RepaExternal => {
                let enc = encoder.ok_or_else(|| {
                    Error::InvalidArg(
                        "repa_external requires a frozen encoder; train one first".into(),
                    )
                })?;
                encoder_features(enc, x0)?
            }
            _ => teacher_hidden_for(
                obj.variant,
                &state.teacher,
                obj,
                &plans,
                &x_taumin,
                x0,
                x1,
                labels,
            )?,
        };
        let proj = model::project_head(&mut g, &nodes, out.hiddens[obj.student_tap])?;
        let l_rep = rep_loss(&mut g, proj, &target, obj.rep_metric())?;
        let weighted = g.scale(l_rep, obj.gamma);
        (g.add(l_gen, weighted)?, Some(l_rep))
    } else {
        (l_gen, None)
    };

    let l_gen_val = g.scalar_value(l_gen);
    let l_rep_val = l_rep_id.map(|id| g.scalar_value(id)).unwrap_or(0.0);
    let total_val = g.scalar_value(total);
    if !total_val.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss at step {} (variant {:?}: l_gen={l_gen_val}, l_rep={l_rep_val})",
            state.step, obj.variant
        )));
    }

    // (5) backward + decoupled-weight-decay Adam
    let grads = g.grad(total, nodes.flat())?;
    let mut grad_sq = 0.0;
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    {
        let mut params = state.student.flat_mut();
        for (i, id) in nodes.flat().iter().enumerate() {
            let grad = grads.get(*id).expect("gradient for every leaf");
            let m = state.opt_m[i].data_mut();
            let v = state.opt_v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let gj = grad.data()[j];
                grad_sq += gj * gj;
                m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * gj;
                v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= opt.lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * p[j]);
            }
        }
    }

    // (6) EMA blend into the teacher
    ema_update(&mut state.teacher, &state.student, obj.ema_decay)?;
    state.step += 1;

    Ok(StepMetrics {
        step: state.step,
        l_gen: l_gen_val,
        l_rep: l_rep_val,
        grad_norm: grad_sq.sqrt(),
        degenerate_cosine_slots: g.degenerate_cosine_slots,
    })
}

/// Train the timestep-free classifier to serve as the frozen external
/// encoder. Errors if held-out accuracy does not reach `target_acc` within
/// `max_steps`.
pub fn train_probe_encoder(
    spec: &DatasetSpec,
    data_seed: u64,
    model_cfg: &TransformerConfig,
    target_acc: f64,
    max_steps: usize,
    rng: &mut Philox,
) -> Result<EncoderParams> {
    let ecfg = EncoderConfig::for_model(model_cfg);
    let mut params = encoder_init(&ecfg, rng)?;
    let mut opt_m: Vec<Tensor> = params.flat().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut opt_v = opt_m.clone();
    let opt = AdamConfig::default();
    let batch_size = 32;
    let eval_every = 100;
    let n_eval = 256;

    let eval_acc = |params: &EncoderParams| -> Result<f64> {
        let batch = data::batch(spec, data_seed, Split::Heldout, &(0..n_eval).collect::<Vec<_>>())?;
        let mut g = Graph::eval();
        let nodes = register_encoder_params(&mut g, params, false)?;
        let out = encoder_forward(&mut g, &nodes, &ecfg, &batch.x)?;
        let logits = g.value(out.logits);
        let k = ecfg.num_classes;
        let labels = batch.labels.as_ref().expect("labeled dataset");
        let mut correct = 0usize;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    };

    for step in 0..max_steps {
        let indices: Vec<usize> = (0..batch_size)
            .map(|i| (step * batch_size + i) % spec.n_train)
            .collect();
        let batch = data::batch(spec, data_seed, Split::Train, &indices)?;
        let labels = batch.labels.as_ref().expect("labeled dataset");

        let mut g = Graph::new();
        let nodes = register_encoder_params(&mut g, &params, true)?;
        let out = encoder_forward(&mut g, &nodes, &ecfg, &batch.x)?;
        // cross-entropy via log-softmax against one-hot rows
        let probs = g.softmax_last(out.logits);
        let logp = g.ln(probs)?;
        let k = ecfg.num_classes;
        let mut onehot = vec![0.0; batch_size * k];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * k + l] = 1.0;
        }
        let oh = g.input(Tensor::new(vec![batch_size, k], onehot)?)?;
        let picked = g.mul(logp, oh)?;
        let summed = g.sum_all(picked);
        let loss = g.scale(summed, -1.0 / batch_size as f64);

        let grads = g.grad(loss, nodes.flat())?;
        let t = (step + 1) as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        let mut flat = params.flat_mut();
        for (i, id) in nodes.flat().iter().enumerate() {
            let grad = grads.get(*id).expect("gradient");
            let m = opt_m[i].data_mut();
            let v = opt_v[i].data_mut();
            let p = flat[i].data_mut();
            for j in 0..p.len() {
                let gj = grad.data()[j];
                m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * gj;
                v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * gj * gj;
                p[j] -= opt.lr * (m[j] / bc1 / ((v[j] / bc2).sqrt() + opt.eps)
                    + opt.weight_decay * p[j]);
            }
        }
        drop(flat);

        if (step + 1) % eval_every == 0 && eval_acc(&params)? >= target_acc {
            return Ok(params);
        }
    }
    let final_acc = eval_acc(&params)?;
    if final_acc >= target_acc {
        Ok(params)
    } else {
        Err(Error::Numerical(format!(
            "probe encoder reached only {final_acc:.3} held-out accuracy \
             (target {target_acc}); use a simpler dataset spec or more steps"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TransformerConfig {
        TransformerConfig {
            depth: 3,
            hidden: 16,
            heads: 2,
            token_dim: 4,
            tokens: 4,
            num_classes: 3,
            head_hidden: 8,
        }
    }

    fn randn(rng: &mut Philox, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn toy_batch(rng: &mut Philox, b: usize) -> (TokenBatch, Tensor) {
        let x0 = randn(rng, &[b, 4, 4]);
        let x1 = randn(rng, &[b, 4, 4]);
        let labels: Vec<usize> = (0..b).map(|i| i % 3).collect();
        (TokenBatch::new(x0, Some(labels)).unwrap(), x1)
    }

    #[test]
    fn rep_loss_self_similarity() {
        let mut rng = Philox::seed(1);
        let h = randn(&mut rng, &[2, 3, 8]);
        let mut g = Graph::new();
        let s = g.input(h.clone()).unwrap();
        let l = rep_loss(&mut g, s, &h, RepMetric::Cosine).unwrap();
        assert!((g.scalar_value(l) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rep_loss_orthogonal_tokens() {
        let a = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let s = g.input(a).unwrap();
        let l = rep_loss(&mut g, s, &b, RepMetric::Cosine).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
    }

    #[test]
    fn cosine_rep_loss_scale_invariant() {
        let mut rng = Philox::seed(2);
        let student = randn(&mut rng, &[2, 3, 8]);
        let teacher = randn(&mut rng, &[2, 3, 8]);
        let run = |s: &Tensor| {
            let mut g = Graph::new();
            let sid = g.input(s.clone()).unwrap();
            let l = rep_loss(&mut g, sid, &teacher, RepMetric::Cosine).unwrap();
            g.scalar_value(l)
        };
        let l1 = run(&student);
        let l2 = run(&tensor::scale(&student, 5.0));
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn rep_loss_bounded() {
        let mut rng = Philox::seed(3);
        for _ in 0..20 {
            let s = randn(&mut rng, &[2, 2, 4]);
            let t = randn(&mut rng, &[2, 2, 4]);
            let mut g = Graph::new();
            let sid = g.input(s).unwrap();
            let l = rep_loss(&mut g, sid, &t, RepMetric::Cosine).unwrap();
            let v = g.scalar_value(l);
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn random_unit_vectors_nearly_orthogonal() {
        // mean cosine of random H=128 pairs concentrates near 0
        let mut rng = Philox::seed(4);
        let n_pairs = 10_000;
        let a = randn(&mut rng, &[n_pairs, 128]);
        let b = randn(&mut rng, &[n_pairs, 128]);
        let (cos, _) = tensor::cosine_sim_last(&a, &b).unwrap();
        let mean = cos.data().iter().sum::<f64>() / n_pairs as f64;
        assert!(mean.abs() < 0.1, "mean cosine {mean}");
    }

    #[test]
    fn ema_blend_edge_cases() {
        let cfg = tiny_config();
        let student = model::init_params(&cfg, &mut Philox::seed(5)).unwrap();
        let teacher0 = model::init_params(&cfg, &mut Philox::seed(6)).unwrap();

        // d = 0: teacher becomes the student exactly
        let mut teacher = teacher0.clone();
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher.flat(), student.flat());

        // d = 1: teacher unchanged
        let mut teacher = teacher0.clone();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher.flat(), teacher0.flat());

        // the reported decay constant
        let mut one = model::init_params(&cfg, &mut Philox::seed(7)).unwrap();
        for t in one.flat_mut() {
            *t = Tensor::full(t.shape(), 1.0);
        }
        let mut zero = one.clone();
        for t in zero.flat_mut() {
            *t = Tensor::zeros(t.shape());
        }
        ema_update(&mut one, &zero, 0.9999).unwrap();
        for t in one.flat() {
            for &v in t.data() {
                assert!((v - 0.9999).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ema_incongruent_trees_rejected() {
        let cfg = tiny_config();
        let student = model::init_params(&cfg, &mut Philox::seed(8)).unwrap();
        let mut bigger = cfg.clone();
        bigger.hidden = 32;
        let mut teacher = model::init_params(&bigger, &mut Philox::seed(8)).unwrap();
        assert!(ema_update(&mut teacher, &student, 0.5).is_err());
    }

    #[test]
    fn teacher_is_exact_ema_after_step() {
        let cfg = tiny_config();
        let params = model::init_params(&cfg, &mut Philox::seed(9)).unwrap();
        let mut state = TrainState::new(params);
        let obj = ObjectiveConfig::for_variant(ObjectiveVariant::SelfFlow, &cfg);
        let mut rng = Philox::seed(10);
        let (batch, x1) = toy_batch(&mut rng, 2);

        let teacher_before = state.teacher.clone();
        let mut step_rng = Philox::keyed(77, 0);
        train_step(
            &mut state,
            &batch,
            &x1,
            &obj,
            &TimestepDistribution::Uniform,
            &AdamConfig::default(),
            None,
            &mut step_rng,
        )
        .unwrap();

        // teacher must equal the exact blend of pre-step teacher and
        // post-step student, bitwise
        let d = obj.ema_decay;
        for ((t_after, t_before), s_after) in state
            .teacher
            .flat()
            .iter()
            .zip(teacher_before.flat())
            .zip(state.student.flat())
        {
            for i in 0..t_after.numel() {
                let expect = d * t_before.data()[i] + (1.0 - d) * s_after.data()[i];
                assert_eq!(t_after.data()[i].to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn gamma_zero_matches_plain_flow_bitwise() {
        let cfg = tiny_config();
        let params = model::init_params(&cfg, &mut Philox::seed(11)).unwrap();
        let dist = TimestepDistribution::Uniform;
        let opt = AdamConfig::default();

        let mut selfflow_zero = ObjectiveConfig::for_variant(ObjectiveVariant::SelfFlow, &cfg);
        selfflow_zero.gamma = 0.0;
        // plain flow objective under the same dual plans
        let mut plain = ObjectiveConfig::for_variant(ObjectiveVariant::Vanilla, &cfg);
        plain.plan_mode = PlanMode::Dual;

        let mut state_a = TrainState::new(params.clone());
        let mut state_b = TrainState::new(params);
        let mut rng = Philox::seed(12);
        let (batch, x1) = toy_batch(&mut rng, 2);

        for step in 0..3 {
            let mut rng_a = Philox::keyed(99, step);
            let mut rng_b = Philox::keyed(99, step);
            let ma = train_step(&mut state_a, &batch, &x1, &selfflow_zero, &dist, &opt, None, &mut rng_a)
                .unwrap();
            let mb = train_step(&mut state_b, &batch, &x1, &plain, &dist, &opt, None, &mut rng_b)
                .unwrap();
            assert_eq!(ma.l_gen.to_bits(), mb.l_gen.to_bits());
        }
        for (a, b) in state_a.student.flat().iter().zip(state_b.student.flat()) {
            for i in 0..a.numel() {
                assert_eq!(a.data()[i].to_bits(), b.data()[i].to_bits());
            }
        }
    }

    #[test]
    fn train_step_is_deterministic() {
        let cfg = tiny_config();
        let params = model::init_params(&cfg, &mut Philox::seed(13)).unwrap();
        let obj = ObjectiveConfig::for_variant(ObjectiveVariant::SelfFlow, &cfg);
        let dist = TimestepDistribution::Uniform;
        let opt = AdamConfig::default();
        let mut rng = Philox::seed(14);
        let (batch, x1) = toy_batch(&mut rng, 2);

        let run = || {
            let mut state = TrainState::new(params.clone());
            let mut step_rng = Philox::keyed(55, 0);
            train_step(&mut state, &batch, &x1, &obj, &dist, &opt, None, &mut step_rng).unwrap();
            state
        };
        let s1 = run();
        let s2 = run();
        for (a, b) in s1.student.flat().iter().zip(s2.student.flat()) {
            assert_eq!(a.data(), b.data());
        }
        for (a, b) in s1.opt_m.iter().zip(&s2.opt_m) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn vanilla_and_selfflow_diverge() {
        let cfg = tiny_config();
        let params = model::init_params(&cfg, &mut Philox::seed(15)).unwrap();
        let dist = TimestepDistribution::Uniform;
        let opt = AdamConfig::default();
        let vanilla = ObjectiveConfig::for_variant(ObjectiveVariant::Vanilla, &cfg);
        let selfflow = ObjectiveConfig::for_variant(ObjectiveVariant::SelfFlow, &cfg);
        let mut rng = Philox::seed(16);
        let (batch, x1) = toy_batch(&mut rng, 2);

        let mut sa = TrainState::new(params.clone());
        let mut sb = TrainState::new(params);
        let mut ra = Philox::keyed(33, 0);
        let mut rb = Philox::keyed(33, 0);
        train_step(&mut sa, &batch, &x1, &vanilla, &dist, &opt, None, &mut ra).unwrap();
        train_step(&mut sb, &batch, &x1, &selfflow, &dist, &opt, None, &mut rb).unwrap();
        assert_ne!(
            sa.student.flat().iter().map(|t| t.data().to_vec()).collect::<Vec<_>>(),
            sb.student.flat().iter().map(|t| t.data().to_vec()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn loss_decreases_over_short_run() {
        // 200 steps on the 8-class toy data at depth 6: the flow loss must
        // fall at least 30% below its step-10 moving average, in median
        // over 3 seeds
        let cfg = TransformerConfig {
            depth: 6,
            hidden: 32,
            heads: 4,
            token_dim: crate::data::TOKEN_DIM,
            tokens: crate::data::TOKENS,
            num_classes: 8,
            head_hidden: 16,
        };
        let spec = crate::data::DatasetSpec::toy_default(18, 256, 64);
        let obj = ObjectiveConfig::for_variant(ObjectiveVariant::SelfFlow, &cfg);
        let dist = TimestepDistribution::Uniform;
        let opt = AdamConfig::default();
        let batch_size = 4usize;

        let mut ratios = Vec::new();
        for seed in 0..3u64 {
            let params = model::init_params(&cfg, &mut Philox::seed(100 + seed)).unwrap();
            let mut state = TrainState::new(params);
            let mut losses = Vec::new();
            for step in 0..200u64 {
                let indices: Vec<usize> = (0..batch_size)
                    .map(|i| (step as usize * batch_size + i) % spec.n_train)
                    .collect();
                let batch = data::batch(&spec, 18, Split::Train, &indices).unwrap();
                let mut nrng = Philox::keyed(200 + seed, step);
                let x1 = randn(&mut nrng, batch.x.shape());
                let mut prng = Philox::keyed(300 + seed, step);
                let m =
                    train_step(&mut state, &batch, &x1, &obj, &dist, &opt, None, &mut prng)
                        .unwrap();
                losses.push(m.l_gen);
            }
            let early: f64 = losses[..10].iter().sum::<f64>() / 10.0;
            let late: f64 = losses[190..].iter().sum::<f64>() / 10.0;
            ratios.push(late / early);
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ratios[1];
        assert!(
            median <= 0.7,
            "median late/early loss ratio {median:.3} (per-seed {ratios:?})"
        );
    }
}
