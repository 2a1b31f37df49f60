//! Mini-batch training: Adam with the halve-every-20-epochs schedule,
//! per-sample forward graphs joined by a batch loss graph, DCCA coupling,
//! deterministic shuffling, and best-validation checkpoint selection.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cohort::{OrganSample, Split};
use crate::backbone::organ_roi_resize;
use crate::losses::{
    cross_entropy_loss, dcca_loss, hybrid_loss, ordinal_decode, ordinal_loss, TwoLayerProjection,
    DCCA_EPS,
};
use crate::metrics::kendall_tau_b;
use crate::model::{moon_forward, register_model, ModelConfig, ModelOutputs, PriorMode};
use crate::params::{init_rng, ParamStore};
use crate::priors::VoxelMask;
use crate::seed::derive_seed;
use crate::tensor::{backward, backward_seeded, Graph, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Ordinal,
    Ce,
    Hybrid,
}

impl LossMode {
    pub fn parse(s: &str) -> Option<LossMode> {
        match s {
            "ordinal" => Some(LossMode::Ordinal),
            "ce" => Some(LossMode::Ce),
            "hybrid" => Some(LossMode::Hybrid),
            _ => None,
        }
    }

    /// CE and hybrid run the K-logit ReLU head.
    pub fn ce_head(self) -> bool {
        !matches!(self, LossMode::Ordinal)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Toy default 1e-3; the full-scale value 1e-5 remains selectable.
    pub lr: f64,
    pub lambda: f64,
    pub seed: u64,
    pub dcca: bool,
    pub loss: LossMode,
    pub augment: bool,
    pub dcca_hidden: usize,
    pub dcca_out: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            lr: 1e-3,
            lambda: 0.9,
            seed: 0,
            dcca: true,
            loss: LossMode::Ordinal,
            augment: false,
            dcca_hidden: 8,
            dcca_out: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| TensorError::Invalid {
            op: "train_config",
            msg,
        };
        if self.epochs == 0 {
            return Err(err("epochs must be >= 1".into()));
        }
        if self.dcca && self.batch_size < 4 {
            return Err(err("batch size must be >= 4 when dcca is enabled".into()));
        }
        if self.batch_size == 0 {
            return Err(err("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(err(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if !(self.lr > 0.0) {
            return Err(err("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Piecewise schedule: halve every 20 epochs.
pub fn lr_schedule(epoch: usize, initial: f64) -> f64 {
    initial * 0.5f64.powi((epoch / 20) as i32)
}

/// Adam first/second moments plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

/// Bias-corrected Adam update for every parameter with a gradient.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for (name, g) in grads {
        let p = store.get_mut(name)?;
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + EPS);
        }
    }
    Ok(())
}

/// A subject reduced to model-ready arrays.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub grade: usize,
    pub split: Split,
    pub rois: [Vec<f64>; 3],
    pub onehot: Vec<f64>,
}

/// Crops each organ ROI to its mask's bounding box and resizes to the
/// backbone input shapes.
pub fn prepare_from_parts(
    id: &str,
    grade: usize,
    split: Split,
    rois: &[Vec<f64>; 3],
    masks: &[VoxelMask; 3],
    onehot: Vec<f64>,
    cfg: &ModelConfig,
) -> Result<TrainSample> {
    let graph = Graph::new();
    let mut resized: [Vec<f64>; 3] = Default::default();
    for o in 0..3 {
        let m = &masks[o];
        let v = Tensor::constant(
            &graph,
            rois[o].clone(),
            vec![1, m.shape[0], m.shape[1], m.shape[2]],
        );
        resized[o] = organ_roi_resize(&v, m, cfg.backbones[o].input_shape)?.value();
    }
    Ok(TrainSample {
        id: id.to_string(),
        grade,
        split,
        rois: resized,
        onehot,
    })
}

pub fn prepare_sample(s: &OrganSample, cfg: &ModelConfig) -> Result<TrainSample> {
    prepare_from_parts(
        &s.id,
        s.grade,
        s.split,
        &s.rois,
        &s.masks,
        s.prior.onehot.clone(),
        cfg,
    )
}

fn register_dcca(store: &mut ParamStore, cfg: &TrainConfig, logit_dim: usize, rng: &mut ChaCha8Rng) {
    for pair in ["el", "es"] {
        for side in ["q", "r"] {
            let p = format!("dcca.{pair}.{side}");
            store.insert_xavier(&format!("{p}.w1"), vec![logit_dim, cfg.dcca_hidden], logit_dim, cfg.dcca_hidden, rng);
            store.insert_zeros(&format!("{p}.b1"), vec![cfg.dcca_hidden]);
            store.insert_xavier(&format!("{p}.w2"), vec![cfg.dcca_hidden, cfg.dcca_out], cfg.dcca_hidden, cfg.dcca_out, rng);
            store.insert_zeros(&format!("{p}.b2"), vec![cfg.dcca_out]);
        }
    }
}

fn load_projection(graph: &Rc<Graph>, store: &ParamStore, prefix: &str) -> Result<TwoLayerProjection> {
    Ok(TwoLayerProjection {
        w1: store.leaf(graph, &format!("{prefix}.w1"))?,
        b1: store.leaf(graph, &format!("{prefix}.b1"))?,
        w2: store.leaf(graph, &format!("{prefix}.w2"))?,
        b2: store.leaf(graph, &format!("{prefix}.b2"))?,
    })
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub overall: f64,
    pub ordinal: f64,
    pub dcca_l: Option<f64>,
    pub dcca_s: Option<f64>,
    pub val_acc: f64,
    pub val_tau: Option<f64>,
}

pub const TRAIN_LOG_HEADER: [&str; 8] = [
    "epoch", "lr", "overall", "ordinal", "dcca_l", "dcca_s", "val_acc", "val_tau",
];

impl EpochLog {
    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        vec![
            self.epoch.to_string(),
            format!("{:.8}", self.lr),
            format!("{:.6}", self.overall),
            format!("{:.6}", self.ordinal),
            opt(self.dcca_l),
            opt(self.dcca_s),
            format!("{:.6}", self.val_acc),
            opt(self.val_tau),
        ]
    }
}

pub struct TrainOutcome {
    /// Best-validation weights (multi-class accuracy, ties broken by tau).
    pub best: ParamStore,
    /// Weights after the final epoch.
    pub last: ParamStore,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Predicted grade from one fused logit row.
pub fn decode_grade(h_f: &[f64], loss: LossMode) -> usize {
    match loss {
        LossMode::Ordinal => ordinal_decode(h_f),
        LossMode::Ce | LossMode::Hybrid => {
            let mut best = 0;
            for (i, v) in h_f.iter().enumerate() {
                if *v > h_f[best] {
                    best = i;
                }
            }
            best
        }
    }
}

/// Continuous score (expected grade) for AUC under the ordinal head, or
/// softmax-expected grade under CE.
pub fn grade_score(h_f: &[f64], loss: LossMode) -> f64 {
    match loss {
        LossMode::Ordinal => h_f.iter().sum(),
        LossMode::Ce | LossMode::Hybrid => {
            let mx = h_f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = h_f.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exp.iter().sum();
            exp.iter().enumerate().map(|(g, e)| g as f64 * e / z).sum()
        }
    }
}

fn augment_roi(roi: &[f64], dims: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let flip: [bool; 3] = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
    let jitter = Normal::new(0.0, 0.02).unwrap();
    let [h, w, d] = dims;
    let mut out = vec![0.0; roi.len()];
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                let sx = if flip[0] { h - 1 - x } else { x };
                let sy = if flip[1] { w - 1 - y } else { y };
                let sz = if flip[2] { d - 1 - z } else { z };
                out[(x * w + y) * d + z] = roi[(sx * w + sy) * d + sz] + jitter.sample(rng);
            }
        }
    }
    out
}

fn forward_prepared(
    graph: &Rc<Graph>,
    store: &ParamStore,
    cfg: &ModelConfig,
    s: &TrainSample,
    aug_rng: Option<&mut ChaCha8Rng>,
) -> Result<ModelOutputs> {
    let mut rois: Vec<Tensor> = Vec::with_capacity(3);
    let mut aug = aug_rng;
    for o in 0..3 {
        let dims = cfg.backbones[o].input_shape;
        let data = match aug.as_deref_mut() {
            Some(rng) => augment_roi(&s.rois[o], dims, rng),
            None => s.rois[o].clone(),
        };
        rois.push(Tensor::constant(graph, data, vec![1, dims[0], dims[1], dims[2]]));
    }
    let rois: [Tensor; 3] = [rois[0].clone(), rois[1].clone(), rois[2].clone()];
    let onehot = (cfg.prior_mode == PriorMode::Onehot).then_some(s.onehot.as_slice());
    moon_forward(graph, store, cfg, &rois, onehot)
}

fn accumulate_grads(
    issued: &[(String, Tensor)],
    grads: &mut BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    for (name, t) in issued {
        if let Some(g) = t.grad() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::Invalid {
                    op: "train",
                    msg: format!("non-finite gradient for parameter {name}"),
                });
            }
            let slot = grads.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in slot.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    Ok(())
}

fn nan_diagnostic(graphs: &[Rc<Graph>]) -> String {
    for g in graphs {
        if let Some((id, op)) = g.first_non_finite() {
            return format!("non-finite loss: first offending op `{op}` (node {id})");
        }
    }
    "non-finite loss: source not located".to_string()
}

/// Fused logit row for one sample under the current weights.
pub fn predict_logits(store: &ParamStore, cfg: &ModelConfig, s: &TrainSample) -> Result<Vec<f64>> {
    let graph = Graph::new();
    let out = forward_prepared(&graph, store, cfg, s, None)?;
    store.drain_issued();
    Ok(out.h_f.value())
}

/// Evaluates decoded grades on a split; returns (accuracy, tau).
pub fn evaluate(
    store: &ParamStore,
    cfg: &ModelConfig,
    samples: &[&TrainSample],
    loss: LossMode,
) -> Result<(f64, Option<f64>)> {
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    for s in samples {
        let graph = Graph::new();
        let out = forward_prepared(&graph, store, cfg, s, None)?;
        store.drain_issued();
        labels.push(s.grade);
        preds.push(decode_grade(&out.h_f.value(), loss));
    }
    let acc = labels
        .iter()
        .zip(&preds)
        .filter(|(a, b)| a == b)
        .count() as f64
        / labels.len().max(1) as f64;
    let tau = if labels.len() >= 2 {
        kendall_tau_b(&labels, &preds)?
    } else {
        None
    };
    Ok((acc, tau))
}

/// Full training loop. Deterministic given config seeds.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[TrainSample],
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if model_cfg.ce_head() != cfg.loss.ce_head() {
        return Err(TensorError::Invalid {
            op: "train",
            msg: "model head type inconsistent with loss mode".into(),
        });
    }
    let train_idx: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].split == Split::Train)
        .collect();
    let val: Vec<&TrainSample> = samples.iter().filter(|s| s.split == Split::Val).collect();
    if train_idx.is_empty() || val.is_empty() {
        return Err(TensorError::Invalid {
            op: "train",
            msg: "cohort needs nonempty train and val splits".into(),
        });
    }
    let dcca_active = cfg.dcca && model_cfg.multi_organ;

    let mut rng = init_rng(cfg.seed);
    let mut store = ParamStore::new();
    register_model(&mut store, model_cfg, &mut rng);
    if dcca_active {
        register_dcca(&mut store, cfg, model_cfg.logit_dim(), &mut rng);
    }
    store.drain_issued();

    let k = model_cfg.k;
    let mut adam = AdamState::default();
    let mut log = Vec::new();
    let mut best: Option<(f64, f64, usize, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.lr);
        let mut order = train_idx.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "epoch-shuffle", epoch as u64));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut aug_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "augment", epoch as u64));

        let (mut sum_overall, mut sum_primary, mut sum_del, mut sum_des) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let min_rows = if dcca_active { 2 } else { 1 };
            if chunk.len() < min_rows {
                continue;
            }
            // Per-sample forward graphs.
            let mut graphs = Vec::new();
            let mut outs = Vec::new();
            let mut issued = Vec::new();
            for &i in chunk {
                let graph = Graph::new();
                let aug = cfg.augment.then_some(&mut aug_rng);
                let out = forward_prepared(&graph, &store, model_cfg, &samples[i], aug)?;
                issued.push(store.drain_issued());
                outs.push(out);
                graphs.push(graph);
            }

            // Batch loss graph over the stacked logit rows.
            let gb = Graph::new();
            let d = model_cfg.logit_dim();
            let n = chunk.len();
            let stack = |get: &dyn Fn(&ModelOutputs) -> Vec<f64>| -> Tensor {
                let data: Vec<f64> = outs.iter().flat_map(|o| get(o)).collect();
                Tensor::leaf(&gb, data, vec![n, d], true)
            };
            let h_f = stack(&|o| o.h_f.value());
            let grades: Vec<usize> = chunk.iter().map(|&i| samples[i].grade).collect();
            let primary = match cfg.loss {
                LossMode::Ordinal => ordinal_loss(&h_f, &grades, k)?,
                LossMode::Ce => cross_entropy_loss(&h_f, &grades)?,
                LossMode::Hybrid => {
                    let ce = cross_entropy_loss(&h_f, &grades)?;
                    let ord = ordinal_loss(&h_f.slice_axis(1, 0, k - 1)?.sigmoid(), &grades, k)?;
                    hybrid_loss(&ce, &ord, 0.5)?
                }
            };

            let mut dcca_tensors = None;
            let overall = if dcca_active {
                let h_e = stack(&|o| o.h_e.value());
                let h_l = stack(&|o| o.h_l.as_ref().unwrap().value());
                let h_s = stack(&|o| o.h_s.as_ref().unwrap().value());
                let p_el_q = load_projection(&gb, &store, "dcca.el.q")?;
                let p_el_r = load_projection(&gb, &store, "dcca.el.r")?;
                let p_es_q = load_projection(&gb, &store, "dcca.es.q")?;
                let p_es_r = load_projection(&gb, &store, "dcca.es.r")?;
                let d_el = dcca_loss(&h_e, &h_l, &p_el_q, &p_el_r, DCCA_EPS)?;
                let d_es = dcca_loss(&h_e, &h_s, &p_es_q, &p_es_r, DCCA_EPS)?;
                let total = primary
                    .scale(cfg.lambda)
                    .add(&d_el.add(&d_es)?.scale(1.0 - cfg.lambda))?;
                dcca_tensors = Some((h_e, h_l, h_s, d_el, d_es));
                total
            } else {
                primary.clone()
            };

            if !overall.item().is_finite() {
                let mut all = graphs.clone();
                all.push(Rc::clone(&gb));
                return Err(TensorError::Invalid {
                    op: "train",
                    msg: nan_diagnostic(&all),
                });
            }

            backward(&overall)?;
            let batch_issued = store.drain_issued();
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            accumulate_grads(&batch_issued, &mut grads)?;

            // Seed per-sample backward sweeps with the batch-graph rows.
            let hf_grad = h_f.grad().unwrap_or_else(|| vec![0.0; n * d]);
            let branch_grads = dcca_tensors.as_ref().map(|(he, hl, hs, _, _)| {
                (
                    he.grad().unwrap_or_else(|| vec![0.0; n * d]),
                    hl.grad().unwrap_or_else(|| vec![0.0; n * d]),
                    hs.grad().unwrap_or_else(|| vec![0.0; n * d]),
                )
            });
            for (i, out) in outs.iter().enumerate() {
                let row = |g: &Vec<f64>| g[i * d..(i + 1) * d].to_vec();
                let mut roots: Vec<(&Tensor, Vec<f64>)> = vec![(&out.h_f, row(&hf_grad))];
                if let Some((ge, gl, gs)) = &branch_grads {
                    roots.push((&out.h_e, row(ge)));
                    roots.push((out.h_l.as_ref().unwrap(), row(gl)));
                    roots.push((out.h_s.as_ref().unwrap(), row(gs)));
                }
                backward_seeded(&roots)?;
                accumulate_grads(&issued[i], &mut grads)?;
            }

            adam_step(&mut store, &grads, &mut adam, lr)?;
            sum_overall += overall.item();
            sum_primary += primary.item();
            if let Some((_, _, _, d_el, d_es)) = &dcca_tensors {
                sum_del += d_el.item();
                sum_des += d_es.item();
            }
            batches += 1;
        }

        let (val_acc, val_tau) = evaluate(&store, model_cfg, &val, cfg.loss)?;
        let b = batches.max(1) as f64;
        log.push(EpochLog {
            epoch,
            lr,
            overall: sum_overall / b,
            ordinal: sum_primary / b,
            dcca_l: dcca_active.then_some(sum_del / b),
            dcca_s: dcca_active.then_some(sum_des / b),
            val_acc,
            val_tau,
        });

        let tau_v = val_tau.unwrap_or(-1.0);
        let improved = match &best {
            None => true,
            Some((acc, tau, _, _)) => val_acc > *acc || (val_acc == *acc && tau_v > *tau),
        };
        if improved {
            best = Some((val_acc, tau_v, epoch, store.clone()));
        }
    }

    let (_, _, best_epoch, best_store) = best.unwrap();
    Ok(TrainOutcome {
        best: best_store,
        last: store,
        log,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::cohort::{synth_cohort, CohortConfig};
    use crate::model::Fusion;
    use crate::ori::{OriConfig, OriStrategy};

    #[test]
    fn lr_schedule_halves_every_20() {
        assert_eq!(lr_schedule(0, 1e-3), 1e-3);
        assert_eq!(lr_schedule(19, 1e-3), 1e-3);
        assert_eq!(lr_schedule(20, 1e-3), 5e-4);
        assert_eq!(lr_schedule(99, 1e-5), 1e-5 / 16.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let mut store = ParamStore::new();
        store.insert("w", vec![1.0, -2.0], vec![2]);
        let mut state = AdamState::default();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.3, -0.7]);
        adam_step(&mut store, &grads, &mut state, 0.01).unwrap();
        let w = store.get("w").unwrap().0.clone();
        assert!((w[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((w[1] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.insert("w", vec![0.5], vec![1]);
        let mut state = AdamState::default();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        for _ in 0..50 {
            adam_step(&mut store, &grads, &mut state, 0.1).unwrap();
        }
        assert_eq!(store.get("w").unwrap().0[0], 0.5);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut store = ParamStore::new();
        store.insert("w", vec![1.0], vec![1]);
        let mut state = AdamState::default();
        for _ in 0..200 {
            let w = store.get("w").unwrap().0[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), vec![2.0 * w]);
            adam_step(&mut store, &grads, &mut state, 0.1).unwrap();
        }
        assert!(store.get("w").unwrap().0[0].abs() < 0.05);
    }

    fn tiny_model() -> ModelConfig {
        let bb = BackboneConfig {
            input_shape: [6, 6, 8],
            channels: vec![2, 3],
            attention_stages: vec![1],
            logit_dim: 3,
            ce_head: false,
        };
        ModelConfig {
            multi_organ: true,
            backbones: [bb.clone(), bb.clone(), bb],
            ori: OriConfig {
                pooled_shape: [1, 1, 2],
                iterations: 2,
                strategy: OriStrategy::Switching,
                channels: 3,
            },
            prior_mode: PriorMode::Onehot,
            adaptor_hidden: 4,
            adaptor_dim: 6,
            fusion: Fusion::Concat,
            k: 4,
        }
    }

    fn tiny_samples(n: usize) -> Vec<TrainSample> {
        let cfg = CohortConfig {
            n_subjects: n,
            train_frac: 0.75,
            val_frac: 0.25,
            ..CohortConfig::default()
        };
        let model = tiny_model();
        synth_cohort(&cfg)
            .unwrap()
            .iter()
            .map(|s| prepare_sample(s, &model).unwrap())
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_loss_falls() {
        let model = tiny_model();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr: 5e-3,
            ..TrainConfig::default()
        };
        let samples = tiny_samples(16);
        let a = train(&model, &cfg, &samples).unwrap();
        let b = train(&model, &cfg, &samples).unwrap();
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.csv_row(), y.csv_row());
        }
        assert!(
            a.log.last().unwrap().ordinal < 0.5 * a.log[0].ordinal,
            "ordinal {} -> {}",
            a.log[0].ordinal,
            a.log.last().unwrap().ordinal
        );
        assert!(a.log.iter().all(|l| l.overall.is_finite()));
    }

    #[test]
    fn lambda_one_makes_overall_equal_ordinal() {
        let model = tiny_model();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            lambda: 1.0,
            ..TrainConfig::default()
        };
        let samples = tiny_samples(12);
        let out = train(&model, &cfg, &samples).unwrap();
        for l in &out.log {
            assert_eq!(l.overall, l.ordinal);
            // DCCA losses still logged.
            assert!(l.dcca_l.is_some() && l.dcca_s.is_some());
        }
    }

    #[test]
    fn ablation_parameter_counts_increase() {
        let single = ModelConfig {
            multi_organ: false,
            prior_mode: PriorMode::None,
            ..tiny_model()
        };
        let multi = ModelConfig {
            multi_organ: true,
            prior_mode: PriorMode::None,
            ori: OriConfig {
                strategy: OriStrategy::None,
                ..tiny_model().ori
            },
            ..tiny_model()
        };
        let with_ori = ModelConfig {
            prior_mode: PriorMode::None,
            ..tiny_model()
        };
        let with_prior = tiny_model();
        let counts = [
            single.parameter_count(),
            multi.parameter_count(),
            with_ori.parameter_count(),
            with_prior.parameter_count(),
        ];
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }

    #[test]
    fn ce_and_hybrid_modes_train() {
        for loss in [LossMode::Ce, LossMode::Hybrid] {
            let mut model = tiny_model();
            for b in model.backbones.iter_mut() {
                b.ce_head = true;
                b.logit_dim = 4;
            }
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 4,
                loss,
                ..TrainConfig::default()
            };
            let samples = tiny_samples(12);
            let out = train(&model, &cfg, &samples).unwrap();
            assert!(out.log.iter().all(|l| l.overall.is_finite()));
        }
    }

    #[test]
    fn head_mismatch_rejected() {
        let model = tiny_model(); // sigmoid head
        let cfg = TrainConfig {
            loss: LossMode::Ce,
            ..TrainConfig::default()
        };
        assert!(train(&model, &cfg, &tiny_samples(8)).is_err());
    }

    #[test]
    fn decode_and_score_behave() {
        assert_eq!(decode_grade(&[0.9, 0.8, 0.1], LossMode::Ordinal), 2);
        assert_eq!(decode_grade(&[0.1, 0.2, 5.0, 0.3], LossMode::Ce), 2);
        assert!((grade_score(&[0.5, 0.5, 0.5], LossMode::Ordinal) - 1.5).abs() < 1e-12);
        let s = grade_score(&[0.0, 0.0, 0.0, 0.0], LossMode::Ce);
        assert!((s - 1.5).abs() < 1e-12);
    }
}
