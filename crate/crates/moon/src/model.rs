//! Full-model assembly: per-organ backbones, the ORI block, branch
//! heads, the one-hot prior adaptor, and post-fusion producing
//! (H_E, H_L, H_S, H_F).

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::backbone::{backbone_features, branch_head, register_backbone, BackboneConfig};
use crate::ori::{
    interaction_param_count, ori_interact, ori_pool, ori_restore, register_ori,
    restore_param_count, OriConfig, OriStrategy, OriTrace, OriWeights,
};
use crate::params::ParamStore;
use crate::tensor::{ops, Graph, Result, Tensor, TensorError};

pub const ORGANS: [&str; 3] = ["eso", "liver", "spleen"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    None,
    Onehot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Concat,
    PredSum,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Esophagus-only ablation when false.
    pub multi_organ: bool,
    /// Backbones for (esophagus, liver, spleen).
    pub backbones: [BackboneConfig; 3],
    pub ori: OriConfig,
    pub prior_mode: PriorMode,
    pub adaptor_hidden: usize,
    pub adaptor_dim: usize,
    pub fusion: Fusion,
    pub k: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        let bb = BackboneConfig::default();
        ModelConfig {
            multi_organ: true,
            backbones: [bb.clone(), bb.clone(), bb],
            ori: OriConfig {
                pooled_shape: [1, 1, 2],
                ..OriConfig::default()
            },
            prior_mode: PriorMode::Onehot,
            adaptor_hidden: 32,
            adaptor_dim: 64,
            fusion: Fusion::Concat,
            k: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| TensorError::Invalid {
            op: "model_config",
            msg,
        };
        if self.k < 2 {
            return Err(err("needs at least two grades".into()));
        }
        for b in &self.backbones {
            b.validate()?;
            if b.logit_dim != self.logit_dim() {
                return Err(err(format!(
                    "branch logit dim {} inconsistent with k={} (ce={})",
                    b.logit_dim,
                    self.k,
                    b.ce_head
                )));
            }
        }
        if self.multi_organ && self.ori.strategy != OriStrategy::None {
            self.ori.validate()?;
            for b in &self.backbones {
                if b.out_channels() != self.ori.channels {
                    return Err(err("ori channels must match backbone output channels".into()));
                }
                let d = b.dims_after(b.stages());
                if (0..3).any(|i| self.ori.pooled_shape[i] > d[i]) {
                    return Err(err(format!(
                        "pooled shape {:?} exceeds stage-T dims {d:?}",
                        self.ori.pooled_shape
                    )));
                }
            }
        }
        if self.prior_mode == PriorMode::Onehot
            && (self.adaptor_hidden == 0 || self.adaptor_dim == 0)
        {
            return Err(err("adaptor dims must be positive".into()));
        }
        Ok(())
    }

    pub fn ce_head(&self) -> bool {
        self.backbones[0].ce_head
    }

    /// Width of every logit vector: K−1 ordinal outputs, or K under CE.
    pub fn logit_dim(&self) -> usize {
        if self.ce_head() {
            self.k
        } else {
            self.k - 1
        }
    }

    fn fusion_width(&self) -> usize {
        let c = self.backbones[0].out_channels();
        let organs = if self.multi_organ {
            self.backbones.iter().map(|b| b.out_channels()).sum()
        } else {
            c
        };
        organs
            + if self.prior_mode == PriorMode::Onehot {
                self.adaptor_dim
            } else {
                0
            }
    }

    /// Exact trainable scalar count, analytic.
    pub fn parameter_count(&self) -> usize {
        let mut n = self.backbones[0].parameter_count();
        if self.multi_organ {
            n += self.backbones[1].parameter_count() + self.backbones[2].parameter_count();
            n += interaction_param_count(self.ori.strategy, self.ori.channels)
                + restore_param_count(self.ori.strategy, self.ori.channels);
        }
        if self.prior_mode == PriorMode::Onehot {
            n += 20 * self.adaptor_hidden
                + self.adaptor_hidden
                + self.adaptor_hidden * self.adaptor_dim
                + self.adaptor_dim;
        }
        if self.fusion == Fusion::Concat {
            n += self.fusion_width() * self.logit_dim() + self.logit_dim();
        }
        n
    }
}

pub fn register_model(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    register_backbone(store, ORGANS[0], &cfg.backbones[0], rng);
    if cfg.multi_organ {
        register_backbone(store, ORGANS[1], &cfg.backbones[1], rng);
        register_backbone(store, ORGANS[2], &cfg.backbones[2], rng);
        register_ori(store, "ori", &cfg.ori, rng);
    }
    if cfg.prior_mode == PriorMode::Onehot {
        store.insert_xavier("prior.w1", vec![20, cfg.adaptor_hidden], 20, cfg.adaptor_hidden, rng);
        store.insert_zeros("prior.b1", vec![cfg.adaptor_hidden]);
        store.insert_xavier(
            "prior.w2",
            vec![cfg.adaptor_hidden, cfg.adaptor_dim],
            cfg.adaptor_hidden,
            cfg.adaptor_dim,
            rng,
        );
        store.insert_zeros("prior.b2", vec![cfg.adaptor_dim]);
    }
    if cfg.fusion == Fusion::Concat {
        let w = cfg.fusion_width();
        let d = cfg.logit_dim();
        store.insert_xavier("fuse.w", vec![w, d], w, d, rng);
        store.insert_zeros("fuse.b", vec![d]);
    }
}

/// Forward-pass outputs for one sample.
pub struct ModelOutputs {
    /// Branch logits H_E, and H_L/H_S when multi-organ.
    pub h_e: Tensor,
    pub h_l: Option<Tensor>,
    pub h_s: Option<Tensor>,
    /// Fused logits H_F, shape (1, K−1) (or (1, K) under CE).
    pub h_f: Tensor,
    pub trace: OriTrace,
}

fn pooled_vector(f: &Tensor) -> Result<Tensor> {
    let c = f.shape()[0];
    f.adaptive_avg_pool3d([1, 1, 1])?.reshape(vec![1, c])
}

/// Full forward pass: backbones, ORI (pool/interact/restore, residual),
/// post-ORI branch heads, prior adaptor, and fusion.
pub fn moon_forward(
    graph: &Rc<Graph>,
    store: &ParamStore,
    cfg: &ModelConfig,
    rois: &[Tensor; 3],
    onehot: Option<&[f64]>,
) -> Result<ModelOutputs> {
    if cfg.prior_mode == PriorMode::Onehot && onehot.is_none() {
        return Err(TensorError::Invalid {
            op: "moon_forward",
            msg: "prior mode onehot requires a prior record".into(),
        });
    }

    let mut trace = OriTrace::default();
    let mut features: Vec<Tensor> = Vec::new();
    if cfg.multi_organ {
        let f_e = backbone_features(graph, store, ORGANS[0], &rois[0], &cfg.backbones[0])?;
        let f_l = backbone_features(graph, store, ORGANS[1], &rois[1], &cfg.backbones[1])?;
        let f_s = backbone_features(graph, store, ORGANS[2], &rois[2], &cfg.backbones[2])?;
        if cfg.ori.strategy == OriStrategy::None {
            features = vec![f_e, f_l, f_s];
        } else {
            let (p_e, p_l, p_s) = ori_pool(&f_e, &f_l, &f_s, cfg.ori.pooled_shape)?;
            let weights = OriWeights::load(graph, store, "ori", &cfg.ori)?;
            let (g, t) = ori_interact(&p_e, &p_l, &p_s, &weights, &cfg.ori)?;
            trace = t;
            for (i, (pre, organ)) in [(f_e, "e"), (f_l, "l"), (f_s, "s")].into_iter().enumerate() {
                let w = store.leaf(graph, &format!("ori.restore_{organ}.w"))?;
                let b = store.leaf(graph, &format!("ori.restore_{organ}.b"))?;
                features.push(ori_restore(&g[i], &pre, &w, &b)?);
            }
        }
    } else {
        features.push(backbone_features(graph, store, ORGANS[0], &rois[0], &cfg.backbones[0])?);
    }

    let h_e = branch_head(graph, store, ORGANS[0], &features[0], &cfg.backbones[0])?;
    let (h_l, h_s) = if cfg.multi_organ {
        (
            Some(branch_head(graph, store, ORGANS[1], &features[1], &cfg.backbones[1])?),
            Some(branch_head(graph, store, ORGANS[2], &features[2], &cfg.backbones[2])?),
        )
    } else {
        (None, None)
    };

    let h_f = match cfg.fusion {
        Fusion::PredSum => {
            if cfg.multi_organ {
                h_e.add(h_l.as_ref().unwrap())?
                    .add(h_s.as_ref().unwrap())?
                    .scale(1.0 / 3.0)
            } else {
                h_e.clone()
            }
        }
        Fusion::Concat => {
            let mut parts: Vec<Tensor> = features
                .iter()
                .map(pooled_vector)
                .collect::<Result<_>>()?;
            if cfg.prior_mode == PriorMode::Onehot {
                let v = onehot.unwrap();
                if v.len() != 20 {
                    return Err(TensorError::Invalid {
                        op: "moon_forward",
                        msg: format!("one-hot prior must have 20 entries, got {}", v.len()),
                    });
                }
                let x = Tensor::constant(graph, v.to_vec(), vec![1, 20]);
                let adapted = x
                    .linear(&store.leaf(graph, "prior.w1")?, &store.leaf(graph, "prior.b1")?)?
                    .relu()
                    .linear(&store.leaf(graph, "prior.w2")?, &store.leaf(graph, "prior.b2")?)?;
                parts.push(adapted);
            }
            let fused_in = ops::concat(&parts, 1)?;
            let logits = fused_in.linear(&store.leaf(graph, "fuse.w")?, &store.leaf(graph, "fuse.b")?)?;
            if cfg.ce_head() {
                logits
            } else {
                logits.sigmoid()
            }
        }
    };

    Ok(ModelOutputs {
        h_e,
        h_l,
        h_s,
        h_f,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_rng;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        let bb = BackboneConfig {
            input_shape: [4, 4, 8],
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
            adaptor_dim: 5,
            fusion: Fusion::Concat,
            k: 4,
        }
    }

    fn store_for(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        register_model(&mut store, cfg, &mut init_rng(seed));
        store
    }

    fn rand_rois(graph: &Rc<Graph>, cfg: &ModelConfig, seed: u64) -> [Tensor; 3] {
        let mut rng = init_rng(seed);
        let mk = |rng: &mut ChaCha8Rng, b: &BackboneConfig| {
            let n: usize = b.input_shape.iter().product();
            Tensor::constant(
                graph,
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                vec![1, b.input_shape[0], b.input_shape[1], b.input_shape[2]],
            )
        };
        [
            mk(&mut rng, &cfg.backbones[0]),
            mk(&mut rng, &cfg.backbones[1]),
            mk(&mut rng, &cfg.backbones[2]),
        ]
    }

    fn onehot() -> Vec<f64> {
        let mut v = vec![0.0; 20];
        for i in [2, 7, 12, 17] {
            v[i] = 1.0;
        }
        v
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let cfg = tiny_config();
        cfg.validate().unwrap();
        let store = store_for(&cfg, 0);
        let g = Graph::new();
        let rois = rand_rois(&g, &cfg, 1);
        let out = moon_forward(&g, &store, &cfg, &rois, Some(&onehot())).unwrap();
        assert_eq!(out.h_f.shape(), vec![1, 3]);
        assert_eq!(out.h_e.shape(), vec![1, 3]);
        assert!(out.h_f.value().iter().all(|x| x.is_finite() && *x > 0.0 && *x < 1.0));
        assert_eq!(out.trace.attention_iterations, 1);
        assert_eq!(out.trace.direct_iterations, 1);
    }

    #[test]
    fn outputs_finite_for_random_configs() {
        let mut rng = init_rng(5);
        for trial in 0..100 {
            let c = rng.gen_range(1..=3);
            let bb = BackboneConfig {
                input_shape: [4, 4, rng.gen_range(4..=8)],
                channels: vec![rng.gen_range(1..=3), c],
                attention_stages: if rng.gen_bool(0.5) { vec![1] } else { vec![] },
                logit_dim: 3,
                ce_head: false,
            };
            let strategies = [
                OriStrategy::None,
                OriStrategy::Add,
                OriStrategy::Concat,
                OriStrategy::SelfAttn,
                OriStrategy::QuerySwap,
                OriStrategy::Switching,
            ];
            let cfg = ModelConfig {
                multi_organ: trial % 4 != 3,
                backbones: [bb.clone(), bb.clone(), bb],
                ori: OriConfig {
                    pooled_shape: [1, 1, 1],
                    iterations: rng.gen_range(1..=3),
                    strategy: strategies[trial % strategies.len()],
                    channels: c,
                },
                prior_mode: if trial % 2 == 0 { PriorMode::Onehot } else { PriorMode::None },
                adaptor_hidden: 3,
                adaptor_dim: 4,
                fusion: if trial % 3 == 0 { Fusion::PredSum } else { Fusion::Concat },
                k: 4,
            };
            cfg.validate().unwrap();
            let store = store_for(&cfg, trial as u64);
            let g = Graph::new();
            let rois = rand_rois(&g, &cfg, trial as u64 + 50);
            let oh = onehot();
            let out = moon_forward(&g, &store, &cfg, &rois, Some(&oh)).unwrap();
            for t in [Some(&out.h_e), out.h_l.as_ref(), out.h_s.as_ref(), Some(&out.h_f)]
                .into_iter()
                .flatten()
            {
                assert!(t.value().iter().all(|x| x.is_finite()), "trial {trial}");
            }
        }
    }

    #[test]
    fn zero_init_restore_matches_no_interaction() {
        let cfg = tiny_config();
        let store = store_for(&cfg, 2);
        let mut none_cfg = cfg.clone();
        none_cfg.ori.strategy = OriStrategy::None;
        // Same store: restore convs are zero-initialized, so the ORI path
        // must reduce to the plain forward exactly.
        let g = Graph::new();
        let rois = rand_rois(&g, &cfg, 3);
        let oh = onehot();
        let with = moon_forward(&g, &store, &cfg, &rois, Some(&oh)).unwrap();
        let without = moon_forward(&g, &store, &none_cfg, &rois, Some(&oh)).unwrap();
        assert_eq!(with.h_f.value(), without.h_f.value());
        assert_eq!(with.h_e.value(), without.h_e.value());
    }

    #[test]
    fn prior_feeds_concat_but_not_pred_sum() {
        let cfg = tiny_config();
        let store = store_for(&cfg, 4);
        let g = Graph::new();
        let rois = rand_rois(&g, &cfg, 5);
        let a = onehot();
        let mut b = vec![0.0; 20];
        for i in [0, 5, 10, 15] {
            b[i] = 1.0;
        }
        let fa = moon_forward(&g, &store, &cfg, &rois, Some(&a)).unwrap();
        let fb = moon_forward(&g, &store, &cfg, &rois, Some(&b)).unwrap();
        assert_ne!(fa.h_f.value(), fb.h_f.value());

        let mut ps = cfg.clone();
        ps.fusion = Fusion::PredSum;
        let pa = moon_forward(&g, &store, &ps, &rois, Some(&a)).unwrap();
        let pb = moon_forward(&g, &store, &ps, &rois, Some(&b)).unwrap();
        assert_eq!(pa.h_f.value(), pb.h_f.value());
    }

    #[test]
    fn pred_sum_of_identical_logits_is_identity() {
        // Same backbone weights for all three organs and identical ROIs:
        // branch logits coincide and pred_sum returns them unchanged.
        let cfg = ModelConfig {
            fusion: Fusion::PredSum,
            prior_mode: PriorMode::None,
            ..tiny_config()
        };
        let mut store = store_for(&cfg, 6);
        for param in ["stage0", "stage1", "stem", "stem2", "head"] {
            for suffix in ["w", "b"] {
                let name = format!("eso.{param}.{suffix}");
                let src = store.get(&name).unwrap().0.clone();
                for organ in ["liver", "spleen"] {
                    store
                        .get_mut(&format!("{organ}.{param}.{suffix}"))
                        .unwrap()
                        .copy_from_slice(&src);
                }
            }
        }
        for param in ["stage1.wq", "stage1.wk", "stage1.wv", "stage1.wp"] {
            let src = store.get(&format!("eso.{param}")).unwrap().0.clone();
            for organ in ["liver", "spleen"] {
                store.get_mut(&format!("{organ}.{param}")).unwrap().copy_from_slice(&src);
            }
        }
        let g = Graph::new();
        let rois = rand_rois(&g, &cfg, 7);
        let same = [rois[0].clone(), rois[0].clone(), rois[0].clone()];
        let out = moon_forward(&g, &store, &cfg, &same, None).unwrap();
        let e = out.h_e.value();
        let f = out.h_f.value();
        for (a, b) in e.iter().zip(&f) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_organ_degenerates_to_esophagus_head() {
        let cfg = ModelConfig {
            multi_organ: false,
            fusion: Fusion::PredSum,
            prior_mode: PriorMode::None,
            ..tiny_config()
        };
        let store = store_for(&cfg, 8);
        let g = Graph::new();
        let rois = rand_rois(&g, &cfg, 9);
        let out = moon_forward(&g, &store, &cfg, &rois, None).unwrap();
        assert_eq!(out.h_f.value(), out.h_e.value());
        assert!(out.h_l.is_none() && out.h_s.is_none());
    }

    #[test]
    fn onehot_required_when_enabled_and_width_shifts() {
        let cfg = tiny_config();
        let store = store_for(&cfg, 10);
        let g = Graph::new();
        let rois = rand_rois(&g, &cfg, 11);
        assert!(moon_forward(&g, &store, &cfg, &rois, None).is_err());

        // Prior off: H_F width identical, fusion input differs by adaptor dim.
        let mut off = cfg.clone();
        off.prior_mode = PriorMode::None;
        assert_eq!(cfg.fusion_width() - off.fusion_width(), cfg.adaptor_dim);
        let store_off = store_for(&off, 10);
        let out = moon_forward(&g, &store_off, &off, &rois, None).unwrap();
        assert_eq!(out.h_f.shape(), vec![1, 3]);
    }

    #[test]
    fn parameter_count_matches_registration() {
        let variants = [
            tiny_config(),
            ModelConfig {
                multi_organ: false,
                ..tiny_config()
            },
            ModelConfig {
                prior_mode: PriorMode::None,
                ..tiny_config()
            },
            ModelConfig {
                fusion: Fusion::PredSum,
                ..tiny_config()
            },
            ModelConfig {
                ori: OriConfig {
                    strategy: OriStrategy::SelfAttn,
                    channels: 3,
                    pooled_shape: [1, 1, 2],
                    iterations: 1,
                },
                ..tiny_config()
            },
        ];
        for cfg in variants {
            let store = store_for(&cfg, 1);
            assert_eq!(store.scalar_count(), cfg.parameter_count());
        }
        // Doubling C multiplies W_P parameters by 4.
        let c = 6;
        let p1 = interaction_param_count(OriStrategy::QuerySwap, c);
        let p2 = interaction_param_count(OriStrategy::QuerySwap, 2 * c);
        assert_eq!(p2, 4 * p1);
    }
}
