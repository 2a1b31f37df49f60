//! Organ Representation Interaction: pools the three branch feature maps
//! to a shared shape, runs N alternating attention/direct iterations (or
//! one of the ablation strategies), and restores each branch's resolution
//! with a 1×1×1 convolution, nearest interpolation, and a residual add.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::params::ParamStore;
use crate::tensor::{ops, Graph, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OriStrategy {
    None,
    Add,
    Concat,
    /// (a) joint self-attention over all three token streams.
    SelfAttn,
    /// (b) pairwise cross-attention with query/key-value roles swapped
    /// each iteration.
    QuerySwap,
    /// (c) the default switching schedule: attention on even iterations
    /// (liver K/V on i ≡ 0 mod 4, spleen on i ≡ 2 mod 4), a direct linear
    /// projection on odd iterations.
    Switching,
}

impl OriStrategy {
    pub fn parse(s: &str) -> Option<OriStrategy> {
        match s {
            "none" => Some(OriStrategy::None),
            "add" => Some(OriStrategy::Add),
            "concat" => Some(OriStrategy::Concat),
            "self_attn" => Some(OriStrategy::SelfAttn),
            "query_swap" => Some(OriStrategy::QuerySwap),
            "switching" => Some(OriStrategy::Switching),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OriStrategy::None => "none",
            OriStrategy::Add => "add",
            OriStrategy::Concat => "concat",
            OriStrategy::SelfAttn => "self_attn",
            OriStrategy::QuerySwap => "query_swap",
            OriStrategy::Switching => "switching",
        }
    }
}

#[derive(Debug, Clone)]
pub struct OriConfig {
    pub pooled_shape: [usize; 3],
    pub iterations: usize,
    pub strategy: OriStrategy,
    pub channels: usize,
}

impl Default for OriConfig {
    fn default() -> OriConfig {
        OriConfig {
            pooled_shape: [2, 2, 2],
            iterations: 8,
            strategy: OriStrategy::Switching,
            channels: 16,
        }
    }
}

impl OriConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.channels == 0 || self.pooled_shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Invalid {
                op: "ori_config",
                msg: "iterations, channels, and pooled dims must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Trainable scalars of the interaction path alone (restoration convs
/// counted separately; `add` is parameter-free).
pub fn interaction_param_count(strategy: OriStrategy, c: usize) -> usize {
    match strategy {
        OriStrategy::None | OriStrategy::Add => 0,
        OriStrategy::Concat => 3 * c * c + c,
        OriStrategy::QuerySwap => 4 * c * c,
        OriStrategy::Switching => 5 * c * c + c,
        OriStrategy::SelfAttn => 7 * c * c,
    }
}

/// Trainable scalars of the three per-organ restoration convolutions.
pub fn restore_param_count(strategy: OriStrategy, c: usize) -> usize {
    match strategy {
        OriStrategy::None => 0,
        _ => 3 * (c * c + c),
    }
}

/// softmax(QKᵀ/√d_k)·V followed by the enhancement projection W_P.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, wp: &Tensor) -> Result<Tensor> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(TensorError::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: sq,
            rhs: sk,
        });
    }
    if sv.len() != 2 || sv[0] != sk[0] {
        return Err(TensorError::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: sk,
            rhs: sv,
        });
    }
    let dk = sq[1] as f64;
    let weights = q
        .matmul(&k.transpose()?)?
        .scale(1.0 / dk.sqrt())
        .softmax(1)?;
    weights.matmul(v)?.matmul(wp)
}

/// Adaptive average pooling of the three branch maps to a shared shape.
pub fn ori_pool(
    f_e: &Tensor,
    f_l: &Tensor,
    f_s: &Tensor,
    pooled: [usize; 3],
) -> Result<(Tensor, Tensor, Tensor)> {
    for f in [f_e, f_l, f_s] {
        let s = f.shape();
        if s.len() != 4 || (0..3).any(|d| pooled[d] > s[d + 1]) {
            return Err(TensorError::Invalid {
                op: "ori_pool",
                msg: format!("pooled shape {pooled:?} exceeds feature shape {s:?}"),
            });
        }
    }
    Ok((
        f_e.adaptive_avg_pool3d(pooled)?,
        f_l.adaptive_avg_pool3d(pooled)?,
        f_s.adaptive_avg_pool3d(pooled)?,
    ))
}

/// Interaction-path weights on one graph.
#[derive(Default)]
pub struct OriWeights {
    pub wq: Option<Tensor>,
    pub wk: Option<Tensor>,
    pub wv: Option<Tensor>,
    pub wp: Option<Tensor>,
    pub direct_w: Option<Tensor>,
    pub direct_b: Option<Tensor>,
    pub fuse_w: Option<Tensor>,
    pub fuse_b: Option<Tensor>,
    pub proj: Option<[Tensor; 3]>,
}

/// Per-forward instrumentation of the switching schedule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OriTrace {
    pub attention_iterations: usize,
    pub direct_iterations: usize,
}

pub fn register_ori(store: &mut ParamStore, prefix: &str, cfg: &OriConfig, rng: &mut ChaCha8Rng) {
    let c = cfg.channels;
    let attn = |store: &mut ParamStore, rng: &mut ChaCha8Rng| {
        for name in ["wq", "wk", "wv", "wp"] {
            store.insert_xavier(&format!("{prefix}.{name}"), vec![c, c], c, c, rng);
        }
    };
    match cfg.strategy {
        OriStrategy::None => return,
        OriStrategy::Add => {}
        OriStrategy::Concat => {
            store.insert_xavier(
                &format!("{prefix}.fuse.w"),
                vec![c, 3 * c, 1, 1, 1],
                3 * c,
                c,
                rng,
            );
            store.insert_zeros(&format!("{prefix}.fuse.b"), vec![c]);
        }
        OriStrategy::QuerySwap => attn(store, rng),
        OriStrategy::Switching => {
            attn(store, rng);
            store.insert_xavier(&format!("{prefix}.direct.w"), vec![c, c], c, c, rng);
            store.insert_zeros(&format!("{prefix}.direct.b"), vec![c]);
        }
        OriStrategy::SelfAttn => {
            attn(store, rng);
            for organ in ["e", "l", "s"] {
                store.insert_xavier(&format!("{prefix}.proj_{organ}"), vec![c, c], c, c, rng);
            }
        }
    }
    // Restoration convs start at zero so the block is a no-op at init.
    for organ in ["e", "l", "s"] {
        store.insert_zeros(&format!("{prefix}.restore_{organ}.w"), vec![c, c, 1, 1, 1]);
        store.insert_zeros(&format!("{prefix}.restore_{organ}.b"), vec![c]);
    }
}

impl OriWeights {
    pub fn load(graph: &Rc<Graph>, store: &ParamStore, prefix: &str, cfg: &OriConfig) -> Result<OriWeights> {
        let get = |name: &str| store.leaf(graph, &format!("{prefix}.{name}"));
        let mut w = OriWeights {
            wq: None,
            wk: None,
            wv: None,
            wp: None,
            direct_w: None,
            direct_b: None,
            fuse_w: None,
            fuse_b: None,
            proj: None,
        };
        match cfg.strategy {
            OriStrategy::None | OriStrategy::Add => {}
            OriStrategy::Concat => {
                w.fuse_w = Some(get("fuse.w")?);
                w.fuse_b = Some(get("fuse.b")?);
            }
            OriStrategy::QuerySwap | OriStrategy::Switching | OriStrategy::SelfAttn => {
                w.wq = Some(get("wq")?);
                w.wk = Some(get("wk")?);
                w.wv = Some(get("wv")?);
                w.wp = Some(get("wp")?);
                if cfg.strategy == OriStrategy::Switching {
                    w.direct_w = Some(get("direct.w")?);
                    w.direct_b = Some(get("direct.b")?);
                }
                if cfg.strategy == OriStrategy::SelfAttn {
                    w.proj = Some([get("proj_e")?, get("proj_l")?, get("proj_s")?]);
                }
            }
        }
        Ok(w)
    }
}

/// Pooled map (C,h,w,d) -> token matrix (h·w·d, C).
fn to_tokens(f: &Tensor) -> Result<Tensor> {
    let s = f.shape();
    f.reshape(vec![s[0], s[1] * s[2] * s[3]])?.transpose()
}

fn from_tokens(t: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    t.transpose()?.reshape(shape)
}

fn cross(w: &OriWeights, query: &Tensor, kv: &Tensor) -> Result<Tensor> {
    scaled_dot_attention(
        &query.matmul(w.wq.as_ref().unwrap())?,
        &kv.matmul(w.wk.as_ref().unwrap())?,
        &kv.matmul(w.wv.as_ref().unwrap())?,
        w.wp.as_ref().unwrap(),
    )
}

/// Runs the configured interaction over the pooled maps. Outputs keep
/// the pooled shape; the trace reports schedule instrumentation.
pub fn ori_interact(
    f_e: &Tensor,
    f_l: &Tensor,
    f_s: &Tensor,
    weights: &OriWeights,
    cfg: &OriConfig,
) -> Result<([Tensor; 3], OriTrace)> {
    let shape = f_e.shape();
    if f_l.shape() != shape || f_s.shape() != shape {
        return Err(TensorError::ShapeMismatch {
            op: "ori_interact",
            lhs: f_l.shape(),
            rhs: shape,
        });
    }
    let mut trace = OriTrace::default();
    match cfg.strategy {
        OriStrategy::None => Ok(([f_e.clone(), f_l.clone(), f_s.clone()], trace)),
        OriStrategy::Add => {
            let sum = f_e.add(f_l)?.add(f_s)?;
            Ok(([sum.clone(), sum.clone(), sum], trace))
        }
        OriStrategy::Concat => {
            let stacked = ops::concat(&[f_e.clone(), f_l.clone(), f_s.clone()], 0)?;
            let fused = stacked.conv3d(
                weights.fuse_w.as_ref().unwrap(),
                weights.fuse_b.as_ref().unwrap(),
                1,
            )?;
            Ok(([fused.clone(), fused.clone(), fused], trace))
        }
        OriStrategy::SelfAttn => {
            let mut streams = [to_tokens(f_e)?, to_tokens(f_l)?, to_tokens(f_s)?];
            let n = streams[0].shape()[0];
            for _ in 0..cfg.iterations {
                trace.attention_iterations += 1;
                let all = ops::concat(&[streams[0].clone(), streams[1].clone(), streams[2].clone()], 0)?;
                let att = cross(weights, &all, &all)?;
                let proj = weights.proj.as_ref().unwrap();
                for (o, p) in proj.iter().enumerate() {
                    streams[o] = att.slice_axis(0, o * n, n)?.matmul(p)?;
                }
            }
            Ok((
                [
                    from_tokens(&streams[0], shape.clone())?,
                    from_tokens(&streams[1], shape.clone())?,
                    from_tokens(&streams[2], shape)?,
                ],
                trace,
            ))
        }
        OriStrategy::QuerySwap => {
            let mut streams = [to_tokens(f_e)?, to_tokens(f_l)?, to_tokens(f_s)?];
            for i in 0..cfg.iterations {
                if i % 2 == 0 {
                    // Esophagus queries the other organs' tokens.
                    let others = ops::concat(&[streams[1].clone(), streams[2].clone()], 0)?;
                    streams[0] = cross(weights, &streams[0], &others)?;
                } else {
                    // Roles swap: esophagus serves keys/values.
                    let e = streams[0].clone();
                    streams[1] = cross(weights, &streams[1], &e)?;
                    streams[2] = cross(weights, &streams[2], &e)?;
                }
                trace.attention_iterations += 1;
            }
            Ok((
                [
                    from_tokens(&streams[0], shape.clone())?,
                    from_tokens(&streams[1], shape.clone())?,
                    from_tokens(&streams[2], shape)?,
                ],
                trace,
            ))
        }
        OriStrategy::Switching => {
            let mut streams = [to_tokens(f_e)?, to_tokens(f_l)?, to_tokens(f_s)?];
            for i in 0..cfg.iterations {
                if i % 2 == 0 {
                    trace.attention_iterations += 1;
                    // Symmetric exchange with the liver, then the spleen.
                    let other = if i % 4 == 0 { 1 } else { 2 };
                    let e = streams[0].clone();
                    let o = streams[other].clone();
                    streams[0] = cross(weights, &e, &o)?;
                    streams[other] = cross(weights, &o, &e)?;
                } else {
                    trace.direct_iterations += 1;
                    let w = weights.direct_w.as_ref().unwrap();
                    let b = weights.direct_b.as_ref().unwrap();
                    for s in streams.iter_mut() {
                        *s = s.linear(w, b)?;
                    }
                }
            }
            Ok((
                [
                    from_tokens(&streams[0], shape.clone())?,
                    from_tokens(&streams[1], shape.clone())?,
                    from_tokens(&streams[2], shape)?,
                ],
                trace,
            ))
        }
    }
}

/// 1×1×1 conv, nearest interpolation to the original shape, residual add
/// onto the branch's pre-ORI feature map.
pub fn ori_restore(
    g_o: &Tensor,
    pre_ori: &Tensor,
    conv_w: &Tensor,
    conv_b: &Tensor,
) -> Result<Tensor> {
    let s = pre_ori.shape();
    let restored = g_o
        .conv3d(conv_w, conv_b, 1)?
        .nearest_interpolate3d([s[1], s[2], s[3]])?;
    pre_ori.add(&restored)
}
