//! Per-organ feature extractor: a convolutional stem, T stride-2
//! downsampling stages (the later ones with single-head self-attention
//! over flattened spatial tokens), and a pooled branch logit head.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::ori::scaled_dot_attention;
use crate::params::ParamStore;
use crate::tensor::{Graph, Result, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub input_shape: [usize; 3],
    /// Output channels per downsampling stage; length T.
    pub channels: Vec<usize>,
    /// Stage indices (0-based) that run self-attention after their conv.
    pub attention_stages: Vec<usize>,
    /// Branch head width: K−1 ordinal outputs (or K logits under CE).
    pub logit_dim: usize,
    /// CE ablation: ReLU before the head, raw logits out (no sigmoid).
    pub ce_head: bool,
}

impl Default for BackboneConfig {
    fn default() -> BackboneConfig {
        BackboneConfig {
            input_shape: [16, 16, 32],
            channels: vec![4, 8, 16, 16],
            attention_stages: vec![2, 3],
            logit_dim: 3,
            ce_head: false,
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    /// Spatial dims after `t` ceil-halvings.
    pub fn dims_after(&self, t: usize) -> [usize; 3] {
        let mut d = self.input_shape;
        for _ in 0..t {
            for x in d.iter_mut() {
                *x = x.div_ceil(2);
            }
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| TensorError::Invalid {
            op: "backbone_config",
            msg,
        };
        if self.channels.is_empty() {
            return Err(err("needs at least one stage".into()));
        }
        if self.channels.iter().any(|&c| c == 0) || self.logit_dim == 0 {
            return Err(err("channel and logit dims must be positive".into()));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(err("input shape must be positive".into()));
        }
        if let Some(&s) = self.attention_stages.iter().find(|&&s| s >= self.stages()) {
            return Err(err(format!("attention stage {s} out of range")));
        }
        Ok(())
    }

    /// Analytic trainable scalar count (stem + stages + head).
    pub fn parameter_count(&self) -> usize {
        let conv = |cin: usize, cout: usize| cout * cin * 27 + cout;
        let mut n = conv(1, self.channels[0]) + conv(self.channels[0], self.channels[0]);
        for t in 0..self.stages() {
            let cin = if t == 0 { self.channels[0] } else { self.channels[t - 1] };
            n += conv(cin, self.channels[t]);
        }
        for &s in &self.attention_stages {
            n += 4 * self.channels[s] * self.channels[s];
        }
        n += self.out_channels() * self.logit_dim + self.logit_dim;
        n
    }
}

/// Registers all backbone parameters under `prefix.`.
pub fn register_backbone(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) {
    let c0 = self_conv_register(store, &format!("{prefix}.stem"), 1, cfg.channels[0], rng);
    self_conv_register(store, &format!("{prefix}.stem2"), c0, c0, rng);
    for t in 0..cfg.stages() {
        let cin = if t == 0 { cfg.channels[0] } else { cfg.channels[t - 1] };
        self_conv_register(store, &format!("{prefix}.stage{t}"), cin, cfg.channels[t], rng);
        if cfg.attention_stages.contains(&t) {
            let c = cfg.channels[t];
            for name in ["wq", "wk", "wv", "wp"] {
                store.insert_xavier(&format!("{prefix}.stage{t}.{name}"), vec![c, c], c, c, rng);
            }
        }
    }
    let c = cfg.out_channels();
    store.insert_xavier(
        &format!("{prefix}.head.w"),
        vec![c, cfg.logit_dim],
        c,
        cfg.logit_dim,
        rng,
    );
    store.insert_zeros(&format!("{prefix}.head.b"), vec![cfg.logit_dim]);
}

fn self_conv_register(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    store.insert_xavier(
        &format!("{name}.w"),
        vec![cout, cin, 3, 3, 3],
        cin * 27,
        cout * 27,
        rng,
    );
    store.insert_zeros(&format!("{name}.b"), vec![cout]);
    cout
}

fn conv_relu(
    graph: &Rc<Graph>,
    store: &ParamStore,
    name: &str,
    x: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let w = store.leaf(graph, &format!("{name}.w"))?;
    let b = store.leaf(graph, &format!("{name}.b"))?;
    Ok(x.conv3d(&w, &b, stride)?.relu())
}

/// Single-head self-attention over the (C,h,w,d) map's h·w·d tokens,
/// added residually.
fn attention_block(
    graph: &Rc<Graph>,
    store: &ParamStore,
    name: &str,
    x: &Tensor,
) -> Result<Tensor> {
    let s = x.shape();
    let (c, n) = (s[0], s[1] * s[2] * s[3]);
    let tokens = x.reshape(vec![c, n])?.transpose()?; // (n, C)
    let wq = store.leaf(graph, &format!("{name}.wq"))?;
    let wk = store.leaf(graph, &format!("{name}.wk"))?;
    let wv = store.leaf(graph, &format!("{name}.wv"))?;
    let wp = store.leaf(graph, &format!("{name}.wp"))?;
    let att = scaled_dot_attention(
        &tokens.matmul(&wq)?,
        &tokens.matmul(&wk)?,
        &tokens.matmul(&wv)?,
        &wp,
    )?;
    let back = att.transpose()?.reshape(s)?;
    x.add(&back)
}

/// Stem + T downsampling stages; spatial dims ceil-halve per stage.
pub fn backbone_features(
    graph: &Rc<Graph>,
    store: &ParamStore,
    prefix: &str,
    volume: &Tensor,
    cfg: &BackboneConfig,
) -> Result<Tensor> {
    let s = volume.shape();
    if s != vec![1, cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]] {
        return Err(TensorError::ShapeMismatch {
            op: "backbone_features",
            lhs: s,
            rhs: vec![1, cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]],
        });
    }
    let mut x = conv_relu(graph, store, &format!("{prefix}.stem"), volume, 1)?;
    x = conv_relu(graph, store, &format!("{prefix}.stem2"), &x, 1)?;
    for t in 0..cfg.stages() {
        x = conv_relu(graph, store, &format!("{prefix}.stage{t}"), &x, 2)?;
        if cfg.attention_stages.contains(&t) {
            x = attention_block(graph, store, &format!("{prefix}.stage{t}"), &x)?;
        }
    }
    Ok(x)
}

/// Global average pool then linear head; sigmoid ordinal outputs, or raw
/// K logits after a ReLU under the CE ablation.
pub fn branch_head(
    graph: &Rc<Graph>,
    store: &ParamStore,
    prefix: &str,
    features: &Tensor,
    cfg: &BackboneConfig,
) -> Result<Tensor> {
    let c = features.shape()[0];
    let pooled = features
        .adaptive_avg_pool3d([1, 1, 1])?
        .reshape(vec![1, c])?;
    let pooled = if cfg.ce_head { pooled.relu() } else { pooled };
    let w = store.leaf(graph, &format!("{prefix}.head.w"))?;
    let b = store.leaf(graph, &format!("{prefix}.head.b"))?;
    let logits = pooled.linear(&w, &b)?;
    Ok(if cfg.ce_head { logits } else { logits.sigmoid() })
}

/// Convenience composition: features then head.
pub fn backbone_forward(
    graph: &Rc<Graph>,
    store: &ParamStore,
    prefix: &str,
    volume: &Tensor,
    cfg: &BackboneConfig,
) -> Result<(Tensor, Tensor)> {
    let f = backbone_features(graph, store, prefix, volume, cfg)?;
    let l = branch_head(graph, store, prefix, &f, cfg)?;
    Ok((f, l))
}

/// Crops `volume` to the mask's bounding box (no masking inside the box)
/// and nearest-interpolates to `target`.
pub fn organ_roi_resize(
    volume: &Tensor,
    mask: &crate::priors::VoxelMask,
    target: [usize; 3],
) -> Result<Tensor> {
    let s = volume.shape();
    if s.len() != 4 || [s[1], s[2], s[3]] != mask.shape {
        return Err(TensorError::ShapeMismatch {
            op: "organ_roi_resize",
            lhs: s,
            rhs: mask.shape.to_vec(),
        });
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for x in 0..mask.shape[0] {
        for y in 0..mask.shape[1] {
            for z in 0..mask.shape[2] {
                if mask.data[mask.index(x, y, z)] == 1 {
                    for (d, v) in [x, y, z].into_iter().enumerate() {
                        lo[d] = lo[d].min(v);
                        hi[d] = hi[d].max(v);
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(TensorError::Invalid {
            op: "organ_roi_resize",
            msg: "empty organ mask".into(),
        });
    }
    let cropped = volume
        .slice_axis(1, lo[0], hi[0] - lo[0] + 1)?
        .slice_axis(2, lo[1], hi[1] - lo[1] + 1)?
        .slice_axis(3, lo[2], hi[2] - lo[2] + 1)?;
    cropped.nearest_interpolate3d(target)
}
