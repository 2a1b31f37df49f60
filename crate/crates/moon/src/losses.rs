//! Grading objectives: cumulative ordinal encoding and loss, K-way
//! cross-entropy (ablation), the deep CCA correlation loss, and the
//! composite objective weighting them.

use std::rc::Rc;

use crate::tensor::{ops, Graph, Result, Tensor, TensorError};

pub const DCCA_EPS: f64 = 1e-12;

/// Cumulative ordinal encoding: entry j is 1 iff grade > j. K−1 entries.
pub fn ordinal_encode(grade: usize, k: usize) -> Result<Vec<f64>> {
    if grade >= k {
        return Err(TensorError::Invalid {
            op: "ordinal_encode",
            msg: format!("grade {grade} out of range for {k} classes"),
        });
    }
    Ok((0..k - 1).map(|j| if grade > j { 1.0 } else { 0.0 }).collect())
}

/// Decode cumulative threshold outputs: count of entries above 0.5.
pub fn ordinal_decode(pred: &[f64]) -> usize {
    pred.iter().filter(|&&p| p > 0.5).count()
}

/// Squared L2 distance between predictions (n, K−1) and the ordinal
/// encodings of the grades, averaged over the batch.
pub fn ordinal_loss(h_f: &Tensor, grades: &[usize], k: usize) -> Result<Tensor> {
    let shape = h_f.shape();
    if shape.len() != 2 || shape[0] != grades.len() || shape[1] != k - 1 {
        return Err(TensorError::ShapeMismatch {
            op: "ordinal_loss",
            lhs: shape,
            rhs: vec![grades.len(), k - 1],
        });
    }
    let mut target = Vec::with_capacity(grades.len() * (k - 1));
    for &g in grades {
        target.extend(ordinal_encode(g, k)?);
    }
    let y = Tensor::constant(h_f.graph(), target, shape);
    // mse averages over all n·(K−1) entries; rescale to a per-sample mean
    // of squared L2 distances.
    Ok(h_f.mse(&y)?.scale((k - 1) as f64))
}

/// Mean negative log softmax probability of the true class, from raw
/// (n, K) logits.
pub fn cross_entropy_loss(logits: &Tensor, grades: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != grades.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy_loss",
            lhs: shape,
            rhs: vec![grades.len()],
        });
    }
    let k = shape[1];
    let n = shape[0];
    for &g in grades {
        if g >= k {
            return Err(TensorError::Invalid {
                op: "cross_entropy_loss",
                msg: format!("grade {g} out of range for {k} classes"),
            });
        }
    }
    let log_p = logits.softmax(1)?.ln();
    let mut mask = vec![0.0; n * k];
    for (i, &g) in grades.iter().enumerate() {
        mask[i * k + g] = -1.0 / n as f64;
    }
    let m = Tensor::constant(logits.graph(), mask, shape);
    log_p.trace_of_gram(&m)
}

/// Weighted blend of the cross-entropy and ordinal losses (Table-style
/// 0.5/0.5 hybrid when w = 0.5).
pub fn hybrid_loss(ce: &Tensor, ordinal: &Tensor, w: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&w) {
        return Err(TensorError::Invalid {
            op: "hybrid_loss",
            msg: format!("weight {w} outside [0,1]"),
        });
    }
    ce.scale(w).add(&ordinal.scale(1.0 - w))
}

/// Maps a view to a projected space before correlation.
pub trait Projection {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
}

/// Pass-through projection, used by tests and property checks.
pub struct IdentityProjection;

impl Projection for IdentityProjection {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// Two fully-connected layers with a ReLU between them.
pub struct TwoLayerProjection {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Projection for TwoLayerProjection {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.w1, &self.b1)?.relu().linear(&self.w2, &self.b2)
    }
}

/// Deep CCA loss: project both (n, d) views, standardize per feature to
/// mean 0 / population std 1 with an epsilon floor, then return
/// −Tr(H1ᵀH2)/(‖H1‖_F·‖H2‖_F + ε). Always in [−1, 1] up to rounding.
pub fn dcca_loss(
    h1: &Tensor,
    h2: &Tensor,
    f1: &dyn Projection,
    f2: &dyn Projection,
    eps: f64,
) -> Result<Tensor> {
    let (s1, s2) = (h1.shape(), h2.shape());
    if s1.len() != 2 || s2.len() != 2 || s1[0] != s2[0] {
        return Err(TensorError::ShapeMismatch {
            op: "dcca_loss",
            lhs: s1,
            rhs: s2,
        });
    }
    if s1[0] < 2 {
        return Err(TensorError::Invalid {
            op: "dcca_loss",
            msg: format!("needs n >= 2 rows for standardization, got {}", s1[0]),
        });
    }
    let p1 = f1.apply(h1)?.standardize_features(eps)?;
    let p2 = f2.apply(h2)?.standardize_features(eps)?;
    if p1.shape() != p2.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "dcca_loss",
            lhs: p1.shape(),
            rhs: p2.shape(),
        });
    }
    let trace = p1.trace_of_gram(&p2)?;
    let denom = p1
        .frobenius_norm()
        .mul(&p2.frobenius_norm())?
        .add(&Tensor::scalar(h1.graph(), eps))?;
    Ok(trace.div(&denom)?.scale(-1.0))
}

/// Composite objective: λ·ordinal + (1−λ)·(dcca(H_E,H_L) + dcca(H_E,H_S)).
#[allow(clippy::too_many_arguments)]
pub fn overall_loss(
    h_f: &Tensor,
    grades: &[usize],
    k: usize,
    h_e: &Tensor,
    h_l: &Tensor,
    h_s: &Tensor,
    lambda: f64,
    proj_el: (&dyn Projection, &dyn Projection),
    proj_es: (&dyn Projection, &dyn Projection),
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TensorError::Invalid {
            op: "overall_loss",
            msg: format!("lambda {lambda} outside [0,1]"),
        });
    }
    let ord = ordinal_loss(h_f, grades, k)?;
    let d_el = dcca_loss(h_e, h_l, proj_el.0, proj_el.1, DCCA_EPS)?;
    let d_es = dcca_loss(h_e, h_s, proj_es.0, proj_es.1, DCCA_EPS)?;
    ord.scale(lambda).add(&d_el.add(&d_es)?.scale(1.0 - lambda))
}

/// Convenience: leaf matrix on a fresh graph.
pub fn matrix(graph: &Rc<Graph>, rows: &[&[f64]]) -> Tensor {
    let cols = rows[0].len();
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::constant(graph, data, vec![rows.len(), cols])
}

pub use ops::concat;
