//! Finite-difference verification of reverse-mode gradients.
//!
//! Analytic gradients are compared against central differences; the reported
//! error is max over coordinates of |analytic − fd| / max(1, |fd|).

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward, Graph, Result, Tensor, TensorError};

/// A scalar-valued function of leaf tensors, rebuilt on a fresh graph per call.
pub type ScalarFn<'a> = &'a dyn Fn(&Rc<Graph>, &[Tensor]) -> Result<Tensor>;

/// Input arrays (data, shape) for a checked function.
pub type InputSpec = (Vec<f64>, Vec<usize>);

pub fn finite_difference_check(f: ScalarFn, inputs: &[InputSpec], step: f64) -> Result<f64> {
    fd_check_inner(f, inputs, step, 0.0)
}

/// Internal variant with a corruption offset added to the first analytic
/// gradient coordinate; used to verify the harness catches wrong gradients.
pub(crate) fn fd_check_inner(
    f: ScalarFn,
    inputs: &[InputSpec],
    step: f64,
    corrupt: f64,
) -> Result<f64> {
    assert!(step > 0.0, "finite_difference_check: step must be positive");
    let eval = |perturb: (usize, usize, f64)| -> Result<f64> {
        let graph = Graph::new();
        let leaves: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, (data, shape))| {
                let mut d = data.clone();
                let (pi, pj, delta) = perturb;
                if pi == i {
                    d[pj] += delta;
                }
                Tensor::leaf(&graph, d, shape.clone(), true)
            })
            .collect();
        let out = f(&graph, &leaves)?;
        if out.numel() != 1 {
            return Err(TensorError::NonScalar {
                op: "finite_difference_check",
                shape: out.shape(),
            });
        }
        Ok(out.item())
    };

    // Analytic pass.
    let graph = Graph::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(data, shape)| Tensor::leaf(&graph, data.clone(), shape.clone(), true))
        .collect();
    let out = f(&graph, &leaves)?;
    if out.numel() != 1 {
        return Err(TensorError::NonScalar {
            op: "finite_difference_check",
            shape: out.shape(),
        });
    }
    backward(&out)?;
    let mut analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    if corrupt != 0.0 {
        analytic[0][0] += corrupt;
    }

    let mut max_err: f64 = 0.0;
    for (i, (data, _)) in inputs.iter().enumerate() {
        for j in 0..data.len() {
            let fp = eval((i, j, step))?;
            let fm = eval((i, j, -step))?;
            let fd = (fp - fm) / (2.0 * step);
            let err = (analytic[i][j] - fd).abs() / fd.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

/// One row of a gradcheck report.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl CheckRow {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Random values kept away from the relu kink: |x| >= 0.1.
fn rand_vec_off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = rng.gen_range(-1.0..1.0);
            x.signum() * (0.1 + x.abs())
        })
        .collect()
}

/// Reduce an arbitrary tensor to a scalar with a fixed random linear
/// functional, so gradient errors cannot cancel in a plain mean.
fn reduce_random(t: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let w = Tensor::constant(t.graph(), rand_vec(rng, t.numel()), t.shape());
    t.trace_of_gram(&w)
}

/// Finite-difference checks for every differentiable primitive, `trials`
/// randomized instances each, derived from `seed`.
pub fn primitive_checks(trials: usize, seed: u64) -> Vec<CheckRow> {
    let step = 1e-5;
    let mut rows = Vec::new();
    let mut check = |name: &str, f: ScalarFn, make: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<InputSpec>| {
        let mut worst: f64 = 0.0;
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9e3779b97f4a7c15));
            let inputs = make(&mut rng);
            let err = finite_difference_check(f, &inputs, step).expect("gradcheck eval failed");
            worst = worst.max(err);
        }
        rows.push(CheckRow {
            name: name.to_string(),
            max_rel_err: worst,
            threshold: 1e-4,
        });
    };

    check(
        "matmul",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].matmul(&xs[1])?, &mut rng)
        },
        &mut |rng| {
            vec![
                (rand_vec(rng, 3 * 4), vec![3, 4]),
                (rand_vec(rng, 4 * 2), vec![4, 2]),
            ]
        },
    );
    check(
        "transpose",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].transpose()?, &mut rng)
        },
        &mut |rng| vec![(rand_vec(rng, 3 * 5), vec![3, 5])],
    );
    check(
        "add",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].add(&xs[1])?, &mut rng)
        },
        &mut |rng| {
            vec![
                (rand_vec(rng, 6), vec![2, 3]),
                (rand_vec(rng, 6), vec![2, 3]),
            ]
        },
    );
    check(
        "mul",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].mul(&xs[1])?, &mut rng)
        },
        &mut |rng| {
            vec![
                (rand_vec(rng, 6), vec![2, 3]),
                (rand_vec(rng, 6), vec![2, 3]),
            ]
        },
    );
    check(
        "div",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].div(&xs[1])?, &mut rng)
        },
        &mut |rng| {
            vec![
                (rand_vec(rng, 4), vec![4]),
                (rand_vec_off_kink(rng, 4), vec![4]),
            ]
        },
    );
    check(
        "scale",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].scale(2.5), &mut rng)
        },
        &mut |rng| vec![(rand_vec(rng, 5), vec![5])],
    );
    check(
        "concat",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let cat = super::ops::concat(&[xs[0].clone(), xs[1].clone()], 1)?;
            reduce_random(&cat, &mut rng)
        },
        &mut |rng| {
            vec![
                (rand_vec(rng, 2 * 3), vec![2, 3]),
                (rand_vec(rng, 2 * 2), vec![2, 2]),
            ]
        },
    );
    check(
        "slice",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].slice_axis(1, 1, 2)?, &mut rng)
        },
        &mut |rng| vec![(rand_vec(rng, 3 * 4), vec![3, 4])],
    );
    check(
        "linear",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].linear(&xs[1], &xs[2])?, &mut rng)
        },
        &mut |rng| {
            vec![
                (rand_vec(rng, 3 * 4), vec![3, 4]),
                (rand_vec(rng, 4 * 2), vec![4, 2]),
                (rand_vec(rng, 2), vec![2]),
            ]
        },
    );
    check(
        "conv3d_s1",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].conv3d(&xs[1], &xs[2], 1)?, &mut rng)
        },
        &mut |rng| {
            vec![
                (rand_vec(rng, 2 * 3 * 3 * 3), vec![2, 3, 3, 3]),
                (rand_vec(rng, 2 * 2 * 27), vec![2, 2, 3, 3, 3]),
                (rand_vec(rng, 2), vec![2]),
            ]
        },
    );
    check(
        "conv3d_s2",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].conv3d(&xs[1], &xs[2], 2)?, &mut rng)
        },
        &mut |rng| {
            vec![
                (rand_vec(rng, 2 * 4 * 4 * 4), vec![2, 4, 4, 4]),
                (rand_vec(rng, 2 * 2 * 27), vec![2, 2, 3, 3, 3]),
                (rand_vec(rng, 2), vec![2]),
            ]
        },
    );
    check(
        "adaptive_avg_pool3d",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].adaptive_avg_pool3d([2, 2, 1])?, &mut rng)
        },
        &mut |rng| vec![(rand_vec(rng, 2 * 4 * 3 * 3), vec![2, 4, 3, 3])],
    );
    check(
        "nearest_interpolate3d",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].nearest_interpolate3d([4, 4, 2])?, &mut rng)
        },
        &mut |rng| vec![(rand_vec(rng, 2 * 2 * 2 * 3), vec![2, 2, 2, 3])],
    );
    check(
        "softmax",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].softmax(1)?, &mut rng)
        },
        &mut |rng| vec![(rand_vec(rng, 3 * 4), vec![3, 4])],
    );
    check(
        "relu",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].relu(), &mut rng)
        },
        &mut |rng| vec![(rand_vec_off_kink(rng, 8), vec![8])],
    );
    check(
        "sigmoid",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].sigmoid(), &mut rng)
        },
        &mut |rng| vec![(rand_vec(rng, 8), vec![8])],
    );
    check(
        "ln",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].ln(), &mut rng)
        },
        &mut |rng| vec![((0..8).map(|_| rng.gen_range(0.2..2.0)).collect(), vec![8])],
    );
    check(
        "standardize",
        &|_, xs| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            reduce_random(&xs[0].standardize_features(1e-12)?, &mut rng)
        },
        &mut |rng| vec![(rand_vec(rng, 5 * 3), vec![5, 3])],
    );
    check(
        "frobenius_norm",
        &|_, xs| Ok(xs[0].frobenius_norm()),
        &mut |rng| vec![(rand_vec_off_kink(rng, 6), vec![2, 3])],
    );
    check(
        "trace_of_gram",
        &|_, xs| xs[0].trace_of_gram(&xs[1]),
        &mut |rng| {
            vec![
                (rand_vec(rng, 6), vec![2, 3]),
                (rand_vec(rng, 6), vec![2, 3]),
            ]
        },
    );
    check(
        "mean",
        &|_, xs| Ok(xs[0].mean()),
        &mut |rng| vec![(rand_vec(rng, 7), vec![7])],
    );
    check(
        "mse",
        &|_, xs| xs[0].mse(&xs[1]),
        &mut |rng| {
            vec![
                (rand_vec(rng, 6), vec![2, 3]),
                (rand_vec(rng, 6), vec![2, 3]),
            ]
        },
    );

    rows
}
