//! Randomized runtime verification: guided layers reduce to their unguided
//! forms on all-true selections, masked-out frames cannot influence guided
//! statistics, and tape gradients match central finite differences.

use serde::Serialize;
use thiserror::Error;

use crate::layers::{
    attentive_stats_pool, batchnorm_forward_train, campp_mask_forward, se_block_forward,
    BNParams, PoolParams, SEParams, SegmentPlan,
};
use crate::rng::Prng;
use crate::tensor::gradcheck::finite_difference_check;
use crate::tensor::{ops, Select, Tape, Tensor, TensorError};
use crate::train::{aam_softmax_loss, AAMHead, TrainError};

/// Errors raised while running a verification suite (structural, not property failures).
#[derive(Debug, Error)]
pub enum CheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Outcome of one named verification property over many randomized cases.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    /// Stable machine-readable property name.
    pub property: String,
    /// Number of randomized cases exercised.
    pub cases: usize,
    /// Worst deviation observed across all cases.
    pub worst: f64,
    /// Largest deviation the property tolerates.
    pub tolerance: f64,
    /// Whether `worst <= tolerance`.
    pub passed: bool,
}

impl CheckResult {
    fn new(property: &str, cases: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            property: property.into(),
            cases,
            worst,
            tolerance,
            passed: worst <= tolerance,
        }
    }

    /// One-line report suitable for terminal output.
    pub fn summary_line(&self) -> String {
        format!(
            "{} {} (worst {:.3e}, tolerance {:.3e}, {} cases)",
            if self.passed { "PASS" } else { "FAIL" },
            self.property,
            self.worst,
            self.tolerance,
            self.cases
        )
    }
}

/// True when every property in the batch passed.
pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// First failing property, if any.
pub fn first_failure(results: &[CheckResult]) -> Option<&CheckResult> {
    results.iter().find(|r| !r.passed)
}

fn randn3(rng: &mut Prng, b: usize, c: usize, t: usize) -> Tensor {
    Tensor::from_vec(vec![b, c, t], rng.gaussian_vec(b * c * t, 1.0)).expect("shape matches")
}

/// Random `[B, C, T]` sizes small enough for exhaustive finite differences.
fn rand_bct(rng: &mut Prng) -> (usize, usize, usize) {
    let b = rng.range_usize(1, 3);
    let c = 2 * rng.range_usize(2, 4);
    let t = rng.range_usize(4, 12);
    (b, c, t)
}

/// Per-sample frame selections with `min_selected..T` frames selected.
fn rand_rows(rng: &mut Prng, b: usize, t: usize, min_selected: usize) -> Vec<Vec<bool>> {
    (0..b)
        .map(|_| loop {
            let row: Vec<bool> = (0..t).map(|_| rng.uniform() < 0.6).collect();
            let n = row.iter().filter(|&&v| v).count();
            if n >= min_selected && n < t {
                break row;
            }
        })
        .collect()
}

/// Adds large noise to every frame the selection leaves out.
fn perturb_unselected(rng: &mut Prng, x: &Tensor, rows: &[Vec<bool>]) -> Tensor {
    let (b_n, c_n, t_n) = match x.shape() {
        [b, c, t] => (*b, *c, *t),
        _ => unreachable!("inputs are rank 3"),
    };
    let mut data = x.data().to_vec();
    for b in 0..b_n {
        for c in 0..c_n {
            for t in 0..t_n {
                if !rows[b][t] {
                    data[(b * c_n + c) * t_n + t] += 100.0 * rng.gaussian();
                }
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), data).expect("same shape")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Checks that every masked layer fed an all-true selection reproduces its
/// unguided output: the gate block, the context gate (scaled frames, segment
/// gates, and global context), train-mode batch normalization (outputs and
/// collected statistics), and attentive pooling.
pub fn reduction_suite(cases: usize, seed: u64) -> Result<Vec<CheckResult>, CheckError> {
    let mut rng = Prng::seed(seed);
    let tol = 1e-12;
    let (mut worst_se, mut worst_cam, mut worst_bn, mut worst_pool) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let (b, c, t) = rand_bct(&mut rng);
        let x = randn3(&mut rng, b, c, t);
        let rows = vec![vec![true; t]; b];

        let p = SEParams::init(c, 2, &mut rng)?;
        let mut tape = Tape::new();
        let plain = se_block_forward(&mut tape, &x, &p, Select::All)?;
        let guided = se_block_forward(&mut tape, &x, &p, Select::Rows(&rows))?;
        worst_se = worst_se.max(max_abs_diff(plain.gate.data(), guided.gate.data()));
        worst_se = worst_se.max(max_abs_diff(plain.scaled.data(), guided.scaled.data()));

        let plan = SegmentPlan::fixed(rng.range_usize(2, 4), t)?;
        let mut tape = Tape::new();
        let plain =
            campp_mask_forward(&mut tape, &x, &p, |_, x| Ok(x.clone()), &plan, Select::All)?;
        let guided = campp_mask_forward(
            &mut tape,
            &x,
            &p,
            |_, x| Ok(x.clone()),
            &plan,
            Select::Rows(&rows),
        )?;
        worst_cam = worst_cam.max(max_abs_diff(plain.scaled.data(), guided.scaled.data()));
        worst_cam = worst_cam.max(max_abs_diff(
            plain.global_context.data(),
            guided.global_context.data(),
        ));
        for (a, b) in plain.gates.iter().zip(&guided.gates) {
            worst_cam = worst_cam.max(max_abs_diff(a.data(), b.data()));
        }

        let mut bn_plain = BNParams::new(c);
        let mut bn_guided = BNParams::new(c);
        let mut tape = Tape::new();
        let y_plain = batchnorm_forward_train(&mut tape, &x, &mut bn_plain, Select::All)?;
        let y_guided =
            batchnorm_forward_train(&mut tape, &x, &mut bn_guided, Select::Rows(&rows))?;
        worst_bn = worst_bn.max(max_abs_diff(y_plain.data(), y_guided.data()));
        let (rp, rg) = (
            bn_plain.running.as_ref().expect("absorbed one batch"),
            bn_guided.running.as_ref().expect("absorbed one batch"),
        );
        worst_bn = worst_bn.max(max_abs_diff(&rp.mean, &rg.mean));
        worst_bn = worst_bn.max(max_abs_diff(&rp.var, &rg.var));

        let pp = PoolParams::init(c, 3, &mut rng);
        let mut tape = Tape::new();
        let plain = attentive_stats_pool(&mut tape, &x, &pp, Select::All)?;
        let guided = attentive_stats_pool(&mut tape, &x, &pp, Select::Rows(&rows))?;
        worst_pool = worst_pool.max(max_abs_diff(plain.data(), guided.data()));
    }
    Ok(vec![
        CheckResult::new("se-gate-reduction", cases, worst_se, tol),
        CheckResult::new("context-gate-reduction", cases, worst_cam, tol),
        CheckResult::new("batchnorm-train-reduction", cases, worst_bn, tol),
        CheckResult::new("attentive-pool-reduction", cases, worst_pool, tol),
    ])
}

/// Checks that perturbing only masked-out frames leaves guided statistics
/// bitwise-unchanged: the gate vector, the context gate's global context,
/// train-mode batch statistics, and the pooled output.
pub fn independence_suite(cases: usize, seed: u64) -> Result<Vec<CheckResult>, CheckError> {
    let mut rng = Prng::seed(seed);
    let (mut worst_se, mut worst_cam, mut worst_bn, mut worst_pool) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let (b, c, t) = rand_bct(&mut rng);
        let x = randn3(&mut rng, b, c, t);
        let rows = rand_rows(&mut rng, b, t, 1);
        let x2 = perturb_unselected(&mut rng, &x, &rows);

        let p = SEParams::init(c, 2, &mut rng)?;
        let mut tape = Tape::new();
        let base = se_block_forward(&mut tape, &x, &p, Select::Rows(&rows))?;
        let moved = se_block_forward(&mut tape, &x2, &p, Select::Rows(&rows))?;
        worst_se = worst_se.max(max_abs_diff(base.gate.data(), moved.gate.data()));

        let plan = SegmentPlan::fixed(rng.range_usize(2, 4), t)?;
        let mut tape = Tape::new();
        let base = campp_mask_forward(
            &mut tape,
            &x,
            &p,
            |_, x| Ok(x.clone()),
            &plan,
            Select::Rows(&rows),
        )?;
        let moved = campp_mask_forward(
            &mut tape,
            &x2,
            &p,
            |_, x| Ok(x.clone()),
            &plan,
            Select::Rows(&rows),
        )?;
        worst_cam = worst_cam.max(max_abs_diff(
            base.global_context.data(),
            moved.global_context.data(),
        ));

        let gamma = Tensor::full(vec![c], 1.0);
        let beta = Tensor::zeros(vec![c]);
        let mut tape = Tape::new();
        let (_, m1, v1) =
            ops::batchnorm_train(&mut tape, &x, &gamma, &beta, Select::Rows(&rows), 1e-5)?;
        let (_, m2, v2) =
            ops::batchnorm_train(&mut tape, &x2, &gamma, &beta, Select::Rows(&rows), 1e-5)?;
        worst_bn = worst_bn.max(max_abs_diff(&m1, &m2));
        worst_bn = worst_bn.max(max_abs_diff(&v1, &v2));

        let pp = PoolParams::init(c, 3, &mut rng);
        let mut tape = Tape::new();
        let base = attentive_stats_pool(&mut tape, &x, &pp, Select::Rows(&rows))?;
        let moved = attentive_stats_pool(&mut tape, &x2, &pp, Select::Rows(&rows))?;
        worst_pool = worst_pool.max(max_abs_diff(base.data(), moved.data()));
    }
    Ok(vec![
        CheckResult::new("se-gate-masked-independence", cases, worst_se, 0.0),
        CheckResult::new("context-gate-global-independence", cases, worst_cam, 0.0),
        CheckResult::new("batchnorm-stats-masked-independence", cases, worst_bn, 0.0),
        CheckResult::new("attentive-pool-masked-independence", cases, worst_pool, 0.0),
    ])
}

/// Sum of squares of a tensor, giving every parameter a second-order path.
fn square_sum(tape: &mut Tape, x: &Tensor) -> Result<Tensor, TensorError> {
    let sq = ops::mul(tape, x, x)?;
    Ok(ops::sum_all(tape, &sq))
}

/// Checks every building block's tape gradients against central finite
/// differences (step `1e-5`, relative error `< 1e-4`): convolution, the dense
/// row map, train-mode batch normalization, the gate block, the context gate,
/// attentive pooling, and the margin-softmax loss. The pooling logit bias is
/// shift-invariant under the frame softmax, so its gradient is checked to
/// vanish absolutely instead of relatively.
pub fn gradient_suite(cases: usize, seed: u64) -> Result<Vec<CheckResult>, CheckError> {
    let mut rng = Prng::seed(seed);
    let step = 1e-5;
    let rel_tol = 1e-4;
    let mut worst = [0.0f64; 8];
    for _ in 0..cases {
        let c = 2 * rng.range_usize(2, 3);
        let t = rng.range_usize(4, 7);
        let x = randn3(&mut rng, 1, c, t);
        let rows = rand_rows(&mut rng, 1, t, 2);

        let groups = if rng.uniform() < 0.5 { 1 } else { 2 };
        let dilation = rng.range_usize(1, 2);
        let kernel = Tensor::from_vec(
            vec![c, c / groups, 3],
            rng.gaussian_vec(c * (c / groups) * 3, 1.0),
        )
        .expect("shape matches");
        let bias = Tensor::from_vec(vec![c], rng.gaussian_vec(c, 1.0)).expect("shape matches");
        let report = finite_difference_check(
            |tape, p| {
                let y = ops::conv1d(tape, &p[0], &p[1], Some(&p[2]), groups, dilation)?;
                square_sum(tape, &y)
            },
            &[("x", x.clone()), ("kernel", kernel), ("bias", bias)],
            step,
        )?;
        worst[0] = worst[0].max(report.max_rel_err);

        let rowvec = Tensor::from_vec(vec![2, c], rng.gaussian_vec(2 * c, 1.0)).expect("shape");
        let w = Tensor::from_vec(vec![3, c], rng.gaussian_vec(3 * c, 1.0)).expect("shape");
        let b = Tensor::from_vec(vec![3], rng.gaussian_vec(3, 1.0)).expect("shape");
        let report = finite_difference_check(
            |tape, p| {
                let y = ops::affine_rows(tape, &p[0], &p[1], &p[2])?;
                square_sum(tape, &y)
            },
            &[("x", rowvec), ("w", w), ("b", b)],
            step,
        )?;
        worst[1] = worst[1].max(report.max_rel_err);

        let gamma = Tensor::from_vec(vec![c], (0..c).map(|_| rng.range_f64(0.5, 1.5)).collect())
            .expect("shape");
        let beta = Tensor::from_vec(vec![c], rng.gaussian_vec(c, 1.0)).expect("shape");
        let rows_bn = rows.clone();
        let report = finite_difference_check(
            |tape, p| {
                let (y, _, _) =
                    ops::batchnorm_train(tape, &p[0], &p[1], &p[2], Select::Rows(&rows_bn), 1e-5)?;
                square_sum(tape, &y)
            },
            &[("x", x.clone()), ("gamma", gamma), ("beta", beta)],
            step,
        )?;
        worst[2] = worst[2].max(report.max_rel_err);

        let se = SEParams::init(c, 2, &mut rng)?;
        let rows_se = rows.clone();
        let report = finite_difference_check(
            |tape, p| {
                let params = SEParams {
                    w3: p[1].clone(),
                    b3: p[2].clone(),
                    w4: p[3].clone(),
                    b4: p[4].clone(),
                };
                let out = se_block_forward(tape, &p[0], &params, Select::Rows(&rows_se))?;
                square_sum(tape, &out.scaled)
            },
            &[
                ("x", x.clone()),
                ("w3", se.w3.clone()),
                ("b3", se.b3.clone()),
                ("w4", se.w4.clone()),
                ("b4", se.b4.clone()),
            ],
            step,
        )?;
        worst[3] = worst[3].max(report.max_rel_err);

        let plan = SegmentPlan::fixed(rng.range_usize(2, 3), t)?;
        let rows_cam = rows.clone();
        let report = finite_difference_check(
            |tape, p| {
                let params = SEParams {
                    w3: p[1].clone(),
                    b3: p[2].clone(),
                    w4: p[3].clone(),
                    b4: p[4].clone(),
                };
                let out = campp_mask_forward(
                    tape,
                    &p[0],
                    &params,
                    |_, x| Ok(x.clone()),
                    &plan,
                    Select::Rows(&rows_cam),
                )?;
                square_sum(tape, &out.scaled)
            },
            &[
                ("x", x.clone()),
                ("w3", se.w3),
                ("b3", se.b3),
                ("w4", se.w4),
                ("b4", se.b4),
            ],
            step,
        )?;
        worst[4] = worst[4].max(report.max_rel_err);

        let pool = PoolParams::init(c, 3, &mut rng);
        let rows_pool = rows.clone();
        let b2 = pool.b2.clone();
        let report = finite_difference_check(
            |tape, p| {
                let params = PoolParams {
                    w1: p[1].clone(),
                    b1: p[2].clone(),
                    w2: p[3].clone(),
                    b2: b2.clone(),
                };
                let out = attentive_stats_pool(tape, &p[0], &params, Select::Rows(&rows_pool))?;
                square_sum(tape, &out)
            },
            &[
                ("h", x.clone()),
                ("w1", pool.w1.clone()),
                ("b1", pool.b1.clone()),
                ("w2", pool.w2.clone()),
            ],
            step,
        )?;
        worst[5] = worst[5].max(report.max_rel_err);

        let mut tape = Tape::new();
        let b2_leaf = tape.leaf(&pool.b2);
        let tracked_pool = PoolParams {
            w1: pool.w1,
            b1: pool.b1,
            w2: pool.w2,
            b2: b2_leaf.clone(),
        };
        let out = attentive_stats_pool(&mut tape, &x, &tracked_pool, Select::Rows(&rows))?;
        let loss = square_sum(&mut tape, &out)?;
        tape.backward(&loss)?;
        let g = tape
            .grad_of(&b2_leaf)?
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; c]);
        worst[6] = worst[6].max(g.iter().fold(0.0f64, |m, v| m.max(v.abs())));

        let emb = Tensor::from_vec(vec![2, 4], rng.gaussian_vec(8, 1.0)).expect("shape");
        let weights = Tensor::from_vec(vec![3, 4], rng.gaussian_vec(12, 1.0)).expect("shape");
        let labels = [rng.range_usize(0, 2), rng.range_usize(0, 2)];
        // A moderate scale keeps every class probability far from the
        // round-off floor where central differences drown in cancellation;
        // the derivative code is identical at any scale.
        let margin = rng.range_f64(0.1, 0.5);
        let scale = rng.range_f64(2.0, 8.0);
        let report = finite_difference_check(
            |tape, p| {
                let head = AAMHead {
                    weights: p[1].clone(),
                    margin,
                    scale,
                };
                aam_softmax_loss(tape, &p[0], &labels, &head).map_err(|e| TensorError::Invalid {
                    op: "aam_softmax_loss",
                    what: e.to_string(),
                })
            },
            &[("embeddings", emb), ("weights", weights)],
            step,
        )?;
        worst[7] = worst[7].max(report.max_rel_err);
    }
    Ok(vec![
        CheckResult::new("conv-gradients", cases, worst[0], rel_tol),
        CheckResult::new("dense-gradients", cases, worst[1], rel_tol),
        CheckResult::new("batchnorm-gradients", cases, worst[2], rel_tol),
        CheckResult::new("se-gate-gradients", cases, worst[3], rel_tol),
        CheckResult::new("context-gate-gradients", cases, worst[4], rel_tol),
        CheckResult::new("attentive-pool-gradients", cases, worst[5], rel_tol),
        CheckResult::new("pool-logit-bias-gradient-vanishes", cases, worst[6], 1e-10),
        CheckResult::new("margin-loss-gradients", cases, worst[7], rel_tol),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn reduction_suite_passes_and_is_exact() {
        let results = reduction_suite(25, 11).unwrap();
        assert_eq!(results.len(), 4);
        for r in &results {
            assert!(r.passed, "{}", r.summary_line());
            assert_eq!(r.worst, 0.0, "{}: expected bitwise agreement", r.property);
        }
    }

    #[test]
    fn independence_suite_passes_bitwise() {
        let results = independence_suite(25, 12).unwrap();
        assert_eq!(results.len(), 4);
        for r in &results {
            assert_eq!(r.tolerance, 0.0);
            assert!(r.passed, "{}", r.summary_line());
        }
    }

    #[test]
    fn gradient_suite_passes_within_tolerance() {
        let start = Instant::now();
        let results = gradient_suite(10, 13).unwrap();
        assert_eq!(results.len(), 8);
        for r in &results {
            assert!(r.passed, "{}", r.summary_line());
            assert!(r.worst > 0.0 || r.property == "pool-logit-bias-gradient-vanishes");
        }
        assert!(start.elapsed().as_secs() < 60, "suite too slow");
    }

    #[test]
    fn failure_reporting_names_the_property() {
        let results = vec![
            CheckResult::new("fine", 1, 0.0, 1e-12),
            CheckResult::new("broken", 1, 1.0, 1e-12),
        ];
        assert!(!all_passed(&results));
        let first = first_failure(&results).unwrap();
        assert_eq!(first.property, "broken");
        assert!(first.summary_line().starts_with("FAIL broken"));
        assert!(all_passed(&results[..1]));
        assert!(first_failure(&results[..1]).is_none());
    }
}
