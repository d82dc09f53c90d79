//! Central finite-difference gradient verification.
//!
//! The numeric side only ever calls the forward pass, so it checks
//! [`Graph::backward`] without sharing any of its code.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Magnitude below which differences are measured in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Checks the gradient of the scalar produced by `build` with respect to
/// every element of every tensor in `inputs`.
///
/// `build` receives a fresh graph and one variable node per input and must
/// return a scalar node.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let analytic = grads.node(*id).unwrap_or(&zero).clone();
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.data()[j], numeric, REL_FLOOR);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// One entry of [`run_suite`].
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub report: GradReport,
}

impl OpCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.report.max_rel_error < tol && self.report.checked > 0
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values with magnitude in [0.1, 1] and random sign, so a step of `h`
/// never crosses the relu kink.
fn away_from_zero(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor<f64> {
    let mut t = uniform(shape, 0.1, 1.0, rng);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Pairwise distinct values at least 0.015 apart, so max-pool winners are
/// stable under a step of `h`.
fn well_separated(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.02 + rng.gen_range(0.0..0.005)).collect();
    vals.shuffle(rng);
    let shift = n as f64 * 0.01;
    Tensor::from_vec(shape, vals.into_iter().map(|v| v - shift).collect()).expect("shape")
}

/// Fixed reduction weights that depend only on the output shape.
fn index_weights(shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| (i as f64 * 0.731 + 0.3).sin()).collect()).expect("shape")
}

fn one_hot_rows(b: usize, k: usize, rng: &mut impl rand::Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[b, k]);
    for r in 0..b {
        let c = rng.gen_range(0..k);
        t.data_mut()[r * k + c] = 1.0;
    }
    t
}

/// Runs central-difference checks for every op over `rounds` rounds of
/// randomly drawn shapes. Each round covers every op once.
pub fn run_suite(rng: &mut impl rand::Rng, rounds: usize, h: f64) -> Result<Vec<OpCheck>> {
    use crate::graph::Padding;
    let mut out = Vec::new();
    let mut push = |op, inputs: &[Tensor<f64>], report: GradReport| {
        out.push(OpCheck {
            op,
            shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
            report,
        });
    };

    for _ in 0..rounds {
        let b = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=3);
        let o = rng.gen_range(1..=3);
        let hgt = rng.gen_range(4..=7);
        let wid = rng.gen_range(4..=7);
        let img = [b, c, hgt, wid];

        for (name, padding, k) in [("conv2d_same", Padding::Same, 3), ("conv2d_valid", Padding::Valid, rng.gen_range(1..=3))] {
            let ins = vec![
                uniform(&img, -1.0, 1.0, rng),
                uniform(&[o, c, k, k], -1.0, 1.0, rng),
                uniform(&[o], -0.5, 0.5, rng),
            ];
            let r = check(&ins, h, |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], padding)?;
                let wts = index_weights(g.value(y).shape());
                g.weighted_sum(y, wts)
            })?;
            push(name, &ins, r);
        }

        let x = well_separated(&img, rng);
        let wts = uniform(&[b, c, hgt / 2, wid / 2], -1.0, 1.0, rng);
        let ins = vec![x];
        let r = check(&ins, h, |g, ids| {
            let y = g.maxpool2(ids[0])?;
            g.weighted_sum(y, wts.clone())
        })?;
        push("maxpool2d", &ins, r);

        let ins = vec![uniform(&img, -1.0, 1.0, rng)];
        let wts = uniform(&[b, c, hgt / 2, wid / 2], -1.0, 1.0, rng);
        let r = check(&ins, h, |g, ids| {
            let y = g.avgpool(ids[0], 2)?;
            g.weighted_sum(y, wts.clone())
        })?;
        push("avgpool2d", &ins, r);

        let wts = uniform(&[b, c], -1.0, 1.0, rng);
        let r = check(&ins, h, |g, ids| {
            let y = g.global_avgpool(ids[0])?;
            g.weighted_sum(y, wts.clone())
        })?;
        push("global_avgpool", &ins, r);

        let ins = vec![away_from_zero(&img, rng)];
        let wts = uniform(&img, -1.0, 1.0, rng);
        let r = check(&ins, h, |g, ids| {
            let y = g.relu(ids[0]);
            g.weighted_sum(y, wts.clone())
        })?;
        push("relu", &ins, r);

        let wts = uniform(&[b, c * hgt * wid], -1.0, 1.0, rng);
        let r = check(&ins, h, |g, ids| {
            let y = g.flatten(ids[0])?;
            g.weighted_sum(y, wts.clone())
        })?;
        push("flatten", &ins, r);

        let (fin, fout) = (rng.gen_range(1..=6), rng.gen_range(1..=5));
        let ins = vec![
            uniform(&[b, fin], -1.0, 1.0, rng),
            uniform(&[fin, fout], -1.0, 1.0, rng),
            uniform(&[fout], -1.0, 1.0, rng),
        ];
        let wts = uniform(&[b, fout], -1.0, 1.0, rng);
        let r = check(&ins, h, |g, ids| {
            let y = g.dense(ids[0], ids[1], ids[2])?;
            g.weighted_sum(y, wts.clone())
        })?;
        push("dense", &ins, r);

        let axis = rng.gen_range(0..2);
        let (k1, k2) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (s1, s2) = if axis == 0 { ([k1, 3], [k2, 3]) } else { ([b, k1], [b, k2]) };
        let ins = vec![uniform(&s1, -1.0, 1.0, rng), uniform(&s2, -1.0, 1.0, rng)];
        let out_shape = if axis == 0 { [k1 + k2, 3] } else { [b, k1 + k2] };
        let wts = uniform(&out_shape, -1.0, 1.0, rng);
        let r = check(&ins, h, |g, ids| {
            let y = g.concat(&[ids[0], ids[1]], axis)?;
            g.weighted_sum(y, wts.clone())
        })?;
        push("concat", &ins, r);

        let k = rng.gen_range(2..=16);
        let ins = vec![uniform(&[b + 1, k], -3.0, 3.0, rng)];
        let tg = one_hot_rows(b + 1, k, rng);
        let r = check(&ins, h, |g, ids| g.softmax_cross_entropy(ids[0], tg.clone()))?;
        push("softmax_cross_entropy", &ins, r);

        let ins = vec![uniform(&[b + 2, 1], -4.0, 4.0, rng)];
        let tg = Tensor::from_vec(&[b + 2, 1], (0..b + 2).map(|_| f64::from(rng.gen_range(0..2u8))).collect())?;
        let r = check(&ins, h, |g, ids| g.sigmoid_bce(ids[0], tg.clone()))?;
        push("sigmoid_bce", &ins, r);

        // smooth end-to-end chain: conv -> avgpool -> conv -> gap -> dense -> concat -> ce
        let ins = vec![
            uniform(&[b, c, 4, 4], -1.0, 1.0, rng),
            uniform(&[2, c, 3, 3], -1.0, 1.0, rng),
            uniform(&[2], -0.5, 0.5, rng),
            uniform(&[3, 2, 1, 1], -1.0, 1.0, rng),
            uniform(&[3], -0.5, 0.5, rng),
            uniform(&[6, 4], -1.0, 1.0, rng),
            uniform(&[4], -0.5, 0.5, rng),
        ];
        let tg = one_hot_rows(b, 4, rng);
        let r = check(&ins, h, |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], Padding::Same)?;
            let y = g.avgpool(y, 2)?;
            let y = g.conv2d(y, ids[3], ids[4], Padding::Valid)?;
            let y = g.global_avgpool(y)?;
            let z = g.concat(&[y, y], 1)?;
            let logits = g.dense(z, ids[5], ids[6])?;
            g.softmax_cross_entropy(logits, tg.clone())
        })?;
        push("chain", &ins, r);
    }
    Ok(out)
}
