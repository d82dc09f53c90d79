use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zoomloc_nn::gradcheck::{check, run_suite};
use zoomloc_nn::{Graph, Padding, Tensor};

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let checks = run_suite(&mut rng, 3, 1e-5).unwrap();
    for c in &checks {
        assert!(
            c.passed(1e-4),
            "{} {:?}: rel err {:.3e}",
            c.op,
            c.shapes,
            c.report.max_rel_error
        );
    }
    let ops: std::collections::BTreeSet<_> = checks.iter().map(|c| c.op).collect();
    assert_eq!(ops.len(), 12);
}

#[test]
fn conv_on_5x5_matches_finite_differences() {
    let x = Tensor::from_vec(&[1, 1, 5, 5], (0..25).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
    let w = Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
    let b = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
    let r = check(&[x, w, b], 1e-5, |g: &mut Graph<f64>, ids| {
        let y = g.conv2d(ids[0], ids[1], ids[2], Padding::Same)?;
        let n = g.value(y).len();
        let wts = Tensor::from_vec(g.value(y).shape(), (0..n).map(|i| 0.5 + i as f64 * 0.1).collect())?;
        g.weighted_sum(y, wts)
    })
    .unwrap();
    assert_eq!(r.checked, 25 + 18 + 2);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn wrong_gradient_is_detected() {
    // relu evaluated right on its kink: the one-sided analytic derivative
    // (0) disagrees with the central difference (0.5)
    let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
    let r = check(&[x], 1e-5, |g: &mut Graph<f64>, ids| {
        let y = g.relu(ids[0]);
        g.weighted_sum(y, Tensor::from_vec(&[1], vec![1.0]).unwrap())
    })
    .unwrap();
    assert!(r.max_rel_error > 0.5);
}
