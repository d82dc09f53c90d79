use zoomloc::downstream::{label_fraction_subset, majority_vote, vote_winner, PatchSet, PatientPrediction};
use zoomloc::eval::{aggregate_runs, mean_class_accuracy, mean_std, ConfusionMatrix};
use zoomloc::Error;

fn onehot(c: usize) -> Vec<f64> {
    (0..3).map(|i| if i == c { 0.9 } else { 0.05 }).collect()
}

#[test]
fn majority_and_ties() {
    let (w, votes, margin) = majority_vote(&[onehot(0), onehot(0), onehot(1)], 3).unwrap();
    assert_eq!((w, votes, margin), (0, vec![2, 1, 0], 1));

    // one vote each; summed softmax mass decides
    let (w, votes, margin) = majority_vote(&[vec![0.7, 0.3], vec![0.4, 0.6]], 2).unwrap();
    assert_eq!((w, votes, margin), (0, vec![1, 1], 0));
    let (w, _, _) = majority_vote(&[vec![0.6, 0.4], vec![0.3, 0.7]], 2).unwrap();
    assert_eq!(w, 1);
    assert_eq!(vote_winner(&[1, 1], &[1.3, 1.1]), 0);
    assert_eq!(vote_winner(&[1, 1], &[1.1, 1.3]), 1);
    assert_eq!(vote_winner(&[2, 2, 1], &[1.0, 1.0, 5.0]), 0, "full tie: lowest index");

    let (w, votes, _) = majority_vote(&[onehot(2)], 3).unwrap();
    assert_eq!((w, votes), (2, vec![0, 0, 1]));
    assert!(matches!(majority_vote(&[], 3), Err(Error::NoPatches(_))));
}

#[test]
fn mean_class_accuracy_examples() {
    let cm = ConfusionMatrix::from_rows(vec![vec![3, 1], vec![1, 1]]).unwrap();
    assert_eq!(mean_class_accuracy(&cm).unwrap(), 0.625);
    assert_eq!(cm.misclassified(), 2);
    let diag = ConfusionMatrix::from_rows(vec![vec![4, 0, 0], vec![0, 2, 0], vec![0, 0, 7]]).unwrap();
    assert_eq!(mean_class_accuracy(&diag).unwrap(), 1.0);
    let empty = ConfusionMatrix::from_rows(vec![vec![1, 0], vec![0, 0]]).unwrap();
    assert!(matches!(mean_class_accuracy(&empty), Err(Error::EmptyClass(1))));
    assert!(ConfusionMatrix::from_rows(vec![vec![1, 0], vec![0]]).is_err());
}

#[test]
fn confusion_from_predictions() {
    let p = |id: &str, t, pred| PatientPrediction {
        patient_id: id.into(),
        true_label: t,
        pred,
        votes: vec![],
        margin: 0,
    };
    let cm = ConfusionMatrix::from_predictions(&[p("a", 0, 0), p("b", 0, 1), p("c", 1, 1)], 2, 4).unwrap();
    assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
    assert_eq!(cm.run_id, 4);
    assert!(ConfusionMatrix::from_predictions(&[p("x", 2, 0)], 2, 0).is_err());
}

#[test]
fn run_aggregation() {
    let a = ConfusionMatrix::from_rows(vec![vec![3, 1], vec![1, 1]]).unwrap();
    let same = aggregate_runs(&[a.clone(), a.clone(), a.clone()]).unwrap();
    assert_eq!(same.std_class_accuracy, 0.0);
    assert!(same.cell_std.iter().flatten().all(|&s| s == 0.0));
    assert_eq!(same.mean_class_accuracy, 0.625);

    let b = ConfusionMatrix::from_rows(vec![vec![5, 1], vec![1, 1]]).unwrap();
    let s = aggregate_runs(&[a.clone(), b]).unwrap();
    assert_eq!(s.cell_mean[0][0], 4.0);
    assert_eq!(s.cell_std[0][0], 2f64.sqrt());
    assert_eq!(s.cell_std[0][1], 0.0);

    // 2 and 3 misclassified: mean 2.5 rounds up to 3
    let c = ConfusionMatrix::from_rows(vec![vec![2, 2], vec![1, 1]]).unwrap();
    assert_eq!(aggregate_runs(&[a.clone(), c]).unwrap().misclassified, 3);

    assert!(aggregate_runs(&[a.clone()]).is_err());
    let k3 = ConfusionMatrix::new(3, 1);
    assert!(aggregate_runs(&[a, k3]).is_err());
    assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
}

#[test]
fn fraction_subsets() {
    let mut set = PatchSet::new(1);
    for c in 0..2u32 {
        for i in 0..300 {
            set.push(&[i as u8, 0, 0], c, &format!("p{c}"));
        }
    }
    let sub = label_fraction_subset(&set, 2, 0.33, 1).unwrap();
    assert_eq!(sub.class_counts(2), vec![99, 99]);
    assert_eq!(label_fraction_subset(&set, 2, 1.0, 1).unwrap(), set);
    assert_eq!(label_fraction_subset(&set, 2, 0.33, 1).unwrap(), sub);
    assert!(matches!(label_fraction_subset(&set, 2, 0.0, 1), Err(Error::FractionOutOfRange(_))));
    assert!(label_fraction_subset(&set, 2, 1.5, 1).is_err());
}
