use hvd_core::corpus::{LabelMatrix, ValueTaxonomy};
use hvd_core::metrics::{accuracy, confusion_counts, macro_f1, score, score_run, write_run_file};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: Vec<Vec<u8>>) -> LabelMatrix {
    LabelMatrix::from_rows(rows).unwrap()
}

/// Per-label F1 from explicit loops, zero on an empty denominator, then the plain mean.
fn brute_force_macro_f1(pred: &[Vec<u8>], gold: &[Vec<u8>]) -> f64 {
    let c = gold[0].len();
    let mut total = 0.0;
    for j in 0..c {
        let (mut tp, mut fp, mut fn_) = (0u32, 0u32, 0u32);
        for i in 0..gold.len() {
            match (pred[i][j], gold[i][j]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
        let den = 2 * tp + fp + fn_;
        total += if den == 0 {
            0.0
        } else {
            f64::from(2 * tp) / f64::from(den)
        };
    }
    total / c as f64
}

fn random(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Vec<u8>> {
    let density: f64 = rng.gen_range(0.02..0.5);
    (0..n)
        .map(|_| (0..c).map(|_| u8::from(rng.gen_bool(density))).collect())
        .collect()
}

#[test]
fn macro_f1_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let pred = random(&mut rng, 200, 20);
        let gold = random(&mut rng, 200, 20);
        let got = score(&matrix(pred.clone()), &matrix(gold.clone())).unwrap().macro_f1;
        assert!((got - brute_force_macro_f1(&pred, &gold)).abs() <= 1e-12);
    }
}

#[test]
fn hand_cases() {
    let pred = matrix(vec![vec![1, 0], vec![1, 1], vec![0, 0]]);
    let gold = matrix(vec![vec![1, 0], vec![0, 1], vec![0, 0]]);
    let counts = confusion_counts(&pred, &gold).unwrap();
    assert_eq!((counts[0].tp, counts[0].fp, counts[0].fn_), (1, 1, 0));
    assert_eq!((counts[1].tp, counts[1].fp, counts[1].fn_), (1, 0, 0));

    let pred = matrix(vec![vec![1, 0], vec![1, 0]]);
    let gold = matrix(vec![vec![1, 1], vec![0, 0]]);
    let result = score(&pred, &gold).unwrap();
    assert!((result.per_label[0].f1 - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(result.per_label[1].f1, 0.0);
    assert!((result.macro_f1 - 1.0 / 3.0).abs() < 1e-15);

    let zeros = matrix(vec![vec![0; 20]; 4]);
    assert_eq!(score(&zeros, &zeros).unwrap().macro_f1, 0.0);
    let ones = matrix(vec![vec![1; 20]; 4]);
    assert_eq!(score(&ones, &ones).unwrap().macro_f1, 1.0);
    let flipped = confusion_counts(&zeros, &ones).unwrap();
    assert!(flipped.iter().all(|c| c.tp == 0 && c.tn == 0));
}

#[test]
fn accuracy_hand_cases() {
    assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(accuracy(&[1, 0, 1, 1], &[0, 1, 0, 0]).unwrap(), 0.0);
    assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 0, 1, 0]).unwrap(), 0.75);
    assert!(accuracy(&[1], &[1, 0]).is_err());
}

#[test]
fn run_file_round_trip_scores_like_direct_scoring() {
    let tax = ValueTaxonomy::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<String> = (0..30).map(|i| format!("A{i:05}")).collect();
    let pred = LabelMatrix::new(ids.clone(), random(&mut rng, 30, 20), 20).unwrap();
    let gold = LabelMatrix::new(ids.clone(), random(&mut rng, 30, 20), 20).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (pred_path, gold_path) = (dir.path().join("run.tsv"), dir.path().join("gold.tsv"));
    let mut shuffled: Vec<usize> = (0..30).collect();
    shuffled.shuffle(&mut rng);
    write_run_file(&pred.select(&shuffled), &pred_path, &tax).unwrap();
    write_run_file(&gold, &gold_path, &tax).unwrap();
    let from_file = score_run(&pred_path, &gold_path, &tax).unwrap();
    let direct = macro_f1(&confusion_counts(&pred, &gold).unwrap());
    assert_eq!(from_file.per_label, direct.per_label);
    assert_eq!(from_file.macro_f1, direct.macro_f1);
    assert_eq!(from_file.provenance.run_file.as_deref(), Some(pred_path.as_path()));
}

#[test]
fn run_file_with_unknown_ids_is_refused() {
    let tax = ValueTaxonomy::builtin();
    let dir = tempfile::tempdir().unwrap();
    let a = LabelMatrix::new(vec!["x".into()], vec![vec![0; 20]], 20).unwrap();
    let b = LabelMatrix::new(vec!["y".into()], vec![vec![0; 20]], 20).unwrap();
    write_run_file(&a, dir.path().join("a.tsv"), &tax).unwrap();
    write_run_file(&b, dir.path().join("b.tsv"), &tax).unwrap();
    let err = score_run(dir.path().join("a.tsv"), dir.path().join("b.tsv"), &tax).unwrap_err();
    assert!(matches!(err, hvd_core::Error::Integrity(_)));
}

fn pair() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<Vec<u8>>)> {
    (1usize..40, 1usize..8).prop_flat_map(|(n, c)| {
        let m = prop::collection::vec(prop::collection::vec(0u8..=1, c), n);
        (m.clone(), m)
    })
}

proptest! {
    #[test]
    fn row_permutation_leaves_result_unchanged((pred, gold) in pair(), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..pred.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = score(&matrix(pred.clone()), &matrix(gold.clone())).unwrap();
        let pp: Vec<Vec<u8>> = order.iter().map(|&i| pred[i].clone()).collect();
        let gp: Vec<Vec<u8>> = order.iter().map(|&i| gold[i].clone()).collect();
        let b = score(&matrix(pp), &matrix(gp)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn column_permutation_permutes_labels((pred, gold) in pair(), seed in any::<u64>()) {
        let c = pred[0].len();
        let mut order: Vec<usize> = (0..c).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permute = |m: &Vec<Vec<u8>>| -> Vec<Vec<u8>> {
            m.iter().map(|r| order.iter().map(|&j| r[j]).collect()).collect()
        };
        let a = score(&matrix(pred.clone()), &matrix(gold.clone())).unwrap();
        let b = score(&matrix(permute(&pred)), &matrix(permute(&gold))).unwrap();
        for (k, &j) in order.iter().enumerate() {
            prop_assert_eq!(&b.per_label[k], &a.per_label[j]);
        }
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
    }
}
