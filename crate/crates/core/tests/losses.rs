use candle_core::{DType, Device, Tensor, Var};
use hvd_core::corpus::LabelMatrix;
use hvd_core::losses::{bce_multilabel, cl_loss, cl_weights, LossConfig, Similarity};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    let (b, d) = (rows.len(), rows[0].len());
    Tensor::from_vec(rows.concat(), (b, d), &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn labels(rows: &[Vec<u8>]) -> LabelMatrix {
    LabelMatrix::from_rows(rows.to_vec()).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, b: usize, c: usize, density: f64) -> Vec<Vec<u8>> {
    (0..b)
        .map(|_| (0..c).map(|_| u8::from(rng.gen_bool(density))).collect())
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, b: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| (0..d).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

/// Sum over labels of `-[y log s(x) + (1-y) log(1 - s(x))]`, averaged over rows.
fn bce_oracle(logits: &[Vec<f64>], targets: &[Vec<u8>]) -> f64 {
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let total: f64 = logits
        .iter()
        .zip(targets)
        .flat_map(|(xr, yr)| xr.iter().zip(yr))
        .map(|(&x, &y)| {
            let p = sigmoid(x);
            -(f64::from(y) * p.ln() + (1.0 - f64::from(y)) * (1.0 - p).ln())
        })
        .sum();
    total / logits.len() as f64
}

/// Direct transcription of the weighted contrastive loss with plain loops.
fn cl_oracle(emb: &[Vec<f64>], y: &[Vec<u8>], cfg: &LossConfig) -> f64 {
    let b = emb.len();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, z)| x * z).sum::<f64>();
    let sim = |i: usize, j: usize| match cfg.similarity {
        Similarity::Dot => dot(&emb[i], &emb[j]),
        Similarity::Cosine => dot(&emb[i], &emb[j]) / (dot(&emb[i], &emb[i]).sqrt() * dot(&emb[j], &emb[j]).sqrt()),
    };
    let overlap = |i: usize, j: usize| y[i].iter().zip(&y[j]).map(|(a, c)| f64::from(a * c)).sum::<f64>();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..b {
        let others: Vec<usize> = (0..b).filter(|&j| !(cfg.exclude_self && j == i)).collect();
        let norm: f64 = others.iter().map(|&j| overlap(i, j)).sum::<f64>() + cfg.epsilon;
        if others.iter().all(|&j| overlap(i, j) == 0.0) {
            continue;
        }
        let num: f64 = others
            .iter()
            .map(|&j| overlap(i, j) / norm * (sim(i, j) / cfg.temperature).exp())
            .sum();
        let den: f64 = others.iter().map(|&j| (sim(i, j) / cfg.temperature).exp()).sum();
        total += -(num / den).ln();
        anchors += 1;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Central differences of `f` at `x`, one coordinate at a time.
fn numeric_gradient(x: &[Vec<f64>], f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut grad = Vec::new();
    for i in 0..x.len() {
        for j in 0..x[0].len() {
            let mut plus = x.to_vec();
            plus[i][j] += h;
            let mut minus = x.to_vec();
            minus[i][j] -= h;
            grad.push((f(&tensor(&plus)) - f(&tensor(&minus))) / (2.0 * h));
        }
    }
    grad
}

fn analytic_gradient(x: &[Vec<f64>], f: impl Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let var = Var::from_tensor(&tensor(x)).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    grads
        .get(var.as_tensor())
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}

#[test]
fn bce_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let b = rng.gen_range(1..=8);
        let x = random_matrix(&mut rng, b, 20, 6.0);
        let y = random_labels(&mut rng, b, 20, 0.3);
        let targets: Vec<Vec<f64>> = y.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
        let got = scalar(&bce_multilabel(&tensor(&x), &tensor(&targets)).unwrap());
        assert!((got - bce_oracle(&x, &y)).abs() < 1e-10);
    }
}

#[test]
fn bce_stays_finite_at_extreme_logits() {
    let x = vec![vec![1000.0, -1000.0]];
    let y = vec![vec![0.0, 1.0]];
    let got = scalar(&bce_multilabel(&tensor(&x), &tensor(&y)).unwrap());
    assert!((got - 2000.0).abs() < 1e-9);
}

#[test]
fn cl_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..60 {
        let cfg = LossConfig {
            exclude_self: case % 2 == 0,
            similarity: if case % 3 == 0 {
                Similarity::Dot
            } else {
                Similarity::Cosine
            },
            temperature: if case % 3 == 0 { 1.0 } else { 0.05 },
            ..LossConfig::default()
        };
        let b = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=8);
        let x = random_matrix(&mut rng, b, d, 1.0);
        let y = random_labels(&mut rng, b, 20, 0.2);
        let got = scalar(&cl_loss(&tensor(&x), &labels(&y), &cfg).unwrap().loss);
        let want = cl_oracle(&x, &y, &cfg);
        assert!(
            (got - want).abs() < 1e-9 * want.abs().max(1.0),
            "case {case}: {got} vs {want}"
        );
    }
}

#[test]
fn closed_form_for_equal_similarities() {
    for b in 2..=8 {
        for exclude_self in [true, false] {
            let cfg = LossConfig {
                epsilon: 1e-12,
                exclude_self,
                ..LossConfig::default()
            };
            let x = vec![vec![1.0, 2.0, 3.0]; b];
            let y = vec![vec![1u8; 20]; b];
            let got = scalar(&cl_loss(&tensor(&x), &labels(&y), &cfg).unwrap().loss);
            let b_prime = if exclude_self { b - 1 } else { b } as f64;
            assert!((got - b_prime.ln()).abs() < 1e-6, "B={b}: {got}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..20 {
        let b = rng.gen_range(2..=6);
        let d = rng.gen_range(2..=8);
        let y = random_labels(&mut rng, b, 20, 0.3);
        let targets: Vec<Vec<f64>> = y.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
        let targets = tensor(&targets);

        let logits = random_matrix(&mut rng, b, 20, 3.0);
        let bce = |t: &Tensor| bce_multilabel(t, &targets).unwrap();
        let err = relative_error(
            &analytic_gradient(&logits, bce),
            &numeric_gradient(&logits, |t| scalar(&bce(t))),
        );
        assert!(err < 1e-4, "bce case {case}: {err}");

        let emb = random_matrix(&mut rng, b, d, 1.0);
        let lab = labels(&y);
        let cfg = LossConfig::default();
        let cl = |t: &Tensor| cl_loss(t, &lab, &cfg).unwrap().loss;
        let err = relative_error(
            &analytic_gradient(&emb, cl),
            &numeric_gradient(&emb, |t| scalar(&cl(t))),
        );
        assert!(err < 1e-4, "cl case {case}: {err}");
    }
}

#[test]
fn weight_rows_sum_to_overlap_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eps = 1e-8;
    for case in 0..50 {
        let b = rng.gen_range(2..=10);
        let mut y = random_labels(&mut rng, b, 20, 0.15);
        y[0] = vec![0; 20];
        let exclude_self = case % 2 == 0;
        let w = cl_weights(&labels(&y), eps, exclude_self);
        for i in 0..b {
            let s: f64 = (0..b)
                .filter(|&k| !(exclude_self && k == i))
                .map(|k| y[i].iter().zip(&y[k]).map(|(a, c)| f64::from(a * c)).sum::<f64>())
                .sum();
            let row: f64 = w[i].iter().sum();
            assert!((row - s / (s + eps)).abs() < 1e-9);
            if y[i].iter().all(|&v| v == 0) {
                assert_eq!(row, 0.0);
            }
        }
    }
}

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<u8>>)> {
    (2usize..=6, 2usize..=6).prop_flat_map(|(b, d)| {
        (
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), b),
            prop::collection::vec(prop::collection::vec(0u8..=1, 20), b),
        )
    })
}

proptest! {
    #[test]
    fn cl_is_permutation_invariant((x, y) in instance(), seed in any::<u64>()) {
        let cfg = LossConfig::default();
        let mut order: Vec<usize> = (0..x.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let px: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
        let py: Vec<Vec<u8>> = order.iter().map(|&i| y[i].clone()).collect();
        let a = scalar(&cl_loss(&tensor(&x), &labels(&y), &cfg).unwrap().loss);
        let b = scalar(&cl_loss(&tensor(&px), &labels(&py), &cfg).unwrap().loss);
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn cosine_cl_ignores_row_scale((x, y) in instance(), scales in prop::collection::vec(0.1f64..10.0, 6)) {
        let cfg = LossConfig::default();
        let sx: Vec<Vec<f64>> = x.iter().zip(&scales).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
        let a = scalar(&cl_loss(&tensor(&x), &labels(&y), &cfg).unwrap().loss);
        let b = scalar(&cl_loss(&tensor(&sx), &labels(&y), &cfg).unwrap().loss);
        prop_assert!((a - b).abs() < 1e-8 * a.abs().max(1.0));
    }

    #[test]
    fn cl_is_nonnegative((x, y) in instance(), exclude_self in any::<bool>()) {
        let cfg = LossConfig { exclude_self, ..LossConfig::default() };
        let v = scalar(&cl_loss(&tensor(&x), &labels(&y), &cfg).unwrap().loss);
        prop_assert!(v >= 0.0);
    }
}
