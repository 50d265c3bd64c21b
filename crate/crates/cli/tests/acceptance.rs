//! Desk-scale acceptance suite: one pass/fail line per criterion.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use hvd_cli::commands::{cmd_train, HISTORY_FILE};
use hvd_cli::config::ExperimentConfig;
use hvd_core::assets;
use hvd_core::corpus::{build_nli, load_arguments, load_dataset, write_arguments, write_labels, NliLabel};
use hvd_core::encoder::{resolve_backend, LanguageBackend, TINY_TEST, TINY_TEST_GENERATIVE};
use hvd_core::llm::{evaluate_llm, LlmOptions, MockClient};
use hvd_core::losses::{bce_multilabel, cl_loss, cl_weights, LossConfig};
use hvd_core::metrics::{accuracy, confusion_counts, macro_f1};
use hvd_core::prompting::{prompt_tune, render, PromptOptions, TemplateMode, TemplateSet, Verbalizer};
use hvd_core::training::{
    build_param_groups, predict, train, ClStrategy, Classifier, HeadConfig, HeadVariant, TrainConfig, TrainHistory,
};
use hvd_core::{Dataset, LabelMatrix, ValueTaxonomy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(message())
    }
}

fn core_tests() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests")
}

fn fixture(n: usize) -> Dataset {
    let (ds, _) = load_dataset(
        assets::fixture_arguments(),
        assets::fixture_labels(),
        &ValueTaxonomy::builtin(),
    )
    .unwrap();
    ds.select(&(0..n).collect::<Vec<_>>())
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_vec(rows.concat(), (rows.len(), rows[0].len()), &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn random_bits(rng: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> Vec<Vec<u8>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| u8::from(rng.gen_bool(density))).collect())
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

fn head(backend: &dyn LanguageBackend) -> HeadConfig {
    HeadConfig {
        variant: HeadVariant::MultiHead,
        input_dim: backend.capabilities().hidden_size,
        num_labels: 20,
    }
}

fn closed_form() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for b in 2..=8 {
        for exclude_self in [true, false] {
            let cfg = LossConfig {
                epsilon: 1e-12,
                exclude_self,
                ..LossConfig::default()
            };
            let emb = tensor(&vec![vec![0.3, -1.0, 2.0]; b]);
            let labels = LabelMatrix::from_rows(vec![vec![1; 20]; b]).unwrap();
            let got = scalar(&cl_loss(&emb, &labels, &cfg).unwrap().loss);
            let b_prime = if exclude_self { b - 1 } else { b };
            let err = (got - (b_prime as f64).ln()).abs();
            ensure(err < 1e-6, || format!("B={b} exclude_self={exclude_self}: {got}"))?;
            worst = worst.max(err);
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("max |loss - log B'| = {worst:.1e}"))
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (norm(a) + norm(b)).max(1e-12)
}

fn gradient_pair(x: &[Vec<f64>], f: impl Fn(&Tensor) -> Tensor) -> (Vec<f64>, Vec<f64>) {
    let var = Var::from_tensor(&tensor(x)).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    // A loss that does not depend on `x` (no positive pairs) has no gradient entry.
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
        None => vec![0.0; x.len() * x[0].len()],
    };
    let h = 1e-5;
    let mut numeric = Vec::new();
    for i in 0..x.len() {
        for j in 0..x[0].len() {
            let (mut plus, mut minus) = (x.to_vec(), x.to_vec());
            plus[i][j] += h;
            minus[i][j] -= h;
            numeric.push((scalar(&f(&tensor(&plus))) - scalar(&f(&tensor(&minus)))) / (2.0 * h));
        }
    }
    (analytic, numeric)
}

fn gradient_checks() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let b = rng.gen_range(2..=6);
        let d = rng.gen_range(2..=8);
        let y = random_bits(&mut rng, b, 20, 0.3);
        let targets = tensor(
            &y.iter()
                .map(|r| r.iter().map(|&v| f64::from(v)).collect())
                .collect::<Vec<_>>(),
        );
        let logits = random_matrix(&mut rng, b, 20, 3.0);
        let (a, n) = gradient_pair(&logits, |t| bce_multilabel(t, &targets).unwrap());
        let bce_err = relative_error(&a, &n);
        let labels = LabelMatrix::from_rows(y).unwrap();
        let emb = random_matrix(&mut rng, b, d, 1.0);
        let cfg = LossConfig::default();
        let (a, n) = gradient_pair(&emb, |t| cl_loss(t, &labels, &cfg).unwrap().loss);
        let cl_err = relative_error(&a, &n);
        ensure(bce_err < 1e-4 && cl_err < 1e-4, || {
            format!("case {case}: bce {bce_err:.2e}, cl {cl_err:.2e}")
        })?;
        worst = worst.max(bce_err).max(cl_err);
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("20 instances, max relative error {worst:.1e}"))
}

fn weight_normalization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eps = 1e-8;
    let mut zero_rows = 0;
    for case in 0..50 {
        let b = rng.gen_range(2..=10);
        let mut y = random_bits(&mut rng, b, 20, 0.15);
        y[case % b] = vec![0; 20];
        let exclude_self = case % 2 == 0;
        let w = cl_weights(&LabelMatrix::from_rows(y.clone()).unwrap(), eps, exclude_self);
        for i in 0..b {
            let s: f64 = (0..b)
                .filter(|&k| !(exclude_self && k == i))
                .map(|k| y[i].iter().zip(&y[k]).map(|(p, q)| f64::from(p * q)).sum::<f64>())
                .sum();
            let row: f64 = w[i].iter().sum();
            ensure((row - s / (s + eps)).abs() < 1e-9, || {
                format!("case {case} row {i}: {row} vs S={s}")
            })?;
            if y[i].iter().all(|&v| v == 0) {
                ensure(row == 0.0, || {
                    format!("case {case} row {i}: all-zero labels sum to {row}")
                })?;
                zero_rows += 1;
            }
        }
    }
    Ok(format!("50 matrices, {zero_rows} all-zero rows"))
}

fn brute_force_macro_f1(pred: &[Vec<u8>], gold: &[Vec<u8>]) -> f64 {
    let c = gold[0].len();
    let mut total = 0.0;
    for j in 0..c {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (p, g) in pred.iter().zip(gold) {
            match (p[j], g[j]) {
                (1, 1) => tp += 1.0,
                (1, 0) => fp += 1.0,
                (0, 1) => fn_ += 1.0,
                _ => {}
            }
        }
        let denom = 2.0 * tp + fp + fn_;
        total += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    total / c as f64
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let pred = random_bits(&mut rng, 200, 20, 0.2);
        let gold = random_bits(&mut rng, 200, 20, 0.2);
        let counts = confusion_counts(
            &LabelMatrix::from_rows(pred.clone()).unwrap(),
            &LabelMatrix::from_rows(gold.clone()).unwrap(),
        )
        .unwrap();
        let got = macro_f1(&counts).macro_f1;
        let want = brute_force_macro_f1(&pred, &gold);
        ensure((got - want).abs() <= 1e-12, || format!("case {case}: {got} vs {want}"))?;
    }
    let pred = LabelMatrix::from_rows(vec![vec![1, 0], vec![1, 1], vec![0, 0]]).unwrap();
    let gold = LabelMatrix::from_rows(vec![vec![1, 0], vec![0, 1], vec![0, 0]]).unwrap();
    let hand = macro_f1(&confusion_counts(&pred, &gold).unwrap());
    let pred = LabelMatrix::from_rows(vec![vec![1, 0], vec![1, 0]]).unwrap();
    let gold = LabelMatrix::from_rows(vec![vec![1, 1], vec![0, 0]]).unwrap();
    let third = macro_f1(&confusion_counts(&pred, &gold).unwrap());
    ensure(
        (hand.per_label[0].f1 - 2.0 / 3.0).abs() < 1e-15 && hand.per_label[1].f1 == 1.0,
        || {
            format!(
                "3x2 hand case: {:?}",
                hand.per_label.iter().map(|s| s.f1).collect::<Vec<_>>()
            )
        },
    )?;
    ensure(
        (third.per_label[0].f1 - 2.0 / 3.0).abs() < 1e-15
            && third.per_label[1].f1 == 0.0
            && (third.macro_f1 - 1.0 / 3.0).abs() < 1e-15,
        || format!("F1s 2/3 and 0 gave macro {}", third.macro_f1),
    )?;
    Ok("100 random 200x20 pairs exact, hand case macro 1/3".into())
}

fn overfit(cl_strategy: ClStrategy) -> Result<(f64, Duration), String> {
    let start = Instant::now();
    let ds = fixture(32);
    let backend = resolve_backend(TINY_TEST).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        epochs: 50.0,
        lr: 0.1,
        lr_decay: 0.1,
        trainable_top_layers: 2,
        cl_strategy,
        ..TrainConfig::default()
    };
    let loss = LossConfig {
        cl_weight: 0.1,
        ..LossConfig::default()
    };
    let out = train(&ds, backend.as_ref(), &head(backend.as_ref()), &config, &loss, None).map_err(|e| e.to_string())?;
    let steps = out.history.records.iter().filter(|r| r.loss.is_some()).count();
    ensure(steps <= 200, || format!("{steps} steps"))?;
    let classifier = Classifier {
        backend: backend.as_ref(),
        head: out.head,
        pooling: config.pooling,
        input_style: config.input_style.clone(),
    };
    let pred = predict(&classifier, &ds, config.threshold, 32).map_err(|e| e.to_string())?;
    let f1 = macro_f1(&confusion_counts(&pred.labels, ds.labels()).unwrap()).macro_f1;
    Ok((f1, start.elapsed()))
}

fn overfit_smoke() -> Check {
    let (bce, t_bce) = overfit(ClStrategy::None)?;
    let (aux, t_aux) = overfit(ClStrategy::Auxiliary)?;
    ensure(bce >= 0.9 && aux >= 0.9, || {
        format!("macro F1 bce {bce:.3}, auxiliary {aux:.3}")
    })?;
    ensure(t_bce.max(t_aux) < Duration::from_secs(120), || {
        format!("took {t_bce:?} / {t_aux:?}")
    })?;
    Ok(format!(
        "macro F1 {bce:.3} (BCE, {:.0?}), {aux:.3} (auxiliary CL, {:.0?})",
        t_bce, t_aux
    ))
}

fn layer_rates() -> Check {
    let backend = resolve_backend(TINY_TEST).map_err(|e| e.to_string())?;
    let base = 2e-5;
    let groups = build_param_groups(backend.as_ref(), base, 0.97, 2).map_err(|e| e.to_string())?;
    let rate = |name: &str| groups.iter().find(|g| g.name == name).map(|g| g.lr);
    let expected = [
        ("heads", base),
        ("layer.1", base * 0.97),
        ("layer.0", base * 0.97f64.powi(2)),
    ];
    for (name, want) in expected {
        ensure(rate(name) == Some(want), || {
            format!("{name}: {:?} vs {want}", rate(name))
        })?;
    }
    ensure(rate("embeddings") == Some(0.0), || "embeddings are not frozen".into())?;

    let config = TrainConfig {
        epochs: 1.0,
        lr: 1e-2,
        trainable_top_layers: 1,
        ..TrainConfig::default()
    };
    let frozen = ["embeddings.", "layer.0.", "lm_head."];
    let hashes = |b: &dyn LanguageBackend| -> Vec<String> {
        frozen.iter().map(|p| b.params().hash_prefix(p).unwrap()).collect()
    };
    let before = hashes(backend.as_ref());
    train(
        &fixture(16),
        backend.as_ref(),
        &head(backend.as_ref()),
        &config,
        &LossConfig::default(),
        None,
    )
    .map_err(|e| e.to_string())?;
    ensure(hashes(backend.as_ref()) == before, || "a frozen layer changed".into())?;
    Ok(format!(
        "rates 2e-5 * 0.97^k for k = 0..2, {} frozen prefixes unchanged",
        frozen.len()
    ))
}

#[derive(serde::Deserialize)]
struct GoldenRecord {
    text: String,
}

fn template_fidelity() -> Check {
    let tax = ValueTaxonomy::builtin();
    let verbalizer = Verbalizer::builtin().map_err(|e| e.to_string())?;
    let templates = TemplateSet::builtin().map_err(|e| e.to_string())?;
    let ds = fixture(3);
    let mut compared = 0;
    for mode in TemplateMode::ALL {
        let template = templates.get(mode).map_err(|e| e.to_string())?;
        let path = core_tests().join(format!("golden/{}.jsonl", mode.as_str().to_lowercase()));
        let golden: Vec<GoldenRecord> = std::fs::read_to_string(&path)
            .map_err(|e| format!("{}: {e}", path.display()))?
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let mut rendered = Vec::new();
        for arg in ds.arguments() {
            if mode.per_category() {
                for category in tax.categories() {
                    rendered.push(
                        render(template, arg, Some(category), verbalizer.knowledge(&category.name))
                            .unwrap()
                            .text,
                    );
                }
            } else {
                rendered.push(render(template, arg, None, None).unwrap().text);
            }
        }
        let want = if mode.per_category() { 60 } else { 3 };
        ensure(golden.len() == want && rendered.len() == want, || {
            format!("{mode}: {} records", golden.len())
        })?;
        for (i, (g, r)) in golden.iter().zip(&rendered).enumerate() {
            ensure(g.text.as_bytes() == r.as_bytes(), || {
                format!("{mode} record {i} differs")
            })?;
        }
        compared += want;
    }

    let backend = resolve_backend(TINY_TEST_GENERATIVE).map_err(|e| e.to_string())?;
    let before = backend.params().hash().map_err(|e| e.to_string())?;
    let config = TrainConfig {
        epochs: 1.0,
        lr: 0.05,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let options = PromptOptions {
        categories: vec!["Achievement".into()],
        ..PromptOptions::default()
    };
    let template = templates.get(TemplateMode::Bca).unwrap();
    prompt_tune(
        &fixture(8),
        backend.as_ref(),
        template,
        &verbalizer,
        &tax,
        &config,
        &options,
    )
    .map_err(|e| e.to_string())?;
    let after = backend.params().hash().map_err(|e| e.to_string())?;
    ensure(before == after, || "prompt tuning changed the backbone".into())?;
    Ok(format!("{compared} renders byte-exact, backbone hash unchanged"))
}

fn llm_harness() -> Check {
    let dir = core_tests().join("fixtures/llm");
    let tax = ValueTaxonomy::builtin();
    let (ds, _) = load_dataset(dir.join("arguments.tsv"), dir.join("labels.tsv"), &tax).map_err(|e| e.to_string())?;
    ensure(ds.len() == 10, || format!("{} fixture arguments", ds.len()))?;
    let text = std::fs::read_to_string(dir.join("responses.json")).map_err(|e| e.to_string())?;
    let responses: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let client = || {
        responses
            .iter()
            .fold(MockClient::new("mock-chat"), |m, (needle, r)| m.respond(needle, r))
            .fail("Festivals connect", 2)
    };
    let cache = tempfile::tempdir().map_err(|e| e.to_string())?;
    let options = LlmOptions {
        fraction: 1.0,
        backoff_ms: 0,
        cache_dir: Some(cache.path().to_owned()),
        ..LlmOptions::default()
    };
    let cold = evaluate_llm(&ds, &client(), &tax, &options).map_err(|e| e.to_string())?;
    // Four categories carry support: F1s 2/3, 4/5, 4/5, 2/3, the rest 0.
    let want = 11.0 / 75.0;
    ensure(cold.result.macro_f1 == want, || {
        format!("macro F1 {} vs 11/75", cold.result.macro_f1)
    })?;
    let warm_client = client();
    let warm = evaluate_llm(&ds, &warm_client, &tax, &options).map_err(|e| e.to_string())?;
    ensure(warm_client.calls() == 0 && warm.client_calls == 0, || {
        format!("warm rerun issued {} calls", warm_client.calls())
    })?;
    ensure(warm.result == cold.result, || "warm rerun scored differently".into())?;
    Ok(format!(
        "macro F1 11/75 exact, {} cold calls, 0 warm calls",
        cold.client_calls
    ))
}

fn nli_builder() -> Check {
    let args = load_arguments(core_tests().join("fixtures/nli/arguments.tsv")).map_err(|e| e.to_string())?;
    let labels: Vec<NliLabel> = build_nli(&args).iter().map(|p| p.label).collect();
    use NliLabel::{Contradict, Entail};
    let want = vec![Entail, Contradict, Entail, Contradict, Contradict, Entail];
    ensure(labels == want, || format!("{labels:?}"))?;
    let cases: [(&[u8], &[u8], f64); 3] = [
        (&[1, 0, 1, 1], &[1, 0, 1, 1], 1.0),
        (&[1, 0, 1, 1], &[0, 1, 0, 0], 0.0),
        (&[1, 0, 1, 1], &[1, 0, 1, 0], 0.75),
    ];
    for (pred, gold, want) in cases {
        let got = accuracy(pred, gold).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("accuracy {got} vs {want}"))?;
    }
    Ok("6-argument stance mapping, accuracy 1, 0, 0.75".into())
}

fn write_corpus(dir: &Path) {
    let tax = ValueTaxonomy::builtin();
    let ds = fixture(16);
    write_arguments(dir.join("arguments.tsv"), ds.arguments()).unwrap();
    write_labels(dir.join("labels.tsv"), ds.labels(), &tax).unwrap();
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_corpus(dir.path());
    let path = dir.path().join("experiment.toml");
    let text = "seed = 21\noutput_dir = \"runs\"\n\n[corpus]\narguments = \"arguments.tsv\"\nlabels = \"labels.tsv\"\n\n[train]\nepochs = 2.0\nlr = 0.01\ntrainable_top_layers = 2\ncl_strategy = \"auxiliary\"\n";
    std::fs::write(&path, text).map_err(|e| e.to_string())?;
    let config = ExperimentConfig::load(&path).map_err(|e| e.to_string())?;
    let first = cmd_train(&config, false).map_err(|e| e.to_string())?;
    let on_disk = TrainHistory::read_jsonl(first.run.dir.join(HISTORY_FILE)).map_err(|e| e.to_string())?;
    let refused = cmd_train(&config, false);
    ensure(matches!(refused, Err(hvd_core::Error::Integrity(_))), || {
        "second run was not refused".into()
    })?;
    let second = cmd_train(&ExperimentConfig::load(&path).unwrap(), true).map_err(|e| e.to_string())?;
    ensure(first.run.hash == second.run.hash, || {
        format!("{} vs {}", first.run.hash, second.run.hash)
    })?;
    ensure(first.history == second.history, || "histories differ".into())?;
    let reread = TrainHistory::read_jsonl(second.run.dir.join(HISTORY_FILE)).map_err(|e| e.to_string())?;
    ensure(on_disk == reread, || "history files differ".into())?;
    Ok(format!(
        "run {} reproduced, {} history records identical",
        first.run.hash,
        first.history.records.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("contrastive loss closed form log B'", closed_form),
        ("gradient checks vs finite differences", gradient_checks),
        ("contrastive weight normalization", weight_normalization),
        ("macro F1 oracle equivalence", metric_oracle),
        ("overfit smoke (BCE and auxiliary CL)", overfit_smoke),
        ("layer-wise learning rates and frozen layers", layer_rates),
        ("template fidelity and frozen backbone", template_fidelity),
        ("LLM harness end to end", llm_harness),
        ("NLI builder and accuracy", nli_builder),
        ("train determinism and run hash", determinism),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(message)
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
