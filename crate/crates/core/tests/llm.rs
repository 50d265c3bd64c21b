use std::collections::BTreeMap;
use std::path::PathBuf;

use hvd_core::assets;
use hvd_core::corpus::{load_dataset, ValueTaxonomy};
use hvd_core::llm::{evaluate_llm, write_exchange_log, CotStatus, LlmOptions, MockClient};
use hvd_core::Dataset;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/llm")
}

fn hand_scored() -> Dataset {
    let dir = fixture_dir();
    load_dataset(
        dir.join("arguments.tsv"),
        dir.join("labels.tsv"),
        &ValueTaxonomy::builtin(),
    )
    .unwrap()
    .0
}

/// Canned responses keyed by a premise fragment; the holiday argument fails twice first.
fn mock() -> MockClient {
    let text = std::fs::read_to_string(fixture_dir().join("responses.json")).unwrap();
    let responses: BTreeMap<String, String> = serde_json::from_str(&text).unwrap();
    responses
        .into_iter()
        .fold(MockClient::new("mock-chat"), |m, (needle, response)| {
            m.respond(needle, response)
        })
        .fail("Festivals connect", 2)
}

fn options(cache: &std::path::Path) -> LlmOptions {
    LlmOptions {
        fraction: 1.0,
        backoff_ms: 0,
        cache_dir: Some(cache.to_owned()),
        ..LlmOptions::default()
    }
}

#[test]
fn hand_scored_fixture_reproduces_macro_f1() {
    let tax = ValueTaxonomy::builtin();
    let ds = hand_scored();
    let cache = tempfile::tempdir().unwrap();
    let client = mock();
    let eval = evaluate_llm(&ds, &client, &tax, &options(cache.path())).unwrap();

    // Achievement tp2 fp1 fn1, Tradition tp2 fn1, Security: personal tp2 fn1,
    // Benevolence: caring tp2 fp1 fn1, every other category empty:
    // (2/3 + 4/5 + 4/5 + 2/3) / 20 = 11/75.
    let counts = |name: &str| {
        let s = &eval.result.per_label[tax.index_of(name).unwrap()];
        (s.counts.tp, s.counts.fp, s.counts.fn_)
    };
    assert_eq!(counts("Achievement"), (2, 1, 1));
    assert_eq!(counts("Tradition"), (2, 0, 1));
    assert_eq!(counts("Security: personal"), (2, 0, 1));
    assert_eq!(counts("Benevolence: caring"), (2, 1, 1));
    assert!(
        (eval.result.macro_f1 - 11.0 / 75.0).abs() < 1e-15,
        "{}",
        eval.result.macro_f1
    );

    let ids: Vec<&str> = eval.exchanges.iter().map(|e| e.argument_id.as_str()).collect();
    assert_eq!(ids, ds.ids().collect::<Vec<_>>());
    let status = |id: &str| eval.exchanges.iter().find(|e| e.argument_id == id).unwrap();
    assert_eq!(status("L05").status, CotStatus::ParseFallback);
    assert_eq!(status("L09").status, CotStatus::Failed);
    assert_eq!(status("L06").attempts, 3);
    assert_eq!(eval.failed, 1);
    assert!(eval.exchanges.iter().all(|e| e.parsed.len() == 20));
    assert_eq!(client.calls(), 12);
    assert_eq!(eval.client_calls, 12);

    let warm_client = mock();
    let warm = evaluate_llm(&ds, &warm_client, &tax, &options(cache.path())).unwrap();
    assert_eq!(warm_client.calls(), 0);
    assert_eq!(warm.result, eval.result);
    assert!(warm.exchanges.iter().all(|e| e.cached));
}

#[test]
fn exhausted_retries_score_all_no() {
    let tax = ValueTaxonomy::builtin();
    let ds = hand_scored().select(&[0, 1]);
    let client = MockClient::new("flaky")
        .default_response("Achievement: YES")
        .fail("Cheap burgers", 100);
    let opts = LlmOptions {
        fraction: 1.0,
        backoff_ms: 0,
        max_retries: 3,
        ..LlmOptions::default()
    };
    let eval = evaluate_llm(&ds, &client, &tax, &opts).unwrap();
    let failed = &eval.exchanges[0];
    assert_eq!(failed.status, CotStatus::Failed);
    assert_eq!(failed.attempts, 4);
    assert!(failed.error.as_deref().unwrap().contains("injected"));
    assert!(failed.parsed.iter().all(|&v| v == 0));
    assert_eq!(eval.exchanges[1].status, CotStatus::ParseFallback);
    assert_eq!(eval.failed, 1);
    assert_eq!(client.calls(), 5);
}

#[test]
fn five_percent_of_two_hundred_is_ten_exchanges() {
    let tax = ValueTaxonomy::builtin();
    let (ds, _) = load_dataset(assets::fixture_arguments(), assets::fixture_labels(), &tax).unwrap();
    let client = MockClient::new("mock-chat");
    let opts = LlmOptions {
        fraction: 0.05,
        seed: 3,
        backoff_ms: 0,
        ..LlmOptions::default()
    };
    let a = evaluate_llm(&ds, &client, &tax, &opts).unwrap();
    assert_eq!(a.exchanges.len(), 10);
    assert_eq!(a.result.num_examples, 10);
    let b = evaluate_llm(&ds, &client, &tax, &opts).unwrap();
    assert_eq!(a.exchanges, b.exchanges);
    assert!(evaluate_llm(&ds, &client, &tax, &LlmOptions { fraction: 0.0, ..opts }).is_err());
}

#[test]
fn exchange_log_has_one_line_per_exchange() {
    let tax = ValueTaxonomy::builtin();
    let ds = hand_scored();
    let client = mock();
    let eval = evaluate_llm(
        &ds,
        &client,
        &tax,
        &LlmOptions {
            cache_dir: None,
            ..options(std::path::Path::new(""))
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exchanges.jsonl");
    write_exchange_log(&eval.exchanges, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 10);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["argument_id"], "L01");
    assert_eq!(first["status"], "ok");
}
