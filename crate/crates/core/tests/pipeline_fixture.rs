use std::fs;
use std::path::Path;

use hcforge::config::load_config;
use hcforge::fixture::{self, build_fixture};
use hcforge::manifest::{read_manifest, strip_timestamps, Payload, Stage};
use hcforge::pipeline::{exit_code, Outcome, Pipeline, Runtime};
use hcforge::stac::ResolutionStatus;

fn pipeline(dir: &Path) -> Pipeline {
    let summary = build_fixture(dir).unwrap();
    let cfg = load_config::<&str>(&summary.config, &[]).unwrap();
    Pipeline::new(cfg, Runtime::offline(dir).unwrap())
}

#[test]
fn full_offline_run_produces_expected_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path());
    let result = p.run(None);
    assert_eq!(exit_code(&result), 0, "{result:?}");
    let reports = result.unwrap();
    let by = |s: Stage| reports.iter().find(|r| r.stage == s).unwrap();

    assert_eq!(by(Stage::Ingest).count("sites"), 5);
    assert_eq!(by(Stage::Ingest).count("regions"), 1);
    assert_eq!(by(Stage::Resolve).count("not_attempted"), 1);
    assert_eq!(by(Stage::Resolve).count("planned"), 11);
    assert_eq!(by(Stage::Fetch).count("new_downloads"), 6);
    assert_eq!(by(Stage::Chip).count("chipped"), fixture::EXPECTED_CHIPS);
    assert_eq!(
        by(Stage::Vqa).count("examples"),
        fixture::EXPECTED_SINGLE_EXAMPLES
    );
    assert_eq!(by(Stage::Pairs).count("pairs"), fixture::EXPECTED_PAIRS);
    assert_eq!(
        by(Stage::Pairs).count("examples"),
        fixture::EXPECTED_PAIR_EXAMPLES
    );
    assert!(by(Stage::Stats)
        .stdout
        .as_deref()
        .unwrap()
        .contains("Sites"));

    // The Level-1C-only reference falls back past the Level-2A tier.
    let entries = read_manifest(&p.manifest_path(Stage::Fetch)).unwrap();
    let l1c = entries
        .iter()
        .filter_map(|e| match &e.payload {
            Payload::Resolution(r) if r.annotation_key.obs_date.to_string() == "2019-03-02" => {
                Some(r)
            }
            _ => None,
        })
        .next()
        .unwrap();
    assert_eq!(l1c.status, ResolutionStatus::Resolved);
    assert_eq!(
        l1c.chosen.as_ref().unwrap().item_id,
        "S2A_23LKC_20190302_0_L1C"
    );
    assert!(l1c
        .tried_tiers
        .iter()
        .any(|t| t.tier == 1 && t.result_count == 0));

    let jsonl = fs::read_to_string(p.dataset_path("vqa_single", Default::default())).unwrap();
    assert_eq!(
        jsonl.lines().count() as u64,
        fixture::EXPECTED_SINGLE_EXAMPLES
    );
    let chips = fs::read_dir(dir.path().join("work/chips/BR_R001_0001"))
        .unwrap()
        .count();
    assert_eq!(chips, 6);
}

#[test]
fn rerun_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path());
    p.run(None).unwrap();
    let first = fs::read_to_string(p.dataset_path("vqa_pairs", Default::default())).unwrap();
    let again = p.run(None).unwrap();
    assert!(again.iter().all(|r| r.outcome == Outcome::Complete));
    let fetch = again.iter().find(|r| r.stage == Stage::Fetch).unwrap();
    assert_eq!(fetch.count("new_downloads"), 0);
    assert_eq!(fetch.count("already_fetched"), 11);
    let chip = again.iter().find(|r| r.stage == Stage::Chip).unwrap();
    assert_eq!(chip.count("already_chipped"), 11);
    assert_eq!(
        first,
        fs::read_to_string(p.dataset_path("vqa_pairs", Default::default())).unwrap()
    );
}

#[test]
fn two_fresh_runs_match_byte_for_byte() {
    let outputs: Vec<Vec<String>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let p = pipeline(dir.path());
            p.run(None).unwrap();
            let mut out = Vec::new();
            for name in [
                "vqa_single.jsonl",
                "vqa_single.tsv",
                "vqa_pairs.jsonl",
                "vqa_pairs.tsv",
                "stats/breakdown.csv",
            ] {
                out.push(fs::read_to_string(dir.path().join("work/datasets").join(name)).unwrap());
            }
            for s in Stage::ORDER {
                out.push(strip_timestamps(
                    &fs::read_to_string(p.manifest_path(s)).unwrap(),
                ));
            }
            out
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn missing_dependency_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path());
    let r = p.run(Some(Stage::Chip));
    assert_eq!(exit_code(&r), 2);
}
