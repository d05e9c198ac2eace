use super::*;
use crate::body::default_asset;
use crate::keypoints::BBox;
use crate::synth::{default_scene, CorruptionConfig, TEMPLATES};

fn config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.workers = 2;
    cfg.optim.stage1_steps = 60;
    cfg.optim.stage2_steps = 40;
    cfg
}

fn synth_records(n: usize) -> Vec<PairRecord> {
    let scenes: Vec<_> = (0..n).map(|i| default_scene(TEMPLATES[i % TEMPLATES.len()], i as u64).unwrap()).collect();
    records_from_scenes(&scenes, &CorruptionConfig::default(), default_asset(), 7).unwrap()
}

fn fitted(errors: [f64; 2], name: &str) -> PairRecord {
    let mut r = synth_records(1).remove(0);
    r.image_name = name.into();
    r.denoised_contacts = Some(vec![]);
    r.params = r.init.clone();
    r.filter_error = Some(errors);
    r.stage = RecordStage::Fitted;
    r
}

#[test]
fn records_roundtrip_through_jsonl() {
    let mut records = synth_records(6);
    records.push(fitted([3.0, f64::INFINITY], "inf"));
    let mut filtered = fitted([1.0, 2.0], "kept");
    filtered.kept = Some(true);
    filtered.stage = RecordStage::Filtered;
    records.push(filtered);
    let mut failed = synth_records(1).remove(0);
    failed.error = Some(RecordError { stage: "fit".into(), message: "boom".into() });
    records.push(failed);
    records.push(PairRecord::new("plain", [3, 4], BBox { x: 1.0, y: 2.0, w: 3.0, h: 4.0 }, Default::default(), "detections"));
    assert_eq!(records.len(), 10);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    write_records(&records, &path).unwrap();
    assert_eq!(read_records(&path).unwrap(), records);
    assert_eq!(parse_records(&records_to_string(&records)).unwrap(), records);
}

#[test]
fn truncated_line_names_the_line() {
    let records = synth_records(2);
    let text = records_to_string(&records);
    let mut lines: Vec<&str> = text.lines().collect();
    let cut = &lines[1][..lines[1].len() / 2];
    lines[1] = cut;
    match parse_records(&lines.join("\n")) {
        Err(PipelineError::Line { line, .. }) => assert_eq!(line, 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn schema_mismatch_and_missing_fields_rejected() {
    let mut r = fitted([1.0, 1.0], "x");
    r.params = None;
    assert!(r.validate().unwrap_err().contains("params"));
    assert!(matches!(parse_records(&records_to_string(&[r])), Err(PipelineError::Line { line: 1, .. })));

    let mut r = fitted([1.0, 1.0], "x");
    r.kept = Some(true);
    assert!(r.validate().is_err());

    let text = records_to_string(&synth_records(1)).replace("\"schema_version\":1", "\"schema_version\":2");
    assert!(matches!(parse_records(&text), Err(PipelineError::Line { line: 1, .. })));
}

#[test]
fn filter_stage_uses_threshold() {
    let cfg = config();
    let ctx = StageContext::new(&cfg, default_asset());
    let records = vec![fitted([15.0, 18.0], "a"), fitted([15.0, 25.0], "b")];
    let (out, summary) = run_stage(Stage::Filter, records, &ctx).unwrap();
    assert_eq!(out.iter().map(|r| r.kept).collect::<Vec<_>>(), vec![Some(true), Some(false)]);
    assert_eq!(summary, StageSummary { processed: 2, failed: 0, filtered: 1, skipped: 0 });
    assert!(out.iter().all(|r| r.stage == RecordStage::Filtered && r.provenance.config_digest == cfg.digest()));
}

#[test]
fn denoise_passes_empty_contacts_through() {
    let cfg = config();
    let ctx = StageContext::new(&cfg, default_asset());
    let mut records = synth_records(3);
    for r in &mut records {
        r.lvlm_output.as_mut().unwrap().contacts.clear();
    }
    let (out, summary) = run_stage(Stage::Denoise, records, &ctx).unwrap();
    assert_eq!(summary.failed, 0);
    assert!(out.iter().all(|r| r.denoised_contacts == Some(vec![]) && r.stage == RecordStage::Denoised));
}

#[test]
fn fit_annotates_bad_records_and_ignores_order() {
    let cfg = config();
    let ctx = StageContext::new(&cfg, default_asset());
    let (mut records, _) = run_stage(Stage::Denoise, synth_records(5), &ctx).unwrap();
    for p in &mut records[2].keypoints[1].points {
        p.confidence = 0.0;
    }
    let (out, summary) = run_stage(Stage::Fit, records.clone(), &ctx).unwrap();
    assert_eq!(summary, StageSummary { processed: 5, failed: 1, filtered: 0, skipped: 0 });
    assert_eq!(out.iter().filter(|r| r.stage == RecordStage::Fitted).count(), 4);
    let bad = out.iter().find(|r| r.error.is_some()).unwrap();
    assert_eq!(bad.image_name, records[2].image_name);
    assert_eq!(bad.stage, RecordStage::Denoised);
    assert!(out.iter().all(|r| r.validate().is_ok()));

    records.reverse();
    let (again, _) = run_stage(Stage::Fit, records, &ctx).unwrap();
    assert_eq!(again, out);

    let (rerun, summary) = run_stage(Stage::Fit, out.clone(), &ctx).unwrap();
    assert_eq!(rerun, out);
    assert_eq!(summary, StageSummary { processed: 0, failed: 0, filtered: 0, skipped: 5 });
}

#[test]
fn early_records_are_annotated() {
    let cfg = config();
    let ctx = StageContext::new(&cfg, default_asset());
    let (out, summary) = run_stage(Stage::Filter, synth_records(1), &ctx).unwrap();
    assert_eq!(summary.failed, 1);
    assert!(out[0].error.as_ref().unwrap().message.contains("asked"));
}

#[test]
fn missing_resources_abort() {
    let cfg = config();
    let ctx = StageContext::new(&cfg, default_asset());
    assert!(matches!(run_stage(Stage::Ask, vec![], &ctx), Err(PipelineError::Config(_))));
    assert!(matches!(run_stage(Stage::FitWithPrior, vec![], &ctx), Err(PipelineError::Config(_))));
}

#[test]
fn digest_tracks_every_value() {
    let base = PipelineConfig::default();
    assert_eq!(base.digest(), PipelineConfig::default().digest());
    let mut a = base.clone();
    a.weights.lambda_c += 1e-9;
    let mut b = base.clone();
    b.provider.max_attempts = 6;
    let mut c = base.clone();
    c.seed = 1;
    for other in [a, b, c] {
        assert_ne!(other.digest(), base.digest());
    }
}

#[test]
fn config_json_rules() {
    let cfg = PipelineConfig::default();
    assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    assert_eq!(PipelineConfig::from_json("{}").unwrap(), cfg);
    let partial = PipelineConfig::from_json(r#"{"filter_threshold": 12.5, "proposal": {"k_min": 8}}"#).unwrap();
    assert_eq!(partial.filter_threshold, 12.5);
    assert_eq!(partial.proposal.k_min, 8);
    assert_eq!(partial.proposal.d_max, cfg.proposal.d_max);
    assert!(PipelineConfig::from_json(r#"{"filter_treshold": 12.5}"#).is_err());
    assert!(PipelineConfig::from_json(r#"{"weights": {"lambda_x": 1}}"#).is_err());
    assert!(PipelineConfig::from_json(r#"{"schema_version": 2}"#).is_err());
    assert!(PipelineConfig::from_json(r#"{"filter_threshold": -1}"#).is_err());
    assert!(PipelineConfig::from_json(r#"{"schedule": {"steps": 5}, "guidance": {"t_guid": 10}}"#).is_err());
}

#[test]
fn seeds_depend_on_identity() {
    assert_eq!(record_seed(1, "a.jpg", [0, 1]), record_seed(1, "a.jpg", [0, 1]));
    assert_ne!(record_seed(1, "a.jpg", [0, 1]), record_seed(1, "a.jpg", [1, 0]));
    assert_ne!(record_seed(1, "a.jpg", [0, 1]), record_seed(2, "a.jpg", [0, 1]));
    assert_ne!(record_seed(1, "a.jpg", [0, 1]), record_seed(1, "b.jpg", [0, 1]));
}

#[test]
fn zero_init_lands_under_the_keypoints() {
    let cfg = config();
    let ctx = StageContext::new(&cfg, default_asset());
    let (mut records, _) = run_stage(Stage::Denoise, synth_records(1), &ctx).unwrap();
    records[0].init = None;
    let (out, summary) = run_stage(Stage::Fit, records, &ctx).unwrap();
    assert_eq!(summary.failed, 0);
    assert!(out[0].filter_error.unwrap().iter().all(|e| e.is_finite()));
}
