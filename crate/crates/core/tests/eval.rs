use std::io::Write;
use std::path::Path;

use mres_core::dataset::{load_benchmark, EvalSetting, Granularity, SplitName};
use mres_core::eval::{
    evaluate, EvalError, EvalReport, OraclePredictor, PredictionsPredictor, SettingSelection, REPORT_SCHEMA,
};
use mres_core::mask::{rle_encode, BinaryMask, MaskError};
use mres_core::synthetic::fixture_set;

fn fixture(dir: &Path) -> mres_core::dataset::BenchmarkSplit {
    fixture_set(SplitName::Val).write(dir).unwrap();
    load_benchmark(dir, SplitName::Val).unwrap()
}

fn assert_valid(report: &EvalReport) {
    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let instance = serde_json::to_value(report).unwrap();
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn oracle_scores_one_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let split = fixture(dir.path());
    let r = evaluate("fixture", dir.path(), &split, &OraclePredictor, SettingSelection::All, 0.35).unwrap();
    for s in EvalSetting::ALL {
        assert_eq!(r.settings.get(s).unwrap().miou, 1.0, "{}", s.as_str());
    }
    assert_eq!(r.settings.object_only.as_ref().unwrap().oiou, Some(1.0));
    assert_eq!(r.checkpoint, "oracle");
    assert_valid(&r);
}

#[test]
fn setting_counts_partition() {
    let dir = tempfile::tempdir().unwrap();
    let split = fixture(dir.path());
    let r = evaluate("fixture", dir.path(), &split, &OraclePredictor, SettingSelection::All, 0.35).unwrap();
    let n = |s| r.settings.get(s).unwrap().samples;
    assert_eq!(n(EvalSetting::ObjectOnly) + n(EvalSetting::PartOnly), n(EvalSetting::ObjectAndPart));
    assert_eq!(n(EvalSetting::ObjectAndPart), r.sample_counts.total);
    assert_eq!(r.sample_counts.object + r.sample_counts.part, r.sample_counts.total);
}

fn write_predictions(path: &Path, split: &mres_core::dataset::BenchmarkSplit, blank_parts: bool) {
    let mut f = std::fs::File::create(path).unwrap();
    for s in &split.samples {
        let gt = s.decode_mask().unwrap();
        let mask = if blank_parts && s.granularity == Granularity::Part {
            BinaryMask::zeros(gt.width(), gt.height()).unwrap()
        } else {
            gt
        };
        let line = serde_json::json!({"sample_id": s.sample_id, "mask": rle_encode(&mask)});
        writeln!(f, "{line}").unwrap();
    }
}

#[test]
fn predictions_file_and_table_agree() {
    let dir = tempfile::tempdir().unwrap();
    let split = fixture(dir.path());
    let path = dir.path().join("pred.jsonl");
    write_predictions(&path, &split, true);
    let p = PredictionsPredictor::load(&path).unwrap();
    let r = evaluate("fixture", dir.path(), &split, &p, SettingSelection::All, 0.35).unwrap();
    assert_eq!(r.settings.object_only.as_ref().unwrap().miou, 1.0);
    assert_eq!(r.settings.part_only.as_ref().unwrap().miou, 0.0);
    let both = r.settings.object_and_part.as_ref().unwrap();
    let expected = r.sample_counts.object as f64 / r.sample_counts.total as f64;
    assert!((both.miou - expected).abs() < 1e-12);

    let table = r.to_table();
    let row = table.lines().find(|l| l.starts_with("object_and_part")).unwrap();
    assert!(row.contains(&format!("{:.4}", both.miou)), "{row}");
    assert_valid(&r);
}

#[test]
fn missing_prediction_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let split = fixture(dir.path());
    let path = dir.path().join("pred.jsonl");
    std::fs::write(&path, "").unwrap();
    let p = PredictionsPredictor::load(&path).unwrap();
    let err = evaluate("fixture", dir.path(), &split, &p, SettingSelection::All, 0.35).unwrap_err();
    assert!(matches!(err, EvalError::MissingPrediction(_)));
}

#[test]
fn named_empty_setting_fails_but_all_reports_null() {
    let dir = tempfile::tempdir().unwrap();
    let mut split = fixture(dir.path());
    split.samples.retain(|s| s.granularity == Granularity::Object);
    let err = evaluate(
        "fixture",
        dir.path(),
        &split,
        &OraclePredictor,
        SettingSelection::One(EvalSetting::PartOnly),
        0.35,
    )
    .unwrap_err();
    assert!(matches!(err, EvalError::Mask(MaskError::EmptyEvaluation)));

    let r = evaluate("fixture", dir.path(), &split, &OraclePredictor, SettingSelection::All, 0.35).unwrap();
    assert!(r.settings.part_only.is_none());
    let json = serde_json::to_value(&r).unwrap();
    assert!(json["settings"]["part_only"].is_null());
    assert!(r.to_table().lines().any(|l| l.starts_with("part_only") && l.contains('-')));
    assert_valid(&r);
}

#[test]
fn single_setting_fills_only_its_slot() {
    let dir = tempfile::tempdir().unwrap();
    let split = fixture(dir.path());
    let r = evaluate(
        "fixture",
        dir.path(),
        &split,
        &OraclePredictor,
        SettingSelection::One(EvalSetting::PartOnly),
        0.35,
    )
    .unwrap();
    assert!(r.settings.object_only.is_none() && r.settings.object_and_part.is_none());
    assert_eq!(r.settings.part_only.as_ref().unwrap().samples, r.sample_counts.part);
}

#[test]
fn selection_parses() {
    assert_eq!("all".parse::<SettingSelection>().unwrap(), SettingSelection::All);
    assert_eq!(
        "part_only".parse::<SettingSelection>().unwrap(),
        SettingSelection::One(EvalSetting::PartOnly)
    );
    assert!("objects".parse::<SettingSelection>().is_err());
}
