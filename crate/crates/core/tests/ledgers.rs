use std::path::PathBuf;

use suction_core::eval::{format_percent, load_jsonl, EvalRecord, EvalReport, PickRecord, ScoringRule};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn selection(name: &str) -> Vec<EvalRecord> {
    load_jsonl(&fixture(name)).unwrap()
}

#[test]
fn selection_ledgers_are_self_consistent() {
    for name in ["selection_ledger_86_of_114.jsonl", "selection_ledger_73_of_114.jsonl"] {
        for r in selection(name) {
            let judged = r
                .decision
                .as_ref()
                .is_some_and(|d| ScoringRule::HeadOfList.judge(d, &r.acceptable_labels));
            assert_eq!(judged, r.correct, "{name}: {}", r.scene_id);
            assert_eq!(r.format_error, r.decision.is_none(), "{name}: {}", r.scene_id);
        }
    }
}

#[test]
fn eighty_six_of_114() {
    let rep = EvalReport::from_records(&selection("selection_ledger_86_of_114.jsonl")).unwrap();
    assert_eq!((rep.correct, rep.total), (86, 114));
    assert_eq!(format_percent(rep.accuracy), "75.4%");
    assert_eq!(rep.format_errors, 3);
    // 86 / 111
    assert_eq!(format_percent(rep.accuracy_excluding_format_errors), "77.5%");
    assert!(rep.to_table().lines().any(|l| l.starts_with("overall") && l.ends_with("86/114    75.4%")));
}

#[test]
fn seventy_three_of_114() {
    let rep = EvalReport::from_records(&selection("selection_ledger_73_of_114.jsonl")).unwrap();
    assert_eq!((rep.correct, rep.total), (73, 114));
    assert_eq!(format_percent(rep.accuracy), "64.0%");
    // 73 / 108
    assert_eq!(format_percent(rep.accuracy_excluding_format_errors), "67.6%");
}

#[test]
fn pick_ledger_by_category() {
    let recs: Vec<PickRecord> = load_jsonl(&fixture("pick_ledger_26_of_40.jsonl")).unwrap();
    let rep = EvalReport::from_pick_records(&recs).unwrap();
    assert_eq!((rep.correct, rep.total), (26, 40));
    assert_eq!(format_percent(rep.accuracy), "65.0%");
    let b = &rep.categories["box"];
    let g = &rep.categories["bag"];
    assert_eq!((b.correct, b.total, format_percent(b.accuracy)), (15, 20, "75.0%".to_string()));
    assert_eq!((g.correct, g.total, format_percent(g.accuracy)), (11, 20, "55.0%".to_string()));
}

#[test]
fn any_intersection_never_scores_below_head_of_list() {
    let recs = selection("selection_ledger_73_of_114.jsonl");
    let count = |rule: ScoringRule| {
        recs.iter()
            .filter(|r| r.decision.as_ref().is_some_and(|d| rule.judge(d, &r.acceptable_labels)))
            .count()
    };
    assert!(count(ScoringRule::AnyIntersection) >= count(ScoringRule::HeadOfList));
}
