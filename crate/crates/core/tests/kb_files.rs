//! Knowledge-base persistence: round trips, byte stability and rejection
//! of tampered files.

mod common;

use common::*;
use proteus::kb::{KnowledgeBase, ScoreRule};
use proteus::Error;
use serde_json::Value;

fn tampered(f: impl FnOnce(&mut Value)) -> Result<KnowledgeBase, Error> {
    let mut v: Value = serde_json::from_str(&small_trained().kb.to_json().unwrap()).unwrap();
    f(&mut v);
    KnowledgeBase::from_json(&serde_json::to_string(&v).unwrap())
}

#[test]
fn save_load_save_is_byte_stable() {
    let kb = &small_trained().kb;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("kb.json");
    kb.save(&p).unwrap();
    let first = std::fs::read(&p).unwrap();
    let loaded = KnowledgeBase::load(&p).unwrap();
    assert_eq!(&loaded, kb);
    loaded.save(&p).unwrap();
    assert_eq!(first, std::fs::read(&p).unwrap());
}

#[test]
fn loaded_kb_retrieves_identically() {
    let t = small_trained();
    let loaded = KnowledgeBase::from_json(&t.kb.to_json().unwrap()).unwrap();
    for task in &t.tasks {
        for s in task.test.iter().take(10) {
            assert_eq!(
                t.kb.retrieve(&s.x, ScoreRule::Mahalanobis).unwrap(),
                loaded.retrieve(&s.x, ScoreRule::Mahalanobis).unwrap()
            );
        }
    }
}

#[test]
fn wrong_version_is_rejected() {
    let err = tampered(|v| v["version"] = Value::from(2)).unwrap_err();
    assert!(matches!(err, Error::Version { .. }), "{err}");
    let err = tampered(|v| {
        v.as_object_mut().unwrap().remove("version");
    })
    .unwrap_err();
    assert!(matches!(err, Error::Version { .. }));
}

#[test]
fn unknown_field_is_rejected() {
    let err = tampered(|v| v["entries"][0]["extra"] = Value::from(1)).unwrap_err();
    assert!(matches!(err, Error::Malformed(_)), "{err}");
}

#[test]
fn non_spd_covariance_is_rejected_with_task_context() {
    let err = tampered(|v| {
        let cov = &mut v["entries"][2]["multikey"]["components"][0]["cov"];
        cov[0][0] = Value::from(-1.0);
    })
    .unwrap_err();
    assert!(err.to_string().contains("task 2"), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn truncated_matrix_is_a_shape_error() {
    let err = tampered(|v| {
        v["entries"][1]["value"]["layers"][0]["B"].as_array_mut().unwrap().pop();
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn garbage_is_malformed() {
    assert!(matches!(KnowledgeBase::from_json("{not json"), Err(Error::Malformed(_))));
}

#[test]
fn duplicate_task_is_refused() {
    let mut kb = small_trained().kb.clone();
    let e = kb.entries()[0].clone();
    let err = kb.commit_task(e.multikey, e.unit, e.transfer).unwrap_err();
    assert!(matches!(err, Error::DuplicateTask(0)));
}

#[test]
fn loglik_rule_agrees_with_top1_likelihood() {
    let t = small_trained();
    for task in &t.tasks {
        for s in task.test.iter().take(10) {
            let by_rule = t.kb.retrieve(&s.x, ScoreRule::Loglik).unwrap().task;
            assert_eq!(by_rule, t.kb.retrieve_topk(&s.x, 1).unwrap());
        }
    }
}
