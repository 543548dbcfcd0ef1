//! Retrieval over hand-built knowledge bases whose answers can be worked
//! out directly.

mod common;

use nalgebra::{DMatrix, DVector};
use proteus::backbone::Backbone;
use proteus::kb::{identity_backbone, topk_log_likelihood, KbMeta, KnowledgeBase, ScoreRule};
use proteus::lda::LdaStats;
use proteus::linalg;
use proteus::lora::{LoraUnit, TransferCoefficients};
use proteus::signature::{GaussianComponent, MultiKeySignature};

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(xs)
}

fn comp(w: f64, mean: &[f64], var: f64) -> GaussianComponent {
    let d = mean.len();
    GaussianComponent::new(w, v(mean), DMatrix::identity(d, d) * var).unwrap()
}

fn empty_kb(backbone: Backbone) -> KnowledgeBase {
    let d = backbone.embedding_dim();
    KnowledgeBase::new(backbone, LdaStats::new(d, 0), KbMeta { d, seed: 0, config: serde_json::Value::Null }).unwrap()
}

/// Commits signatures with zero LoRA units, so every entry embeds as the backbone does.
fn kb_with(backbone: Backbone, sigs: Vec<Vec<GaussianComponent>>) -> KnowledgeBase {
    let mut kb = empty_kb(backbone);
    let shapes = kb.backbone().layer_shapes();
    for (task, comps) in sigs.into_iter().enumerate() {
        let past = kb.units();
        let transfer = TransferCoefficients::zeros(&past, shapes.len());
        kb.commit_task(MultiKeySignature::new(task, comps).unwrap(), LoraUnit::zeros(task, &shapes, 1), transfer)
            .unwrap();
    }
    kb
}

#[test]
fn first_commit_gives_a_single_entry() {
    let kb = kb_with(identity_backbone(2).unwrap(), vec![vec![comp(0.5, &[0.0, 0.0], 1.0), comp(0.5, &[3.0, 0.0], 1.0)]]);
    assert_eq!(kb.len(), 1);
    let r = kb.retrieve(&v(&[2.5, 0.0]), ScoreRule::Mahalanobis).unwrap();
    assert_eq!((r.task, r.component), (0, 1));
}

#[test]
fn worked_two_task_example() {
    let kb = kb_with(
        identity_backbone(2).unwrap(),
        vec![vec![comp(1.0, &[0.0, 0.0], 1.0)], vec![comp(1.0, &[10.0, 0.0], 1.0)]],
    );
    let r = kb.retrieve(&v(&[1.0, 1.0]), ScoreRule::Mahalanobis).unwrap();
    assert_eq!(r.task, 0);
    assert_eq!(r.score, 2.0);
    let other = kb.entries()[1].multikey.nearest(&v(&[1.0, 1.0])).unwrap();
    assert_eq!(other.1, 82.0);
}

#[test]
fn ties_go_to_the_lowest_task_then_component() {
    let kb = kb_with(
        identity_backbone(1).unwrap(),
        vec![vec![comp(0.5, &[-1.0], 1.0), comp(0.5, &[1.0], 1.0)], vec![comp(1.0, &[1.0], 1.0)]],
    );
    let r = kb.retrieve(&v(&[0.0]), ScoreRule::Mahalanobis).unwrap();
    assert_eq!((r.task, r.component), (0, 0));
    let r = kb.retrieve(&v(&[1.0]), ScoreRule::Mahalanobis).unwrap();
    assert_eq!((r.task, r.component), (0, 1));
}

#[test]
fn brute_force_agrees_on_a_thousand_inputs() {
    let backbone = Backbone::init(&[3, 5, 3], 4).unwrap();
    let mut rng = linalg::rng(8);
    let sigs: Vec<Vec<GaussianComponent>> = (0..4)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let m = linalg::normal_matrix(&mut rng, 3, 3, 0.5);
                    let cov = &m * m.transpose() + DMatrix::identity(3, 3) * 0.05;
                    GaussianComponent::new(1.0 / 3.0, linalg::normal_vector(&mut rng, 3, 0.5), cov).unwrap()
                })
                .collect()
        })
        .collect();
    let kb = kb_with(backbone.clone(), sigs.clone());
    for _ in 0..1000 {
        let x = linalg::normal_vector(&mut rng, 3, 1.0);
        let h = backbone.embed(&x, None).unwrap();
        let mut best = (f64::INFINITY, 0, 0);
        for (k, comps) in sigs.iter().enumerate() {
            for (t, c) in comps.iter().enumerate() {
                let d = &h - c.mean();
                let s = (d.transpose() * c.cov().clone().try_inverse().unwrap() * &d)[0];
                if s < best.0 {
                    best = (s, k, t);
                }
            }
        }
        let r = kb.retrieve(&x, ScoreRule::Mahalanobis).unwrap();
        assert_eq!((r.task, r.component), (best.1, best.2));
    }
}

#[test]
fn topk_aggregates_hand_computed_likelihoods() {
    // task 0: two wide components near the probe; task 1: one tight component on it
    let kb = kb_with(
        identity_backbone(1).unwrap(),
        vec![
            vec![comp(0.5, &[-0.5], 4.0), comp(0.5, &[0.5], 4.0)],
            vec![comp(0.5, &[0.0], 0.25), comp(0.5, &[50.0], 0.25)],
        ],
    );
    let x = v(&[0.0]);
    let density = |w: f64, m: f64, var: f64| w * (-(0.0 - m) * (0.0 - m) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
    let t0_top1 = density(0.5, 0.5, 4.0);
    let t0_top2 = 2.0 * t0_top1;
    let t1_top1 = density(0.5, 0.0, 0.25);
    let t1_top2 = t1_top1 + density(0.5, 50.0, 0.25);
    for (k, (a, b)) in [(1, (t0_top1, t1_top1)), (2, (t0_top2, t1_top2))] {
        let s0 = topk_log_likelihood(&x, &kb.entries()[0].multikey, k).unwrap();
        let s1 = topk_log_likelihood(&x, &kb.entries()[1].multikey, k).unwrap();
        assert!((s0 - a.ln()).abs() < 1e-12 && (s1 - b.ln()).abs() < 1e-12);
        assert_eq!(kb.retrieve_topk(&x, k).unwrap(), if a > b { 0 } else { 1 });
    }
    // K above the component count clamps to all components
    let all = topk_log_likelihood(&x, &kb.entries()[0].multikey, 99).unwrap();
    assert!((all - t0_top2.ln()).abs() < 1e-12);
}

#[test]
fn committing_later_tasks_leaves_earlier_entries_untouched() {
    let t = common::small_trained();
    let mut kb = empty_kb(t.kb.backbone().clone());
    let e0 = t.kb.entries()[0].clone();
    kb.commit_task(e0.multikey.clone(), e0.unit.clone(), e0.transfer.clone()).unwrap();
    let before = (kb.entries()[0].clone(), kb.adapted(0).clone());
    for e in &t.kb.entries()[1..] {
        kb.commit_task(e.multikey.clone(), e.unit.clone(), e.transfer.clone()).unwrap();
    }
    assert_eq!(kb.entries()[0], before.0);
    assert_eq!(kb.adapted(0), &before.1);
}

#[test]
fn empty_kb_refuses_to_retrieve() {
    let kb = empty_kb(identity_backbone(2).unwrap());
    assert!(matches!(kb.retrieve(&v(&[0.0, 0.0]), ScoreRule::Mahalanobis), Err(proteus::Error::EmptyKnowledgeBase)));
}
