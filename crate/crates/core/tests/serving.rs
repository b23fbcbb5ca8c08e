//! End-to-end behaviour of the serving loop on short streams.

use std::collections::BTreeMap;
use std::io::BufReader;

use cdcsde::evaluation::{compute_metrics, run_method};
use cdcsde::serving::{
    read_events_jsonl, write_events_jsonl, EventKind, Method, RunReport, ServingConfig,
    ServingSession,
};
use cdcsde::stream::{generate, schedule_labels, Generator, LagPolicy, Stream, StreamSpec, StreamStep};

const BATCHES: usize = 240;

fn sea(seed: u64) -> Stream {
    generate(&StreamSpec::new(Generator::Sea, seed).with_total_samples(64 * BATCHES)).unwrap()
}

fn session(stream: &Stream, cfg: &ServingConfig, seed: u64) -> ServingSession {
    ServingSession::warm_start(&stream.batches, stream.n_classes, false, Method::Cdcsde, cfg, seed)
        .unwrap()
}

fn served(stream: &Stream, cfg: &ServingConfig, lag: &LagPolicy) -> Vec<StreamStep> {
    schedule_labels(stream.batches[cfg.warm_start_batches..].iter().cloned(), lag).collect()
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let stream = sea(3);
    let cfg = ServingConfig::default();
    let lag = LagPolicy::exponential(4.0, 11);
    let steps = served(&stream, &cfg, &lag);

    let mut whole = session(&stream, &cfg, 3);
    let full = whole.run(steps.clone()).unwrap();

    let (head, tail) = steps.split_at(90);
    let mut first = session(&stream, &cfg, 3);
    let part1 = first.run(head.to_vec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.json");
    first.save_checkpoint(&path).unwrap();
    drop(first);
    let mut resumed = ServingSession::load_checkpoint(&path).unwrap();
    assert_eq!(resumed.next_step(), tail[0].batch.step);
    let part2 = resumed.run(tail.to_vec()).unwrap();

    let mut accuracy = part1.accuracy.clone();
    accuracy.extend(part2.accuracy.clone());
    assert_eq!(accuracy, full.accuracy);
    assert_eq!([part1.alarms, part2.alarms].concat(), full.alarms);
    assert_eq!([part1.retrains, part2.retrains].concat(), full.retrains);
    assert_eq!([part1.events, part2.events].concat(), full.events);
    assert_eq!(resumed.classifier(), whole.classifier());
    assert_eq!(resumed.states(), whole.states());
}

#[test]
fn checkpoint_rejects_other_versions() {
    let stream = sea(4);
    let s = session(&stream, &ServingConfig::default(), 4);
    let text = s.to_checkpoint_json().unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["version"] = serde_json::json!(9999);
    assert!(ServingSession::from_checkpoint_json(&value.to_string()).is_err());
    assert!(ServingSession::from_checkpoint_json(&text).is_ok());
}

#[test]
fn runs_are_deterministic() {
    let stream = sea(5);
    let cfg = ServingConfig::default();
    let lag = LagPolicy::exponential(4.0, 7);
    let a = run_method(&stream, &lag, Method::Cdcsde, &cfg, 5, false).unwrap();
    let b = run_method(&stream, &lag, Method::Cdcsde, &cfg, 5, false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn prequential_accuracy_uses_predictions_made_before_labels() {
    let stream = sea(6);
    let cfg = ServingConfig::default();
    let truth: BTreeMap<usize, Vec<usize>> =
        stream.batches.iter().map(|b| (b.step, b.labels().to_vec())).collect();
    let mut s = session(&stream, &cfg, 6);
    let mut predicted = BTreeMap::new();
    let mut resolved = BTreeMap::new();
    for step in served(&stream, &cfg, &LagPolicy::exponential(4.0, 8)) {
        let out = s.step(&step).unwrap();
        assert_eq!(out.step, step.batch.step);
        assert_eq!(out.predictions.len(), step.batch.features.nrows());
        predicted.insert(out.step, out.predictions);
        for r in out.resolved {
            assert!(r.for_step < out.step, "labels must arrive after the prediction");
            let correct = predicted[&r.for_step]
                .iter()
                .zip(&truth[&r.for_step])
                .filter(|(p, y)| p == y)
                .count();
            assert_eq!(r.correct, correct);
            assert_eq!(r.total, truth[&r.for_step].len());
            resolved.insert(r.for_step, correct as f64 / r.total as f64);
        }
    }
    assert!(resolved.len() > predicted.len() * 9 / 10);
}

#[test]
fn event_log_reproduces_the_report() {
    let stream = sea(7);
    let cfg = ServingConfig::default();
    let report = run_method(&stream, &LagPolicy::exponential(4.0, 9), Method::Cdcsde, &cfg, 7, false)
        .unwrap();
    assert!(!report.alarms.is_empty(), "the stream has drifts to detect");
    let drift_steps: Vec<usize> = report
        .events
        .iter()
        .filter(|e| e.event == EventKind::Drift)
        .map(|e| e.step)
        .collect();
    assert_eq!(drift_steps, report.alarms);
    let retrain_events = report.events.iter().filter(|e| e.event == EventKind::Retrain).count();
    assert_eq!(retrain_events, report.retrains.len());

    let mut buf = Vec::new();
    write_events_jsonl(&mut buf, &report.events).unwrap();
    let events = read_events_jsonl(BufReader::new(&buf[..])).unwrap();
    assert_eq!(events, report.events);

    let rebuilt = RunReport::from_events("cdcsde", &events).unwrap();
    assert_eq!(rebuilt.alarms, report.alarms);
    assert_eq!(rebuilt.accuracy, report.accuracy);
    assert_eq!((rebuilt.first_step, rebuilt.last_step), (report.first_step, report.last_step));
    assert_eq!(
        compute_metrics(&rebuilt, &stream.drift_truth).unwrap(),
        compute_metrics(&report, &stream.drift_truth).unwrap()
    );
}

#[test]
fn undelivered_labels_leave_q1_and_q6_absent() {
    let stream = sea(8);
    let cfg = ServingConfig::default();
    let report = run_method(&stream, &LagPolicy::fixed(100_000), Method::Cdcsde, &cfg, 8, false)
        .unwrap();
    assert!(report.accuracy.is_empty());
    assert_eq!(report.steps.len(), BATCHES - cfg.warm_start_batches);
    for st in &report.steps {
        assert!(st.scores.q[0].is_none() && st.scores.q[5].is_none());
        assert!(st.scores.q[1..5].iter().all(Option::is_some));
    }
    assert!(compute_metrics(&report, &stream.drift_truth).is_err());
}

#[test]
fn retraining_uses_warning_batches_and_resets_states() {
    let stream = sea(9);
    let cfg = ServingConfig::default();
    let cap = cfg.max_retrain_batches.unwrap();
    let mut s = session(&stream, &cfg, 9);
    let mut drifts = 0;
    for step in served(&stream, &cfg, &LagPolicy::exponential(4.0, 10)) {
        let out = s.step(&step).unwrap();
        for rec in &out.retrains {
            if rec.kind == "drift" {
                let d = out.decision.as_ref().unwrap();
                assert!(out.drift);
                let start = d.retrain_steps.len().saturating_sub(cap);
                assert_eq!(rec.batches, d.retrain_steps[start..]);
                assert_eq!(rec.fallback, d.fallback);
                assert!(rec.batches.iter().all(|&b| b <= out.step));
            } else {
                assert_eq!(rec.kind, "refit");
            }
        }
        if out.drift {
            drifts += 1;
            assert!(s.states().iter().all(|st| st.count() == 0));
            assert!(s.states().iter().all(|st| st.warning_batches().is_empty()));
        }
    }
    assert!(drifts > 0);
}
