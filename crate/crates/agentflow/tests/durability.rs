mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use agentflow::backend::ScriptedBackend;
use agentflow::clock::FixedClock;
use agentflow::events::NullObserver;
use agentflow::executor::CancelToken;
use agentflow::harness::{Engine, HarnessError, NewRun};
use agentflow::input::Answers;
use agentflow::interpreter::{self, RunError, RunOptions, RunStatus, Services};
use agentflow::loader::Loader;
use agentflow::store::{load_trace_file, Checkpoint, KillAfter, MemoryStore, Store, StoreError};
use agentflow::tools::BuiltinTools;
use agentflow_core::value::Map;
use common::*;
use proptest::prelude::*;

/// Uninterrupted run of a case.
fn oracle(c: &Case) -> (interpreter::RunOutcome, MemoryStore) {
    let mut store = MemoryStore::new();
    let out = Rig::for_case(c).run_case(c, workspace().path(), &mut store, None);
    assert_eq!(out.status, RunStatus::Completed, "{}: {:?}", c.workflow, out.error);
    (out, store)
}

/// Kill after `k` step checkpoints, then resume from the last durable one.
/// Returns None when the run finishes before the kill point.
fn kill_and_resume(c: &Case, k: u64, ws: &Path) -> Option<(interpreter::RunOutcome, MemoryStore)> {
    let mut killer = KillAfter::new(MemoryStore::new(), k);
    let first = Rig::for_case(c).run_case(c, ws, &mut killer, None);
    if first.status == RunStatus::Completed {
        return None;
    }
    assert_eq!(first.status, RunStatus::Interrupted, "{} k={k}: {:?}", c.workflow, first.error);
    assert!(matches!(first.error, Some(RunError::Interrupted(_))));
    let cp = killer.inner.checkpoints.last().cloned().expect("a checkpoint survives");
    let mut store = MemoryStore::resume_from(killer.inner.records, &cp);
    // A fresh backend: the resumed process has no memory of earlier calls.
    let out = Rig::for_case(c).run_case(c, ws, &mut store, Some(cp));
    Some((out, store))
}

#[test]
fn kill_at_every_checkpoint_then_resume_matches_oracle() {
    let started = Instant::now();
    let mut points = 0;
    for c in CASES {
        let (want, want_store) = oracle(c);
        let want_bytes = want_store.trace_bytes();
        let mut here = 0;
        for k in 0.. {
            let ws = workspace();
            let Some((got, store)) = kill_and_resume(c, k, ws.path()) else {
                assert!(k > 0, "{} never checkpointed", c.workflow);
                break;
            };
            points += 1;
            here += 1;
            assert_eq!(got.status, RunStatus::Completed, "{} k={k}: {:?}", c.workflow, got.error);
            assert!(store.trace_bytes() == want_bytes, "{} k={k}: trace differs", c.workflow);
            assert_eq!(got.final_context, want.final_context, "{} k={k}", c.workflow);
            assert_eq!(got.return_value, want.return_value, "{} k={k}", c.workflow);
            assert_eq!(got.metrics.total, want.metrics.total, "{} k={k}", c.workflow);
        }
        // Every checkpoint except the finishing one was a kill point.
        assert_eq!(here, want_store.checkpoints.len() - 1, "{}", c.workflow);
    }
    assert!(points > 90, "only {points} kill points");
    assert!(started.elapsed() < Duration::from_secs(60), "sweep took {:?}", started.elapsed());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    /// Several crashes in a row still converge on the oracle.
    #[test]
    fn repeated_kills_converge(case in 0..CASES.len(), gaps in prop::collection::vec(0u64..4, 1..6)) {
        let c = &CASES[case];
        let (want, want_store) = oracle(c);
        let ws = workspace();
        let mut store = MemoryStore::new();
        let mut resume: Option<Checkpoint> = None;
        for gap in gaps {
            let mut killer = KillAfter::new(store, gap);
            let out = Rig::for_case(c).run_case(c, ws.path(), &mut killer, resume.clone());
            store = killer.inner;
            if out.status == RunStatus::Completed {
                resume = None;
                break;
            }
            let cp = store.checkpoints.last().cloned().unwrap();
            store = MemoryStore::resume_from(store.records, &cp);
            resume = Some(cp);
        }
        if resume.is_some() {
            let out = Rig::for_case(c).run_case(c, ws.path(), &mut store, resume);
            prop_assert_eq!(out.status, RunStatus::Completed);
            prop_assert_eq!(out.return_value, want.return_value);
        }
        prop_assert!(store.trace_bytes() == want_store.trace_bytes());
    }
}

#[test]
fn checkpoints_cover_growing_trace_prefixes() {
    for c in CASES {
        let (_, store) = oracle(c);
        let cps = &store.checkpoints;
        assert!(cps.first().unwrap().completed.is_empty());
        assert!(cps.last().unwrap().finished.is_some());
        for w in cps.windows(2) {
            assert_eq!(w[1].seq, w[0].seq + 1);
            assert!(w[1].trace.records >= w[0].trace.records);
            assert!(w[1].trace.bytes >= w[0].trace.bytes);
            assert!(w[1].completed.len() >= w[0].completed.len());
        }
        assert_eq!(cps.last().unwrap().trace.records as usize, store.records.len());
    }
}

struct Disk {
    _dir: tempfile::TempDir,
    store: Store,
    loader: Loader,
    backend: ScriptedBackend,
    tools: BuiltinTools,
    answers: Answers,
}

impl Disk {
    fn new(script_rel: &str) -> Disk {
        let dir = tempfile::tempdir().unwrap();
        Disk {
            store: Store::new(dir.path().join("runs")),
            _dir: dir,
            loader: Loader::new(),
            backend: ScriptedBackend::new(script(script_rel)),
            tools: BuiltinTools::default(),
            answers: Answers::default(),
        }
    }

    fn engine(&self) -> Engine<'_> {
        Engine {
            store: &self.store,
            loader: &self.loader,
            backend: &self.backend,
            tools: &self.tools,
            input: &self.answers,
            clock: &FixedClock,
            cancel: CancelToken::default(),
            token_price: None,
            backoff: Duration::ZERO,
        }
    }

    /// Create a run and drive it with a crash after `k` checkpoints.
    fn start_killed(&self, req: &NewRun, k: u64) -> String {
        let e = self.engine();
        let meta = e.create(req).unwrap();
        let dir = self.store.open(&meta.run_id).unwrap();
        let spec = self.loader.load_path(&req.workflow).unwrap().spec.clone();
        let svc = Services {
            backend: &self.backend,
            tools: &self.tools,
            observer: &NullObserver,
            input: &self.answers,
            loader: &self.loader,
            clock: &FixedClock,
            cancel: CancelToken::default(),
        };
        let opts = RunOptions {
            run_id: meta.run_id.clone(),
            inputs: req.inputs.clone(),
            workspace: dir.workspace_path(),
            workflow_hash: meta.workflow_hash.clone(),
            resume: None,
            replay: Vec::new(),
            token_price: None,
            backoff: Duration::ZERO,
        };
        let mut killer = KillAfter::new(dir, k);
        let out = interpreter::run(spec, opts, &svc, &mut killer);
        assert_eq!(out.status, RunStatus::Interrupted);
        meta.run_id
    }
}

fn citation_run(id: &str) -> NewRun {
    NewRun {
        workflow: fixture("extract_single_citation.yaml"),
        inputs: read_map("citation.inputs.yaml"),
        run_id: Some(id.into()),
        workspace: Some(fixture("workspace")),
        ..Default::default()
    }
}

#[test]
fn on_disk_resume_matches_uninterrupted_run() {
    let d = Disk::new("citation.script.yaml");
    d.engine().start(&citation_run("whole")).unwrap();
    let want = std::fs::read(d.store.run_dir("whole").join("trace.ndjson")).unwrap();
    for k in [0, 2, 5] {
        let fresh = Disk::new("citation.script.yaml");
        let id = fresh.start_killed(&citation_run("cut"), k);
        // Simulate a torn write after the last checkpoint.
        let trace = fresh.store.run_dir(&id).join("trace.ndjson");
        let mut bytes = std::fs::read(&trace).unwrap();
        bytes.extend_from_slice(b"{\"step_id\":\"9\",\"kin");
        std::fs::write(&trace, bytes).unwrap();
        let resumed = Disk::new("citation.script.yaml");
        let e = Engine { store: &fresh.store, ..resumed.engine() };
        let out = e.resume(&id, false).unwrap();
        assert_eq!(out.status, RunStatus::Completed, "k={k}: {:?}", out.error);
        assert!(std::fs::read(&trace).unwrap() == want, "k={k}");
        let meta = fresh.store.open(&id).unwrap().read_meta().unwrap();
        assert_eq!(meta.status, "completed");
        assert_eq!(meta.totals.total, 58_993);
    }
}

#[test]
fn torn_trace_is_reported_with_its_offset() {
    let d = tempfile::tempdir().unwrap();
    let (_, store) = oracle(&CASES[5]);
    let mut bytes = store.trace_bytes();
    let first_len = bytes.iter().position(|b| *b == b'\n').unwrap() as u64 + 1;
    bytes.truncate(first_len as usize + 10);
    let p = d.path().join("trace.ndjson");
    std::fs::write(&p, &bytes).unwrap();
    match load_trace_file(&p) {
        Err(StoreError::CorruptTrace { offset, .. }) => assert_eq!(offset, first_len),
        other => panic!("{other:?}"),
    }
}

#[test]
fn edited_workflow_blocks_resume_unless_forced() {
    let d = Disk::new("three_step.script.yaml");
    let tmp = tempfile::tempdir().unwrap();
    let wf = tmp.path().join("three_step.yaml");
    std::fs::copy(fixture("three_step.yaml"), &wf).unwrap();
    let req = NewRun { workflow: wf.clone(), run_id: Some("r".into()), ..Default::default() };
    let id = d.start_killed(&req, 1);
    std::fs::copy(fixture("three_step_edited.yaml"), &wf).unwrap();
    let e = d.engine();
    match e.resume(&id, false) {
        Err(HarnessError::Store(StoreError::HashMismatch { .. })) => {}
        other => panic!("{:?}", other.map(|o| o.status)),
    }
    let out = e.resume(&id, true).unwrap();
    assert_eq!(out.status, RunStatus::Completed);
    assert!(matches!(e.resume(&id, false), Err(HarnessError::Finished(_))));
}

#[test]
fn failed_run_resumes_from_last_good_checkpoint() {
    let d = Disk::new("ask_user.script.yaml");
    let req = NewRun { workflow: fixture("ask_user.yaml"), run_id: Some("ask".into()), ..Default::default() };
    let out = d.engine().start(&req).unwrap();
    assert_eq!(out.status, RunStatus::Failed);
    assert_eq!(d.store.open("ask").unwrap().read_meta().unwrap().status, "failed");

    let mut answers = Map::new();
    answers.insert("topic".into(), "tides".into());
    let e = Engine { input: &Answers::new(answers), ..d.engine() };
    let out = e.resume("ask", false).unwrap();
    assert_eq!(out.status, RunStatus::Completed, "{:?}", out.error);
    let trace = d.store.open("ask").unwrap().load_trace().unwrap();
    assert_eq!(trace.iter().filter(|r| r.step_id.to_string() == "1").count(), 1);
}
