use codesign_core::preference::Strategy;
use codesign_gateway::{EventLog, EventPayload, GatewayError, ProjectState};

fn payload(i: usize) -> EventPayload {
    EventPayload::ItemSaved { item_id: format!("itm-{i:06}") }
}

#[test]
fn seq_after_k_appends_is_k() {
    let dir = tempfile::tempdir().unwrap();
    let mut log = EventLog::open(dir.path().join("events.jsonl")).unwrap();
    for k in 1..=25u64 {
        assert_eq!(log.append(payload(k as usize), None).unwrap().seq, k);
    }
    let reopened = EventLog::open(dir.path().join("events.jsonl")).unwrap();
    assert_eq!(reopened.len(), 25);
    assert!(reopened.events().windows(2).all(|w| w[1].seq == w[0].seq + 1));
}

#[test]
fn same_dedup_key_returns_same_seq_across_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let first = {
        let mut log = EventLog::open(&path).unwrap();
        log.append(payload(0), None).unwrap();
        let seq = log.append(payload(1), Some("vote-42".into())).unwrap().seq;
        assert_eq!(log.append(payload(2), Some("vote-42".into())).unwrap().seq, seq);
        seq
    };
    let mut log = EventLog::open(&path).unwrap();
    assert_eq!(log.append(payload(3), Some("vote-42".into())).unwrap().seq, first);
    assert_eq!(log.len(), 2);
}

/// Simulates a crash at every byte of the (k+1)-th record: the log must come
/// back with k or k+1 whole events and stay appendable.
#[test]
fn crash_between_append_and_ack_never_leaves_torn_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let k = 4;
    {
        let mut log = EventLog::open(&path).unwrap();
        for i in 0..k {
            log.append(payload(i), None).unwrap();
        }
    }
    let durable = std::fs::read(&path).unwrap();
    let next = EventLog::in_memory().next_event(payload(99), None);
    let mut line = next.to_line().into_bytes();
    // Fix up the seq so the record would be valid at position k + 1.
    line = String::from_utf8(line).unwrap().replacen("\"seq\":1", &format!("\"seq\":{}", k + 1), 1).into_bytes();

    for cut in 0..=line.len() {
        let mut bytes = durable.clone();
        bytes.extend_from_slice(&line[..cut]);
        std::fs::write(&path, &bytes).unwrap();
        let mut log = EventLog::open(&path).unwrap();
        let n = log.len() as usize;
        if cut == line.len() {
            assert_eq!(n, k + 1);
        } else {
            assert_eq!(n, k, "cut at {cut} of {}", line.len());
        }
        log.append(payload(100), None).unwrap();
        drop(log);
        let after = std::fs::read(&path).unwrap();
        let (events, torn) = EventLog::parse(&after).unwrap();
        assert_eq!(torn, None);
        assert_eq!(events.len(), n + 1);
    }
}

#[test]
fn corrupt_log_reports_offending_seq() {
    let mut log = EventLog::in_memory();
    let mut text = String::new();
    for i in 0..6 {
        text.push_str(&log.append(payload(i), None).unwrap().to_line());
    }
    let lines: Vec<&str> = text.lines().collect();
    let mut broken = String::new();
    for (i, l) in lines.iter().enumerate() {
        broken.push_str(if i == 3 { "{\"seq\":4,\"garbage\n" } else { l });
        if i != 3 {
            broken.push('\n');
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    std::fs::write(&path, broken).unwrap();
    match EventLog::open(&path) {
        Err(GatewayError::CorruptLog { seq, .. }) => assert_eq!(seq, 4),
        other => panic!("expected CorruptLog, got {other:?}"),
    }
}

#[test]
fn semantically_invalid_event_is_corrupt_at_its_seq() {
    let mut log = EventLog::in_memory();
    log.append(
        EventPayload::ProjectCreated { project_id: "prj-0001".into(), name: "x".into(), seed: 1, max_rounds: 6, strategy: Strategy::Entropy },
        None,
    )
    .unwrap();
    log.append(payload(7), None).unwrap();
    match ProjectState::replay(log.events(), None) {
        Err(GatewayError::CorruptLog { seq, .. }) => assert_eq!(seq, 2),
        other => panic!("expected CorruptLog, got {other:?}"),
    }
}

#[test]
fn empty_log_replays_to_empty_state() {
    let state = ProjectState::replay(EventLog::in_memory().events(), None).unwrap();
    assert_eq!(state, ProjectState::default());
    assert!(state.meta.is_none());
    assert_eq!(state.log_offset, 0);
    assert!(state.catalog.view().is_empty());
    assert!(state.sessions.is_empty());
}
