use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use mip::blockstore::{
    BlockStore, BlockStoreConfig, BlockStoreError, Journal, JournalError, JournalRecord, JOURNAL_PATH,
};
use mip::clock::{ManualClock, SharedClock};
use proptest::prelude::*;

fn store_with(config: BlockStoreConfig) -> (BlockStore, Arc<ManualClock>) {
    let clock = ManualClock::shared(Duration::from_secs(1_000));
    let shared: SharedClock = clock.clone();
    (BlockStore::new(config, shared).unwrap(), clock)
}

fn store() -> (BlockStore, Arc<ManualClock>) {
    store_with(BlockStoreConfig::default())
}

fn pattern(len: usize, salt: u8) -> Vec<u8> {
    (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt)).collect()
}

fn record(i: usize) -> JournalRecord {
    JournalRecord {
        session_id: format!("sess-{}", i % 3),
        request: format!("what is the oee {i}"),
        response: "OEE is 0.84645".into(),
        intent: "#READ_OEE".into(),
        entity: "#MACHINE".into(),
        trace_id: format!("trace-{i}"),
        ts: 1_000 + i as u64,
    }
}

#[test]
fn ten_kib_splits_into_three_triply_replicated_blocks() {
    let (bs, _) = store();
    let data = pattern(10 * 1024, 1);
    assert_eq!(bs.append("f", &data, "w").unwrap(), 10 * 1024);
    let entry = bs.stat("f").unwrap();
    let sizes: Vec<usize> = entry.blocks.iter().map(|b| b.len).collect();
    assert_eq!(sizes, vec![4096, 4096, 2048]);
    let replicas = bs.replica_map("f").unwrap();
    for block in &entry.blocks {
        let distinct: BTreeSet<&String> = block.pipeline.iter().collect();
        assert_eq!(distinct.len(), 3);
        let mut holders = replicas[&block.block_id].clone();
        holders.sort();
        let mut pipeline = block.pipeline.clone();
        pipeline.sort();
        assert_eq!(holders, pipeline);
    }
    assert_eq!(bs.read("f").unwrap(), data);
}

#[test]
fn reads_survive_any_single_node_kill() {
    let (bs, _) = store();
    let data = pattern(10 * 1024, 2);
    bs.append("f", &data, "w").unwrap();
    for node in bs.node_ids() {
        bs.set_node_alive(&node, false).unwrap();
        for _ in 0..10 {
            assert_eq!(bs.read("f").unwrap(), data, "with {node} down");
        }
        bs.set_node_alive(&node, true).unwrap();
    }
}

#[test]
fn all_holders_dead_is_unavailable() {
    let (bs, _) = store();
    bs.append("f", b"hello", "w").unwrap();
    let block = bs.stat("f").unwrap().blocks[0].clone();
    for node in &block.pipeline {
        bs.set_node_alive(node, false).unwrap();
    }
    assert!(matches!(bs.read("f"), Err(BlockStoreError::Unavailable { .. })));
    for node in &block.pipeline {
        bs.set_node_alive(node, true).unwrap();
    }
    assert_eq!(bs.read("f").unwrap(), b"hello");
}

#[test]
fn killing_a_node_outside_the_pipeline_changes_nothing() {
    let (bs, _) = store();
    bs.append("f", b"abc", "w").unwrap();
    let block = bs.stat("f").unwrap().blocks[0].clone();
    let outsider = bs.node_ids().into_iter().find(|n| !block.pipeline.contains(n)).unwrap();
    bs.set_node_alive(&outsider, false).unwrap();
    assert_eq!(bs.read("f").unwrap(), b"abc");
    bs.append("f", b"def", "w").unwrap();
    assert_eq!(bs.stat("f").unwrap().blocks[0].pipeline, block.pipeline);
    assert!(matches!(bs.set_node_alive("dn-99", false), Err(BlockStoreError::UnknownNode(_))));
}

#[test]
fn second_writer_is_refused_while_lease_is_live() {
    let (bs, clock) = store();
    bs.append("f", b"one", "alice").unwrap();
    assert!(matches!(
        bs.append("f", b"two", "bob"),
        Err(BlockStoreError::LeaseHeld { holder, .. }) if holder == "alice"
    ));
    clock.advance(Duration::from_secs(29));
    bs.append("f", b"three", "alice").unwrap();
    clock.advance(Duration::from_secs(29));
    assert!(bs.append("f", b"x", "bob").is_err());
    clock.advance(Duration::from_secs(2));
    bs.append("f", b"four", "bob").unwrap();
    assert_eq!(bs.read("f").unwrap(), b"onethreefour");
    bs.release_lease("f", "bob").unwrap();
    bs.append("f", b"!", "carol").unwrap();
}

#[test]
fn too_few_live_nodes() {
    let (bs, _) = store();
    bs.set_node_alive("dn-1", false).unwrap();
    bs.set_node_alive("dn-2", false).unwrap();
    assert!(matches!(
        bs.append("f", b"x", "w"),
        Err(BlockStoreError::InsufficientNodes { live: 2, needed: 3 })
    ));
    let (small, _) = store_with(BlockStoreConfig {
        datanodes: 2,
        ..BlockStoreConfig::default()
    });
    assert!(matches!(small.append("f", b"x", "w"), Err(BlockStoreError::InsufficientNodes { .. })));
}

#[test]
fn partial_block_is_rewritten_on_its_pipeline() {
    let (bs, _) = store();
    bs.append("f", &pattern(1000, 3), "w").unwrap();
    let first = bs.stat("f").unwrap().blocks[0].clone();
    bs.append("f", &pattern(1000, 4), "w").unwrap();
    let entry = bs.stat("f").unwrap();
    assert_eq!(entry.blocks.len(), 1);
    let second = &entry.blocks[0];
    assert_eq!(second.pipeline, first.pipeline);
    assert_ne!(second.block_id, first.block_id);
    assert_eq!(second.len, 2000);
    for node in &first.pipeline {
        assert!(!bs.node_holds(node, first.block_id).unwrap());
    }
}

#[test]
fn dead_pipeline_node_seals_the_partial_block() {
    let (bs, _) = store();
    bs.append("f", b"head", "w").unwrap();
    let first = bs.stat("f").unwrap().blocks[0].clone();
    bs.set_node_alive(&first.pipeline[0], false).unwrap();
    bs.append("f", b"tail", "w").unwrap();
    let entry = bs.stat("f").unwrap();
    assert_eq!(entry.blocks.len(), 2);
    assert_eq!(entry.blocks[0], first);
    assert!(!entry.blocks[1].pipeline.contains(&first.pipeline[0]));
    assert_eq!(bs.read("f").unwrap(), b"headtail");
}

#[test]
fn crash_mid_pipeline_aborts_the_append() {
    let (bs, _) = store();
    bs.append("f", b"committed", "w").unwrap();
    let pipeline = bs.stat("f").unwrap().blocks[0].pipeline.clone();
    bs.crash_on_next_write(&pipeline[1]).unwrap();
    assert!(matches!(
        bs.append("f", b"-lost", "w"),
        Err(BlockStoreError::PipelineFailed { .. })
    ));
    assert!(!bs.is_node_alive(&pipeline[1]).unwrap());
    assert_eq!(bs.stat("f").unwrap().length, 9);
    assert_eq!(bs.read("f").unwrap(), b"committed");
    // No orphaned replicas of the aborted block survive on the others.
    let total: usize = bs.node_ids().iter().map(|n| bs.node_block_count(n).unwrap()).sum();
    assert_eq!(total, 3);
    // The client retries and lands on a fresh pipeline.
    bs.append("f", b"-retried", "w").unwrap();
    assert_eq!(bs.read("f").unwrap(), b"committed-retried");
}

#[test]
fn corrupted_replica_falls_back_then_reports() {
    let (bs, _) = store();
    bs.append("f", b"payload", "w").unwrap();
    let block = bs.stat("f").unwrap().blocks[0].clone();
    assert!(bs.corrupt_replica(&block.pipeline[0], block.block_id).unwrap());
    for _ in 0..20 {
        assert_eq!(bs.read("f").unwrap(), b"payload");
    }
    bs.corrupt_replica(&block.pipeline[1], block.block_id).unwrap();
    bs.corrupt_replica(&block.pipeline[2], block.block_id).unwrap();
    assert!(matches!(bs.read("f"), Err(BlockStoreError::ChecksumMismatch(_))));
}

#[test]
fn missing_file() {
    let (bs, _) = store();
    assert!(matches!(bs.read("nope"), Err(BlockStoreError::NotFound(_))));
}

#[test]
fn persisted_store_reopens_with_same_content() {
    let dir = tempfile::tempdir().unwrap();
    let clock: SharedClock = ManualClock::shared(Duration::from_secs(5));
    let data = pattern(9000, 9);
    {
        let bs = BlockStore::open(dir.path(), BlockStoreConfig::default(), clock.clone()).unwrap();
        bs.append("a/b", &data, "w").unwrap();
        bs.append("c", b"small", "w").unwrap();
    }
    assert!(dir.path().join("namespace.json").exists());
    assert!(dir.path().join("dn-1").is_dir());
    let bs = BlockStore::open(dir.path(), BlockStoreConfig::default(), clock).unwrap();
    assert_eq!(bs.read("a/b").unwrap(), data);
    assert_eq!(bs.read("c").unwrap(), b"small");
    assert_eq!(bs.list(), vec!["a/b".to_string(), "c".to_string()]);
    // New blocks never reuse ids from before the restart.
    let before: BTreeSet<_> = bs.stat("a/b").unwrap().blocks.iter().map(|b| b.block_id).collect();
    bs.append("d", b"z", "w").unwrap();
    assert!(!before.contains(&bs.stat("d").unwrap().blocks[0].block_id));
    let files: usize = bs.node_ids().iter().map(|n| std::fs::read_dir(dir.path().join(n)).unwrap().count()).sum();
    assert_eq!(files, (3 + 1 + 1) * 3);
}

#[test]
fn journal_round_trip() {
    let (bs, _) = store();
    let journal = Journal::new(Arc::new(bs));
    assert!(journal.is_empty().unwrap());
    journal.journal_session(&record(0)).unwrap();
    assert_eq!(journal.records().unwrap(), vec![record(0)]);
    assert_eq!(journal.path(), JOURNAL_PATH);
}

#[test]
fn journal_bulk_round_trip_keeps_order() {
    let (bs, _) = store();
    let journal = Journal::new(Arc::new(bs));
    for i in 0..1000 {
        journal.journal_session(&record(i)).unwrap();
    }
    let records = journal.records().unwrap();
    assert_eq!(records.len(), 1000);
    assert!(records.iter().enumerate().all(|(i, r)| *r == record(i)));
    let raw = journal.store().read(JOURNAL_PATH).unwrap();
    assert_eq!(raw.iter().filter(|b| **b == b'\n').count(), 1000);
}

#[test]
fn journal_rejects_incomplete_records() {
    let (bs, _) = store();
    let journal = Journal::new(Arc::new(bs));
    let mut r = record(1);
    r.intent.clear();
    assert!(matches!(journal.journal_session(&r), Err(JournalError::Incomplete("intent"))));
    assert!(journal.is_empty().unwrap());
}

#[test]
fn journal_keeps_going_after_a_datanode_kill() {
    let (bs, _) = store();
    let bs = Arc::new(bs);
    let journal = Journal::new(bs.clone());
    journal.journal_session(&record(0)).unwrap();
    let pipeline = bs.stat(JOURNAL_PATH).unwrap().blocks[0].pipeline.clone();
    bs.set_node_alive(&pipeline[0], false).unwrap();
    journal.journal_session(&record(1)).unwrap();
    journal.journal_session(&record(2)).unwrap();
    assert_eq!(journal.len().unwrap(), 3);
}

#[test]
fn concurrent_writers_never_interleave() {
    let (bs, _) = store();
    let bs = Arc::new(bs);
    let outcomes: Vec<Vec<bool>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4u8)
            .map(|w| {
                let bs = bs.clone();
                s.spawn(move || {
                    (0..50)
                        .map(|_| bs.append("shared", &[b'a' + w; 700], &format!("w{w}")).is_ok())
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let winners: Vec<usize> = outcomes.iter().enumerate().filter(|(_, o)| o.iter().any(|x| *x)).map(|(i, _)| i).collect();
    assert_eq!(winners.len(), 1);
    let data = bs.read("shared").unwrap();
    assert_eq!(data.len(), 50 * 700);
    assert!(data.iter().all(|b| *b == b'a' + winners[0] as u8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn read_your_writes_under_single_failure(
        chunks in prop::collection::vec(1usize..6000, 1..12),
        kill in prop::option::of(0usize..4),
        kill_after in 0usize..12,
        seed in any::<u64>(),
    ) {
        let (bs, _) = store_with(BlockStoreConfig { seed, ..BlockStoreConfig::default() });
        let nodes = bs.node_ids();
        let mut expected = Vec::new();
        for (i, len) in chunks.iter().enumerate() {
            if i == kill_after {
                if let Some(k) = kill {
                    bs.set_node_alive(&nodes[k], false).unwrap();
                }
            }
            let chunk = pattern(*len, i as u8);
            bs.append("p", &chunk, "w").unwrap();
            expected.extend_from_slice(&chunk);
            prop_assert_eq!(bs.read("p").unwrap(), expected.clone());
        }
        if let Some(k) = kill {
            bs.set_node_alive(&nodes[k], true).unwrap();
        }
        for (i, node) in nodes.iter().enumerate() {
            bs.set_node_alive(node, false).unwrap();
            prop_assert_eq!(bs.read("p").unwrap(), expected.clone(), "node {} down", i);
            bs.set_node_alive(node, true).unwrap();
        }
        let entry = bs.stat("p").unwrap();
        prop_assert_eq!(entry.length as usize, expected.len());
        let replicas = bs.replica_map("p").unwrap();
        for block in &entry.blocks {
            prop_assert!(block.len <= 4096);
            let distinct: BTreeSet<&String> = block.pipeline.iter().collect();
            prop_assert_eq!(distinct.len(), 3);
            prop_assert_eq!(replicas[&block.block_id].len(), 3);
        }
    }
}
