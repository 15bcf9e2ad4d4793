//! Store recovery under random crashes, and shared plaintext never reaching
//! the files.

use std::collections::BTreeMap;

use dossier_core::crypto::{encrypt_row, generate_row_key, SymmetricKey};
use dossier_core::rowstore::{serialize_row, KeyLookup, MemoryFiles, NoKeys, Row, Store};
use dossier_core::sim::scan::{scan_bytes, Sentinel};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Insert(u8, String),
    Update(u8, String),
    Delete(u8),
    Checkpoint,
}

fn op() -> impl Strategy<Value = Op> {
    let pk = 0u8..6;
    let value = "\\PC{0,12}";
    prop_oneof![
        3 => (pk.clone(), value).prop_map(|(k, v)| Op::Insert(k, v)),
        2 => (pk.clone(), value).prop_map(|(k, v)| Op::Update(k, v)),
        1 => pk.prop_map(Op::Delete),
        1 => Just(Op::Checkpoint),
    ]
}

type Model = BTreeMap<String, String>;

fn row(k: u8, v: &str) -> Row {
    Row::new("t", [("id", k.to_string()), ("v", v.to_string())]).unwrap()
}

fn contents(s: &Store) -> Model {
    s.rows().map(|r| (r.pk().to_string(), r.get("v").unwrap().to_string())).collect()
}

/// Applies `ops` to a store and a model. Returns the model after every
/// step, and the index of the last checkpoint.
fn apply(store: &mut Store, ops: &[Op]) -> (Vec<Model>, usize) {
    let mut model = Model::new();
    let mut states = vec![model.clone()];
    let mut last_checkpoint = 0;
    for op in ops {
        match op {
            Op::Insert(k, v) => {
                let ok = store.insert(row(*k, v)).is_ok();
                assert_eq!(ok, !model.contains_key(&k.to_string()));
                model.entry(k.to_string()).or_insert_with(|| v.clone());
            }
            Op::Update(k, v) => {
                let ok = store.update(row(*k, v)).is_ok();
                assert_eq!(ok, model.contains_key(&k.to_string()));
                if ok {
                    model.insert(k.to_string(), v.clone());
                }
            }
            Op::Delete(k) => {
                let ok = store.delete("t", &k.to_string()).is_ok();
                assert_eq!(ok, model.remove(&k.to_string()).is_some());
            }
            Op::Checkpoint => {
                store.checkpoint().unwrap();
                last_checkpoint = states.len();
            }
        }
        states.push(model.clone());
    }
    (states, last_checkpoint)
}

proptest! {
    #[test]
    fn reopen_without_crash_restores_everything(ops in prop::collection::vec(op(), 0..40)) {
        let (mut s, _) = Store::open_memory(MemoryFiles::default(), &mut NoKeys).unwrap();
        s.create_table("t", &["id", "v"]).unwrap();
        let (states, _) = apply(&mut s, &ops);
        let files = s.memory_files().unwrap().clone();
        let (again, report) = Store::open_memory(files, &mut NoKeys).unwrap();
        prop_assert!(!report.torn_journal_tail);
        prop_assert_eq!(&contents(&again), states.last().unwrap());
    }

    #[test]
    fn crash_recovers_a_prefix(ops in prop::collection::vec(op(), 1..40), cut in any::<prop::sample::Index>()) {
        let (mut s, _) = Store::open_memory(MemoryFiles::default(), &mut NoKeys).unwrap();
        s.create_table("t", &["id", "v"]).unwrap();
        let (states, last_checkpoint) = apply(&mut s, &ops);
        let mut files = s.memory_files().unwrap().clone();
        // Lose an arbitrary tail of the journal.
        let keep = if files.journal.is_empty() { 0 } else { cut.index(files.journal.len() + 1) };
        files.journal.truncate(keep);
        let (again, _) = Store::open_memory(files, &mut NoKeys).unwrap();
        let got = contents(&again);
        prop_assert!(
            states[last_checkpoint..].contains(&got),
            "recovered {:?} is not a state since the last checkpoint", got
        );
    }

    #[test]
    fn shared_plaintext_never_reaches_files(
        owned in prop::collection::vec("[a-z]{1,8}", 1..5),
        shared in 1usize..5,
        unseal in any::<bool>(),
    ) {
        let sentinels: Vec<Sentinel> = (0..shared)
            .map(|i| Sentinel { value: format!("SHARED-SENTINEL-{i}"), owner: "peer".into(), shared: true })
            .collect();
        let keys: Vec<SymmetricKey> = (0..shared).map(|_| generate_row_key().unwrap()).collect();
        let (mut s, _) = Store::open_memory(MemoryFiles::default(), &mut NoKeys).unwrap();
        for (i, v) in owned.iter().enumerate() {
            s.insert(Row::new("mine", [("id", i.to_string()), ("v", v.clone())]).unwrap()).unwrap();
        }
        for (i, key) in keys.iter().enumerate() {
            let r = Row::new("theirs", [("id", i.to_string()), ("v", sentinels[i].value.clone())]).unwrap();
            let ct = encrypt_row(&serialize_row(&r), key).unwrap();
            s.put_sealed(100 + i as u64, &ct).unwrap();
            if unseal {
                s.unseal(100 + i as u64, key).unwrap();
                prop_assert_eq!(s.get("theirs", &i.to_string()).unwrap().get("v"), Some(sentinels[i].value.as_str()));
            }
        }
        let before = s.memory_files().unwrap().clone();
        s.checkpoint().unwrap();
        let after = s.memory_files().unwrap().clone();
        for bytes in [&before.snapshot, &before.journal, &after.snapshot] {
            prop_assert!(scan_bytes("store", bytes, &sentinels).is_empty());
        }
        // Reopening with the keys brings the rows back.
        let ks = keys.clone();
        let mut resolver = move |id: u64| KeyLookup::Key(ks[(id - 100) as usize].clone());
        let (again, report) = Store::open_memory(after, &mut resolver).unwrap();
        prop_assert_eq!(report.shared_loaded.len(), shared);
        prop_assert_eq!(again.scan("theirs").count(), shared);
        prop_assert_eq!(again.scan("mine").count(), owned.len());
    }
}
