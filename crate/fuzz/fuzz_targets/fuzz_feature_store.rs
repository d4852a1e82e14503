#![no_main]

use std::io::Cursor;

use classext::feature_store::FeatureStore;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Parsing arbitrary bytes must never panic, and anything it accepts
    // must satisfy every store invariant and survive a round trip.
    let Ok(store) = FeatureStore::from_reader(Cursor::new(data), None) else {
        return;
    };

    assert!(store.dimension() > 0);
    assert!(store.num_records() > 0);
    for label in store.class_labels() {
        let records = store.records(label).unwrap();
        assert!(!records.is_empty());
        let mut ids = std::collections::BTreeSet::new();
        for record in records {
            assert_eq!(record.class_label, label);
            assert_eq!(record.vector.len(), store.dimension());
            assert!(record.vector.iter().all(|v| v.is_finite()));
            assert!(record.vector.iter().any(|&v| v != 0.0));
            assert!(ids.insert(record.sample_id.as_str()), "duplicate sample id");
        }
    }

    let mut buf = Vec::new();
    store.write_jsonl(&mut buf).unwrap();
    let reloaded = FeatureStore::from_reader(Cursor::new(&buf), None).unwrap();
    assert_eq!(store, reloaded);
});
