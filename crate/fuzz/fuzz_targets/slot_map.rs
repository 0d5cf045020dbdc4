#![no_main]

use kgdst::corpus::Ontology;
use kgdst::knowledge::{build_type_kb, build_type_value_kb};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(serde_json::Value::Object(map)) = serde_json::from_slice(data) else {
        return;
    };
    if let Ok(onto) = Ontology::from_slot_map(&map) {
        assert_eq!(build_type_kb(&onto).len(), onto.slots.len());
        assert_eq!(build_type_value_kb(&onto).len(), onto.num_pairs());
    }
});
