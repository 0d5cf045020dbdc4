#![no_main]

use kgdst::corpus::{linearize_state, Ontology, OrderPolicy, SlotSpec};
use kgdst::eval::parse_linearized_state;
use libfuzzer_sys::fuzz_target;

fn ontology() -> Ontology {
    let slot = |name: &str, values: &[&str]| SlotSpec {
        name: name.into(),
        values: values.iter().map(|v| v.to_string()).collect(),
    };
    Ontology::new(vec![
        slot("hotel-area", &["north", "south", "city centre"]),
        slot("hotel-stars", &["3", "4"]),
        slot("train-leaveat", &["05:30", "don't care"]),
    ])
    .unwrap()
}

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let onto = ontology();
    let parsed = parse_linearized_state(&text, &onto);
    // whatever was recovered is valid and survives another round
    let relinear = linearize_state(&parsed.state, OrderPolicy::Annotation);
    let again = parse_linearized_state(&relinear, &onto);
    assert!(again.failures.is_empty());
    assert_eq!(again.state, parsed.state);
});
