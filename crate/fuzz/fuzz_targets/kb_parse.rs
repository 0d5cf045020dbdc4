#![no_main]

use kgdst::knowledge::KnowledgeBase;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(kb) = KnowledgeBase::parse(text) {
        assert_eq!(
            KnowledgeBase::parse(&kb.to_json()).expect("serialized base parses"),
            kb
        );
    }
});
