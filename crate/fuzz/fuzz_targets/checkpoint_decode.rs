#![no_main]

use kgdst::model::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode();
        assert_eq!(
            Checkpoint::decode(&bytes).expect("encoded checkpoint decodes"),
            ck
        );
        let _ = ck.model();
    }
});
