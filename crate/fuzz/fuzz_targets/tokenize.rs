#![no_main]

use kgdst::model::vocab::{tokenize, BOS, EOS, PAD};
use kgdst::model::Vocabulary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let tokens = tokenize(&text);
    let vocab = Vocabulary::build([text.as_ref()]);
    let ids = vocab.encode(&text);
    assert_eq!(ids.len(), tokens.len());
    let kept: Vec<&str> = tokens
        .into_iter()
        .filter(|t| !matches!(vocab.id(t), PAD | BOS | EOS))
        .collect();
    assert_eq!(vocab.decode(&ids), kept.join(" "));
});
