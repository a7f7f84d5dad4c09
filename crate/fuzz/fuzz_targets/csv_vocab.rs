#![no_main]

use ctrkit::data::Vocab;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(vocab) = Vocab::build(data, None, "label", 1) {
        if let Ok(ds) = vocab.encode(data) {
            assert!(ds.validate(vocab.schema()).is_ok());
        }
    }
});
