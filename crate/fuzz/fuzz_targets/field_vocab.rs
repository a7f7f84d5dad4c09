#![no_main]

use ctrkit::data::{read_field_vocab, write_field_vocab};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(tokens) = read_field_vocab(data) {
        let mut out = Vec::new();
        write_field_vocab(&mut out, &tokens).unwrap();
        assert_eq!(read_field_vocab(out.as_slice()).unwrap(), tokens);
    }
});
