#![no_main]

use ctrkit::data::{read_cache, write_cache};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((hash, ds)) = read_cache(&mut &data[..], None) {
        let mut out = Vec::new();
        write_cache(&mut out, &ds, hash).unwrap();
        assert_eq!(out, data);
    }
});
