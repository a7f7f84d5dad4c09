#![no_main]

use ctrkit::train::{read_checkpoint, Model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = read_checkpoint(&mut &data[..]) {
        let _ = Model::from_checkpoint(&ck, None);
    }
});
