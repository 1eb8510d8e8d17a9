#![no_main]

use libfuzzer_sys::fuzz_target;
use saaformer::model::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&model).expect("decoded checkpoint re-encodes");
        assert_eq!(bytes, data, "checkpoints have one encoding");
    }
});
