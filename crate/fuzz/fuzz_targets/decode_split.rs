#![no_main]

use libfuzzer_sys::fuzz_target;
use saaformer::dataflow::{decode_split, encode_split};

fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = decode_split(data) {
        let bytes = encode_split(&spec).expect("decoded split re-encodes");
        let again = decode_split(&bytes).expect("re-encoded split decodes");
        assert_eq!(encode_split(&again).unwrap(), bytes);
    }
});
