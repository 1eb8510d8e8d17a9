#![no_main]

use libfuzzer_sys::fuzz_target;
use saaformer::dataflow::{decode_cube, encode_cube};

fuzz_target!(|data: &[u8]| {
    if let Ok((cube, labels)) = decode_cube(data) {
        let bytes = encode_cube(&cube, labels.as_ref()).expect("decoded cube re-encodes");
        let (cube, labels) = decode_cube(&bytes).expect("re-encoded cube decodes");
        assert_eq!(encode_cube(&cube, labels.as_ref()).unwrap(), bytes);
    }
});
