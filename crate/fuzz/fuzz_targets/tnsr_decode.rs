#![no_main]

use libfuzzer_sys::fuzz_target;

use avfusion_core::io::tnsr;

fuzz_target!(|data: &[u8]| {
    // Must never panic or over-allocate on arbitrary bytes.
    if let Ok(t) = tnsr::decode_exact(data) {
        // anything accepted re-encodes to the identical bytes
        let bytes = match &t {
            tnsr::AnyTensor::F32(t) => tnsr::encode(t),
            tnsr::AnyTensor::F64(t) => tnsr::encode(t),
        };
        assert_eq!(bytes, data);
    }
    let _ = tnsr::decode_header(data);
});
