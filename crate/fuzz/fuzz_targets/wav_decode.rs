#![no_main]

use libfuzzer_sys::fuzz_target;

use avfusion_core::io::wav;

fuzz_target!(|data: &[u8]| {
    if let Ok(chunk) = wav::decode(data) {
        // decoded PCM must already be normalized
        assert!(chunk.samples.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(chunk.channels() >= 1 && chunk.len() >= 1);
    }
});
