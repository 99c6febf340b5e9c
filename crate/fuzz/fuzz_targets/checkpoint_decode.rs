#![no_main]

use libfuzzer_sys::fuzz_target;

use avfusion_core::io::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok((header, tensors)) = checkpoint::decode(data) {
        // a decodable image either rebuilds into a model or fails cleanly
        let _ = checkpoint::model_from_parts(&header, &tensors);
    }
});
