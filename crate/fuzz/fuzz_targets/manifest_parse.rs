#![no_main]

use libfuzzer_sys::fuzz_target;

use avfusion_core::data;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = data::parse_manifest(data) {
        // successful parses round-trip through the writer
        let text = data::write_manifest(&records).unwrap();
        let back = data::parse_manifest(text.as_bytes()).unwrap();
        assert_eq!(records, back);
    }
});
