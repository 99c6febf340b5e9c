#![no_main]

use libfuzzer_sys::fuzz_target;

use avfusion_core::io::detections;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = detections::parse_jsonl(data) {
        let text = detections::write_jsonl(&records).unwrap();
        let back = detections::parse_jsonl(text.as_bytes()).unwrap();
        assert_eq!(records, back);
        for r in &records {
            for d in &r.detections {
                // ranking must be well-defined for anything we accept
                assert!(d.to_detection().ranking_score().is_finite());
            }
        }
    }
});
