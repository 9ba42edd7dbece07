#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((cfg, _)) = fedais::config::parse_config(data) {
        let text = serde_json::to_vec(&cfg).unwrap();
        let (again, warnings) = fedais::config::parse_config(&text).unwrap();
        assert_eq!(again, cfg);
        assert!(warnings.is_empty());
    }
});
