#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = fedais::model::parse_checkpoint(data) {
        let text = params.to_checkpoint_json().unwrap();
        assert_eq!(fedais::model::parse_checkpoint(text.as_bytes()).unwrap(), params);
    }
});
