#![no_main]

use avgzsl::data::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = serde_json::from_slice::<Manifest>(data) {
        let text = serde_json::to_vec(&m).expect("manifest serializes");
        let again: Manifest = serde_json::from_slice(&text).expect("serialized manifest parses");
        assert_eq!(again, m);
        let _ = m.num_classes();
    }
});
