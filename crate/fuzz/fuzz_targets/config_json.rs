#![no_main]

use avgzsl::trainer::ProtocolConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = ProtocolConfig::from_json(text) {
        let again = ProtocolConfig::from_json(&config.to_json()).expect("serialized config parses");
        assert_eq!(again.to_json(), config.to_json());
    }
});
