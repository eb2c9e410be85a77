#![no_main]

use avgzsl::data::SynthSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = serde_json::from_slice::<SynthSpec>(data) {
        // validation only; generating could allocate without bound
        let _ = spec.validate();
    }
});
