#![no_main]

use avgzsl::model::ModelParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = ModelParams::<f32>::from_checkpoint_bytes(data) {
        let bytes = params.to_checkpoint_bytes();
        let again = ModelParams::<f32>::from_checkpoint_bytes(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.to_checkpoint_bytes(), bytes);
    }
});
