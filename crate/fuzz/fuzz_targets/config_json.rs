#![no_main]

use libfuzzer_sys::fuzz_target;
use splatterlab::losses::LossWeights;
use splatterlab::roi::FaceBox;
use splatterlab::splatter::DecodeConfig;
use splatterlab::synthgen::DatasetConfig;
use splatterlab::training::FitConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<FitConfig>(data) {
        let _ = cfg.validate();
    }
    if let Ok(cfg) = serde_json::from_slice::<DatasetConfig>(data) {
        let _ = cfg.validate();
    }
    if let Ok(cfg) = serde_json::from_slice::<DecodeConfig>(data) {
        let _ = cfg.validate();
    }
    if let Ok(w) = serde_json::from_slice::<LossWeights>(data) {
        let _ = w.validate();
    }
    let _ = serde_json::from_slice::<FaceBox>(data);
});
