#![no_main]

use libfuzzer_sys::fuzz_target;
use splatterlab::splatter::SplatterImage;

fuzz_target!(|data: &[u8]| {
    if let Ok(sp) = SplatterImage::from_bytes(data) {
        assert_eq!(sp.raw().len(), sp.height() * sp.width() * sp.layers() * splatterlab::splatter::RAW_CHANNELS);
        let again = SplatterImage::from_bytes(&sp.to_bytes()).expect("re-encoded blob parses");
        assert_eq!(again.to_bytes(), sp.to_bytes());
    }
});
