#![no_main]

use libfuzzer_sys::fuzz_target;
use splatterlab::Image;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = Image::decode_pfm(data) {
        assert_eq!(img.data().len(), img.width() * img.height() * img.channels());
    }
});
