#![no_main]

use libfuzzer_sys::fuzz_target;
use splatterlab::synthgen::parse_cameras;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((input, views)) = parse_cameras(text) {
            // Parsed cameras passed validation, so projecting their own center ray is well defined.
            for cam in std::iter::once(&input).chain(&views) {
                let ray = cam.ray(cam.principal_point());
                assert!(ray.iter().all(|v| v.is_finite()));
            }
        }
    }
});
