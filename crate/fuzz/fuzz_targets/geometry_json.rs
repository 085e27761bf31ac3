#![no_main]

use libfuzzer_sys::fuzz_target;
use xreg::ProjectionGeometry;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = ProjectionGeometry::from_json(data) {
        let px = g.mm_to_pixel([1.0, -2.0]);
        assert!(px.iter().all(|v| v.is_finite()));
    }
});
