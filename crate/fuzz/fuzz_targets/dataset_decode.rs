#![no_main]
//! Input: two 2-byte little-endian lengths (manifest, features), then the
//! manifest JSON, the feature blob and the label blob.

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let rest = &data[4..];
    let a = (u16::from_le_bytes([data[0], data[1]]) as usize).min(rest.len());
    let (manifest, rest) = rest.split_at(a);
    let b = (u16::from_le_bytes([data[2], data[3]]) as usize).min(rest.len());
    let (features, labels) = rest.split_at(b);
    if let Ok(ds) = xreg::regression::decode_dataset(manifest, features, labels) {
        assert_eq!(ds.features.len(), ds.manifest.n);
        assert_eq!(ds.labels.len(), ds.manifest.n);
    }
});
