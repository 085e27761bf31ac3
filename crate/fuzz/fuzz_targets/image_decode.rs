#![no_main]
//! Input: 2-byte little-endian header length, header JSON, raw pixels.

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let n = (u16::from_le_bytes([data[0], data[1]]) as usize).min(data.len() - 2);
    let (header, raw) = data[2..].split_at(n);
    if let Ok(img) = xreg::drr::decode_image(header, raw) {
        assert_eq!(img.width * img.height * 4, raw.len());
        let _ = img.to_pgm();
    }
});
