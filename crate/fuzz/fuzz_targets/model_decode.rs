#![no_main]
//! Input: 2-byte little-endian manifest length, manifest JSON, weight blob.

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let n = (u16::from_le_bytes([data[0], data[1]]) as usize).min(data.len() - 2);
    let (manifest, blob) = data[2..].split_at(n);
    if let Ok((net, _)) = xreg::nn::decode_model(manifest, blob) {
        let x = vec![0.5; net.input_shape().len()];
        let y = net.forward(&x).expect("decoded network accepts its input shape");
        assert_eq!(y.len(), net.output_len());
    }
});
