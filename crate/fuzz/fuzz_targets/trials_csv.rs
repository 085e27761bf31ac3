#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = xreg::eval::read_csv(data) {
        // whatever parsed must survive a round trip
        let out = xreg::eval::encode_csv(&records, 1.0).expect("encode");
        let again = xreg::eval::read_csv(&out).expect("re-read");
        assert_eq!(again.len(), records.len());
    }
});
