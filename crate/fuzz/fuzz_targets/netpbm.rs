#![no_main]

use libfuzzer_sys::fuzz_target;
use sctnet::io::image::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_ppm::<f32>(data) {
        let again = encode_ppm(&img).unwrap();
        assert_eq!(decode_ppm::<f32>(&again).unwrap(), img);
    }
    if let Ok((labels, h, w)) = decode_pgm(data) {
        let again = encode_pgm(&labels, h, w).unwrap();
        assert_eq!(decode_pgm(&again).unwrap(), (labels, h, w));
    }
});
