#![no_main]

use libfuzzer_sys::fuzz_target;
use sctnet::io::Container;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::parse(data) {
        assert_eq!(c.to_bytes(), data);
    }
});
