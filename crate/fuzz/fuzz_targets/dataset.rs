#![no_main]

use libfuzzer_sys::fuzz_target;
use sctnet::io::dataset::dataset_from_container;
use sctnet::io::Container;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::parse(data) {
        let _ = dataset_from_container(&c);
    }
});
