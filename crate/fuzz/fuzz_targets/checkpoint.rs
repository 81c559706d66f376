#![no_main]

use libfuzzer_sys::fuzz_target;
use sctnet::io::checkpoint::{checkpoint_from_container, checkpoint_to_container, training_state_from_container};
use sctnet::io::Container;

fuzz_target!(|data: &[u8]| {
    let Ok(c) = Container::parse(data) else { return };
    if let Ok((params, meta)) = checkpoint_from_container::<f32>(&c) {
        let again = checkpoint_to_container(&params, &meta).unwrap();
        assert!(checkpoint_from_container::<f32>(&again).is_ok());
    }
    let _ = checkpoint_from_container::<f64>(&c);
    let _ = training_state_from_container::<f32>(&c);
});
