//! The checked-in fuzz seeds must exercise both the accepting and the
//! rejecting paths of every parser.

use std::path::PathBuf;

use sctnet::io::checkpoint::{checkpoint_from_container, training_state_from_container};
use sctnet::io::dataset::dataset_from_container;
use sctnet::io::image::{decode_pgm, decode_ppm};
use sctnet::io::{Container, RunConfig};

fn seed(target: &str, name: &str) -> Vec<u8> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target).join(name);
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn container_seeds() {
    for ok in ["empty", "f32", "mixed"] {
        let b = seed("container", ok);
        assert_eq!(Container::parse(&b).unwrap().to_bytes(), b, "{ok}");
    }
    for bad in ["bad_version", "truncated"] {
        assert!(Container::parse(&seed("container", bad)).is_err(), "{bad}");
    }
}

#[test]
fn checkpoint_seeds() {
    let c = |n| Container::parse(&seed("checkpoint", n)).unwrap();
    assert!(checkpoint_from_container::<f32>(&c("f32")).is_ok());
    assert!(checkpoint_from_container::<f32>(&c("f64")).is_err());
    assert!(checkpoint_from_container::<f64>(&c("f64")).is_ok());
    assert!(checkpoint_from_container::<f32>(&c("no_meta")).is_err());
    let (state, _) = training_state_from_container::<f32>(&c("state")).unwrap();
    assert_eq!(state.optimizer.step, 3);
}

#[test]
fn netpbm_seeds() {
    assert!(decode_ppm::<f32>(&seed("netpbm", "p6_2x1")).is_ok());
    assert!(decode_ppm::<f32>(&seed("netpbm", "p6_comment")).is_ok());
    assert!(decode_ppm::<f32>(&seed("netpbm", "p6_maxval")).is_err());
    assert_eq!(decode_pgm(&seed("netpbm", "p5_2x2")).unwrap().0, vec![0, 1, 1, 0]);
}

#[test]
fn config_and_dataset_seeds() {
    let text = String::from_utf8(seed("config", "full")).unwrap();
    let (head, body) = text.split_once('\n').unwrap();
    let cfg = RunConfig::parse(body, &[head.to_string()]).unwrap();
    assert_eq!(cfg.model.num_classes, 19);
    assert!(RunConfig::parse("[modle]\nfoo = 1\n", &[]).is_err());
    let (train, val) = dataset_from_container(&Container::parse(&seed("dataset", "tiny")).unwrap()).unwrap();
    assert_eq!((train.len(), val.len()), (1, 0));
}
