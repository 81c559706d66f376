//! Synthetic datasets as containers: `images` `[N,3,H,W]` f32 and `labels`
//! `[N,H,W]` i32 per split.

use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::harness::SegSample;
use crate::io::container::{Container, Entry, TensorData};
use crate::io::{read_file, write_atomic};
use crate::tensor::{Shape, Tensor};

fn push_split(c: &mut Container, split: &str, samples: &[SegSample]) -> Result<()> {
    let (h, w) = match samples.first() {
        Some(s) => (s.image.shape().h(), s.image.shape().w()),
        None => (0, 0),
    };
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.shape() != Shape::new(1, 3, h, w) || s.label.len() != h * w {
            bail!(Dimension, "{split} samples differ in size");
        }
        images.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.label);
    }
    let n = samples.len() as u32;
    c.push(Entry::new(format!("{split}.images"), vec![n, 3, h as u32, w as u32], TensorData::F32(images))?)?;
    c.push(Entry::new(format!("{split}.labels"), vec![n, h as u32, w as u32], TensorData::I32(labels))?)
}

fn read_split(c: &Container, split: &str) -> Result<Vec<SegSample>> {
    let get = |k: &str| c.get(&format!("{split}.{k}")).ok_or_else(|| Error::Data(format!("dataset lacks {split}.{k}")));
    let (img, lab) = (get("images")?, get("labels")?);
    let (TensorData::F32(px), TensorData::I32(ls)) = (&img.data, &lab.data) else {
        bail!(Data, "{split}: expected f32 images and i32 labels");
    };
    let (&[n, 3, h, w], &[n2, h2, w2]) = (img.dims.as_slice(), lab.dims.as_slice()) else {
        bail!(Data, "{split}: bad image or label dims");
    };
    if (n, h, w) != (n2, h2, w2) {
        bail!(Data, "{split}: images {:?} and labels {:?} disagree", img.dims, lab.dims);
    }
    let (h, w) = (h as usize, w as usize);
    let (ip, lp) = (3 * h * w, h * w);
    (0..n as usize)
        .map(|i| {
            Ok(SegSample {
                image: Tensor::from_vec(Shape::new(1, 3, h, w), px[i * ip..(i + 1) * ip].to_vec())?,
                label: ls[i * lp..(i + 1) * lp].to_vec(),
            })
        })
        .collect()
}

pub fn dataset_to_container(train: &[SegSample], val: &[SegSample]) -> Result<Container> {
    let mut c = Container::new();
    push_split(&mut c, "train", train)?;
    push_split(&mut c, "val", val)?;
    Ok(c)
}

pub fn dataset_from_container(c: &Container) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    Ok((read_split(c, "train")?, read_split(c, "val")?))
}

pub fn save_dataset(train: &[SegSample], val: &[SegSample], path: &Path) -> Result<()> {
    write_atomic(path, &dataset_to_container(train, val)?.to_bytes())
}

pub fn load_dataset(path: &Path) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    dataset_from_container(&Container::parse(&read_file(path)?)?)
}
