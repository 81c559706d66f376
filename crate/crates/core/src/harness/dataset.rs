//! Synthetic shape-segmentation task.
//!
//! Stripes and rings share one color, so only their layout (a band crossing
//! the image versus a closed annulus) separates them.

use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Stripe,
    Ring,
    Triangle,
}

impl ShapeKind {
    /// Class `k` (1-based) draws `ALL[k - 1]`.
    pub const ALL: [ShapeKind; 5] = [ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Stripe, ShapeKind::Ring, ShapeKind::Triangle];

    fn base_color(self) -> [f64; 3] {
        match self {
            ShapeKind::Rectangle => [0.85, 0.3, 0.25],
            ShapeKind::Triangle => [0.85, 0.8, 0.2],
            ShapeKind::Disk => [0.25, 0.8, 0.3],
            ShapeKind::Stripe | ShapeKind::Ring => [0.25, 0.35, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    /// Background plus up to five shape classes.
    pub num_classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub seed: u64,
    pub max_shapes: usize,
    pub color_jitter: f64,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            height: 64,
            width: 64,
            num_classes: 6,
            train_samples: 2000,
            val_samples: 100,
            seed: 0,
            max_shapes: 3,
            color_jitter: 0.12,
            noise: 0.05,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.num_classes) {
            bail!(Config, "synthetic task supports 2..=6 classes, got {}", self.num_classes);
        }
        if self.height < 16 || self.width < 16 {
            bail!(Config, "synthetic images must be at least 16x16, got {}x{}", self.height, self.width);
        }
        if self.max_shapes == 0 {
            bail!(Config, "max_shapes must be >= 1");
        }
        if !(self.color_jitter >= 0.0 && self.noise >= 0.0) {
            bail!(Config, "color_jitter and noise must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `[1, 3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major `H x W` class indices.
    pub label: Vec<i32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Inside-test for one placed shape, in pixel-center coordinates.
#[derive(Debug, Clone, Copy)]
enum Geometry {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
    Band { px: f64, py: f64, nx: f64, ny: f64, half: f64 },
    Ring { cx: f64, cy: f64, r_in: f64, r_out: f64 },
    Tri { v: [(f64, f64); 3] },
}

impl Geometry {
    fn sample(kind: ShapeKind, h: f64, w: f64, rng: &mut Rng) -> Geometry {
        let s = h.min(w) / 64.0;
        let (cx, cy) = (rng.uniform_range(0.15 * w, 0.85 * w), rng.uniform_range(0.15 * h, 0.85 * h));
        match kind {
            ShapeKind::Rectangle => {
                let (hw, hh) = (rng.uniform_range(9.0, 18.0) * s, rng.uniform_range(9.0, 18.0) * s);
                Geometry::Rect { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh }
            }
            ShapeKind::Disk => Geometry::Disk { cx, cy, r: rng.uniform_range(10.0, 18.0) * s },
            ShapeKind::Stripe => {
                let a = rng.uniform_range(0.0, std::f64::consts::PI);
                Geometry::Band { px: cx, py: cy, nx: a.cos(), ny: a.sin(), half: rng.uniform_range(6.0, 8.0) * s }
            }
            ShapeKind::Ring => {
                let r_out = rng.uniform_range(16.0, 23.0) * s;
                Geometry::Ring { cx, cy, r_in: r_out - rng.uniform_range(7.0, 10.0) * s, r_out }
            }
            ShapeKind::Triangle => {
                let size = rng.uniform_range(14.0, 22.0) * s;
                let rot = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
                let mut v = [(0.0, 0.0); 3];
                for (i, p) in v.iter_mut().enumerate() {
                    let a = rot + i as f64 * 2.0 * std::f64::consts::PI / 3.0 + rng.uniform_range(-0.3, 0.3);
                    *p = (cx + size * a.cos(), cy + size * a.sin());
                }
                Geometry::Tri { v }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Geometry::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Geometry::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Geometry::Band { px, py, nx, ny, half } => ((x - px) * nx + (y - py) * ny).abs() <= half,
            Geometry::Ring { cx, cy, r_in, r_out } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 <= r_out * r_out && d2 >= r_in * r_in
            }
            Geometry::Tri { v } => {
                let cross = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [cross(v[0], v[1]), cross(v[1], v[2]), cross(v[2], v[0])];
                d.iter().all(|&c| c >= 0.0) || d.iter().all(|&c| c <= 0.0)
            }
        }
    }
}

const MIN_VISIBLE: usize = 24;

/// Renders one sample. Shapes are drawn in order, later ones occluding
/// earlier ones; a shape is re-sampled when it would add fewer than
/// `MIN_VISIBLE` pixels.
pub fn render_sample(cfg: &SyntheticConfig, rng: &mut Rng) -> SegSample {
    let (h, w) = (cfg.height, cfg.width);
    let kinds = &ShapeKind::ALL[..cfg.num_classes - 1];
    loop {
        let mut label = vec![0i32; h * w];
        let mut color = vec![[0.0f64; 3]; h * w];
        let base = rng.uniform_range(0.35, 0.65);
        let bg = [base + rng.uniform_range(-0.05, 0.05), base + rng.uniform_range(-0.05, 0.05), base + rng.uniform_range(-0.05, 0.05)];
        color.iter_mut().for_each(|c| *c = bg);
        let n_shapes = rng.int_range(1, cfg.max_shapes + 1);
        for _ in 0..n_shapes {
            let class = rng.int_range(1, kinds.len() + 1);
            let kind = kinds[class - 1];
            let mut tint = kind.base_color();
            tint.iter_mut().for_each(|t| *t += rng.uniform_range(-cfg.color_jitter, cfg.color_jitter));
            for _attempt in 0..20 {
                let geom = Geometry::sample(kind, h as f64, w as f64, rng);
                let inside: Vec<usize> =
                    (0..h * w).filter(|&i| geom.contains((i % w) as f64 + 0.5, (i / w) as f64 + 0.5)).collect();
                if inside.len() >= MIN_VISIBLE && inside.len() < h * w {
                    for i in inside {
                        label[i] = class as i32;
                        color[i] = tint;
                    }
                    break;
                }
            }
        }
        let has_bg = label.iter().any(|&l| l == 0);
        let has_fg = label.iter().any(|&l| l != 0);
        if !(has_bg && has_fg) {
            continue;
        }
        let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
        let data = image.data_mut();
        for (i, c) in color.iter().enumerate() {
            for ch in 0..3 {
                let v = c[ch] + cfg.noise * rng.uniform_range(-1.0, 1.0);
                data[ch * h * w + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
        return SegSample { image, label };
    }
}

/// Deterministic split: the same config and split always give the same
/// samples, and the two splits use independent streams.
pub fn gen_dataset(cfg: &SyntheticConfig, split: Split) -> Result<Vec<SegSample>> {
    cfg.validate()?;
    let (n, label) = match split {
        Split::Train => (cfg.train_samples, "train"),
        Split::Val => (cfg.val_samples, "val"),
    };
    let root = Rng::new(cfg.seed).fork(label);
    Ok((0..n).map(|i| render_sample(cfg, &mut root.fork(&i.to_string()))).collect())
}

/// Stacks samples into an `[N, 3, H, W]` batch and concatenated labels.
pub fn make_batch(samples: &[&SegSample], flip: Option<&[bool]>) -> Result<(Tensor<f32>, Vec<i32>)> {
    if samples.is_empty() {
        bail!(Data, "empty batch");
    }
    let images: Vec<Tensor<f32>> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| if flip.is_some_and(|f| f[i]) { hflip_image(&s.image) } else { s.image.clone() })
        .collect();
    let refs: Vec<&Tensor<f32>> = images.iter().collect();
    let x = Tensor::stack(&refs)?;
    let w = x.shape().w();
    let mut labels = Vec::with_capacity(samples.len() * x.shape().hw());
    for (i, s) in samples.iter().enumerate() {
        if flip.is_some_and(|f| f[i]) {
            for row in s.label.chunks(w) {
                labels.extend(row.iter().rev());
            }
        } else {
            labels.extend_from_slice(&s.label);
        }
    }
    Ok((x, labels))
}

fn hflip_image(x: &Tensor<f32>) -> Tensor<f32> {
    let s = x.shape();
    let mut out = x.clone();
    for (dst, src) in out.data_mut().chunks_mut(s.w()).zip(x.data().chunks(s.w())) {
        dst.iter_mut().zip(src.iter().rev()).for_each(|(d, v)| *d = *v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig { train_samples: 20, val_samples: 5, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        let a = gen_dataset(&small(), Split::Train).unwrap();
        let b = gen_dataset(&small(), Split::Train).unwrap();
        assert_eq!(a, b);
        let v = gen_dataset(&small(), Split::Val).unwrap();
        assert_ne!(a[0], v[0]);
    }

    #[test]
    fn labels_in_range_and_at_least_two_classes() {
        for s in gen_dataset(&small(), Split::Train).unwrap() {
            assert!(s.label.iter().all(|&l| (0..6).contains(&l)));
            let mut seen = [false; 6];
            s.label.iter().for_each(|&l| seen[l as usize] = true);
            assert!(seen.iter().filter(|&&x| x).count() >= 2);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn single_rectangle_label_is_exact_indicator() {
        let cfg = SyntheticConfig { num_classes: 2, max_shapes: 1, noise: 0.0, color_jitter: 0.0, ..small() };
        let s = render_sample(&cfg, &mut Rng::new(3));
        // recover the rectangle's extent from the labels and check it is a
        // filled axis-aligned box
        let w = cfg.width;
        let fg: Vec<usize> = (0..s.label.len()).filter(|&i| s.label[i] == 1).collect();
        let (x0, x1) = (fg.iter().map(|i| i % w).min().unwrap(), fg.iter().map(|i| i % w).max().unwrap());
        let (y0, y1) = (fg.iter().map(|i| i / w).min().unwrap(), fg.iter().map(|i| i / w).max().unwrap());
        assert_eq!(fg.len(), (x1 - x0 + 1) * (y1 - y0 + 1));
        // and the image colour matches the label exactly without noise
        let red = s.image.data()[fg[0]];
        for i in 0..s.label.len() {
            assert_eq!(s.image.data()[i] == red, s.label[i] == 1);
        }
    }

    #[test]
    fn flip_mirrors_image_and_label() {
        let d = gen_dataset(&small(), Split::Train).unwrap();
        let (x, y) = make_batch(&[&d[0]], Some(&[true])).unwrap();
        let w = 64;
        assert_eq!(y[5 * w], d[0].label[5 * w + w - 1]);
        assert_eq!(x.at(0, 1, 7, 0), d[0].image.at(0, 1, 7, w - 1));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SyntheticConfig { num_classes: 7, ..small() }.validate().is_err());
        assert!(SyntheticConfig { num_classes: 1, ..small() }.validate().is_err());
    }
}
