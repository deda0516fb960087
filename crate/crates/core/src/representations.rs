//! Synthetic stimuli and the three stimulus representations: a semantic
//! embedding S (class codebook vector), an edge map E (normalized Sobel
//! magnitude) and a blocky color palette C (block means upsampled back).
//!
//! Images are stored channel-planar (`[C, H, W]`), values in `[0, 1]`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, rng, rng_at};

pub const IMG: usize = 32;
pub const D_S: usize = 32;
pub const N_CLASSES: usize = 12;
pub const BLOCK: usize = 8;
pub const MAX_CODEBOOK_COS: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width || channels == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "image {channels}x{height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Channel mean, as used for grayscale metrics.
    pub fn gray(&self) -> Vec<f64> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| (0..self.channels).map(|c| self.data[c * n + i] as f64).sum::<f64>() / self.channels as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StimulusImage {
    pub image: Image,
    pub class_label: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColorPalette {
    pub image: Image,
    pub block_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbedding {
    pub vector: Vec<f32>,
}

/// The (S, E, C) bundle for one stimulus. `e` is `H·W`, `c` is `3·H·W` planar.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationTriple {
    pub s: Vec<f32>,
    pub e: Vec<f32>,
    pub c: Vec<f32>,
}

impl RepresentationTriple {
    pub fn zeros() -> Self {
        Self {
            s: vec![0.0; D_S],
            e: vec![0.0; IMG * IMG],
            c: vec![0.0; 3 * IMG * IMG],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s.len() != D_S || self.e.len() != IMG * IMG || self.c.len() != 3 * IMG * IMG {
            return Err(Error::Dimension(format!(
                "triple sizes S={} E={} C={}",
                self.s.len(),
                self.e.len(),
                self.c.len()
            )));
        }
        if !self.s.iter().chain(&self.e).chain(&self.c).all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite triple".into()));
        }
        Ok(())
    }
}

// (background, foreground) base colors per palette family
const FAMILIES: [([f32; 3], [f32; 3]); 4] = [
    ([0.10, 0.12, 0.35], [0.95, 0.55, 0.15]),
    ([0.85, 0.85, 0.75], [0.15, 0.45, 0.20]),
    ([0.20, 0.45, 0.20], [0.90, 0.20, 0.55]),
    ([0.55, 0.20, 0.15], [0.30, 0.80, 0.90]),
];

#[derive(Clone, Copy)]
enum Shape {
    Disc,
    Rect,
    Triangle,
}

fn covers(shape: Shape, cx: f32, cy: f32, r: f32, x: f32, y: f32) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        Shape::Disc => dx * dx + dy * dy <= r * r,
        Shape::Rect => dx.abs() <= r && dy.abs() <= 0.7 * r,
        // apex up, base at cy + r
        Shape::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5,
    }
}

/// Deterministic procedural scene for `(world_seed, sample_index)`.
pub fn generate_stimulus(world_seed: u64, sample_index: u64) -> StimulusImage {
    let seed = derive(world_seed, &[0x5717, sample_index]);
    let mut r = rng(seed);
    let class_label = r.random_range(0..N_CLASSES);
    let shape = [Shape::Disc, Shape::Rect, Shape::Triangle][class_label % 3];
    let (bg, fg) = FAMILIES[class_label / 3];
    let mut jitter = |base: [f32; 3], amt: f32| -> [f32; 3] { base.map(|v| (v + r.random_range(-amt..amt)).clamp(0.0, 1.0)) };
    let bg = jitter(bg, 0.08);
    let n_shapes = r.random_range(1..=3);
    let mut data = vec![0.0f32; 3 * IMG * IMG];
    for c in 0..3 {
        data[c * IMG * IMG..(c + 1) * IMG * IMG].fill(bg[c]);
    }
    for _ in 0..n_shapes {
        let col = {
            let base = fg;
            base.map(|v| (v + r.random_range(-0.1f32..0.1)).clamp(0.0, 1.0))
        };
        let rad = r.random_range(4.0f32..9.0);
        let cx = r.random_range(6.0f32..26.0);
        let cy = r.random_range(6.0f32..26.0);
        for y in 0..IMG {
            for x in 0..IMG {
                if covers(shape, cx, cy, rad, x as f32 + 0.5, y as f32 + 0.5) {
                    for c in 0..3 {
                        data[(c * IMG + y) * IMG + x] = col[c];
                    }
                }
            }
        }
    }
    StimulusImage {
        image: Image::new(3, IMG, IMG, data).expect("fixed size"),
        class_label,
        seed,
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Per-pixel max over channels of the Sobel gradient magnitude (replicate padding).
pub fn sobel_magnitude(img: &Image) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let mut out = vec![0.0f64; h * w];
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let (mut gx, mut gy) = (0.0, 0.0);
                for (ky, (rx, ry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                    let yy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                    for kx in 0..3 {
                        let xx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                        let v = img.at(c, yy, xx) as f64;
                        gx += rx[kx] * v;
                        gy += ry[kx] * v;
                    }
                }
                let m = (gx * gx + gy * gy).sqrt();
                if m > out[y * w + x] {
                    out[y * w + x] = m;
                }
            }
        }
    }
    out
}

/// Nearest-rank percentile (`q` in (0,1]) of a sample.
pub fn nearest_rank(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Sobel magnitude divided by its 99th percentile, clamped to `[0, 1]`.
pub fn extract_edge(img: &Image) -> EdgeMap {
    let mag = sobel_magnitude(img);
    let mut scale = nearest_rank(&mag, 0.99);
    if scale <= 0.0 {
        scale = mag.iter().copied().fold(0.0, f64::max);
    }
    let values = if scale <= 0.0 {
        vec![0.0; mag.len()]
    } else {
        mag.iter().map(|&m| (m / scale).clamp(0.0, 1.0) as f32).collect()
    };
    EdgeMap {
        height: img.height,
        width: img.width,
        values,
    }
}

/// Per-block channel means, `[C, H/b, W/b]`, computed in f64.
pub fn block_means(img: &Image, block: usize) -> Result<Vec<f64>> {
    if block == 0 || img.height % block != 0 || img.width % block != 0 {
        return Err(Error::Parameter(format!(
            "block size {block} does not divide {}x{}",
            img.height, img.width
        )));
    }
    let (bh, bw) = (img.height / block, img.width / block);
    let mut out = vec![0.0f64; img.channels * bh * bw];
    let inv = 1.0 / (block * block) as f64;
    for c in 0..img.channels {
        for by in 0..bh {
            for bx in 0..bw {
                let mut acc = 0.0f64;
                for y in by * block..(by + 1) * block {
                    for x in bx * block..(bx + 1) * block {
                        acc += img.at(c, y, x) as f64;
                    }
                }
                out[(c * bh + by) * bw + bx] = acc * inv;
            }
        }
    }
    Ok(out)
}

/// Block-mean downsample followed by nearest-neighbor upsample.
pub fn extract_color_palette(img: &Image, block: usize) -> Result<ColorPalette> {
    let means = block_means(img, block)?;
    let (bh, bw) = (img.height / block, img.width / block);
    let mut data = vec![0.0f32; img.data.len()];
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                data[(c * img.height + y) * img.width + x] = means[(c * bh + y / block) * bw + x / block] as f32;
            }
        }
    }
    Ok(ColorPalette {
        image: Image::new(img.channels, img.height, img.width, data)?,
        block_size: block,
    })
}

/// Unit-norm class vectors; pairwise |cos| below [`MAX_CODEBOOK_COS`].
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub seed: u64,
    /// Seed actually used after rejection of ill-separated draws.
    pub accepted_seed: u64,
    pub vectors: Vec<Vec<f32>>,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

impl Codebook {
    pub fn new(seed: u64) -> Self {
        for attempt in 0u64.. {
            let s = if attempt == 0 { seed } else { derive(seed, &[attempt]) };
            let mut r = rng(s);
            let vectors: Vec<Vec<f32>> = (0..N_CLASSES)
                .map(|_| {
                    let v: Vec<f64> = (0..D_S).map(|_| StandardNormal.sample(&mut r)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.iter().map(|x| (x / n) as f32).collect()
                })
                .collect();
            let ok = (0..N_CLASSES).all(|i| (i + 1..N_CLASSES).all(|j| cosine(&vectors[i], &vectors[j]).abs() < MAX_CODEBOOK_COS));
            if ok {
                return Self {
                    seed,
                    accepted_seed: s,
                    vectors,
                };
            }
        }
        unreachable!()
    }

    /// Class whose vector has the highest cosine with `v`.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, c) in self.vectors.iter().enumerate() {
            let s = cosine(c, v);
            if s > best.1 {
                best = (i, s);
            }
        }
        best.0
    }
}

pub fn embed_semantic(class_label: usize, codebook_seed: u64) -> Result<SemanticEmbedding> {
    if class_label >= N_CLASSES {
        return Err(Error::Parameter(format!("class label {class_label} >= {N_CLASSES}")));
    }
    Ok(SemanticEmbedding {
        vector: Codebook::new(codebook_seed).vectors[class_label].clone(),
    })
}

/// All three representations of a stimulus.
pub fn extract_triple(stim: &StimulusImage, codebook: &Codebook) -> RepresentationTriple {
    RepresentationTriple {
        s: codebook.vectors[stim.class_label].clone(),
        e: extract_edge(&stim.image).values,
        c: extract_color_palette(&stim.image, BLOCK).expect("BLOCK divides IMG").image.data,
    }
}

/// Seeded stream for ad-hoc generation, e.g. noise images.
pub fn noise_image(seed: u64, index: u64) -> Image {
    let mut r = rng_at(seed, &[0x401, index]);
    let data = (0..3 * IMG * IMG).map(|_| r.random::<f32>()).collect();
    Image::new(3, IMG, IMG, data).expect("fixed size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_in_range() {
        let a = generate_stimulus(7, 0);
        let b = generate_stimulus(7, 0);
        assert_eq!(a, b);
        assert!(a.image.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.class_label < N_CLASSES);
    }

    #[test]
    fn codebook_is_separated_and_unit() {
        let cb = Codebook::new(3);
        for v in &cb.vectors {
            let n: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        for i in 0..N_CLASSES {
            assert_eq!(cb.nearest(&cb.vectors[i]), i);
        }
    }
}
