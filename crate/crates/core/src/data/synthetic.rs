//! Deterministic synthetic pedestrians in the Market-1501 layout.
//!
//! Every identity gets a clothing signature (upper/lower colors and a stripe
//! texture); every image adds a translation, camera tint and pixel noise.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::records::Split;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_ids: usize,
    /// Training images per identity.
    pub imgs_per_id: usize,
    /// `(height, width)` of the emitted images.
    pub image_size: (usize, usize),
    pub seed: u64,
    /// Held-out images per identity written to `query` (camera 1).
    pub query_per_id: usize,
    /// Held-out images per identity written to `bounding_box_test`
    /// (cameras 2 to 6).
    pub gallery_per_id: usize,
    /// Junk gallery images (ids `-1` and `0000`, alternating).
    pub junk_gallery: usize,
}

impl SyntheticConfig {
    pub fn new(num_ids: usize, imgs_per_id: usize, image_size: (usize, usize), seed: u64) -> Self {
        SyntheticConfig {
            num_ids,
            imgs_per_id,
            image_size,
            seed,
            query_per_id: 2,
            gallery_per_id: 4,
            junk_gallery: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSummary {
    pub train: usize,
    pub query: usize,
    pub gallery: usize,
}

#[derive(Debug, Clone, Copy)]
struct Signature {
    upper: [f32; 3],
    lower: [f32; 3],
    head: [f32; 3],
    stripe_period: usize,
    vertical_stripes: bool,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn signature(index: usize, num_ids: usize, rng: &mut ChaCha8Rng) -> Signature {
    let base = index as f32 / num_ids as f32;
    let hue_upper = base + rng.random_range(0.0..0.3) / num_ids as f32;
    let hue_lower = hue_upper + rng.random_range(0.3..0.7);
    Signature {
        upper: hsv_to_rgb(hue_upper, rng.random_range(0.6..0.95), rng.random_range(0.7..0.95)),
        lower: hsv_to_rgb(hue_lower, rng.random_range(0.4..0.9), rng.random_range(0.3..0.8)),
        head: hsv_to_rgb(0.07, 0.45, rng.random_range(0.5..0.9)),
        stripe_period: [4, 6, 8, 12][rng.random_range(0..4)],
        vertical_stripes: rng.random_bool(0.5),
    }
}

fn camera_tint(camera: u32) -> [f32; 3] {
    let c = camera as f32;
    [0.88 + 0.03 * c, 1.0 - 0.02 * c, 0.92 + 0.015 * c]
}

fn render(
    sig: &Signature,
    (height, width): (usize, usize),
    camera: u32,
    rng: &mut ChaCha8Rng,
) -> RgbImage {
    let noise = Normal::new(0.0f32, 10.0).expect("valid sigma");
    let dx = rng.random_range(-(width as i64 / 16)..=width as i64 / 16);
    let dy = rng.random_range(-(height as i64 / 24)..=height as i64 / 24);
    let background: f32 = rng.random_range(90.0..150.0);
    let tint = camera_tint(camera);
    let (h, w) = (height as f32, width as f32);
    let mut img = RgbImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let px = x as i64 - dx;
            let py = y as i64 - dy;
            let fx = px as f32 / w;
            let fy = py as f32 / h;
            let torso = (0.25..0.75).contains(&fx);
            let color = if torso && (0.22..0.55).contains(&fy) {
                let phase = if sig.vertical_stripes { px } else { py };
                let on = (phase.rem_euclid(sig.stripe_period as i64) as usize) < sig.stripe_period / 2;
                let k = if on { 1.0 } else { 0.7 };
                [sig.upper[0] * k, sig.upper[1] * k, sig.upper[2] * k]
            } else if torso && (0.55..0.95).contains(&fy) {
                sig.lower
            } else if (0.38..0.62).contains(&fx) && (0.08..0.22).contains(&fy) {
                sig.head
            } else {
                [background; 3]
            };
            let mut out = [0u8; 3];
            for c in 0..3 {
                let v = color[c] * tint[c] + noise.sample(rng);
                out[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(out));
        }
    }
    img
}

fn write_jpeg(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = JpegEncoder::new_with_quality(BufWriter::new(file), 95);
    encoder.encode_image(img).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a synthetic dataset under `out` and returns per-split file counts.
pub fn generate_synthetic(out: impl AsRef<Path>, cfg: &SyntheticConfig) -> Result<SyntheticSummary> {
    let out = out.as_ref();
    if cfg.num_ids < 2 {
        return Err(Error::Config(format!(
            "synthetic dataset needs at least 2 identities, got {}",
            cfg.num_ids
        )));
    }
    let (height, width) = cfg.image_size;
    if height < 24 || width < 16 {
        return Err(Error::Config(format!("image size {height}x{width} too small")));
    }
    for split in Split::ALL {
        let dir = out.join(split.dir_name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let signatures: Vec<Signature> = (0..cfg.num_ids)
        .map(|i| signature(i, cfg.num_ids, &mut rng))
        .collect();

    let mut summary = SyntheticSummary {
        train: 0,
        query: 0,
        gallery: 0,
    };
    let mut frame = 0usize;
    let mut emit = |split: Split, id: i64, camera: u32, img: &RgbImage| -> Result<()> {
        frame += 1;
        let id_field = if id < 0 { id.to_string() } else { format!("{id:04}") };
        let name = format!("{id_field}_c{camera}s1_{frame:06}_00.jpg");
        write_jpeg(&out.join(split.dir_name()).join(name), img)
    };

    for (i, sig) in signatures.iter().enumerate() {
        let id = i as i64 + 1;
        for _ in 0..cfg.imgs_per_id {
            let camera = rng.random_range(1..=6);
            let img = render(sig, cfg.image_size, camera, &mut rng);
            emit(Split::Train, id, camera, &img)?;
            summary.train += 1;
        }
        for _ in 0..cfg.query_per_id {
            let img = render(sig, cfg.image_size, 1, &mut rng);
            emit(Split::Query, id, 1, &img)?;
            summary.query += 1;
        }
        for _ in 0..cfg.gallery_per_id {
            let camera = rng.random_range(2..=6);
            let img = render(sig, cfg.image_size, camera, &mut rng);
            emit(Split::Gallery, id, camera, &img)?;
            summary.gallery += 1;
        }
    }
    for j in 0..cfg.junk_gallery {
        let sig = signature(rng.random_range(0..cfg.num_ids), cfg.num_ids, &mut rng);
        let camera = rng.random_range(1..=6);
        let img = render(&sig, cfg.image_size, camera, &mut rng);
        emit(Split::Gallery, if j % 2 == 0 { -1 } else { 0 }, camera, &img)?;
        summary.gallery += 1;
    }
    Ok(summary)
}
