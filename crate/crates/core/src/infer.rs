//! Retrieval features and spatial response maps.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::imageops::FilterType;
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{load_image, stack_images, ImageRecord, ImageTensor};
use crate::error::{Error, Result};
use crate::model::{FeatureId, Mgn};
use crate::ops::channel_norm;

const FORMAT_VERSION: u32 = 1;
pub const FEATURE_BIN_SUFFIX: &str = ".feat.bin";
pub const FEATURE_JSON_SUFFIX: &str = ".feat.json";

/// Row-major `[rows × dim]` features, one row per image record.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub data: Vec<f32>,
    pub records: Vec<ImageRecord>,
    /// Reduced features in concatenation order.
    pub feature_order: Vec<FeatureId>,
    /// Architecture hash of the producing model.
    pub model_hash: String,
    /// Weights hash of the producing checkpoint, when known.
    pub checkpoint_hash: Option<String>,
    /// Hash of the training configuration behind the checkpoint.
    pub config_hash: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureIndex {
    version: u32,
    rows: usize,
    dim: usize,
    data_file: String,
    model_hash: String,
    #[serde(default)]
    checkpoint_hash: Option<String>,
    #[serde(default)]
    config_hash: Option<String>,
    feature_order: Vec<FeatureId>,
    records: Vec<ImageRecord>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.records.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (self.rows(), self.dim), &candle_core::Device::Cpu)?)
    }

    /// Writes `<dir>/<name>.feat.bin` (little-endian f32) and
    /// `<dir>/<name>.feat.json`; returns the JSON path.
    pub fn save(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin_name = format!("{name}{FEATURE_BIN_SUFFIX}");
        let bin = dir.join(&bin_name);
        let mut w = BufWriter::new(fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?);
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bin, e))?;
        }
        w.flush().map_err(|e| Error::io(&bin, e))?;

        let index = FeatureIndex {
            version: FORMAT_VERSION,
            rows: self.rows(),
            dim: self.dim,
            data_file: bin_name,
            model_hash: self.model_hash.clone(),
            checkpoint_hash: self.checkpoint_hash.clone(),
            config_hash: self.config_hash.clone(),
            feature_order: self.feature_order.clone(),
            records: self.records.clone(),
        };
        let json = dir.join(format!("{name}{FEATURE_JSON_SUFFIX}"));
        fs::write(&json, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&json, e))?;
        Ok(json)
    }

    /// Reads a matrix from its `.feat.json` index.
    pub fn load(json: &Path) -> Result<Self> {
        let text = fs::read_to_string(json).map_err(|e| Error::io(json, e))?;
        let index: FeatureIndex =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", json.display())))?;
        if index.version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported feature format version {}",
                json.display(),
                index.version
            )));
        }
        if index.records.len() != index.rows {
            return Err(Error::Data(format!("{}: row count does not match records", json.display())));
        }
        let bin = json.parent().unwrap_or(Path::new(".")).join(&index.data_file);
        let mut bytes = Vec::new();
        BufReader::new(fs::File::open(&bin).map_err(|e| Error::io(&bin, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != index.rows * index.dim * 4 {
            return Err(Error::Data(format!(
                "{}: expected {} values, file holds {} bytes",
                bin.display(),
                index.rows * index.dim,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(FeatureMatrix {
            dim: index.dim,
            data,
            records: index.records,
            feature_order: index.feature_order,
            model_hash: index.model_hash,
            checkpoint_hash: index.checkpoint_hash,
            config_hash: index.config_hash,
        })
    }
}

/// Mirrors `[N, C, H, W]` images left-right.
pub fn flip_batch(images: &Tensor) -> Result<Tensor> {
    let w = images.dim(3)?;
    let idx: Vec<u32> = (0..w as u32).rev().collect();
    let idx = Tensor::from_vec(idx, w, images.device())?;
    Ok(images.index_select(&idx, 3)?)
}

/// Flip-averaged retrieval embedding `[N, D]` of a batch, in inference mode.
pub fn embed(model: &Mgn, images: &Tensor) -> Result<Tensor> {
    let plain = model.forward(images)?.concat()?;
    let flipped = model.forward(&flip_batch(images)?)?.concat()?;
    Ok(((plain + flipped)? * 0.5)?)
}

#[derive(Debug, Clone)]
pub struct ExtractOptions {
    /// Images decoded per chunk.
    pub batch_size: usize,
    pub checkpoint_hash: Option<String>,
    pub config_hash: Option<String>,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            batch_size: 32,
            checkpoint_hash: None,
            config_hash: None,
        }
    }
}

fn empty_matrix(model: &Mgn, records: Vec<ImageRecord>, opts: &ExtractOptions) -> FeatureMatrix {
    FeatureMatrix {
        dim: model.config().feature_dim(),
        data: Vec::new(),
        records,
        feature_order: model.feature_ids().into_iter().filter(FeatureId::is_reduced).collect(),
        model_hash: model.config().hash(),
        checkpoint_hash: opts.checkpoint_hash.clone(),
        config_hash: opts.config_hash.clone(),
    }
}

/// Flip-averaged features of preprocessed images.
///
/// Every image goes through the network on its own: matrix kernels sum in
/// an order that depends on the number of rows, so batching would make a
/// row depend on its batch mates in the last bits.
pub fn extract_images(model: &Mgn, images: &[ImageTensor]) -> Result<Vec<f32>> {
    let mut data = Vec::with_capacity(images.len() * model.config().feature_dim());
    for image in images {
        let batch = stack_images(std::slice::from_ref(image), model.device())?;
        let row = embed(model, &batch)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        data.extend(row);
    }
    Ok(data)
}

/// Feature matrix of `records`, rows in record order.
pub fn extract(model: &Mgn, records: &[ImageRecord], opts: &ExtractOptions) -> Result<FeatureMatrix> {
    let mut out = empty_matrix(model, records.to_vec(), opts);
    let size = model.config().input_size;
    for chunk in records.chunks(opts.batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|r| load_image(&r.image_path, size, &model.config().normalization))
            .collect::<Result<Vec<_>>>()?;
        out.data.extend(extract_images(model, &images)?);
    }
    Ok(out)
}

/// Per-location L2 norm of a branch's output map.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub branch: String,
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width` intensities.
    pub values: Vec<f32>,
    pub source: Option<PathBuf>,
}

impl ResponseMap {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// Response map of `branch` for one preprocessed image.
pub fn response_map(model: &Mgn, image: &ImageTensor, branch: &str) -> Result<ResponseMap> {
    if model.config().branch(branch).is_none() {
        return Err(Error::Config(format!(
            "unknown branch `{branch}`; valid branches: {}",
            model.config().branch_names().join(", ")
        )));
    }
    let batch = stack_images(std::slice::from_ref(image), model.device())?;
    let bundle = model.forward(&batch)?;
    let map = &bundle
        .branches
        .iter()
        .find(|b| b.name == branch)
        .expect("branch checked above")
        .map;
    let (_, height, width, _) = map.dims4()?;
    let values = channel_norm(map)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(ResponseMap {
        branch: branch.to_string(),
        height,
        width,
        values,
        source: None,
    })
}

/// Loads an image file and computes the response map of `branch`.
pub fn response_map_for_file(model: &Mgn, path: &Path, branch: &str) -> Result<ResponseMap> {
    let image = load_image(path, model.config().input_size, &model.config().normalization)?;
    let mut map = response_map(model, &image, branch)?;
    map.source = Some(path.to_path_buf());
    Ok(map)
}

fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let channel = |center: f32| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [channel(3.0), channel(2.0), channel(1.0)]
}

/// Upsamples the map bilinearly to `background`'s size, normalizes it by
/// its maximum, colors it with a jet colormap and blends it over the
/// background with weight `alpha`.
pub fn render_heatmap(map: &ResponseMap, background: &RgbImage, alpha: f32) -> RgbImage {
    let grid: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(map.width as u32, map.height as u32, map.values.clone()).expect("grid size matches");
    let (w, h) = background.dimensions();
    let up = image::imageops::resize(&grid, w, h, FilterType::Triangle);
    let max = map.values.iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let alpha = alpha.clamp(0.0, 1.0);
    RgbImage::from_fn(w, h, |x, y| {
        let heat = jet(up.get_pixel(x, y)[0] * scale);
        let bg = background.get_pixel(x, y);
        Rgb(std::array::from_fn(|c| {
            ((1.0 - alpha) * bg[c] as f32 + alpha * 255.0 * heat[c]).round().clamp(0.0, 255.0) as u8
        }))
    })
}

/// Renders the heatmap of `map` over its source image (resized to the
/// network input) and writes it as PNG.
pub fn write_heatmap(map: &ResponseMap, size: (usize, usize), alpha: f32, out: &Path) -> Result<()> {
    let background = match &map.source {
        Some(path) => image::open(path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .resize_exact(size.1 as u32, size.0 as u32, FilterType::Triangle)
            .to_rgb8(),
        None => RgbImage::new(size.1 as u32, size.0 as u32),
    };
    let img = render_heatmap(map, &background, alpha);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(out).map_err(|source| Error::Image {
        path: out.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Identity, Split};
    use crate::model::{build_model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> Mgn {
        build_model(&ModelConfig {
            input_size: (96, 32),
            ..ModelConfig::tiny()
        })
        .unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(h, w, (0..3 * h * w).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn symmetric(img: &ImageTensor) -> ImageTensor {
        let mut out = img.clone();
        for row in out.data.chunks_exact_mut(img.width) {
            for x in 0..img.width / 2 {
                row[img.width - 1 - x] = row[x];
            }
        }
        out
    }

    #[test]
    fn symmetric_image_flip_average_equals_plain_feature() {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = symmetric(&random_image(&mut rng, 96, 32));
        let batch = stack_images(std::slice::from_ref(&img), model.device()).unwrap();
        let plain = model.forward(&batch).unwrap().concat().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let avg = embed(&model, &batch).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(plain, avg);
    }

    #[test]
    fn batch_size_does_not_change_rows() {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let images: Vec<ImageTensor> = (0..6).map(|_| random_image(&mut rng, 96, 32)).collect();
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<ImageRecord> = images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let path = dir.path().join(format!("{:04}_c1s1_000001_00.png", i + 1));
                let rgb = RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
                    let at = |c: usize| img.data[c * img.height * img.width + y as usize * img.width + x as usize];
                    Rgb(std::array::from_fn(|c| ((at(c) + 2.0) * 60.0) as u8))
                });
                rgb.save(&path).unwrap();
                ImageRecord {
                    image_path: path,
                    identity: Identity::Person(i as u32 + 1),
                    camera: 1,
                    split: Split::Query,
                }
            })
            .collect();
        let one = extract(&model, &records, &ExtractOptions { batch_size: 1, ..Default::default() }).unwrap();
        let all = extract(&model, &records, &ExtractOptions { batch_size: 32, ..Default::default() }).unwrap();
        assert_eq!(one.data, all.data);
        assert_eq!(one, extract(&model, &records, &ExtractOptions::default()).unwrap());
    }

    #[test]
    fn feature_files_round_trip_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rec = |i: u32| ImageRecord {
            image_path: format!("{i:04}_c1s1_000001_00.jpg").into(),
            identity: Identity::Person(i),
            camera: 1,
            split: Split::Query,
        };
        let m = FeatureMatrix {
            dim: 3,
            data: (0..6).map(|_| rng.random::<f32>() - 0.5).collect(),
            records: vec![rec(1), rec(2)],
            feature_order: vec!["f_g@global".parse().unwrap()],
            model_hash: "abc".into(),
            checkpoint_hash: Some("def".into()),
            config_hash: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let json = m.save(dir.path(), "query").unwrap();
        assert!(dir.path().join("query.feat.bin").is_file());
        assert_eq!(FeatureMatrix::load(&json).unwrap(), m);
    }

    #[test]
    fn empty_record_list_gives_empty_matrix() {
        let model = small_model();
        let m = extract(&model, &[], &ExtractOptions::default()).unwrap();
        assert_eq!((m.rows(), m.dim), (0, model.config().feature_dim()));
    }

    #[test]
    fn response_map_is_per_location_norm() {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 96, 32);
        let map = response_map(&model, &img, "part2").unwrap();
        let batch = stack_images(std::slice::from_ref(&img), model.device()).unwrap();
        let bundle = model.forward(&batch).unwrap();
        let fmap = bundle.branches[1].map.squeeze(0).unwrap().to_vec3::<f32>().unwrap();
        assert_eq!((map.height, map.width), (fmap.len(), fmap[0].len()));
        for (y, row) in fmap.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                let norm = v.iter().map(|c| (*c as f64).powi(2)).sum::<f64>().sqrt();
                assert!((map.at(y, x) as f64 - norm).abs() < 1e-5 * norm.max(1.0));
            }
        }
        let err = response_map(&model, &img, "part9").unwrap_err();
        assert!(err.to_string().contains("global, part2, part3"));
    }

    #[test]
    fn zero_weights_give_zero_map_and_uniform_heat() {
        let model = small_model();
        model.params().zero_all().unwrap();
        let img = random_image(&mut ChaCha8Rng::seed_from_u64(5), 96, 32);
        let map = response_map(&model, &img, "global").unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
        let heat = render_heatmap(&map, &RgbImage::new(32, 96), 1.0);
        let first = *heat.get_pixel(0, 0);
        assert!(heat.pixels().all(|p| *p == first));
    }
}
