//! Dataset ingestion and the procedural corpus.
//!
//! Images live in memory as [H*W, 3] tensors in [-1, 1]; desk-scale
//! corpora are small enough that nothing is streamed.

use std::fs;
use std::path::Path;

use graincode::{mix_seed, Error, Result, Tensor};
use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dqtn::{read_dqtn, write_dqtn, DqtnDtype};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor<f64>>,
    pub names: Vec<String>,
    /// Per-image, per-region texture mask; present for synth corpora.
    pub busy: Option<Vec<Vec<bool>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Seeded shuffle split; the test set takes `fraction` of the corpus,
    /// rounded, and the remainder trains.
    pub fn split(self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xda7a));
        order.shuffle(&mut rng);
        let n_test = ((n as f64) * fraction).round() as usize;
        let pick = |idx: &[usize]| Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            busy: self
                .busy
                .as_ref()
                .map(|m| idx.iter().map(|&i| m[i].clone()).collect()),
        };
        let test = pick(&order[..n_test]);
        let train = pick(&order[n_test..]);
        (train, test)
    }

    /// Buckets images into `n_labels` classes by texture coverage.
    /// Requires the synth corpus's busy masks.
    pub fn labels(&self, n_labels: usize) -> Result<Vec<usize>> {
        let busy = self.busy.as_ref().ok_or_else(|| {
            Error::Config("class labels need a corpus with stored busy masks".into())
        })?;
        Ok(busy
            .iter()
            .map(|mask| {
                let count = mask.iter().filter(|&&b| b).count();
                (count * n_labels / (mask.len() + 1)).min(n_labels - 1)
            })
            .collect())
    }
}

/// Loads a directory of PNGs or a single .dqtn tensor file, normalized to
/// [-1, 1] at the configured size. Returns the dataset and the number of
/// unreadable files that were skipped.
pub fn ingest(path: &Path, h: usize, w: usize) -> Result<(Dataset, usize)> {
    let (dataset, warnings) = if path.is_dir() {
        ingest_dir(path, h, w)?
    } else {
        (ingest_dqtn(path, h, w)?, 0)
    };
    if dataset.is_empty() {
        return Err(Error::Data(format!(
            "{}: no usable images",
            path.display()
        )));
    }
    Ok((dataset, warnings))
}

fn ingest_dir(dir: &Path, h: usize, w: usize) -> Result<(Dataset, usize)> {
    let mut entries: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut images = Vec::new();
    let mut names = Vec::new();
    let mut warnings = 0usize;
    for path in entries {
        match load_png(&path, h, w) {
            Ok(t) => {
                images.push(t);
                names.push(path.file_name().unwrap().to_string_lossy().into_owned());
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                warnings += 1;
            }
        }
    }
    Ok((
        Dataset {
            images,
            names,
            busy: None,
        },
        warnings,
    ))
}

fn load_png(path: &Path, h: usize, w: usize) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{e}")))?;
    let rgb = img.to_rgb8();
    // center-crop to the target aspect, then resample
    let (iw, ih) = (rgb.width(), rgb.height());
    let scale = (iw as f64 / w as f64).min(ih as f64 / h as f64);
    let cw = ((w as f64 * scale).round() as u32).clamp(1, iw);
    let ch = ((h as f64 * scale).round() as u32).clamp(1, ih);
    let cropped = image::imageops::crop_imm(&rgb, (iw - cw) / 2, (ih - ch) / 2, cw, ch).to_image();
    let resized = image::imageops::resize(&cropped, w as u32, h as u32, FilterType::Triangle);
    let data: Vec<f64> = resized
        .pixels()
        .flat_map(|p| p.0.iter().map(|&b| b as f64 / 127.5 - 1.0))
        .collect();
    Tensor::new(vec![h * w, 3], data)
}

fn ingest_dqtn(path: &Path, h: usize, w: usize) -> Result<Dataset> {
    let t = read_dqtn(path)?;
    if t.dims.len() != 4 || t.dims[3] != 3 {
        return Err(Error::Data(format!(
            "{}: expected dims (N, H, W, 3), got {:?}",
            path.display(),
            t.dims
        )));
    }
    let (n, th, tw) = (t.dims[0], t.dims[1], t.dims[2]);
    if th < h || tw < w {
        return Err(Error::Data(format!(
            "{}: stored {th}x{tw} is smaller than configured {h}x{w}",
            path.display()
        )));
    }
    let (oy, ox) = ((th - h) / 2, (tw - w) / 2);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let src = ((i * th + oy + y) * tw + ox + x) * 3;
                for c in 0..3 {
                    data.push(t.data[src + c].clamp(-1.0, 1.0));
                }
            }
        }
        images.push(Tensor::new(vec![h * w, 3], data)?);
    }
    let names = (0..n).map(|i| format!("tensor{i:04}")).collect();
    Ok(Dataset {
        images,
        names,
        busy: None,
    })
}

/// Writes a dataset as one (N, H, W, 3) f32 tensor file.
pub fn export_dqtn(dataset: &Dataset, h: usize, w: usize, path: &Path) -> Result<()> {
    let mut data = Vec::with_capacity(dataset.len() * h * w * 3);
    for img in &dataset.images {
        data.extend(img.data().iter().copied());
    }
    write_dqtn(path, &[dataset.len(), h, w, 3], DqtnDtype::F32, &data)
}

/// Writes one [H*W, 3] image in [-1, 1] as an 8-bit PNG.
pub fn save_png(path: &Path, h: usize, w: usize, img: &Tensor<f64>) -> Result<()> {
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let px: Vec<u8> = (0..3)
                .map(|c| {
                    let v = img.data()[p * 3 + c];
                    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
                })
                .collect();
            buf.put_pixel(x as u32, y as u32, image::Rgb([px[0], px[1], px[2]]));
        }
    }
    buf.save(path).map_err(|e| Error::Data(format!("{e}")))
}

/// Procedural corpus: smooth gradient backgrounds with high-frequency
/// sinusoidal gratings confined to a seeded subset of regions. The busy
/// mask records which regions carry texture; its coverage is the
/// requested fraction of the region grid, give or take one region.
pub fn synth_corpus(
    n: usize,
    h: usize,
    w: usize,
    region: usize,
    busy_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("synth corpus must hold at least one image".into()));
    }
    if region == 0 || h % region != 0 || w % region != 0 {
        return Err(Error::Config(format!(
            "region size {region} must divide image {h}x{w}"
        )));
    }
    let (rh, rw) = (h / region, w / region);
    let regions = rh * rw;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5e_17));
    let mut images = Vec::with_capacity(n);
    let mut names = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        // smooth background: per-channel affine ramp plus one slow sine
        let base: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let gx: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let gy: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let amp: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..0.25)).collect();
        let phase: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let mut data = vec![0.0f64; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
                for c in 0..3 {
                    let slow = amp[c] * (std::f64::consts::TAU * (fx + fy) / 2.0 + phase[c]).sin();
                    data[(y * w + x) * 3 + c] = base[c] + gx[c] * fx + gy[c] * fy + slow;
                }
            }
        }

        let target = (busy_fraction * regions as f64).round() as i64;
        // jitter keeps per-image counts from being identical, but fully
        // smooth (or fully busy) corpora stay that way
        let jitter = if target == 0 || target == regions as i64 {
            0
        } else {
            rng.gen_range(-1..=1)
        };
        let count = (target + jitter).clamp(0, regions as i64) as usize;
        let mut order: Vec<usize> = (0..regions).collect();
        order.shuffle(&mut rng);
        let mut mask = vec![false; regions];
        for &r in &order[..count] {
            mask[r] = true;
            // square-wave stripes in 2px bands aligned to even pixel
            // coordinates: a 2px cell sees a constant value, any wider
            // cell spans a full period and averages to zero, so only a
            // grain with 2px cells can represent the texture
            let vertical = rng.gen_bool(0.5);
            let flip = rng.gen_bool(0.5);
            let a = rng.gen_range(0.5..0.8);
            let (ry, rx) = (r / rw, r % rw);
            for y in ry * region..(ry + 1) * region {
                for x in rx * region..(rx + 1) * region {
                    let u = if vertical { x } else { y };
                    let band = (u / 2) % 2 == 0;
                    let v = if band != flip { a } else { -a };
                    for c in 0..3 {
                        data[(y * w + x) * 3 + c] += v;
                    }
                }
            }
        }
        for v in &mut data {
            *v = v.clamp(-1.0, 1.0);
        }
        images.push(Tensor::new(vec![h * w, 3], data)?);
        names.push(format!("synth{i:04}"));
        masks.push(mask);
    }
    Ok(Dataset {
        images,
        names,
        busy: Some(masks),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_masked_on_target() {
        let a = synth_corpus(6, 32, 32, 8, 0.3, 11).unwrap();
        let b = synth_corpus(6, 32, 32, 8, 0.3, 11).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(a.busy, b.busy);
        // 16 regions at fraction 0.3: 4.8 rounds to 5, plus one of jitter
        for mask in a.busy.as_ref().unwrap() {
            let count = mask.iter().filter(|&&m| m).count();
            assert!((4..=6).contains(&count), "busy count {count}");
        }
        for img in &a.images {
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_fraction_disables_texture() {
        let d = synth_corpus(3, 16, 16, 8, 0.0, 5).unwrap();
        for mask in d.busy.as_ref().unwrap() {
            assert!(mask.iter().all(|&m| !m));
        }
    }

    #[test]
    fn split_partitions_without_loss() {
        let d = synth_corpus(10, 16, 16, 8, 0.5, 3).unwrap();
        let (train, test) = d.clone().split(0.25, 9);
        assert_eq!(test.len(), 3);
        assert_eq!(train.len(), 7);
        let mut all: Vec<&String> = train.names.iter().chain(test.names.iter()).collect();
        all.sort();
        let mut orig: Vec<&String> = d.names.iter().collect();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn labels_bucket_by_texture_coverage() {
        let mut d = synth_corpus(4, 16, 16, 8, 0.0, 3).unwrap();
        d.busy = Some(vec![
            vec![false; 4],
            vec![true, false, false, false],
            vec![true, true, true, false],
            vec![true; 4],
        ]);
        assert_eq!(d.labels(2).unwrap(), vec![0, 0, 1, 1]);
        let undecorated = Dataset {
            images: d.images.clone(),
            names: d.names.clone(),
            busy: None,
        };
        assert!(undecorated.labels(2).is_err());
    }

    #[test]
    fn dqtn_corpus_round_trips_through_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.dqtn");
        let d = synth_corpus(4, 16, 16, 8, 0.4, 2).unwrap();
        export_dqtn(&d, 16, 16, &path).unwrap();
        let (back, warnings) = ingest(&path, 16, 16).unwrap();
        assert_eq!(warnings, 0);
        assert_eq!(back.len(), 4);
        for (a, b) in d.images.iter().zip(&back.images) {
            let worst = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            // corpus exports as f32
            assert!(worst < 1e-6, "worst {worst}");
        }
    }

    #[test]
    fn png_directory_skips_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_corpus(3, 16, 16, 8, 0.4, 2).unwrap();
        for (i, img) in d.images.iter().enumerate() {
            save_png(&dir.path().join(format!("img{i}.png")), 16, 16, img).unwrap();
        }
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let (set, warnings) = ingest(dir.path(), 16, 16).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(warnings, 1);
        // 8-bit quantization is the only loss on a size match
        for (a, b) in d.images.iter().zip(&set.images) {
            let worst = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 1.0 / 127.0, "worst {worst}");
        }
    }

    #[test]
    fn empty_directory_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest(dir.path(), 16, 16),
            Err(Error::Data(_))
        ));
    }
}
