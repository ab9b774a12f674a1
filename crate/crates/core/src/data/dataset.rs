//! Prepared image collections: synthetic, manifest-listed, or both, with an
//! optional on-disk cache of the derived priors keyed by content.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde_json::json;
use sha2::{Digest, Sha256};
use tsgl_tensor::{Scalar, Tensor};

use super::image::{EdgeMap, RgbImage};
use super::inputs::{PrepParams, Sample};
use super::synth::synth_image;
use crate::container::Container;
use crate::error::{invalid, Result};

pub const CACHE_ENV: &str = "TSG_CACHE";
const CACHE_KIND: &[u8; 4] = b"CACH";

/// Where the images of a split come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// `count` generated images with seeds `first_seed..first_seed+count`.
    Synthetic { count: usize, first_seed: u64 },
    /// Newline-delimited image paths; relative paths resolve against the manifest's directory.
    Manifest(PathBuf),
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    samples: Vec<Sample<T>>,
}

fn manifest_paths(path: &Path) -> Result<Vec<PathBuf>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let paths: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect();
    if paths.is_empty() {
        return Err(invalid(format!("manifest {} lists no images", path.display())));
    }
    Ok(paths)
}

/// Loads an image and resamples it to `size×size`.
pub fn load_resized<T: Scalar>(path: &Path, size: usize) -> Result<RgbImage<T>> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.dimensions() == (size as u32, size as u32) {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    let raw = img.into_raw();
    RgbImage::new(Tensor::from_fn(&[3, size, size], |i| T::lit(raw[(i[1] * size + i[2]) * 3 + i[0]] as f64 / 255.0)))
}

fn cache_key<T: Scalar>(sources: &[Source], size: usize, prep: &PrepParams) -> Result<String> {
    let mut src = Vec::new();
    for s in sources {
        src.push(match s {
            Source::Synthetic { count, first_seed } => json!({"synthetic": [count, first_seed]}),
            Source::Manifest(p) => {
                let files: Vec<_> = manifest_paths(p)?
                    .into_iter()
                    .map(|f| {
                        let len = fs::metadata(&f).map(|m| m.len()).unwrap_or(0);
                        json!([f.to_string_lossy(), len])
                    })
                    .collect();
                json!({"manifest": files})
            }
        });
    }
    let desc = json!({
        "version": 1,
        "dtype": T::DTYPE.name(),
        "size": size,
        "sources": src,
        "prep": serde_json::to_value(prep).map_err(|e| invalid(e.to_string()))?,
    });
    let digest = Sha256::digest(desc.to_string().as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl<T: Scalar> Dataset<T> {
    pub fn from_samples(samples: Vec<Sample<T>>) -> Self {
        Dataset { samples }
    }

    /// Builds the split, consulting the `TSG_CACHE` directory when that variable is set.
    pub fn build(sources: &[Source], size: usize, prep: &PrepParams) -> Result<Self> {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => Self::build_cached(sources, size, prep, Path::new(&dir)),
            _ => Self::build_uncached(sources, size, prep),
        }
    }

    pub fn build_uncached(sources: &[Source], size: usize, prep: &PrepParams) -> Result<Self> {
        let mut samples = Vec::new();
        for s in sources {
            match s {
                Source::Synthetic { count, first_seed } => {
                    for i in 0..*count as u64 {
                        samples.push(Sample::prepare(synth_image(size, first_seed + i), prep)?);
                    }
                }
                Source::Manifest(p) => {
                    for f in manifest_paths(p)? {
                        samples.push(Sample::prepare(load_resized(&f, size)?, prep)?);
                    }
                }
            }
        }
        if samples.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        Ok(Dataset { samples })
    }

    pub fn build_cached(sources: &[Source], size: usize, prep: &PrepParams, dir: &Path) -> Result<Self> {
        let path = dir.join(format!("{}.tsgl", cache_key::<T>(sources, size, prep)?));
        if let Ok(c) = Container::<T>::load(&path, CACHE_KIND) {
            if let Ok(ds) = Self::from_container(c) {
                return Ok(ds);
            }
        }
        let ds = Self::build_uncached(sources, size, prep)?;
        ds.to_container().save(&path)?;
        Ok(ds)
    }

    fn to_container(&self) -> Container<T> {
        let mut c = Container::new(CACHE_KIND, json!({"count": self.samples.len()}));
        for (i, s) in self.samples.iter().enumerate() {
            c.push(format!("{i}.image"), s.image.tensor().clone());
            c.push(format!("{i}.edges"), s.edges.tensor().clone());
            c.push(format!("{i}.prior"), s.prior.clone());
            c.push(format!("{i}.smoothed"), s.smoothed.tensor().clone());
        }
        c
    }

    fn from_container(mut c: Container<T>) -> Result<Self> {
        let n = c.meta["count"].as_u64().ok_or_else(|| invalid("cache without count"))? as usize;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            samples.push(Sample {
                image: RgbImage::new(c.take(&format!("{i}.image"))?)?,
                edges: EdgeMap::new(c.take(&format!("{i}.edges"))?)?,
                prior: c.take(&format!("{i}.prior"))?,
                smoothed: RgbImage::new(c.take(&format!("{i}.smoothed"))?)?,
            });
        }
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> &Sample<T> {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    /// First `n` samples as a new dataset.
    pub fn head(&self, n: usize) -> Self {
        Dataset { samples: self.samples[..n.min(self.samples.len())].to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip_matches_fresh_build() {
        let dir = tempfile::tempdir().unwrap();
        let src = [Source::Synthetic { count: 3, first_seed: 7 }];
        let prep = PrepParams::default();
        let a = Dataset::<f32>::build_cached(&src, 32, &prep, dir.path()).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        let b = Dataset::<f32>::build_cached(&src, 32, &prep, dir.path()).unwrap();
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.edges, y.edges);
            assert_eq!(x.prior, y.prior);
            assert_eq!(x.smoothed, y.smoothed);
        }
    }

    #[test]
    fn manifest_images_are_resized() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::<f32>::from_fn(48, 40, |c, y, x| ((c + y + x) % 7) as f64 / 7.0).unwrap();
        img.save_png(&dir.path().join("a.png")).unwrap();
        fs::write(dir.path().join("list.txt"), "a.png\n\n").unwrap();
        let ds = Dataset::<f32>::build_uncached(&[Source::Manifest(dir.path().join("list.txt"))], 32, &PrepParams::default())
            .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.get(0).image.tensor().shape(), &[3, 32, 32]);
    }
}
