use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{rng_from_seed, sha256_hex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Where a dataset split lives on disk and which classes it holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub root: PathBuf,
    pub split: Split,
    pub class_names: Vec<String>,
}

impl DatasetSpec {
    /// Build a spec by listing the class subdirectories of `root`
    /// (lexicographic order).
    pub fn discover(name: impl Into<String>, root: impl Into<PathBuf>, split: Split) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::Dataset(format!(
                "dataset root {} does not exist",
                root.display()
            )));
        }
        let mut class_names = Vec::new();
        for entry in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
            let entry = entry.map_err(|e| Error::io(&root, e))?;
            if entry.path().is_dir() {
                class_names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        class_names.sort();
        let spec = Self {
            name: name.into(),
            root,
            split,
            class_names,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Dataset(format!("dataset `{}` has no classes", self.name)));
        }
        let mut sorted = self.class_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.class_names.len() {
            return Err(Error::Dataset(format!(
                "dataset `{}` has duplicate class names",
                self.name
            )));
        }
        Ok(())
    }
}

/// One RGB image, stored row-major `H × W × 3` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pixels: Vec<f32>,
    pub size: usize,
    pub class_id: usize,
}

impl Sample {
    pub fn new(pixels: Vec<f32>, size: usize, class_id: usize) -> Result<Self> {
        if pixels.len() != size * size * 3 {
            return Err(Error::Shape(format!(
                "sample has {} values, expected {}x{}x3",
                pixels.len(),
                size,
                size
            )));
        }
        Ok(Self {
            pixels,
            size,
            class_id,
        })
    }

    /// Channel-first copy `3 × H × W`.
    pub fn chw(&self) -> Vec<f32> {
        let hw = self.size * self.size;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| quantize(v)).collect();
        image::RgbImage::from_raw(self.size as u32, self.size as u32, bytes)
            .expect("pixel buffer matches dimensions")
    }

    fn from_rgb8(img: &image::RgbImage, class_id: usize) -> Self {
        let pixels = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self {
            pixels,
            size: img.width() as usize,
            class_id,
        }
    }

    pub fn resized(&self, size: usize) -> Self {
        if size == self.size {
            return self.clone();
        }
        let img = image::imageops::resize(
            &self.to_rgb8(),
            size as u32,
            size as u32,
            image::imageops::FilterType::Triangle,
        );
        Self::from_rgb8(&img, self.class_id)
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// An immutable, indexable collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub class_names: Vec<String>,
    pub image_size: usize,
    samples: Vec<Sample>,
    by_class: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        class_names: Vec<String>,
        image_size: usize,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let mut by_class = vec![Vec::new(); class_names.len()];
        for (i, s) in samples.iter().enumerate() {
            if s.class_id >= class_names.len() {
                return Err(Error::Dataset(format!(
                    "sample {i} has class id {} but only {} classes exist",
                    s.class_id,
                    class_names.len()
                )));
            }
            if s.size != image_size {
                return Err(Error::Shape(format!(
                    "sample {i} is {}px, dataset is {image_size}px",
                    s.size
                )));
            }
            by_class[s.class_id].push(i);
        }
        Ok(Self {
            name: name.into(),
            split,
            class_names,
            image_size,
            samples,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    /// Sample indices of one class, in storage order.
    pub fn class_indices(&self, class_id: usize) -> &[usize] {
        &self.by_class[class_id]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class_id).collect()
    }

    /// Batch tensor `(B, 3, H, W)` for the given sample indices.
    pub fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for &i in indices {
            data.extend(self.samples[i].chw());
        }
        Ok(Tensor::from_vec(data, (indices.len(), 3, s, s), device)?.to_dtype(dtype)?)
    }

    /// Copy with every image resampled to `size`.
    pub fn resized(&self, size: usize) -> Self {
        if size == self.image_size {
            return self.clone();
        }
        let samples = self.samples.iter().map(|s| s.resized(size)).collect();
        Self {
            image_size: size,
            samples,
            ..self.clone()
        }
    }

    /// Deterministic per-class split: the first `floor(fraction · n_c)`
    /// samples of each class (at least one on each side) go to train.
    pub fn split_by_fraction(&self, train_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "train fraction {train_fraction} must lie in (0, 1)"
            )));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (c, idx) in self.by_class.iter().enumerate() {
            if idx.len() < 2 {
                return Err(Error::Dataset(format!(
                    "class `{}` needs at least 2 samples to split",
                    self.class_names[c]
                )));
            }
            let n_train = ((idx.len() as f64 * train_fraction).floor() as usize).clamp(1, idx.len() - 1);
            for (k, &i) in idx.iter().enumerate() {
                if k < n_train {
                    train.push(self.samples[i].clone());
                } else {
                    test.push(self.samples[i].clone());
                }
            }
        }
        Ok((
            Dataset::new(&self.name, Split::Train, self.class_names.clone(), self.image_size, train)?,
            Dataset::new(&self.name, Split::Test, self.class_names.clone(), self.image_size, test)?,
        ))
    }

    /// Copy whose labels are a random permutation of the original label
    /// list: class sizes are kept, the link between image and class is not.
    pub fn with_shuffled_labels(&self, seed: u64) -> Result<Self> {
        let mut labels = self.labels();
        labels.shuffle(&mut rng_from_seed(seed));
        let samples = self
            .samples
            .iter()
            .zip(labels)
            .map(|(s, class_id)| Sample { class_id, ..s.clone() })
            .collect();
        Dataset::new(format!("{}-shuffled", self.name), self.split, self.class_names.clone(), self.image_size, samples)
    }

    /// SHA-256 over the 8-bit quantised pixels in storage order.
    pub fn content_checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(self.samples.len() * 3 * self.image_size * self.image_size);
        for s in &self.samples {
            bytes.push(s.class_id as u8);
            bytes.extend(s.pixels.iter().map(|&v| quantize(v)));
        }
        sha256_hex(&bytes)
    }

    /// Write as `root/<class>/<index>.png`.
    pub fn write_images(&self, root: &Path) -> Result<()> {
        for name in &self.class_names {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (i, s) in self.samples.iter().enumerate() {
            let path = root
                .join(&self.class_names[s.class_id])
                .join(format!("{i:05}.png"));
            s.to_rgb8()
                .save(&path)
                .map_err(|e| Error::Dataset(format!("cannot write {}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Load a class-per-subdirectory image tree. Images are resized to
/// `image_size × image_size` RGB and scaled to `[0, 1]`. Unreadable files are
/// skipped with a warning; a class left with no images is an error.
pub fn load_dataset(spec: &DatasetSpec, image_size: usize) -> Result<Dataset> {
    if !spec.root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} does not exist",
            spec.root.display()
        )));
    }
    spec.validate()?;
    let mut samples = Vec::new();
    for (class_id, class) in spec.class_names.iter().enumerate() {
        let dir = spec.root.join(class);
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class `{class}` contains no images")));
        }
        let before = samples.len();
        for file in files {
            match image::open(&file) {
                Ok(img) => {
                    let rgb = img.to_rgb8();
                    let rgb = if rgb.width() as usize == image_size && rgb.height() as usize == image_size {
                        rgb
                    } else {
                        image::imageops::resize(
                            &rgb,
                            image_size as u32,
                            image_size as u32,
                            image::imageops::FilterType::Triangle,
                        )
                    };
                    samples.push(Sample::from_rgb8(&rgb, class_id));
                }
                Err(e) => warn!("skipping unreadable image {}: {e}", file.display()),
            }
        }
        if samples.len() == before {
            return Err(Error::Dataset(format!(
                "class `{class}` has no readable images"
            )));
        }
    }
    Dataset::new(
        spec.name.clone(),
        spec.split,
        spec.class_names.clone(),
        image_size,
        samples,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, size: u32, value: u8) {
        image::RgbImage::from_pixel(size, size, image::Rgb([value, value / 2, 255 - value]))
            .save(path)
            .unwrap();
    }

    fn make_tree(root: &Path, classes: &[(&str, usize)], size: u32) {
        for (name, n) in classes {
            let dir = root.join(name);
            fs::create_dir_all(&dir).unwrap();
            for i in 0..*n {
                write_png(&dir.join(format!("{i}.png")), size, (i * 40) as u8);
            }
        }
    }

    #[test]
    fn loads_two_classes_of_three() {
        let tmp = tempfile::tempdir().unwrap();
        make_tree(tmp.path(), &[("b_class", 3), ("a_class", 3)], 16);
        let spec = DatasetSpec::discover("toy", tmp.path(), Split::Train).unwrap();
        assert_eq!(spec.class_names, vec!["a_class", "b_class"]);
        let ds = load_dataset(&spec, 16).unwrap();
        assert_eq!(ds.len(), 6);
        let mut ids = ds.labels();
        ids.dedup();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn resizes_and_scales() {
        let tmp = tempfile::tempdir().unwrap();
        make_tree(tmp.path(), &[("only", 1), ("other", 1)], 100);
        let spec = DatasetSpec::discover("toy", tmp.path(), Split::Train).unwrap();
        let ds = load_dataset(&spec, 64).unwrap();
        let s = ds.get(0);
        assert_eq!(s.size, 64);
        assert_eq!(s.pixels.len(), 64 * 64 * 3);
        assert!(s.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn empty_class_is_fatal_and_named() {
        let tmp = tempfile::tempdir().unwrap();
        make_tree(tmp.path(), &[("full", 2)], 8);
        fs::create_dir_all(tmp.path().join("hollow")).unwrap();
        let spec = DatasetSpec::discover("toy", tmp.path(), Split::Train).unwrap();
        let err = load_dataset(&spec, 8).unwrap_err().to_string();
        assert!(err.contains("hollow"), "{err}");
    }

    #[test]
    fn unreadable_image_is_skipped() {
        let tmp = tempfile::tempdir().unwrap();
        make_tree(tmp.path(), &[("a", 2), ("b", 1)], 8);
        fs::write(tmp.path().join("a").join("broken.png"), b"not a png").unwrap();
        let spec = DatasetSpec::discover("toy", tmp.path(), Split::Train).unwrap();
        assert_eq!(load_dataset(&spec, 8).unwrap().len(), 3);
        // a class whose only file is broken becomes empty
        fs::remove_file(tmp.path().join("b").join("0.png")).unwrap();
        fs::write(tmp.path().join("b").join("bad.jpg"), b"junk").unwrap();
        let err = load_dataset(&spec, 8).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
    }

    #[test]
    fn missing_root_is_fatal() {
        let spec = DatasetSpec {
            name: "x".into(),
            root: "/definitely/not/here".into(),
            split: Split::Test,
            class_names: vec!["a".into()],
        };
        assert!(load_dataset(&spec, 8).is_err());
        assert!(DatasetSpec::discover("x", "/definitely/not/here", Split::Test).is_err());
    }

    #[test]
    fn batch_is_channel_first() {
        let px: Vec<f32> = (0..2 * 2 * 3).map(|v| v as f32 / 12.0).collect();
        let ds = Dataset::new("t", Split::Train, vec!["c".into()], 2, vec![Sample::new(px.clone(), 2, 0).unwrap()]).unwrap();
        let t = ds.batch(&[0], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 2]);
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v[0], px[0]);
        assert_eq!(v[1], px[3]);
        assert_eq!(v[4], px[1]);
    }
}
