use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::data::tensor_file::{ArrayData, RawArray};
use crate::error::{bail, Error, Result};
use crate::numerics::{Shape4, Tensor4};
use crate::provenance::Provenance;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// Separate QTEN image and label arrays.
    #[default]
    Qten,
    /// CIFAR-10 binary batch: 1 label byte followed by 3072 pixel bytes.
    Cifar10Bin,
}

/// Marks a dataset as generated by an attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMetadata {
    pub config: AttackConfig,
    /// Fingerprint of the classifier the attack differentiated through.
    pub source_classifier: String,
    /// Name of the natural dataset the adversaries were built from.
    pub source_dataset: String,
}

/// Sidecar JSON describing a dataset on disk. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(default)]
    pub format: DatasetFormat,
    /// (channels, height, width)
    pub sample_shape: [usize; 3],
    #[serde(default = "unit_range")]
    pub pixel_range: [f64; 2],
    pub images: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub num_samples: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackMetadata>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

fn unit_range() -> [f64; 2] {
    [0.0, 1.0]
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Pixel storage used when writing a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelEncoding {
    /// Rounded to 8-bit; read back scaled by 1/255.
    U8,
    /// Stored as `f32`, preserving small perturbations.
    F32,
}

/// Images in `[0, 1]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Tensor4,
    pub labels: Vec<usize>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Dataset {
    pub fn new(name: &str, images: Tensor4, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let s = images.shape();
        if labels.len() != s.n {
            bail!(Shape, "{} labels for {} images", labels.len(), s.n);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            bail!(InvalidArgument, "label {bad} outside [0, {num_classes})");
        }
        if let Some(&bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(InvalidArgument, "pixel value {bad} outside [0, 1]");
        }
        Ok(Self {
            manifest: DatasetManifest {
                name: name.to_string(),
                format: DatasetFormat::Qten,
                sample_shape: [s.c, s.h, s.w],
                pixel_range: unit_range(),
                images: PathBuf::from(format!("{name}.images.qten")),
                labels: Some(PathBuf::from(format!("{name}.labels.qten"))),
                num_samples: s.n,
                num_classes,
                split: None,
                attack: None,
                provenance: None,
            },
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    /// Reads the manifest at `path` and the arrays it points to.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::load_with(manifest, base)
    }

    pub fn load_with(manifest: DatasetManifest, base: &Path) -> Result<Self> {
        let [c, h, w] = manifest.sample_shape;
        let n = manifest.num_samples;
        let item = c * h * w;
        let images_path = resolve(base, &manifest.images);
        let (mut pixels, labels) = match manifest.format {
            DatasetFormat::Qten => {
                let raw = RawArray::read(&images_path)?;
                let dtype_size = raw.data.dtype().size() as u64;
                if raw.dims != [n as u64, c as u64, h as u64, w as u64] {
                    return Err(Error::PayloadSize {
                        path: images_path,
                        expected: (n * item) as u64 * dtype_size,
                        actual: raw.data.len() as u64 * dtype_size,
                    });
                }
                let pixels = decode_pixels(&images_path, &raw, RawArray::header_len(4), &manifest)?;
                let Some(labels_rel) = &manifest.labels else {
                    return Err(Error::Format {
                        path: images_path,
                        reason: "manifest has no labels file".into(),
                    });
                };
                let labels_path = resolve(base, labels_rel);
                let raw = RawArray::read(&labels_path)?;
                let labels: Vec<u64> = match &raw.data {
                    ArrayData::U8(v) => v.iter().map(|&l| l as u64).collect(),
                    ArrayData::U32(v) => v.iter().map(|&l| l as u64).collect(),
                    ArrayData::F32(_) => {
                        return Err(Error::Format {
                            path: labels_path,
                            reason: "labels must be u8 or u32".into(),
                        })
                    }
                };
                if labels.len() != n {
                    let size = raw.data.dtype().size() as u64;
                    return Err(Error::PayloadSize {
                        path: labels_path,
                        expected: n as u64 * size,
                        actual: labels.len() as u64 * size,
                    });
                }
                let size = raw.data.dtype().size() as u64;
                let header = RawArray::header_len(raw.dims.len()) as u64;
                let labels = check_labels(&labels_path, labels, manifest.num_classes, |i| {
                    header + i as u64 * size
                })?;
                (pixels, labels)
            }
            DatasetFormat::Cifar10Bin => {
                if [c, h, w] != [3, 32, 32] {
                    bail!(Config, "cifar10-bin requires sample shape [3, 32, 32]");
                }
                let bytes = fs::read(&images_path).map_err(|e| Error::io(&images_path, e))?;
                let record = 1 + item;
                let expected = (n * record) as u64;
                if bytes.len() as u64 != expected {
                    return Err(Error::PayloadSize {
                        path: images_path,
                        expected,
                        actual: bytes.len() as u64,
                    });
                }
                let mut pixels = Vec::with_capacity(n * item);
                let mut labels = Vec::with_capacity(n);
                for rec in bytes.chunks_exact(record) {
                    labels.push(rec[0] as u64);
                    pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
                }
                let labels =
                    check_labels(&images_path, labels, manifest.num_classes, |i| (i * record) as u64)?;
                (pixels, labels)
            }
        };
        let mut shape = Shape4::new(n, c, h, w);
        if c == 1 {
            pixels = triple_channels(&pixels, h * w);
            shape.c = 3;
        }
        let images = Tensor4::new(shape, pixels)?;
        Ok(Self {
            manifest,
            images,
            labels,
        })
    }

    /// Writes arrays next to `manifest_path` and the manifest itself.
    pub fn save(&mut self, manifest_path: &Path, encoding: PixelEncoding) -> Result<()> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let stem = manifest_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .trim_end_matches(".manifest")
            .to_string();
        let s = self.images.shape();
        let data = match encoding {
            PixelEncoding::U8 => ArrayData::U8(
                self.images
                    .data()
                    .iter()
                    .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                    .collect(),
            ),
            PixelEncoding::F32 => ArrayData::F32(self.images.data().iter().map(|&v| v as f32).collect()),
        };
        let images_rel = PathBuf::from(format!("{stem}.images.qten"));
        let labels_rel = PathBuf::from(format!("{stem}.labels.qten"));
        RawArray {
            dims: vec![s.n as u64, s.c as u64, s.h as u64, s.w as u64],
            data,
        }
        .write(&dir.join(&images_rel))?;
        RawArray {
            dims: vec![self.labels.len() as u64],
            data: ArrayData::U32(self.labels.iter().map(|&l| l as u32).collect()),
        }
        .write(&dir.join(&labels_rel))?;
        self.manifest.format = DatasetFormat::Qten;
        self.manifest.sample_shape = [s.c, s.h, s.w];
        self.manifest.images = images_rel;
        self.manifest.labels = Some(labels_rel);
        self.manifest.num_samples = s.n;
        self.manifest.write(manifest_path)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut manifest = self.manifest.clone();
        manifest.num_samples = indices.len();
        Dataset {
            manifest,
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }
}

fn decode_pixels(path: &Path, raw: &RawArray, header: usize, m: &DatasetManifest) -> Result<Vec<f64>> {
    match &raw.data {
        ArrayData::U8(v) => Ok(v.iter().map(|&b| b as f64 / 255.0).collect()),
        ArrayData::F32(v) => {
            let [lo, hi] = m.pixel_range;
            if lo != 0.0 || hi != 1.0 {
                bail!(Config, "float datasets must declare pixel_range [0, 1]");
            }
            if let Some(i) = v.iter().position(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::PixelRange {
                    path: path.to_path_buf(),
                    offset: (header + 4 * i) as u64,
                    value: v[i],
                });
            }
            Ok(v.iter().map(|&x| x as f64).collect())
        }
        ArrayData::U32(_) => Err(Error::Format {
            path: path.to_path_buf(),
            reason: "image payload must be u8 or f32".into(),
        }),
    }
}

fn check_labels(
    path: &Path,
    labels: Vec<u64>,
    num_classes: usize,
    offset_of: impl Fn(usize) -> u64,
) -> Result<Vec<usize>> {
    if let Some(i) = labels.iter().position(|&l| l >= num_classes as u64) {
        return Err(Error::LabelRange {
            path: path.to_path_buf(),
            offset: offset_of(i),
            label: labels[i],
            num_classes,
        });
    }
    Ok(labels.into_iter().map(|l| l as usize).collect())
}

/// Repeats each single-channel plane three times.
fn triple_channels(pixels: &[f64], plane: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(pixels.len() * 3);
    for p in pixels.chunks(plane) {
        for _ in 0..3 {
            out.extend_from_slice(p);
        }
    }
    out
}

/// Draws `count` distinct items without replacement. Returns the gathered
/// images and the chosen indices.
pub fn sample_nat(images: &Tensor4, count: usize, seed: u64) -> Result<(Tensor4, Vec<usize>)> {
    let n = images.shape().n;
    if count > n {
        bail!(InvalidArgument, "cannot sample {count} items from a set of {n}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = index::sample(&mut rng, n, count).into_vec();
    Ok((images.select(&indices), indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn write_manifest(dir: &Path, n: usize, payload: ArrayData, labels: Vec<u32>) -> PathBuf {
        RawArray {
            dims: vec![n as u64, 3, 32, 32],
            data: payload,
        }
        .write(&dir.join("img.qten"))
        .unwrap();
        RawArray {
            dims: vec![labels.len() as u64],
            data: ArrayData::U32(labels),
        }
        .write(&dir.join("lbl.qten"))
        .unwrap();
        let m = DatasetManifest {
            name: "t".into(),
            format: DatasetFormat::Qten,
            sample_shape: [3, 32, 32],
            pixel_range: [0.0, 1.0],
            images: "img.qten".into(),
            labels: Some("lbl.qten".into()),
            num_samples: n,
            num_classes: 10,
            split: None,
            attack: None,
            provenance: None,
        };
        let p = dir.join("t.json");
        m.write(&p).unwrap();
        p
    }

    #[test]
    fn f32_payload_loads_with_declared_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            4,
            ArrayData::F32(vec![0.5; 4 * 3 * 32 * 32]),
            vec![0, 1, 2, 3],
        );
        let fsize = fs::metadata(dir.path().join("img.qten")).unwrap().len();
        assert_eq!(fsize as usize - RawArray::header_len(4), 4 * 3 * 32 * 32 * 4);
        let d = Dataset::load(&p).unwrap();
        assert_eq!(d.images.shape(), Shape4::new(4, 3, 32, 32));
        assert_eq!(d.labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn short_payload_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), 4, ArrayData::F32(vec![0.5; 4 * 3072]), vec![0; 4]);
        let img = dir.path().join("img.qten");
        let mut bytes = fs::read(&img).unwrap();
        bytes.pop();
        fs::write(&img, bytes).unwrap();
        let err = Dataset::load(&p).unwrap_err().to_string();
        assert!(err.contains(&format!("expected {}", 4 * 3072 * 4)), "{err}");
        assert!(err.contains(&format!("found {}", 4 * 3072 * 4 - 1)), "{err}");
    }

    #[test]
    fn u8_endpoints_scale_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), 2, ArrayData::U8(vec![255; 2 * 3072]), vec![1, 9]);
        let d = Dataset::load(&p).unwrap();
        assert!(d.images.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn out_of_range_label_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), 2, ArrayData::U8(vec![0; 2 * 3072]), vec![3, 10]);
        let err = Dataset::load(&p).unwrap_err();
        match err {
            Error::LabelRange { offset, label, .. } => {
                assert_eq!(label, 10);
                assert_eq!(offset, RawArray::header_len(1) as u64 + 4);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn float_pixels_outside_unit_range_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut px = vec![0.5f32; 3072];
        px[7] = 1.5;
        let p = write_manifest(dir.path(), 1, ArrayData::F32(px), vec![0]);
        let err = Dataset::load(&p).unwrap_err();
        assert!(matches!(err, Error::PixelRange { offset, .. } if offset == (RawArray::header_len(4) + 28) as u64));
    }

    #[test]
    fn cifar_binary_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for label in [3u8, 7] {
            bytes.push(label);
            bytes.extend(std::iter::repeat_n(51u8, 3072));
        }
        fs::write(dir.path().join("batch.bin"), &bytes).unwrap();
        let m = DatasetManifest {
            name: "cifar".into(),
            format: DatasetFormat::Cifar10Bin,
            sample_shape: [3, 32, 32],
            pixel_range: [0.0, 1.0],
            images: "batch.bin".into(),
            labels: None,
            num_samples: 2,
            num_classes: 10,
            split: Some("train".into()),
            attack: None,
            provenance: None,
        };
        let d = Dataset::load_with(m, dir.path()).unwrap();
        assert_eq!(d.labels, vec![3, 7]);
        assert!(d.images.data().iter().all(|&v| v == 0.2));
    }

    #[test]
    fn grayscale_is_channel_tripled() {
        let dir = tempfile::tempdir().unwrap();
        RawArray {
            dims: vec![1, 1, 2, 2],
            data: ArrayData::U8(vec![0, 51, 102, 255]),
        }
        .write(&dir.path().join("g.qten"))
        .unwrap();
        RawArray {
            dims: vec![1],
            data: ArrayData::U8(vec![0]),
        }
        .write(&dir.path().join("l.qten"))
        .unwrap();
        let m = DatasetManifest {
            name: "g".into(),
            format: DatasetFormat::Qten,
            sample_shape: [1, 2, 2],
            pixel_range: [0.0, 1.0],
            images: "g.qten".into(),
            labels: Some("l.qten".into()),
            num_samples: 1,
            num_classes: 2,
            split: None,
            attack: None,
            provenance: None,
        };
        let d = Dataset::load_with(m, dir.path()).unwrap();
        assert_eq!(d.images.shape(), Shape4::new(1, 3, 2, 2));
        assert_eq!(&d.images.data()[..4], &d.images.data()[8..]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i % 256) as f64 / 255.0).collect();
        let images = Tensor4::new(Shape4::new(2, 3, 4, 4), px).unwrap();
        let mut d = Dataset::new("rt", images, vec![1, 0], 2).unwrap();
        let p = dir.path().join("rt.json");
        d.save(&p, PixelEncoding::U8).unwrap();
        let a = Dataset::load(&p).unwrap();
        let b = Dataset::load(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images, d.images);
        assert_eq!(a.labels, d.labels);

        d.save(&p, PixelEncoding::F32).unwrap();
        let c = Dataset::load(&p).unwrap();
        for (x, y) in c.images.data().iter().zip(d.images.data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }

    #[test]
    fn sampling_is_without_replacement() {
        let images = Tensor4::zeros(Shape4::new(50_000, 1, 1, 1));
        let (_, idx) = sample_nat(&images, 1000, 3).unwrap();
        assert_eq!(idx.iter().collect::<HashSet<_>>().len(), 1000);
        let (_, idx) = sample_nat(&images, 200, 3).unwrap();
        assert_eq!(idx.iter().collect::<HashSet<_>>().len(), 200);
        assert_eq!(sample_nat(&images, 200, 3).unwrap().1, idx);
    }

    #[test]
    fn full_count_is_a_permutation() {
        let images = Tensor4::new(Shape4::new(20, 1, 1, 1), (0..20).map(f64::from).collect()).unwrap();
        let (t, mut idx) = sample_nat(&images, 20, 9).unwrap();
        let mut vals: Vec<f64> = t.data().to_vec();
        vals.sort_by(f64::total_cmp);
        idx.sort();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
        assert_eq!(vals, (0..20).map(f64::from).collect::<Vec<_>>());
        assert!(sample_nat(&images, 21, 9).is_err());
    }
}
