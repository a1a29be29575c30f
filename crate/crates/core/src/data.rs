//! Factor-labelled image datasets.
//!
//! Two sources: the synthetic *Quads* renderer, where every image is a
//! single coloured glyph at a grid position so that all factors are known,
//! and MNIST-style IDX files. Images are stored flattened row-major with
//! interleaved channels (`(y · width + x) · channels + c`), pixels in `[0, 1]`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::codec::{self, FormatError, Tensor};
use crate::kv;
use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    IdxMagic {
        file: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("{file}: dimension mismatch: {detail}")]
    IdxDimension { file: &'static str, detail: String },
    #[error("image count {images} does not match label count {labels}")]
    IdxCount { images: usize, labels: usize },
    #[error("{file}: truncated, expected {expected} bytes, found {found}")]
    IdxTruncated {
        file: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("label {label} out of range for factor {factor} (cardinality {cardinality})")]
    LabelRange {
        factor: String,
        label: usize,
        cardinality: usize,
    },
    #[error("image {height}x{width} too small to render the spec (needs {needed_h}x{needed_w})")]
    ImageTooSmall {
        height: usize,
        width: usize,
        needed_h: usize,
        needed_w: usize,
    },
    #[error("invalid factor spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub name: String,
    pub cardinality: usize,
}

impl Factor {
    pub fn new(name: &str, cardinality: usize) -> Self {
        Self {
            name: name.to_string(),
            cardinality,
        }
    }
}

/// Replication and noise settings for the synthetic renderer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    pub noise_sigma: f64,
    /// Noisy copies per factor combination.
    pub replicas: usize,
    /// How many of those copies go to the test split.
    pub test_replicas: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSpec {
    pub name: String,
    pub factors: Vec<Factor>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub render: Option<RenderParams>,
}

/// Glyph footprint and placement of the Quads renderer.
pub const GLYPH: usize = 5;
pub const GRID_STEP: usize = 3;
pub const GRID_MARGIN: usize = 1;

pub const SHAPE_NAMES: [&str; 3] = ["square", "cross", "diamond"];

impl FactorSpec {
    /// 16×16 RGB, factors shape(3), color(3), x(4), y(4): 144 combinations,
    /// 40 noisy copies each, 8 of which are held out.
    pub fn quads() -> Self {
        Self {
            name: "quads".into(),
            factors: vec![
                Factor::new("shape", 3),
                Factor::new("color", 3),
                Factor::new("x", 4),
                Factor::new("y", 4),
            ],
            height: 16,
            width: 16,
            channels: 3,
            render: Some(RenderParams {
                noise_sigma: 0.02,
                replicas: 40,
                test_replicas: 8,
            }),
        }
    }

    pub fn mnist() -> Self {
        Self {
            name: "mnist".into(),
            factors: vec![Factor::new("digit", 10)],
            height: 28,
            width: 28,
            channels: 1,
            render: None,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn combinations(&self) -> usize {
        self.factors.iter().map(|f| f.cardinality).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(DataError::Spec("no factors".into()));
        }
        if let Some(f) = self.factors.iter().find(|f| f.cardinality < 2) {
            return Err(DataError::Spec(format!(
                "factor {} has cardinality {} < 2",
                f.name, f.cardinality
            )));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(DataError::Spec("empty image geometry".into()));
        }
        Ok(())
    }

    /// Mixed-radix decoding of a combination index; the last factor varies
    /// fastest.
    pub fn labels_of(&self, mut index: usize) -> Vec<usize> {
        let mut labels = vec![0; self.factors.len()];
        for (slot, f) in labels.iter_mut().zip(&self.factors).rev() {
            *slot = index % f.cardinality;
            index /= f.cardinality;
        }
        labels
    }

    pub fn to_text(&self) -> String {
        let mut pairs = vec![
            ("name".to_string(), self.name.clone()),
            ("height".to_string(), self.height.to_string()),
            ("width".to_string(), self.width.to_string()),
            ("channels".to_string(), self.channels.to_string()),
            (
                "factors".to_string(),
                self.factors
                    .iter()
                    .map(|f| format!("{}:{}", f.name, f.cardinality))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ];
        if let Some(r) = self.render {
            pairs.push(("noise_sigma".into(), format!("{:?}", r.noise_sigma)));
            pairs.push(("replicas".into(), r.replicas.to_string()));
            pairs.push(("test_replicas".into(), r.test_replicas.to_string()));
        }
        kv::render(&pairs)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = kv::parse(text).map_err(|e| DataError::Spec(e.to_string()))?;
        let need = |key: &str| -> Result<&str> {
            kv::get(&pairs, key).ok_or_else(|| DataError::Spec(format!("missing key {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            need(key)?
                .parse()
                .map_err(|_| DataError::Spec(format!("bad integer for {key}")))
        };
        let factors = need("factors")?
            .split(',')
            .map(|item| {
                let (name, card) = item
                    .split_once(':')
                    .ok_or_else(|| DataError::Spec(format!("bad factor {item:?}")))?;
                let cardinality = card
                    .trim()
                    .parse()
                    .map_err(|_| DataError::Spec(format!("bad cardinality in {item:?}")))?;
                Ok(Factor::new(name.trim(), cardinality))
            })
            .collect::<Result<Vec<_>>>()?;
        let render = match kv::get(&pairs, "noise_sigma") {
            Some(sigma) => Some(RenderParams {
                noise_sigma: sigma
                    .parse()
                    .map_err(|_| DataError::Spec("bad noise_sigma".into()))?,
                replicas: num("replicas")?,
                test_replicas: num("test_replicas")?,
            }),
            None => None,
        };
        let spec = Self {
            name: need("name")?.to_string(),
            factors,
            height: num("height")?,
            width: num("width")?,
            channels: num("channels")?,
            render,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorDataset {
    pub spec: FactorSpec,
    /// One flattened image per row.
    pub images: Matrix,
    pub labels: Vec<Vec<usize>>,
    pub split: Vec<Split>,
}

impl FactorDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Gathers the given rows into a batch matrix.
    pub fn batch(&self, indices: &[usize]) -> Matrix {
        let p = self.images.cols();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        Matrix::from_vec(indices.len(), p, data).expect("rows of equal width")
    }

    /// Retags every `n`-th example (starting at `n - 1`) as test.
    pub fn with_test_every(mut self, n: usize) -> Self {
        for (i, s) in self.split.iter_mut().enumerate() {
            *s = if n > 0 && i % n == n - 1 {
                Split::Test
            } else {
                Split::Train
            };
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let n = self.len();
        if self.images.rows() != n || self.split.len() != n {
            return Err(DataError::Spec(format!(
                "{} images, {} label rows, {} split tags",
                self.images.rows(),
                n,
                self.split.len()
            )));
        }
        if self.images.cols() != self.spec.pixels() {
            return Err(DataError::Spec(format!(
                "image width {} != {} pixels",
                self.images.cols(),
                self.spec.pixels()
            )));
        }
        for row in &self.labels {
            if row.len() != self.spec.factors.len() {
                return Err(DataError::Spec("label row length".into()));
            }
            for (label, f) in row.iter().zip(&self.spec.factors) {
                if *label >= f.cardinality {
                    return Err(DataError::LabelRange {
                        factor: f.name.clone(),
                        label: *label,
                        cardinality: f.cardinality,
                    });
                }
            }
        }
        Ok(())
    }
}

fn glyph_covers(shape: usize, gy: usize, gx: usize) -> bool {
    let c = GLYPH / 2;
    let (dy, dx) = (gy.abs_diff(c), gx.abs_diff(c));
    match shape {
        0 => true,
        1 => dy == 0 || dx == 0,
        _ => dy + dx <= c,
    }
}

fn check_renderable(spec: &FactorSpec) -> Result<()> {
    if spec.factors.len() != 4 {
        return Err(DataError::Spec(
            "renderer expects factors [shape, color, x, y]".into(),
        ));
    }
    let shapes = spec.factors[0].cardinality;
    let colors = spec.factors[1].cardinality;
    if shapes > SHAPE_NAMES.len() {
        return Err(DataError::Spec(format!(
            "renderer knows {} shapes, spec asks for {shapes}",
            SHAPE_NAMES.len()
        )));
    }
    if colors > spec.channels {
        return Err(DataError::Spec(format!(
            "{colors} colors need at least {colors} channels"
        )));
    }
    let span = |n: usize| GRID_MARGIN + GRID_STEP * (n - 1) + GLYPH;
    let (needed_w, needed_h) = (span(spec.factors[2].cardinality), span(spec.factors[3].cardinality));
    if spec.height < needed_h || spec.width < needed_w {
        return Err(DataError::ImageTooSmall {
            height: spec.height,
            width: spec.width,
            needed_h,
            needed_w,
        });
    }
    Ok(())
}

/// Noise-free rendering of one label vector `[shape, color, x, y]`.
pub fn render_clean(spec: &FactorSpec, labels: &[usize]) -> Result<Vec<f64>> {
    spec.validate()?;
    check_renderable(spec)?;
    let (shape, color, gx, gy) = (labels[0], labels[1], labels[2], labels[3]);
    let mut img = vec![0.0; spec.pixels()];
    let (ox, oy) = (GRID_MARGIN + GRID_STEP * gx, GRID_MARGIN + GRID_STEP * gy);
    for y in 0..GLYPH {
        for x in 0..GLYPH {
            if glyph_covers(shape, y, x) {
                img[((oy + y) * spec.width + ox + x) * spec.channels + color] = 1.0;
            }
        }
    }
    Ok(img)
}

/// Renders every factor combination `replicas` times with clamped Gaussian
/// pixel noise. The last `test_replicas` copies of each combination are the
/// test split, so both splits cover every combination.
pub fn generate_toy(spec: &FactorSpec, seed: u64) -> Result<FactorDataset> {
    spec.validate()?;
    check_renderable(spec)?;
    let render = spec
        .render
        .ok_or_else(|| DataError::Spec("spec has no render parameters".into()))?;
    if render.replicas == 0 || render.test_replicas == 0 || render.test_replicas >= render.replicas {
        return Err(DataError::Spec(
            "need 0 < test_replicas < replicas so both splits are populated".into(),
        ));
    }
    if !(render.noise_sigma >= 0.0) {
        return Err(DataError::Spec("noise_sigma must be >= 0".into()));
    }
    let noise = Normal::new(0.0, render.noise_sigma).map_err(|e| DataError::Spec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.combinations() * render.replicas;
    let p = spec.pixels();
    let mut data = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    for combo in 0..spec.combinations() {
        let l = spec.labels_of(combo);
        let clean = render_clean(spec, &l)?;
        for r in 0..render.replicas {
            data.extend(
                clean
                    .iter()
                    .map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)),
            );
            labels.push(l.clone());
            split.push(if r >= render.replicas - render.test_replicas {
                Split::Test
            } else {
                Split::Train
            });
        }
    }
    let images = Matrix::from_vec(n, p, data).expect("sized above");
    Ok(FactorDataset {
        spec: spec.clone(),
        images,
        labels,
        split,
    })
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, file: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::IdxTruncated {
            file,
            expected: offset + 4,
            found: bytes.len(),
        })
}

fn check_payload(bytes: &[u8], header: usize, payload: usize, file: &'static str) -> Result<()> {
    let expected = header + payload;
    match bytes.len().cmp(&expected) {
        std::cmp::Ordering::Less => Err(DataError::IdxTruncated {
            file,
            expected,
            found: bytes.len(),
        }),
        std::cmp::Ordering::Greater => Err(DataError::IdxDimension {
            file,
            detail: format!(
                "{} payload bytes beyond the declared dimensions",
                bytes.len() - expected
            ),
        }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

/// Parses an IDX image/label pair held in memory.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<FactorDataset> {
    let magic = be_u32(image_bytes, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(DataError::IdxMagic {
            file: "images",
            expected: IDX_IMAGES,
            found: magic,
        });
    }
    let magic = be_u32(label_bytes, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(DataError::IdxMagic {
            file: "labels",
            expected: IDX_LABELS,
            found: magic,
        });
    }
    let count = be_u32(image_bytes, 4, "images")? as usize;
    let rows = be_u32(image_bytes, 8, "images")? as usize;
    let cols = be_u32(image_bytes, 12, "images")? as usize;
    if rows == 0 || cols == 0 {
        return Err(DataError::IdxDimension {
            file: "images",
            detail: format!("{rows}x{cols} images"),
        });
    }
    let label_count = be_u32(label_bytes, 4, "labels")? as usize;
    if label_count != count {
        return Err(DataError::IdxCount {
            images: count,
            labels: label_count,
        });
    }
    check_payload(image_bytes, 16, count * rows * cols, "images")?;
    check_payload(label_bytes, 8, count, "labels")?;

    if let Some(&label) = label_bytes[8..].iter().find(|&&b| b >= 10) {
        return Err(DataError::LabelRange {
            factor: "digit".into(),
            label: label as usize,
            cardinality: 10,
        });
    }
    let images = image_bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let spec = FactorSpec {
        height: rows,
        width: cols,
        ..FactorSpec::mnist()
    };
    Ok(FactorDataset {
        spec,
        images: Matrix::from_vec(count, rows * cols, images).expect("sized by check_payload"),
        labels: label_bytes[8..].iter().map(|&b| vec![b as usize]).collect(),
        split: vec![Split::Train; count],
    })
}

/// Loads an MNIST-style IDX pair. Everything is tagged [`Split::Train`];
/// use [`FactorDataset::with_test_every`] to carve out a test split.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<FactorDataset> {
    parse_idx(&read_file(images_path)?, &read_file(labels_path)?)
}

pub const DATASET_MAGIC: &[u8; 8] = b"PROSEDAT";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(ds: &FactorDataset) -> Vec<u8> {
    let s = &ds.spec;
    let n = ds.len();
    let tensors = [
        Tensor::new(
            "images",
            vec![n, s.height, s.width, s.channels],
            ds.images.data().to_vec(),
        ),
        Tensor::new(
            "labels",
            vec![n, s.factors.len()],
            ds.labels.iter().flatten().map(|&l| l as f64).collect(),
        ),
        Tensor::new(
            "split",
            vec![n],
            ds.split
                .iter()
                .map(|s| if *s == Split::Test { 1.0 } else { 0.0 })
                .collect(),
        ),
    ];
    codec::encode(DATASET_MAGIC, DATASET_VERSION, &s.to_text(), &tensors)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<FactorDataset> {
    let c = codec::decode(bytes, DATASET_MAGIC, DATASET_VERSION)?;
    let spec = FactorSpec::from_text(&c.text)?;
    let get = |name: &str| {
        c.tensor(name)
            .ok_or_else(|| DataError::Spec(format!("missing tensor {name}")))
    };
    let images = get("images")?;
    let labels = get("labels")?;
    let split = get("split")?;
    let n = split.data.len();
    let f = spec.factors.len();
    if images.dims != [n, spec.height, spec.width, spec.channels] || labels.dims != [n, f] {
        return Err(DataError::Spec("tensor shapes disagree with spec".into()));
    }
    let to_index = |v: f64| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
            Ok(v as usize)
        } else {
            Err(DataError::Spec(format!("non-integral label {v}")))
        }
    };
    let ds = FactorDataset {
        images: Matrix::from_vec(n, spec.pixels(), images.data.clone()).expect("dims checked"),
        labels: labels
            .data
            .chunks_exact(f.max(1))
            .map(|row| row.iter().map(|&v| to_index(v)).collect())
            .collect::<Result<_>>()?,
        split: split
            .data
            .iter()
            .map(|&v| if v == 1.0 { Split::Test } else { Split::Train })
            .collect(),
        spec,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &FactorDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_dataset(path: &Path) -> Result<FactorDataset> {
    decode_dataset(&read_file(path)?)
}
