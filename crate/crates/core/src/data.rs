//! Volumes, synthetic data, NRRD input and the overlapping slab protocol.
//!
//! Volumes are stored slice-major: voxel `(z, y, x)` lives at
//! `(z * height + y) * width + x`, which is also the linearization of a
//! `(1, S, H, W, 1)` tensor.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{KeyValueDoc, Section};
use crate::error::{Error, Result};
use crate::objective::threshold_mask;
use crate::tensor::{Real, Shape5, Tensor5};

/// Slices per slab.
pub const SLAB_DEPTH: usize = 16;
/// Distance between consecutive slab starts.
pub const SLAB_STRIDE: usize = 8;
/// Local slices of a slab that enter the composed output.
pub const SLAB_MIDDLE: std::ops::Range<usize> = 4..12;

/// A dense 3D grid of raw values, slice-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid3 {
    pub fn new(slices: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let expected = slices
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or(Error::Size([1, slices, height, width, 1]))?;
        if expected == 0 {
            return Err(Error::EmptyExtent([1, slices, height, width, 1]));
        }
        if values.len() != expected {
            return Err(Error::Length {
                what: "grid values",
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            slices,
            height,
            width,
            values,
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.slices, self.height, self.width]
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    /// The grid as a `(1, S, H, W, 1)` tensor.
    pub fn to_tensor(&self) -> Tensor5 {
        let shape = Shape5::new(1, self.slices, self.height, self.width, 1).expect("validated extents");
        Tensor5::from_vec(shape, self.values.clone()).expect("validated length")
    }
}

/// A scan with its binary segmentation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    slices: usize,
    height: usize,
    width: usize,
    intensities: Vec<f64>,
    mask: Vec<f64>,
}

impl Volume {
    /// Intensities must lie in `[0, 1]` and the mask in `{0, 1}`.
    pub fn new(intensities: Grid3, mask: Grid3) -> Result<Self> {
        if intensities.extents() != mask.extents() {
            return Err(Error::Data(format!(
                "image extents {:?} differ from mask extents {:?}",
                intensities.extents(),
                mask.extents()
            )));
        }
        if let Some(v) = intensities
            .values
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Data(format!("intensity {v} outside [0, 1]")));
        }
        if let Some(v) = mask.values.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("mask value {v} is not binary")));
        }
        Ok(Self {
            slices: intensities.slices,
            height: intensities.height,
            width: intensities.width,
            intensities: intensities.values,
            mask: mask.values,
        })
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().sum::<f64>() / self.mask.len() as f64
    }

    pub fn shape(&self) -> Shape5 {
        Shape5::new(1, self.slices, self.height, self.width, 1).expect("validated extents")
    }

    pub fn intensity_tensor(&self) -> Tensor5 {
        Tensor5::from_vec(self.shape(), self.intensities.clone()).expect("validated length")
    }

    pub fn mask_tensor(&self) -> Tensor5 {
        Tensor5::from_vec(self.shape(), self.mask.clone()).expect("validated length")
    }

    pub fn intensity_grid(&self) -> Grid3 {
        Grid3 {
            slices: self.slices,
            height: self.height,
            width: self.width,
            values: self.intensities.clone(),
        }
    }

    pub fn mask_grid(&self) -> Grid3 {
        Grid3 {
            slices: self.slices,
            height: self.height,
            width: self.width,
            values: self.mask.clone(),
        }
    }
}

/// Linear map of `values` onto `[0, 1]`; constant input maps to zeros.
pub fn rescale_to_unit(values: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::Data(format!("NaN at index {i}")));
    }
    if let Some(i) = values.iter().position(|v| v.is_infinite()) {
        return Err(Error::Data(format!("infinite value at index {i}")));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if values.is_empty() || hi == lo {
        return Ok(vec![0.0; values.len()]);
    }
    let span = hi - lo;
    Ok(values
        .iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect())
}

// ---------------------------------------------------------------------------
// Synthetic volumes

/// Parameters of a synthetic scan: a tube of overlapping ellipsoids stacked
/// along the slice axis on top of a smooth background texture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    /// Ellipsoids forming the tube, evenly spaced in depth.
    pub ellipsoids: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Largest in-plane offset of an ellipsoid centre from the volume axis, in voxels.
    pub wander: f64,
    /// Foreground brightness above background.
    pub contrast: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Per-volume intensity gain, drawn uniformly from `[gain_min, gain_max]`.
    pub gain_min: f64,
    pub gain_max: f64,
    /// Per-volume intensity offset, drawn uniformly from `[offset_min, offset_max]`.
    pub offset_min: f64,
    pub offset_max: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            slices: 16,
            height: 32,
            width: 32,
            ellipsoids: 3,
            radius_min: 4.0,
            radius_max: 7.0,
            wander: 4.0,
            contrast: 0.35,
            noise: 0.05,
            gain_min: 1.0,
            gain_max: 1.0,
            offset_min: 0.0,
            offset_max: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices < SLAB_DEPTH || self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "synthetic extents {}x{}x{} are below the 16x16x16 minimum",
                self.slices, self.height, self.width
            )));
        }
        if self.ellipsoids == 0 {
            return Err(Error::Config("at least one ellipsoid is required".into()));
        }
        if !(self.radius_min > 0.0) || !(self.radius_max >= self.radius_min) {
            return Err(Error::Config(format!(
                "radius range [{}, {}] must be positive and ordered",
                self.radius_min, self.radius_max
            )));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.wander) || !finite_nonneg(self.noise) || !self.contrast.is_finite() {
            return Err(Error::Config(
                "wander and noise must be non-negative, contrast finite".into(),
            ));
        }
        if !(self.gain_min > 0.0 && self.gain_max >= self.gain_min)
            || !(self.offset_max >= self.offset_min)
        {
            return Err(Error::Config("gain and offset ranges must be ordered, gain positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut acc = 0.0;
        for k in 0..3 {
            let t = (p[k] - self.centre[k]) / self.radii[k];
            acc += t * t;
        }
        acc <= 1.0
    }
}

fn draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Deterministic synthetic scan; identical specs give identical volumes.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Volume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (s, h, w) = (spec.slices, spec.height, spec.width);
    let spacing = s as f64 / spec.ellipsoids as f64;
    let ellipsoids: Vec<Ellipsoid> = (0..spec.ellipsoids)
        .map(|k| {
            let dy = draw(&mut rng, -spec.wander, spec.wander);
            let dx = draw(&mut rng, -spec.wander, spec.wander);
            let radii = [
                draw(&mut rng, spec.radius_min, spec.radius_max),
                draw(&mut rng, spec.radius_min, spec.radius_max),
                draw(&mut rng, spec.radius_min, spec.radius_max),
            ];
            Ellipsoid {
                centre: [(k as f64 + 0.5) * spacing, h as f64 / 2.0 + dy, w as f64 / 2.0 + dx],
                radii,
            }
        })
        .collect();

    let freq: [f64; 3] = std::array::from_fn(|_| draw(&mut rng, 0.5, 2.0));
    let phase = draw(&mut rng, 0.0, std::f64::consts::TAU);
    let gain = draw(&mut rng, spec.gain_min, spec.gain_max);
    let offset = draw(&mut rng, spec.offset_min, spec.offset_max);

    let len = s * h * w;
    let mut intensities = Vec::with_capacity(len);
    let mut mask = Vec::with_capacity(len);
    for z in 0..s {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let inside = ellipsoids.iter().any(|e| e.contains(p));
                let arg = freq[0] * p[0] / s as f64 + freq[1] * p[1] / h as f64 + freq[2] * p[2] / w as f64;
                let texture = 0.25 + 0.08 * (std::f64::consts::TAU * arg + phase).sin();
                let clean = texture + if inside { spec.contrast } else { 0.0 };
                let eps: f64 = rng.sample(StandardNormal);
                let v = offset + gain * clean + spec.noise * eps;
                intensities.push(v.clamp(0.0, 1.0));
                mask.push(if inside { 1.0 } else { 0.0 });
            }
        }
    }
    let volume = Volume {
        slices: s,
        height: h,
        width: w,
        intensities,
        mask,
    };
    let fraction = volume.foreground_fraction();
    if !(0.01..=0.5).contains(&fraction) {
        return Err(Error::Config(format!(
            "foreground fraction {fraction:.4} outside [0.01, 0.5]; adjust radii or ellipsoid count"
        )));
    }
    Ok(volume)
}

// ---------------------------------------------------------------------------
// Dataset manifests

/// Training and held-out volumes of one synthetic dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Volume>,
    pub eval: Vec<Volume>,
}

/// Key=value description of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetManifest {
    /// Template for every volume; its seed is the dataset seed.
    pub synth: SynthSpec,
    pub train_count: usize,
    pub eval_count: usize,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            train_count: 20,
            eval_count: 6,
        }
    }
}

const MANIFEST_KEYS: &[&str] = &[
    "slices",
    "height",
    "width",
    "train_count",
    "eval_count",
    "seed",
    "ellipsoids",
    "radius_min",
    "radius_max",
    "wander",
    "contrast",
    "noise",
    "gain_min",
    "gain_max",
    "offset_min",
    "offset_max",
];

fn mix_seed(seed: u64, split: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed
        .wrapping_add(split.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DatasetManifest {
    /// Reads the keys of `section`; missing keys keep their defaults.
    pub fn from_section(section: &Section) -> Result<Self> {
        section.check_keys(MANIFEST_KEYS)?;
        let d = Self::default();
        let s = d.synth;
        let synth = SynthSpec {
            slices: section.parse_or("slices", s.slices)?,
            height: section.parse_or("height", s.height)?,
            width: section.parse_or("width", s.width)?,
            ellipsoids: section.parse_or("ellipsoids", s.ellipsoids)?,
            radius_min: section.parse_or("radius_min", s.radius_min)?,
            radius_max: section.parse_or("radius_max", s.radius_max)?,
            wander: section.parse_or("wander", s.wander)?,
            contrast: section.parse_or("contrast", s.contrast)?,
            noise: section.parse_or("noise", s.noise)?,
            gain_min: section.parse_or("gain_min", s.gain_min)?,
            gain_max: section.parse_or("gain_max", s.gain_max)?,
            offset_min: section.parse_or("offset_min", s.offset_min)?,
            offset_max: section.parse_or("offset_max", s.offset_max)?,
            seed: section.parse_or("seed", s.seed)?,
        };
        synth.validate()?;
        let manifest = Self {
            synth,
            train_count: section.parse_or("train_count", d.train_count)?,
            eval_count: section.parse_or("eval_count", d.eval_count)?,
        };
        if manifest.train_count == 0 {
            return Err(Error::Config("train_count must be at least 1".into()));
        }
        Ok(manifest)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc = KeyValueDoc::parse(text)?;
        match doc.sections() {
            [] => Ok(Self::default()),
            [only] if only.name.is_empty() || only.name == "dataset" => Self::from_section(only),
            _ => Err(Error::Config(
                "a manifest holds plain keys or a single [dataset] section".into(),
            )),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_section(&self, name: &str) -> Section {
        let s = &self.synth;
        let mut out = Section::new(name);
        out.set("slices", s.slices);
        out.set("height", s.height);
        out.set("width", s.width);
        out.set("train_count", self.train_count);
        out.set("eval_count", self.eval_count);
        out.set("seed", s.seed);
        out.set("ellipsoids", s.ellipsoids);
        out.set("radius_min", s.radius_min);
        out.set("radius_max", s.radius_max);
        out.set("wander", s.wander);
        out.set("contrast", s.contrast);
        out.set("noise", s.noise);
        out.set("gain_min", s.gain_min);
        out.set("gain_max", s.gain_max);
        out.set("offset_min", s.offset_min);
        out.set("offset_max", s.offset_max);
        out
    }

    pub fn render(&self) -> String {
        let mut doc = KeyValueDoc::new();
        doc.push(self.to_section(""));
        doc.render()
    }

    pub fn train_spec(&self, index: usize) -> SynthSpec {
        self.synth.with_seed(mix_seed(self.synth.seed, 0, index as u64))
    }

    pub fn eval_spec(&self, index: usize) -> SynthSpec {
        self.synth.with_seed(mix_seed(self.synth.seed, 1, index as u64))
    }

    pub fn generate(&self) -> Result<Dataset> {
        let train = (0..self.train_count)
            .map(|i| generate_synthetic(&self.train_spec(i)))
            .collect::<Result<_>>()?;
        let eval = (0..self.eval_count)
            .map(|i| generate_synthetic(&self.eval_spec(i)))
            .collect::<Result<_>>()?;
        Ok(Dataset { train, eval })
    }
}

// ---------------------------------------------------------------------------
// NRRD

/// Data encodings understood by the reader and writer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NrrdEncoding {
    Raw,
    Gzip,
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    I64,
    U64,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "signed char" | "int8" | "int8_t" => Self::I8,
            "uchar" | "unsigned char" | "uint8" | "uint8_t" => Self::U8,
            "short" | "short int" | "signed short" | "signed short int" | "int16" | "int16_t" => {
                Self::I16
            }
            "ushort" | "unsigned short" | "unsigned short int" | "uint16" | "uint16_t" => Self::U16,
            "int" | "signed int" | "int32" | "int32_t" => Self::I32,
            "uint" | "unsigned int" | "uint32" | "uint32_t" => Self::U32,
            "longlong" | "long long" | "long long int" | "signed long long"
            | "signed long long int" | "int64" | "int64_t" => Self::I64,
            "ulonglong" | "unsigned long long" | "unsigned long long int" | "uint64"
            | "uint64_t" => Self::U64,
            "float" => Self::F32,
            "double" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::I64 | Self::U64 | Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b.try_into().unwrap()) as f64,
            Self::I64 => i64::from_le_bytes(b.try_into().unwrap()) as f64,
            Self::U64 => u64::from_le_bytes(b.try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b.try_into().unwrap()),
        }
    }
}

fn unsupported(field: &str, detail: impl Into<String>) -> Error {
    Error::UnsupportedFormat {
        field: field.to_string(),
        detail: detail.into(),
    }
}

/// Parses an NRRD file held in memory.
///
/// Accepted: magic `NRRD0001`..`NRRD0005`, attached data, 3 dimensions,
/// scalar types, `raw` or `gzip` encoding, little-endian. Sizes are listed
/// fastest axis first, so the last axis is taken as the slice axis.
pub fn parse_nrrd(bytes: &[u8]) -> Result<Grid3> {
    fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
        if *pos >= bytes.len() {
            return None;
        }
        let rest = &bytes[*pos..];
        let end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
        *pos += (end + 1).min(rest.len());
        let line = &rest[..end];
        Some(line.strip_suffix(b"\r").unwrap_or(line))
    }
    let mut pos = 0;
    let magic = next_line(bytes, &mut pos).ok_or_else(|| Error::Format("empty NRRD file".into()))?;
    if !magic.starts_with(b"NRRD000") || magic.len() != 8 {
        return Err(Error::Format("missing NRRD magic line".into()));
    }
    if !(b'1'..=b'5').contains(&magic[7]) {
        return Err(unsupported("magic", String::from_utf8_lossy(magic)));
    }

    let mut scalar = None;
    let mut dimension = None;
    let mut sizes: Option<Vec<usize>> = None;
    let mut encoding = None;
    let mut big_endian = false;
    let mut terminated = false;
    while let Some(line) = next_line(bytes, &mut pos) {
        if line.is_empty() {
            terminated = true;
            break;
        }
        let line = std::str::from_utf8(line)
            .map_err(|_| Error::Format("non-UTF-8 NRRD header line".into()))?;
        if line.starts_with('#') || line.contains(":=") {
            continue;
        }
        let Some((field, value)) = line.split_once(": ") else {
            return Err(Error::Format(format!("malformed NRRD header line `{line}`")));
        };
        let value = value.trim();
        match field.trim() {
            "type" => {
                scalar = Some(
                    Scalar::parse(value)
                        .ok_or_else(|| unsupported("type", format!("scalar type `{value}`")))?,
                )
            }
            "dimension" => {
                let d: usize = value
                    .parse()
                    .map_err(|_| Error::Format(format!("bad dimension `{value}`")))?;
                if d != 3 {
                    return Err(unsupported("dimension", format!("{d} (only 3 is supported)")));
                }
                dimension = Some(d);
            }
            "sizes" => {
                let parsed = value
                    .split_whitespace()
                    .map(|s| s.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| Error::Format(format!("bad sizes `{value}`")))?;
                sizes = Some(parsed);
            }
            "encoding" => {
                encoding = Some(match value {
                    "raw" => NrrdEncoding::Raw,
                    "gzip" | "gz" => NrrdEncoding::Gzip,
                    other => return Err(unsupported("encoding", format!("`{other}`"))),
                })
            }
            "endian" => match value {
                "little" => big_endian = false,
                "big" => big_endian = true,
                other => return Err(Error::Format(format!("bad endian `{other}`"))),
            },
            "data file" | "datafile" => {
                return Err(unsupported("data file", "detached data is not supported"))
            }
            "line skip" | "lineskip" | "byte skip" | "byteskip" if value != "0" => {
                return Err(unsupported(field.trim(), format!("`{value}`")))
            }
            _ => {}
        }
    }
    if !terminated {
        return Err(Error::Format("NRRD header is not followed by a blank line".into()));
    }
    let scalar = scalar.ok_or_else(|| Error::Format("NRRD header lacks `type`".into()))?;
    dimension.ok_or_else(|| Error::Format("NRRD header lacks `dimension`".into()))?;
    let sizes = sizes.ok_or_else(|| Error::Format("NRRD header lacks `sizes`".into()))?;
    let encoding = encoding.ok_or_else(|| Error::Format("NRRD header lacks `encoding`".into()))?;
    if sizes.len() != 3 {
        return Err(Error::Format(format!(
            "`sizes` lists {} axes for a 3-dimensional image",
            sizes.len()
        )));
    }
    if big_endian && scalar.size() > 1 {
        return Err(unsupported("endian", "big-endian data"));
    }
    let (width, height, slices) = (sizes[0], sizes[1], sizes[2]);
    let count = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(slices))
        .ok_or(Error::Size([1, slices, height, width, 1]))?;

    let payload = &bytes[pos..];
    let decoded;
    let raw: &[u8] = match encoding {
        NrrdEncoding::Raw => payload,
        NrrdEncoding::Gzip => {
            let mut buf = Vec::new();
            GzDecoder::new(payload)
                .read_to_end(&mut buf)
                .map_err(|e| Error::Format(format!("gzip payload: {e}")))?;
            decoded = buf;
            &decoded
        }
    };
    let expected = count * scalar.size();
    if raw.len() != expected {
        return Err(Error::Format(format!(
            "NRRD payload holds {} bytes, header implies {expected}",
            raw.len()
        )));
    }
    let values = raw.chunks_exact(scalar.size()).map(|b| scalar.decode(b)).collect();
    Grid3::new(slices, height, width, values)
}

pub fn read_nrrd_grid(path: impl AsRef<Path>) -> Result<Grid3> {
    parse_nrrd(&fs::read(path)?)
}

/// Reads an image and rescales it to `[0, 1]`; the mask is left empty.
pub fn read_nrrd(path: impl AsRef<Path>) -> Result<Volume> {
    let mut grid = read_nrrd_grid(path)?;
    grid.values = rescale_to_unit(&grid.values)?;
    let mask = Grid3 {
        values: vec![0.0; grid.values.len()],
        ..grid.clone()
    };
    Volume::new(grid, mask)
}

/// Reads an image and its label map; any nonzero label counts as foreground.
pub fn read_nrrd_pair(image: impl AsRef<Path>, mask: impl AsRef<Path>) -> Result<Volume> {
    let mut grid = read_nrrd_grid(image)?;
    grid.values = rescale_to_unit(&grid.values)?;
    let mut labels = read_nrrd_grid(mask)?;
    for v in &mut labels.values {
        *v = if *v != 0.0 { 1.0 } else { 0.0 };
    }
    Volume::new(grid, labels)
}

/// Serializes `grid` as a little-endian `double` NRRD with attached data.
pub fn encode_nrrd(grid: &Grid3, encoding: NrrdEncoding) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let name = match encoding {
        NrrdEncoding::Raw => "raw",
        NrrdEncoding::Gzip => "gzip",
    };
    write!(
        out,
        "NRRD0004\ntype: double\ndimension: 3\nsizes: {} {} {}\nendian: little\nencoding: {name}\n\n",
        grid.width, grid.height, grid.slices
    )?;
    let mut payload = Vec::with_capacity(grid.values.len() * 8);
    for v in &grid.values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    match encoding {
        NrrdEncoding::Raw => out.extend_from_slice(&payload),
        NrrdEncoding::Gzip => {
            let mut enc = GzEncoder::new(out, Compression::default());
            enc.write_all(&payload)?;
            out = enc.finish()?;
        }
    }
    Ok(out)
}

pub fn write_nrrd(path: impl AsRef<Path>, grid: &Grid3, encoding: NrrdEncoding) -> Result<()> {
    fs::write(path, encode_nrrd(grid, encoding)?)?;
    Ok(())
}

/// Writes one binary PGM per slice, named `{stem}_{z:03}.pgm`. Values are
/// clamped to `[0, 1]` and scaled to `0..=255`.
pub fn write_pgm_slices(dir: impl AsRef<Path>, stem: &str, grid: &Grid3) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(grid.slices);
    for (z, slice) in grid.values.chunks_exact(grid.slice_len()).enumerate() {
        let mut bytes = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
        bytes.extend(slice.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        let path = dir.join(format!("{stem}_{z:03}.pgm"));
        fs::write(&path, bytes)?;
        paths.push(path);
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Slabs

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlabPosition {
    First,
    Interior,
    Last,
}

/// A 16-slice window of a volume and its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SlabBatch {
    /// Intensities, shape `(1, 16, H, W, 1)`.
    pub data: Tensor5,
    /// Mask window of the same shape.
    pub target: Tensor5,
    pub start_slice: usize,
    /// A volume with a single slab reports it as `First`.
    pub position: SlabPosition,
}

/// Slab starts for a volume with `slices` slices: multiples of the stride,
/// plus a final slab anchored at `slices - 16` when the stride does not land there.
pub fn slab_starts(slices: usize) -> Result<Vec<usize>> {
    if slices < SLAB_DEPTH {
        return Err(Error::TooThin {
            slices,
            required: SLAB_DEPTH,
        });
    }
    let last = slices - SLAB_DEPTH;
    let mut starts: Vec<usize> = (0..=last).step_by(SLAB_STRIDE).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    Ok(starts)
}

pub fn slice_slabs(vol: &Volume) -> Result<Vec<SlabBatch>> {
    let starts = slab_starts(vol.slices)?;
    let shape = Shape5::new(1, SLAB_DEPTH, vol.height, vol.width, 1)?;
    let plane = vol.height * vol.width;
    let count = starts.len();
    Ok(starts
        .into_iter()
        .enumerate()
        .map(|(i, start)| {
            let range = start * plane..(start + SLAB_DEPTH) * plane;
            let position = if i == 0 {
                SlabPosition::First
            } else if i + 1 == count {
                SlabPosition::Last
            } else {
                SlabPosition::Interior
            };
            SlabBatch {
                data: Tensor5::from_vec(shape, vol.intensities[range.clone()].to_vec())
                    .expect("slab length"),
                target: Tensor5::from_vec(shape, vol.mask[range].to_vec()).expect("slab length"),
                start_slice: start,
                position,
            }
        })
        .collect())
}

/// For every output slice, the index of the slab that supplies it and the
/// local slice within that slab.
///
/// A slab supplies its middle slices, extended to local slice 0 when it
/// starts the volume and to local slice 15 when it ends it. Where two slabs
/// offer the same slice the later one wins.
pub fn slice_owners(starts: &[usize]) -> Result<Vec<(usize, usize)>> {
    let Some(&last_start) = starts.iter().max() else {
        return Err(Error::Composition("no slabs to compose".into()));
    };
    if starts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Composition(format!(
            "slab starts {starts:?} are not strictly increasing"
        )));
    }
    let slices = last_start + SLAB_DEPTH;
    let mut owners: Vec<Option<(usize, usize)>> = vec![None; slices];
    for (j, &start) in starts.iter().enumerate() {
        let lo = if start == 0 { 0 } else { SLAB_MIDDLE.start };
        let hi = if start + SLAB_DEPTH == slices {
            SLAB_DEPTH
        } else {
            SLAB_MIDDLE.end
        };
        for local in lo..hi {
            owners[start + local] = Some((j, local));
        }
    }
    owners
        .into_iter()
        .enumerate()
        .map(|(z, o)| o.ok_or_else(|| Error::Composition(format!("no slab covers slice {z}"))))
        .collect()
}

/// Reassembles per-slab predictions into a `(1, S, H, W, 1)` volume and
/// returns how often each output slice was written.
pub fn compose_with_writes<T: Real>(parts: &[(&SlabBatch, Tensor5<T>)]) -> Result<(Tensor5<T>, Vec<u32>)> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Composition("no slabs to compose".into()))?;
    let slab_shape = first.1.shape();
    if slab_shape.n() != 1 || slab_shape.d() != SLAB_DEPTH || slab_shape.c() != 1 {
        return Err(Error::Shape {
            expected: Shape5::new(1, SLAB_DEPTH, slab_shape.h(), slab_shape.w(), 1)?,
            got: slab_shape,
        });
    }
    for (_, pred) in parts {
        pred.expect_shape(slab_shape)?;
    }
    let starts: Vec<usize> = parts.iter().map(|(s, _)| s.start_slice).collect();
    let owners = slice_owners(&starts)?;
    let plane = slab_shape.h() * slab_shape.w();
    let out_shape = Shape5::new(1, owners.len(), slab_shape.h(), slab_shape.w(), 1)?;
    let mut out = Tensor5::zeros(out_shape);
    let mut writes = vec![0u32; owners.len()];
    for (z, &(j, local)) in owners.iter().enumerate() {
        let src = &parts[j].1.data()[local * plane..(local + 1) * plane];
        out.data_mut()[z * plane..(z + 1) * plane].copy_from_slice(src);
        writes[z] += 1;
    }
    if let Some(z) = writes.iter().position(|&w| w != 1) {
        return Err(Error::Composition(format!(
            "slice {z} written {} times",
            writes[z]
        )));
    }
    Ok((out, writes))
}

/// Composed per-voxel probabilities.
pub fn compose_probabilities<T: Real>(parts: &[(&SlabBatch, Tensor5<T>)]) -> Result<Tensor5<T>> {
    compose_with_writes(parts).map(|(out, _)| out)
}

/// Composed binary mask after thresholding at 128 on the `[0, 255]` scale.
pub fn compose_prediction<T: Real>(parts: &[(&SlabBatch, Tensor5<T>)]) -> Result<Tensor5<T>> {
    Ok(threshold_mask(&compose_probabilities(parts)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn volume(slices: usize, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = slices * 4 * 4;
        let img = Grid3::new(slices, 4, 4, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let mask = Grid3::new(slices, 4, 4, (0..n).map(|_| rng.gen_range(0..2) as f64).collect()).unwrap();
        Volume::new(img, mask).unwrap()
    }

    #[test]
    fn rescale_examples() {
        let out = rescale_to_unit(&[0.0, 128.0, 255.0]).unwrap();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.50196).abs() < 1e-5);
        assert_eq!(out[2], 1.0);
        let unit = [0.0, 0.25, 1.0];
        assert_eq!(rescale_to_unit(&unit).unwrap(), unit);
        assert_eq!(rescale_to_unit(&[7.0; 5]).unwrap(), vec![0.0; 5]);
        assert!(matches!(rescale_to_unit(&[1.0, f64::NAN]), Err(Error::Data(_))));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SynthSpec::default().with_seed(11);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = generate_synthetic(&spec.with_seed(12)).unwrap();
        assert_ne!(generate_synthetic(&spec).unwrap(), other);
    }

    #[test]
    fn foreground_brighter_without_noise() {
        let spec = SynthSpec {
            noise: 0.0,
            seed: 3,
            ..SynthSpec::default()
        };
        let v = generate_synthetic(&spec).unwrap();
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for (&i, &m) in v.intensities().iter().zip(v.mask()) {
            if m == 1.0 {
                fg += i;
                nf += 1.0;
            } else {
                bg += i;
                nb += 1.0;
            }
        }
        assert!(fg / nf > bg / nb);
        let f = v.foreground_fraction();
        assert!((0.01..=0.5).contains(&f), "{f}");
    }

    #[test]
    fn centred_ball_volume() {
        let r = 6.0;
        let spec = SynthSpec {
            slices: 32,
            height: 32,
            width: 32,
            ellipsoids: 1,
            radius_min: r,
            radius_max: r,
            wander: 0.0,
            ..SynthSpec::default()
        };
        let v = generate_synthetic(&spec).unwrap();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * r * r * r / (32.0 * 32.0 * 32.0);
        let rel = (v.foreground_fraction() - analytic).abs() / analytic;
        assert!(rel < 0.10, "relative error {rel}");
    }

    #[test]
    fn degenerate_specs_rejected() {
        let zero = SynthSpec {
            radius_min: 0.0,
            radius_max: 0.0,
            ..SynthSpec::default()
        };
        assert!(matches!(generate_synthetic(&zero), Err(Error::Config(_))));
        let thin = SynthSpec {
            slices: 8,
            ..SynthSpec::default()
        };
        assert!(matches!(generate_synthetic(&thin), Err(Error::Config(_))));
        let huge = SynthSpec {
            radius_min: 40.0,
            radius_max: 40.0,
            ..SynthSpec::default()
        };
        assert!(matches!(generate_synthetic(&huge), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let m = DatasetManifest {
            train_count: 3,
            eval_count: 2,
            synth: SynthSpec {
                seed: 99,
                noise: 0.125,
                ..SynthSpec::default()
            },
        };
        let text = m.render();
        assert_eq!(DatasetManifest::parse(&text).unwrap(), m);
        assert!(DatasetManifest::parse("seeds = 3").is_err());
        let ds = m.generate().unwrap();
        assert_eq!((ds.train.len(), ds.eval.len()), (3, 2));
        assert_ne!(ds.train[0], ds.eval[0]);
    }

    #[test]
    fn slab_start_examples() {
        assert_eq!(slab_starts(32).unwrap(), [0, 8, 16]);
        assert_eq!(slab_starts(16).unwrap(), [0]);
        assert_eq!(slab_starts(20).unwrap(), [0, 4]);
        assert_eq!(slab_starts(100).unwrap().last(), Some(&84));
        assert!(matches!(
            slab_starts(15),
            Err(Error::TooThin {
                slices: 15,
                required: 16
            })
        ));
    }

    #[test]
    fn slab_positions_and_overlap() {
        let v = volume(40, 1);
        let slabs = slice_slabs(&v).unwrap();
        let positions: Vec<_> = slabs.iter().map(|s| s.position).collect();
        use SlabPosition::*;
        assert_eq!(positions, [First, Interior, Interior, Last]);
        let plane = 16;
        for pair in slabs.windows(2) {
            let (a, b) = (&pair[0].data, &pair[1].data);
            assert_eq!(&a.data()[8 * plane..], &b.data()[..8 * plane]);
        }
    }

    #[test]
    fn slice_ten_of_thirty_two_comes_from_first_slab() {
        let owners = slice_owners(&[0, 8, 16]).unwrap();
        assert_eq!(owners[10], (0, 10));
        assert_eq!(owners[12], (1, 4));
        assert_eq!(owners[31], (2, 15));
    }

    #[test]
    fn enlarged_overlap_prefers_later_slab() {
        let owners = slice_owners(&[0, 4]).unwrap();
        assert_eq!(owners[7], (0, 7));
        assert_eq!(owners[8], (1, 4));
        assert_eq!(owners[19], (1, 15));
    }

    #[test]
    fn gap_is_reported() {
        assert!(matches!(slice_owners(&[0, 16]), Err(Error::Composition(_))));
        assert!(matches!(slice_owners(&[]), Err(Error::Composition(_))));
    }

    #[test]
    fn single_slab_passes_through() {
        let v = volume(16, 2);
        let slabs = slice_slabs(&v).unwrap();
        let pred = slabs[0].data.clone();
        let out = compose_probabilities(&[(&slabs[0], pred.clone())]).unwrap();
        assert_eq!(out, pred);
    }

    proptest! {
        #[test]
        fn identity_round_trip(slices in 16usize..120, seed in any::<u64>()) {
            let v = volume(slices, seed);
            let slabs = slice_slabs(&v).unwrap();
            let parts: Vec<_> = slabs.iter().map(|s| (s, s.target.clone())).collect();
            let (probs, writes) = compose_with_writes(&parts).unwrap();
            prop_assert!(writes.iter().all(|&w| w == 1));
            prop_assert_eq!(probs.data(), v.mask());
            let mask = compose_prediction(&parts).unwrap();
            prop_assert_eq!(mask.data(), v.mask());
        }
    }

    #[test]
    fn nrrd_round_trip_both_encodings() {
        let grid = Grid3::new(3, 2, 4, (0..24).map(|i| i as f64 * 0.5 - 3.0).collect()).unwrap();
        for enc in [NrrdEncoding::Raw, NrrdEncoding::Gzip] {
            let bytes = encode_nrrd(&grid, enc).unwrap();
            assert_eq!(parse_nrrd(&bytes).unwrap(), grid);
        }
    }

    #[test]
    fn nrrd_rejections_name_the_field() {
        let header = |extra: &str| format!("NRRD0004\ntype: uchar\n{extra}\n\n").into_bytes();
        let field_of = |bytes: Vec<u8>| match parse_nrrd(&bytes) {
            Err(Error::UnsupportedFormat { field, .. }) => field,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(field_of(header("dimension: 4\nsizes: 1 1 1 1\nencoding: raw")), "dimension");
        assert_eq!(field_of(header("dimension: 3\nsizes: 1 1 1\nencoding: ascii")), "encoding");
        assert_eq!(
            field_of(header("dimension: 3\nsizes: 1 1 1\nencoding: raw\ndata file: x.raw")),
            "data file"
        );
        assert!(matches!(parse_nrrd(b"P5\n"), Err(Error::Format(_))));
        let mut short = header("dimension: 3\nsizes: 2 1 1\nencoding: raw");
        short.push(1);
        assert!(matches!(parse_nrrd(&short), Err(Error::Format(_))));
    }

    #[test]
    fn nrrd_integer_types_decode() {
        let mut bytes = b"NRRD0004\ntype: short\ndimension: 3\nsizes: 2 1 1\nendian: little\nencoding: raw\n\n".to_vec();
        bytes.extend_from_slice(&(-300i16).to_le_bytes());
        bytes.extend_from_slice(&(1200i16).to_le_bytes());
        assert_eq!(parse_nrrd(&bytes).unwrap().values, [-300.0, 1200.0]);
    }

    #[test]
    fn pgm_dump_writes_one_file_per_slice() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid3::new(2, 2, 3, vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.2, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let paths = write_pgm_slices(dir.path(), "mask", &grid).unwrap();
        assert_eq!(paths.len(), 2);
        let bytes = fs::read(&paths[0]).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 255, 0, 51]);
    }
}
