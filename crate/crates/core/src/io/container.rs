//! Self-describing raw array container.
//!
//! ```text
//! GRVOL 1
//! kind = vector
//! dims = 96 96
//! spacing = 1 1
//! channels = 2
//! dtype = float32
//! modality = t1        (optional)
//! classes = 4          (label volumes only)
//! end
//! <little-endian payload, voxel-major, channels interleaved>
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{CategoricalField, Field, GridSpec, ImageField, LabelField, VectorField};

pub const MAGIC: &str = "GRVOL";
pub const VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    Float32,
    Float64,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::Float32 => "float32",
            Dtype::Float64 => "float64",
        }
    }

    fn bytes(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Image,
    Vector,
    Categorical,
    Label,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Image => "image",
            Kind::Vector => "vector",
            Kind::Categorical => "categorical",
            Kind::Label => "label",
        }
    }
}

/// Any field that fits in a container.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Image(ImageField),
    Vector(VectorField),
    Categorical(CategoricalField),
    Label(LabelField),
}

impl Volume {
    pub fn kind(&self) -> Kind {
        match self {
            Volume::Image(_) => Kind::Image,
            Volume::Vector(_) => Kind::Vector,
            Volume::Categorical(_) => Kind::Categorical,
            Volume::Label(_) => Kind::Label,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        match self {
            Volume::Image(f) => f.grid(),
            Volume::Vector(f) => f.grid(),
            Volume::Categorical(f) => f.grid(),
            Volume::Label(f) => f.grid(),
        }
    }

    pub fn into_image(self) -> Result<ImageField> {
        match self {
            Volume::Image(f) => Ok(f),
            other => Err(Error::invalid(format!("expected an image volume, found {}", other.kind().name()))),
        }
    }

    pub fn into_vector(self) -> Result<VectorField> {
        match self {
            Volume::Vector(f) => Ok(f),
            other => Err(Error::invalid(format!("expected a vector volume, found {}", other.kind().name()))),
        }
    }

    pub fn into_categorical(self) -> Result<CategoricalField> {
        match self {
            Volume::Categorical(f) => Ok(f),
            other => Err(Error::invalid(format!(
                "expected a categorical volume, found {}",
                other.kind().name()
            ))),
        }
    }

    pub fn into_labels(self) -> Result<LabelField> {
        match self {
            Volume::Label(f) => Ok(f),
            other => Err(Error::invalid(format!("expected a label volume, found {}", other.kind().name()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub kind: Kind,
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub channels: usize,
    pub dtype: Dtype,
    pub modality: Option<String>,
    pub classes: Option<u32>,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

/// Serialise a volume; `modality` tags images with their acquisition type.
pub fn encode(volume: &Volume, dtype: Dtype, modality: Option<&str>) -> Vec<u8> {
    let grid = volume.grid();
    let (channels, values, classes): (usize, Vec<f64>, Option<u32>) = match volume {
        Volume::Image(f) => (1, f.values().to_vec(), None),
        Volume::Vector(f) => (f.dim(), f.components().to_vec(), None),
        Volume::Categorical(f) => (f.k(), f.probs().to_vec(), None),
        Volume::Label(f) => (1, f.labels().iter().map(|&l| f64::from(l)).collect(), Some(f.classes())),
    };
    let mut header = format!(
        "{MAGIC} {VERSION}\nkind = {}\ndims = {}\nspacing = {}\nchannels = {channels}\ndtype = {}\n",
        volume.kind().name(),
        join(grid.dims()),
        join(grid.spacing()),
        dtype.name()
    );
    if let Some(m) = modality {
        header.push_str(&format!("modality = {m}\n"));
    }
    if let Some(c) = classes {
        header.push_str(&format!("classes = {c}\n"));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.reserve(values.len() * dtype.bytes());
    for v in values {
        match dtype {
            Dtype::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::Float64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn parse_list<T: std::str::FromStr>(value: &str, offset: usize, key: &str) -> Result<Vec<T>> {
    value
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| format_err(offset, format!("bad `{key}` entry `{t}`"))))
        .collect()
}

/// Parse the text header; returns it with the payload start offset.
pub fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let nl = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(start, "unterminated header line"))?;
        *pos = start + nl + 1;
        let line = std::str::from_utf8(&bytes[start..start + nl]).map_err(|_| format_err(start, "header is not UTF-8"))?;
        Ok((start, line.to_string()))
    };
    let (_, first) = next_line(&mut pos)?;
    let mut parts = first.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(format_err(0, format!("missing `{MAGIC}` magic")));
    }
    let version = parts.next().unwrap_or("");
    if version != VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: VERSION.to_string(),
        });
    }
    let (mut kind, mut dims, mut spacing, mut channels, mut dtype, mut modality, mut classes) =
        (None, None, None, None, None, None, None);
    loop {
        let (off, line) = next_line(&mut pos)?;
        if line == "end" {
            break;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| format_err(off, format!("expected `key = value`, got `{line}`")))?;
        match key {
            "kind" => {
                kind = Some(match value {
                    "image" => Kind::Image,
                    "vector" => Kind::Vector,
                    "categorical" => Kind::Categorical,
                    "label" => Kind::Label,
                    other => return Err(format_err(off, format!("unknown kind `{other}`"))),
                })
            }
            "dims" => dims = Some(parse_list::<usize>(value, off, key)?),
            "spacing" => spacing = Some(parse_list::<f64>(value, off, key)?),
            "channels" => {
                channels = Some(value.parse::<usize>().map_err(|_| format_err(off, "bad `channels`"))?)
            }
            "dtype" => {
                dtype = Some(match value {
                    "float32" => Dtype::Float32,
                    "float64" => Dtype::Float64,
                    other => return Err(format_err(off, format!("unsupported dtype `{other}`"))),
                })
            }
            "modality" => modality = Some(value.to_string()),
            "classes" => classes = Some(value.parse::<u32>().map_err(|_| format_err(off, "bad `classes`"))?),
            other => return Err(format_err(off, format!("unknown header key `{other}`"))),
        }
    }
    let missing = |k: &str| format_err(pos, format!("header lacks `{k}`"));
    let dims: Vec<usize> = dims.ok_or_else(|| missing("dims"))?;
    let spacing = spacing.unwrap_or_else(|| vec![1.0; dims.len()]);
    let header = Header {
        kind: kind.ok_or_else(|| missing("kind"))?,
        channels: channels.ok_or_else(|| missing("channels"))?,
        dtype: dtype.ok_or_else(|| missing("dtype"))?,
        dims,
        spacing,
        modality,
        classes,
    };
    Ok((header, pos))
}

/// Parse a container produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(Volume, Header)> {
    let (header, start) = parse_header(bytes)?;
    let grid = GridSpec::with_spacing(&header.dims, &header.spacing).map_err(|e| format_err(0, e.to_string()))?;
    let count = grid.len() * header.channels;
    let expected = count * header.dtype.bytes();
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(format_err(
            start,
            format!(
                "payload has {} bytes but the header implies {expected}",
                payload.len()
            ),
        ));
    }
    let values: Vec<f64> = match header.dtype {
        Dtype::Float32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
        Dtype::Float64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let bad = |e: Error| format_err(start, e.to_string());
    let volume = match header.kind {
        Kind::Image => {
            if header.channels != 1 {
                return Err(format_err(0, "image volumes have one channel"));
            }
            Volume::Image(ImageField::new(grid, values).map_err(bad)?)
        }
        Kind::Vector => Volume::Vector(VectorField::new(grid, values).map_err(bad)?),
        Kind::Categorical => Volume::Categorical(CategoricalField::new(grid, header.channels, values).map_err(bad)?),
        Kind::Label => {
            let classes = header.classes.ok_or_else(|| format_err(0, "label volume lacks `classes`"))?;
            let labels = values
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 && v < f64::from(u32::MAX) {
                        Ok(v as u32)
                    } else {
                        Err(format_err(start, format!("label value {v} is not a non-negative integer")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Volume::Label(LabelField::new(grid, classes, labels).map_err(bad)?)
        }
    };
    Ok((volume, header))
}

pub fn write_container(path: &Path, volume: &Volume, dtype: Dtype, modality: Option<&str>) -> Result<()> {
    std::fs::write(path, encode(volume, dtype, modality)).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<(Volume, Header)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
