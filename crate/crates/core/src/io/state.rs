//! Versioned, sectioned state file for a [`GroupState`].
//!
//! ```text
//! GRSTATE 1
//! section <name> <byte length>
//! <bytes>
//! ...
//! end
//! ```
//!
//! Volumes are stored as float64 containers so reimport is bit-exact. Every section is parsed
//! before any state is assembled, so a damaged file never yields a partial state.

use std::collections::BTreeMap;
use std::path::Path;

use crate::diffeo::{TransformSet, VelocitySet};
use crate::engine::{EngineConfig, GroupState, TraceRecord};
use crate::error::{Error, Result};
use crate::generative::IntensityCodebook;
use crate::grid::{CategoricalField, Field, VectorField};
use crate::io::container::{self, Dtype, Volume};
use crate::structrep::{ModalityMixture, TaggedImage, ViewExtractorParams};

pub const MAGIC: &str = "GRSTATE";
pub const VERSION: &str = "1";

fn floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

fn parse_floats(section: &str, s: &str) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::parse(section, format!("bad number `{t}`"))))
        .collect()
}

/// Text form of trained extractors: one `mixture` block per modality.
pub fn encode_extractor(params: &ViewExtractorParams) -> String {
    let mut s = format!("epsilon {:?}\n", params.epsilon);
    for m in &params.mixtures {
        s.push_str(&format!(
            "mixture {}\nmeans {}\nvariances {}\nweights {}\n",
            m.modality,
            floats(&m.means),
            floats(&m.variances),
            floats(&m.weights)
        ));
    }
    s
}

pub fn decode_extractor(text: &str) -> Result<ViewExtractorParams> {
    const S: &str = "extractor";
    let mut epsilon = None;
    let mut mixtures: Vec<ModalityMixture> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "epsilon" => epsilon = Some(parse_floats(S, rest)?.first().copied().unwrap_or(f64::NAN)),
            "mixture" => mixtures.push(ModalityMixture {
                modality: rest.trim().to_string(),
                means: vec![],
                variances: vec![],
                weights: vec![],
            }),
            "means" | "variances" | "weights" => {
                let m = mixtures
                    .last_mut()
                    .ok_or_else(|| Error::parse(S, format!("`{key}` before any `mixture`")))?;
                let v = parse_floats(S, rest)?;
                match key {
                    "means" => m.means = v,
                    "variances" => m.variances = v,
                    _ => m.weights = v,
                }
            }
            other => return Err(Error::parse(S, format!("unknown key `{other}`"))),
        }
    }
    let epsilon = epsilon.ok_or_else(|| Error::parse(S, "missing `epsilon`"))?;
    ViewExtractorParams::new(epsilon, mixtures).map_err(|e| Error::parse(S, e.to_string()))
}

pub fn encode_codebooks(codebooks: &[IntensityCodebook]) -> String {
    codebooks.iter().map(|c| floats(&c.levels) + "\n").collect()
}

pub fn decode_codebooks(text: &str) -> Result<Vec<IntensityCodebook>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| IntensityCodebook::new(parse_floats("codebooks", l)?).map_err(|e| Error::parse("codebooks", e.to_string())))
        .collect()
}

const TRACE_HEADER: &str = "level,iteration,objective,reconstruction,structural,regularization,alpha";

/// Objective trace as CSV with a header row.
pub fn encode_trace(trace: &[TraceRecord]) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for r in trace {
        s.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{:?}\n",
            r.level, r.iteration, r.objective, r.reconstruction, r.structural, r.regularization, r.alpha
        ));
    }
    s
}

pub fn decode_trace(text: &str) -> Result<Vec<TraceRecord>> {
    const S: &str = "trace";
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::parse(S, "missing trace header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(Error::parse(S, format!("expected 7 columns, got {}", f.len())));
            }
            let int = |t: &str| t.parse::<usize>().map_err(|_| Error::parse(S, format!("bad integer `{t}`")));
            let num = |t: &str| t.parse::<f64>().map_err(|_| Error::parse(S, format!("bad number `{t}`")));
            Ok(TraceRecord {
                level: int(f[0])?,
                iteration: int(f[1])?,
                objective: num(f[2])?,
                reconstruction: num(f[3])?,
                structural: num(f[4])?,
                regularization: num(f[5])?,
                alpha: num(f[6])?,
            })
        })
        .collect()
}

fn push_section(out: &mut Vec<u8>, name: &str, bytes: &[u8]) {
    out.extend_from_slice(format!("section {name} {}\n", bytes.len()).as_bytes());
    out.extend_from_slice(bytes);
    out.push(b'\n');
}

fn vol(v: Volume, modality: Option<&str>) -> Vec<u8> {
    container::encode(&v, Dtype::Float64, modality)
}

/// Serialise a state into the sectioned byte format.
pub fn encode_state(state: &GroupState) -> Result<Vec<u8>> {
    let mut out = format!("{MAGIC} {VERSION}\n").into_bytes();
    let config = toml::to_string(&state.config).map_err(|e| Error::parse("config", e.to_string()))?;
    push_section(&mut out, "config", config.as_bytes());
    push_section(&mut out, "extractor", encode_extractor(&state.extractor).as_bytes());
    push_section(&mut out, "codebooks", encode_codebooks(&state.codebooks).as_bytes());
    push_section(&mut out, "trace", encode_trace(&state.trace).as_bytes());
    for (j, t) in state.images.iter().enumerate() {
        push_section(&mut out, &format!("image.{j}"), &vol(Volume::Image(t.image.clone()), Some(&t.modality)));
    }
    for (j, p) in state.posteriors.iter().enumerate() {
        push_section(&mut out, &format!("posterior.{j}"), &vol(Volume::Categorical(p.clone()), None));
    }
    for (l, level) in state.level_posteriors.iter().enumerate() {
        for (j, p) in level.iter().enumerate() {
            push_section(&mut out, &format!("level_posterior.{l}.{j}"), &vol(Volume::Categorical(p.clone()), None));
        }
    }
    for (j, per_level) in state.velocities.fields().iter().enumerate() {
        for (l, v) in per_level.iter().enumerate() {
            push_section(&mut out, &format!("velocity.{j}.{l}"), &vol(Volume::Vector(v.clone()), None));
        }
    }
    for (name, fields) in [
        ("total", &state.totals),
        ("forward", &state.transforms.forward),
        ("inverse", &state.transforms.inverse),
    ] {
        for (j, v) in fields.iter().enumerate() {
            push_section(&mut out, &format!("{name}.{j}"), &vol(Volume::Vector(v.clone()), None));
        }
    }
    out.extend_from_slice(b"end\n");
    Ok(out)
}

fn split_sections(bytes: &[u8]) -> Result<BTreeMap<String, &[u8]>> {
    let line_at = |pos: usize| -> Result<(&str, usize)> {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format {
                offset: pos as u64,
                message: "unterminated line".into(),
            })?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| Error::Format {
            offset: pos as u64,
            message: "non-UTF-8 section header".into(),
        })?;
        Ok((line, pos + nl + 1))
    };
    let (first, mut pos) = line_at(0)?;
    let mut parts = first.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::Format {
            offset: 0,
            message: format!("missing `{MAGIC}` magic"),
        });
    }
    let version = parts.next().unwrap_or("");
    if version != VERSION {
        return Err(Error::Version {
            found: version.into(),
            expected: VERSION.into(),
        });
    }
    let mut sections = BTreeMap::new();
    loop {
        let (line, next) = line_at(pos)?;
        if line == "end" {
            if next != bytes.len() {
                return Err(Error::Format {
                    offset: next as u64,
                    message: "trailing bytes after `end`".into(),
                });
            }
            return Ok(sections);
        }
        let bad = |m: String| Error::Format {
            offset: pos as u64,
            message: m,
        };
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 3 || f[0] != "section" {
            return Err(bad(format!("expected `section <name> <len>`, got `{line}`")));
        }
        let len: usize = f[2].parse().map_err(|_| bad(format!("bad section length `{}`", f[2])))?;
        let body_end = next + len;
        if body_end + 1 > bytes.len() || bytes[body_end] != b'\n' {
            return Err(Error::parse(f[1], "section truncated"));
        }
        if sections.insert(f[1].to_string(), &bytes[next..body_end]).is_some() {
            return Err(Error::parse(f[1], "duplicate section"));
        }
        pos = body_end + 1;
    }
}

struct Sections<'a>(BTreeMap<String, &'a [u8]>);

impl<'a> Sections<'a> {
    fn raw(&self, name: &str) -> Result<&'a [u8]> {
        self.0.get(name).copied().ok_or_else(|| Error::parse(name, "section missing"))
    }

    fn text(&self, name: &str) -> Result<&'a str> {
        std::str::from_utf8(self.raw(name)?).map_err(|_| Error::parse(name, "not UTF-8"))
    }

    fn volume(&self, name: &str) -> Result<(Volume, Option<String>)> {
        let (v, h) = container::decode(self.raw(name)?).map_err(|e| Error::parse(name, e.to_string()))?;
        Ok((v, h.modality))
    }

    fn vector(&self, name: &str) -> Result<VectorField> {
        self.volume(name)?.0.into_vector().map_err(|e| Error::parse(name, e.to_string()))
    }

    fn categorical(&self, name: &str) -> Result<CategoricalField> {
        self.volume(name)?
            .0
            .into_categorical()
            .map_err(|e| Error::parse(name, e.to_string()))
    }

    /// Number of consecutive sections `prefix.0`, `prefix.1`, ...
    fn count(&self, prefix: &str) -> usize {
        (0..).take_while(|j| self.0.contains_key(&format!("{prefix}.{j}"))).count()
    }
}

/// Parse a state produced by [`encode_state`].
pub fn decode_state(bytes: &[u8]) -> Result<GroupState> {
    let s = Sections(split_sections(bytes)?);
    let config: EngineConfig = toml::from_str(s.text("config")?).map_err(|e| Error::parse("config", e.to_string()))?;
    let extractor = decode_extractor(s.text("extractor")?)?;
    let codebooks = decode_codebooks(s.text("codebooks")?)?;
    let trace = decode_trace(s.text("trace")?)?;

    let n = s.count("image");
    if n == 0 {
        return Err(Error::parse("image.0", "section missing"));
    }
    let mut images = Vec::with_capacity(n);
    for j in 0..n {
        let name = format!("image.{j}");
        let (v, modality) = s.volume(&name)?;
        let image = v.into_image().map_err(|e| Error::parse(&name, e.to_string()))?;
        let modality = modality.ok_or_else(|| Error::parse(&name, "image lacks a modality tag"))?;
        images.push(TaggedImage { modality, image });
    }
    let each = |prefix: &str| -> Result<Vec<VectorField>> { (0..n).map(|j| s.vector(&format!("{prefix}.{j}"))).collect() };
    let posteriors = (0..n)
        .map(|j| s.categorical(&format!("posterior.{j}")))
        .collect::<Result<Vec<_>>>()?;
    let levels = config.levels;
    let level_posteriors = (0..levels)
        .map(|l| (0..n).map(|j| s.categorical(&format!("level_posterior.{l}.{j}"))).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    let vfields = (0..n)
        .map(|j| (0..levels).map(|l| s.vector(&format!("velocity.{j}.{l}"))).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    let grids = vfields[0].iter().map(|v: &VectorField| v.grid().clone()).collect();
    let velocities = VelocitySet::new(grids, vfields).map_err(|e| Error::parse("velocity", e.to_string()))?;
    let totals = each("total")?;
    let transforms = TransformSet {
        forward: each("forward")?,
        inverse: each("inverse")?,
    };
    if codebooks.len() != n {
        return Err(Error::parse("codebooks", format!("expected {n} codebooks, found {}", codebooks.len())));
    }
    Ok(GroupState {
        config,
        images,
        extractor,
        posteriors,
        level_posteriors,
        velocities,
        totals,
        transforms,
        codebooks,
        trace,
    })
}

pub fn export_state(state: &GroupState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_state(state)?).map_err(|e| Error::io(path, e))
}

pub fn import_state(path: &Path) -> Result<GroupState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_state(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extractor_text_roundtrips_exactly() {
        let p = ViewExtractorParams::new(
            1e-6,
            vec![ModalityMixture {
                modality: "t1".into(),
                means: vec![0.1, 1.0 / 3.0],
                variances: vec![0.01, 2e-3],
                weights: vec![0.25, 0.75],
            }],
        )
        .unwrap();
        assert_eq!(decode_extractor(&encode_extractor(&p)).unwrap(), p);
    }

    #[test]
    fn trace_roundtrips_and_empty_is_header_only() {
        assert_eq!(encode_trace(&[]).lines().count(), 1);
        let t = vec![TraceRecord {
            level: 1,
            iteration: 2,
            objective: -0.1,
            reconstruction: 1.0 / 7.0,
            structural: 3.0,
            regularization: 1e-300,
            alpha: 0.5,
        }];
        assert_eq!(decode_trace(&encode_trace(&t)).unwrap(), t);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        assert!(matches!(decode_state(b"NOTSTATE 1\nend\n"), Err(Error::Format { .. })));
        assert!(matches!(decode_state(b"GRSTATE 2\nend\n"), Err(Error::Version { .. })));
        match decode_state(b"GRSTATE 1\nsection config 100\nabc") {
            Err(Error::Parse { section, .. }) => assert_eq!(section, "config"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
