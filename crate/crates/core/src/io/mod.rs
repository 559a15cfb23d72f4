//! File formats and the synthetic scene generator.

mod synth;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};
use crate::gaussian::{Branch, GaussianCloud};
use crate::raster::RgbImage;

pub use synth::{
    driving_curve, head_prior, render_head, synth_scene, CameraSpec, FrameEntry, HeadState, Manifest, Preset, SceneBundle,
    SynthOptions, HEAD_BOX_MAX, HEAD_BOX_MIN,
};

/// Environment variable that redirects default output directories.
pub const OUT_DIR_ENV: &str = "TALKHEAD_OUT_DIR";

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            PlyType::I8 => b[0] as i8 as f64,
            PlyType::U8 => b[0] as f64,
            PlyType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Mu(usize),
    Scale(usize),
    Rot(usize),
    Opacity,
    Feat(usize),
    Branch,
}

fn slot_of(name: &str) -> Option<Slot> {
    let idx = |prefix: &str, n: usize| {
        name.strip_prefix(prefix)
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&i| i < n)
    };
    match name {
        "x" => Some(Slot::Mu(0)),
        "y" => Some(Slot::Mu(1)),
        "z" => Some(Slot::Mu(2)),
        "opacity" => Some(Slot::Opacity),
        "branch" => Some(Slot::Branch),
        _ => idx("scale_", 3)
            .map(Slot::Scale)
            .or_else(|| idx("rot_", 4).map(Slot::Rot))
            .or_else(|| idx("f_", usize::MAX).map(Slot::Feat)),
    }
}

/// Binary little-endian PLY with one `vertex` element: `x y z`, `scale_0..2`
/// (log scale), `rot_0..3` (w x y z), `opacity` (logit), `f_0..f_{Z-1}` and
/// a `uchar branch` tag (0 visible, 1 occluded). Values are stored as doubles.
pub fn write_ply(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    let z = cloud.feat_dim();
    let mut head = String::from("ply\nformat binary_little_endian 1.0\n");
    head.push_str(&format!("element vertex {}\n", cloud.len()));
    let mut names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names.push("opacity".into());
    names.extend((0..z).map(|i| format!("f_{i}")));
    for n in &names {
        head.push_str(&format!("property double {n}\n"));
    }
    head.push_str("property uchar branch\nend_header\n");

    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut buf = Vec::with_capacity(head.len() + cloud.len() * (8 * (11 + z) + 1));
    buf.extend_from_slice(head.as_bytes());
    for i in 0..cloud.len() {
        let p = cloud.get(i);
        let vals = p.mu.iter().chain(&p.scale_log).chain(&p.rot).chain([&p.opacity_logit]).chain(&p.feat);
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(cloud.tag(i).as_u8());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a cloud written by [`write_ply`] or any binary little-endian PLY with
/// the same property names in any order and any numeric type. A file without
/// `branch` is imported as all-visible with a warning.
pub fn read_ply(path: &Path) -> Result<GaussianCloud> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let bad = |r: String| Error::format(path, r);

    let end = b"end_header\n";
    let hdr_len = bytes
        .windows(end.len())
        .position(|w| w == end)
        .map(|p| p + end.len())
        .ok_or_else(|| bad("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..hdr_len]).map_err(|_| bad("header is not text".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply signature".into()));
    }
    let mut count = None;
    let mut props: Vec<(Slot, PlyType)> = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", ..] => return Err(bad(format!("unsupported format line `{line}`"))),
            ["comment", ..] | ["obj_info", ..] | ["end_header"] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count `{n}`")))?);
                in_vertex = true;
            }
            ["element", name, _] => return Err(bad(format!("unexpected element `{name}`"))),
            ["property", "list", ..] => return Err(bad("list properties are not supported".into())),
            ["property", ty, name] if in_vertex => {
                let ty = PlyType::parse(ty).ok_or_else(|| bad(format!("unknown property type `{ty}`")))?;
                let slot = slot_of(name).ok_or_else(|| bad(format!("unknown property `{name}`")))?;
                if props.iter().any(|(s, _)| *s == slot) {
                    return Err(bad(format!("duplicate property `{name}`")));
                }
                props.push((slot, ty));
            }
            _ => return Err(bad(format!("malformed header line `{line}`"))),
        }
    }
    let n = count.ok_or_else(|| bad("no vertex element".into()))?;
    let has = |s: Slot| props.iter().any(|(p, _)| *p == s);
    let required = (0..3)
        .map(Slot::Mu)
        .chain((0..3).map(Slot::Scale))
        .chain((0..4).map(Slot::Rot))
        .chain([Slot::Opacity]);
    for s in required {
        if !has(s) {
            return Err(bad(format!("missing property {s:?}")));
        }
    }
    let z = props.iter().filter(|(s, _)| matches!(s, Slot::Feat(_))).count();
    if z == 0 || (0..z).any(|k| !has(Slot::Feat(k))) {
        return Err(bad("feature properties must be f_0..f_{Z-1}".into()));
    }
    let has_branch = has(Slot::Branch);
    if !has_branch {
        log::warn!("{}: no `branch` property, importing all primitives as visible", path.display());
    }
    let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
    let body = &bytes[hdr_len..];
    if body.len() != n * stride {
        return Err(bad(format!("expected {} body bytes, found {}", n * stride, body.len())));
    }

    let mut mu = vec![0.0; 3 * n];
    let mut scale = vec![0.0; 3 * n];
    let mut rot = vec![0.0; 4 * n];
    let mut opacity = vec![0.0; n];
    let mut feat = vec![0.0; z * n];
    let mut tags = vec![Branch::Visible; n];
    for (i, row) in body.chunks_exact(stride).enumerate() {
        let mut off = 0;
        for &(slot, ty) in &props {
            let v = ty.read(&row[off..]);
            off += ty.size();
            match slot {
                Slot::Mu(k) => mu[3 * i + k] = v,
                Slot::Scale(k) => scale[3 * i + k] = v,
                Slot::Rot(k) => rot[4 * i + k] = v,
                Slot::Opacity => opacity[i] = v,
                Slot::Feat(k) => feat[z * i + k] = v,
                Slot::Branch => {
                    tags[i] = Branch::from_u8(v as u8)
                        .filter(|_| v.fract() == 0.0 && (0.0..=255.0).contains(&v))
                        .ok_or_else(|| bad(format!("invalid branch value {v} at vertex {i}")))?;
                }
            }
        }
    }
    GaussianCloud::from_arrays(z, mu, scale, rot, opacity, feat, tags).map_err(|e| bad(e.to_string()))
}

// ---------------------------------------------------------------- PNG

/// Reads an 8-bit RGB, RGBA, grey or grey-alpha PNG into `[0, 1]` values.
pub fn read_png(path: &Path) -> Result<RgbImage> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let px = &buf[..info.buffer_size()];
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette image")),
    };
    let data = px
        .chunks_exact(channels)
        .flat_map(|p| {
            let rgb = if channels < 3 { [p[0]; 3] } else { [p[0], p[1], p[2]] };
            rgb.map(|v| v as f64 / 255.0)
        })
        .collect();
    RgbImage::new(info.width as usize, info.height as usize, data)
}

// ---------------------------------------------------------------- config

/// Loads a TOML config (or the defaults when `path` is `None`) and applies
/// `section.key=value` overrides. Values parse as TOML and fall back to strings.
pub fn load_config<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::format(p, e.to_string()))?
        }
        None => toml::Table::new(),
    };
    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let value = parse_value(raw.trim());
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// The explicit directory if given, else `$TALKHEAD_OUT_DIR/<name>`, else `name`.
pub fn output_dir(explicit: Option<&Path>, name: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(name),
        _ => PathBuf::from(name),
    }
}

#[cfg(test)]
mod tests;
