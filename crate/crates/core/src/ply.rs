//! Gaussian sets as PLY point clouds in the layout common 3DGS viewers read:
//! raw (pre-activation) opacity, log scales and unnormalized quaternions.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::{activate_params, GaussianSet, RawGaussian, SH_COEFFS};

fn ply_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Ply(msg.into()))
}

pub fn property_names() -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z"].map(String::from).to_vec();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..9).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

fn raw_to_row(g: &RawGaussian) -> Vec<f64> {
    let mut row = g.center.to_vec();
    row.extend((0..3).map(|c| g.sh[c * 4]));
    // f_rest is channel-major: all degree-1 terms of red, then green, then blue.
    for c in 0..3 {
        row.extend_from_slice(&g.sh[c * 4 + 1..c * 4 + 4]);
    }
    row.push(g.opacity_logit);
    row.extend_from_slice(&g.log_scale);
    row.extend_from_slice(&g.rotation);
    row
}

fn row_to_raw(row: &[f64]) -> RawGaussian {
    let mut sh = [0.0; SH_COEFFS];
    for c in 0..3 {
        sh[c * 4] = row[3 + c];
        sh[c * 4 + 1..c * 4 + 4].copy_from_slice(&row[6 + c * 3..9 + c * 3]);
    }
    RawGaussian {
        center: [row[0], row[1], row[2]],
        opacity_logit: row[15],
        log_scale: [row[16], row[17], row[18]],
        rotation: [row[19], row[20], row[21], row[22]],
        sh,
    }
}

pub fn write_ply_raw(path: &Path, raw: &[RawGaussian]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "ply\nformat binary_little_endian 1.0\nelement vertex {}", raw.len())?;
    for name in property_names() {
        writeln!(out, "property float {name}")?;
    }
    writeln!(out, "end_header")?;
    for g in raw {
        for v in raw_to_row(g) {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_ply(path: &Path, set: &GaussianSet) -> Result<()> {
    write_ply_raw(path, &set.to_raw())
}

#[derive(Clone, Copy)]
enum Kind {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl Kind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "float" | "float32" => Kind::F32,
            "double" | "float64" => Kind::F64,
            "uchar" | "uint8" => Kind::U8,
            "int" | "int32" => Kind::I32,
            "uint" | "uint32" => Kind::U32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Kind::U8 => 1,
            Kind::F32 | Kind::I32 | Kind::U32 => 4,
            Kind::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Kind::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            Kind::F64 => f64::from_le_bytes(b.try_into().unwrap()),
            Kind::U8 => b[0] as f64,
            Kind::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
            Kind::U32 => u32::from_le_bytes(b.try_into().unwrap()) as f64,
        }
    }
}

/// Reads raw parameters. Binary little-endian and ASCII bodies are accepted;
/// properties may appear in any order and unknown ones are skipped.
pub fn read_ply_raw(path: &Path) -> Result<Vec<RawGaussian>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != "ply" {
        return ply_err(format!("{} is not a PLY file", path.display()));
    }
    let mut ascii = false;
    let mut count = None;
    let mut props: Vec<(String, Kind)> = Vec::new();
    let mut in_vertex = false;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return ply_err("unexpected end of header");
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => ascii = true,
            ["format", "binary_little_endian", _] => ascii = false,
            ["format", f, _] => return ply_err(format!("unsupported format {f}")),
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse::<usize>().map_err(|_| Error::Ply(format!("bad vertex count {n}")))?);
                } else if count.is_none() {
                    return ply_err("elements before vertex are not supported");
                }
            }
            ["property", "list", ..] if in_vertex => return ply_err("list properties on vertices are not supported"),
            ["property", ty, name] if in_vertex => {
                let kind = Kind::parse(ty).ok_or_else(|| Error::Ply(format!("unsupported property type {ty}")))?;
                props.push((name.to_string(), kind));
            }
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::Ply("no vertex element".into()))?;
    let wanted = property_names();
    let columns: Vec<usize> = wanted
        .iter()
        .map(|w| {
            props
                .iter()
                .position(|(n, _)| n == w)
                .ok_or_else(|| Error::Ply(format!("missing property {w}")))
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; props.len()];
    let mut out = Vec::with_capacity(count);
    let stride: usize = props.iter().map(|(_, k)| k.size()).sum();
    let mut buf = vec![0u8; stride];
    let mut text = String::new();
    if ascii {
        r.read_to_string(&mut text)?;
    }
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    for i in 0..count {
        if ascii {
            let l = lines.next().ok_or_else(|| Error::Ply(format!("vertex {i} missing")))?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() < props.len() {
                return ply_err(format!("vertex {i}: expected {} values", props.len()));
            }
            for (v, t) in values.iter_mut().zip(&toks) {
                *v = t.parse().map_err(|_| Error::Ply(format!("vertex {i}: bad number {t}")))?;
            }
        } else {
            r.read_exact(&mut buf).map_err(|_| Error::Ply(format!("file truncated at vertex {i}")))?;
            let mut off = 0;
            for (v, (_, k)) in values.iter_mut().zip(&props) {
                *v = k.decode(&buf[off..off + k.size()]);
                off += k.size();
            }
        }
        let row: Vec<f64> = columns.iter().map(|&c| values[c]).collect();
        out.push(row_to_raw(&row));
    }
    Ok(out)
}

pub fn read_ply(path: &Path) -> Result<GaussianSet> {
    Ok(activate_params(&read_ply_raw(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_at_f32_precision() {
        let raw: Vec<RawGaussian> = (0..5)
            .map(|i| {
                let f = i as f64;
                RawGaussian {
                    center: [f, -f * 0.5, 2.0 + f],
                    opacity_logit: 0.3 * f - 1.0,
                    log_scale: [-3.0, -2.5, -2.0 + 0.1 * f],
                    rotation: [1.0, 0.1 * f, 0.0, -0.2],
                    sh: std::array::from_fn(|k| k as f64 * 0.01 - f * 0.1),
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ply");
        write_ply_raw(&p, &raw).unwrap();
        let back = read_ply_raw(&p).unwrap();
        assert_eq!(back.len(), raw.len());
        for (a, b) in raw.iter().zip(&back) {
            for (x, y) in raw_to_row(a).iter().zip(raw_to_row(b)) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn reads_ascii_with_extra_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ply");
        let mut header = String::from("ply\nformat ascii 1.0\nelement vertex 1\nproperty float nx\n");
        for n in property_names() {
            header.push_str(&format!("property double {n}\n"));
        }
        header.push_str("end_header\n0 ");
        header.push_str(&(0..23).map(|i| i.to_string()).collect::<Vec<_>>().join(" "));
        std::fs::write(&p, header).unwrap();
        let g = &read_ply_raw(&p).unwrap()[0];
        assert_eq!(g.center, [0.0, 1.0, 2.0]);
        assert_eq!(g.sh[0], 3.0);
        assert_eq!(g.sh[1..4], [6.0, 7.0, 8.0]);
        assert_eq!(g.opacity_logit, 15.0);
        assert_eq!(g.rotation, [19.0, 20.0, 21.0, 22.0]);
    }
}
