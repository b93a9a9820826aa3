//! Point-cloud files: `fpc` text and binary, and ASCII PLY.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

use super::ClassSchema;

pub const FPC_BIN_MAGIC: &[u8; 4] = b"FPC1";
pub const FPC_VERSION: u16 = 1;
const FLAG_COLOR: u8 = 1;
const FLAG_LABEL: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    FpcText,
    FpcBin,
    PlyAscii,
}

impl CloudFormat {
    /// PLY by extension, otherwise by the leading magic bytes.
    pub fn sniff(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
            return Ok(CloudFormat::PlyAscii);
        }
        let mut head = [0u8; 4];
        let mut f = std::fs::File::open(path)?;
        let got = f.read(&mut head)?;
        match &head[..got] {
            h if h == FPC_BIN_MAGIC => Ok(CloudFormat::FpcBin),
            b"FPC " => Ok(CloudFormat::FpcText),
            _ => Err(Error::format(path.display().to_string(), "unrecognised file header (expected FPC1, 'FPC ' or a .ply extension)")),
        }
    }
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    load_cloud_as(path, CloudFormat::sniff(path)?)
}

pub fn load_cloud_as(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    match format {
        CloudFormat::FpcText => read_fpc_text(path),
        CloudFormat::FpcBin => read_fpc_bin(&std::fs::read(path)?, path),
        CloudFormat::PlyAscii => read_ply(path),
    }
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let bytes = match format {
        CloudFormat::FpcText => fpc_text(cloud).into_bytes(),
        CloudFormat::FpcBin => fpc_bin(cloud),
        CloudFormat::PlyAscii => ply_by_label(cloud, &ClassSchema::facade())?.into_bytes(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn fpc_text(cloud: &PointCloud) -> String {
    let mut s = format!(
        "FPC 1 {} {} {}\n",
        cloud.len(),
        cloud.colors.is_some() as u8,
        cloud.labels.is_some() as u8
    );
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        // `{}` on f64 prints the shortest string that parses back exactly
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        if let Some(c) = &cloud.colors {
            let _ = write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        if let Some(l) = &cloud.labels {
            let _ = write!(s, " {}", l[i]);
        }
        s.push('\n');
    }
    s
}

fn parse_flag(tok: Option<&str>, path: &Path, what: &str) -> Result<bool> {
    match tok {
        Some("0") => Ok(false),
        Some("1") => Ok(true),
        other => Err(Error::format(path.display().to_string(), format!("line 1: {what} flag must be 0 or 1, got {other:?}"))),
    }
}

fn read_fpc_text(path: &Path) -> Result<PointCloud> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.ok_or_else(|| Error::format(path.display().to_string(), "line 1: empty file"))?;
    let mut tok = header.split_whitespace();
    if tok.next() != Some("FPC") {
        return Err(Error::format(path.display().to_string(), "line 1: header must start with 'FPC'"));
    }
    if tok.next() != Some("1") {
        return Err(Error::format(path.display().to_string(), "line 1: unsupported version (expected 1)"));
    }
    let count: usize = tok
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format(path.display().to_string(), "line 1: missing or invalid point count"))?;
    let has_color = parse_flag(tok.next(), path, "has_color")?;
    let has_label = parse_flag(tok.next(), path, "has_label")?;
    if tok.next().is_some() {
        return Err(Error::format(path.display().to_string(), "line 1: trailing fields in header"));
    }
    let fields = 3 + if has_color { 3 } else { 0 } + has_label as usize;
    let mut positions = Vec::with_capacity(count);
    let mut colors = has_color.then(|| Vec::with_capacity(count));
    let mut labels = has_label.then(|| Vec::with_capacity(count));
    let mut seen = 0;
    for (no, line) in lines.enumerate() {
        let line = line?;
        let lineno = no + 2;
        if line.trim().is_empty() {
            continue;
        }
        if seen == count {
            return Err(Error::format(path.display().to_string(), format!("line {lineno}: more points than the declared {count}")));
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != fields {
            return Err(Error::format(path.display().to_string(), format!("line {lineno}: expected {fields} fields, found {}", t.len())));
        }
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = t[a]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(path.display().to_string(), format!("line {lineno}: bad coordinate '{}'", t[a])))?;
        }
        positions.push(p);
        if let Some(c) = colors.as_mut() {
            let mut rgb = [0u8; 3];
            for a in 0..3 {
                rgb[a] = t[3 + a]
                    .parse()
                    .map_err(|_| Error::format(path.display().to_string(), format!("line {lineno}: color '{}' outside 0..=255", t[3 + a])))?;
            }
            c.push(rgb);
        }
        if let Some(l) = labels.as_mut() {
            let v: u8 = t[fields - 1]
                .parse()
                .ok()
                .filter(|&v: &u8| (v as usize) < ClassSchema::facade().len())
                .ok_or_else(|| Error::format(path.display().to_string(), format!("line {lineno}: label '{}' out of range", t[fields - 1])))?;
            l.push(v);
        }
        seen += 1;
    }
    if seen != count {
        return Err(Error::format(path.display().to_string(), format!("header declares {count} points but the file holds {seen}")));
    }
    PointCloud::new(positions, colors, labels)
}

pub fn fpc_bin(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let flags = if cloud.colors.is_some() { FLAG_COLOR } else { 0 } | if cloud.labels.is_some() { FLAG_LABEL } else { 0 };
    let mut out = Vec::with_capacity(15 + n * 28);
    out.extend_from_slice(FPC_BIN_MAGIC);
    out.extend_from_slice(&FPC_VERSION.to_le_bytes());
    out.push(flags);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for i in 0..n {
        for v in cloud.positions[i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(c) = &cloud.colors {
            out.extend_from_slice(&c[i]);
        }
        if let Some(l) = &cloud.labels {
            out.push(l[i]);
        }
    }
    out
}

pub fn read_fpc_bin(buf: &[u8], path: &Path) -> Result<PointCloud> {
    let need = |off: usize, len: usize, what: &str| -> Result<()> {
        if off + len > buf.len() {
            Err(Error::format(path.display().to_string(), format!("offset {off}: truncated while reading {what}")))
        } else {
            Ok(())
        }
    };
    need(0, 15, "header")?;
    if &buf[..4] != FPC_BIN_MAGIC {
        return Err(Error::format(path.display().to_string(), "offset 0: bad magic (expected FPC1)"));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != FPC_VERSION {
        return Err(Error::format(path.display().to_string(), format!("offset 4: unsupported version {version}")));
    }
    let flags = buf[6];
    if flags & !(FLAG_COLOR | FLAG_LABEL) != 0 {
        return Err(Error::format(path.display().to_string(), format!("offset 6: unknown flag bits {flags:#04x}")));
    }
    let count = u64::from_le_bytes(buf[7..15].try_into().unwrap()) as usize;
    let has_color = flags & FLAG_COLOR != 0;
    let has_label = flags & FLAG_LABEL != 0;
    let record = 24 + if has_color { 3 } else { 0 } + has_label as usize;
    let expected = count.checked_mul(record).and_then(|b| b.checked_add(15));
    if expected != Some(buf.len()) {
        return Err(Error::format(
            path.display().to_string(),
            format!("offset 15: {count} records of {record} bytes do not match the {} payload bytes", buf.len() - 15),
        ));
    }
    let n_class = ClassSchema::facade().len();
    let mut positions = Vec::with_capacity(count);
    let mut colors = has_color.then(|| Vec::with_capacity(count));
    let mut labels = has_label.then(|| Vec::with_capacity(count));
    let mut off = 15;
    for _ in 0..count {
        need(off, record, "a point record")?;
        let mut p = [0.0; 3];
        for (a, v) in p.iter_mut().enumerate() {
            *v = f64::from_le_bytes(buf[off + 8 * a..off + 8 * a + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(path.display().to_string(), format!("offset {}: non-finite coordinate", off + 8 * a)));
            }
        }
        positions.push(p);
        off += 24;
        if let Some(c) = colors.as_mut() {
            c.push([buf[off], buf[off + 1], buf[off + 2]]);
            off += 3;
        }
        if let Some(l) = labels.as_mut() {
            if buf[off] as usize >= n_class {
                return Err(Error::format(path.display().to_string(), format!("offset {off}: label {} out of range", buf[off])));
            }
            l.push(buf[off]);
            off += 1;
        }
    }
    PointCloud::new(positions, colors, labels)
}

/// ASCII PLY with each point coloured by its label through the schema colormap.
pub fn ply_by_label(cloud: &PointCloud, schema: &ClassSchema) -> Result<String> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("PLY export colours points by label, but the cloud has no labels"))?;
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    );
    for (p, &l) in cloud.positions.iter().zip(labels) {
        let c = schema
            .colors
            .get(l as usize)
            .ok_or_else(|| Error::invalid(format!("label {l} has no colormap entry")))?;
        let _ = writeln!(s, "{} {} {} {} {} {}", p[0] as f32, p[1] as f32, p[2] as f32, c[0], c[1], c[2]);
    }
    Ok(s)
}

fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| {
        lines
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| Error::format(path.display().to_string(), format!("unexpected end of file while reading {what}")))
    };
    if next("magic")?.1 != "ply" {
        return Err(Error::format(path.display().to_string(), "line 1: missing 'ply' magic"));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let (no, line) = next("header")?;
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", "ascii", _] => {}
            ["format", ..] => return Err(Error::format(path.display().to_string(), format!("line {no}: only ASCII PLY is supported"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::format(path.display().to_string(), format!("line {no}: bad vertex count")))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(Error::format(path.display().to_string(), format!("line {no}: unexpected header line '{line}'"))),
        }
    }
    let count = count.ok_or_else(|| Error::format(path.display().to_string(), "header has no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::format(path.display().to_string(), "vertex element lacks x, y, z properties")),
    };
    let rgb = match (col("red"), col("green"), col("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let mut positions = Vec::with_capacity(count);
    let mut colors = rgb.map(|_| Vec::with_capacity(count));
    for _ in 0..count {
        let (no, line) = next("vertex data")?;
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() < props.len() {
            return Err(Error::format(path.display().to_string(), format!("line {no}: expected {} values", props.len())));
        }
        let num = |i: usize| {
            t[i].parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(path.display().to_string(), format!("line {no}: bad number '{}'", t[i])))
        };
        positions.push([num(x)?, num(y)?, num(z)?]);
        if let (Some(c), Some(idx)) = (colors.as_mut(), rgb) {
            let mut v = [0u8; 3];
            for a in 0..3 {
                v[a] = t[idx[a]]
                    .parse()
                    .map_err(|_| Error::format(path.display().to_string(), format!("line {no}: color '{}' outside 0..=255", t[idx[a]])))?;
            }
            c.push(v);
        }
    }
    PointCloud::new(positions, colors, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_header_layout() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0]], Some(vec![[4, 5, 6]]), Some(vec![7])).unwrap();
        let b = fpc_bin(&c);
        assert_eq!(&b[..4], b"FPC1");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 3);
        assert_eq!(&b[7..15], &1u64.to_le_bytes());
        assert_eq!(b.len(), 15 + 28);
        assert_eq!(&b[39..43], &[4, 5, 6, 7]);
    }

    #[test]
    fn bin_errors_carry_offsets() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0]; 2], None, Some(vec![1, 2])).unwrap();
        let mut b = fpc_bin(&c);
        let p = Path::new("x.fpc");
        let err = read_fpc_bin(&b[..30], p).unwrap_err().to_string();
        assert!(err.contains("offset 15"), "{err}");
        let last = b.len() - 1;
        b[last] = 9;
        let err = read_fpc_bin(&b, p).unwrap_err().to_string();
        assert!(err.contains(&format!("offset {last}")) && err.contains("label 9"), "{err}");
    }
}
