//! On-disk formats: directories of flat little-endian arrays described by a
//! plain-text header, and binary PGM/PPM images.
//!
//! Array directory layout:
//!
//! ```text
//! header.txt      scene-ssl-arrays 1
//!                 meta <key> <value>          (any number)
//!                 array <name> <dtype> <dims...>
//! <name>.bin      row-major, little-endian, dtype = f64 | u16 | u32
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &str = "scene-ssl-arrays 1";
const HEADER: &str = "header.txt";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U16(Vec<u16>),
    U32(Vec<u32>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::U16(_) => "u16",
            ArrayData::U32(_) => "u32",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U16(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_bytes(dtype: &str, bytes: &[u8]) -> Result<Self> {
        let bad = || Error::format("array data", format!("{} bytes do not fit dtype {dtype}", bytes.len()));
        Ok(match dtype {
            "f64" if bytes.len() % 8 == 0 => ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            "u16" if bytes.len() % 2 == 0 => ArrayData::U16(
                bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            "u32" if bytes.len() % 4 == 0 => ArrayData::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            "f64" | "u16" | "u32" => return Err(bad()),
            other => return Err(Error::format("array header", format!("unknown dtype {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// A set of arrays plus free-form metadata, stored as one directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayBundle {
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<NamedArray>,
}

impl ArrayBundle {
    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn with_array(mut self, name: &str, shape: &[usize], data: ArrayData) -> Self {
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format("array header", format!("missing meta key {key}")))
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::format("array header", format!("missing array {name}")))
    }

    pub fn f64_array(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let a = self.array(name)?;
        match &a.data {
            ArrayData::F64(v) => Ok((&a.shape, v)),
            other => Err(Error::format("array data", format!("{name} is {}, expected f64", other.dtype()))),
        }
    }

    pub fn u16_array(&self, name: &str) -> Result<(&[usize], &[u16])> {
        let a = self.array(name)?;
        match &a.data {
            ArrayData::U16(v) => Ok((&a.shape, v)),
            other => Err(Error::format("array data", format!("{name} is {}, expected u16", other.dtype()))),
        }
    }

    pub fn u32_array(&self, name: &str) -> Result<(&[usize], &[u32])> {
        let a = self.array(name)?;
        match &a.data {
            ArrayData::U32(v) => Ok((&a.shape, v)),
            other => Err(Error::format("array data", format!("{name} is {}, expected u32", other.dtype()))),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut header = String::from(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::format("array header", format!("meta entry {k:?} cannot be stored")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::format("array data", format!("{} shape does not match its length", a.name)));
            }
            let dims: Vec<String> = a.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("array {} {} {}\n", a.name, a.data.dtype(), dims.join(" ")));
            let path = dir.join(format!("{}.bin", a.name));
            fs::write(&path, a.data.to_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(HEADER);
        fs::write(&path, header).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(HEADER);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(Error::format("array header", format!("{} does not start with '{MAGIC}'", path.display())));
        }
        let mut bundle = ArrayBundle::default();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| Error::format("array header", "meta without key"))?;
                    let rest = line.splitn(3, ' ').nth(2).unwrap_or("").to_string();
                    bundle.meta.push((key.to_string(), rest));
                }
                Some("array") => {
                    let name = parts.next().ok_or_else(|| Error::format("array header", "array without name"))?;
                    let dtype = parts.next().ok_or_else(|| Error::format("array header", "array without dtype"))?;
                    let shape = parts
                        .map(|d| d.parse::<usize>().map_err(|_| Error::format("array header", format!("bad dim {d}"))))
                        .collect::<Result<Vec<_>>>()?;
                    let bin = dir.join(format!("{name}.bin"));
                    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
                    let data = ArrayData::from_bytes(dtype, &bytes)?;
                    if data.len() != shape.iter().product::<usize>() {
                        return Err(Error::format("array data", format!("{name}.bin length does not match shape")));
                    }
                    bundle.arrays.push(NamedArray {
                        name: name.to_string(),
                        shape,
                        data,
                    });
                }
                _ => return Err(Error::format("array header", format!("unrecognized line {line:?}"))),
            }
        }
        Ok(bundle)
    }
}

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, maxval: u32, body: &[u8]) -> Result<()> {
    let mut bytes = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    bytes.extend_from_slice(body);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a binary netpbm header, returning `(magic, w, h, maxval, body)`.
fn read_netpbm(path: &Path) -> Result<(String, usize, usize, u32, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format("netpbm", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    i += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format("netpbm", format!("bad header field {s}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])? as u32);
    Ok((fields[0].clone(), w, h, maxval, bytes.get(i..).unwrap_or(&[]).to_vec()))
}

pub fn write_pgm8(path: &Path, img: &Array2<u8>) -> Result<()> {
    let (h, w) = img.dim();
    let body: Vec<u8> = img.iter().copied().collect();
    write_netpbm(path, "P5", w, h, 255, &body)
}

pub fn read_pgm8(path: &Path) -> Result<Array2<u8>> {
    let (magic, w, h, maxval, body) = read_netpbm(path)?;
    if magic != "P5" || maxval > 255 || body.len() != w * h {
        return Err(Error::format("pgm", format!("{} is not an 8-bit P5 image", path.display())));
    }
    Ok(Array2::from_shape_vec((h, w), body).expect("length checked"))
}

/// 16-bit PGM; samples are big-endian as the format requires.
pub fn write_pgm16(path: &Path, img: &Array2<u16>) -> Result<()> {
    let (h, w) = img.dim();
    let body: Vec<u8> = img.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_netpbm(path, "P5", w, h, 65535, &body)
}

pub fn read_pgm16(path: &Path) -> Result<Array2<u16>> {
    let (magic, w, h, maxval, body) = read_netpbm(path)?;
    if magic != "P5" || maxval < 256 || body.len() != 2 * w * h {
        return Err(Error::format("pgm", format!("{} is not a 16-bit P5 image", path.display())));
    }
    let vals = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok(Array2::from_shape_vec((h, w), vals).expect("length checked"))
}

/// Fixed color for a label id; id 0 is black.
pub fn palette_color(label: usize) -> [u8; 3] {
    if label == 0 {
        return [0, 0, 0];
    }
    // splitmix64 finalizer, brightened so no label is near black
    let mut z = (label as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    let b = z.to_le_bytes();
    [64 + b[0] % 192, 64 + b[1] % 192, 64 + b[2] % 192]
}

pub fn write_ppm_labels(path: &Path, labels: &Array2<usize>) -> Result<()> {
    let (h, w) = labels.dim();
    let body: Vec<u8> = labels.iter().flat_map(|&l| palette_color(l)).collect();
    write_netpbm(path, "P6", w, h, 255, &body)
}

pub fn read_ppm(path: &Path) -> Result<Vec<[u8; 3]>> {
    let (magic, w, h, maxval, body) = read_netpbm(path)?;
    if magic != "P6" || maxval > 255 || body.len() != 3 * w * h {
        return Err(Error::format("ppm", format!("{} is not an 8-bit P6 image", path.display())));
    }
    Ok(body.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Label field as an 8-bit PGM holding the raw ids.
pub fn write_label_pgm(path: &Path, labels: &Array2<usize>) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::format("pgm", format!("label {bad} does not fit in 8 bits")));
    }
    write_pgm8(path, &labels.mapv(|l| l as u8))
}

pub fn read_label_pgm(path: &Path) -> Result<Array2<usize>> {
    Ok(read_pgm8(path)?.mapv(usize::from))
}
