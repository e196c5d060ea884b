//! B-scan and tracing I/O plus the gradient input channels.
//!
//! File formats:
//!
//! * PGM: binary `P5`, big-endian 16-bit samples when `maxval > 255`.
//!   Image rows are depth rows `z`, image columns are A-scans `x`.
//! * Image CSV: one line per depth row, comma-separated intensities in `[0, 1]`.
//! * Surface CSV: header `surface,x,z`, one record per `(surface, column)`.
//! * Volume CSV: line 1 `N,X,Z`, line 2 the three sizes, line 3 `value`,
//!   then `N·X·Z` values in surface, column, row order.
//!
//! Reals are written with 17 significant digits so that a write followed by
//! a read reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Grid3, Surfaces};

const PGM_MAX: f64 = 65535.0;

/// A 2D scan: `width` A-scans (columns `x`) of `depth` rows (`z`).
#[derive(Clone, Debug, PartialEq)]
pub struct BScan {
    width: usize,
    depth: usize,
    data: Vec<f64>,
}

impl BScan {
    pub fn new(width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if width < 2 || depth < 2 {
            return Err(Error::Dimension(format!(
                "a B-scan needs at least 2x2 pixels, got {width}x{depth}"
            )));
        }
        if data.len() != width * depth {
            return Err(Error::Dimension(format!(
                "{} intensities for a {width}x{depth} B-scan",
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Range(format!(
                "intensity {} at (x={}, z={}) outside [0, 1]",
                data[k],
                k / depth,
                k % depth
            )));
        }
        Ok(BScan { width, depth, data })
    }

    pub fn from_fn(width: usize, depth: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * depth);
        for x in 0..width {
            for z in 0..depth {
                data.push(f(x, z));
            }
        }
        Self::new(width, depth, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    #[inline]
    pub fn get(&self, x: usize, z: usize) -> f64 {
        self.data[x * self.depth + z]
    }

    pub fn column(&self, x: usize) -> &[f64] {
        &self.data[x * self.depth..(x + 1) * self.depth]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm16,
    Csv,
}

impl ImageFormat {
    /// Guesses the format from a file extension, defaulting to PGM.
    pub fn from_path(path: &Path) -> ImageFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ImageFormat::Csv,
            _ => ImageFormat::Pgm16,
        }
    }
}

pub fn load_bscan(path: &Path, format: ImageFormat) -> Result<BScan> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        ImageFormat::Pgm16 => parse_pgm(&bytes, path),
        ImageFormat::Csv => {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::parse(path, 1, 1, "file is not valid UTF-8"))?;
            parse_csv_bscan(&text, path)
        }
    }
}

pub fn parse_csv_bscan(text: &str, path: &Path) -> Result<BScan> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col, token) in line.split(',').enumerate() {
            let token = token.trim();
            let v: f64 = token.parse().map_err(|_| {
                Error::parse(path, ln + 1, col + 1, format!("not a number: {token:?}"))
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::parse(
                    path,
                    ln + 1,
                    col + 1,
                    format!("intensity {v} outside [0, 1]"),
                ));
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::parse(
                    path,
                    ln + 1,
                    row.len().min(first.len()) + 1,
                    format!("row has {} values, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    let depth = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    BScan::from_fn(width, depth, |x, z| rows[z][x])
}

/// Splits the next whitespace-delimited header token off `bytes[*pos..]`,
/// skipping `#` comments.
fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::parse(path, 1, start + 1, "truncated PGM header"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| Error::parse(path, 1, start + 1, "malformed PGM header"))
}

pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<BScan> {
    let mut pos = 0;
    let magic = pgm_token(bytes, &mut pos, path)?;
    if magic != "P5" {
        return Err(Error::parse(path, 1, 1, format!("expected P5 magic, found {magic:?}")));
    }
    let mut header_number = |name: &str| -> Result<usize> {
        let at = pos;
        let tok = pgm_token(bytes, &mut pos, path)?;
        tok.parse::<usize>()
            .map_err(|_| Error::parse(path, 1, at + 1, format!("bad {name} {tok:?}")))
    };
    let width = header_number("width")?;
    let height = header_number("height")?;
    let maxval = header_number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(path, 1, pos, format!("maxval {maxval} outside 1..=65535")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let sample_bytes = if maxval > 255 { 2 } else { 1 };
    let needed = width * height * sample_bytes;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < needed {
        return Err(Error::parse(
            path,
            1,
            pos,
            format!("raster has {} bytes, expected {needed}", raster.len()),
        ));
    }
    let mut data = vec![0.0; width * height];
    for z in 0..height {
        for x in 0..width {
            let k = z * width + x;
            let sample = if sample_bytes == 2 {
                u16::from_be_bytes([raster[2 * k], raster[2 * k + 1]]) as usize
            } else {
                raster[k] as usize
            };
            if sample > maxval {
                return Err(Error::parse(
                    path,
                    z + 1,
                    x + 1,
                    format!("sample {sample} exceeds maxval {maxval}"),
                ));
            }
            data[x * height + z] = sample as f64 / maxval as f64;
        }
    }
    BScan::new(width, height, data)
}

/// Rounds an intensity onto the 16-bit grid used by [`encode_pgm`].
pub fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * PGM_MAX).round() / PGM_MAX
}

pub fn encode_pgm(img: &BScan) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.depth).into_bytes();
    out.reserve(2 * img.data.len());
    for z in 0..img.depth {
        for x in 0..img.width {
            let s = (img.get(x, z).clamp(0.0, 1.0) * PGM_MAX).round() as u16;
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

pub fn encode_csv_bscan(img: &BScan) -> String {
    let mut out = String::new();
    for z in 0..img.depth {
        let row: Vec<String> = (0..img.width).map(|x| fmt_real(img.get(x, z))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn save_bscan(img: &BScan, path: &Path, format: ImageFormat) -> Result<()> {
    match format {
        ImageFormat::Pgm16 => write_atomic(path, &encode_pgm(img)),
        ImageFormat::Csv => write_atomic(path, encode_csv_bscan(img).as_bytes()),
    }
}

/// Writes `bytes` next to `path` and renames into place, so readers never
/// observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp: PathBuf = dir.join(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Formats a real with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// gradient channels

/// Channel order of a [`ChannelStack`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Raw = 0,
    Grad0 = 1,
    Grad45 = 2,
    Grad90 = 3,
    Grad135 = 4,
    Dir0To90 = 5,
    Dir45To135 = 6,
    Magnitude = 7,
}

impl Channel {
    pub const ALL: [Channel; 8] = [
        Channel::Raw,
        Channel::Grad0,
        Channel::Grad45,
        Channel::Grad90,
        Channel::Grad135,
        Channel::Dir0To90,
        Channel::Dir45To135,
        Channel::Magnitude,
    ];
}

/// The raw image followed by its seven gradient channels, each `width × depth`
/// in the same layout as [`BScan`].
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStack {
    width: usize,
    depth: usize,
    channels: Vec<Vec<f64>>,
}

impl ChannelStack {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn channel(&self, c: Channel) -> &[f64] {
        &self.channels[c as usize]
    }

    #[inline]
    pub fn get(&self, c: Channel, x: usize, z: usize) -> f64 {
        self.channels[c as usize][x * self.depth + z]
    }
}

/// Directional derivative along the unit vector `dir` (in `(x, z)` pixel
/// units), estimated from the two neighbours `p ± step` clamped into the
/// image. The divisor is the true separation of the clamped samples along
/// `dir`, which makes the estimate exact on linear ramps at the borders too.
fn directional(img: &BScan, x: usize, z: usize, step: (isize, isize)) -> f64 {
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let (ax, az) = (
        clamp(x as isize - step.0, img.width),
        clamp(z as isize - step.1, img.depth),
    );
    let (bx, bz) = (
        clamp(x as isize + step.0, img.width),
        clamp(z as isize + step.1, img.depth),
    );
    let norm = ((step.0 * step.0 + step.1 * step.1) as f64).sqrt();
    let along = ((bx as f64 - ax as f64) * step.0 as f64 + (bz as f64 - az as f64) * step.1 as f64)
        / norm;
    if along == 0.0 {
        return 0.0;
    }
    (img.get(bx, bz) - img.get(ax, az)) / along
}

fn direction(num: f64, den: f64) -> f64 {
    if num == 0.0 && den == 0.0 {
        0.0
    } else {
        num.atan2(den) / PI
    }
}

/// Computes the raw image plus gradients along 0° (x), 45°, 90° (z) and
/// 135°, the two normalized direction channels and the normalized 0°/90°
/// magnitude.
pub fn gradient_channels(img: &BScan) -> ChannelStack {
    let n = img.width * img.depth;
    let mut g0 = vec![0.0; n];
    let mut g45 = vec![0.0; n];
    let mut g90 = vec![0.0; n];
    let mut g135 = vec![0.0; n];
    for x in 0..img.width {
        for z in 0..img.depth {
            let k = x * img.depth + z;
            g0[k] = directional(img, x, z, (1, 0));
            g45[k] = directional(img, x, z, (1, 1));
            g90[k] = directional(img, x, z, (0, 1));
            g135[k] = directional(img, x, z, (-1, 1));
        }
    }
    let dir_a: Vec<f64> = g90.iter().zip(&g0).map(|(&a, &b)| direction(a, b)).collect();
    let dir_b: Vec<f64> = g135.iter().zip(&g45).map(|(&a, &b)| direction(a, b)).collect();
    let mut mag: Vec<f64> = g0.iter().zip(&g90).map(|(a, b)| a.hypot(*b)).collect();
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        mag.iter_mut().for_each(|m| *m /= peak);
    } else {
        mag.iter_mut().for_each(|m| *m = 0.0);
    }
    ChannelStack {
        width: img.width,
        depth: img.depth,
        channels: vec![img.data.clone(), g0, g45, g90, g135, dir_a, dir_b, mag],
    }
}

// ---------------------------------------------------------------------------
// surface tracings

pub fn format_surfaces(s: &Surfaces) -> String {
    let mut out = String::from("surface,x,z\n");
    for i in 0..s.surfaces() {
        for x in 0..s.width() {
            out.push_str(&format!("{i},{x},{}\n", fmt_real(s.get(i, x))));
        }
    }
    out
}

pub fn write_surfaces(s: &Surfaces, path: &Path) -> Result<()> {
    write_atomic(path, format_surfaces(s).as_bytes())
}

/// Reads a surface CSV. When `depth` is given, positions must lie in
/// `[0, depth - 1]`; otherwise only non-negativity is enforced.
pub fn read_surfaces(path: &Path, depth: Option<usize>) -> Result<Surfaces> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_surfaces(&text, path, depth)
}

pub fn parse_surfaces(text: &str, path: &Path, depth: Option<usize>) -> Result<Surfaces> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim().replace(' ', "") == "surface,x,z" => {}
        Some((ln, _)) => return Err(Error::parse(path, ln + 1, 1, "expected header surface,x,z")),
        None => return Err(Error::parse(path, 1, 1, "empty surface file")),
    }
    let upper = depth.map(|d| d as f64 - 1.0);
    let mut records: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                ln + 1,
                1,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        let index = |col: usize| -> Result<usize> {
            fields[col].parse().map_err(|_| {
                Error::parse(path, ln + 1, col + 1, format!("bad index {:?}", fields[col]))
            })
        };
        let (i, x) = (index(0)?, index(1)?);
        let z: f64 = fields[2].parse().map_err(|_| {
            Error::parse(path, ln + 1, 3, format!("not a number: {:?}", fields[2]))
        })?;
        let in_range = z.is_finite() && z >= 0.0 && upper.is_none_or(|u| z <= u);
        if !in_range {
            let bound = upper.map_or("inf".to_string(), |u| u.to_string());
            return Err(Error::parse(
                path,
                ln + 1,
                3,
                format!("position {z} of surface {i}, column {x} outside [0, {bound}]"),
            ));
        }
        if records.insert((i, x), z).is_some() {
            return Err(Error::parse(
                path,
                ln + 1,
                1,
                format!("duplicate record for surface {i}, column {x}"),
            ));
        }
    }
    let surfaces = records.keys().map(|k| k.0 + 1).max().unwrap_or(0);
    let width = records.keys().map(|k| k.1 + 1).max().unwrap_or(0);
    let mut out = Surfaces::zeros(surfaces, width);
    for i in 0..surfaces {
        for x in 0..width {
            match records.get(&(i, x)) {
                Some(&z) => out.set(i, x, z),
                None => {
                    return Err(Error::parse(
                        path,
                        0,
                        0,
                        format!("missing record for surface {i}, column {x}"),
                    ))
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// volumes (logits and costs)

pub fn format_volume(v: &Grid3) -> String {
    let (n, x, z) = v.dims();
    let mut out = format!("N,X,Z\n{n},{x},{z}\nvalue\n");
    for value in v.as_slice() {
        out.push_str(&fmt_real(*value));
        out.push('\n');
    }
    out
}

pub fn write_volume(v: &Grid3, path: &Path) -> Result<()> {
    write_atomic(path, format_volume(v).as_bytes())
}

pub fn read_volume(path: &Path) -> Result<Grid3> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_volume(&text, path)
}

pub fn parse_volume(text: &str, path: &Path) -> Result<Grid3> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim().replace(' ', "") == "N,X,Z" => {}
        _ => return Err(Error::parse(path, 1, 1, "expected header N,X,Z")),
    }
    let dims: Vec<usize> = match lines.next() {
        Some((_, l)) => l
            .split(',')
            .enumerate()
            .map(|(c, t)| {
                t.trim()
                    .parse()
                    .map_err(|_| Error::parse(path, 2, c + 1, format!("bad size {:?}", t.trim())))
            })
            .collect::<Result<_>>()?,
        None => return Err(Error::parse(path, 2, 1, "missing sizes")),
    };
    if dims.len() != 3 {
        return Err(Error::parse(path, 2, 1, "expected three sizes N,X,Z"));
    }
    match lines.next() {
        Some((_, l)) if l.trim() == "value" => {}
        _ => return Err(Error::parse(path, 3, 1, "expected header value")),
    }
    let expected = dims[0] * dims[1] * dims[2];
    let mut data = Vec::with_capacity(expected);
    for (ln, line) in lines {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t
            .parse()
            .map_err(|_| Error::parse(path, ln + 1, 1, format!("not a number: {t:?}")))?;
        if !v.is_finite() {
            return Err(Error::parse(path, ln + 1, 1, "non-finite value"));
        }
        data.push(v);
    }
    if data.len() != expected {
        return Err(Error::parse(
            path,
            0,
            0,
            format!("{} values for a {}x{}x{} volume", data.len(), dims[0], dims[1], dims[2]),
        ));
    }
    Grid3::from_vec(dims[0], dims[1], dims[2], data)
}
