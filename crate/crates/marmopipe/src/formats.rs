//! On-disk formats.
//!
//! * Tiles: binary PGM (`P5`, maxval 65535, big-endian samples) plus a
//!   `<name>.meta` sidecar with `channel=`, `offset_um=`, `pitch_um=` and
//!   `index=` lines.
//! * Stacks: `<name>.hdr` with `dims=`, `voxel_um=`, `dtype=` and `channel=`
//!   lines, payload `<name>.raw` little-endian, x fastest. `dtype` is `u16`,
//!   `f32` or `f64`.
//! * Cells: one `x y z score` line per cell.
//! * Atlases: a `u16` label stack plus `<name>.names` with `id name` lines.
//! * Displacement fields: `<name>_dx`, `<name>_dy`, `<name>_dz` stacks.
//! * Models: `<name>.model` manifest plus `<name>.bin`, the tensors in
//!   manifest order as little-endian `f32`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use marmopipe_core::flatfield::ShadingField;
use marmopipe_core::image::{Channel, Stack3D, Tile2D};
use marmopipe_core::injsite::{CellPoint, CellPointCloud};
use marmopipe_core::mapping::{DisplacementField, RegionAtlas};
use marmopipe_core::nnseg::{NetworkParams, UNetConfig};

#[derive(Debug)]
pub enum FormatError {
    Io { path: PathBuf, source: io::Error },
    Malformed { path: PathBuf, reason: String },
    Core(marmopipe_core::error::Error),
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            FormatError::Malformed { path, reason } => write!(f, "{}: {reason}", path.display()),
            FormatError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for FormatError {}

impl From<marmopipe_core::error::Error> for FormatError {
    fn from(e: marmopipe_core::error::Error) -> Self {
        FormatError::Core(e)
    }
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// `path` with `suffix` appended to the file name (not replacing an extension).
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// `key=value` lines; blank lines and `#` comments are skipped.
fn key_values(path: &Path, text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| malformed(path, format!("expected key=value, got {line:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn field<'a>(path: &Path, kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    kv.get(key)
        .map(String::as_str)
        .ok_or_else(|| malformed(path, format!("missing {key}=")))
}

fn numbers<T: std::str::FromStr>(path: &Path, key: &str, s: &str, n: usize) -> Result<Vec<T>> {
    let v: Vec<T> = s
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| malformed(path, format!("{key}: cannot parse {s:?}")))?;
    if v.len() != n {
        return Err(malformed(path, format!("{key}: expected {n} values, got {}", v.len())));
    }
    Ok(v)
}

// ---------------------------------------------------------------- tiles

/// Write `<path>` (PGM) and `<path>.meta`.
pub fn write_tile(tile: &Tile2D, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n65535\n", tile.width(), tile.height()).into_bytes();
    bytes.reserve(tile.pixels().len() * 2);
    for &p in tile.pixels() {
        bytes.extend_from_slice(&p.to_be_bytes());
    }
    write_file(path, &bytes)?;
    let o = tile.world_offset;
    let meta = format!(
        "channel={}\noffset_um={:?} {:?} {:?}\npitch_um={:?}\nindex={}\n",
        tile.channel, o[0], o[1], o[2], tile.pixel_pitch, tile.tile_index
    );
    write_file(&with_suffix(path, ".meta"), meta.as_bytes())
}

/// Next whitespace-delimited PGM header token; `#` comments run to end of line.
fn pgm_token(path: &Path, bytes: &[u8], pos: &mut usize) -> Result<String> {
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
        return Err(malformed(path, "truncated PGM header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn read_tile(path: &Path) -> Result<Tile2D> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut pos = 0;
    if pgm_token(path, &bytes, &mut pos)? != "P5" {
        return Err(malformed(path, "not a binary PGM (magic P5)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        pgm_token(path, &bytes, &mut pos)?
            .parse()
            .map_err(|_| malformed(path, format!("bad PGM {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 65535 {
        return Err(malformed(path, format!("maxval {maxval}, expected 65535")));
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let need = w * h * 2;
    if bytes.len() < pos || bytes.len() - pos != need {
        return Err(malformed(
            path,
            format!(
                "payload has {} bytes, {w}x{h} needs {need}",
                bytes.len().saturating_sub(pos)
            ),
        ));
    }
    let pixels = bytes[pos..]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();

    let meta_path = with_suffix(path, ".meta");
    let kv = key_values(&meta_path, &read_text(&meta_path)?)?;
    let channel: Channel = field(&meta_path, &kv, "channel")?.parse()?;
    let off: Vec<f64> = numbers(&meta_path, "offset_um", field(&meta_path, &kv, "offset_um")?, 3)?;
    let pitch: f64 = numbers(&meta_path, "pitch_um", field(&meta_path, &kv, "pitch_um")?, 1)?[0];
    let index: u32 = numbers(&meta_path, "index", field(&meta_path, &kv, "index")?, 1)?[0];
    Ok(Tile2D::new(w, h, pixels, channel, [off[0], off[1], off[2]], index, pitch)?)
}

/// All tiles (`*.pgm`) in a directory, sorted by file name.
pub fn read_tile_dir(dir: &Path) -> Result<Vec<Tile2D>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    names.sort();
    names.iter().map(|p| read_tile(p)).collect()
}

// ---------------------------------------------------------------- stacks

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U16,
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> &'static str {
        match self {
            Dtype::U16 => "u16",
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::U16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "u16" => Ok(Dtype::U16),
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            _ => Err(format!("unknown dtype {s:?}")),
        }
    }
}

/// Write `<prefix>.hdr` and `<prefix>.raw`. `u16` rounds half away from zero
/// and clamps; `f32` rounds to nearest.
pub fn write_stack(stack: &Stack3D, prefix: &Path, dtype: Dtype) -> Result<()> {
    let [nx, ny, nz] = stack.dims();
    let v = stack.voxel_size();
    let channel = stack.channel.map_or("none", |c| c.tag());
    let hdr = format!(
        "dims={nx} {ny} {nz}\nvoxel_um={:?} {:?} {:?}\ndtype={}\nchannel={channel}\n",
        v[0],
        v[1],
        v[2],
        dtype.tag()
    );
    let mut raw = Vec::with_capacity(stack.data().len() * dtype.size());
    for &x in stack.data() {
        match dtype {
            Dtype::U16 => raw.extend_from_slice(&marmopipe_core::image::quantize_u16(x).to_le_bytes()),
            Dtype::F32 => raw.extend_from_slice(&(x as f32).to_le_bytes()),
            Dtype::F64 => raw.extend_from_slice(&x.to_le_bytes()),
        }
    }
    write_file(&with_suffix(prefix, ".raw"), &raw)?;
    write_file(&with_suffix(prefix, ".hdr"), hdr.as_bytes())
}

/// Read a stack and the dtype it was stored with.
pub fn read_stack_typed(prefix: &Path) -> Result<(Stack3D, Dtype)> {
    let hp = with_suffix(prefix, ".hdr");
    let kv = key_values(&hp, &read_text(&hp)?)?;
    let d: Vec<usize> = numbers(&hp, "dims", field(&hp, &kv, "dims")?, 3)?;
    let v: Vec<f64> = numbers(&hp, "voxel_um", field(&hp, &kv, "voxel_um")?, 3)?;
    let dtype: Dtype = field(&hp, &kv, "dtype")?.parse().map_err(|e: String| malformed(&hp, e))?;
    let channel = match kv.get("channel").map(String::as_str) {
        None | Some("none") | Some("") => None,
        Some(c) => Some(c.parse::<Channel>()?),
    };
    let rp = with_suffix(prefix, ".raw");
    let mut raw = Vec::new();
    fs::File::open(&rp)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err(&rp))?;
    let n = d[0] * d[1] * d[2];
    if raw.len() != n * dtype.size() {
        return Err(malformed(
            &rp,
            format!("payload has {} bytes, header needs {}", raw.len(), n * dtype.size()),
        ));
    }
    let data: Vec<f64> = match dtype {
        Dtype::U16 => raw.chunks_exact(2).map(|c| f64::from(u16::from_le_bytes([c[0], c[1]]))).collect(),
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Ok((Stack3D::new([d[0], d[1], d[2]], [v[0], v[1], v[2]], channel, data)?, dtype))
}

pub fn read_stack(prefix: &Path) -> Result<Stack3D> {
    read_stack_typed(prefix).map(|(s, _)| s)
}

/// Both files of a stack exist.
pub fn stack_exists(prefix: &Path) -> bool {
    with_suffix(prefix, ".hdr").is_file() && with_suffix(prefix, ".raw").is_file()
}

/// Files making up a stack.
pub fn stack_files(prefix: &Path) -> Vec<PathBuf> {
    vec![with_suffix(prefix, ".hdr"), with_suffix(prefix, ".raw")]
}

// ---------------------------------------------------------------- cells

pub fn write_cells(cells: &CellPointCloud, path: &Path) -> Result<()> {
    let mut s = String::new();
    for c in &cells.points {
        s.push_str(&format!("{} {} {} {:?}\n", c.x, c.y, c.z, c.score));
    }
    write_file(path, s.as_bytes())
}

pub fn read_cells(path: &Path) -> Result<CellPointCloud> {
    let mut points = Vec::new();
    for (i, line) in read_text(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        let bad = || malformed(path, format!("line {}: expected `x y z score`", i + 1));
        if t.len() != 4 {
            return Err(bad());
        }
        points.push(CellPoint {
            x: t[0].parse().map_err(|_| bad())?,
            y: t[1].parse().map_err(|_| bad())?,
            z: t[2].parse().map_err(|_| bad())?,
            score: t[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(CellPointCloud { points })
}

// ---------------------------------------------------------------- atlas

pub fn write_atlas(atlas: &RegionAtlas, prefix: &Path) -> Result<()> {
    if atlas.labels().iter().any(|&l| l > u32::from(u16::MAX)) {
        return Err(malformed(prefix, "region ids above 65535 do not fit the u16 label stack"));
    }
    write_stack(&atlas.to_stack(), prefix, Dtype::U16)?;
    let mut s = String::new();
    for (id, name) in atlas.names() {
        s.push_str(&format!("{id} {name}\n"));
    }
    write_file(&with_suffix(prefix, ".names"), s.as_bytes())
}

pub fn read_atlas(prefix: &Path) -> Result<RegionAtlas> {
    let stack = read_stack(prefix)?;
    let np = with_suffix(prefix, ".names");
    let mut names = BTreeMap::new();
    for line in read_text(&np)?.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, name) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let id: u32 = id.parse().map_err(|_| malformed(&np, format!("bad region id in {line:?}")))?;
        names.insert(id, name.trim().to_string());
    }
    Ok(RegionAtlas::from_stack(&stack, names)?)
}

pub fn atlas_files(prefix: &Path) -> Vec<PathBuf> {
    let mut v = stack_files(prefix);
    v.push(with_suffix(prefix, ".names"));
    v
}

// ---------------------------------------------------------------- fields

pub fn write_field(field: &DisplacementField, prefix: &Path) -> Result<()> {
    let [dx, dy, dz] = field.components();
    write_stack(&dx, &with_suffix(prefix, "_dx"), Dtype::F32)?;
    write_stack(&dy, &with_suffix(prefix, "_dy"), Dtype::F32)?;
    write_stack(&dz, &with_suffix(prefix, "_dz"), Dtype::F32)
}

pub fn read_field(prefix: &Path) -> Result<DisplacementField> {
    let dx = read_stack(&with_suffix(prefix, "_dx"))?;
    let dy = read_stack(&with_suffix(prefix, "_dy"))?;
    let dz = read_stack(&with_suffix(prefix, "_dz"))?;
    Ok(DisplacementField::from_components(&dx, &dy, &dz)?)
}

pub fn field_files(prefix: &Path) -> Vec<PathBuf> {
    ["_dx", "_dy", "_dz"]
        .iter()
        .flat_map(|s| stack_files(&with_suffix(prefix, s)))
        .collect()
}

// ---------------------------------------------------------------- shading

/// A shading field is a one-slice `f32` stack.
pub fn write_shading(field: &ShadingField, prefix: &Path) -> Result<()> {
    let v = field.values();
    let s = Stack3D::new([v.width(), v.height(), 1], [1.0; 3], Some(field.channel), v.data().to_vec())?;
    write_stack(&s, prefix, Dtype::F32)
}

pub fn read_shading(prefix: &Path) -> Result<ShadingField> {
    let s = read_stack(prefix)?;
    let channel = s
        .channel
        .ok_or_else(|| malformed(prefix, "shading field has no channel tag"))?;
    if s.dims()[2] != 1 {
        return Err(malformed(prefix, "shading field must have nz=1"));
    }
    Ok(ShadingField::from_image(s.slice(0), channel)?)
}

// ---------------------------------------------------------------- models

const MODEL_FORMAT: &str = "marmopipe-unet-1";

/// Write `<prefix>.model` (manifest) and `<prefix>.bin` (weights).
pub fn write_model(params: &NetworkParams, prefix: &Path, seed: u64) -> Result<()> {
    let c = &params.config;
    let mut m = format!(
        "format={MODEL_FORMAT}\ndepth={}\nbase_features={}\nin_channels={}\nbatch_norm={}\ndropout={:?}\nseed={seed}\n",
        c.depth, c.base_features, c.in_channels, c.batch_norm, c.dropout
    );
    let mut blob = Vec::new();
    for (name, t) in params.tensors() {
        m.push_str(&format!("tensor={name} {}\n", t.len()));
        for &v in t {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_file(&with_suffix(prefix, ".bin"), &blob)?;
    write_file(&with_suffix(prefix, ".model"), m.as_bytes())
}

pub fn read_model(prefix: &Path) -> Result<NetworkParams> {
    let mp = with_suffix(prefix, ".model");
    let text = read_text(&mp)?;
    let mut kv = BTreeMap::new();
    let mut tensors: Vec<(String, usize)> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| malformed(&mp, format!("expected key=value, got {line:?}")))?;
        if k == "tensor" {
            let (name, len) = v
                .split_once(' ')
                .ok_or_else(|| malformed(&mp, format!("bad tensor line {line:?}")))?;
            let len = len.trim().parse().map_err(|_| malformed(&mp, format!("bad tensor length in {line:?}")))?;
            tensors.push((name.to_string(), len));
        } else {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    if field(&mp, &kv, "format")? != MODEL_FORMAT {
        return Err(malformed(&mp, "unknown model format"));
    }
    let num = |k: &str| -> Result<usize> {
        field(&mp, &kv, k)?
            .parse()
            .map_err(|_| malformed(&mp, format!("bad {k}")))
    };
    let mut cfg = UNetConfig::new(num("depth")?, num("base_features")?, num("in_channels")?);
    cfg.batch_norm = field(&mp, &kv, "batch_norm")? == "true";
    cfg.dropout = field(&mp, &kv, "dropout")?
        .parse()
        .map_err(|_| malformed(&mp, "bad dropout"))?;
    let mut params = NetworkParams::init(cfg, 0)?;
    let expected: Vec<(String, usize)> = params.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    if expected != tensors {
        return Err(malformed(&mp, "tensor list does not match the declared architecture"));
    }
    let bp = with_suffix(prefix, ".bin");
    let blob = fs::read(&bp).map_err(io_err(&bp))?;
    let total: usize = tensors.iter().map(|t| t.1).sum();
    if blob.len() != 4 * total {
        return Err(malformed(&bp, format!("blob has {} bytes, manifest needs {}", blob.len(), 4 * total)));
    }
    let mut values = Vec::with_capacity(tensors.len());
    let mut at = 0;
    for (_, len) in &tensors {
        values.push(
            blob[at..at + 4 * len]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect(),
        );
        at += 4 * len;
    }
    params.load_tensors(&values)?;
    Ok(params)
}

pub fn model_files(prefix: &Path) -> Vec<PathBuf> {
    vec![with_suffix(prefix, ".model"), with_suffix(prefix, ".bin")]
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

pub fn read_text_file(path: &Path) -> Result<String> {
    read_text(path)
}
