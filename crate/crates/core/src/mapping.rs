//! Displacement-field resampling into a reference space, population
//! averaging, and region-wise connectivity tables.
//!
//! Fields use the pull-back convention: a field on the reference grid stores,
//! for every reference voxel center `v` (in µm), the offset such that
//! `v + field(v)` is the corresponding position in the source volume.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::{Mask3D, Stack3D};
use crate::injsite::CellPointCloud;
use crate::math;

/// Positions within this many voxels of a grid point are treated as on it.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Linear,
}

impl core::str::FromStr for Interpolation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Interpolation::Nearest),
            "linear" => Ok(Interpolation::Linear),
            _ => Err(Error::param("interpolation", format!("expected nearest or linear, got {s:?}"))),
        }
    }
}

/// Per-voxel displacement vectors (µm) over a reference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    vectors: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], vectors: Vec<[f64; 3]>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::param("dims", "all extents must be > 0"));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::param("voxel_size", "must be finite and > 0"));
        }
        if vectors.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::shape(dims[0] * dims[1] * dims[2], vectors.len()));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("displacements must be finite".into()));
        }
        Ok(DisplacementField { dims, voxel_size, vectors })
    }

    pub fn identity(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        Self::constant(dims, voxel_size, [0.0; 3])
    }

    pub fn constant(dims: [usize; 3], voxel_size: [f64; 3], d: [f64; 3]) -> Result<Self> {
        Self::new(dims, voxel_size, vec![d; dims[0] * dims[1] * dims[2]])
    }

    /// Build from the three component volumes.
    pub fn from_components(dx: &Stack3D, dy: &Stack3D, dz: &Stack3D) -> Result<Self> {
        if dx.dims() != dy.dims() || dx.dims() != dz.dims() {
            return Err(Error::shape(dx.dims(), (dy.dims(), dz.dims())));
        }
        let v = (0..dx.data().len())
            .map(|i| [dx.data()[i], dy.data()[i], dz.data()[i]])
            .collect();
        Self::new(dx.dims(), dx.voxel_size(), v)
    }

    pub fn components(&self) -> [Stack3D; 3] {
        let comp = |k: usize| {
            Stack3D::new(
                self.dims,
                self.voxel_size,
                None,
                self.vectors.iter().map(|v| v[k]).collect(),
            )
            .expect("field extent is valid")
        };
        [comp(0), comp(1), comp(2)]
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Trilinear interpolation at a position in µm; positions outside the
    /// grid are clamped to its border.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for k in 0..3 {
            let n = self.dims[k];
            let t = (p[k] / self.voxel_size[k]).clamp(0.0, (n - 1) as f64);
            let f = math::floor(t);
            base[k] = (f as usize).min(n - 1);
            frac[k] = t - f;
        }
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for k in 0..3 {
                let hi = corner >> k & 1 == 1;
                w *= if hi { frac[k] } else { 1.0 - frac[k] };
                idx[k] = if hi { (base[k] + 1).min(self.dims[k] - 1) } else { base[k] };
            }
            if w == 0.0 {
                continue;
            }
            let v = self.vectors[self.index(idx[0], idx[1], idx[2])];
            for k in 0..3 {
                out[k] += w * v[k];
            }
        }
        out
    }
}

/// Continuous voxel coordinate snapped to an integer when within [`SNAP`].
fn snapped(t: f64) -> f64 {
    let r = math::round(t);
    if (t - r).abs() < SNAP {
        r
    } else {
        t
    }
}

/// Value of `stack` at a continuous voxel coordinate, or 0 outside.
pub fn interpolate(stack: &Stack3D, t: [f64; 3], mode: Interpolation) -> f64 {
    let dims = stack.dims();
    match mode {
        Interpolation::Nearest => {
            let mut idx = [0usize; 3];
            for k in 0..3 {
                let r = math::round(t[k]);
                if !(r >= 0.0 && r < dims[k] as f64) {
                    return 0.0;
                }
                idx[k] = r as usize;
            }
            stack.get(idx[0], idx[1], idx[2])
        }
        Interpolation::Linear => {
            let mut base = [0usize; 3];
            let mut frac = [0.0; 3];
            for k in 0..3 {
                let s = snapped(t[k]);
                if !(s >= 0.0 && s <= (dims[k] - 1) as f64) {
                    return 0.0;
                }
                let f = math::floor(s);
                base[k] = f as usize;
                frac[k] = s - f;
            }
            let mut v = 0.0;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut idx = [0usize; 3];
                for k in 0..3 {
                    let hi = corner >> k & 1 == 1;
                    w *= if hi { frac[k] } else { 1.0 - frac[k] };
                    idx[k] = base[k] + usize::from(hi);
                }
                if w != 0.0 {
                    v += w * stack.get(idx[0], idx[1], idx[2]);
                }
            }
            v
        }
    }
}

/// Warning text when a volume that looks like integer labels is resampled
/// with linear interpolation.
pub fn interpolation_warning(stack: &Stack3D, mode: Interpolation) -> Option<&'static str> {
    if mode != Interpolation::Linear {
        return None;
    }
    let mut distinct = BTreeMap::new();
    for &v in stack.data() {
        if v != math::round(v) || v < 0.0 {
            return None;
        }
        distinct.insert(v as u64, ());
        if distinct.len() > 4096 {
            return None;
        }
    }
    Some("input looks like an integer label volume; linear interpolation blends label ids, use nearest")
}

/// Resample `stack` onto the field's reference grid.
pub fn apply_field(stack: &Stack3D, field: &DisplacementField, mode: Interpolation) -> Result<Stack3D> {
    let [nx, ny, nz] = field.dims;
    let vs = field.voxel_size;
    let svs = stack.voxel_size();
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d = field.vectors[field.index(x, y, z)];
                let pos = [x as f64 * vs[0] + d[0], y as f64 * vs[1] + d[1], z as f64 * vs[2] + d[2]];
                let t = [pos[0] / svs[0], pos[1] / svs[1], pos[2] / svs[2]];
                out.push(interpolate(stack, t, mode));
            }
        }
    }
    Stack3D::new(field.dims, vs, stack.channel, out)
}

/// Resample a mask with nearest-neighbour lookup.
pub fn apply_field_mask(mask: &Mask3D, field: &DisplacementField) -> Result<Mask3D> {
    let s = apply_field(&mask.to_stack(), field, Interpolation::Nearest)?;
    Ok(Mask3D::from_stack(&s))
}

/// Two-hop mapping as one field on `b`'s grid: look up `b`, then interpolate
/// `a` (clamped to its grid) at the intermediate position.
pub fn compose_fields(a: &DisplacementField, b: &DisplacementField) -> Result<DisplacementField> {
    let [nx, ny, nz] = b.dims;
    let vs = b.voxel_size;
    let mut v = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let db = b.vectors[b.index(x, y, z)];
                let p = [x as f64 * vs[0] + db[0], y as f64 * vs[1] + db[1], z as f64 * vs[2] + db[2]];
                let da = a.sample(p);
                v.push([db[0] + da[0], db[1] + da[1], db[2] + da[2]]);
            }
        }
    }
    DisplacementField::new(b.dims, vs, v)
}

/// Map points (µm, source space) to the reference space with the inverse
/// field, which is defined on the source grid.
pub fn map_points(points: &[[f64; 3]], inverse: &DisplacementField) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|p| {
            let d = inverse.sample(*p);
            [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
        })
        .collect()
}

/// Mean of every stack and its mirror image across the mid-plane
/// perpendicular to `axis`.
pub fn axisymmetric_average(stacks: &[Stack3D], axis: usize) -> Result<Stack3D> {
    let first = stacks.first().ok_or(Error::Empty("stacks"))?;
    if axis > 2 {
        return Err(Error::param("axis", "must be 0, 1 or 2"));
    }
    let dims = first.dims();
    for s in stacks {
        if s.dims() != dims {
            return Err(Error::shape(dims, s.dims()));
        }
    }
    let n = 2.0 * stacks.len() as f64;
    let mut out = vec![0.0; first.data().len()];
    let mirror = |x: usize, y: usize, z: usize| match axis {
        0 => (dims[0] - 1 - x, y, z),
        1 => (x, dims[1] - 1 - y, z),
        _ => (x, y, dims[2] - 1 - z),
    };
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let (mx, my, mz) = mirror(x, y, z);
                let i = first.index(x, y, z);
                let mut acc = 0.0;
                for s in stacks {
                    acc += s.get(x, y, z) + s.get(mx, my, mz);
                }
                out[i] = acc / n;
            }
        }
    }
    Stack3D::new(dims, first.voxel_size(), first.channel, out)
}

/// Integer region labels (0 = outside) with a name per region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAtlas {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    labels: Vec<u32>,
    names: BTreeMap<u32, String>,
}

impl RegionAtlas {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], labels: Vec<u32>, names: BTreeMap<u32, String>) -> Result<Self> {
        if labels.len() != dims[0] * dims[1] * dims[2] || labels.is_empty() {
            return Err(Error::shape(dims[0] * dims[1] * dims[2], labels.len()));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::param("voxel_size", "must be > 0"));
        }
        if names.contains_key(&0) {
            return Err(Error::InvalidData("region id 0 is reserved for outside".into()));
        }
        if let Some(id) = labels.iter().find(|&&id| id != 0 && !names.contains_key(&id)) {
            return Err(Error::InvalidData(format!("region id {id} has no name")));
        }
        Ok(RegionAtlas {
            dims,
            voxel_size,
            labels,
            names,
        })
    }

    /// Labels from a stack of nonnegative integer values.
    pub fn from_stack(stack: &Stack3D, names: BTreeMap<u32, String>) -> Result<Self> {
        let mut labels = Vec::with_capacity(stack.data().len());
        for &v in stack.data() {
            if v < 0.0 || v != math::round(v) || v > f64::from(u32::MAX) {
                return Err(Error::InvalidData(format!("atlas value {v} is not a region id")));
            }
            labels.push(v as u32);
        }
        Self::new(stack.dims(), stack.voxel_size(), labels, names)
    }

    pub fn to_stack(&self) -> Stack3D {
        Stack3D::new(
            self.dims,
            self.voxel_size,
            None,
            self.labels.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("atlas extent is valid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn names(&self) -> &BTreeMap<u32, String> {
        &self.names
    }

    pub fn region_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.names.keys().copied()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.labels[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    /// Voxel count of every named region (zero for absent ones).
    pub fn region_sizes(&self) -> BTreeMap<u32, u64> {
        let mut m: BTreeMap<u32, u64> = self.names.keys().map(|&k| (k, 0)).collect();
        for &l in &self.labels {
            if l != 0 {
                *m.entry(l).or_default() += 1;
            }
        }
        m
    }

    /// Region at a position in µm; `None` outside the grid.
    pub fn region_at(&self, p: [f64; 3]) -> Option<u32> {
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let r = math::round(p[k] / self.voxel_size[k]);
            if !(r >= 0.0 && r < self.dims[k] as f64) {
                return None;
            }
            idx[k] = r as usize;
        }
        Some(self.get(idx[0], idx[1], idx[2]))
    }
}

/// Per-region counts of injection voxels or cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SourceHistogram {
    /// Only regions with a nonzero count.
    pub counts: BTreeMap<u32, u64>,
    /// Elements in region 0 or outside the atlas grid.
    pub outside: u64,
}

/// Count injection-mask voxels per region.
pub fn injection_regions(mask: &Mask3D, atlas: &RegionAtlas) -> Result<SourceHistogram> {
    if mask.dims() != atlas.dims {
        return Err(Error::shape(atlas.dims, mask.dims()));
    }
    let mut h = SourceHistogram::default();
    for (&m, &l) in mask.data().iter().zip(&atlas.labels) {
        if !m {
            continue;
        }
        if l == 0 {
            h.outside += 1;
        } else {
            *h.counts.entry(l).or_default() += 1;
        }
    }
    Ok(h)
}

/// Count points (µm, atlas space) per region.
pub fn injection_regions_points(points: &[[f64; 3]], atlas: &RegionAtlas) -> SourceHistogram {
    let mut h = SourceHistogram::default();
    for p in points {
        match atlas.region_at(*p) {
            Some(l) if l != 0 => *h.counts.entry(l).or_default() += 1,
            _ => h.outside += 1,
        }
    }
    h
}

/// Count detected cells per region; cell indices are scaled by the voxel
/// size of the grid they were detected on.
pub fn injection_regions_cells(cells: &CellPointCloud, cell_voxel: [f64; 3], atlas: &RegionAtlas) -> SourceHistogram {
    let pts: Vec<[f64; 3]> = cells
        .points
        .iter()
        .map(|c| [c.x as f64 * cell_voxel[0], c.y as f64 * cell_voxel[1], c.z as f64 * cell_voxel[2]])
        .collect();
    injection_regions_points(&pts, atlas)
}

/// Per-region sums of a signal volume.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TargetSums {
    /// Every named region, including those with zero signal.
    pub sums: BTreeMap<u32, f64>,
    pub outside: f64,
    pub normalized: bool,
}

/// Sum `signal` over every atlas region; with `normalize`, divide each sum
/// by the region's voxel count.
pub fn projection_strengths(signal: &Stack3D, atlas: &RegionAtlas, normalize: bool) -> Result<TargetSums> {
    if signal.dims() != atlas.dims {
        return Err(Error::shape(atlas.dims, signal.dims()));
    }
    if signal.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidData("signal must be >= 0".into()));
    }
    let mut sums: BTreeMap<u32, f64> = atlas.names.keys().map(|&k| (k, 0.0)).collect();
    let mut outside = 0.0;
    for (&v, &l) in signal.data().iter().zip(&atlas.labels) {
        if l == 0 {
            outside += v;
        } else {
            *sums.entry(l).or_default() += v;
        }
    }
    if normalize {
        let sizes = atlas.region_sizes();
        for (k, s) in sums.iter_mut() {
            let n = sizes.get(k).copied().unwrap_or(0);
            if n > 0 {
                *s /= n as f64;
            }
        }
    }
    Ok(TargetSums {
        sums,
        outside,
        normalized: normalize,
    })
}

/// Source and target rows of one brain.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConnectivityTable {
    pub brain: String,
    pub injection: String,
    /// Voxel size of the signal the targets were summed on.
    pub voxel_um: Option<[f64; 3]>,
    pub normalized: bool,
    pub sources: BTreeMap<u32, u64>,
    pub targets: BTreeMap<u32, f64>,
}

impl ConnectivityTable {
    pub fn from_parts(
        brain: &str,
        injection: &str,
        sources: &SourceHistogram,
        targets: &TargetSums,
        voxel_um: Option<[f64; 3]>,
    ) -> Self {
        ConnectivityTable {
            brain: brain.to_string(),
            injection: injection.to_string(),
            voxel_um,
            normalized: targets.normalized,
            sources: sources.counts.clone(),
            targets: targets.sums.clone(),
        }
    }

    /// `# brain=<id> injection=<id>` header, optional metadata comments, then
    /// `src <region> <count>` and `tgt <region> <sum>` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# brain={} injection={}", self.brain, self.injection);
        if let Some(v) = self.voxel_um {
            let _ = writeln!(s, "# voxel_um={},{},{}", v[0], v[1], v[2]);
        }
        if self.normalized {
            let _ = writeln!(s, "# normalized=per_voxel");
        }
        for (k, v) in &self.sources {
            let _ = writeln!(s, "src {k} {v}");
        }
        for (k, v) in &self.targets {
            let _ = writeln!(s, "tgt {k} {v:?}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut t = ConnectivityTable::default();
        let mut header = false;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::InvalidData(format!("line {}: {what}", ln + 1));
            if let Some(rest) = line.strip_prefix('#') {
                for kv in rest.split_whitespace() {
                    let Some((k, v)) = kv.split_once('=') else { continue };
                    match k {
                        "brain" => {
                            t.brain = v.to_string();
                            header = true;
                        }
                        "injection" => t.injection = v.to_string(),
                        "voxel_um" => {
                            let p: Vec<f64> = v
                                .split(',')
                                .map(|x| x.parse::<f64>().map_err(|_| bad("bad voxel size")))
                                .collect::<Result<_>>()?;
                            if p.len() != 3 {
                                return Err(bad("voxel_um needs 3 values"));
                            }
                            t.voxel_um = Some([p[0], p[1], p[2]]);
                        }
                        "normalized" => t.normalized = true,
                        _ => {}
                    }
                }
                continue;
            }
            let mut it = line.split_whitespace();
            let (kind, id, val) = (it.next(), it.next(), it.next());
            let id: u32 = id.and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad region id"))?;
            let val = val.ok_or_else(|| bad("missing value"))?;
            match kind {
                Some("src") => {
                    let c: u64 = val.parse().map_err(|_| bad("bad count"))?;
                    t.sources.insert(id, c);
                }
                Some("tgt") => {
                    let v: f64 = val.parse().map_err(|_| bad("bad sum"))?;
                    if !(v >= 0.0) {
                        return Err(bad("negative sum"));
                    }
                    t.targets.insert(id, v);
                }
                _ => return Err(bad("expected src or tgt")),
            }
        }
        if !header {
            return Err(Error::InvalidData("missing '# brain=' header".into()));
        }
        Ok(t)
    }

    /// Every region id must exist in the atlas.
    pub fn validate(&self, atlas: &RegionAtlas) -> Result<()> {
        for id in self.sources.keys().chain(self.targets.keys()) {
            if !atlas.names.contains_key(id) {
                return Err(Error::InvalidData(format!("region {id} not in atlas")));
            }
        }
        Ok(())
    }
}
