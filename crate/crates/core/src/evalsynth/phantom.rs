//! Whole-brain phantom: tiled three-channel sections with a known vignette,
//! cell bodies, an injection ball, axons and vessel confounders.
//!
//! Section pixel `(x, y)` of section `z` sits at world position
//! `(x * pitch, y * pitch, z * spacing)` µm. Tile `(i, j)` covers section
//! pixels starting at `(i * step, j * step)` with `step = tile - overlap`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::derive_seed;
use super::reference::reference_localize;
use crate::error::{Error, Result};
use crate::filter::downsample_stack;
use crate::image::{quantize_u16, Channel, Image2D, Mask2D, Mask3D, Stack3D, Tile2D};
use crate::injsite::CellPoint;
use crate::mapping::{injection_regions, projection_strengths, ConnectivityTable, RegionAtlas};
use crate::math;

/// Generator parameters. Lengths are in section pixels unless the name says
/// otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub tile_px: usize,
    pub overlap_px: usize,
    /// Margin the stitcher will discard; structures stay inside the covered area.
    pub margin_px: usize,
    pub pixel_pitch_um: f64,
    pub sections: usize,
    pub section_spacing_um: f64,
    /// Vignette value at the tile corners (1 = flat).
    pub vignette_corner: f64,
    pub background_red: f64,
    pub background_blue: f64,
    /// Green autofluorescence relative to red.
    pub crosstalk: f64,
    pub noise: bool,
    pub cell_count: usize,
    pub cell_amplitude: f64,
    pub cell_sigma_px: f64,
    /// Fraction of the cell amplitude that leaks into green.
    pub cell_green_fraction: f64,
    /// Axons per section.
    pub axon_count: usize,
    pub axon_contrast: f64,
    pub axon_width_px: f64,
    pub axon_steps: usize,
    pub axon_step_px: f64,
    /// Vessels per section.
    pub vessel_count: usize,
    pub vessel_contrast: f64,
    pub vessel_width_px: f64,
    pub injection_center_um: [f64; 3],
    pub injection_radius_um: f64,
    pub injection_amplitude: f64,
    /// Isotropic voxel size of the low-resolution grid.
    pub low_voxel_um: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 1,
            tiles_x: 3,
            tiles_y: 3,
            tile_px: 300,
            overlap_px: 180,
            margin_px: 50,
            pixel_pitch_um: 5.0,
            sections: 8,
            section_spacing_um: 50.0,
            vignette_corner: 0.6,
            background_red: 80.0,
            background_blue: 60.0,
            crosstalk: 1.1,
            noise: true,
            cell_count: 60,
            cell_amplitude: 800.0,
            cell_sigma_px: 2.5,
            cell_green_fraction: 0.1,
            axon_count: 4,
            axon_contrast: 1500.0,
            axon_width_px: 3.0,
            axon_steps: 80,
            axon_step_px: 4.0,
            vessel_count: 3,
            vessel_contrast: 600.0,
            vessel_width_px: 5.0,
            injection_center_um: [700.0, 1350.0, 175.0],
            injection_radius_um: 150.0,
            injection_amplitude: 10000.0,
            low_voxel_um: 50.0,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "tiles_x",
    "tiles_y",
    "tile_px",
    "overlap_px",
    "margin_px",
    "pixel_pitch_um",
    "sections",
    "section_spacing_um",
    "vignette_corner",
    "background_red",
    "background_blue",
    "crosstalk",
    "noise",
    "cell_count",
    "cell_amplitude",
    "cell_sigma_px",
    "cell_green_fraction",
    "axon_count",
    "axon_contrast",
    "axon_width_px",
    "axon_steps",
    "axon_step_px",
    "vessel_count",
    "vessel_contrast",
    "vessel_width_px",
    "injection_center_um",
    "injection_radius_um",
    "injection_amplitude",
    "low_voxel_um",
];

fn parse<T: core::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| {
            let name = KEYS.iter().copied().find(|k| *k == key).unwrap_or("phantom key");
            Error::param(name, format!("cannot parse {value:?}"))
        })
}

impl PhantomSpec {
    /// Noise-free phantom whose pipeline output is exactly predictable: flat
    /// vignette, zero background, hard-edged structures and no cell blobs.
    pub fn noiseless() -> Self {
        PhantomSpec {
            vignette_corner: 1.0,
            background_red: 0.0,
            background_blue: 0.0,
            noise: false,
            cell_count: 0,
            axon_contrast: 3000.0,
            vessel_contrast: 3000.0,
            sections: 8,
            ..PhantomSpec::default()
        }
    }

    /// Names accepted by [`PhantomSpec::set`].
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Assign one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "tiles_x" => self.tiles_x = parse(key, value)?,
            "tiles_y" => self.tiles_y = parse(key, value)?,
            "tile_px" => self.tile_px = parse(key, value)?,
            "overlap_px" => self.overlap_px = parse(key, value)?,
            "margin_px" => self.margin_px = parse(key, value)?,
            "pixel_pitch_um" => self.pixel_pitch_um = parse(key, value)?,
            "sections" => self.sections = parse(key, value)?,
            "section_spacing_um" => self.section_spacing_um = parse(key, value)?,
            "vignette_corner" => self.vignette_corner = parse(key, value)?,
            "background_red" => self.background_red = parse(key, value)?,
            "background_blue" => self.background_blue = parse(key, value)?,
            "crosstalk" => self.crosstalk = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "cell_count" => self.cell_count = parse(key, value)?,
            "cell_amplitude" => self.cell_amplitude = parse(key, value)?,
            "cell_sigma_px" => self.cell_sigma_px = parse(key, value)?,
            "cell_green_fraction" => self.cell_green_fraction = parse(key, value)?,
            "axon_count" => self.axon_count = parse(key, value)?,
            "axon_contrast" => self.axon_contrast = parse(key, value)?,
            "axon_width_px" => self.axon_width_px = parse(key, value)?,
            "axon_steps" => self.axon_steps = parse(key, value)?,
            "axon_step_px" => self.axon_step_px = parse(key, value)?,
            "vessel_count" => self.vessel_count = parse(key, value)?,
            "vessel_contrast" => self.vessel_contrast = parse(key, value)?,
            "vessel_width_px" => self.vessel_width_px = parse(key, value)?,
            "injection_center_um" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 3 {
                    return Err(Error::param("injection_center_um", "expects x,y,z"));
                }
                for (a, p) in parts.iter().enumerate() {
                    self.injection_center_um[a] = parse(key, p)?;
                }
            }
            "injection_radius_um" => self.injection_radius_um = parse(key, value)?,
            "injection_amplitude" => self.injection_amplitude = parse(key, value)?,
            "low_voxel_um" => self.low_voxel_um = parse(key, value)?,
            _ => return Err(Error::InvalidData(format!("unknown phantom key {key:?}"))),
        }
        Ok(())
    }

    /// `key=value` lines in [`PhantomSpec::keys`] order.
    pub fn to_text(&self) -> String {
        let c = self.injection_center_um;
        let vals: Vec<String> = vec![
            self.seed.to_string(),
            self.tiles_x.to_string(),
            self.tiles_y.to_string(),
            self.tile_px.to_string(),
            self.overlap_px.to_string(),
            self.margin_px.to_string(),
            format!("{:?}", self.pixel_pitch_um),
            self.sections.to_string(),
            format!("{:?}", self.section_spacing_um),
            format!("{:?}", self.vignette_corner),
            format!("{:?}", self.background_red),
            format!("{:?}", self.background_blue),
            format!("{:?}", self.crosstalk),
            self.noise.to_string(),
            self.cell_count.to_string(),
            format!("{:?}", self.cell_amplitude),
            format!("{:?}", self.cell_sigma_px),
            format!("{:?}", self.cell_green_fraction),
            self.axon_count.to_string(),
            format!("{:?}", self.axon_contrast),
            format!("{:?}", self.axon_width_px),
            self.axon_steps.to_string(),
            format!("{:?}", self.axon_step_px),
            self.vessel_count.to_string(),
            format!("{:?}", self.vessel_contrast),
            format!("{:?}", self.vessel_width_px),
            format!("{:?},{:?},{:?}", c[0], c[1], c[2]),
            format!("{:?}", self.injection_radius_um),
            format!("{:?}", self.injection_amplitude),
            format!("{:?}", self.low_voxel_um),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(vals) {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn step_px(&self) -> usize {
        self.tile_px - self.overlap_px
    }

    /// Section extent `(width, height)` in pixels.
    pub fn section_extent(&self) -> (usize, usize) {
        let s = self.step_px();
        (
            (self.tiles_x - 1) * s + self.tile_px,
            (self.tiles_y - 1) * s + self.tile_px,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiles_x == 0 || self.tiles_y == 0 || self.sections == 0 {
            return Err(Error::param("tiles_x/tiles_y/sections", "must be > 0"));
        }
        if self.overlap_px >= self.tile_px {
            return Err(Error::param("overlap_px", "must be smaller than tile_px"));
        }
        if 2 * self.margin_px > self.overlap_px {
            return Err(Error::param(
                "margin_px",
                "cropped tiles must still touch: need 2 * margin_px <= overlap_px",
            ));
        }
        let positive = [
            ("pixel_pitch_um", self.pixel_pitch_um),
            ("section_spacing_um", self.section_spacing_um),
            ("crosstalk", self.crosstalk),
            ("cell_sigma_px", self.cell_sigma_px),
            ("axon_width_px", self.axon_width_px),
            ("axon_step_px", self.axon_step_px),
            ("vessel_width_px", self.vessel_width_px),
            ("low_voxel_um", self.low_voxel_um),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(name, "must be a positive number"));
            }
        }
        let nonneg = [
            ("background_red", self.background_red),
            ("background_blue", self.background_blue),
            ("cell_amplitude", self.cell_amplitude),
            ("cell_green_fraction", self.cell_green_fraction),
            ("axon_contrast", self.axon_contrast),
            ("vessel_contrast", self.vessel_contrast),
            ("injection_radius_um", self.injection_radius_um),
            ("injection_amplitude", self.injection_amplitude),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(name, "must be >= 0"));
            }
        }
        if !(self.vignette_corner > 0.0 && self.vignette_corner <= 1.0) {
            return Err(Error::param("vignette_corner", "must lie in (0, 1]"));
        }
        if self.low_voxel_um < self.pixel_pitch_um || self.low_voxel_um < self.section_spacing_um {
            return Err(Error::param(
                "low_voxel_um",
                "must be at least the pixel pitch and the section spacing",
            ));
        }
        let (w, h) = self.section_extent();
        let room = 2.0 * (4.0 * self.cell_sigma_px).max(self.axon_width_px).max(self.vessel_width_px);
        if (w - 2 * self.margin_px) as f64 <= room || (h - 2 * self.margin_px) as f64 <= room {
            return Err(Error::param("tile_px", "covered area is smaller than the structures"));
        }
        Ok(())
    }
}

/// Raised-cosine falloff from 1 at the center to `corner` at the corners.
pub fn raised_cosine_vignette(width: usize, height: usize, corner: f64) -> Result<Image2D> {
    if width == 0 || height == 0 {
        return Err(Error::param("vignette extent", "must be > 0"));
    }
    if !(corner > 0.0 && corner <= 1.0) {
        return Err(Error::param("vignette_corner", "must lie in (0, 1]"));
    }
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let rmax = math::hypot(cx, cy).max(1.0);
    Ok(Image2D::from_fn(width, height, |x, y| {
        let r = math::hypot(x as f64 - cx, y as f64 - cy) / rmax;
        corner + (1.0 - corner) * 0.5 * (1.0 + math::cos(core::f64::consts::PI * r))
    }))
}

type Polyline = Vec<(f64, f64)>;

#[derive(Debug, Clone, PartialEq)]
struct Geometry {
    cells: Vec<CellPoint>,
    axons: Vec<Vec<Polyline>>,
    vessels: Vec<Vec<Polyline>>,
}

/// Clean channel images of one section: no vignette, no noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionImages {
    pub red: Image2D,
    pub green: Image2D,
    pub blue: Image2D,
    pub axon_mask: Mask2D,
    pub vessel_mask: Mask2D,
}

impl SectionImages {
    pub fn channel(&self, c: Channel) -> &Image2D {
        match c {
            Channel::Red => &self.red,
            Channel::Green => &self.green,
            Channel::Blue => &self.blue,
        }
    }
}

/// Everything the generator knows about its output.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Vignette divided by its mean.
    pub vignette: Image2D,
    /// Cell centers in section pixels; `z` is the section index.
    pub cells: Vec<CellPoint>,
    /// Axon pixels per section, restricted to the area the stitcher covers.
    pub tracer_masks: Vec<Mask2D>,
    /// Low-resolution blue channel.
    pub low_cb: Stack3D,
    /// Injection mask on the low-resolution grid.
    pub injection: Mask3D,
    /// Subtracted tracer signal on the axons, on the low-resolution grid.
    pub tracer_low: Stack3D,
}

/// A validated spec with its random geometry drawn.
#[derive(Debug, Clone)]
pub struct Phantom {
    spec: PhantomSpec,
    geometry: Geometry,
    vignette: Image2D,
}

fn random_walk(
    rng: &mut ChaCha8Rng,
    start: (f64, f64),
    heading: f64,
    steps: usize,
    step: f64,
    bounds: (f64, f64, f64, f64),
) -> Polyline {
    let turn = Normal::new(0.0, 0.08).expect("constant parameters");
    let (mut x, mut y) = start;
    let (mut theta, mut omega) = (heading, 0.0);
    let mut line = vec![(x, y)];
    for _ in 0..steps {
        omega = 0.8 * omega + turn.sample(rng);
        theta += omega;
        let (nx, ny) = (x + step * math::cos(theta), y + step * math::sin(theta));
        if nx < bounds.0 || nx > bounds.1 || ny < bounds.2 || ny > bounds.3 {
            break;
        }
        x = nx;
        y = ny;
        line.push((x, y));
    }
    line
}

fn segment_dist2(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    qx * qx + qy * qy
}

/// Mark every pixel within `width / 2` of the polyline.
fn draw_polyline(mask: &mut Mask2D, line: &Polyline, width: f64) {
    let r = width / 2.0;
    let (w, h) = mask.dims();
    let segs: Vec<((f64, f64), (f64, f64))> = if line.len() == 1 {
        vec![(line[0], line[0])]
    } else {
        line.windows(2).map(|p| (p[0], p[1])).collect()
    };
    for (a, b) in segs {
        let x0 = math::floor(a.0.min(b.0) - r).max(0.0) as usize;
        let y0 = math::floor(a.1.min(b.1) - r).max(0.0) as usize;
        let x1 = (math::ceil(a.0.max(b.0) + r).max(0.0) as usize).min(w - 1);
        let y1 = (math::ceil(a.1.max(b.1) + r).max(0.0) as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if segment_dist2(x as f64, y as f64, a, b) <= r * r {
                    mask.set(x, y, true);
                }
            }
        }
    }
}

impl Phantom {
    pub fn new(spec: PhantomSpec) -> Result<Self> {
        spec.validate()?;
        let vignette = raised_cosine_vignette(spec.tile_px, spec.tile_px, spec.vignette_corner)?;
        let geometry = Self::draw_geometry(&spec)?;
        Ok(Phantom {
            spec,
            geometry,
            vignette,
        })
    }

    pub fn spec(&self) -> &PhantomSpec {
        &self.spec
    }

    fn draw_geometry(spec: &PhantomSpec) -> Result<Geometry> {
        let (w, h) = spec.section_extent();
        let m = spec.margin_px as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0]));

        let border = m + math::ceil(4.0 * spec.cell_sigma_px);
        let (cx0, cx1) = (border as usize, w - border as usize);
        let (cy0, cy1) = (border as usize, h - border as usize);
        if cx0 >= cx1 || cy0 >= cy1 {
            return Err(Error::param("cell_sigma_px", "cells do not fit inside the covered area"));
        }
        let min_sep = 4.0 * spec.cell_sigma_px;
        let mut cells: Vec<CellPoint> = Vec::with_capacity(spec.cell_count);
        let mut attempts = 0usize;
        while cells.len() < spec.cell_count {
            attempts += 1;
            if attempts > 1000 * (spec.cell_count + 1) {
                return Err(Error::param("cell_count", "cells do not fit at the minimum separation"));
            }
            let c = CellPoint {
                x: rng.random_range(cx0..cx1),
                y: rng.random_range(cy0..cy1),
                z: rng.random_range(0..spec.sections),
                score: 1.0,
            };
            let clear = cells.iter().all(|o| {
                let (dx, dy) = (o.x as f64 - c.x as f64, o.y as f64 - c.y as f64);
                o.z != c.z || dx * dx + dy * dy >= min_sep * min_sep
            });
            if clear {
                cells.push(c);
            }
        }

        let pad = m + spec.axon_width_px.max(spec.vessel_width_px) + 1.0;
        let bounds = (pad, w as f64 - 1.0 - pad, pad, h as f64 - 1.0 - pad);
        let inj = (
            spec.injection_center_um[0] / spec.pixel_pitch_um,
            spec.injection_center_um[1] / spec.pixel_pitch_um,
        );
        let jitter = 0.5 * spec.injection_radius_um / spec.pixel_pitch_um;
        let mut axons = Vec::with_capacity(spec.sections);
        let mut vessels = Vec::with_capacity(spec.sections);
        for _ in 0..spec.sections {
            let mut section = Vec::with_capacity(spec.axon_count);
            for _ in 0..spec.axon_count {
                let sx = (inj.0 + rng.random_range(-1.0..=1.0) * jitter).clamp(bounds.0, bounds.1);
                let sy = (inj.1 + rng.random_range(-1.0..=1.0) * jitter).clamp(bounds.2, bounds.3);
                let heading = rng.random_range(-0.6..=0.6);
                section.push(random_walk(&mut rng, (sx, sy), heading, spec.axon_steps, spec.axon_step_px, bounds));
            }
            axons.push(section);
            let mut section = Vec::with_capacity(spec.vessel_count);
            for _ in 0..spec.vessel_count {
                let sx = rng.random_range(bounds.0..=bounds.1);
                let sy = rng.random_range(bounds.2..=bounds.3);
                let heading = rng.random_range(0.0..core::f64::consts::TAU);
                section.push(random_walk(&mut rng, (sx, sy), heading, spec.axon_steps, spec.axon_step_px, bounds));
            }
            vessels.push(section);
        }
        Ok(Geometry {
            cells,
            axons,
            vessels,
        })
    }

    /// Peak-1 vignette applied to every tile.
    pub fn vignette(&self) -> &Image2D {
        &self.vignette
    }

    pub fn cells(&self) -> &[CellPoint] {
        &self.geometry.cells
    }

    /// Clean images of section `z`.
    pub fn render_section(&self, z: usize) -> Result<SectionImages> {
        let s = &self.spec;
        if z >= s.sections {
            return Err(Error::param("section", format!("{z} out of range 0..{}", s.sections)));
        }
        let (w, h) = s.section_extent();
        let mut axon_mask = Mask2D::empty(w, h);
        for line in &self.geometry.axons[z] {
            draw_polyline(&mut axon_mask, line, s.axon_width_px);
        }
        let mut vessel_mask = Mask2D::empty(w, h);
        for line in &self.geometry.vessels[z] {
            draw_polyline(&mut vessel_mask, line, s.vessel_width_px);
        }
        let mut cells = Image2D::zeros(w, h);
        for c in self.geometry.cells.iter().filter(|c| c.z == z) {
            super::cells::stamp_gaussian(&mut cells, c.x as f64, c.y as f64, s.cell_sigma_px, s.cell_amplitude);
        }
        let bg_green = s.crosstalk * s.background_red;
        let red = Image2D::from_fn(w, h, |x, y| {
            s.background_red + if vessel_mask.get(x, y) { s.vessel_contrast } else { 0.0 }
        });
        let green = Image2D::from_fn(w, h, |x, y| {
            let mut v = bg_green + s.cell_green_fraction * cells.get(x, y);
            if axon_mask.get(x, y) {
                v += s.axon_contrast;
            }
            if vessel_mask.get(x, y) {
                v += s.vessel_contrast;
            }
            v
        });
        let [ix, iy, iz] = s.injection_center_um;
        let dz = z as f64 * s.section_spacing_um - iz;
        let r2 = s.injection_radius_um * s.injection_radius_um;
        let blue = Image2D::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 * s.pixel_pitch_um - ix, y as f64 * s.pixel_pitch_um - iy);
            let ball = if dx * dx + dy * dy + dz * dz <= r2 {
                s.injection_amplitude
            } else {
                0.0
            };
            s.background_blue + cells.get(x, y) + ball
        });
        Ok(SectionImages {
            red,
            green,
            blue,
            axon_mask,
            vessel_mask,
        })
    }

    /// Tiles of every channel of section `z`, red then green then blue, each
    /// in row-major tile order.
    pub fn section_tiles(&self, z: usize) -> Result<Vec<Tile2D>> {
        let sec = self.render_section(z)?;
        let mut out = Vec::with_capacity(3 * self.spec.tiles_x * self.spec.tiles_y);
        for (ci, c) in Channel::ALL.iter().enumerate() {
            for k in 0..self.spec.tiles_x * self.spec.tiles_y {
                out.push(self.cut_tile(sec.channel(*c), *c, ci, z, k)?);
            }
        }
        Ok(out)
    }

    fn cut_tile(&self, src: &Image2D, channel: Channel, ci: usize, z: usize, k: usize) -> Result<Tile2D> {
        let s = &self.spec;
        let (i, j) = (k % s.tiles_x, k / s.tiles_x);
        let (x0, y0) = (i * s.step_px(), j * s.step_px());
        let n = s.tile_px;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.seed, &[1, z as u64, ci as u64, k as u64]));
        let mut px = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let mean = src.get(x0 + x, y0 + y) * self.vignette.get(x, y);
                let v = if s.noise && mean > 0.0 {
                    Poisson::new(mean).map(|p| p.sample(&mut rng)).unwrap_or(mean)
                } else {
                    mean
                };
                px.push(quantize_u16(v));
            }
        }
        Tile2D::new(
            n,
            n,
            px,
            channel,
            [
                x0 as f64 * s.pixel_pitch_um,
                y0 as f64 * s.pixel_pitch_um,
                z as f64 * s.section_spacing_um,
            ],
            k as u32,
            s.pixel_pitch_um,
        )
    }

    /// Every tile of every section.
    pub fn tiles(&self) -> Result<Vec<Tile2D>> {
        let mut out = Vec::new();
        for z in 0..self.spec.sections {
            out.extend(self.section_tiles(z)?);
        }
        Ok(out)
    }

    /// Pixels that survive margin cropping in the stitched section.
    pub fn covered(&self, x: usize, y: usize) -> bool {
        let (w, h) = self.spec.section_extent();
        let m = self.spec.margin_px;
        x >= m && y >= m && x < w - m && y < h - m
    }

    /// Ground truth for the stages downstream of stitching. `t_raw` and
    /// `sigma_um` parametrize the injection reference, `factor` the
    /// background subtraction.
    pub fn ground_truth(&self, t_raw: f64, sigma_um: f64, factor: f64) -> Result<GroundTruth> {
        let s = &self.spec;
        let (w, h) = s.section_extent();
        let mut blue = Vec::with_capacity(s.sections);
        let mut tracer = Vec::with_capacity(s.sections);
        let mut masks = Vec::with_capacity(s.sections);
        for z in 0..s.sections {
            let sec = self.render_section(z)?;
            let mask = Mask2D::from_fn(w, h, |x, y| sec.axon_mask.get(x, y) && self.covered(x, y));
            // the stitched data are 16-bit, so the truth is computed on
            // quantized clean values
            let q = |img: &Image2D, x: usize, y: usize| f64::from(quantize_u16(img.get(x, y)));
            blue.push(Image2D::from_fn(w, h, |x, y| {
                if self.covered(x, y) {
                    q(&sec.blue, x, y)
                } else {
                    0.0
                }
            }));
            tracer.push(Image2D::from_fn(w, h, |x, y| {
                if !mask.get(x, y) {
                    return 0.0;
                }
                let (g, r) = (q(&sec.green, x, y), q(&sec.red, x, y));
                let bg = factor * r;
                if g < bg {
                    0.0
                } else {
                    g - bg
                }
            }));
            masks.push(mask);
        }
        let vs = [s.pixel_pitch_um, s.pixel_pitch_um, s.section_spacing_um];
        let low = [s.low_voxel_um; 3];
        let low_cb = downsample_stack(&Stack3D::from_slices(&blue, vs, Some(Channel::Blue))?, low)?;
        let injection = reference_localize(&low_cb, t_raw, sigma_um)?;
        let tracer_low = downsample_stack(&Stack3D::from_slices(&tracer, vs, Some(Channel::Green))?, low)?;
        let m = self.vignette.sum() / self.vignette.data().len() as f64;
        Ok(GroundTruth {
            vignette: self.vignette.map(|v| v / m),
            cells: self.geometry.cells.clone(),
            tracer_masks: masks,
            low_cb,
            injection,
            tracer_low,
        })
    }
}

/// Tiles of every channel and the ground truth under default stage settings.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Vec<Tile2D>, GroundTruth)> {
    let p = Phantom::new(spec.clone())?;
    let truth = p.ground_truth(
        crate::injsite::DEFAULT_T_RAW,
        crate::injsite::DEFAULT_SIGMA_UM,
        crate::tracerseg::DEFAULT_SUBTRACTION_FACTOR,
    )?;
    Ok((p.tiles()?, truth))
}

/// Three regions splitting the grid into thirds along x, surrounded by a
/// one-voxel band of background (label 0).
pub fn toy_atlas(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<RegionAtlas> {
    let [nx, ny, nz] = dims;
    let mut labels = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let edge = |i: usize, n: usize| n > 2 && (i == 0 || i + 1 == n);
                if edge(x, nx) || edge(y, ny) || edge(z, nz) {
                    labels.push(0);
                } else {
                    labels.push(1 + (3 * x / nx).min(2) as u32);
                }
            }
        }
    }
    let names: BTreeMap<u32, String> = [(1, "left"), (2, "middle"), (3, "right")]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect();
    RegionAtlas::new(dims, voxel_size, labels, names)
}

/// Planted connectivity table of a phantom under `atlas` (which must share
/// the low-resolution grid).
pub fn truth_table(truth: &GroundTruth, atlas: &RegionAtlas, normalize: bool, brain: &str, injection: &str) -> Result<ConnectivityTable> {
    let sources = injection_regions(&truth.injection, atlas)?;
    let targets = projection_strengths(&truth.tracer_low, atlas, normalize)?;
    Ok(ConnectivityTable::from_parts(
        brain,
        injection,
        &sources,
        &targets,
        Some(truth.tracer_low.voxel_size()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec {
            tiles_x: 2,
            tiles_y: 2,
            tile_px: 200,
            overlap_px: 100,
            sections: 3,
            cell_count: 10,
            injection_center_um: [500.0, 750.0, 50.0],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn empty_flat_noiseless_phantom_is_constant() {
        let spec = PhantomSpec {
            vignette_corner: 1.0,
            noise: false,
            cell_count: 0,
            axon_count: 0,
            vessel_count: 0,
            injection_amplitude: 0.0,
            ..small()
        };
        let tiles = Phantom::new(spec.clone()).unwrap().tiles().unwrap();
        assert_eq!(tiles.len(), 3 * 4 * 3);
        for t in &tiles {
            let want = match t.channel {
                Channel::Red => 80,
                Channel::Green => 88,
                Channel::Blue => 60,
            };
            assert!(t.pixels().iter().all(|&p| p == want));
        }
    }

    #[test]
    fn seed_fixes_the_phantom() {
        let a = generate_phantom(&small()).unwrap();
        let b = generate_phantom(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&PhantomSpec { seed: 9, ..small() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn vessels_are_equal_in_red_and_green() {
        let spec = PhantomSpec {
            background_red: 0.0,
            cell_count: 0,
            axon_count: 0,
            ..small()
        };
        let sec = Phantom::new(spec).unwrap().render_section(1).unwrap();
        assert!(sec.vessel_mask.count() > 0);
        assert_eq!(sec.red, sec.green);
    }

    #[test]
    fn cells_are_template_peaks() {
        let spec = PhantomSpec {
            noise: false,
            axon_count: 0,
            vessel_count: 0,
            injection_amplitude: 0.0,
            ..small()
        };
        let p = Phantom::new(spec.clone()).unwrap();
        for c in p.cells() {
            let sec = p.render_section(c.z).unwrap();
            let ncc = super::super::template_correlation(&sec.blue, c.x, c.y, spec.cell_sigma_px, 6).unwrap();
            assert!(ncc > 0.99, "{ncc}");
        }
    }

    #[test]
    fn tile_pixels_follow_section_and_vignette() {
        let spec = PhantomSpec { noise: false, ..small() };
        let p = Phantom::new(spec.clone()).unwrap();
        let sec = p.render_section(2).unwrap();
        let tiles = p.section_tiles(2).unwrap();
        let t = &tiles[4 + 3]; // green, tile (1, 1)
        assert_eq!(t.channel, Channel::Green);
        let off = spec.step_px();
        for &(x, y) in &[(0, 0), (17, 150), (199, 3)] {
            let want = quantize_u16(sec.green.get(off + x, off + y) * p.vignette().get(x, y));
            assert_eq!(t.get(x, y), want);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(Phantom::new(PhantomSpec { overlap_px: 300, ..small() }).is_err());
        assert!(Phantom::new(PhantomSpec { margin_px: 60, ..small() }).is_err());
        assert!(Phantom::new(PhantomSpec { vignette_corner: 0.0, ..small() }).is_err());
        assert!(Phantom::new(PhantomSpec { low_voxel_um: 10.0, ..small() }).is_err());
        let mut s = small();
        assert!(s.set("bogus", "1").is_err());
        assert!(s.set("seed", "x").is_err());
    }

    #[test]
    fn text_round_trip() {
        let spec = PhantomSpec::noiseless();
        let mut back = PhantomSpec::default();
        for line in spec.to_text().lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.set(k, v).unwrap();
        }
        assert_eq!(back, spec);
    }

    #[test]
    fn toy_atlas_layout() {
        let a = toy_atlas([9, 5, 5], [50.0; 3]).unwrap();
        assert_eq!(a.get(0, 2, 2), 0);
        assert_eq!(a.get(1, 2, 2), 1);
        assert_eq!(a.get(4, 2, 2), 2);
        assert_eq!(a.get(7, 2, 2), 3);
        assert_eq!(a.get(4, 0, 2), 0);
    }

    #[test]
    fn noiseless_truth_has_planted_structure() {
        let spec = PhantomSpec {
            sections: 4,
            injection_center_um: [700.0, 1350.0, 75.0],
            ..PhantomSpec::noiseless()
        };
        let p = Phantom::new(spec).unwrap();
        let truth = p.ground_truth(4500.0, 150.0, 1.1).unwrap();
        assert!(truth.injection.count() > 0);
        assert!(truth.tracer_low.sum() > 0.0);
        let atlas = toy_atlas(truth.low_cb.dims(), truth.low_cb.voxel_size()).unwrap();
        let table = truth_table(&truth, &atlas, false, "b", "i").unwrap();
        assert!(table.sources.contains_key(&1));
        assert!(table.targets.values().any(|&v| v > 0.0));
    }
}
