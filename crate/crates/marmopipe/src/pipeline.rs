//! Stage orchestration for `run`.
//!
//! Stages run in order: `stitch` (flat-field correction and mosaicking),
//! `inject` (injection site and cell bodies), `tracer` (tracer signal),
//! `map` (resampling onto the atlas grid) and `connectivity`.
//!
//! A stage is skipped when all its outputs exist and its stamp matches the
//! current inputs. The stamp stores a SHA-256 over the stage parameters and
//! input contents, plus each input's size and modification time. Matching
//! sizes and times skip without rehashing; otherwise the content hash
//! decides, so touched-but-identical inputs and skewed clocks do not force
//! recomputation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, UNIX_EPOCH};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use marmopipe_core::filter::downsample_stack;
use marmopipe_core::flatfield::{correct_tile, ShadingAccumulator, ShadingField};
use marmopipe_core::image::{Channel, Image2D, Mask3D, Stack3D, Tile2D};
use marmopipe_core::injsite::{
    detect_cells_in_slice, hessian_cell_filter, roi_from_mask, rough_localize, CellPoint, CellPointCloud,
};
use marmopipe_core::mapping::{
    apply_field, apply_field_mask, injection_regions, projection_strengths, ConnectivityTable, DisplacementField,
};
use marmopipe_core::stitch::{assemble_slice, assemble_stack, plan_layout_in_frame, section_frame};
use marmopipe_core::tracerseg::{background_subtract, compose_label, threshold_pipeline, ThresholdParams};

use crate::config::{CellBackend, PipelineConfig, TracerBackend};
use crate::formats::{self, Dtype};
use crate::nn;

pub const STAGES: [&str; 5] = ["stitch", "inject", "tracer", "map", "connectivity"];

/// Tiles per partial flat-field accumulator. Fixed so the merge order does
/// not depend on the thread count.
const FLATFIELD_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ok,
    Skip,
    Fail,
}

impl fmt::Display for StageStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageStatus::Ok => "ok",
            StageStatus::Skip => "skip",
            StageStatus::Fail => "fail",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub name: &'static str,
    pub status: StageStatus,
    pub seconds: f64,
    /// Content hash of parameters and inputs (empty if it could not be computed).
    pub hash: String,
    /// Stage-specific `key=value` counts.
    pub detail: String,
    pub outputs: Vec<PathBuf>,
    pub error: Option<String>,
}

impl StageReport {
    pub fn line(&self) -> String {
        let mut s = format!(
            "stage={} status={} seconds={:.3} hash={}",
            self.name,
            self.status,
            self.seconds,
            if self.hash.is_empty() { "-" } else { &self.hash[..16] }
        );
        if !self.detail.is_empty() {
            s.push(' ');
            s.push_str(&self.detail);
        }
        if let Some(e) = &self.error {
            s.push_str(&format!(" error={e:?}"));
            let partial: Vec<String> = self
                .outputs
                .iter()
                .filter(|p| p.exists())
                .map(|p| p.display().to_string())
                .collect();
            if !partial.is_empty() {
                s.push_str(&format!(" partial={}", partial.join(",")));
            }
        } else {
            let outs: Vec<String> = self.outputs.iter().map(|p| p.display().to_string()).collect();
            s.push_str(&format!(" outputs={}", outs.join(",")));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub stages: Vec<StageReport>,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        self.stages.iter().map(|s| s.line() + "\n").collect()
    }

    pub fn status(&self, stage: &str) -> Option<StageStatus> {
        self.stages.iter().find(|s| s.name == stage).map(|s| s.status)
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: &'static str,
    pub cause: String,
    pub report: RunReport,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.cause)
    }
}

impl std::error::Error for PipelineError {}

type StageResult<T> = std::result::Result<T, String>;

fn err<E: fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Output locations of a run.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub dir: PathBuf,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Outputs { dir: dir.to_path_buf() }
    }

    pub fn shading(&self, c: Channel) -> PathBuf {
        self.dir.join(format!("shading_{}", c.tag()))
    }

    pub fn stitched(&self, c: Channel) -> PathBuf {
        self.dir.join(format!("stitched_{}", c.tag()))
    }

    pub fn layout(&self) -> PathBuf {
        self.dir.join("layout.txt")
    }

    pub fn cb_low(&self) -> PathBuf {
        self.dir.join("cb_low")
    }

    pub fn injection(&self) -> PathBuf {
        self.dir.join("injection")
    }

    pub fn cells(&self) -> PathBuf {
        self.dir.join("cells.txt")
    }

    pub fn tracer_signal(&self) -> PathBuf {
        self.dir.join("tracer_L")
    }

    pub fn tracer_mask(&self) -> PathBuf {
        self.dir.join("tracer_mask")
    }

    pub fn mapped_signal(&self) -> PathBuf {
        self.dir.join("mapped_L")
    }

    pub fn mapped_injection(&self) -> PathBuf {
        self.dir.join("mapped_injection")
    }

    pub fn table(&self) -> PathBuf {
        self.dir.join("connectivity.txt")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.txt")
    }

    fn stamp(&self, stage: &str) -> PathBuf {
        self.dir.join(".stamps").join(stage)
    }

    /// Every file a stage writes.
    pub fn stage_outputs(&self, stage: &str) -> Vec<PathBuf> {
        match stage {
            "stitch" => {
                let mut v = Vec::new();
                for c in Channel::ALL {
                    v.extend(formats::stack_files(&self.shading(c)));
                    v.extend(formats::stack_files(&self.stitched(c)));
                }
                v.push(self.layout());
                v
            }
            "inject" => {
                let mut v = formats::stack_files(&self.cb_low());
                v.extend(formats::stack_files(&self.injection()));
                v.push(self.cells());
                v
            }
            "tracer" => {
                let mut v = formats::stack_files(&self.tracer_signal());
                v.extend(formats::stack_files(&self.tracer_mask()));
                v
            }
            "map" => {
                let mut v = formats::stack_files(&self.mapped_signal());
                v.extend(formats::stack_files(&self.mapped_injection()));
                v
            }
            "connectivity" => vec![self.table()],
            _ => Vec::new(),
        }
    }
}

fn tile_dir_files(dir: &Path) -> StageResult<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let s = p.to_string_lossy();
            s.ends_with(".pgm") || s.ends_with(".pgm.meta")
        })
        .collect();
    v.sort();
    Ok(v)
}

/// Inputs and parameter text of a stage.
fn stage_inputs(stage: &str, cfg: &PipelineConfig, o: &Outputs) -> StageResult<(Vec<PathBuf>, String)> {
    let model = |m: &Option<PathBuf>| m.as_ref().map(|m| formats::model_files(m)).unwrap_or_default();
    Ok(match stage {
        "stitch" => (
            tile_dir_files(&cfg.tiles)?,
            format!("flatfield={} ff_lower={:?} ff_upper={:?} margin={}", cfg.flatfield, cfg.ff_lower, cfg.ff_upper, cfg.margin),
        ),
        "inject" => {
            let mut v = formats::stack_files(&o.stitched(Channel::Blue));
            if cfg.cell_backend == CellBackend::Unet {
                v.extend(model(&cfg.cell_model));
            }
            (
                v,
                format!(
                    "low_voxel_um={:?} t_raw={:?} sigma_um={:?} roi_pad_px={} cell_backend={:?} cell_sigmas={:?} cell_threshold={:?} t_high={:?} input_extent={}",
                    cfg.low_voxel_um, cfg.t_raw, cfg.sigma_um, cfg.roi_pad_px, cfg.cell_backend, cfg.cell_sigmas, cfg.cell_threshold, cfg.t_high, cfg.input_extent
                ),
            )
        }
        "tracer" => {
            let mut v = formats::stack_files(&o.stitched(Channel::Green));
            v.extend(formats::stack_files(&o.stitched(Channel::Red)));
            if cfg.tracer_backend == TracerBackend::Unet {
                v.extend(model(&cfg.tracer_model));
            }
            (
                v,
                format!(
                    "tracer_backend={:?} factor={:?} hi={:?} lo={:?} close={} theta={:?} input_extent={}",
                    cfg.tracer_backend, cfg.factor, cfg.hi, cfg.lo, cfg.close, cfg.theta, cfg.input_extent
                ),
            )
        }
        "map" => {
            let mut v = formats::stack_files(&o.tracer_signal());
            v.extend(formats::stack_files(&o.injection()));
            v.extend(formats::atlas_files(&cfg.atlas));
            if let Some(f) = &cfg.field {
                v.extend(formats::field_files(f));
            }
            (v, format!("interp={:?} field={}", cfg.interp, cfg.field.is_some()))
        }
        "connectivity" => {
            let mut v = formats::stack_files(&o.mapped_signal());
            v.extend(formats::stack_files(&o.mapped_injection()));
            v.extend(formats::atlas_files(&cfg.atlas));
            (
                v,
                format!("normalize={} brain={} injection_id={}", cfg.normalize, cfg.brain, cfg.injection_id),
            )
        }
        _ => unreachable!("unknown stage"),
    })
}

fn mtime_ns(p: &Path) -> Option<u128> {
    fs::metadata(p)
        .ok()?
        .modified()
        .ok()?
        .duration_since(UNIX_EPOCH)
        .ok()
        .map(|d| d.as_nanos())
}

fn fingerprint(inputs: &[PathBuf]) -> Vec<String> {
    inputs
        .iter()
        .map(|p| {
            let len = fs::metadata(p).map(|m| m.len()).unwrap_or(u64::MAX);
            format!("{} {len} {}", p.display(), mtime_ns(p).unwrap_or(0))
        })
        .collect()
}

fn content_hash(stage: &str, params: &str, inputs: &[PathBuf]) -> StageResult<String> {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(params.as_bytes());
    for p in inputs {
        h.update([0]);
        // file names only, so a moved output directory still matches
        h.update(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
        h.update([0]);
        let bytes = fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Default)]
struct Stamp {
    hash: String,
    detail: String,
    inputs: Vec<String>,
}

impl Stamp {
    fn read(path: &Path) -> Option<Stamp> {
        let text = fs::read_to_string(path).ok()?;
        let mut s = Stamp::default();
        for line in text.lines() {
            if let Some(v) = line.strip_prefix("hash=") {
                s.hash = v.to_string();
            } else if let Some(v) = line.strip_prefix("detail=") {
                s.detail = v.to_string();
            } else if let Some(v) = line.strip_prefix("input=") {
                s.inputs.push(v.to_string());
            }
        }
        (!s.hash.is_empty()).then_some(s)
    }

    fn write(&self, path: &Path) -> StageResult<()> {
        let mut text = format!("hash={}\ndetail={}\n", self.hash, self.detail);
        for i in &self.inputs {
            text.push_str(&format!("input={i}\n"));
        }
        formats::write_text(path, &text).map_err(err)
    }
}

/// Run every stage under a pool of `cfg.threads` workers.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| PipelineError {
            stage: "setup",
            cause: e.to_string(),
            report: RunReport::default(),
        })?;
    pool.install(|| run_stages(cfg))
}

fn run_stages(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let o = Outputs::new(&cfg.out);
    let mut report = RunReport::default();
    let finish = |report: &RunReport| {
        let _ = formats::write_text(&o.report(), &report.to_text());
    };
    for name in STAGES {
        let start = Instant::now();
        let outputs = o.stage_outputs(name);
        let attempt = (|| -> StageResult<(StageStatus, String, String)> {
            let (inputs, params) = stage_inputs(name, cfg, &o)?;
            let fp = fingerprint(&inputs);
            let stamp_path = o.stamp(name);
            let stamp = Stamp::read(&stamp_path);
            let outputs_exist = outputs.iter().all(|p| p.is_file());
            if let Some(s) = &stamp {
                if outputs_exist && s.inputs == fp {
                    return Ok((StageStatus::Skip, s.hash.clone(), s.detail.clone()));
                }
            }
            let hash = content_hash(name, &params, &inputs)?;
            if let Some(s) = &stamp {
                if outputs_exist && s.hash == hash {
                    Stamp { hash: hash.clone(), detail: s.detail.clone(), inputs: fp }.write(&stamp_path)?;
                    return Ok((StageStatus::Skip, hash, s.detail.clone()));
                }
            }
            let _ = fs::remove_file(&stamp_path);
            let detail = run_stage(name, cfg, &o)?;
            // outputs are fresh; inputs are re-fingerprinted because a stage
            // may share files with its predecessors
            Stamp { hash: hash.clone(), detail: detail.clone(), inputs: fingerprint(&inputs) }.write(&stamp_path)?;
            Ok((StageStatus::Ok, hash, detail))
        })();
        let seconds = start.elapsed().as_secs_f64();
        match attempt {
            Ok((status, hash, detail)) => report.stages.push(StageReport {
                name,
                status,
                seconds,
                hash,
                detail,
                outputs,
                error: None,
            }),
            Err(cause) => {
                report.stages.push(StageReport {
                    name,
                    status: StageStatus::Fail,
                    seconds,
                    hash: String::new(),
                    detail: String::new(),
                    outputs,
                    error: Some(cause.clone()),
                });
                finish(&report);
                return Err(PipelineError { stage: name, cause, report });
            }
        }
    }
    finish(&report);
    Ok(report)
}

fn run_stage(name: &str, cfg: &PipelineConfig, o: &Outputs) -> StageResult<String> {
    match name {
        "stitch" => stage_stitch(cfg, o),
        "inject" => stage_inject(cfg, o),
        "tracer" => stage_tracer(cfg, o),
        "map" => stage_map(cfg, o),
        "connectivity" => stage_connectivity(cfg, o),
        _ => unreachable!("unknown stage"),
    }
}

/// Flat-field estimate from fixed-size chunks merged in order.
pub fn estimate_shading_parallel(tiles: &[&Tile2D], lower: f64, upper: f64) -> marmopipe_core::Result<ShadingField> {
    let first = tiles.first().ok_or(marmopipe_core::Error::Empty("tiles"))?;
    let (w, h, c) = (first.width(), first.height(), first.channel);
    let partials: Vec<ShadingAccumulator> = tiles
        .par_chunks(FLATFIELD_CHUNK)
        .map(|chunk| {
            let mut acc = ShadingAccumulator::new(w, h, c, lower, upper)?;
            for t in chunk {
                acc.add(t)?;
            }
            Ok(acc)
        })
        .collect::<marmopipe_core::Result<_>>()?;
    let mut it = partials.into_iter();
    let mut acc = it.next().expect("at least one chunk");
    for p in it {
        acc.merge(&p)?;
    }
    acc.finish()
}

fn z_key(z_um: f64) -> i64 {
    (z_um * 1000.0).round() as i64
}

/// One stitched channel with the shading field used to correct it.
pub type StitchedChannel = (Channel, ShadingField, Stack3D);

/// Flat-field correct and stitch every channel of a tile set.
pub fn stitch_tiles(
    tiles: &[Tile2D],
    flatfield: bool,
    lower: f64,
    upper: f64,
    margin: usize,
) -> marmopipe_core::Result<(Vec<StitchedChannel>, String)> {
    let frame = section_frame(tiles)?;
    let pitch = tiles[0].pixel_pitch;
    let mut layout = String::new();
    let mut out = Vec::new();
    for c in Channel::ALL {
        let ct: Vec<&Tile2D> = tiles.iter().filter(|t| t.channel == c).collect();
        if ct.is_empty() {
            return Err(marmopipe_core::Error::InvalidData(format!("no tiles for channel {c}")));
        }
        let field = if flatfield {
            estimate_shading_parallel(&ct, lower, upper)?
        } else {
            ShadingField::flat(ct[0].width(), ct[0].height(), c)
        };
        let corrected: Vec<Tile2D> = ct
            .par_iter()
            .map(|t| correct_tile(t, &field))
            .collect::<marmopipe_core::Result<_>>()?;
        let mut sections: BTreeMap<i64, Vec<Tile2D>> = BTreeMap::new();
        for t in corrected {
            sections.entry(z_key(t.world_offset[2])).or_default().push(t);
        }
        let sections: Vec<Vec<Tile2D>> = sections.into_values().collect();
        let mosaics: Vec<(f64, Image2D, String)> = sections
            .par_iter()
            .map(|sec| {
                let lay = plan_layout_in_frame(sec, frame)?;
                let mosaic = assemble_slice(sec, &lay, margin)?;
                let z = sec[0].world_offset[2];
                let mut lines = String::new();
                for p in &lay.placements {
                    lines.push_str(&format!(
                        "channel={} z_um={z:?} index={} x={} y={}\n",
                        c.tag(),
                        p.tile_index,
                        p.x,
                        p.y
                    ));
                }
                Ok((z, mosaic.image, lines))
            })
            .collect::<marmopipe_core::Result<_>>()?;
        let mut slices = Vec::with_capacity(mosaics.len());
        for (z, img, lines) in mosaics {
            layout.push_str(&lines);
            slices.push((z, img));
        }
        let mut stack = assemble_stack(slices, pitch)?;
        stack.channel = Some(c);
        out.push((c, field, stack));
    }
    Ok((out, layout))
}

fn stage_stitch(cfg: &PipelineConfig, o: &Outputs) -> StageResult<String> {
    let tiles = formats::read_tile_dir(&cfg.tiles).map_err(err)?;
    if tiles.is_empty() {
        return Err(format!("no tiles in {}", cfg.tiles.display()));
    }
    let (stacks, layout) = stitch_tiles(&tiles, cfg.flatfield, cfg.ff_lower, cfg.ff_upper, cfg.margin).map_err(err)?;
    let mut unfilled = 0;
    for (c, field, stack) in &stacks {
        formats::write_shading(field, &o.shading(*c)).map_err(err)?;
        formats::write_stack(stack, &o.stitched(*c), Dtype::U16).map_err(err)?;
        unfilled += field.unfilled;
    }
    formats::write_text(&o.layout(), &layout).map_err(err)?;
    let [nx, ny, nz] = stacks[0].2.dims();
    Ok(format!(
        "tiles={} sections={nz} extent={nx}x{ny} shading_unfilled={unfilled}",
        tiles.len()
    ))
}

/// Low-resolution z index holding high-resolution slice `z`.
fn low_z(z: usize, high_vz: f64, low_vz: f64, low_nz: usize) -> usize {
    (((z as f64 + 0.5) * high_vz / low_vz) as usize).min(low_nz - 1)
}

/// Rough injection mask and cell bodies inside its region of interest.
pub fn locate_injection(
    cb: &Stack3D,
    cfg: &PipelineConfig,
) -> StageResult<(Stack3D, marmopipe_core::injsite::InjectionMask, CellPointCloud)> {
    let low = downsample_stack(cb, [cfg.low_voxel_um; 3]).map_err(err)?;
    let inj = rough_localize(&low, cfg.t_raw, cfg.sigma_um).map_err(err)?;
    if inj.is_empty() {
        return Ok((low, inj, CellPointCloud::default()));
    }
    let [w, h, nz] = cb.dims();
    let hv = cb.voxel_size();
    let lv = low.voxel_size();
    let roi = roi_from_mask(&inj, [hv[0], hv[1]], [lv[0], lv[1]], (w, h), cfg.roi_pad_px).map_err(err)?;
    let model = match cfg.cell_backend {
        CellBackend::Unet => {
            let m = cfg.cell_model.as_ref().ok_or("cell_model is required")?;
            Some(formats::read_model(m).map_err(err)?)
        }
        CellBackend::Hessian => None,
    };
    let per_slice: Vec<Vec<CellPoint>> = (0..nz)
        .into_par_iter()
        .map(|z| -> StageResult<Vec<CellPoint>> {
            let Some(rect) = roi.rect(low_z(z, hv[2], lv[2], low.dims()[2])) else {
                return Ok(Vec::new());
            };
            let slice = cb.slice(z);
            let (sal, t) = match &model {
                None => (hessian_cell_filter(&slice, &cfg.cell_sigmas).map_err(err)?, cfg.cell_threshold),
                Some(m) => (nn::predict_slice(m, &[&slice], cfg.input_extent).map_err(err)?, cfg.t_high),
            };
            Ok(detect_cells_in_slice(&sal, z, t, Some(rect)))
        })
        .collect::<StageResult<_>>()?;
    Ok((
        low,
        inj,
        CellPointCloud {
            points: per_slice.into_iter().flatten().collect(),
        },
    ))
}

fn stage_inject(cfg: &PipelineConfig, o: &Outputs) -> StageResult<String> {
    let cb = formats::read_stack(&o.stitched(Channel::Blue)).map_err(err)?;
    let (low, inj, cells) = locate_injection(&cb, cfg)?;
    formats::write_stack(&low, &o.cb_low(), Dtype::F32).map_err(err)?;
    formats::write_stack(&inj.mask.to_stack(), &o.injection(), Dtype::U16).map_err(err)?;
    formats::write_cells(&cells, &o.cells()).map_err(err)?;
    Ok(format!(
        "injection_voxels={} t_low={:?} cells={}",
        inj.mask.count(),
        inj.t_low,
        cells.len()
    ))
}

/// Tracer signal `L` and mask for every slice.
pub fn segment_tracer(cg: &Stack3D, cr: &Stack3D, cfg: &PipelineConfig) -> StageResult<(Stack3D, Stack3D)> {
    if cg.dims() != cr.dims() {
        return Err(format!("green stack {:?} and red stack {:?} differ in extent", cg.dims(), cr.dims()));
    }
    let model = match cfg.tracer_backend {
        TracerBackend::Unet => {
            let m = cfg.tracer_model.as_ref().ok_or("tracer_model is required")?;
            Some(formats::read_model(m).map_err(err)?)
        }
        TracerBackend::Threshold => None,
    };
    let p = ThresholdParams {
        factor: cfg.factor,
        hi: cfg.hi,
        lo: cfg.lo,
        close_radius: cfg.close,
    };
    let nz = cg.dims()[2];
    let labels: Vec<(Image2D, Image2D)> = (0..nz)
        .into_par_iter()
        .map(|z| -> StageResult<(Image2D, Image2D)> {
            let (g, r) = (cg.slice(z), cr.slice(z));
            let lab = match &model {
                None => threshold_pipeline(&g, &r, &p).map_err(err)?,
                Some(m) => {
                    let sal = nn::predict_slice(m, &[&g, &r], cfg.input_extent).map_err(err)?;
                    let t = background_subtract(&g, &r, cfg.factor).map_err(err)?;
                    compose_label(&sal, &t, cfg.theta).map_err(err)?
                }
            };
            Ok((lab.signal, lab.mask.to_image()))
        })
        .collect::<StageResult<_>>()?;
    let (signal, mask): (Vec<Image2D>, Vec<Image2D>) = labels.into_iter().unzip();
    let vs = cg.voxel_size();
    let l = Stack3D::from_slices(&signal, vs, Some(Channel::Green)).map_err(err)?;
    let m = Stack3D::from_slices(&mask, vs, Some(Channel::Green)).map_err(err)?;
    Ok((l, m))
}

fn stage_tracer(cfg: &PipelineConfig, o: &Outputs) -> StageResult<String> {
    let cg = formats::read_stack(&o.stitched(Channel::Green)).map_err(err)?;
    let cr = formats::read_stack(&o.stitched(Channel::Red)).map_err(err)?;
    let (l, m) = segment_tracer(&cg, &cr, cfg)?;
    formats::write_stack(&l, &o.tracer_signal(), Dtype::F32).map_err(err)?;
    formats::write_stack(&m, &o.tracer_mask(), Dtype::U16).map_err(err)?;
    Ok(format!("tracer_pixels={}", m.data().iter().filter(|&&v| v > 0.0).count()))
}

fn stage_map(cfg: &PipelineConfig, o: &Outputs) -> StageResult<String> {
    let atlas = formats::read_atlas(&cfg.atlas).map_err(err)?;
    let field = match &cfg.field {
        Some(f) => formats::read_field(f).map_err(err)?,
        None => DisplacementField::identity(atlas.dims(), atlas.voxel_size()).map_err(err)?,
    };
    if field.dims() != atlas.dims() {
        return Err(format!(
            "displacement field grid {:?} differs from atlas grid {:?}",
            field.dims(),
            atlas.dims()
        ));
    }
    let l = formats::read_stack(&o.tracer_signal()).map_err(err)?;
    let l_low = downsample_stack(&l, atlas.voxel_size()).map_err(err)?;
    let mapped = apply_field(&l_low, &field, cfg.interp).map_err(err)?;
    let inj = Mask3D::from_stack(&formats::read_stack(&o.injection()).map_err(err)?);
    let mapped_inj = apply_field_mask(&inj, &field).map_err(err)?;
    // f64 keeps the mapped signal exactly as summed by the next stage
    formats::write_stack(&mapped, &o.mapped_signal(), Dtype::F64).map_err(err)?;
    formats::write_stack(&mapped_inj.to_stack(), &o.mapped_injection(), Dtype::U16).map_err(err)?;
    let [nx, ny, nz] = mapped.dims();
    Ok(format!("grid={nx}x{ny}x{nz} injection_voxels={}", mapped_inj.count()))
}

fn stage_connectivity(cfg: &PipelineConfig, o: &Outputs) -> StageResult<String> {
    let atlas = formats::read_atlas(&cfg.atlas).map_err(err)?;
    let signal = formats::read_stack(&o.mapped_signal()).map_err(err)?;
    let inj = Mask3D::from_stack(&formats::read_stack(&o.mapped_injection()).map_err(err)?);
    let sources = injection_regions(&inj, &atlas).map_err(err)?;
    let targets = projection_strengths(&signal, &atlas, cfg.normalize).map_err(err)?;
    let table = ConnectivityTable::from_parts(
        &cfg.brain,
        &cfg.injection_id,
        &sources,
        &targets,
        Some(signal.voxel_size()),
    );
    formats::write_text(&o.table(), &table.to_text()).map_err(err)?;
    Ok(format!("sources={} targets={}", table.sources.len(), table.targets.len()))
}
