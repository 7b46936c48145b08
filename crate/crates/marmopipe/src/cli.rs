//! Command-line front end. Exit codes: 0 success, 1 invalid arguments or
//! configuration, 2 failure while running.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use marmopipe_core::evalsynth::{
    match_detections, segmentation_metrics, toy_atlas, truth_table, Phantom, PhantomSpec, DEFAULT_MATCH_RADIUS,
};
use marmopipe_core::filter::downsample_stack;
use marmopipe_core::flatfield::{correct_tile, ShadingField};
use marmopipe_core::image::{Channel, Image2D, Mask2D, Mask3D, Stack3D};
use marmopipe_core::injsite::{
    detect_cells_in_slice, hessian_cell_filter, roi_from_mask, rough_localize, CellPointCloud, InjectionMask,
};
use marmopipe_core::mapping::{
    apply_field, apply_field_mask, injection_regions, projection_strengths, ConnectivityTable, DisplacementField,
    Interpolation,
};
use marmopipe_core::tracerseg::{background_subtract, compose_label, threshold_pipeline, ThresholdParams};
use marmopipe_core::nnseg::weights::{DEFAULT_LOG_SIGMA, DEFAULT_LOG_THRESHOLD, DEFAULT_RADIUS_ZERO};
use marmopipe_core::nnseg::CellWeightParams;

use crate::config::PipelineConfig;
use crate::formats::{self, Dtype, FormatError};
use crate::nn::{self, TrainOptions};
use crate::pipeline::{self, estimate_shading_parallel, run_pipeline, stitch_tiles};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<marmopipe_core::Error> for CliError {
    fn from(e: marmopipe_core::Error) -> Self {
        match e {
            marmopipe_core::Error::InvalidParameter { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Core(c) => c.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Debug, Parser)]
#[command(name = "marmopipe", version, about = "Tracer image pipeline: stitch, locate, segment, map, connect")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic brain with ground truth.
    Phantom(PhantomArgs),
    /// Estimate a flat-field (shading) image from a tile directory.
    FlatfieldEstimate(FlatfieldArgs),
    /// Stitch tiles into a section stack.
    Stitch(StitchArgs),
    /// Locate the injection site and the cell bodies inside it.
    InjectLocate(InjectArgs),
    /// Segment tracer signal.
    TracerSeg(TracerArgs),
    /// Train a cell-detection network.
    TrainCells(TrainCellsArgs),
    /// Train a tracer-segmentation network.
    TrainTracer(TrainTracerArgs),
    /// Compute a saliency stack with a trained network.
    Predict(PredictArgs),
    /// Resample a stack onto a reference grid through a displacement field.
    Map(MapArgs),
    /// Build a source/target connectivity table.
    Connectivity(ConnectivityArgs),
    /// Compare outputs with ground truth.
    Eval(EvalArgs),
    /// Run the whole pipeline from a config file.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// `key=value` phantom description; defaults when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Start from the noise-free preset before applying `--spec`.
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlatfieldArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub channel: Channel,
    #[arg(long, default_value_t = 2.0)]
    pub lower: f64,
    #[arg(long, default_value_t = 2500.0)]
    pub upper: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StitchArgs {
    #[arg(long)]
    pub tiles: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub margin: usize,
    /// Stitch one channel only; otherwise one stack per channel at `<out>_<channel>`.
    #[arg(long)]
    pub channel: Option<Channel>,
    /// Shading field to divide out (single-channel runs only).
    #[arg(long)]
    pub shading: Option<PathBuf>,
    /// Estimate and divide out a shading field per channel.
    #[arg(long)]
    pub flatfield: bool,
    #[arg(long, default_value_t = 2.0)]
    pub lower: f64,
    #[arg(long, default_value_t = 2500.0)]
    pub upper: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CellBackendArg {
    Hessian,
    Unet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TracerBackendArg {
    Threshold,
    Unet,
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    /// Low-resolution blue stack; computed from `--cb-high` when absent.
    #[arg(long)]
    pub cb_low: Option<PathBuf>,
    #[arg(long)]
    pub cb_high: PathBuf,
    #[arg(long, default_value_t = 50.0)]
    pub low_voxel_um: f64,
    #[arg(long, value_enum, default_value_t = CellBackendArg::Hessian)]
    pub backend: CellBackendArg,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 4500.0)]
    pub traw: f64,
    #[arg(long, default_value_t = 150.0)]
    pub sigma_um: f64,
    /// Saliency cutoff (unet backend).
    #[arg(long, default_value_t = 0.5)]
    pub thigh: f64,
    /// Response cutoff (hessian backend).
    #[arg(long, default_value_t = 20.0)]
    pub hessian_threshold: f64,
    #[arg(long, num_args = 1.., default_values_t = [2.0, 3.0, 4.0])]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub pad: usize,
    #[arg(long, default_value_t = 108)]
    pub extent: usize,
    /// Output directory for `injection` and `cells.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TracerArgs {
    #[arg(long)]
    pub cg: PathBuf,
    #[arg(long)]
    pub cr: PathBuf,
    #[arg(long, value_enum, default_value_t = TracerBackendArg::Threshold)]
    pub backend: TracerBackendArg,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 1.1)]
    pub t: f64,
    #[arg(long, default_value_t = 300.0)]
    pub hi: f64,
    #[arg(long, default_value_t = 100.0)]
    pub lo: f64,
    #[arg(long, default_value_t = 3)]
    pub close: usize,
    #[arg(long, default_value_t = 0.5)]
    pub theta: f64,
    #[arg(long, default_value_t = 108)]
    pub extent: usize,
    /// Signal stack `L`; the mask goes to `<out>_mask`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 8)]
    pub base: usize,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 108)]
    pub extent: usize,
    #[arg(long, default_value_t = 4)]
    pub tiles_per_slice: usize,
    #[arg(long)]
    pub augment: bool,
}

impl TrainArgs {
    fn options(&self) -> TrainOptions {
        TrainOptions {
            depth: self.depth,
            base_features: self.base,
            steps: self.steps,
            learning_rate: self.lr,
            seed: self.seed,
            input_extent: self.extent,
            tiles_per_slice: self.tiles_per_slice,
            augment: self.augment,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainCellsArgs {
    #[arg(long)]
    pub cb: PathBuf,
    #[arg(long)]
    pub cells: PathBuf,
    /// Radius of the zero-weight disk around each labelled center.
    #[arg(long, default_value_t = DEFAULT_RADIUS_ZERO)]
    pub radius_zero: usize,
    #[arg(long, default_value_t = DEFAULT_LOG_SIGMA)]
    pub log_sigma: f64,
    #[arg(long, default_value_t = DEFAULT_LOG_THRESHOLD)]
    pub log_threshold: f64,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainTracerArgs {
    #[arg(long)]
    pub cg: PathBuf,
    #[arg(long)]
    pub cr: PathBuf,
    /// Stack whose positive voxels are tracer.
    #[arg(long)]
    pub labels: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input stacks, one per network channel.
    #[arg(long = "in", required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value_t = 108)]
    pub extent: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpArg {
    Nearest,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    U16,
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Displacement field; the identity on the atlas grid when absent.
    #[arg(long)]
    pub field: Option<PathBuf>,
    /// Atlas whose grid defines the identity mapping.
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = InterpArg::Linear)]
    pub interp: InterpArg,
    /// Treat the input as a binary mask (nearest lookup, u16 output).
    #[arg(long)]
    pub mask: bool,
    /// Box-average the input onto the target voxel size first.
    #[arg(long)]
    pub downsample: bool,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    pub dtype: DtypeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConnectivityArgs {
    #[arg(long)]
    pub signal: PathBuf,
    #[arg(long)]
    pub injection: PathBuf,
    #[arg(long)]
    pub atlas: PathBuf,
    #[arg(long, default_value = "brain")]
    pub brain: String,
    #[arg(long, default_value = "injection")]
    pub injection_id: String,
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires = "truth_cells")]
    pub cells: Option<PathBuf>,
    #[arg(long)]
    pub truth_cells: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MATCH_RADIUS)]
    pub radius: f64,
    #[arg(long, requires = "truth_mask")]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub truth_mask: Option<PathBuf>,
    #[arg(long, requires = "truth_table")]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub truth_table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override the `threads` key.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Validate the config and exit.
    #[arg(long)]
    pub check: bool,
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> CliResult {
    match cmd {
        Command::Phantom(a) => cmd_phantom(&a),
        Command::FlatfieldEstimate(a) => cmd_flatfield(&a),
        Command::Stitch(a) => cmd_stitch(&a),
        Command::InjectLocate(a) => cmd_inject(&a),
        Command::TracerSeg(a) => cmd_tracer(&a),
        Command::TrainCells(a) => cmd_train_cells(&a),
        Command::TrainTracer(a) => cmd_train_tracer(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Map(a) => cmd_map(&a),
        Command::Connectivity(a) => cmd_connectivity(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Run(a) => cmd_run(&a),
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Where `phantom` puts things below its output directory.
pub struct PhantomLayout {
    pub root: PathBuf,
}

impl PhantomLayout {
    pub fn tiles(&self) -> PathBuf {
        self.root.join("tiles")
    }

    pub fn truth(&self, name: &str) -> PathBuf {
        self.root.join("truth").join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("run.cfg")
    }
}

/// Render `spec` into `out`: tiles, ground truth, a toy atlas, an identity
/// field and a ready-to-run config.
pub fn write_phantom(spec: &PhantomSpec, out: &Path) -> Result<(), CliError> {
    let p = Phantom::new(spec.clone())?;
    let lay = PhantomLayout { root: out.to_path_buf() };
    for z in 0..spec.sections {
        for t in p.section_tiles(z)? {
            let name = format!("s{z:03}_{}_t{:03}.pgm", t.channel.tag(), t.tile_index);
            formats::write_tile(&t, &lay.tiles().join(name))?;
        }
    }
    let truth = p.ground_truth(
        marmopipe_core::injsite::DEFAULT_T_RAW,
        marmopipe_core::injsite::DEFAULT_SIGMA_UM,
        marmopipe_core::tracerseg::DEFAULT_SUBTRACTION_FACTOR,
    )?;
    let v = &truth.vignette;
    let vig = Stack3D::new([v.width(), v.height(), 1], [spec.pixel_pitch_um, spec.pixel_pitch_um, 1.0], None, v.data().to_vec())?;
    formats::write_stack(&vig, &lay.truth("vignette"), Dtype::F64)?;
    formats::write_cells(&CellPointCloud { points: truth.cells.clone() }, &lay.truth("cells.txt"))?;
    let masks: Vec<Image2D> = truth.tracer_masks.iter().map(Mask2D::to_image).collect();
    let vs = [spec.pixel_pitch_um, spec.pixel_pitch_um, spec.section_spacing_um];
    formats::write_stack(&Stack3D::from_slices(&masks, vs, Some(Channel::Green))?, &lay.truth("tracer_mask"), Dtype::U16)?;
    formats::write_stack(&truth.low_cb, &lay.truth("low_cb"), Dtype::F64)?;
    formats::write_stack(&truth.injection.to_stack(), &lay.truth("injection"), Dtype::U16)?;
    formats::write_stack(&truth.tracer_low, &lay.truth("tracer_low"), Dtype::F64)?;
    let atlas = toy_atlas(truth.tracer_low.dims(), truth.tracer_low.voxel_size())?;
    formats::write_atlas(&atlas, &lay.truth("atlas"))?;
    let field = DisplacementField::identity(atlas.dims(), atlas.voxel_size())?;
    formats::write_field(&field, &lay.truth("field"))?;
    let table = truth_table(&truth, &atlas, false, "phantom", "injection")?;
    formats::write_text(&lay.truth("table.txt"), &table.to_text())?;
    formats::write_text(&lay.truth("spec.txt"), &spec.to_text())?;
    let cfg = format!(
        "# generated with the phantom\ntiles=tiles\nout=out\natlas=truth/atlas\nfield=truth/field\nbrain=phantom\ninjection_id=injection\nlow_voxel_um={:?}\n",
        spec.low_voxel_um
    );
    formats::write_text(&lay.config(), &cfg)?;
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs) -> CliResult {
    let mut spec = if a.noiseless { PhantomSpec::noiseless() } else { PhantomSpec::default() };
    if let Some(path) = &a.spec {
        let text = formats::read_text_file(path)?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
            spec.set(k.trim(), v.trim()).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        }
    }
    spec.validate()?;
    write_phantom(&spec, &a.out)?;
    println!("phantom written to {}", a.out.display());
    Ok(())
}

fn cmd_flatfield(a: &FlatfieldArgs) -> CliResult {
    let tiles = formats::read_tile_dir(&a.input)?;
    let ct: Vec<_> = tiles.iter().filter(|t| t.channel == a.channel).collect();
    if ct.is_empty() {
        return Err(invalid(format!("no {} tiles in {}", a.channel, a.input.display())));
    }
    let start = Instant::now();
    let field = estimate_shading_parallel(&ct, a.lower, a.upper)?;
    formats::write_shading(&field, &a.out)?;
    println!(
        "tiles={} unfilled={} seconds={:.3}",
        ct.len(),
        field.unfilled,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_stitch(a: &StitchArgs) -> CliResult {
    let mut tiles = formats::read_tile_dir(&a.tiles)?;
    if let Some(c) = a.channel {
        tiles.retain(|t| t.channel == c);
        if tiles.is_empty() {
            return Err(invalid(format!("no {c} tiles in {}", a.tiles.display())));
        }
        if let Some(s) = &a.shading {
            let field: ShadingField = formats::read_shading(s)?;
            tiles = tiles.iter().map(|t| correct_tile(t, &field)).collect::<Result<_, _>>()?;
        }
        let frame = marmopipe_core::stitch::section_frame(&tiles)?;
        let mut sections: std::collections::BTreeMap<i64, Vec<_>> = Default::default();
        for t in tiles {
            sections.entry((t.world_offset[2] * 1000.0).round() as i64).or_default().push(t);
        }
        let mut slices = Vec::new();
        let mut layout = String::new();
        for sec in sections.values() {
            let lay = marmopipe_core::stitch::plan_layout_in_frame(sec, frame)?;
            let m = marmopipe_core::stitch::assemble_slice(sec, &lay, a.margin)?;
            for p in &lay.placements {
                layout.push_str(&format!("z_um={:?} index={} x={} y={}\n", sec[0].world_offset[2], p.tile_index, p.x, p.y));
            }
            slices.push((sec[0].world_offset[2], m.image));
        }
        let mut stack = marmopipe_core::stitch::assemble_stack(slices, sec_pitch(&sections))?;
        stack.channel = Some(c);
        formats::write_stack(&stack, &a.out, Dtype::U16)?;
        formats::write_text(&formats::with_suffix(&a.out, ".layout"), &layout)?;
        return Ok(());
    }
    if a.shading.is_some() {
        return Err(invalid("--shading needs --channel"));
    }
    if tiles.is_empty() {
        return Err(invalid(format!("no tiles in {}", a.tiles.display())));
    }
    let (stacks, layout) = stitch_tiles(&tiles, a.flatfield, a.lower, a.upper, a.margin)?;
    for (c, _, stack) in &stacks {
        formats::write_stack(stack, &formats::with_suffix(&a.out, &format!("_{}", c.tag())), Dtype::U16)?;
    }
    formats::write_text(&formats::with_suffix(&a.out, ".layout"), &layout)?;
    Ok(())
}

fn sec_pitch(sections: &std::collections::BTreeMap<i64, Vec<marmopipe_core::Tile2D>>) -> f64 {
    sections.values().next().map_or(1.0, |s| s[0].pixel_pitch)
}

fn cmd_inject(a: &InjectArgs) -> CliResult {
    let cb = formats::read_stack(&a.cb_high)?;
    let low = match &a.cb_low {
        Some(p) => formats::read_stack(p)?,
        None => downsample_stack(&cb, [a.low_voxel_um; 3])?,
    };
    let inj: InjectionMask = rough_localize(&low, a.traw, a.sigma_um)?;
    formats::write_stack(&inj.mask.to_stack(), &a.out.join("injection"), Dtype::U16)?;
    let mut cells = CellPointCloud::default();
    if !inj.is_empty() {
        let model = match a.backend {
            CellBackendArg::Unet => Some(formats::read_model(
                a.model.as_ref().ok_or_else(|| invalid("--model is required with --backend unet"))?,
            )?),
            CellBackendArg::Hessian => None,
        };
        let [w, h, nz] = cb.dims();
        let (hv, lv) = (cb.voxel_size(), low.voxel_size());
        let roi = roi_from_mask(&inj, [hv[0], hv[1]], [lv[0], lv[1]], (w, h), a.pad)?;
        for z in 0..nz {
            let lz = (((z as f64 + 0.5) * hv[2] / lv[2]) as usize).min(low.dims()[2] - 1);
            let Some(rect) = roi.rect(lz) else { continue };
            let slice = cb.slice(z);
            let (sal, t) = match &model {
                None => (hessian_cell_filter(&slice, &a.sigmas)?, a.hessian_threshold),
                Some(m) => (nn::predict_slice(m, &[&slice], a.extent)?, a.thigh),
            };
            cells.points.extend(detect_cells_in_slice(&sal, z, t, Some(rect)));
        }
    }
    formats::write_cells(&cells, &a.out.join("cells.txt"))?;
    println!("injection_voxels={} cells={}", inj.mask.count(), cells.len());
    Ok(())
}

fn cmd_tracer(a: &TracerArgs) -> CliResult {
    let cg = formats::read_stack(&a.cg)?;
    let cr = formats::read_stack(&a.cr)?;
    if cg.dims() != cr.dims() {
        return Err(invalid(format!("--cg {:?} and --cr {:?} differ in extent", cg.dims(), cr.dims())));
    }
    if !(a.hi > a.lo) {
        return Err(invalid(format!("--hi {} must be greater than --lo {}", a.hi, a.lo)));
    }
    let model = match a.backend {
        TracerBackendArg::Unet => Some(formats::read_model(
            a.model.as_ref().ok_or_else(|| invalid("--model is required with --backend unet"))?,
        )?),
        TracerBackendArg::Threshold => None,
    };
    let p = ThresholdParams {
        factor: a.t,
        hi: a.hi,
        lo: a.lo,
        close_radius: a.close,
    };
    let mut sig = Vec::new();
    let mut msk = Vec::new();
    for z in 0..cg.dims()[2] {
        let (g, r) = (cg.slice(z), cr.slice(z));
        let lab = match &model {
            None => threshold_pipeline(&g, &r, &p)?,
            Some(m) => compose_label(
                &nn::predict_slice(m, &[&g, &r], a.extent)?,
                &background_subtract(&g, &r, a.t)?,
                a.theta,
            )?,
        };
        sig.push(lab.signal);
        msk.push(lab.mask.to_image());
    }
    let vs = cg.voxel_size();
    formats::write_stack(&Stack3D::from_slices(&sig, vs, Some(Channel::Green))?, &a.out, Dtype::F32)?;
    formats::write_stack(
        &Stack3D::from_slices(&msk, vs, Some(Channel::Green))?,
        &formats::with_suffix(&a.out, "_mask"),
        Dtype::U16,
    )?;
    Ok(())
}

fn report_training(outcome: &marmopipe_core::nnseg::TrainOutcome, samples: usize) {
    let h = &outcome.loss_history;
    let window = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    let k = h.len().min(20);
    println!(
        "samples={samples} steps={} loss_first={:.6} loss_last={:.6}",
        h.len(),
        window(&h[..k]),
        window(&h[h.len() - k..])
    );
}

fn cmd_train_cells(a: &TrainCellsArgs) -> CliResult {
    let cb = formats::read_stack(&a.cb)?;
    let cells = formats::read_cells(&a.cells)?;
    let o = a.train.options();
    let weighting = CellWeightParams {
        radius_zero: a.radius_zero,
        log_sigma: a.log_sigma,
        log_threshold: a.log_threshold,
        ..CellWeightParams::default()
    };
    let samples = nn::cell_samples(&cb, &cells, &weighting, &o)?;
    let outcome = nn::train_network(&samples, 1, &o)?;
    formats::write_model(&outcome.params, &a.out, o.seed)?;
    report_training(&outcome, samples.len());
    Ok(())
}

fn cmd_train_tracer(a: &TrainTracerArgs) -> CliResult {
    let cg = formats::read_stack(&a.cg)?;
    let cr = formats::read_stack(&a.cr)?;
    let labels = formats::read_stack(&a.labels)?;
    let o = a.train.options();
    let samples = nn::tracer_samples(&cg, &cr, &labels, &o)?;
    let outcome = nn::train_network(&samples, 2, &o)?;
    formats::write_model(&outcome.params, &a.out, o.seed)?;
    report_training(&outcome, samples.len());
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> CliResult {
    let params = formats::read_model(&a.model)?;
    let stacks: Vec<Stack3D> = a.input.iter().map(|p| formats::read_stack(p)).collect::<Result<_, _>>()?;
    let dims = stacks[0].dims();
    if stacks.iter().any(|s| s.dims() != dims) {
        return Err(invalid("input stacks differ in extent"));
    }
    let mut out = Vec::with_capacity(dims[2]);
    for z in 0..dims[2] {
        let slices: Vec<Image2D> = stacks.iter().map(|s| s.slice(z)).collect();
        let refs: Vec<&Image2D> = slices.iter().collect();
        out.push(nn::predict_slice(&params, &refs, a.extent)?);
    }
    let s = Stack3D::from_slices(&out, stacks[0].voxel_size(), None)?;
    formats::write_stack(&s, &a.out, Dtype::F32)?;
    Ok(())
}

fn cmd_map(a: &MapArgs) -> CliResult {
    let field = match (&a.field, &a.atlas) {
        (Some(f), _) => formats::read_field(f)?,
        (None, Some(at)) => {
            let atlas = formats::read_atlas(at)?;
            DisplacementField::identity(atlas.dims(), atlas.voxel_size())?
        }
        (None, None) => return Err(invalid("one of --field or --atlas is required")),
    };
    let mut input = formats::read_stack(&a.input)?;
    if a.downsample {
        input = downsample_stack(&input, field.voxel_size())?;
    }
    if a.mask {
        let m = apply_field_mask(&Mask3D::from_stack(&input), &field)?;
        formats::write_stack(&m.to_stack(), &a.out, Dtype::U16)?;
        return Ok(());
    }
    let mode = match a.interp {
        InterpArg::Nearest => Interpolation::Nearest,
        InterpArg::Linear => Interpolation::Linear,
    };
    if let Some(w) = marmopipe_core::mapping::interpolation_warning(&input, mode) {
        eprintln!("warning: {w}");
    }
    let mapped = apply_field(&input, &field, mode)?;
    let dtype = match a.dtype {
        DtypeArg::U16 => Dtype::U16,
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    formats::write_stack(&mapped, &a.out, dtype)?;
    Ok(())
}

fn cmd_connectivity(a: &ConnectivityArgs) -> CliResult {
    let atlas = formats::read_atlas(&a.atlas)?;
    let signal = formats::read_stack(&a.signal)?;
    let inj = Mask3D::from_stack(&formats::read_stack(&a.injection)?);
    let table = ConnectivityTable::from_parts(
        &a.brain,
        &a.injection_id,
        &injection_regions(&inj, &atlas)?,
        &projection_strengths(&signal, &atlas, a.normalize)?,
        Some(signal.voxel_size()),
    );
    formats::write_text(&a.out, &table.to_text())?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let mut any = false;
    if let (Some(p), Some(t)) = (&a.cells, &a.truth_cells) {
        any = true;
        let pred = formats::read_cells(p)?;
        let truth = formats::read_cells(t)?;
        let m = match_detections(&pred.points, &truth.points, a.radius)?;
        println!(
            "cells tp={} fp={} fn={} precision={:.6} recall={:.6} f1={:.6}",
            m.tp,
            m.fp,
            m.fn_,
            m.precision(),
            m.recall(),
            m.f1()
        );
    }
    if let (Some(p), Some(t)) = (&a.mask, &a.truth_mask) {
        any = true;
        let pred = Mask3D::from_stack(&formats::read_stack(p)?);
        let truth = Mask3D::from_stack(&formats::read_stack(t)?);
        if pred.dims() != truth.dims() {
            return Err(invalid(format!("mask extents differ: {:?} vs {:?}", pred.dims(), truth.dims())));
        }
        let [w, h, _] = pred.dims();
        let to2 = |m: &Mask3D| Mask2D::from_vec(w, h * m.dims()[2], m.data().to_vec());
        let s = segmentation_metrics(&to2(&pred)?, &to2(&truth)?)?;
        println!(
            "mask precision={:.6} recall={:.6} f1={:.6} iou={:.6}",
            s.precision, s.recall, s.f1, s.iou
        );
    }
    if let (Some(p), Some(t)) = (&a.table, &a.truth_table) {
        any = true;
        let pred = ConnectivityTable::parse(&formats::read_text_file(p)?)?;
        let truth = ConnectivityTable::parse(&formats::read_text_file(t)?)?;
        let same = pred.sources == truth.sources && pred.targets == truth.targets;
        println!("table equal={same}");
        if !same {
            return Err(CliError::Runtime("connectivity table differs from the truth table".into()));
        }
    }
    if !any {
        return Err(invalid("nothing to evaluate: pass --cells, --mask or --table with its truth"));
    }
    Ok(())
}

fn cmd_run(a: &RunArgs) -> CliResult {
    let mut cfg = PipelineConfig::load(&a.config).map_err(|errs| {
        invalid(
            errs.iter()
                .map(|e| format!("\n  {e}"))
                .collect::<String>(),
        )
    })?;
    if let Some(t) = a.threads {
        if t == 0 {
            return Err(invalid("--threads must be >= 1"));
        }
        cfg.threads = t;
    }
    if a.check {
        println!("config ok");
        return Ok(());
    }
    match run_pipeline(&cfg) {
        Ok(report) => {
            print!("{}", report.to_text());
            Ok(())
        }
        Err(e) => {
            print!("{}", e.report.to_text());
            Err(CliError::Runtime(e.to_string()))
        }
    }
}

/// Stage names in execution order.
pub fn stages() -> &'static [&'static str] {
    &pipeline::STAGES
}
