//! Cell-body phantoms and the Hessian detection evaluation protocol.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::metrics::{match_detections, MatchResult};
use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::injsite::{detect_cells_in_slice, hessian_cell_filter, CellPoint, Rect};
use crate::math;

/// Parameters of a 2D field of Gaussian cell bodies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellFieldSpec {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub sigma: f64,
    pub amplitude: f64,
    pub background: f64,
    /// Minimum center distance between cells.
    pub min_separation: f64,
    /// Minimum distance of a center from the image border.
    pub border: usize,
    pub noise: bool,
    pub seed: u64,
}

impl Default for CellFieldSpec {
    fn default() -> Self {
        CellFieldSpec {
            width: 256,
            height: 256,
            count: 50,
            sigma: 2.5,
            amplitude: 600.0,
            background: 80.0,
            min_separation: 12.0,
            border: 6,
            noise: true,
            seed: 0,
        }
    }
}

/// Add `amplitude * exp(-d² / 2σ²)` around `(cx, cy)`, truncated at 4σ.
pub fn stamp_gaussian(img: &mut Image2D, cx: f64, cy: f64, sigma: f64, amplitude: f64) {
    let r = math::ceil(4.0 * sigma) as isize;
    let (w, h) = img.dims();
    let (ix, iy) = (math::round(cx) as isize, math::round(cy) as isize);
    for y in iy - r..=iy + r {
        for x in ix - r..=ix + r {
            if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
                continue;
            }
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let v = amplitude * math::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            let cur = img.get(x as usize, y as usize);
            img.set(x as usize, y as usize, cur + v);
        }
    }
}

/// Replace every pixel by a Poisson draw with that mean.
pub fn poisson_noise(img: &Image2D, rng: &mut ChaCha8Rng) -> Image2D {
    img.map_with(|v| {
        if v > 0.0 {
            Poisson::new(v).map(|p| p.sample(rng)).unwrap_or(v)
        } else {
            0.0
        }
    })
}

trait MapWith {
    fn map_with(&self, f: impl FnMut(f64) -> f64) -> Image2D;
}

impl MapWith for Image2D {
    fn map_with(&self, mut f: impl FnMut(f64) -> f64) -> Image2D {
        let (w, h) = self.dims();
        Image2D::from_vec(w, h, self.data().iter().map(|&v| f(v)).collect()).expect("same extent")
    }
}

/// Random well-separated integer cell centers.
pub fn place_cells(spec: &CellFieldSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    if spec.width <= 2 * spec.border || spec.height <= 2 * spec.border {
        return Err(Error::param("border", "leaves no room for cells"));
    }
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(spec.count);
    let min2 = spec.min_separation * spec.min_separation;
    let mut attempts = 0usize;
    while out.len() < spec.count {
        attempts += 1;
        if attempts > 1000 * (spec.count + 1) {
            return Err(Error::param("count", "cells do not fit at the requested separation"));
        }
        let x = rng.random_range(spec.border..spec.width - spec.border);
        let y = rng.random_range(spec.border..spec.height - spec.border);
        let ok = out.iter().all(|&(px, py)| {
            let (dx, dy) = (px as f64 - x as f64, py as f64 - y as f64);
            dx * dx + dy * dy >= min2
        });
        if ok {
            out.push((x, y));
        }
    }
    Ok(out)
}

/// Cell image and its true centers.
pub fn cell_field(spec: &CellFieldSpec) -> Result<(Image2D, Vec<CellPoint>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = place_cells(spec, &mut rng)?;
    let mut img = Image2D::filled(spec.width, spec.height, spec.background);
    for &(x, y) in &centers {
        stamp_gaussian(&mut img, x as f64, y as f64, spec.sigma, spec.amplitude);
    }
    if spec.noise {
        img = poisson_noise(&img, &mut rng);
    }
    let truth = centers
        .into_iter()
        .map(|(x, y)| CellPoint { x, y, z: 0, score: 1.0 })
        .collect();
    Ok((img, truth))
}

/// Normalized cross-correlation between the window of radius `r` around
/// `(cx, cy)` and a centered Gaussian template of the given σ. `None` when
/// the window leaves the image or is flat.
pub fn template_correlation(img: &Image2D, cx: usize, cy: usize, sigma: f64, r: usize) -> Option<f64> {
    let (w, h) = img.dims();
    if cx < r || cy < r || cx + r >= w || cy + r >= h {
        return None;
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            let (dx, dy) = (x as f64 - cx as f64, y as f64 - cy as f64);
            a.push(img.get(x, y));
            b.push(math::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
        }
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / math::sqrt(saa * sbb))
}

/// Outcome of threshold/scale selection on a training split and evaluation
/// on a disjoint test split.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolResult {
    pub sigmas: Vec<f64>,
    pub threshold: f64,
    pub train_f1: f64,
    pub test: MatchResult,
}

impl ProtocolResult {
    pub fn test_f1(&self) -> f64 {
        self.test.f1()
    }
}

fn in_rect(p: &CellPoint, r: &Rect) -> bool {
    r.contains(p.x, p.y)
}

/// Best F1 over thresholds drawn from the candidate scores.
fn best_threshold(cands: &[CellPoint], truth: &[CellPoint], radius: f64) -> Result<(f64, f64)> {
    let mut scores: Vec<f64> = cands.iter().map(|c| c.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut ths = vec![0.0];
    // at most ~200 thresholds: just below evenly spaced candidate scores
    let step = (scores.len() / 200).max(1);
    for i in (0..scores.len()).step_by(step) {
        let t = if i == 0 { 0.0 } else { 0.5 * (scores[i - 1] + scores[i]) };
        ths.push(t);
    }
    let mut best = (0.0, -1.0);
    for t in ths {
        let kept: Vec<CellPoint> = cands.iter().copied().filter(|c| c.score > t).collect();
        let f = match_detections(&kept, truth, radius)?.f1();
        if f > best.1 {
            best = (t, f);
        }
    }
    Ok(best)
}

/// Choose the scale subset (nonempty subsets of `sigma_pool`) and response
/// threshold maximizing F1 inside `train`, then report F1 inside `test`.
pub fn hessian_protocol(
    img: &Image2D,
    truth: &[CellPoint],
    train: Rect,
    test: Rect,
    sigma_pool: &[f64],
    radius: f64,
) -> Result<ProtocolResult> {
    if sigma_pool.is_empty() || sigma_pool.len() > 12 {
        return Err(Error::param("sigma_pool", "needs 1 to 12 scales"));
    }
    let overlap = train.x0 < test.x1 && test.x0 < train.x1 && train.y0 < test.y1 && test.y0 < train.y1;
    if overlap {
        return Err(Error::param("splits", "train and test regions must be disjoint"));
    }
    let responses: Vec<Image2D> = sigma_pool
        .iter()
        .map(|&s| hessian_cell_filter(img, &[s]))
        .collect::<Result<_>>()?;
    let truth_train: Vec<CellPoint> = truth.iter().copied().filter(|p| in_rect(p, &train)).collect();
    let truth_test: Vec<CellPoint> = truth.iter().copied().filter(|p| in_rect(p, &test)).collect();
    let mut best: Option<(Vec<usize>, f64, f64)> = None;
    for subset in 1u32..(1 << sigma_pool.len()) {
        let idx: Vec<usize> = (0..sigma_pool.len()).filter(|&i| subset >> i & 1 == 1).collect();
        let resp = max_over(&responses, &idx);
        let cands = detect_cells_in_slice(&resp, 0, 0.0, Some(train));
        let (t, f) = best_threshold(&cands, &truth_train, radius)?;
        if best.as_ref().is_none_or(|b| f > b.2) {
            best = Some((idx, t, f));
        }
    }
    let (idx, t, train_f1) = best.expect("at least one subset");
    let resp = max_over(&responses, &idx);
    let pred = detect_cells_in_slice(&resp, 0, t, Some(test));
    Ok(ProtocolResult {
        sigmas: idx.iter().map(|&i| sigma_pool[i]).collect(),
        threshold: t,
        train_f1,
        test: match_detections(&pred, &truth_test, radius)?,
    })
}

fn max_over(responses: &[Image2D], idx: &[usize]) -> Image2D {
    let mut acc = responses[idx[0]].clone();
    for &i in &idx[1..] {
        for (a, &b) in acc.data_mut().iter_mut().zip(responses[i].data()) {
            *a = a.max(b);
        }
    }
    acc
}
