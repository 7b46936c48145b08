//! Separable Gaussian smoothing and box-average downsampling.
//!
//! Convolution pads by half-sample symmetric reflection
//! (`d c b a | a b c d | d c b a`), so constants are preserved up to the
//! border and no darkening creeps in from outside the grid.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{Image2D, Stack3D};
use crate::math;

/// Kernel half-width in multiples of σ.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

/// Sampled Gaussian of standard deviation `sigma` (in samples), truncated at
/// `ceil(4σ)` on each side and normalized to unit sum. Index `radius` is the
/// center tap.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param("sigma", "must be > 0"));
    }
    let radius = math::ceil(TRUNCATE_SIGMAS * sigma) as isize;
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| math::exp(-((i * i) as f64) / denom))
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    Ok(k)
}

/// Fold an out-of-range index back into `[0, n)` by half-sample reflection.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Convolve a dense `[nx, ny, nz]` grid along one axis with an odd-length
/// kernel.
pub fn convolve_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    debug_assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
    debug_assert!(kernel.len() % 2 == 1);
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let radius = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    let mut line = vec![0.0; n];
    // Precomputed source indices for the border taps; interior taps index directly.
    let mut lines_start = Vec::with_capacity(data.len() / n);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let coord = [x, y, z][axis];
                if coord == 0 {
                    lines_start.push(x + dims[0] * (y + dims[1] * z));
                }
            }
        }
    }
    for &start in &lines_start {
        for (i, v) in line.iter_mut().enumerate() {
            *v = data[start + i * stride];
        }
        for i in 0..n {
            let mut acc = 0.0;
            let lo = i as isize - radius;
            if lo >= 0 && (i as isize + radius) < n as isize {
                let base = lo as usize;
                for (k, &w) in kernel.iter().enumerate() {
                    acc += w * line[base + k];
                }
            } else {
                for (k, &w) in kernel.iter().enumerate() {
                    acc += w * line[reflect_index(lo + k as isize, n)];
                }
            }
            out[start + i * stride] = acc;
        }
    }
    out
}

/// Separable Gaussian blur of a dense grid. `sigma_voxels[a] == 0` skips axis
/// `a`; axes of length 1 are skipped because reflection makes them identity.
pub fn gaussian_blur_grid(data: &[f64], dims: [usize; 3], sigma_voxels: [f64; 3]) -> Result<Vec<f64>> {
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let s = sigma_voxels[axis];
        if s < 0.0 || !s.is_finite() {
            return Err(Error::param("sigma", "must be >= 0"));
        }
        if s == 0.0 || dims[axis] == 1 {
            continue;
        }
        let k = gaussian_kernel(s)?;
        cur = convolve_axis(&cur, dims, axis, &k);
    }
    Ok(cur)
}

/// Isotropic Gaussian blur of a volume; `sigma_um` is converted to fractional
/// voxels per axis using the stack's voxel size.
pub fn gaussian_blur_stack(stack: &Stack3D, sigma_um: f64) -> Result<Stack3D> {
    if !(sigma_um > 0.0) {
        return Err(Error::param("sigma_um", "must be > 0"));
    }
    let vs = stack.voxel_size();
    let sig = [sigma_um / vs[0], sigma_um / vs[1], sigma_um / vs[2]];
    let data = gaussian_blur_grid(stack.data(), stack.dims(), sig)?;
    stack.with_data(data)
}

/// Isotropic Gaussian blur of a 2D image, `sigma_px` in pixels.
pub fn gaussian_blur_image(image: &Image2D, sigma_px: f64) -> Result<Image2D> {
    if !(sigma_px > 0.0) {
        return Err(Error::param("sigma", "must be > 0"));
    }
    let dims = [image.width(), image.height(), 1];
    let data = gaussian_blur_grid(image.data(), dims, [sigma_px, sigma_px, 0.0])?;
    Image2D::from_vec(image.width(), image.height(), data)
}

/// Target index for each source index along one axis: the target voxel that
/// contains the source voxel's center.
fn bin_map(n_src: usize, src: f64, dst: f64) -> (Vec<usize>, usize) {
    let map: Vec<usize> = (0..n_src)
        .map(|i| {
            let c = (i as f64 + 0.5) * src / dst;
            // tolerate rounding in exact-ratio cases such as 1.34 -> 50
            math::floor(c + 1e-9) as usize
        })
        .collect();
    let n_dst = map.last().map_or(1, |&m| m + 1);
    (map, n_dst)
}

/// Box-average a volume onto a coarser grid. Each target voxel is the mean of
/// the source voxels whose centers fall inside it.
pub fn downsample_stack(stack: &Stack3D, target_voxel: [f64; 3]) -> Result<Stack3D> {
    let src = stack.voxel_size();
    for a in 0..3 {
        if !(target_voxel[a] > 0.0) || target_voxel[a] < src[a] * (1.0 - 1e-12) {
            return Err(Error::param(
                "target_voxel",
                alloc::format!(
                    "target {:?} must be >= source voxel {:?} on every axis",
                    target_voxel, src
                ),
            ));
        }
    }
    let d = stack.dims();
    let (mx, nx) = bin_map(d[0], src[0], target_voxel[0]);
    let (my, ny) = bin_map(d[1], src[1], target_voxel[1]);
    let (mz, nz) = bin_map(d[2], src[2], target_voxel[2]);
    let mut sum = vec![0.0; nx * ny * nz];
    let mut count = vec![0u32; nx * ny * nz];
    let data = stack.data();
    let mut i = 0;
    for z in 0..d[2] {
        for y in 0..d[1] {
            let row = nx * (my[y] + ny * mz[z]);
            for x in 0..d[0] {
                let t = row + mx[x];
                sum[t] += data[i];
                count[t] += 1;
                i += 1;
            }
        }
    }
    let out = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| s / f64::from(c))
        .collect();
    Stack3D::new([nx, ny, nz], target_voxel, stack.channel, out)
}
