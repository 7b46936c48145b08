//! Straightforward reference implementation of the rough injection-site
//! stage, used to plant ground truth: direct scatter convolution of the
//! binary volume and breadth-first component labelling.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{Mask3D, Stack3D};
use crate::math;

/// Per-axis weights `w[q][p]`: how much input sample `p` contributes to
/// output sample `q` under a reflected, truncated, normalized Gaussian.
fn axis_weights(n: usize, sigma: f64) -> Vec<Vec<(usize, f64)>> {
    let mut rows = vec![Vec::new(); n];
    if sigma <= 0.0 || n == 1 {
        for (q, r) in rows.iter_mut().enumerate() {
            r.push((q, 1.0));
        }
        return rows;
    }
    let radius = math::ceil(4.0 * sigma) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| math::exp(-((k * k) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = taps.iter().sum();
    for (q, row) in rows.iter_mut().enumerate() {
        let mut acc = vec![0.0; n];
        for k in -radius..=radius {
            // fold q + k back into range by mirror reflection
            let mut i = q as isize + k;
            let n_i = n as isize;
            loop {
                if i < 0 {
                    i = -1 - i;
                } else if i >= n_i {
                    i = 2 * n_i - 1 - i;
                } else {
                    break;
                }
            }
            acc[i as usize] += taps[(k + radius) as usize] / total;
        }
        for (p, w) in acc.into_iter().enumerate() {
            if w != 0.0 {
                row.push((p, w));
            }
        }
    }
    rows
}

/// Transpose `w[q] -> [(p, w)]` into `w[p] -> [(q, w)]` for scattering.
fn scatter_table(rows: &[Vec<(usize, f64)>]) -> Vec<Vec<(usize, f64)>> {
    let mut t = vec![Vec::new(); rows.len()];
    for (q, row) in rows.iter().enumerate() {
        for &(p, w) in row {
            t[p].push((q, w));
        }
    }
    t
}

/// Binarize at `> t_raw`, smooth by scattering every positive voxel's
/// kernel, keep voxels above half the peak, then the largest 6-connected
/// component (ties to the smallest linear index).
pub fn reference_localize(low_cb: &Stack3D, t_raw: f64, sigma_um: f64) -> Result<Mask3D> {
    if !(sigma_um > 0.0) {
        return Err(Error::param("sigma_um", "must be > 0"));
    }
    let dims = low_cb.dims();
    let vs = low_cb.voxel_size();
    let tables: Vec<Vec<Vec<(usize, f64)>>> = (0..3)
        .map(|a| scatter_table(&axis_weights(dims[a], sigma_um / vs[a])))
        .collect();
    let n = dims[0] * dims[1] * dims[2];
    let mut dense = vec![0.0; n];
    let mut any = false;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if !(low_cb.get(x, y, z) > t_raw) {
                    continue;
                }
                any = true;
                for &(qz, wz) in &tables[2][z] {
                    for &(qy, wy) in &tables[1][y] {
                        let wzy = wz * wy;
                        let base = dims[0] * (qy + dims[1] * qz);
                        for &(qx, wx) in &tables[0][x] {
                            dense[base + qx] += wzy * wx;
                        }
                    }
                }
            }
        }
    }
    if !any {
        return Ok(Mask3D::empty(dims, vs));
    }
    let peak = dense.iter().cloned().fold(f64::MIN, f64::max);
    let cand: Vec<bool> = dense.iter().map(|&v| v > 0.5 * peak).collect();

    let mut label = vec![0usize; n];
    let mut best = (0usize, 0usize);
    let mut next = 0;
    for start in 0..n {
        if !cand[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        let mut size = 0;
        let mut queue = VecDeque::from([start]);
        label[start] = next;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y, z) = (i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1]));
            let mut push = |j: usize| {
                if cand[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < dims[0] {
                push(i + 1);
            }
            if y > 0 {
                push(i - dims[0]);
            }
            if y + 1 < dims[1] {
                push(i + dims[0]);
            }
            if z > 0 {
                push(i - dims[0] * dims[1]);
            }
            if z + 1 < dims[2] {
                push(i + dims[0] * dims[1]);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    Mask3D::new(dims, vs, label.iter().map(|&l| l == best.0 && l != 0).collect())
}
