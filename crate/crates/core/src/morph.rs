//! Binary morphology on 2D masks.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::Mask2D;

/// Offsets of the digital disk `{(dx, dy) : dx² + dy² <= r²}`.
pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Dilation by a symmetric structuring element; pixels outside the grid are
/// background.
pub fn dilate(mask: &Mask2D, element: &[(isize, isize)]) -> Mask2D {
    let (w, h) = mask.dims();
    let mut out = Mask2D::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            for &(dx, dy) in element {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    out.set(nx as usize, ny as usize, true);
                }
            }
        }
    }
    out
}

/// Erosion by a symmetric structuring element; pixels outside the grid are
/// foreground, which makes erosion the adjoint of [`dilate`] and closing a
/// true closure (extensive and idempotent).
pub fn erode(mask: &Mask2D, element: &[(isize, isize)]) -> Mask2D {
    let (w, h) = mask.dims();
    Mask2D::from_fn(w, h, |x, y| {
        element.iter().all(|&(dx, dy)| {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h || mask.get(nx as usize, ny as usize)
        })
    })
}

/// Closing (dilation, then erosion) with a disk of the given radius.
pub fn close(mask: &Mask2D, radius: usize) -> Result<Mask2D> {
    if radius == 0 {
        return Err(Error::param("radius", "must be >= 1"));
    }
    let se = disk(radius);
    Ok(erode(&dilate(mask, &se), &se))
}

/// Reconstruction by dilation: the 8-connected components of `mask` that
/// share at least one pixel with `marker`.
pub fn reconstruct(marker: &Mask2D, mask: &Mask2D) -> Result<Mask2D> {
    if marker.dims() != mask.dims() {
        return Err(Error::shape(mask.dims(), marker.dims()));
    }
    if !marker.is_subset_of(mask) {
        return Err(Error::InvalidData("marker must be a subset of the mask".into()));
    }
    let (w, h) = mask.dims();
    let mut out = Mask2D::empty(w, h);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if marker.get(x, y) && !out.get(x, y) {
                out.set(x, y, true);
                queue.push_back((x, y));
                while let Some((cx, cy)) = queue.pop_front() {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (nx, ny) = (cx as isize + dx, cy as isize + dy);
                            if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                                continue;
                            }
                            let (nx, ny) = (nx as usize, ny as usize);
                            if mask.get(nx, ny) && !out.get(nx, ny) {
                                out.set(nx, ny, true);
                                queue.push_back((nx, ny));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
