//! Spacing unification (trilinear) and block mean-pool downsampling.

use super::{Grid, Vec3, Volume};
use crate::error::{Error, Result};

/// Trilinear sample at a fractional voxel index, clamped to the grid.
pub fn trilinear(v: &Volume, idx: Vec3) -> f64 {
    let shape = v.grid.shape;
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0f64; 3];
    for a in 0..3 {
        let max = (shape[a] - 1) as f64;
        let x = idx[a].clamp(0.0, max);
        let f = x.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(shape[a] - 1);
        t[a] = x - f;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut c = [0usize; 3];
        for a in 0..3 {
            if corner >> a & 1 == 1 {
                w *= t[a];
                c[a] = hi[a];
            } else {
                w *= 1.0 - t[a];
                c[a] = lo[a];
            }
        }
        if w != 0.0 {
            acc += w * v.at(c) as f64;
        }
    }
    acc
}

/// Resamples onto a new voxel spacing with trilinear interpolation.
///
/// The origin is kept; each axis gets `floor((n - 1) * s / s') + 1` voxels so the world
/// extent is preserved to within one new voxel.
pub fn resample_to_spacing(v: &Volume, target_spacing: Vec3) -> Result<Volume> {
    if target_spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidArgument(format!("target spacing {target_spacing:?} must be > 0")));
    }
    v.check_finite()?;
    if target_spacing == v.grid.spacing {
        return Ok(v.clone());
    }
    let shape: [usize; 3] = std::array::from_fn(|a| {
        let extent = (v.grid.shape[a] - 1) as f64 * v.grid.spacing[a];
        (extent / target_spacing[a] + 1e-9).floor() as usize + 1
    });
    let grid = Grid::new(shape, target_spacing, v.grid.origin)?;
    let ratio: Vec3 = std::array::from_fn(|a| target_spacing[a] / v.grid.spacing[a]);
    let mut data = Vec::with_capacity(grid.len());
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let idx = [z as f64 * ratio[0], y as f64 * ratio[1], x as f64 * ratio[2]];
                data.push(trilinear(v, idx) as f32);
            }
        }
    }
    Volume::new(grid, data)
}

/// Mean-pools non-overlapping blocks of `factor` voxels per axis.
///
/// Trailing voxels that do not fill a block are dropped. Spacing is multiplied by the
/// factor and the origin moves to the center of the first block.
pub fn downsample(v: &Volume, factor: [usize; 3]) -> Result<Volume> {
    if factor.contains(&0) {
        return Err(Error::InvalidArgument(format!("downsample factor {factor:?} must be >= 1")));
    }
    if (0..3).any(|a| factor[a] > v.grid.shape[a]) {
        return Err(Error::InvalidArgument(format!(
            "downsample factor {factor:?} exceeds volume shape {:?}",
            v.grid.shape
        )));
    }
    if factor == [1, 1, 1] {
        return Ok(v.clone());
    }
    let shape: [usize; 3] = std::array::from_fn(|a| v.grid.shape[a] / factor[a]);
    let spacing: Vec3 = std::array::from_fn(|a| v.grid.spacing[a] * factor[a] as f64);
    let origin: Vec3 =
        std::array::from_fn(|a| v.grid.origin[a] + 0.5 * (factor[a] - 1) as f64 * v.grid.spacing[a]);
    let grid = Grid::new(shape, spacing, origin)?;
    let block = (factor[0] * factor[1] * factor[2]) as f64;
    let mut data = Vec::with_capacity(grid.len());
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let mut s = 0.0f64;
                for dz in 0..factor[0] {
                    for dy in 0..factor[1] {
                        for dx in 0..factor[2] {
                            s += v.at([z * factor[0] + dz, y * factor[1] + dy, x * factor[2] + dx]) as f64;
                        }
                    }
                }
                data.push((s / block) as f32);
            }
        }
    }
    Volume::new(grid, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume_from(shape: [usize; 3], spacing: Vec3, f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        let grid = Grid::new(shape, spacing, [1.0, 2.0, 3.0]).unwrap();
        let mut data = Vec::new();
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Volume::new(grid, data).unwrap()
    }

    #[test]
    fn identical_spacing_is_identity() {
        let v = volume_from([3, 4, 5], [0.5, 0.5, 0.7], |z, y, x| (z * 31 + y * 7 + x) as f32 * 0.37);
        assert_eq!(resample_to_spacing(&v, v.spacing()).unwrap(), v);
    }

    #[test]
    fn spacing_unification_rescales_shape() {
        let v = volume_from([64, 32, 32], [0.25, 0.5, 0.5], |_, _, _| 1.0);
        let r = resample_to_spacing(&v, [0.4; 3]).unwrap();
        assert_eq!(r.spacing(), [0.4; 3]);
        assert_eq!(r.origin(), v.origin());
        // ratio 0.25/0.4 * 64 = 40, 0.5/0.4 * 32 = 40; node-centered extent gives 40 and 39
        assert_eq!(r.shape(), [40, 39, 39]);
        for a in 0..3 {
            let before = (v.shape()[a] - 1) as f64 * v.spacing()[a];
            let after = (r.shape()[a] - 1) as f64 * r.spacing()[a];
            assert!((before - after).abs() <= r.spacing()[a]);
        }
    }

    #[test]
    fn linear_ramp_is_reproduced_at_double_density() {
        let ramp = |z: f64, y: f64, x: f64| 0.5 + 1.25 * z - 0.75 * y + 2.0 * x;
        let v = volume_from([6, 5, 7], [1.0; 3], |z, y, x| ramp(z as f64, y as f64, x as f64) as f32);
        let r = resample_to_spacing(&v, [0.5; 3]).unwrap();
        assert_eq!(r.shape(), [11, 9, 13]);
        for z in 1..10 {
            for y in 1..8 {
                for x in 1..12 {
                    let expect = ramp(z as f64 * 0.5, y as f64 * 0.5, x as f64 * 0.5);
                    assert!((r.at([z, y, x]) as f64 - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let v = volume_from([2, 2, 2], [1.0; 3], |z, _, _| if z == 1 { f32::NAN } else { 0.0 });
        assert!(resample_to_spacing(&v, [0.5; 3]).is_err());
        assert!(resample_to_spacing(&v, [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn full_scale_downsample_shape() {
        let grid = Grid::new([512, 512, 320], [0.4; 3], [0.0; 3]).unwrap();
        let v = Volume::zeros(grid).unwrap();
        let d = downsample(&v, [4, 4, 4]).unwrap();
        assert_eq!(d.shape(), [128, 128, 80]);
        assert_eq!(d.spacing(), [1.6; 3]);
    }

    #[test]
    fn downsample_identity_and_constants() {
        let v = volume_from([4, 6, 8], [1.0; 3], |z, y, x| (z + y + x) as f32);
        assert_eq!(downsample(&v, [1, 1, 1]).unwrap(), v);
        let c = volume_from([4, 6, 8], [1.0; 3], |_, _, _| 2.5);
        for f in [[2, 2, 2], [4, 3, 8], [3, 5, 7]] {
            assert!(downsample(&c, f).unwrap().data.iter().all(|&x| x == 2.5));
        }
    }

    #[test]
    fn downsample_conserves_mean_when_factor_divides_shape() {
        let v = volume_from([4, 6, 8], [1.0; 3], |z, y, x| ((z * 13 + y * 5 + x * 3) % 11) as f32);
        let d = downsample(&v, [2, 3, 4]).unwrap();
        assert!((d.mean() - v.mean()).abs() < 1e-6);
    }

    #[test]
    fn downsample_rejects_oversized_factor() {
        let v = volume_from([4, 4, 4], [1.0; 3], |_, _, _| 0.0);
        assert!(downsample(&v, [5, 1, 1]).is_err());
        assert!(downsample(&v, [0, 1, 1]).is_err());
    }

    #[test]
    fn downsampled_origin_is_block_center() {
        let v = volume_from([4, 4, 4], [0.5; 3], |_, _, _| 0.0);
        let d = downsample(&v, [2, 2, 2]).unwrap();
        assert_eq!(d.origin(), [1.25, 2.25, 3.25]);
    }
}
