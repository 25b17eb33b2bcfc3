use super::{GridGeometry, Raster, SceneError};

/// Kernel parameter for cubic convolution.
pub const CUBIC_A: f64 = -0.5;

/// Cubic convolution kernel with parameter [`CUBIC_A`].
#[inline]
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Taps for sampling position `pos` (in source cell units) along an axis of
/// length `len`; indices are clamped at the edges.
fn taps(pos: f64, len: usize) -> [(usize, f64); 4] {
    let base = pos.floor();
    let t = pos - base;
    let base = base as isize;
    let mut out = [(0usize, 0.0f64); 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let offset = k as isize - 1;
        let idx = (base + offset).clamp(0, len as isize - 1) as usize;
        *slot = (idx, cubic_kernel(t - offset as f64));
    }
    out
}

/// Upsamples `grid` by an integer `factor` with cubic convolution.
///
/// Fine sample `j` sits at source coordinate `j / factor`, so every
/// `factor`-th output cell coincides with a source cell centre and the source
/// is recovered exactly by decimation. The output geometry is shifted by
/// `cellsize / 2 - cellsize / (2 * factor)` accordingly. An output cell is
/// invalid when any source cell with non-zero weight is invalid.
pub fn upsample_cubic(grid: &Raster, factor: usize) -> Result<Raster, SceneError> {
    if factor < 1 {
        return Err(SceneError::Parameter(format!(
            "upsampling factor must be >= 1, got {factor}"
        )));
    }
    let g = grid.geometry;
    if g.ncols < 4 || g.nrows < 4 {
        return Err(SceneError::Parameter(format!(
            "cubic upsampling needs at least 4x4 cells, got {}x{}",
            g.ncols, g.nrows
        )));
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let f = factor as f64;
    let shift = g.cellsize / 2.0 - g.cellsize / (2.0 * f);
    let out_geom = GridGeometry::new(
        g.ncols * factor,
        g.nrows * factor,
        g.xll + shift,
        g.yll - shift,
        g.cellsize / f,
    );
    let col_taps: Vec<_> = (0..out_geom.ncols)
        .map(|c| taps(c as f64 / f, g.ncols))
        .collect();
    let mut values = vec![0.0; out_geom.len()];
    let mut valid = vec![true; out_geom.len()];
    for r in 0..out_geom.nrows {
        let rt = taps(r as f64 / f, g.nrows);
        for (c, ct) in col_taps.iter().enumerate() {
            let mut acc = 0.0;
            let mut ok = true;
            for &(ri, wy) in &rt {
                if wy == 0.0 {
                    continue;
                }
                for &(ci, wx) in ct {
                    if wx == 0.0 {
                        continue;
                    }
                    let src = g.index(ri, ci);
                    if !grid.valid[src] {
                        ok = false;
                    } else {
                        acc += wy * wx * grid.values[src];
                    }
                }
            }
            let o = out_geom.index(r, c);
            if ok {
                values[o] = acc;
            } else {
                values[o] = f64::NAN;
                valid[o] = false;
            }
        }
    }
    Ok(Raster {
        geometry: out_geom,
        values,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(n: usize) -> GridGeometry {
        GridGeometry::new(n, n, 100.0, 200.0, 20.0)
    }

    #[test]
    fn kernel_interpolates() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        // Partition of unity at an arbitrary offset.
        let t = 0.3;
        let s: f64 = (-1..=2).map(|k| cubic_kernel(t - k as f64)).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn factor_zero_is_parameter_error() {
        let r = Raster::filled(geom(5), 0.3);
        assert!(matches!(upsample_cubic(&r, 0), Err(SceneError::Parameter(_))));
        let small = Raster::filled(GridGeometry::new(3, 5, 0.0, 0.0, 1.0), 0.3);
        assert!(upsample_cubic(&small, 2).is_err());
    }

    #[test]
    fn factor_one_is_identity() {
        let values: Vec<f64> = (0..25).map(|i| i as f64 * 0.01).collect();
        let r = Raster::new(geom(5), values);
        assert_eq!(upsample_cubic(&r, 1).unwrap(), r);
    }

    #[test]
    fn constant_grid_stays_constant() {
        let r = Raster::filled(geom(6), 0.4217);
        for factor in [2, 3, 5] {
            let up = upsample_cubic(&r, factor).unwrap();
            assert_eq!(up.geometry.ncols, 6 * factor);
            assert!(up.values.iter().all(|v| (v - 0.4217).abs() < 1e-12));
        }
    }

    #[test]
    fn linear_ramp_reproduced_away_from_edges() {
        let g = geom(8);
        let ramp = |row: f64, col: f64| 0.1 + 0.03 * col - 0.02 * row;
        let values = (0..g.len())
            .map(|i| {
                let (r, c) = g.row_col(i);
                ramp(r as f64, c as f64)
            })
            .collect();
        let up = upsample_cubic(&Raster::new(g, values), 2).unwrap();
        let og = up.geometry;
        for r in 2..og.nrows - 6 {
            for c in 2..og.ncols - 6 {
                let expected = ramp(r as f64 / 2.0, c as f64 / 2.0);
                assert!((up.values[og.index(r, c)] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_cell_spreads_to_touched_outputs() {
        let g = geom(6);
        let mut r = Raster::filled(g, 0.2);
        let bad = g.index(3, 3);
        r.valid[bad] = false;
        let up = upsample_cubic(&r, 2).unwrap();
        let og = up.geometry;
        // The coincident sample and its half-cell neighbours depend on the bad cell.
        assert!(!up.valid[og.index(6, 6)]);
        assert!(!up.valid[og.index(5, 6)]);
        assert!(!up.valid[og.index(7, 7)]);
        // Samples that coincide with other source centres do not.
        assert!(up.valid[og.index(6, 4)]);
        assert!(up.valid[og.index(2, 2)]);
    }

    proptest! {
        #[test]
        fn decimation_recovers_source(
            values in prop::collection::vec(0.0f64..1.0, 36),
            factor in 1usize..5,
        ) {
            let g = geom(6);
            let up = upsample_cubic(&Raster::new(g, values.clone()), factor).unwrap();
            for r in 0..6 {
                for c in 0..6 {
                    let v = up.values[up.geometry.index(r * factor, c * factor)];
                    prop_assert!((v - values[g.index(r, c)]).abs() < 1e-9);
                }
            }
        }
    }
}
