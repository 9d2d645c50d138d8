use crate::geometry::BevGridSpec;

use super::Annotation;

/// Gaussian kernel diameters for levels 3/4/5, each in that level's own cell
/// units.
pub const DEFAULT_DIAMETERS: [f64; 3] = [20.0, 10.0, 5.0];

/// Ground-truth occupancy and offset maps of one BEV level, row-major over
/// `rows x cols` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    pub level: usize,
    pub rows: usize,
    pub cols: usize,
    pub occupancy: Vec<f64>,
    /// Channel-major: `offset[c * rows * cols + cell]`.
    pub offset: Vec<f64>,
    pub pos_mask: Vec<bool>,
    /// Annotations dropped for falling outside the grid.
    pub skipped: usize,
}

impl TargetMaps {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn num_pos(&self) -> usize {
        self.pos_mask.iter().filter(|&&p| p).count()
    }

    pub fn offset_at(&self, cell: usize) -> [f64; 2] {
        [self.offset[cell], self.offset[self.cells() + cell]]
    }
}

/// Targets at `level` with the default kernel diameter for that level.
pub fn make_target_maps(annotations: &[Annotation], level: usize, grid: &BevGridSpec) -> TargetMaps {
    let diameter = DEFAULT_DIAMETERS[level - 3];
    make_target_maps_at(annotations, level, grid, diameter)
}

/// Targets on the level-`level` cell lattice with an explicit kernel
/// diameter (level cell units). Peaks sit at the floor of each continuous
/// level coordinate; the Gaussian `exp(-d^2 / 2 sigma^2)`, `sigma =
/// diameter / 6`, is centred on the peak cell and truncated at distance
/// `diameter / 2`.
pub fn make_target_maps_at(annotations: &[Annotation], level: usize, grid: &BevGridSpec, diameter: f64) -> TargetMaps {
    let (rows, cols) = grid.level_shape(level);
    let n = rows * cols;
    let mut maps = TargetMaps {
        level,
        rows,
        cols,
        occupancy: vec![0.0; n],
        offset: vec![0.0; 2 * n],
        pos_mask: vec![false; n],
        skipped: 0,
    };
    let scale = BevGridSpec::level_scale(level) as f64;
    let sigma = diameter / 6.0;
    let radius = diameter / 2.0;
    let reach = radius.floor() as isize;
    for a in annotations {
        let g = grid.world_to_grid(a.x, a.y);
        if !grid.contains_grid(g) {
            log::warn!("annotation {} at ({}, {}) outside the grid; skipped", a.id, a.x, a.y);
            maps.skipped += 1;
            continue;
        }
        // Snap coordinates within rounding noise of a lattice point so that
        // world -> grid round trips do not flip the floor cell.
        let c = [g[0] / scale, g[1] / scale].map(|v| if (v - v.round()).abs() < 1e-9 { v.round() } else { v });
        let (pi, pj) = (c[0].floor() as usize, c[1].floor() as usize);
        let (pi, pj) = (pi.min(rows - 1), pj.min(cols - 1));
        let cell = pi * cols + pj;
        maps.pos_mask[cell] = true;
        maps.offset[cell] = c[0] - pi as f64;
        maps.offset[n + cell] = c[1] - pj as f64;
        for di in -reach..=reach {
            for dj in -reach..=reach {
                let (i, j) = (pi as isize + di, pj as isize + dj);
                if i < 0 || j < 0 || i >= rows as isize || j >= cols as isize {
                    continue;
                }
                let d2 = (di * di + dj * dj) as f64;
                if d2 > radius * radius {
                    continue;
                }
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let idx = i as usize * cols + j as usize;
                if v > maps.occupancy[idx] {
                    maps.occupancy[idx] = v;
                }
            }
        }
    }
    maps
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> BevGridSpec {
        BevGridSpec::new(64, 48, 0.1, [-1.0, 2.0])
    }

    fn at_level_coord(grid: &BevGridSpec, level: usize, ci: f64, cj: f64) -> Annotation {
        let [x, y] = crate::geometry::level_coord_to_world(ci, cj, level, grid);
        Annotation { id: 0, x, y }
    }

    #[test]
    fn pedestrian_at_cell_centre_has_zero_offset() {
        let g = grid();
        let maps = make_target_maps(&[at_level_coord(&g, 3, 7.0, 9.0)], 3, &g);
        let cell = 7 * maps.cols + 9;
        assert_eq!(maps.occupancy[cell], 1.0);
        assert_eq!(maps.occupancy.iter().cloned().fold(0.0, f64::max), 1.0);
        assert_eq!(maps.occupancy.iter().filter(|&&v| v == 1.0).count(), 1);
        assert!(maps.offset_at(cell)[0].abs() < 1e-12 && maps.offset_at(cell)[1].abs() < 1e-12);
    }

    #[test]
    fn fractional_coordinate_becomes_offset() {
        let g = grid();
        let maps = make_target_maps(&[at_level_coord(&g, 3, 10.25, 3.75)], 3, &g);
        let cell = 10 * maps.cols + 3;
        assert!(maps.pos_mask[cell]);
        assert_eq!(maps.num_pos(), 1);
        let o = maps.offset_at(cell);
        assert!((o[0] - 0.25).abs() < 1e-12 && (o[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn overlapping_gaussians_combine_by_max() {
        let g = grid();
        let a = at_level_coord(&g, 3, 10.0, 10.0);
        let b = at_level_coord(&g, 3, 10.0, 12.0);
        let maps = make_target_maps(&[a, b], 3, &g);
        let sigma = 20.0 / 6.0;
        let gauss = |d2: f64| (-d2 / (2.0 * sigma * sigma)).exp();
        let mid = 10 * maps.cols + 11;
        assert!((maps.occupancy[mid] - gauss(1.0).max(gauss(1.0))).abs() < 1e-12);
        let off = 11 * maps.cols + 13;
        let expect = gauss(1.0 + 9.0).max(gauss(1.0 + 1.0));
        assert!((maps.occupancy[off] - expect).abs() < 1e-12);
    }

    #[test]
    fn outside_annotations_are_counted() {
        let g = grid();
        let maps = make_target_maps(&[Annotation { id: 1, x: -5.0, y: 0.0 }], 4, &g);
        assert_eq!(maps.skipped, 1);
        assert_eq!(maps.num_pos(), 0);
    }

    #[test]
    fn kernel_is_truncated_at_half_diameter() {
        let g = grid();
        let maps = make_target_maps(&[at_level_coord(&g, 5, 3.0, 3.0)], 5, &g);
        let nonzero: Vec<(usize, usize)> = (0..maps.cells())
            .filter(|&c| maps.occupancy[c] > 0.0)
            .map(|c| (c / maps.cols, c % maps.cols))
            .collect();
        // Diameter 5: radius 2.5 admits offsets with di^2 + dj^2 <= 6.25.
        assert_eq!(nonzero.len(), 21);
        assert!(nonzero.iter().all(|&(i, j)| {
            let (di, dj) = (i as f64 - 3.0, j as f64 - 3.0);
            di * di + dj * dj <= 6.25
        }));
    }

    proptest! {
        #[test]
        fn occupancy_decays_with_distance_from_single_peak(ci in 2.0f64..29.0, cj in 2.0f64..21.0) {
            let g = grid();
            let maps = make_target_maps(&[at_level_coord(&g, 3, ci, cj)], 3, &g);
            let (pi, pj) = (ci.floor(), cj.floor());
            let mut by_dist: Vec<(f64, f64)> = (0..maps.cells())
                .map(|c| {
                    let (i, j) = ((c / maps.cols) as f64, (c % maps.cols) as f64);
                    ((i - pi).powi(2) + (j - pj).powi(2), maps.occupancy[c])
                })
                .collect();
            by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in by_dist.windows(2) {
                if w[1].0 > w[0].0 {
                    prop_assert!(w[1].1 <= w[0].1);
                } else {
                    prop_assert!((w[1].1 - w[0].1).abs() < 1e-15);
                }
            }
        }

        #[test]
        fn offsets_lie_in_unit_interval(points in proptest::collection::vec((0.0f64..6.4, 0.0f64..4.8), 1..12), level in 3usize..6) {
            let g = grid();
            let anns: Vec<Annotation> = points
                .iter()
                .enumerate()
                .map(|(k, &(x, y))| Annotation { id: k as u64, x: x - 1.0, y: y + 2.0 })
                .collect();
            let maps = make_target_maps(&anns, level, &g);
            for c in 0..maps.cells() {
                if maps.pos_mask[c] {
                    let o = maps.offset_at(c);
                    prop_assert!((0.0..1.0).contains(&o[0]) && (0.0..1.0).contains(&o[1]));
                    prop_assert_eq!(maps.occupancy[c], 1.0);
                } else {
                    prop_assert!(maps.occupancy[c] < 1.0);
                }
            }
        }
    }
}
