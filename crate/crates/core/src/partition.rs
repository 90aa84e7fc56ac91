//! Discretization of a planar workspace into place classes.
//!
//! A single [`GridSpec`] labels a point with a row-major cell id. A
//! [`CombinatorialPartition`] overlays several shifted grids and defines a
//! place as the tuple of cell ids a point falls in, so two points share a
//! class only if they share a cell in every grid.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::types::{ClassId, PlaceClassSet};

pub type CellId = usize;

/// Axis-aligned grid over `[x_min, x_max] × [y_min, y_max]` (meters), with
/// cell boundaries offset by `(x_shift, y_shift)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub rows: usize,
    pub cols: usize,
    pub x_shift: f64,
    pub y_shift: f64,
}

impl GridSpec {
    pub fn new(bounds: [f64; 4], rows: usize, cols: usize) -> Result<Self> {
        let grid = Self {
            x_min: bounds[0],
            y_min: bounds[1],
            x_max: bounds[2],
            y_max: bounds[3],
            rows,
            cols,
            x_shift: 0.0,
            y_shift: 0.0,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn unit(rows: usize, cols: usize) -> Self {
        Self::new([0.0, 0.0, 1.0, 1.0], rows, cols).expect("unit square grid is valid")
    }

    pub fn shifted(mut self, x_shift: f64, y_shift: f64) -> Self {
        self.x_shift = x_shift;
        self.y_shift = y_shift;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.x_min,
            self.y_min,
            self.x_max,
            self.y_max,
            self.x_shift,
            self.y_shift,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("grid parameters must be finite".into()));
        }
        if self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(Error::InvalidArgument(format!(
                "empty grid bounds [{}, {}] x [{}, {}]",
                self.x_min, self.x_max, self.y_min, self.y_max
            )));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidArgument("grid needs at least one row and column".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_width(&self) -> f64 {
        (self.x_max - self.x_min) / self.cols as f64
    }

    pub fn cell_height(&self) -> f64 {
        (self.y_max - self.y_min) / self.rows as f64
    }
}

fn axis_index(p: f64, min: f64, max: f64, shift: f64, n: usize) -> usize {
    let t = (p - min - shift) * n as f64 / (max - min);
    if t <= 0.0 {
        0
    } else {
        (t.floor() as usize).min(n - 1)
    }
}

/// Row-major cell id of `point`, or `None` when the point lies outside the
/// workspace bounds. Points on the upper edges clamp into the last cell, and
/// with a shift the partial strips at either edge join the edge cells.
pub fn assign_grid_cell(point: (f64, f64), grid: &GridSpec) -> Option<CellId> {
    let (x, y) = point;
    if !(x >= grid.x_min && x <= grid.x_max && y >= grid.y_min && y <= grid.y_max) {
        return None;
    }
    let col = axis_index(x, grid.x_min, grid.x_max, grid.x_shift, grid.cols);
    let row = axis_index(y, grid.y_min, grid.y_max, grid.y_shift, grid.rows);
    Some(row * grid.cols + col)
}

/// Tuple of per-grid cell ids, or `None` if any grid rejects the point.
pub fn cell_tuple(point: (f64, f64), grids: &[GridSpec]) -> Option<Vec<CellId>> {
    grids.iter().map(|g| assign_grid_cell(point, g)).collect()
}

#[derive(Clone, Debug)]
pub struct CombinatorialPartition {
    grids: Vec<GridSpec>,
    tuple_to_class: HashMap<Vec<CellId>, ClassId>,
}

impl CombinatorialPartition {
    pub fn new(grids: Vec<GridSpec>, tuple_to_class: HashMap<Vec<CellId>, ClassId>) -> Result<Self> {
        if grids.is_empty() {
            return Err(Error::Construction("a partition needs at least one grid".into()));
        }
        for g in &grids {
            g.validate()?;
        }
        let m = grids.len();
        let mut used = vec![false; tuple_to_class.len()];
        for (tuple, class) in &tuple_to_class {
            if tuple.len() != m {
                return Err(Error::dim(m, tuple.len(), "partition tuple"));
            }
            match used.get_mut(class.0) {
                Some(slot) if !*slot => *slot = true,
                _ => {
                    return Err(Error::Construction(format!(
                        "class ids must be dense and unique, offending id {class}"
                    )))
                }
            }
        }
        Ok(Self {
            grids,
            tuple_to_class,
        })
    }

    pub fn grids(&self) -> &[GridSpec] {
        &self.grids
    }

    pub fn num_classes(&self) -> usize {
        self.tuple_to_class.len()
    }

    pub fn class_of_tuple(&self, tuple: &[CellId]) -> Option<ClassId> {
        self.tuple_to_class.get(tuple).copied()
    }
}

/// Class of `point`, or `None` for an unregistered (unknown) place.
pub fn assign_combinatorial(point: (f64, f64), partition: &CombinatorialPartition) -> Option<ClassId> {
    let tuple = cell_tuple(point, &partition.grids)?;
    partition.class_of_tuple(&tuple)
}

/// A class-generation setting: overlapping grids plus a support threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPattern {
    pub grids: Vec<GridSpec>,
    pub min_samples_per_class: usize,
}

impl PartitionPattern {
    pub fn build(&self, points: &[(f64, f64)]) -> Result<ClassAssignment> {
        build_class_set(points, &self.grids, self.min_samples_per_class)
    }
}

#[derive(Clone, Debug)]
pub struct ClassAssignment {
    pub partition: CombinatorialPartition,
    pub class_set: PlaceClassSet,
    /// Per-point class, `None` for points in dropped or out-of-bounds tuples.
    pub labels: Vec<Option<ClassId>>,
}

/// Enumerate the cell tuples observed in `points`, drop those with fewer than
/// `min_samples` points and number the survivors in first-observation order.
pub fn build_class_set(
    points: &[(f64, f64)],
    grids: &[GridSpec],
    min_samples: usize,
) -> Result<ClassAssignment> {
    if points.is_empty() {
        return Err(Error::Empty("points"));
    }
    if grids.is_empty() {
        return Err(Error::Construction("a partition needs at least one grid".into()));
    }
    for g in grids {
        g.validate()?;
    }
    let min_samples = min_samples.max(1);

    let tuples: Vec<Option<Vec<CellId>>> = points.iter().map(|&p| cell_tuple(p, grids)).collect();
    let mut order: Vec<&Vec<CellId>> = Vec::new();
    let mut counts: HashMap<&Vec<CellId>, usize> = HashMap::new();
    for t in tuples.iter().flatten() {
        let c = counts.entry(t).or_insert(0);
        if *c == 0 {
            order.push(t);
        }
        *c += 1;
    }

    let mut tuple_to_class = HashMap::new();
    let mut labels_text = Vec::new();
    for t in order {
        if counts[t] >= min_samples {
            tuple_to_class.insert(t.clone(), ClassId(labels_text.len()));
            labels_text.push(
                t.iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join("/"),
            );
        }
    }
    if labels_text.is_empty() {
        return Err(Error::Construction(format!(
            "no cell tuple has at least {min_samples} points"
        )));
    }
    if labels_text.len() == 1 {
        return Err(Error::Construction(
            "only one place class survived; a class set needs at least two".into(),
        ));
    }

    let labels = tuples
        .iter()
        .map(|t| t.as_ref().and_then(|t| tuple_to_class.get(t).copied()))
        .collect();
    Ok(ClassAssignment {
        partition: CombinatorialPartition::new(grids.to_vec(), tuple_to_class)?,
        class_set: PlaceClassSet::new(labels_text)?,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn uniform_points(n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = rng_for(seed, &[]);
        (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect()
    }

    #[test]
    fn grid_cell_examples() {
        let g = GridSpec::unit(10, 10);
        assert_eq!(assign_grid_cell((0.55, 0.55), &g), Some(55));
        assert_eq!(assign_grid_cell((0.0, 0.0), &g), Some(0));
        assert_eq!(assign_grid_cell((1.0, 1.0), &g), Some(99));
        assert_eq!(assign_grid_cell((1.01, 0.5), &g), None);
        assert_eq!(assign_grid_cell((0.5, -0.1), &g), None);
    }

    #[test]
    fn max_corner_matches_interval_enumeration() {
        // The last closed interval [0.9, 1.0] is the only one containing 1.0.
        let g = GridSpec::unit(10, 10);
        let cols: Vec<usize> = (0..10)
            .filter(|&c| {
                let lo = c as f64 / 10.0;
                let hi = (c + 1) as f64 / 10.0;
                1.0 >= lo && 1.0 <= hi
            })
            .collect();
        assert_eq!(cols, vec![9]);
        assert_eq!(assign_grid_cell((1.0, 1.0), &g), Some(9 * 10 + cols[0]));
    }

    #[test]
    fn single_grid_partition_is_identity_mapping() {
        let g = GridSpec::unit(4, 4);
        let points = uniform_points(400, 3);
        let built = build_class_set(&points, &[g.clone()], 1).unwrap();
        for (p, label) in points.iter().zip(&built.labels) {
            let cell = assign_grid_cell(*p, &g).unwrap();
            let class = assign_combinatorial(*p, &built.partition).unwrap();
            assert_eq!(Some(class), *label);
            assert_eq!(built.class_set.label(class).unwrap(), cell.to_string());
        }
    }

    #[test]
    fn half_cell_shift_splits_a_cell() {
        let g1 = GridSpec::unit(2, 2);
        let g2 = GridSpec::unit(2, 2).shifted(0.25, 0.0);
        // the shifted boundary at x = 0.75 splits the first grid's cell [0.5, 1]
        let a = (0.6, 0.1);
        let b = (0.9, 0.1);
        assert_eq!(assign_grid_cell(a, &g1), assign_grid_cell(b, &g1));
        assert_ne!(assign_grid_cell(a, &g2), assign_grid_cell(b, &g2));
        let built = build_class_set(&[a, b, (0.9, 0.9)], &[g1, g2], 1).unwrap();
        assert_ne!(
            assign_combinatorial(a, &built.partition),
            assign_combinatorial(b, &built.partition)
        );
    }

    #[test]
    fn unknown_tuple_is_unknown_place() {
        let g = GridSpec::unit(10, 10);
        let built = build_class_set(&[(0.05, 0.05), (0.95, 0.95)], &[g], 1).unwrap();
        assert_eq!(assign_combinatorial((0.5, 0.5), &built.partition), None);
        assert_eq!(assign_combinatorial((5.0, 0.5), &built.partition), None);
    }

    #[test]
    fn threshold_one_labels_every_point() {
        let points = uniform_points(100, 11);
        let built = build_class_set(&points, &[GridSpec::unit(10, 10)], 1).unwrap();
        assert!(built.class_set.len() <= 100);
        assert!(built.labels.iter().all(Option::is_some));
    }

    #[test]
    fn threshold_drops_match_histogram() {
        let points = uniform_points(1000, 12);
        let grid = GridSpec::unit(10, 10);
        // Brute-force histogram over all 100 cells.
        let mut hist = [0usize; 100];
        for p in &points {
            let col = ((p.0 * 10.0).floor() as usize).min(9);
            let row = ((p.1 * 10.0).floor() as usize).min(9);
            hist[row * 10 + col] += 1;
        }
        let surviving_cells = hist.iter().filter(|&&c| c >= 12).count();
        let labeled_expected: usize = hist.iter().filter(|&&c| c >= 12).sum();
        assert!(surviving_cells > 1 && surviving_cells < 100);

        let built = build_class_set(&points, &[grid], 12).unwrap();
        let labeled = built.labels.iter().filter(|l| l.is_some()).count();
        let unknown = built.labels.iter().filter(|l| l.is_none()).count();
        assert_eq!(built.class_set.len(), surviving_cells);
        assert_eq!(labeled, labeled_expected);
        assert_eq!(labeled + unknown, 1000);
    }

    #[test]
    fn duplicate_grid_adds_nothing() {
        let points = uniform_points(300, 13);
        let g = GridSpec::unit(5, 5);
        let one = build_class_set(&points, &[g.clone()], 2).unwrap();
        let two = build_class_set(&points, &[g.clone(), g], 2).unwrap();
        assert_eq!(one.class_set.len(), two.class_set.len());
        assert_eq!(one.labels, two.labels);
    }

    #[test]
    fn no_survivors_is_an_error() {
        let points = uniform_points(10, 14);
        assert!(build_class_set(&points, &[GridSpec::unit(10, 10)], 50).is_err());
        assert!(build_class_set(&[], &[GridSpec::unit(1, 1)], 1).is_err());
        assert!(GridSpec::new([0.0, 0.0, 0.0, 1.0], 1, 1).is_err());
    }

    proptest! {
        #[test]
        fn translation_equivariance(
            x in 0.0f64..1.0, y in 0.0f64..1.0,
            dx in -50.0f64..50.0, dy in -50.0f64..50.0,
            sx in 0.0f64..0.1, sy in 0.0f64..0.1,
        ) {
            // Use dyadic offsets so translated coordinates are exact.
            let dx = (dx * 8.0).round() / 8.0;
            let dy = (dy * 8.0).round() / 8.0;
            let g = GridSpec::new([0.0, 0.0, 1.0, 1.0], 7, 9).unwrap().shifted(sx, sy);
            let moved = GridSpec::new([dx, dy, 1.0 + dx, 1.0 + dy], 7, 9).unwrap().shifted(sx, sy);
            let a = assign_grid_cell((x, y), &g);
            let b = assign_grid_cell((x + dx, y + dy), &moved);
            // Translation can perturb the last bit of the scaled coordinate;
            // only compare away from cell boundaries.
            let tx = (x - sx) * 9.0;
            let ty = (y - sy) * 7.0;
            prop_assume!((tx - tx.round()).abs() > 1e-9 && (ty - ty.round()).abs() > 1e-9);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn combinatorial_refines_each_grid(seed in 0u64..1000) {
            let points = uniform_points(200, seed);
            let grids = vec![
                GridSpec::unit(4, 4),
                GridSpec::unit(4, 4).shifted(0.125, 0.125),
                GridSpec::unit(3, 5).shifted(0.05, 0.0),
            ];
            let built = build_class_set(&points, &grids, 1).unwrap();
            for i in 0..points.len() {
                for j in (i + 1)..points.len() {
                    if built.labels[i].is_some() && built.labels[i] == built.labels[j] {
                        for g in &grids {
                            prop_assert_eq!(assign_grid_cell(points[i], g), assign_grid_cell(points[j], g));
                        }
                    }
                }
            }
            let again = build_class_set(&points, &grids, 1).unwrap();
            prop_assert_eq!(&built.labels, &again.labels);
        }
    }
}
