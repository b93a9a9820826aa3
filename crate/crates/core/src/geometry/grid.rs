//! Uniform voxel grid over a support set with ring-by-ring exact search.

use super::{dist2, scan_all, TopK, SELF_KEY};

/// Upper bound on the number of cells relative to the support count.
const CELLS_PER_POINT: usize = 8;
const CELL_SLACK: usize = 4096;
/// Supports sampled for the spacing estimate.
const SPACING_SAMPLES: usize = 64;

pub struct VoxelGrid {
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: supports of cell `c` are `items[starts[c]..starts[c + 1]]`.
    starts: Vec<u32>,
    items: Vec<u32>,
}

/// Median nearest-neighbour distance over an evenly strided sample.
fn median_spacing(support: &[[f64; 3]]) -> f64 {
    let n = support.len();
    let samples = SPACING_SAMPLES.min(n);
    let mut dists: Vec<f64> = (0..samples)
        .map(|s| {
            let i = s * n / samples;
            let p = &support[i];
            support
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| dist2(p, q))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .filter(|d| d.is_finite())
        .collect();
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2]
}

impl VoxelGrid {
    pub fn build(support: &[[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in support {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let mut cell = 2.0 * median_spacing(support);
        if cell <= 0.0 {
            // heavy duplication: fall back to an even split of the bounding box
            cell = extent / (support.len() as f64).cbrt();
        }
        if cell <= 0.0 {
            cell = 1.0;
        }
        let cap = CELLS_PER_POINT * support.len() + CELL_SLACK;
        let dims_for = |cell: f64| -> [usize; 3] {
            std::array::from_fn(|a| ((hi[a] - lo[a]) / cell).floor() as usize + 1)
        };
        let mut dims = dims_for(cell);
        while dims.iter().map(|&d| d as f64).product::<f64>() > cap as f64 {
            let total: f64 = dims.iter().map(|&d| d as f64).product();
            cell *= (total / cap as f64).cbrt().max(1.01);
            dims = dims_for(cell);
        }
        let ncells = dims[0] * dims[1] * dims[2];
        let mut grid = VoxelGrid { origin: lo, cell, dims, starts: vec![0; ncells + 1], items: vec![0; support.len()] };
        let cell_ids: Vec<usize> = support.iter().map(|p| grid.flat(grid.coords(p))).collect();
        for &c in &cell_ids {
            grid.starts[c + 1] += 1;
        }
        for c in 0..ncells {
            grid.starts[c + 1] += grid.starts[c];
        }
        let mut fill = grid.starts.clone();
        for (j, &c) in cell_ids.iter().enumerate() {
            grid.items[fill[c] as usize] = j as u32;
            fill[c] += 1;
        }
        grid
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Unclamped integer cell coordinates.
    fn raw_coords(&self, p: &[f64; 3]) -> [i64; 3] {
        std::array::from_fn(|a| ((p[a] - self.origin[a]) / self.cell).floor() as i64)
    }

    fn coords(&self, p: &[f64; 3]) -> [usize; 3] {
        let r = self.raw_coords(p);
        std::array::from_fn(|a| r[a].clamp(0, self.dims[a] as i64 - 1) as usize)
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn scan_cell(&self, c: [usize; 3], q: &[f64; 3], self_index: Option<u32>, support: &[[f64; 3]], top: &mut TopK) {
        let f = self.flat(c);
        for &j in &self.items[self.starts[f] as usize..self.starts[f + 1] as usize] {
            let d = if Some(j) == self_index { SELF_KEY } else { dist2(q, &support[j as usize]) };
            top.offer(d, j);
        }
    }

    /// Distance from `q` to the outside of the cube of cells within
    /// Chebyshev radius `r` of `center`.
    fn clearance(&self, q: &[f64; 3], center: [i64; 3], r: i64) -> f64 {
        (0..3)
            .map(|a| {
                let lo = self.origin[a] + (center[a] - r) as f64 * self.cell;
                let hi = self.origin[a] + (center[a] + r + 1) as f64 * self.cell;
                (q[a] - lo).min(hi - q[a])
            })
            .fold(f64::INFINITY, f64::min)
            .max(0.0)
    }

    pub(crate) fn search(&self, q: &[f64; 3], self_index: Option<u32>, support: &[[f64; 3]], top: &mut TopK) {
        let center = self.raw_coords(q);
        let dims: [i64; 3] = std::array::from_fn(|a| self.dims[a] as i64);
        // rings closer than this miss the grid entirely
        let r0 = (0..3)
            .map(|a| (-center[a]).max(center[a] - (dims[a] - 1)).max(0))
            .max()
            .unwrap();
        // ring radius at which the cube covers every cell
        let r_all = (0..3)
            .map(|a| center[a].max(dims[a] - 1 - center[a]))
            .max()
            .unwrap();
        let occupied = support.len() as i64;
        for r in r0..=r_all {
            let side = 2 * r + 1;
            let ring_cells = if r == 0 { 1 } else { side * side * side - (side - 2).pow(3) };
            if ring_cells > occupied {
                top.clear();
                scan_all(q, self_index, support, top);
                return;
            }
            for z in (center[2] - r).max(0)..=(center[2] + r).min(dims[2] - 1) {
                for y in (center[1] - r).max(0)..=(center[1] + r).min(dims[1] - 1) {
                    let on_shell = (z - center[2]).abs() == r || (y - center[1]).abs() == r;
                    if on_shell {
                        for x in (center[0] - r).max(0)..=(center[0] + r).min(dims[0] - 1) {
                            self.scan_cell([x as usize, y as usize, z as usize], q, self_index, support, top);
                        }
                    } else {
                        for x in [center[0] - r, center[0] + r] {
                            if (0..dims[0]).contains(&x) {
                                self.scan_cell([x as usize, y as usize, z as usize], q, self_index, support, top);
                            }
                            if r == 0 {
                                break;
                            }
                        }
                    }
                }
            }
            if top.full() {
                let clear = self.clearance(q, center, r);
                // margin guards against rounding in the squared distances
                if top.worst() < clear * clear * (1.0 - 1e-9) {
                    return;
                }
            }
        }
    }
}
