//! Spatial primitives: exact k-nearest-neighbour search, random
//! subsampling, nearest-point upsample maps and fixed-size crops.

mod grid;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Prng;

pub use grid::VoxelGrid;

/// Below this many supports a linear scan beats building a grid.
pub const BRUTE_FORCE_BELOW: usize = 256;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub labels: Option<Vec<u8>>,
}

impl PointCloud {
    pub fn new(
        positions: Vec<[f64; 3]>,
        colors: Option<Vec<[u8; 3]>>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        let n = positions.len();
        if colors.as_ref().is_some_and(|c| c.len() != n) {
            return Err(Error::invalid("colors length differs from positions"));
        }
        if labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::invalid("labels length differs from positions"));
        }
        if let Some(i) = positions.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid(format!("position {i} is not finite")));
        }
        Ok(PointCloud { positions, colors, labels })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Checks every label is below `n_class`.
    pub fn check_labels(&self, n_class: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some(i) = labels.iter().position(|&l| l as usize >= n_class) {
                return Err(Error::invalid(format!(
                    "label {} at point {i} is outside [0, {n_class})",
                    labels[i]
                )));
            }
        }
        Ok(())
    }

    /// Rows `indices` of every array, in that order (repeats allowed).
    pub fn select(&self, indices: &[u32]) -> PointCloud {
        let pick = |i: &u32| *i as usize;
        PointCloud {
            positions: indices.iter().map(|i| self.positions[pick(i)]).collect(),
            colors: self.colors.as_ref().map(|c| indices.iter().map(|i| c[pick(i)]).collect()),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|i| l[pick(i)]).collect()),
        }
    }
}

/// Row-major `[n, k]` table of support indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    pub idx: Vec<u32>,
    pub n: usize,
    pub k: usize,
    pub level: usize,
}

impl NeighborIndex {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Bounded sorted list of the best `(distance², index)` candidates so far.
pub(crate) struct TopK {
    k: usize,
    items: Vec<(f64, u32)>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        TopK { k, items: Vec::with_capacity(k + 1) }
    }

    pub(crate) fn clear(&mut self) {
        self.items.clear();
    }

    pub(crate) fn full(&self) -> bool {
        self.items.len() == self.k
    }

    pub(crate) fn worst(&self) -> f64 {
        self.items.last().map_or(f64::INFINITY, |e| e.0)
    }

    #[inline]
    pub(crate) fn offer(&mut self, d: f64, j: u32) {
        if self.items.len() == self.k {
            let last = self.items[self.k - 1];
            if (d, j) >= last {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|&e| e < (d, j));
        self.items.insert(pos, (d, j));
    }

    pub(crate) fn write(&self, out: &mut [u32]) {
        for (o, e) in out.iter_mut().zip(&self.items) {
            *o = e.1;
        }
    }
}

/// Self-distance sentinel: sorts the query before any real support.
const SELF_KEY: f64 = -1.0;

pub(crate) fn scan_all(q: &[f64; 3], self_index: Option<u32>, support: &[[f64; 3]], top: &mut TopK) {
    for (j, s) in support.iter().enumerate() {
        let j = j as u32;
        let d = if Some(j) == self_index { SELF_KEY } else { dist2(q, s) };
        top.offer(d, j);
    }
}

/// Exact `k` nearest supports for every query, ties broken by smaller
/// support index. When `query` and `support` are the same slice each point
/// is listed first in its own row.
pub fn knn(query: &[[f64; 3]], support: &[[f64; 3]], k: usize) -> Result<NeighborIndex> {
    if support.is_empty() {
        return Err(Error::invalid("knn: empty support set"));
    }
    if k == 0 || k > support.len() {
        return Err(Error::invalid(format!(
            "knn: k = {k} must lie in [1, {}]",
            support.len()
        )));
    }
    let same = std::ptr::eq(query, support);
    let mut idx = vec![0u32; query.len() * k];
    let grid = (support.len() >= BRUTE_FORCE_BELOW).then(|| VoxelGrid::build(support));
    idx.par_chunks_mut(k)
        .enumerate()
        .for_each_init(
            || TopK::new(k),
            |top, (i, out)| {
                top.clear();
                let self_index = same.then_some(i as u32);
                match &grid {
                    Some(g) => g.search(&query[i], self_index, support, top),
                    None => scan_all(&query[i], self_index, support, top),
                }
                top.write(out);
            },
        );
    Ok(NeighborIndex { idx, n: query.len(), k, level: 0 })
}

/// Nearest coarse point for each fine point (`knn(fine, coarse, 1)`).
pub fn nearest_coarse_map(fine: &[[f64; 3]], coarse: &[[f64; 3]]) -> Result<Vec<u32>> {
    if coarse.is_empty() {
        return Err(Error::invalid("nearest_coarse_map: empty coarse set"));
    }
    Ok(knn(fine, coarse, 1)?.idx)
}

/// `keep` distinct indices from `0..n`, uniformly at random, ascending.
/// Selection sampling: one pass, no distance computations.
pub fn random_subsample(n: usize, keep: usize, rng: &mut Prng) -> Result<Vec<u32>> {
    if keep == 0 || keep > n {
        return Err(Error::invalid(format!("random_subsample: keep = {keep} must lie in [1, {n}]")));
    }
    let mut out = Vec::with_capacity(keep);
    for i in 0..n {
        let remaining = (n - i) as f64;
        let needed = (keep - out.len()) as f64;
        if rng.next_f64() * remaining < needed {
            out.push(i as u32);
            if out.len() == keep {
                break;
            }
        }
    }
    Ok(out)
}

/// Crops `count` points around a random centre. Points come back ordered by
/// distance from the centre (centre first); when the cloud is smaller than
/// `count` the remainder is drawn from it with replacement.
pub fn crop_fixed_count(cloud: &PointCloud, count: usize, rng: &mut Prng) -> Result<(PointCloud, Vec<u32>)> {
    if cloud.is_empty() {
        return Err(Error::invalid("crop_fixed_count: empty cloud"));
    }
    let center = rng.below(cloud.len());
    let indices = crop_around(cloud, center, count, rng)?;
    Ok((cloud.select(&indices), indices))
}

/// The crop used by [`crop_fixed_count`] with a chosen centre.
pub fn crop_around(cloud: &PointCloud, center: usize, count: usize, rng: &mut Prng) -> Result<Vec<u32>> {
    if count == 0 {
        return Err(Error::invalid("crop count must be positive"));
    }
    let n = cloud.len();
    if center >= n {
        return Err(Error::IndexOutOfRange { op: "crop_around", index: center, len: n });
    }
    let c = cloud.positions[center];
    let mut keys: Vec<(f64, u32)> = cloud
        .positions
        .iter()
        .enumerate()
        .map(|(j, p)| (if j == center { SELF_KEY } else { dist2(&c, p) }, j as u32))
        .collect();
    let take = count.min(n);
    if take < n {
        keys.select_nth_unstable_by(take - 1, |a, b| a.partial_cmp(b).unwrap());
        keys.truncate(take);
    }
    keys.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<u32> = keys.into_iter().map(|e| e.1).collect();
    while out.len() < count {
        out.push(rng.below(n) as u32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knn_examples() {
        let one = [[0.0, 0.0, 0.0]];
        assert_eq!(knn(&one, &one, 1).unwrap().idx, vec![0]);
        let s = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert_eq!(knn(&[[0.0, 0.0, 0.0]], &s, 2).unwrap().idx, vec![0, 1]);
        assert_eq!(knn(&[[2.9, 0.0, 0.0]], &s, 3).unwrap().idx, vec![2, 1, 0]);
        assert!(knn(&one, &s, 4).is_err());
        assert!(knn(&one, &s, 0).is_err());
        assert!(knn(&one, &[], 1).is_err());
    }

    #[test]
    fn self_comes_first_even_among_duplicates() {
        let pts = [[1.0, 1.0, 1.0]; 4];
        let nb = knn(&pts, &pts, 2).unwrap();
        assert_eq!(nb.idx, vec![0, 1, 1, 0, 2, 0, 3, 0]);
    }

    #[test]
    fn subsample_examples() {
        let mut rng = Prng::new(3);
        assert_eq!(random_subsample(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        let one = random_subsample(7, 1, &mut rng).unwrap();
        assert!(one.len() == 1 && one[0] < 7);
        assert!(random_subsample(3, 4, &mut rng).is_err());
    }

    #[test]
    fn crop_pads_with_replacement() {
        let pts: Vec<_> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let cloud = PointCloud::new(pts, None, Some(vec![1; 10])).unwrap();
        let mut rng = Prng::new(1);
        let (crop, idx) = crop_fixed_count(&cloud, 20, &mut rng).unwrap();
        assert_eq!(crop.len(), 20);
        assert!(idx.iter().all(|&i| i < 10));
        let mut first: Vec<_> = idx[..10].to_vec();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert!(crop_fixed_count(&cloud, 0, &mut rng).is_err());
    }

    #[test]
    fn crop_of_whole_cloud_is_distance_ordered() {
        let pts = vec![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.5, 0.0, 0.0], [-1.5, 0.0, 0.0]];
        let cloud = PointCloud::new(pts, None, None).unwrap();
        let mut rng = Prng::new(0);
        assert_eq!(crop_around(&cloud, 0, 5, &mut rng).unwrap(), vec![0, 2, 4, 3, 1]);
        assert_eq!(crop_around(&cloud, 2, 3, &mut rng).unwrap(), vec![2, 0, 3]);
    }

    #[test]
    fn point_cloud_validation() {
        assert!(PointCloud::new(vec![[0.0; 3]], Some(vec![]), None).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]], None, None).is_err());
        let c = PointCloud::new(vec![[0.0; 3]], None, Some(vec![8])).unwrap();
        assert!(c.check_labels(8).is_err());
        assert!(c.check_labels(9).is_ok());
    }
}
