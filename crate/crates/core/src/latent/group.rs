//! Farthest-point sampling and nearest-neighbour grouping.

use std::cmp::Ordering;

use crate::error::{contract, Error, Result};
use crate::gaussian::dist;

/// Index of the lexicographically smallest position (lowest index on ties).
pub fn lexicographic_seed(points: &[[f64; 3]]) -> usize {
    (0..points.len())
        .min_by(|&a, &b| {
            let (pa, pb) = (points[a], points[b]);
            pa[0]
                .total_cmp(&pb[0])
                .then(pa[1].total_cmp(&pb[1]))
                .then(pa[2].total_cmp(&pb[2]))
                .then(a.cmp(&b))
        })
        .unwrap_or(0)
}

/// Greedy max-min selection of `k` points starting at `seed`.
pub fn fps(points: &[[f64; 3]], k: usize, seed: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(contract(format!("cannot sample {k} centres from {} points", points.len())));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if seed >= points.len() {
        return Err(contract(format!("seed index {seed} out of range")));
    }
    let mut chosen = vec![seed];
    let mut near: Vec<f64> = points.iter().map(|p| dist(p, &points[seed])).collect();
    while chosen.len() < k {
        let mut best = 0;
        for i in 1..points.len() {
            if near[i] > near[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, p) in points.iter().enumerate() {
            near[i] = near[i].min(dist(p, &points[best]));
        }
    }
    Ok(chosen)
}

/// For every centre, the `k` nearest points (ties by lowest index).
pub fn knn_group(points: &[[f64; 3]], centers: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > points.len() {
        return Err(contract(format!("cannot group {k} neighbours from {} points", points.len())));
    }
    centers
        .iter()
        .map(|&c| {
            let cp = points
                .get(c)
                .ok_or_else(|| contract(format!("centre index {c} out of range")))?;
            let mut order: Vec<(f64, usize)> =
                points.iter().enumerate().map(|(i, p)| (dist(p, cp), i)).collect();
            order.select_nth_unstable_by(k - 1, cmp_pair);
            let mut head = order[..k].to_vec();
            head.sort_by(cmp_pair);
            Ok(head.into_iter().map(|(_, i)| i).collect())
        })
        .collect()
}

fn cmp_pair(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Cached centres and neighbour lists, kept fixed between regroup events.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grouping {
    pub centers: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
}

impl Grouping {
    /// FPS + KNN with sizes clipped to the point count.
    pub fn compute(points: &[[f64; 3]], n_centers: usize, k_neighbors: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(contract("cannot group an empty particle set"));
        }
        let c = n_centers.min(points.len()).max(1);
        let k = k_neighbors.min(points.len()).max(1);
        let centers = fps(points, c, lexicographic_seed(points))?;
        let groups = knn_group(points, &centers, k)?;
        Ok(Self { centers, groups })
    }

    pub fn group_size(&self) -> usize {
        self.groups.first().map_or(0, Vec::len)
    }

    /// `u32` count, group size, centres, then flattened groups (little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend((self.centers.len() as u32).to_le_bytes());
        out.extend((self.group_size() as u32).to_le_bytes());
        for &c in &self.centers {
            out.extend((c as u32).to_le_bytes());
        }
        for g in &self.groups {
            for &i in g {
                out.extend((i as u32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let words: Vec<usize> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let bad = || Error::Format("malformed grouping blob".into());
        if bytes.len() % 4 != 0 || words.len() < 2 {
            return Err(bad());
        }
        let (c, k) = (words[0], words[1]);
        if words.len() != 2 + c + c * k {
            return Err(bad());
        }
        let centers = words[2..2 + c].to_vec();
        let groups = words[2 + c..].chunks(k.max(1)).map(<[usize]>::to_vec).collect();
        Ok(Self { centers, groups })
    }
}
