use std::collections::BTreeMap;

use super::grid::grid_shape;
use super::{check_target, connected_components, Segmentation, Segmenter};
use crate::error::{Error, Result};
use crate::hsi_io::HsiCube;

/// Simple linear iterative clustering over all bands of a cube.
///
/// Seeds start on a regular grid and move to the lowest-gradient pixel of
/// their 3x3 neighborhood. Each iteration assigns every pixel within one grid
/// step of a center to the closest center under
/// `|spectrum - c| + compactness * |position - c| / step`, ties going to the
/// lower id, then moves centers to the mean of their pixels. Afterwards every
/// fragment that is not the largest 4-connected piece of its superpixel is
/// absorbed by the neighbor it shares the longest border with.
#[derive(Clone, Copy, Debug)]
pub struct Slic {
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for Slic {
    fn default() -> Self {
        Self::new(1.0)
    }
}

struct Center {
    spectrum: Vec<f64>,
    row: f64,
    col: f64,
}

impl Slic {
    pub fn new(compactness: f64) -> Self {
        Self {
            compactness,
            iterations: 10,
        }
    }
}

fn gradient(cube: &HsiCube, r: usize, c: usize) -> f64 {
    let (h, w) = (cube.height(), cube.width());
    let px = |r: usize, c: usize| cube.spectrum(r * w + c);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let (up, down) = (r.saturating_sub(1), (r + 1).min(h - 1));
    let (left, right) = (c.saturating_sub(1), (c + 1).min(w - 1));
    sq(px(down, c), px(up, c)) + sq(px(r, right), px(r, left))
}

impl Segmenter for Slic {
    fn segment(&self, cube: &HsiCube, target: usize) -> Result<Segmentation> {
        check_target(cube, target)?;
        if !(self.compactness.is_finite() && self.compactness >= 0.0) {
            return Err(Error::Parameter(format!(
                "compactness must be finite and non-negative, got {}",
                self.compactness
            )));
        }
        let (h, w) = (cube.height(), cube.width());
        let (rows, cols) = grid_shape(h, w, target);
        let (step_r, step_c) = (h as f64 / rows as f64, w as f64 / cols as f64);
        let step = (step_r * step_c).sqrt();

        // seeds, perturbed onto free lowest-gradient pixels
        let mut occupied = vec![false; h * w];
        let mut seeds = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let r = (((i as f64 + 0.5) * step_r) as usize).min(h - 1);
                let c = (((j as f64 + 0.5) * step_c) as usize).min(w - 1);
                occupied[r * w + c] = true;
                seeds.push((r, c));
            }
        }
        for seed in seeds.iter_mut() {
            let (r, c) = *seed;
            let mut best = (gradient(cube, r, c), r, c);
            for nr in r.saturating_sub(1)..(r + 2).min(h) {
                for nc in c.saturating_sub(1)..(c + 2).min(w) {
                    if occupied[nr * w + nc] {
                        continue;
                    }
                    let g = gradient(cube, nr, nc);
                    if g < best.0 {
                        best = (g, nr, nc);
                    }
                }
            }
            if (best.1, best.2) != (r, c) {
                occupied[r * w + c] = false;
                occupied[best.1 * w + best.2] = true;
                *seed = (best.1, best.2);
            }
        }
        let mut centers: Vec<Center> = seeds
            .iter()
            .map(|&(r, c)| Center {
                spectrum: cube.spectrum(r * w + c).to_vec(),
                row: r as f64,
                col: c as f64,
            })
            .collect();

        let radius_r = step_r.ceil() as isize;
        let radius_c = step_c.ceil() as isize;
        let mut labels = vec![u32::MAX; h * w];
        let mut dist = vec![f64::INFINITY; h * w];
        for _ in 0..self.iterations {
            labels.iter_mut().for_each(|l| *l = u32::MAX);
            dist.iter_mut().for_each(|d| *d = f64::INFINITY);
            for (k, center) in centers.iter().enumerate() {
                let (cr, cc) = (center.row.round() as isize, center.col.round() as isize);
                let r0 = (cr - radius_r).max(0) as usize;
                let r1 = ((cr + radius_r) as usize).min(h - 1);
                let c0 = (cc - radius_c).max(0) as usize;
                let c1 = ((cc + radius_c) as usize).min(w - 1);
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        let i = r * w + c;
                        let d = self.distance(cube.spectrum(i), r, c, center, step);
                        if d < dist[i] {
                            dist[i] = d;
                            labels[i] = k as u32;
                        }
                    }
                }
            }
            // pixels no window reached go to the spatially nearest center
            for i in 0..h * w {
                if labels[i] == u32::MAX {
                    let (r, c) = ((i / w) as f64, (i % w) as f64);
                    let nearest = centers
                        .iter()
                        .enumerate()
                        .map(|(k, ct)| ((ct.row - r).powi(2) + (ct.col - c).powi(2), k))
                        .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a });
                    labels[i] = nearest.1 as u32;
                }
            }
            let bands = cube.bands();
            let mut sums = vec![(vec![0.0; bands], 0.0, 0.0, 0usize); centers.len()];
            for (i, &l) in labels.iter().enumerate() {
                let s = &mut sums[l as usize];
                s.0.iter_mut().zip(cube.spectrum(i)).for_each(|(a, v)| *a += v);
                s.1 += (i / w) as f64;
                s.2 += (i % w) as f64;
                s.3 += 1;
            }
            for (center, (spec, rs, cs, n)) in centers.iter_mut().zip(sums) {
                if n == 0 {
                    continue;
                }
                let n = n as f64;
                center.spectrum = spec.into_iter().map(|v| v / n).collect();
                center.row = rs / n;
                center.col = cs / n;
            }
        }

        let labels = enforce_connectivity(&labels, h, w);
        Segmentation::from_labels(h, w, labels)
    }
}

impl Slic {
    fn distance(&self, spectrum: &[f64], r: usize, c: usize, center: &Center, step: f64) -> f64 {
        let spectral = spectrum
            .iter()
            .zip(&center.spectrum)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let spatial = ((r as f64 - center.row).powi(2) + (c as f64 - center.col).powi(2)).sqrt();
        spectral + self.compactness * spatial / step
    }
}

/// Keeps the largest 4-connected piece of every label, merges the remaining
/// fragments into the adjacent region with the longest shared border, and
/// relabels densely in raster order of first appearance.
fn enforce_connectivity(labels: &[u32], h: usize, w: usize) -> Vec<u32> {
    let comps = connected_components(labels, h, w);
    let n_comps = comps.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut size = vec![0usize; n_comps];
    let mut comp_label = vec![0u32; n_comps];
    for (i, &c) in comps.iter().enumerate() {
        size[c as usize] += 1;
        comp_label[c as usize] = labels[i];
    }
    // largest component per label; ties keep the earlier component
    let mut keeper: BTreeMap<u32, usize> = BTreeMap::new();
    for c in 0..n_comps {
        let entry = keeper.entry(comp_label[c]).or_insert(c);
        if size[c] > size[*entry] {
            *entry = c;
        }
    }
    let mut resolved: Vec<Option<u32>> = vec![None; n_comps];
    for (&label, &c) in &keeper {
        resolved[c] = Some(label);
    }

    // border lengths between components
    let mut borders: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n_comps];
    for r in 0..h {
        for c in 0..w {
            let a = comps[r * w + c] as usize;
            for (nr, nc) in [(r + 1, c), (r, c + 1)] {
                if nr < h && nc < w {
                    let b = comps[nr * w + nc] as usize;
                    if a != b {
                        *borders[a].entry(b).or_default() += 1;
                        *borders[b].entry(a).or_default() += 1;
                    }
                }
            }
        }
    }
    loop {
        let mut changed = false;
        for c in 0..n_comps {
            if resolved[c].is_some() {
                continue;
            }
            let mut tally: BTreeMap<u32, usize> = BTreeMap::new();
            for (&nb, &len) in &borders[c] {
                if let Some(l) = resolved[nb] {
                    *tally.entry(l).or_default() += len;
                }
            }
            if let Some((&l, _)) = tally.iter().fold(None::<(&u32, &usize)>, |best, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            }) {
                resolved[c] = Some(l);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut dense: BTreeMap<u32, u32> = BTreeMap::new();
    let mut order = Vec::new();
    for &c in &comps {
        let l = resolved[c as usize].expect("every fragment touches a kept region");
        if let std::collections::btree_map::Entry::Vacant(e) = dense.entry(l) {
            e.insert(order.len() as u32);
            order.push(l);
        }
    }
    comps
        .iter()
        .map(|&c| dense[&resolved[c as usize].expect("resolved")])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(h: usize, w: usize) -> HsiCube {
        HsiCube::new(h, w, 2, vec![0.3; h * w * 2]).unwrap()
    }

    #[test]
    fn constant_image_splits_into_equal_quadrants() {
        let seg = Slic::default().segment(&constant(10, 10), 4).unwrap();
        assert_eq!(seg.count(), 4);
        for i in 0..4 {
            assert_eq!(seg.members(i).len(), 25);
            let rows: Vec<usize> = seg.members(i).iter().map(|p| p / 10).collect();
            let cols: Vec<usize> = seg.members(i).iter().map(|p| p % 10).collect();
            assert_eq!(rows.iter().max().unwrap() - rows.iter().min().unwrap(), 4);
            assert_eq!(cols.iter().max().unwrap() - cols.iter().min().unwrap(), 4);
        }
    }

    #[test]
    fn one_superpixel_per_pixel_at_full_granularity() {
        let mut values = Vec::new();
        for i in 0..12 {
            values.extend([(i as f64 * 0.7).sin(), (i as f64).cos()]);
        }
        let cube = HsiCube::new(3, 4, 2, values).unwrap();
        let seg = Slic::default().segment(&cube, 12).unwrap();
        assert_eq!(seg.count(), 12);
        let (t, _) = seg.map_matrix();
        assert!(t.row_sums().iter().all(|&s| s == 1.0));
        assert!(t.col_sums().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn invalid_targets_are_rejected() {
        let cube = constant(4, 4);
        assert!(Slic::default().segment(&cube, 0).is_err());
        assert!(Slic::default().segment(&cube, 17).is_err());
        assert!(Slic::new(-1.0).segment(&cube, 4).is_err());
    }

    #[test]
    fn fragments_merge_into_longest_border() {
        // the top-right pixel of label 1 is cut off and bordered only by label 0
        let labels = [0, 0, 0, 1, 0, 1, 0, 0, 1, 1, 1, 1];
        let out = enforce_connectivity(&labels, 3, 4);
        assert_eq!(out, vec![0, 0, 0, 0, 0, 1, 0, 0, 1, 1, 1, 1]);
    }
}
