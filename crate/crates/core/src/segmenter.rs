//! Mask reconstruction: threshold the distance channel, push every
//! foreground pixel along the flow field and cluster where they land.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::datamodel::{FeatureMap, InstanceMask};
use crate::error::{Error, Result};
use crate::real::Real;

/// Integration stops for a pixel once the sampled flow is this short.
pub const STALL_NORM: f32 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub t_fg: f32,
    pub n_steps: usize,
    pub step: f32,
    pub cluster_eps: f32,
    /// Neighbours within `cluster_eps` (the point itself included) needed
    /// for a core point.
    pub cluster_min_pts: usize,
    pub min_instance_px: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            t_fg: 0.5,
            n_steps: 3,
            step: 1.0,
            cluster_eps: 2.75,
            cluster_min_pts: 3,
            min_instance_px: 4,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.t_fg > 0.0
            && self.n_steps > 0
            && self.step > 0.0
            && self.cluster_eps > 0.0
            && self.cluster_min_pts > 0
            && self.min_instance_px > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("head parameters must be positive: {self:?}")))
        }
    }
}

/// `phi > t_fg` per pixel.
pub fn foreground<T: Real>(z: &FeatureMap<T>, t_fg: f32) -> Vec<bool> {
    z.phi.iter().map(|&p| p.f64() > t_fg as f64).collect()
}

fn bilinear(field: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = field[y0 * w + x0] * (1.0 - fx) + field[y0 * w + x1] * fx;
    let bot = field[y1 * w + x0] * (1.0 - fx) + field[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Final `(y, x)` of every foreground pixel, in row-major pixel order,
/// after `n_steps` Euler steps along the bilinearly sampled flow
/// `(u1, u2) = (x, y)` components. Positions are clamped to the image.
pub fn euler_integrate(
    u1: &[f32],
    u2: &[f32],
    h: usize,
    w: usize,
    fg: &[bool],
    n_steps: usize,
    step: f32,
) -> Vec<(f32, f32)> {
    let (ymax, xmax) = ((h - 1) as f32, (w - 1) as f32);
    (0..h * w)
        .filter(|&i| fg[i])
        .map(|i| {
            let (mut y, mut x) = ((i / w) as f32, (i % w) as f32);
            for _ in 0..n_steps {
                let vx = bilinear(u1, h, w, y, x);
                let vy = bilinear(u2, h, w, y, x);
                if vx.hypot(vy) < STALL_NORM {
                    break;
                }
                y = (y + step * vy).clamp(0.0, ymax);
                x = (x + step * vx).clamp(0.0, xmax);
            }
            (y, x)
        })
        .collect()
}

/// Uniform grid over positions with `cell`-sized buckets.
struct Buckets {
    cell: f32,
    map: HashMap<(i64, i64), Vec<usize>>,
}

impl Buckets {
    fn new(pts: &[(f32, f32)], cell: f32) -> Self {
        let mut map: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &p) in pts.iter().enumerate() {
            map.entry(Self::key(p, cell)).or_default().push(i);
        }
        Buckets { cell, map }
    }

    fn key(p: (f32, f32), cell: f32) -> (i64, i64) {
        ((p.0 / cell).floor() as i64, (p.1 / cell).floor() as i64)
    }

    /// Indices within `radius` of `p` (`radius <= reach * cell`), ascending.
    fn within(&self, pts: &[(f32, f32)], p: (f32, f32), radius: f32, reach: i64, out: &mut Vec<usize>) {
        out.clear();
        let (ky, kx) = Self::key(p, self.cell);
        let r2 = radius * radius;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                if let Some(v) = self.map.get(&(ky + dy, kx + dx)) {
                    for &j in v {
                        let (a, b) = (pts[j].0 - p.0, pts[j].1 - p.1);
                        if a * a + b * b <= r2 {
                            out.push(j);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

/// DBSCAN over `pts`, then noise adoption, small-cluster erasure and
/// renumbering by first point. Returns a label per point, 0 for background.
pub fn cluster(pts: &[(f32, f32)], eps: f32, min_pts: usize, min_size: usize) -> Vec<u32> {
    const NONE: u32 = u32::MAX;
    let n = pts.len();
    let grid = Buckets::new(pts, eps);
    let mut labels = vec![NONE; n];
    let mut core = vec![None::<bool>; n];
    let mut nb = Vec::new();
    let mut is_core = |i: usize, nb: &mut Vec<usize>| -> bool {
        grid.within(pts, pts[i], eps, 1, nb);
        *core[i].get_or_insert(nb.len() >= min_pts)
    };
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for i in 0..n {
        if labels[i] != NONE || !is_core(i, &mut nb) {
            continue;
        }
        labels[i] = next;
        queue.push_back(i);
        while let Some(p) = queue.pop_front() {
            if !is_core(p, &mut nb) {
                continue;
            }
            for &q in nb.iter() {
                if labels[q] == NONE {
                    labels[q] = next;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }

    let assigned: Vec<(f32, f32)> = (0..n).filter(|&i| labels[i] != NONE).map(|i| pts[i]).collect();
    let assigned_ids: Vec<usize> = (0..n).filter(|&i| labels[i] != NONE).collect();
    let adopt_grid = Buckets::new(&assigned, eps);
    let mut final_labels = labels.clone();
    for i in 0..n {
        if labels[i] != NONE {
            continue;
        }
        adopt_grid.within(&assigned, pts[i], 2.0 * eps, 2, &mut nb);
        let best = nb.iter().copied().min_by(|&a, &b| {
            let da = (assigned[a].0 - pts[i].0).powi(2) + (assigned[a].1 - pts[i].1).powi(2);
            let db = (assigned[b].0 - pts[i].0).powi(2) + (assigned[b].1 - pts[i].1).powi(2);
            da.total_cmp(&db).then(a.cmp(&b))
        });
        if let Some(k) = best {
            final_labels[i] = labels[assigned_ids[k]];
        }
    }

    let mut sizes = vec![0usize; next as usize];
    for &l in &final_labels {
        if l != NONE {
            sizes[l as usize] += 1;
        }
    }
    let mut renumber = vec![0u32; next as usize];
    let mut count = 0;
    final_labels
        .iter()
        .map(|&l| {
            if l == NONE || sizes[l as usize] < min_size {
                return 0;
            }
            let slot = &mut renumber[l as usize];
            if *slot == 0 {
                count += 1;
                *slot = count;
            }
            *slot
        })
        .collect()
}

/// Instance mask from a feature map.
pub fn segment<T: Real>(z: &FeatureMap<T>, cfg: &HeadConfig) -> Result<InstanceMask> {
    let (h, w) = (z.h, z.w);
    if !z.is_finite() {
        return Err(Error::Numeric("non-finite feature map passed to segment".into()));
    }
    let fg = foreground(z, cfg.t_fg);
    let u1: Vec<f32> = z.u1.iter().map(|v| v.f64() as f32).collect();
    let u2: Vec<f32> = z.u2.iter().map(|v| v.f64() as f32).collect();
    let pts = euler_integrate(&u1, &u2, h, w, &fg, cfg.n_steps, cfg.step);
    let ids = cluster(&pts, cfg.cluster_eps, cfg.cluster_min_pts, cfg.min_instance_px);
    let mut raw = vec![0u32; h * w];
    for (pix, id) in (0..h * w).filter(|&i| fg[i]).zip(ids) {
        raw[pix] = id;
    }
    InstanceMask::from_raw(h, w, raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelgen::make_targets;

    fn gt_features(mask: &InstanceMask) -> FeatureMap<f32> {
        FeatureMap::from_targets(&make_targets(mask), 10.0)
    }

    fn rect_mask(h: usize, w: usize, rects: &[(usize, usize, usize, usize)]) -> InstanceMask {
        let mut raw = vec![0u32; h * w];
        for (k, &(y0, x0, rh, rw)) in rects.iter().enumerate() {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    raw[y * w + x] = k as u32 + 1;
                }
            }
        }
        InstanceMask::from_raw(h, w, raw).unwrap()
    }

    #[test]
    fn zero_features_give_empty_mask() {
        let z = FeatureMap::<f32>::zeros(12, 12);
        assert!(foreground(&z, 0.5).iter().all(|&f| !f));
        assert_eq!(segment(&z, &HeadConfig::default()).unwrap().n_instances(), 0);
    }

    #[test]
    fn thresholds_on_small_cell() {
        let m = rect_mask(5, 5, &[(1, 1, 3, 3)]);
        let z = gt_features(&m);
        assert_eq!(foreground(&z, 0.5).iter().filter(|&&f| f).count(), 9);
        let fg = foreground(&z, 1.5);
        assert_eq!(fg.iter().filter(|&&f| f).count(), 1);
        assert!(fg[12]);
    }

    #[test]
    fn zero_flow_leaves_positions() {
        let fg = vec![true; 12];
        let zeros = vec![0.0; 12];
        let pts = euler_integrate(&zeros, &zeros, 3, 4, &fg, 50, 1.0);
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(*p, ((i / 4) as f32, (i % 4) as f32));
        }
    }

    #[test]
    fn rectangle_pixels_reach_the_medial_row() {
        let m = rect_mask(11, 17, &[(3, 3, 5, 11)]);
        let t = make_targets(&m);
        let fg: Vec<bool> = t.d.iter().map(|&d| d > 0.0).collect();
        let pts = euler_integrate(&t.gx, &t.gy, 11, 17, &fg, 50, 1.0);
        let cells: Vec<usize> = (0..11 * 17).filter(|&i| fg[i]).collect();
        assert_eq!(pts.len(), 55);
        for (&i, &(y, x)) in cells.iter().zip(&pts) {
            if t.gx[i] == 0.0 && t.gy[i] == 0.0 {
                assert_eq!((y, x), ((i / 17) as f32, (i % 17) as f32));
            }
            if (y - 5.0).abs() > 1.0 {
                // Only the corners sit on a distance plateau off the medial band.
                assert!([3, 13].contains(&(i % 17)) && [3, 7].contains(&(i / 17)), "pixel {i} ended at y={y}");
            }
        }
    }

    #[test]
    fn positions_stay_inside_the_image() {
        let (h, w) = (6, 7);
        let u1 = vec![3.0; h * w];
        let u2 = vec![-2.0; h * w];
        for (y, x) in euler_integrate(&u1, &u2, h, w, &vec![true; h * w], 10, 1.0) {
            assert_eq!((y, x), (0.0, 6.0));
        }
    }

    #[test]
    fn clustering_examples() {
        assert_eq!(cluster(&[(2.0, 2.0); 6], 1.5, 3, 4), vec![1; 6]);
        let mut pts = vec![(1.0, 1.0); 5];
        pts.extend(vec![(11.0, 1.0); 5]);
        let ids = cluster(&pts, 1.5, 3, 4);
        assert_eq!(ids, [vec![1; 5], vec![2; 5]].concat());
        assert_eq!(cluster(&[(0.0, 0.0), (5.0, 5.0), (9.0, 0.0)], 1.5, 3, 1), vec![0, 0, 0]);
    }

    #[test]
    fn noise_adopts_nearby_cluster() {
        let mut pts = vec![(5.0, 5.0); 4];
        pts.push((7.5, 5.0));
        assert_eq!(cluster(&pts, 1.5, 3, 1), vec![1; 5]);
        pts.push((12.0, 5.0));
        assert_eq!(cluster(&pts, 1.5, 3, 1)[5], 0);
    }

    #[test]
    fn small_clusters_are_erased_and_ids_renumbered() {
        let mut pts = vec![(0.0, 0.0); 3];
        pts.extend(vec![(9.0, 9.0); 6]);
        assert_eq!(cluster(&pts, 1.5, 3, 4), [vec![0; 3], vec![1; 6]].concat());
    }

    #[test]
    fn parallel_bars_are_separated() {
        let m = rect_mask(20, 16, &[(2, 3, 16, 3), (2, 8, 16, 3)]);
        let out = segment(&gt_features(&m), &HeadConfig::default()).unwrap();
        assert_eq!(out.n_instances(), 2);
        assert_eq!(out, m);
    }

    #[test]
    fn boundary_logit_offset_does_not_change_masks() {
        let m = rect_mask(20, 20, &[(2, 2, 6, 9), (11, 5, 7, 7)]);
        let z = gt_features(&m);
        let mut z2 = z.clone();
        z2.z.iter_mut().for_each(|v| *v += 3.0);
        let cfg = HeadConfig::default();
        assert_eq!(segment(&z, &cfg).unwrap(), segment(&z2, &cfg).unwrap());
    }
}
