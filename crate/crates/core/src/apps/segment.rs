use std::collections::{BTreeSet, VecDeque};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Candidate segments of one image; labels are `0..count`, each a single
/// 4-connected region.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub labels: Array2<usize>,
    pub count: usize,
}

impl Segmentation {
    pub fn mask(&self, label: usize) -> Array2<bool> {
        self.labels.mapv(|l| l == label)
    }
}

pub trait Segmenter {
    /// Segments an `H×W×3` image with channels in [0, 1].
    fn segment(&self, image: &Array3<f64>) -> Result<Segmentation>;
}

/// SLIC superpixels with the zero-parameter colour normalisation: each
/// cluster's colour scale is the largest colour distance it saw in the
/// previous iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slico {
    pub segments: usize,
    pub iterations: usize,
}

impl Default for Slico {
    fn default() -> Self {
        Slico {
            segments: 24,
            iterations: 10,
        }
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// CIE L*a*b* under D65 from sRGB in [0, 1].
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = (0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b) / 0.950_47;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175 * b;
    let z = (0.019_333_9 * r + 0.119_192 * g + 0.950_304_1 * b) / 1.088_83;
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[derive(Debug, Clone, Copy)]
struct Center {
    lab: [f64; 3],
    y: f64,
    x: f64,
    max_color: f64,
}

fn color_dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

impl Slico {
    fn cluster(&self, lab: &Array2<[f64; 3]>) -> Array2<usize> {
        let (h, w) = lab.dim();
        let step = ((h * w) as f64 / self.segments as f64).sqrt().max(1.0);
        let mut centers = Vec::new();
        let mut y = step / 2.0;
        while y < h as f64 {
            let mut x = step / 2.0;
            while x < w as f64 {
                let (cy, cx) = (y as usize, x as usize);
                centers.push(Center {
                    lab: lab[[cy, cx]],
                    y,
                    x,
                    max_color: 10.0 * 10.0,
                });
                x += step;
            }
            y += step;
        }
        let radius = step.ceil() as isize;
        let s2 = step * step;
        let mut labels = Array2::from_elem((h, w), usize::MAX);
        let mut dist = Array2::from_elem((h, w), f64::INFINITY);
        for _ in 0..self.iterations {
            dist.fill(f64::INFINITY);
            for (k, c) in centers.iter().enumerate() {
                let (cy, cx) = (c.y.round() as isize, c.x.round() as isize);
                for py in (cy - radius).max(0)..(cy + radius + 1).min(h as isize) {
                    for px in (cx - radius).max(0)..(cx + radius + 1).min(w as isize) {
                        let (py, px) = (py as usize, px as usize);
                        let dc = color_dist2(&lab[[py, px]], &c.lab);
                        let ds = (py as f64 - c.y).powi(2) + (px as f64 - c.x).powi(2);
                        let d = dc / c.max_color + ds / s2;
                        if d < dist[[py, px]] {
                            dist[[py, px]] = d;
                            labels[[py, px]] = k;
                        }
                    }
                }
            }
            let mut sums = vec![([0.0; 3], 0.0, 0.0, 0usize); centers.len()];
            for ((py, px), &k) in labels.indexed_iter() {
                let s = &mut sums[k];
                for i in 0..3 {
                    s.0[i] += lab[[py, px]][i];
                }
                s.1 += py as f64;
                s.2 += px as f64;
                s.3 += 1;
            }
            for (c, s) in centers.iter_mut().zip(&sums) {
                if s.3 > 0 {
                    let n = s.3 as f64;
                    c.lab = s.0.map(|v| v / n);
                    c.y = s.1 / n;
                    c.x = s.2 / n;
                }
                c.max_color = f64::MIN_POSITIVE;
            }
            for ((py, px), &k) in labels.indexed_iter() {
                let c = &mut centers[k];
                c.max_color = c.max_color.max(color_dist2(&lab[[py, px]], &c.lab));
            }
        }
        labels
    }
}

/// Relabels into 4-connected components, then merges every component
/// smaller than `min_size` into the neighbour closest in mean colour.
pub fn enforce_connectivity(labels: &Array2<usize>, lab: &Array2<[f64; 3]>, min_size: usize) -> Segmentation {
    let (h, w) = labels.dim();
    let mut comp = Array2::from_elem((h, w), usize::MAX);
    let mut sizes = Vec::new();
    let mut sums: Vec<[f64; 3]> = Vec::new();
    let mut queue = VecDeque::new();
    for start in (0..h).flat_map(|y| (0..w).map(move |x| (y, x))) {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let src = labels[start];
        let (mut n, mut sum) = (0, [0.0; 3]);
        comp[start] = id;
        queue.push_back(start);
        while let Some((y, x)) = queue.pop_front() {
            n += 1;
            for i in 0..3 {
                sum[i] += lab[[y, x]][i];
            }
            for p in neighbors(y, x, h, w) {
                if comp[p] == usize::MAX && labels[p] == src {
                    comp[p] = id;
                    queue.push_back(p);
                }
            }
        }
        sizes.push(n);
        sums.push(sum);
    }

    let mut parent: Vec<usize> = (0..sizes.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mean = |sums: &[[f64; 3]], sizes: &[usize], r: usize| sums[r].map(|v| v / sizes[r] as f64);
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| (sizes[i], i));
    for i in order {
        let root = find(&mut parent, i);
        if sizes[root] >= min_size {
            continue;
        }
        let roots: Vec<usize> = (0..sizes.len()).map(|c| find(&mut parent, c)).collect();
        let mut adjacent = BTreeSet::new();
        for ((y, x), _) in comp.indexed_iter().filter(|(_, &c)| roots[c] == root) {
            adjacent.extend(neighbors(y, x, h, w).map(|p| roots[comp[p]]).filter(|&r| r != root));
        }
        let own = mean(&sums, &sizes, root);
        let best = adjacent
            .into_iter()
            .min_by(|&a, &b| {
                let da = color_dist2(&own, &mean(&sums, &sizes, a));
                let db = color_dist2(&own, &mean(&sums, &sizes, b));
                da.total_cmp(&db)
            });
        if let Some(r) = best {
            parent[root] = r;
            sizes[r] += sizes[root];
            for i in 0..3 {
                sums[r][i] += sums[root][i];
            }
        }
    }

    let mut remap = vec![usize::MAX; sizes.len()];
    let mut count = 0;
    let mut out = Array2::zeros((h, w));
    for (idx, &c) in comp.indexed_iter() {
        let r = find(&mut parent, c);
        if remap[r] == usize::MAX {
            remap[r] = count;
            count += 1;
        }
        out[idx] = remap[r];
    }
    Segmentation { labels: out, count }
}

fn neighbors(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [
        (y.wrapping_sub(1), x),
        (y, x.wrapping_sub(1)),
        (y + 1, x),
        (y, x + 1),
    ];
    cand.into_iter().filter(move |&(a, b)| a < h && b < w)
}

impl Segmenter for Slico {
    fn segment(&self, image: &Array3<f64>) -> Result<Segmentation> {
        let (h, w, c) = image.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::Segmentation(format!("expected an HxWx3 image, got {h}x{w}x{c}")));
        }
        if self.segments < 2 || self.iterations == 0 {
            return Err(Error::Segmentation(format!(
                "need at least 2 target segments and 1 iteration, got {} and {}",
                self.segments, self.iterations
            )));
        }
        let lab = Array2::from_shape_fn((h, w), |(y, x)| rgb_to_lab([image[[y, x, 0]], image[[y, x, 1]], image[[y, x, 2]]]));
        let raw = self.cluster(&lab);
        let min_size = (h * w / self.segments / 4).max(1);
        let seg = enforce_connectivity(&raw, &lab, min_size);
        if seg.count < 2 {
            return Err(Error::Segmentation(format!("only {} candidate segment(s)", seg.count)));
        }
        Ok(seg)
    }
}
