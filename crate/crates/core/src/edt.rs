//! Class-boundary extraction and the exact squared Euclidean distance
//! transform.
//!
//! The transform is the separable lower-envelope-of-parabolas algorithm: a 1D
//! pass along every row followed by a 1D pass along every column. All
//! arithmetic is integer, so results are exact.

use std::cmp::Ordering;

use crate::imagery::LabelMask;

/// Pixels that have at least one 4-neighbour with a different label.
///
/// Both sides of a label change are marked. The image frame is not a
/// boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryMap {
    width: usize,
    height: usize,
    is_boundary: Vec<bool>,
}

impl BoundaryMap {
    pub fn from_flags(width: usize, height: usize, is_boundary: Vec<bool>) -> Self {
        assert_eq!(is_boundary.len(), width * height, "boundary flags shape");
        BoundaryMap {
            width,
            height,
            is_boundary,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn flags(&self) -> &[bool] {
        &self.is_boundary
    }

    pub fn is_boundary(&self, x: usize, y: usize) -> bool {
        self.is_boundary[y * self.width + x]
    }

    pub fn any(&self) -> bool {
        self.is_boundary.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.is_boundary.iter().filter(|&&b| b).count()
    }
}

/// Squared distance from every pixel to the nearest boundary pixel.
///
/// When the source had no boundary at all, `has_boundary` is false and every
/// entry holds the `u64::MAX` sentinel (infinitely far).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistanceField {
    width: usize,
    height: usize,
    sq_dist: Vec<u64>,
    has_boundary: bool,
}

impl DistanceField {
    pub const INFINITE: u64 = u64::MAX;

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn has_boundary(&self) -> bool {
        self.has_boundary
    }

    /// Raw squared distances; `INFINITE` everywhere in the sentinel field.
    pub fn sq_dists(&self) -> &[u64] {
        &self.sq_dist
    }

    pub fn sq_dist(&self, x: usize, y: usize) -> Option<u64> {
        self.has_boundary.then(|| self.sq_dist[y * self.width + x])
    }

    /// Euclidean distances as `f32`, `+inf` for the sentinel field. Used for
    /// PFM export.
    pub fn distances_f32(&self) -> Vec<f32> {
        self.sq_dist
            .iter()
            .map(|&d| {
                if d == Self::INFINITE {
                    f32::INFINITY
                } else {
                    (d as f64).sqrt() as f32
                }
            })
            .collect()
    }
}

pub fn extract_boundary(mask: &LabelMask) -> BoundaryMap {
    let (w, h) = (mask.width(), mask.height());
    let labels = mask.labels();
    let mut flags = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            // Marking both ends of every differing horizontal/vertical pair.
            if x + 1 < w && labels[i] != labels[i + 1] {
                flags[i] = true;
                flags[i + 1] = true;
            }
            if y + 1 < h && labels[i] != labels[i + w] {
                flags[i] = true;
                flags[i + w] = true;
            }
        }
    }
    BoundaryMap::from_flags(w, h, flags)
}

pub fn squared_edt(boundary: &BoundaryMap) -> DistanceField {
    let (w, h) = (boundary.width, boundary.height);
    if !boundary.any() {
        return DistanceField {
            width: w,
            height: h,
            sq_dist: vec![DistanceField::INFINITE; w * h],
            has_boundary: false,
        };
    }

    let mut env = Envelope::with_capacity(w.max(h));
    let mut field: Vec<u64> = boundary
        .is_boundary
        .iter()
        .map(|&b| if b { 0 } else { DistanceField::INFINITE })
        .collect();

    let mut out = vec![0u64; w.max(h)];
    for row in field.chunks_mut(w) {
        env.transform(row, &mut out[..w]);
        row.copy_from_slice(&out[..w]);
    }

    let mut column = vec![0u64; h];
    for x in 0..w {
        for y in 0..h {
            column[y] = field[y * w + x];
        }
        env.transform(&column, &mut out[..h]);
        for y in 0..h {
            field[y * w + x] = out[y];
        }
    }

    DistanceField {
        width: w,
        height: h,
        sq_dist: field,
        has_boundary: true,
    }
}

/// Convenience: boundary extraction followed by the transform.
pub fn distance_to_boundary(mask: &LabelMask) -> DistanceField {
    squared_edt(&extract_boundary(mask))
}

/// Breakpoint between two parabolas, kept as an exact fraction.
#[derive(Clone, Copy, Debug)]
enum Breakpoint {
    NegInf,
    At { num: i128, den: i128 },
    PosInf,
}

impl Breakpoint {
    fn cmp_frac(&self, num: i128, den: i128) -> Ordering {
        match *self {
            Breakpoint::NegInf => Ordering::Less,
            Breakpoint::PosInf => Ordering::Greater,
            Breakpoint::At { num: n, den: d } => (n * den).cmp(&(num * d)),
        }
    }

    fn lt_int(&self, q: i128) -> bool {
        self.cmp_frac(q, 1) == Ordering::Less
    }
}

/// Scratch buffers for the 1D lower-envelope transform.
struct Envelope {
    sites: Vec<usize>,
    breaks: Vec<Breakpoint>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope {
            sites: Vec::with_capacity(n),
            breaks: Vec::with_capacity(n + 1),
        }
    }

    /// `out[q] = min_p (q - p)^2 + f[p]` over finite `f[p]`.
    fn transform(&mut self, f: &[u64], out: &mut [u64]) {
        self.sites.clear();
        self.breaks.clear();

        let height = |p: usize| f[p] as i128 + (p * p) as i128;
        for q in (0..f.len()).filter(|&q| f[q] != DistanceField::INFINITE) {
            loop {
                let Some(&p) = self.sites.last() else {
                    self.sites.push(q);
                    self.breaks.push(Breakpoint::NegInf);
                    break;
                };
                // Position where parabola q starts to undercut parabola p.
                let num = height(q) - height(p);
                let den = 2 * (q as i128 - p as i128);
                if self.breaks.last().unwrap().cmp_frac(num, den) != Ordering::Less {
                    self.sites.pop();
                    self.breaks.pop();
                } else {
                    self.sites.push(q);
                    self.breaks.push(Breakpoint::At { num, den });
                    break;
                }
            }
        }

        if self.sites.is_empty() {
            out.fill(DistanceField::INFINITE);
            return;
        }
        self.breaks.push(Breakpoint::PosInf);

        let mut k = 0;
        for (q, slot) in out.iter_mut().enumerate() {
            while self.breaks[k + 1].lt_int(q as i128) {
                k += 1;
            }
            let p = self.sites[k];
            let dq = q.abs_diff(p) as u64;
            *slot = dq * dq + f[p];
        }
    }
}
