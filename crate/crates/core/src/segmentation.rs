//! Zero-shot object masks from slot attention and J/F scoring against
//! ground-truth id masks.
//!
//! Tracks are formed by slot index: slot `n` at every frame is one track.
//! Slot tracks are matched one-to-one to ground-truth tracks with the
//! Hungarian algorithm on `1 - mean_t J`, and unmatched ground-truth tracks
//! score zero.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stf;
use crate::tensor::Tensor;

/// Per-pixel slot index for every frame of a clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub n_slots: usize,
    /// Row-major `[T, H, W]`.
    pub assignments: Vec<usize>,
}

impl MaskSet {
    pub fn new(t: usize, h: usize, w: usize, n_slots: usize, assignments: Vec<usize>) -> Result<Self> {
        if assignments.len() != t * h * w {
            return Err(Error::shape("MaskSet", &[t, h, w], &[assignments.len()]));
        }
        if let Some(&bad) = assignments.iter().find(|&&a| a >= n_slots) {
            return Err(Error::Contract(format!("slot index {bad} out of range for {n_slots} slots")));
        }
        Ok(Self {
            t,
            h,
            w,
            n_slots,
            assignments,
        })
    }

    /// Interprets an integer-valued `[T, H, W]` tensor as slot indices.
    pub fn from_tensor(ids: &Tensor, n_slots: usize) -> Result<Self> {
        let (t, h, w) = dims3(ids)?;
        let assignments = to_ids(ids)?;
        Self::new(t, h, w, n_slots, assignments)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.t, self.h, self.w],
            self.assignments.iter().map(|&a| a as f64).collect(),
        )
        .expect("consistent by construction")
    }

    pub fn frame(&self, t: usize) -> &[usize] {
        let hw = self.h * self.w;
        &self.assignments[t * hw..(t + 1) * hw]
    }

    /// Number of pixels assigned to each slot over the whole clip.
    pub fn slot_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_slots];
        for &a in &self.assignments {
            c[a] += 1;
        }
        c
    }

    /// Applies a slot relabeling `n -> perm[n]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_slots {
            return Err(Error::Contract("relabeling must cover every slot".into()));
        }
        let assignments = self.assignments.iter().map(|&a| perm[a]).collect();
        Self::new(self.t, self.h, self.w, self.n_slots, assignments)
    }
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[a, b, c] => Ok((a, b, c)),
        s => Err(Error::Contract(format!("expected a [T, H, W] id tensor, got {s:?}"))),
    }
}

fn to_ids(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(Error::Contract(format!("id masks must hold non-negative integers, found {v}")))
            }
        })
        .collect()
}

/// Bilinear resize of one `[h, w]` map to `[ho, wo]` with half-pixel centers
/// and edge clamping.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let axis = |out: usize, len: usize, n: usize| -> (usize, usize, f64) {
        let pos = ((out as f64 + 0.5) * len as f64 / n as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..wo).map(|x| axis(x, w, wo)).collect();
    let mut out = Vec::with_capacity(ho * wo);
    for y in 0..ho {
        let (y0, y1, fy) = axis(y, h, ho);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Turns attention `[T, N, H*W]` into a per-pixel slot partition at image
/// resolution. Each slot map is upsampled, then the argmax is taken with ties
/// going to the lowest slot index.
pub fn binarize(attn: &Tensor, h: usize, w: usize, h_img: usize, w_img: usize) -> Result<MaskSet> {
    let (t, n, hw) = match attn.shape() {
        &[t, n, hw] => (t, n, hw),
        s => return Err(Error::Contract(format!("attention must be [T, N, HW], got {s:?}"))),
    };
    if hw != h * w || n == 0 || h == 0 || w == 0 {
        return Err(Error::shape("binarize", &[t, n, h * w], attn.shape()));
    }
    let px = h_img * w_img;
    let mut assignments = vec![0usize; t * px];
    let mut best = vec![f64::NEG_INFINITY; px];
    for f in 0..t {
        best.iter_mut().for_each(|b| *b = f64::NEG_INFINITY);
        let out = &mut assignments[f * px..(f + 1) * px];
        for s in 0..n {
            let start = (f * n + s) * hw;
            let up = upsample_bilinear(&attn.data()[start..start + hw], h, w, h_img, w_img);
            for ((b, a), v) in best.iter_mut().zip(out.iter_mut()).zip(up) {
                if v > *b {
                    *b = v;
                    *a = s;
                }
            }
        }
    }
    MaskSet::new(t, h_img, w_img, n, assignments)
}

/// A 2-D boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("BinaryMask", &[h, w], &[data.len()]));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Self { h, w, data }
    }

    /// Pixels of `ids` equal to `id`.
    pub fn from_ids(ids: &[usize], h: usize, w: usize, id: usize) -> Self {
        Self {
            h,
            w,
            data: ids.iter().map(|&v| v == id).collect(),
        }
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    /// Foreground pixels with at least one in-image 4-neighbour in the
    /// background.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.at(y, x) {
                    continue;
                }
                let edge = (y > 0 && !self.at(y - 1, x))
                    || (y + 1 < self.h && !self.at(y + 1, x))
                    || (x > 0 && !self.at(y, x - 1))
                    || (x + 1 < self.w && !self.at(y, x + 1));
                if edge {
                    out.push((y, x));
                }
            }
        }
        out
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::shape(op, &[self.h, self.w], &[other.h, other.w]));
        }
        Ok(())
    }
}

/// Region similarity `|p ∩ g| / |p ∪ g|`, 1 when both masks are empty.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same(gt, "jaccard")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn matched_fraction(from: &[(usize, usize)], to: &BinaryMask, to_boundary: &[(usize, usize)], tol: usize) -> f64 {
    let mut grid = vec![false; to.h * to.w];
    for &(y, x) in to_boundary {
        grid[y * to.w + x] = true;
    }
    let hits = from
        .iter()
        .filter(|&&(y, x)| {
            let (y0, y1) = (y.saturating_sub(tol), (y + tol).min(to.h - 1));
            let (x0, x1) = (x.saturating_sub(tol), (x + tol).min(to.w - 1));
            (y0..=y1).any(|yy| (x0..=x1).any(|xx| grid[yy * to.w + xx]))
        })
        .count();
    hits as f64 / from.len() as f64
}

/// Boundary F-measure with a Chebyshev tolerance of `tol` pixels.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, tol: usize) -> Result<f64> {
    pred.check_same(gt, "boundary_f")?;
    if pred.data == gt.data {
        return Ok(1.0);
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    if bp.is_empty() || bg.is_empty() {
        return Ok(0.0);
    }
    let precision = matched_fraction(&bp, gt, &bg, tol);
    let recall = matched_fraction(&bg, pred, &bp, tol);
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Result of [`hungarian_match`]: `(row, col)` pairs sorted by row.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

/// Minimum-cost one-to-one assignment of `min(A, B)` pairs for a cost
/// matrix `[A, B]`, via shortest augmenting paths with potentials.
pub fn hungarian_match(cost: &Tensor) -> Result<Assignment> {
    let (a, b) = match cost.shape() {
        &[a, b] => (a, b),
        s => return Err(Error::Contract(format!("cost must be a matrix, got {s:?}"))),
    };
    if !cost.is_finite() {
        return Err(Error::Contract("cost matrix must be finite".into()));
    }
    if a == 0 || b == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total: 0.0,
        });
    }
    let transposed = a > b;
    let (n, m) = if transposed { (b, a) } else { (a, b) };
    let c = |i: usize, j: usize| -> f64 {
        if transposed {
            cost.data()[j * b + i]
        } else {
            cost.data()[i * b + j]
        }
    };

    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (r, col) = (owner[j] - 1, j - 1);
            if transposed {
                (col, r)
            } else {
                (r, col)
            }
        })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, col)| cost.data()[r * b + col]).sum();
    Ok(Assignment { pairs, total })
}

/// J, F and their mean for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JF")]
    pub jf: f64,
    /// Set when the ground truth has no foreground object at all.
    pub empty_foreground: bool,
    /// `(slot, gt id)` pairs chosen by the matching.
    pub matches: Vec<(usize, usize)>,
}

impl SegScore {
    fn new(j: f64, f: f64, matches: Vec<(usize, usize)>) -> Self {
        Self {
            j,
            f,
            jf: (j + f) / 2.0,
            empty_foreground: false,
            matches,
        }
    }

    fn empty() -> Self {
        Self {
            j: 0.0,
            f: 0.0,
            jf: 0.0,
            empty_foreground: true,
            matches: Vec::new(),
        }
    }
}

/// Boundary tolerance used for the F measure.
pub const BOUNDARY_TOL: usize = 1;

/// Scores predicted slot masks against ground-truth ids `[T, H, W]`
/// (0 = background).
pub fn evaluate_clip(masks: &MaskSet, gt: &Tensor) -> Result<SegScore> {
    let (t, h, w) = dims3(gt)?;
    if (t, h, w) != (masks.t, masks.h, masks.w) {
        return Err(Error::shape("evaluate_clip", &[masks.t, masks.h, masks.w], gt.shape()));
    }
    let gt_ids = to_ids(gt)?;
    evaluate_ids(masks, &gt_ids)
}

fn evaluate_ids(masks: &MaskSet, gt_ids: &[usize]) -> Result<SegScore> {
    let (t, h, w, n) = (masks.t, masks.h, masks.w, masks.n_slots);
    let hw = h * w;
    let mut tracks: Vec<usize> = gt_ids.iter().copied().filter(|&v| v != 0).collect();
    tracks.sort_unstable();
    tracks.dedup();
    if tracks.is_empty() {
        log::warn!("ground truth has no foreground objects; segmentation score is undefined");
        return Ok(SegScore::empty());
    }
    let k = tracks.len();
    let col = |id: usize| tracks.binary_search(&id).ok();

    // mean over frames of J for every (slot, track) pair, from confusion counts
    let mut mean_j = vec![0.0; n * k];
    let mut inter = vec![0usize; n * k];
    let mut pred_area = vec![0usize; n];
    let mut gt_area = vec![0usize; k];
    for f in 0..t {
        inter.iter_mut().for_each(|c| *c = 0);
        pred_area.iter_mut().for_each(|c| *c = 0);
        gt_area.iter_mut().for_each(|c| *c = 0);
        for (&s, &g) in masks.frame(f).iter().zip(&gt_ids[f * hw..(f + 1) * hw]) {
            pred_area[s] += 1;
            if let Some(c) = col(g) {
                gt_area[c] += 1;
                inter[s * k + c] += 1;
            }
        }
        for s in 0..n {
            for c in 0..k {
                let i = inter[s * k + c];
                mean_j[s * k + c] += ratio(i, pred_area[s] + gt_area[c] - i);
            }
        }
    }
    let cost = Tensor::new(vec![n, k], mean_j.iter().map(|j| 1.0 - j / t as f64).collect())?;
    let assignment = hungarian_match(&cost)?;

    let (mut j_sum, mut f_sum) = (0.0, 0.0);
    let mut matches = Vec::with_capacity(assignment.pairs.len());
    for &(s, c) in &assignment.pairs {
        let (mut jt, mut ft) = (0.0, 0.0);
        for f in 0..t {
            let pred = BinaryMask::from_ids(masks.frame(f), h, w, s);
            let g = BinaryMask::from_ids(&gt_ids[f * hw..(f + 1) * hw], h, w, tracks[c]);
            jt += jaccard(&pred, &g)?;
            ft += boundary_f(&pred, &g, BOUNDARY_TOL)?;
        }
        j_sum += jt / t as f64;
        f_sum += ft / t as f64;
        matches.push((s, tracks[c]));
    }
    Ok(SegScore::new(j_sum / k as f64, f_sum / k as f64, matches))
}

/// Expected score of a prediction whose pixels are shuffled within each
/// frame: same per-frame slot areas, random placement. Averaged over
/// `samples` Monte-Carlo draws.
pub fn random_baseline<R: Rng + ?Sized>(masks: &MaskSet, gt: &Tensor, samples: usize, rng: &mut R) -> Result<SegScore> {
    let (t, h, w) = dims3(gt)?;
    if (t, h, w) != (masks.t, masks.h, masks.w) {
        return Err(Error::shape("random_baseline", &[masks.t, masks.h, masks.w], gt.shape()));
    }
    if samples == 0 {
        return Err(Error::Contract("random baseline needs at least one sample".into()));
    }
    let gt_ids = to_ids(gt)?;
    let hw = h * w;
    let (mut j, mut f) = (0.0, 0.0);
    let mut shuffled = masks.clone();
    for _ in 0..samples {
        for frame in 0..t {
            shuffled.assignments[frame * hw..(frame + 1) * hw].shuffle(rng);
        }
        let s = evaluate_ids(&shuffled, &gt_ids)?;
        if s.empty_foreground {
            return Ok(s);
        }
        j += s.j;
        f += s.f;
    }
    Ok(SegScore::new(j / samples as f64, f / samples as f64, Vec::new()))
}

/// Metric record written per clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip_id: String,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JF")]
    pub jf: f64,
}

impl ClipReport {
    pub fn new(clip_id: impl Into<String>, score: &SegScore) -> Self {
        Self {
            clip_id: clip_id.into(),
            j: score.j,
            f: score.f,
            jf: score.jf,
        }
    }
}

/// Writes `<dir>/<clip_id>.stf` holding the `[T, H, W]` slot indices and one
/// binary PGM per frame, gray level `255 * slot / (N - 1)`.
pub fn export_masks(masks: &MaskSet, dir: impl AsRef<Path>, clip_id: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = vec![dir.join(format!("{clip_id}.stf"))];
    stf::save(&written[0], &masks.to_tensor())?;
    let scale = if masks.n_slots > 1 {
        255.0 / (masks.n_slots - 1) as f64
    } else {
        0.0
    };
    for f in 0..masks.t {
        let path = dir.join(format!("{clip_id}_{f:03}.pgm"));
        let mut file = std::io::BufWriter::new(fs::File::create(&path)?);
        write!(file, "P5\n{} {}\n255\n", masks.w, masks.h)?;
        let bytes: Vec<u8> = masks.frame(f).iter().map(|&s| (s as f64 * scale).round() as u8).collect();
        file.write_all(&bytes)?;
        file.flush()?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_and_uniform_attention() {
        let mut a = Tensor::zeros(&[1, 3, 4]);
        for j in 0..4 {
            a.set(&[0, 2, j], 1.0);
        }
        let m = binarize(&a, 2, 2, 8, 8).unwrap();
        assert!(m.assignments.iter().all(|&s| s == 2));
        let u = Tensor::full(&[2, 3, 4], 1.0 / 3.0);
        let m = binarize(&u, 2, 2, 8, 8).unwrap();
        assert!(m.assignments.iter().all(|&s| s == 0));
        assert_eq!(m.slot_counts().iter().sum::<usize>(), 2 * 64);
    }

    #[test]
    fn constant_map_upsamples_to_constant() {
        let up = upsample_bilinear(&[0.25; 6], 2, 3, 7, 5);
        assert!(up.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn jaccard_examples() {
        let g = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        assert_eq!(jaccard(&g, &g).unwrap(), 1.0);
        let half = BinaryMask::from_fn(4, 4, |y, _| y < 1);
        assert_eq!(jaccard(&half, &g).unwrap(), 0.5);
        let other = BinaryMask::from_fn(4, 4, |y, _| y >= 2);
        assert_eq!(jaccard(&other, &g).unwrap(), 0.0);
        let empty = BinaryMask::from_fn(4, 4, |_, _| false);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn boundary_examples() {
        let sq = BinaryMask::from_fn(10, 10, |y, x| (2..6).contains(&y) && (2..6).contains(&x));
        let shifted = BinaryMask::from_fn(10, 10, |y, x| (2..6).contains(&y) && (3..7).contains(&x));
        let empty = BinaryMask::from_fn(10, 10, |_, _| false);
        assert_eq!(boundary_f(&sq, &sq, 1).unwrap(), 1.0);
        assert_eq!(boundary_f(&empty, &sq, 1).unwrap(), 0.0);
        assert_eq!(boundary_f(&shifted, &sq, 1).unwrap(), 1.0);
        assert!(boundary_f(&shifted, &sq, 0).unwrap() < 1.0);
    }

    #[test]
    fn hungarian_small_cases() {
        let c = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]).unwrap();
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total, 2.0);
        let wide = Tensor::from_rows(&[&[5.0, 1.0, 3.0]]).unwrap();
        assert_eq!(hungarian_match(&wide).unwrap().pairs, vec![(0, 1)]);
        let tall = Tensor::from_rows(&[&[5.0], &[1.0], &[3.0]]).unwrap();
        assert_eq!(hungarian_match(&tall).unwrap().pairs, vec![(1, 0)]);
    }

    #[test]
    fn single_slot_against_two_halves() {
        let masks = MaskSet::new(1, 2, 4, 3, vec![0; 8]).unwrap();
        let gt = Tensor::new(vec![1, 2, 4], vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        let s = evaluate_clip(&masks, &gt).unwrap();
        assert_eq!(s.j, 0.25);
        assert_eq!(s.jf, (s.j + s.f) / 2.0);
    }

    #[test]
    fn empty_foreground_is_flagged() {
        let masks = MaskSet::new(1, 2, 2, 2, vec![0, 1, 0, 1]).unwrap();
        let s = evaluate_clip(&masks, &Tensor::zeros(&[1, 2, 2])).unwrap();
        assert!(s.empty_foreground);
    }
}
