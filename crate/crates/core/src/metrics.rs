//! Image- and pixel-level AUROC, per-region-overlap AUPRO, and the
//! connected-component labeling AUPRO relies on.

use crate::error::{Error, Result};
use std::collections::VecDeque;

/// Binary ground-truth mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<bool>,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            pixels: vec![false; h * w],
        }
    }

    pub fn from_pixels(h: usize, w: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != h * w {
            return Err(Error::shape(&[pixels.len()], &[h, w]));
        }
        Ok(Mask { h, w, pixels })
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn any(&self) -> bool {
        self.pixels.iter().any(|&p| p)
    }
}

/// Per-pixel anomaly scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub h: usize,
    pub w: usize,
    pub scores: Vec<f64>,
}

impl AnomalyMap {
    pub fn new(h: usize, w: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != h * w || scores.is_empty() {
            return Err(Error::shape(&[scores.len()], &[h, w]));
        }
        Ok(AnomalyMap { h, w, scores })
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Self {
        AnomalyMap {
            h,
            w,
            scores: vec![value; h * w],
        }
    }

    pub fn from_mask(mask: &Mask) -> Self {
        AnomalyMap {
            h: mask.h,
            w: mask.w,
            scores: mask.pixels.iter().map(|&p| f64::from(u8::from(p))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape(&[scores.len()], &[labels.len()]));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("NaN score"));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    fn class_counts(&self) -> Result<(usize, usize)> {
        let pos = self.labels.iter().filter(|&&l| l).count();
        let neg = self.labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::UndefinedMetric(format!(
                "AUROC needs both classes ({pos} positive, {neg} negative)"
            )));
        }
        Ok((pos, neg))
    }
}

/// Indices sorted by score, ascending.
fn ascending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Mann–Whitney AUROC with mid-ranks, so tied pairs count one half.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.class_counts()?;
    let order = ascending_order(&set.scores);
    // Twice the positive rank sum keeps every mid-rank integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the mid-rank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u128;
        let positives = order[i..=j].iter().filter(|&&k| set.labels[k]).count() as u128;
        twice_rank_sum += twice_mid * positives;
        i = j + 1;
    }
    let p = pos as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// AUROC as the trapezoidal area under the empirical ROC curve.
pub fn auroc_trapezoid(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.class_counts()?;
    let mut order = ascending_order(&set.scores);
    order.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    // Accumulate twice the area in units of 1/(pos·neg).
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == s {
            if set.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += ((fp - prev_fp) * (tp + prev_tp)) as u128;
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(twice_area as f64 / 2.0 / (pos as f64 * neg as f64))
}

fn check_pairs(maps: &[AnomalyMap], masks: &[Mask]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::shape(&[maps.len()], &[masks.len()]));
    }
    for (m, k) in maps.iter().zip(masks) {
        if (m.h, m.w) != (k.h, k.w) {
            return Err(Error::shape(&[m.h, m.w], &[k.h, k.w]));
        }
    }
    Ok(())
}

/// Pixel-level AUROC over all pixels of all images.
pub fn p_auroc(maps: &[AnomalyMap], masks: &[Mask]) -> Result<f64> {
    check_pairs(maps, masks)?;
    let scores = maps.iter().flat_map(|m| m.scores.iter().copied()).collect();
    let labels = masks.iter().flat_map(|m| m.pixels.iter().copied()).collect();
    auroc(&ScoredSet::new(scores, labels)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Connected anomaly regions of one mask, as sorted flat pixel indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSet {
    pub regions: Vec<Vec<usize>>,
}

/// Breadth-first labeling; regions are ordered by their first pixel in
/// scanline order.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> RegionSet {
    let (h, w) = (mask.h, mask.w);
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.pixels[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut region = Vec::new();
        while let Some(p) = queue.pop_front() {
            region.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dy, dx) == (0, 0) {
                        continue;
                    }
                    if connectivity == Connectivity::Four && dy != 0 && dx != 0 {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.pixels[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    RegionSet { regions }
}

/// Area under the per-region-overlap curve up to `fpr_cap`, normalized by
/// the cap. Regions use 8-connectivity.
pub fn aupro(maps: &[AnomalyMap], masks: &[Mask], fpr_cap: f64) -> Result<f64> {
    aupro_with(maps, masks, fpr_cap, Connectivity::Eight)
}

pub fn aupro_with(
    maps: &[AnomalyMap],
    masks: &[Mask],
    fpr_cap: f64,
    connectivity: Connectivity,
) -> Result<f64> {
    check_pairs(maps, masks)?;
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(Error::invalid(format!("fpr_cap {fpr_cap} outside (0, 1]")));
    }
    // Region id per pixel (usize::MAX for normal pixels) over the whole set.
    let total: usize = maps.iter().map(|m| m.scores.len()).sum();
    let mut region_of = vec![usize::MAX; total];
    let mut region_sizes: Vec<usize> = Vec::new();
    let mut offset = 0;
    for mask in masks {
        for region in connected_components(mask, connectivity).regions {
            for &p in &region {
                region_of[offset + p] = region_sizes.len();
            }
            region_sizes.push(region.len());
        }
        offset += mask.pixels.len();
    }
    if region_sizes.is_empty() {
        return Err(Error::UndefinedMetric("AUPRO needs at least one anomaly region".into()));
    }
    let normals = region_of.iter().filter(|&&r| r == usize::MAX).count();
    if normals == 0 {
        return Err(Error::UndefinedMetric("AUPRO needs at least one normal pixel".into()));
    }
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.scores.iter().copied()).collect();
    let mut order = ascending_order(&scores);
    order.reverse();

    let n_regions = region_sizes.len() as f64;
    let mut curve = vec![(0.0, 0.0)];
    let mut overlap_sum = 0.0;
    let mut false_pos = 0usize;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            match region_of[order[i]] {
                usize::MAX => false_pos += 1,
                r => overlap_sum += 1.0 / region_sizes[r] as f64,
            }
            i += 1;
        }
        // Per-pixel increments can overshoot 1 by rounding.
        curve.push((false_pos as f64 / normals as f64, (overlap_sum / n_regions).min(1.0)));
    }
    Ok((integrate_capped(&curve, fpr_cap) / fpr_cap).min(1.0))
}

/// Trapezoidal area of a monotone-in-x curve on `[0, cap]`, interpolating
/// the segment that crosses the cap.
pub(crate) fn integrate_capped(curve: &[(f64, f64)], cap: f64) -> f64 {
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= cap {
            break;
        }
        if x1 <= cap {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_cap = y0 + (y1 - y0) * (cap - x0) / (x1 - x0);
            area += (cap - x0) * (y0 + y_cap) / 2.0;
            break;
        }
    }
    area
}
