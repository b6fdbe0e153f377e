//! Anchor decoding and text-line construction from the `out` taps.

use ndarray::Array3;

use super::FeatureSpec;
use crate::error::{Error, Result};
use crate::types::BBox;

/// Strips whose columns differ by at most this many positions may join one line.
pub const LINK_GAP_COLUMNS: usize = 2;
/// Two strips in one column overlapping more than this (vertical IoU) are
/// duplicates; the weaker one is dropped.
const COLUMN_NMS_IOU: f64 = 0.5;
/// Minimum vertical overlap, relative to the shorter strip, for linking.
const LINK_MIN_OVERLAP: f64 = 0.6;
/// Minimum height ratio (shorter / taller) for linking.
const LINK_MIN_SIZE_RATIO: f64 = 0.7;
const MAX_LOG_HEIGHT: f64 = 4.0;

#[derive(Clone, Copy, Debug)]
struct Strip {
    col: usize,
    y0: f64,
    y1: f64,
    score: f64,
}

fn vertical_overlap(a: &Strip, b: &Strip) -> f64 {
    (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0)
}

/// Decodes per-position anchors into text-line boxes.
///
/// Channel `2k` / `2k + 1` of `out_coords` hold the centre offset and log
/// height of anchor `k` (relative to the anchor height); channel `2k + 1` of
/// `out_scores` is its text confidence. Above-threshold anchors become
/// vertical strips one stride wide, duplicates within a column are
/// suppressed, and strips in nearby columns with enough vertical overlap are
/// merged into lines. A line spans its strips horizontally and takes their
/// mean top and bottom; its confidence is the mean strip score.
pub fn decode_boxes(
    out_coords: &Array3<f64>,
    out_scores: &Array3<f64>,
    threshold: f64,
    spec: &FeatureSpec,
) -> Result<(Vec<BBox>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("confidence threshold {threshold} is outside [0, 1]")));
    }
    let (h, w, c) = out_scores.dim();
    if c != spec.out_channels() || out_coords.dim() != (h, w, c) {
        return Err(Error::Shape(format!(
            "out taps must both be (h, w, {}), got {:?} and {:?}",
            spec.out_channels(),
            out_coords.dim(),
            out_scores.dim()
        )));
    }
    let stride = spec.stride as f64;

    let mut strips = Vec::new();
    for j in 0..w {
        let mut column = Vec::new();
        for i in 0..h {
            for (k, &ha) in spec.anchor_heights.iter().enumerate() {
                let score = out_scores[[i, j, 2 * k + 1]];
                if score <= threshold {
                    continue;
                }
                let cy = (i as f64 + 0.5) * stride + out_coords[[i, j, 2 * k]] * ha;
                let height = ha * out_coords[[i, j, 2 * k + 1]].clamp(-MAX_LOG_HEIGHT, MAX_LOG_HEIGHT).exp();
                column.push(Strip { col: j, y0: cy - height / 2.0, y1: cy + height / 2.0, score });
            }
        }
        column.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.y0.total_cmp(&b.y0)));
        let mut kept: Vec<Strip> = Vec::new();
        for s in column {
            let dup = kept.iter().any(|k| {
                let inter = vertical_overlap(k, &s);
                inter / ((k.y1 - k.y0) + (s.y1 - s.y0) - inter) > COLUMN_NMS_IOU
            });
            if !dup {
                kept.push(s);
            }
        }
        strips.extend(kept);
    }

    let mut parent: Vec<usize> = (0..strips.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for a in 0..strips.len() {
        for b in a + 1..strips.len() {
            let (sa, sb) = (&strips[a], &strips[b]);
            if sa.col == sb.col || sa.col.abs_diff(sb.col) > LINK_GAP_COLUMNS {
                continue;
            }
            let (ha, hb) = (sa.y1 - sa.y0, sb.y1 - sb.y0);
            let shorter = ha.min(hb);
            if vertical_overlap(sa, sb) >= LINK_MIN_OVERLAP * shorter && shorter >= LINK_MIN_SIZE_RATIO * ha.max(hb) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }

    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for k in 0..strips.len() {
        let root = find(&mut parent, k);
        groups.entry(root).or_default().push(k);
    }
    let mut lines: Vec<(BBox, f64)> = groups
        .values()
        .map(|members| {
            let mut b = BBox { x0: f64::MAX, y0: 0.0, x1: f64::MIN, y1: 0.0 };
            let mut score = 0.0;
            for &m in members {
                let s = &strips[m];
                b.x0 = b.x0.min(s.col as f64 * stride);
                b.x1 = b.x1.max((s.col + 1) as f64 * stride);
                b.y0 += s.y0;
                b.y1 += s.y1;
                score += s.score;
            }
            let n = members.len() as f64;
            b.y0 /= n;
            b.y1 /= n;
            (b, score / n)
        })
        .collect();
    lines.sort_by(|a, b| a.0.y0.total_cmp(&b.0.y0).then(a.0.x0.total_cmp(&b.0.x0)));
    Ok(lines.into_iter().unzip())
}
