use serde::{Deserialize, Serialize};

use super::scene::SyntheticScene;

/// Sampler learning statistics for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Share of polled locations inside a ground-truth box, averaged over scenes.
    pub in_box_fraction: f64,
    /// Intersection over union of polled locations with the previous epoch's, averaged over scenes.
    pub sample_iou: f64,
    pub mean_loss: f64,
}

pub fn in_box_fraction(indices: &[usize], scene: &SyntheticScene) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let mask = scene.box_mask();
    indices.iter().filter(|&&i| mask[i]).count() as f64 / indices.len() as f64
}

pub fn sample_iou(current: &[usize], previous: &[usize]) -> f64 {
    let size = current.iter().chain(previous).copied().max().map_or(0, |m| m + 1);
    let mut a = vec![false; size];
    let mut b = vec![false; size];
    current.iter().for_each(|&i| a[i] = true);
    previous.iter().for_each(|&i| b[i] = true);
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Averages the in-box fraction and, when `previous` is given, the sample IOU
/// over an evaluation set. Without a previous epoch the IOU is reported as 0.
pub fn compute_stats(
    epoch: usize,
    fine_indices: &[Vec<usize>],
    scenes: &[SyntheticScene],
    previous: Option<&[Vec<usize>]>,
    mean_loss: f64,
) -> EpochStats {
    let n = scenes.len().max(1) as f64;
    let in_box = fine_indices
        .iter()
        .zip(scenes)
        .map(|(idx, s)| in_box_fraction(idx, s))
        .sum::<f64>()
        / n;
    let iou = previous.map_or(0.0, |prev| {
        fine_indices.iter().zip(prev).map(|(c, p)| sample_iou(c, p)).sum::<f64>() / n
    });
    EpochStats {
        epoch,
        in_box_fraction: in_box,
        sample_iou: iou,
        mean_loss,
    }
}
