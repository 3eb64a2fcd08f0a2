//! Evaluation protocols: retrieval precision/recall, the three-way
//! classification comparison, Chamfer diversity statistics and mean
//! segmentation accuracy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, VolumeClassifier};
use crate::error::{Error, Result};
use crate::fsim::{rank, Corpus, FsimModel, RetrievalDirection};
use crate::iseg::seg_accuracy;
use crate::voxel::{chamfer, mask_points, Coord, ObjectGrid, SceneGrid, SegmentedScene};

/// Recall levels of the interpolated curve.
pub const RECALL_LEVELS: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub direction: String,
    pub points: Vec<PrPoint>,
}

/// Interpolated precision at 0, 0.1, …, 1 recall, averaged over queries.
/// Rows of `scores` are queries, smaller scores rank first, and positives
/// are corpus items sharing the query's label.
pub fn pr_curve_from_scores(
    scores: &[Vec<f64>],
    query_labels: &[usize],
    corpus_labels: &[usize],
    direction: &str,
) -> Result<PrCurve> {
    if scores.is_empty() || scores.len() != query_labels.len() {
        return Err(Error::invalid("one score row and label per query is required"));
    }
    let mut sum = [0.0; RECALL_LEVELS];
    for (row, &ql) in scores.iter().zip(query_labels) {
        if row.len() != corpus_labels.len() {
            return Err(Error::shape("score row", format!("{} scores for {} items", row.len(), corpus_labels.len())));
        }
        let positives = corpus_labels.iter().filter(|&&l| l == ql).count();
        if positives == 0 {
            return Err(Error::invalid(format!("query label {ql} has no positive in the corpus")));
        }
        let mut hits = 0;
        let mut pr = Vec::with_capacity(row.len());
        for (k, h) in rank(row, row.len()).iter().enumerate() {
            hits += (corpus_labels[h.index] == ql) as usize;
            pr.push((hits as f64 / positives as f64, hits as f64 / (k + 1) as f64));
        }
        for (i, s) in sum.iter_mut().enumerate() {
            let level = i as f64 / (RECALL_LEVELS - 1) as f64;
            *s += pr
                .iter()
                .filter(|(r, _)| *r >= level - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max);
        }
    }
    let n = scores.len() as f64;
    let points = (0..RECALL_LEVELS)
        .map(|i| PrPoint {
            recall: i as f64 / (RECALL_LEVELS - 1) as f64,
            precision: sum[i] / n,
        })
        .collect();
    Ok(PrCurve {
        direction: direction.to_string(),
        points,
    })
}

/// PR curve of a trained similarity model.
pub fn pr_curve(
    model: &FsimModel,
    queries: Corpus<'_>,
    query_labels: &[usize],
    corpus: Corpus<'_>,
    corpus_labels: &[usize],
    direction: RetrievalDirection,
) -> Result<PrCurve> {
    let scores = model.score_matrix(queries, corpus, direction)?;
    pr_curve_from_scores(&scores, query_labels, corpus_labels, direction_tag(direction))
}

pub fn direction_tag(d: RetrievalDirection) -> &'static str {
    match d {
        RetrievalDirection::ObjectToScene => "o2s",
        RetrievalDirection::SceneToObject => "s2o",
        RetrievalDirection::SceneToScene => "s2s",
    }
}

/// Fraction of queries whose top-ranked item shares their label.
pub fn precision_at_1(scores: &[Vec<f64>], query_labels: &[usize], corpus_labels: &[usize]) -> Result<f64> {
    if scores.is_empty() || scores.len() != query_labels.len() {
        return Err(Error::invalid("one score row and label per query is required"));
    }
    let mut right = 0;
    for (row, &ql) in scores.iter().zip(query_labels) {
        let top = rank(row, 1)
            .first()
            .ok_or_else(|| Error::invalid("empty retrieval corpus"))?
            .index;
        right += (corpus_labels[top] == ql) as usize;
    }
    Ok(right as f64 / scores.len() as f64)
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(Error::invalid("accuracy needs one prediction per label"));
    }
    Ok(predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    /// Similarity network with its classification head.
    pub fsim_head: f64,
    /// Category of the reference scene with the smallest expectation score.
    pub nearest_scene: f64,
    /// Standalone classifier with the same encoder layout.
    pub standalone: f64,
    pub evaluated: usize,
}

/// Classifies `objects` three ways; the reference scenes serve the
/// nearest-scene transfer.
pub fn classification_report(
    fsim: &FsimModel,
    classifier: &VolumeClassifier,
    objects: &[ObjectGrid],
    labels: &[usize],
    reference_scenes: &[SceneGrid],
    reference_labels: &[usize],
) -> Result<ClassificationReport> {
    let refs: Vec<&ObjectGrid> = objects.iter().collect();
    let head: Vec<usize> = fsim.classify_objects(&refs)?.iter().map(|p| argmax(p)).collect();
    let scores = fsim.score_matrix(
        Corpus::Objects(objects),
        Corpus::Scenes(reference_scenes),
        RetrievalDirection::ObjectToScene,
    )?;
    let nearest: Vec<usize> = scores.iter().map(|row| reference_labels[rank(row, 1)[0].index]).collect();
    let standalone = classifier.predict(&refs)?;
    let report = ClassificationReport {
        fsim_head: accuracy(&head, labels)?,
        nearest_scene: accuracy(&nearest, labels)?,
        standalone: accuracy(&standalone, labels)?,
        evaluated: labels.len(),
    };
    if report.fsim_head >= report.nearest_scene && report.nearest_scene >= report.standalone {
        log::info!("classification ordering head ≥ nearest ≥ standalone holds: {report:?}");
    } else {
        log::info!("classification ordering head ≥ nearest ≥ standalone does not hold: {report:?}");
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanVar {
    pub mean: f64,
    pub variance: f64,
}

/// Mean and population variance.
pub fn mean_var(values: &[f64]) -> Result<MeanVar> {
    if values.is_empty() {
        return Err(Error::invalid("statistics of an empty sample"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(MeanVar { mean, variance })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    /// Chamfer distance over unordered pairs of training scenes.
    pub training: MeanVar,
    /// Chamfer distance over unordered pairs of generated scenes.
    pub generated: MeanVar,
    /// Per training scene, Chamfer distance to its nearest generated scene.
    pub nearest: MeanVar,
}

/// Chamfer distances of every unordered pair, in `(i, j)` order with `i < j`.
pub fn pairwise_chamfer(set: &[Vec<Coord>]) -> Result<Vec<f64>> {
    let pairs: Vec<(usize, usize)> = (0..set.len())
        .flat_map(|i| (i + 1..set.len()).map(move |j| (i, j)))
        .collect();
    pairs.par_iter().map(|&(i, j)| chamfer(&set[i], &set[j])).collect()
}

/// Occupied voxels of each scene as point sets.
pub fn scene_points(scenes: &[&SceneGrid]) -> Vec<Vec<Coord>> {
    scenes.iter().map(|s| s.occupied_points()).collect()
}

/// Occupied voxels of each mask as point sets.
pub fn mask_sets(res: usize, masks: &[Vec<bool>]) -> Vec<Vec<Coord>> {
    masks.iter().map(|m| mask_points(res, m)).collect()
}

pub fn diversity_report(training: &[Vec<Coord>], generated: &[Vec<Coord>]) -> Result<DiversityStats> {
    if training.len() < 2 || generated.len() < 2 {
        return Err(Error::invalid("diversity needs at least two scenes per set"));
    }
    let nearest = training
        .par_iter()
        .map(|t| {
            generated
                .iter()
                .map(|g| chamfer(t, g))
                .try_fold(f64::INFINITY, |m, d| d.map(|d| m.min(d)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiversityStats {
        training: mean_var(&pairwise_chamfer(training)?)?,
        generated: mean_var(&pairwise_chamfer(generated)?)?,
        nearest: mean_var(&nearest)?,
    })
}

/// Mean of per-scene segmentation accuracies.
pub fn mean_seg_accuracy(predicted: &[SegmentedScene], truth: &[&SegmentedScene]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::invalid("one prediction per ground-truth scene is required"));
    }
    let mut sum = 0.0;
    for (p, t) in predicted.iter().zip(truth) {
        sum += seg_accuracy(p, t)?;
    }
    Ok(sum / predicted.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking_has_unit_precision() {
        let labels = [0, 0, 1, 1];
        let scores: Vec<Vec<f64>> = labels
            .iter()
            .map(|&q| labels.iter().map(|&c| if c == q { 0.0 } else { 1.0 }).collect())
            .collect();
        let c = pr_curve_from_scores(&scores, &labels, &labels, "s2s").unwrap();
        assert_eq!(c.points.len(), RECALL_LEVELS);
        assert!(c.points.iter().all(|p| p.precision == 1.0));
        assert!(c.points.windows(2).all(|w| w[0].recall <= w[1].recall));
    }

    #[test]
    fn worst_ranking() {
        // One positive ranked last among four.
        let c = pr_curve_from_scores(&[vec![3.0, 0.0, 1.0, 2.0]], &[1], &[1, 0, 0, 0], "o2s").unwrap();
        assert!(c.points.iter().all(|p| (p.precision - 0.25).abs() < 1e-12));
    }

    #[test]
    fn mean_var_examples() {
        let s = mean_var(&[1.0, 3.0]).unwrap();
        assert_eq!(s, MeanVar { mean: 2.0, variance: 1.0 });
        assert!(mean_var(&[]).is_err());
    }

    #[test]
    fn identical_sets_have_zero_nearest_distance() {
        let set = vec![vec![[0, 0, 0]], vec![[2, 0, 0]], vec![[0, 3, 1]]];
        let d = diversity_report(&set, &set).unwrap();
        assert_eq!(d.nearest, MeanVar::default());
        assert_eq!(d.training, d.generated);
    }
}
