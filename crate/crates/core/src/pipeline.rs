//! Initialization and evaluation around the filter: agglomerative
//! clustering of speaker-pure segments, maximum-likelihood centroid and
//! transition estimation, Hungarian cluster tagging and diarisation
//! error metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::WordSegment;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("clustering needs at least one segment")]
    NoSegments,
    #[error("segment {index} embedding has norm {norm}, expected 1 within 1e-6")]
    SegmentNotUnit { index: usize, norm: f64 },
    #[error("segment embeddings have inconsistent dimensions")]
    DimensionMismatch,
    #[error("cluster {cluster} has a degenerate (zero-resultant) embedding sum")]
    DegenerateCluster { cluster: usize },
    #[error("cost matrix must be nonempty and rectangular with finite entries")]
    BadCostMatrix,
    #[error("hypothesis and reference word inventories differ ({hyp} vs {reference} labels for {words} words)")]
    InventoryMismatch { hyp: usize, reference: usize, words: usize },
}

/// A speaker-pure stretch of one channel with its mean embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub channel: usize,
    pub start: usize,
    pub end: usize,
    pub embedding: Vec<f64>,
}

/// Cluster labels per segment, labels in `0..num_clusters`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub num_clusters: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

fn validate_segments(segments: &[Segment]) -> Result<usize, PipelineError> {
    if segments.is_empty() {
        return Err(PipelineError::NoSegments);
    }
    let dim = segments[0].embedding.len();
    for (index, seg) in segments.iter().enumerate() {
        if seg.embedding.len() != dim {
            return Err(PipelineError::DimensionMismatch);
        }
        let norm = dot(&seg.embedding, &seg.embedding).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(PipelineError::SegmentNotUnit { index, norm });
        }
    }
    Ok(dim)
}

/// Agglomerative clustering: greedily merges the pair of clusters whose
/// mean embeddings have the highest cosine similarity, until that
/// maximum falls below `threshold`. Ties break on the lexicographically
/// smallest pair index.
pub fn ahc_cluster(segments: &[Segment], threshold: f64) -> Result<Clustering, PipelineError> {
    let dim = validate_segments(segments)?;

    struct Cluster {
        members: Vec<usize>,
        sum: Vec<f64>,
    }
    let mut clusters: Vec<Cluster> = segments
        .iter()
        .enumerate()
        .map(|(i, s)| Cluster { members: vec![i], sum: s.embedding.clone() })
        .collect();

    while clusters.len() > 1 {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..clusters.len() {
            for j in (i + 1)..clusters.len() {
                let sim = cosine(&clusters[i].sum, &clusters[j].sum);
                if best.is_none_or(|(_, _, s)| sim > s) {
                    best = Some((i, j, sim));
                }
            }
        }
        let (i, j, sim) = best.expect("at least two clusters");
        if sim < threshold {
            break;
        }
        let Cluster { members, sum } = clusters.swap_remove(j);
        clusters[i].members.extend(members);
        for (acc, v) in clusters[i].sum.iter_mut().zip(&sum) {
            *acc += v;
        }
        let _ = dim;
    }

    // canonical order: by smallest member index
    clusters.sort_by_key(|c| *c.members.iter().min().expect("nonempty cluster"));
    let mut labels = vec![0usize; segments.len()];
    for (label, cluster) in clusters.iter().enumerate() {
        for &member in &cluster.members {
            labels[member] = label;
        }
    }
    Ok(Clustering { labels, num_clusters: clusters.len() })
}

/// Maximum-likelihood mean directions: per cluster, the mean of member
/// embeddings renormalized to unit norm.
pub fn estimate_centroids(
    segments: &[Segment],
    clustering: &Clustering,
) -> Result<Vec<Vec<f64>>, PipelineError> {
    let dim = validate_segments(segments)?;
    let mut sums = vec![vec![0.0; dim]; clustering.num_clusters];
    for (seg, &label) in segments.iter().zip(&clustering.labels) {
        for (acc, v) in sums[label].iter_mut().zip(&seg.embedding) {
            *acc += v;
        }
    }
    sums.into_iter()
        .enumerate()
        .map(|(cluster, sum)| {
            let norm = dot(&sum, &sum).sqrt();
            if norm < 1e-9 {
                return Err(PipelineError::DegenerateCluster { cluster });
            }
            Ok(sum.into_iter().map(|v| v / norm).collect())
        })
        .collect()
}

/// Speaker transition matrix from per-channel label runs: row-normalized
/// bigram counts pooled over all runs, interpolated with the uniform
/// distribution by `alpha`. Rows with no outgoing counts fall back to
/// uniform.
pub fn estimate_transitions(label_runs: &[Vec<usize>], num_speakers: usize, alpha: f64) -> Vec<Vec<f64>> {
    let m = num_speakers;
    let mut counts = vec![vec![0.0f64; m]; m];
    for run in label_runs {
        for pair in run.windows(2) {
            counts[pair[0]][pair[1]] += 1.0;
        }
    }
    let uniform = 1.0 / m as f64;
    counts
        .into_iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            if total == 0.0 {
                return vec![uniform; m];
            }
            row.into_iter().map(|c| (1.0 - alpha) * c / total + alpha * uniform).collect()
        })
        .collect()
}

/// Minimum-cost one-to-one assignment of rows to columns on a
/// rectangular matrix. When there are more rows than columns the surplus
/// rows stay unassigned.
pub fn hungarian_map(cost: &[Vec<f64>]) -> Result<Vec<Option<usize>>, PipelineError> {
    let rows = cost.len();
    if rows == 0 {
        return Err(PipelineError::BadCostMatrix);
    }
    let cols = cost[0].len();
    if cols == 0
        || cost.iter().any(|r| r.len() != cols)
        || cost.iter().any(|r| r.iter().any(|c| !c.is_finite()))
    {
        return Err(PipelineError::BadCostMatrix);
    }

    if rows <= cols {
        Ok(assign_rows(cost, rows, cols).into_iter().map(Some).collect())
    } else {
        // solve the transpose, then invert the mapping
        let transposed: Vec<Vec<f64>> =
            (0..cols).map(|c| (0..rows).map(|r| cost[r][c]).collect()).collect();
        let col_to_row = assign_rows(&transposed, cols, rows);
        let mut out = vec![None; rows];
        for (c, r) in col_to_row.into_iter().enumerate() {
            out[r] = Some(c);
        }
        Ok(out)
    }
}

// Shortest-augmenting-path assignment with dual potentials, O(rows²·cols),
// requires rows <= cols. Returns the assigned column per row.
fn assign_rows(cost: &[Vec<f64>], rows: usize, cols: usize) -> Vec<usize> {
    // col_owner[c] = row currently assigned to column c; `cols` is a virtual column
    let mut col_owner: Vec<Option<usize>> = vec![None; cols + 1];
    let mut row_potential = vec![0.0f64; rows];
    let mut col_potential = vec![0.0f64; cols + 1];

    for row in 0..rows {
        let mut current_col = cols;
        col_owner[cols] = Some(row);
        let mut min_reduced = vec![f64::INFINITY; cols + 1];
        let mut came_from: Vec<usize> = vec![cols; cols + 1];
        let mut visited = vec![false; cols + 1];

        while let Some(owner) = col_owner[current_col] {
            visited[current_col] = true;
            let mut delta = f64::INFINITY;
            let mut next_col = cols;
            for c in 0..cols {
                if visited[c] {
                    continue;
                }
                let reduced = cost[owner][c] - row_potential[owner] - col_potential[c];
                if reduced < min_reduced[c] {
                    min_reduced[c] = reduced;
                    came_from[c] = current_col;
                }
                if min_reduced[c] < delta {
                    delta = min_reduced[c];
                    next_col = c;
                }
            }
            for c in 0..=cols {
                if visited[c] {
                    if let Some(r) = col_owner[c] {
                        row_potential[r] += delta;
                    }
                    col_potential[c] -= delta;
                } else {
                    min_reduced[c] -= delta;
                }
            }
            current_col = next_col;
        }

        // augment along the alternating path
        while current_col != cols {
            let prev = came_from[current_col];
            col_owner[current_col] = col_owner[prev];
            current_col = prev;
        }
    }

    let mut assignment = vec![usize::MAX; rows];
    for c in 0..cols {
        if let Some(r) = col_owner[c] {
            assignment[r] = c;
        }
    }
    debug_assert!(assignment.iter().all(|&c| c != usize::MAX));
    assignment
}

/// Word- and frame-level speaker error rates after the optimal
/// hypothesis-to-reference mapping, plus the word-level confusion matrix
/// (hypothesis clusters by reference speakers).
#[derive(Debug, Clone, PartialEq)]
pub struct DiarisationMetrics {
    pub word_error_rate: f64,
    pub frame_error_rate: f64,
    pub confusion: Vec<Vec<usize>>,
    pub word_mapping: Vec<Option<usize>>,
}

pub fn diarisation_metrics(
    words: &[WordSegment],
    hyp: &[usize],
    reference: &[usize],
) -> Result<DiarisationMetrics, PipelineError> {
    if hyp.len() != words.len() || reference.len() != words.len() {
        return Err(PipelineError::InventoryMismatch {
            hyp: hyp.len(),
            reference: reference.len(),
            words: words.len(),
        });
    }
    if words.is_empty() {
        return Ok(DiarisationMetrics {
            word_error_rate: 0.0,
            frame_error_rate: 0.0,
            confusion: Vec::new(),
            word_mapping: Vec::new(),
        });
    }
    let num_hyp = hyp.iter().max().unwrap() + 1;
    let num_ref = reference.iter().max().unwrap() + 1;

    let mut word_confusion = vec![vec![0usize; num_ref]; num_hyp];
    let mut frame_confusion = vec![vec![0usize; num_ref]; num_hyp];
    for ((word, &h), &r) in words.iter().zip(hyp).zip(reference) {
        word_confusion[h][r] += 1;
        frame_confusion[h][r] += word.num_frames();
    }

    let rate = |confusion: &[Vec<usize>]| -> Result<(f64, Vec<Option<usize>>), PipelineError> {
        let cost: Vec<Vec<f64>> = confusion
            .iter()
            .map(|row| row.iter().map(|&c| -(c as f64)).collect())
            .collect();
        let mapping = hungarian_map(&cost)?;
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = mapping
            .iter()
            .enumerate()
            .filter_map(|(h, m)| m.map(|r| confusion[h][r]))
            .sum();
        Ok(((total - correct) as f64 / total as f64, mapping))
    };

    let (word_error_rate, word_mapping) = rate(&word_confusion)?;
    let (frame_error_rate, _) = rate(&frame_confusion)?;
    Ok(DiarisationMetrics { word_error_rate, frame_error_rate, confusion: word_confusion, word_mapping })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use itertools::Itertools;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(embedding: Vec<f64>) -> Segment {
        Segment { channel: 0, start: 0, end: 0, embedding }
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn ahc_identical_segments_form_one_cluster() {
        let segments = vec![seg(vec![1.0, 0.0]); 5];
        let c = ahc_cluster(&segments, 0.9).unwrap();
        assert_eq!(c.num_clusters, 1);
        assert!(c.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn ahc_orthogonal_segments_stay_apart() {
        let segments = vec![
            seg(vec![1.0, 0.0, 0.0]),
            seg(vec![0.0, 1.0, 0.0]),
            seg(vec![0.0, 0.0, 1.0]),
        ];
        let c = ahc_cluster(&segments, 0.5).unwrap();
        assert_eq!(c.num_clusters, 3);
    }

    /// Independent greedy reference: same linkage, recomputed from
    /// scratch each round over explicit member sets.
    fn greedy_reference(segments: &[Segment], threshold: f64) -> Vec<Vec<usize>> {
        let mut clusters: Vec<Vec<usize>> = (0..segments.len()).map(|i| vec![i]).collect();
        loop {
            if clusters.len() == 1 {
                break;
            }
            let mean = |members: &[usize]| -> Vec<f64> {
                let dim = segments[0].embedding.len();
                let mut s = vec![0.0; dim];
                for &m in members {
                    for (a, b) in s.iter_mut().zip(&segments[m].embedding) {
                        *a += b;
                    }
                }
                s
            };
            let mut best = (usize::MAX, usize::MAX, f64::NEG_INFINITY);
            for i in 0..clusters.len() {
                for j in (i + 1)..clusters.len() {
                    let sim = cosine(&mean(&clusters[i]), &mean(&clusters[j]));
                    if sim > best.2 {
                        best = (i, j, sim);
                    }
                }
            }
            if best.2 < threshold {
                break;
            }
            let moved = clusters.swap_remove(best.1);
            clusters[best.0].extend(moved);
        }
        let mut sets: Vec<Vec<usize>> = clusters
            .into_iter()
            .map(|mut c| {
                c.sort_unstable();
                c
            })
            .collect();
        sets.sort();
        sets
    }

    fn planted_segments(rng: &mut ChaCha8Rng) -> Vec<Segment> {
        // two planted clusters around orthogonal directions, tight enough
        // that intra-cos >= 0.9 and inter-cos <= 0.1
        let mut out = Vec::new();
        for i in 0..8 {
            let centre = if i < 4 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let mut v: Vec<f64> = centre.to_vec();
            v.iter_mut().for_each(|x| *x += 0.05 * (rng.random::<f64>() - 0.5));
            v.push(0.05 * (rng.random::<f64>() - 0.5));
            out.push(seg(unit(v)));
        }
        out
    }

    #[test]
    fn ahc_recovers_planted_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let segments = planted_segments(&mut rng);
        let c = ahc_cluster(&segments, 0.5).unwrap();
        assert_eq!(c.num_clusters, 2);
        for i in 0..4 {
            assert_eq!(c.labels[i], c.labels[0]);
            assert_eq!(c.labels[4 + i], c.labels[4]);
        }
        assert_ne!(c.labels[0], c.labels[4]);

        // exhaustive greedy trace gives the same partition
        let reference = greedy_reference(&segments, 0.5);
        let mut mine: Vec<Vec<usize>> = (0..c.num_clusters)
            .map(|l| (0..8).filter(|&i| c.labels[i] == l).collect())
            .collect();
        mine.sort();
        assert_eq!(mine, reference);
    }

    #[test]
    fn ahc_invariant_to_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let segments = planted_segments(&mut rng);
        let base = ahc_cluster(&segments, 0.5).unwrap();
        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let shuffled: Vec<Segment> = perm.iter().map(|&i| segments[i].clone()).collect();
        let permuted = ahc_cluster(&shuffled, 0.5).unwrap();
        // compare partitions through the permutation
        for a in 0..8 {
            for b in 0..8 {
                let together = base.labels[perm[a]] == base.labels[perm[b]];
                let together_shuffled = permuted.labels[a] == permuted.labels[b];
                assert_eq!(together, together_shuffled);
            }
        }
    }

    #[test]
    fn centroids_examples() {
        let segments = vec![seg(unit(vec![1.0, 1.0])), seg(vec![1.0, 0.0]), seg(vec![-1.0, 0.0])];
        let singleton = Clustering { labels: vec![0, 1, 2], num_clusters: 3 };
        let centroids = estimate_centroids(&segments, &singleton).unwrap();
        assert_eq!(centroids[1], vec![1.0, 0.0]);

        let antipodal = Clustering { labels: vec![0, 1, 1], num_clusters: 2 };
        assert!(matches!(
            estimate_centroids(&segments, &antipodal),
            Err(PipelineError::DegenerateCluster { cluster: 1 })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let planted = planted_segments(&mut rng);
        let clustering = ahc_cluster(&planted, 0.5).unwrap();
        let centroids = estimate_centroids(&planted, &clustering).unwrap();
        let mut dirs = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        dirs.retain(|d| centroids.iter().any(|c| cosine(c, d) > 0.99));
        assert_eq!(dirs.len(), 2, "centroids missed a planted direction");
    }

    #[test]
    fn transitions_examples() {
        let rows = estimate_transitions(&[vec![0, 0, 0, 0]], 2, 0.0);
        assert_eq!(rows[0], vec![1.0, 0.0]);
        assert_eq!(rows[1], vec![0.5, 0.5]); // zero-count row falls back to uniform

        let rows = estimate_transitions(&[vec![0, 1, 0, 1]], 2, 1.0);
        for row in rows {
            assert_eq!(row, vec![0.5, 0.5]);
        }

        // labels 1,1,2,2 (0-based 0,0,1,1): 0->0 once, 0->1 once, 1->1 once
        let rows = estimate_transitions(&[vec![0, 0, 1, 1]], 2, 0.0);
        assert_eq!(rows[0], vec![0.5, 0.5]);
        assert_eq!(rows[1], vec![0.0, 1.0]);
    }

    #[test]
    fn transitions_rows_always_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..50 {
            let m = rng.random_range(1..6);
            let runs: Vec<Vec<usize>> = (0..rng.random_range(0..4))
                .map(|_| (0..rng.random_range(0..20)).map(|_| rng.random_range(0..m)).collect())
                .collect();
            let alpha = rng.random::<f64>();
            for row in estimate_transitions(&runs, m, alpha) {
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
        let rows = cost.len();
        let cols = cost[0].len();
        let assigned = rows.min(cols);
        if rows <= cols {
            (0..cols)
                .permutations(assigned)
                .map(|perm| (0..rows).map(|r| cost[r][perm[r]]).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        } else {
            (0..rows)
                .permutations(assigned)
                .map(|perm| (0..cols).map(|c| cost[perm[c]][c]).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        }
    }

    fn assignment_cost(cost: &[Vec<f64>], mapping: &[Option<usize>]) -> f64 {
        mapping
            .iter()
            .enumerate()
            .filter_map(|(r, m)| m.map(|c| cost[r][c]))
            .sum()
    }

    #[test]
    fn hungarian_identity_and_permutation() {
        let identity_cost: Vec<Vec<f64>> =
            (0..4).map(|r| (0..4).map(|c| if r == c { 0.0 } else { 1.0 }).collect()).collect();
        let mapping = hungarian_map(&identity_cost).unwrap();
        assert_eq!(mapping, vec![Some(0), Some(1), Some(2), Some(3)]);

        // favour the permutation (2, 0, 3, 1)
        let target = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<f64>> = (0..4)
            .map(|r| (0..4).map(|c| if target[r] == c { 0.0 } else { 1.0 }).collect())
            .collect();
        let mapping = hungarian_map(&permuted).unwrap();
        assert_eq!(mapping, target.iter().map(|&c| Some(c)).collect::<Vec<_>>());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..40 {
            let cost: Vec<Vec<f64>> =
                (0..5).map(|_| (0..5).map(|_| rng.random::<f64>() * 10.0).collect()).collect();
            let mapping = hungarian_map(&cost).unwrap();
            assert_abs_diff_eq!(
                assignment_cost(&cost, &mapping),
                brute_force_min_cost(&cost),
                epsilon = 1e-9
            );
        }
        // rectangular, both orientations
        for (rows, cols) in [(4usize, 6usize), (6, 4)] {
            for _ in 0..20 {
                let cost: Vec<Vec<f64>> = (0..rows)
                    .map(|_| (0..cols).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect())
                    .collect();
                let mapping = hungarian_map(&cost).unwrap();
                let assigned = mapping.iter().filter(|m| m.is_some()).count();
                assert_eq!(assigned, rows.min(cols));
                // one-to-one
                let mut seen: Vec<usize> = mapping.iter().filter_map(|&m| m).collect();
                seen.sort_unstable();
                seen.dedup();
                assert_eq!(seen.len(), assigned);
                assert_abs_diff_eq!(
                    assignment_cost(&cost, &mapping),
                    brute_force_min_cost(&cost),
                    epsilon = 1e-9
                );
            }
        }
        assert!(hungarian_map(&[]).is_err());
        assert!(hungarian_map(&[vec![f64::NAN]]).is_err());
    }

    fn toy_words(n: usize) -> Vec<WordSegment> {
        (0..n).map(|i| WordSegment::new(i, 0, 4 * i, 4 * i + 3).unwrap()).collect()
    }

    #[test]
    fn metrics_examples() {
        let words = toy_words(10);
        let reference: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let metrics = diarisation_metrics(&words, &reference, &reference).unwrap();
        assert_eq!(metrics.word_error_rate, 0.0);
        assert_eq!(metrics.frame_error_rate, 0.0);

        // permuted hypothesis labels: mapping absorbs the permutation
        let permuted: Vec<usize> = reference.iter().map(|&r| (r + 1) % 3).collect();
        let metrics = diarisation_metrics(&words, &permuted, &reference).unwrap();
        assert_eq!(metrics.word_error_rate, 0.0);

        // flip 3 of 10 words after the optimal mapping
        let mut flipped = reference.clone();
        for w in [1, 4, 7] {
            flipped[w] = (flipped[w] + 1) % 3;
        }
        let metrics = diarisation_metrics(&words, &flipped, &reference).unwrap();
        assert_abs_diff_eq!(metrics.word_error_rate, 0.3, epsilon = 1e-12);

        assert!(diarisation_metrics(&words, &reference[..9], &reference).is_err());
    }

    #[test]
    fn metrics_invariant_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let words = toy_words(30);
        let reference: Vec<usize> = (0..30).map(|_| rng.random_range(0..4)).collect();
        let hyp: Vec<usize> = (0..30).map(|_| rng.random_range(0..4)).collect();
        let base = diarisation_metrics(&words, &hyp, &reference).unwrap();
        let relabel = [3usize, 0, 2, 1];
        let relabeled: Vec<usize> = hyp.iter().map(|&h| relabel[h]).collect();
        let swapped = diarisation_metrics(&words, &relabeled, &reference).unwrap();
        assert_abs_diff_eq!(base.word_error_rate, swapped.word_error_rate, epsilon = 1e-12);
        assert_abs_diff_eq!(base.frame_error_rate, swapped.frame_error_rate, epsilon = 1e-12);
    }
}
