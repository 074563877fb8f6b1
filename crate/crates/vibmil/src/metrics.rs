//! Evaluation metrics: ranking AUC, macro F1, clustering agreement,
//! selection recall, k-means, and a KNN probe.
//!
//! Determinism contracts worth knowing:
//! - AUC uses midranks, so every intermediate is an exact multiple of 0.5
//!   and the result is bit-identical to explicit pair counting.
//! - The clustering score accumulates contingency counts and entropy terms
//!   in ascending (cluster-major, class-minor) order; an independent
//!   implementation that follows the same order reproduces it bit-for-bit.
//! - All argmax-style decisions break ties toward the lowest index.

use rand::Rng;

use crate::matrix::Matrix;
use crate::nn::top_k_indices;
use crate::seed;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mann-Whitney AUC from midranks. `None` when either class is absent.
pub fn binary_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len());
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks over tied runs: (lo + hi) / 2 with 1-based ranks is always an
    // exact multiple of 0.5 in f64.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = ((i + 1) + (j + 1)) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if positives[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Macro-averaged one-vs-rest AUC over the classes that have both positive
/// and negative examples. `scores` is `[n, n_labels]`. `None` when no class
/// is scoreable.
pub fn macro_auc(scores: &Matrix, labels: &[u8], n_labels: usize) -> Option<f64> {
    assert_eq!(scores.rows, labels.len());
    assert_eq!(scores.cols, n_labels);
    let mut sum = 0.0;
    let mut defined = 0usize;
    for c in 0..n_labels {
        let col: Vec<f64> = (0..scores.rows).map(|i| scores.get(i, c)).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
        if let Some(auc) = binary_auc(&col, &pos) {
            sum += auc;
            defined += 1;
        }
    }
    (defined > 0).then(|| sum / defined as f64)
}

/// Macro-averaged F1 over all `n_labels` classes. A class with no true and
/// no predicted members contributes zero.
pub fn macro_f1(predictions: &[u8], labels: &[u8], n_labels: usize) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    let mut sum = 0.0;
    for c in 0..n_labels as u8 {
        let tp = predictions
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == c && l == c)
            .count() as f64;
        let pred = predictions.iter().filter(|&&p| p == c).count() as f64;
        let act = labels.iter().filter(|&&l| l == c).count() as f64;
        let precision = if pred > 0.0 { tp / pred } else { 0.0 };
        let recall = if act > 0.0 { tp / act } else { 0.0 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    sum / n_labels as f64
}

/// Harmonic mean of homogeneity and completeness for a clustering against
/// ground-truth classes, in nats.
///
/// Degenerate conventions: zero class entropy gives homogeneity 1, zero
/// cluster entropy gives completeness 1, and the score is 0 when both terms
/// vanish.
pub fn v_score(classes: &[u8], clusters: &[usize]) -> f64 {
    assert_eq!(classes.len(), clusters.len());
    assert!(!classes.is_empty(), "v_score of empty assignment");
    let n = classes.len() as f64;
    let n_classes = *classes.iter().max().unwrap() as usize + 1;
    let n_clusters = *clusters.iter().max().unwrap() + 1;

    // Contingency table and marginals, indexed [cluster][class].
    let mut table = vec![vec![0usize; n_classes]; n_clusters];
    for (&c, &k) in classes.iter().zip(clusters) {
        table[k][c as usize] += 1;
    }
    let class_counts: Vec<usize> =
        (0..n_classes).map(|c| table.iter().map(|row| row[c]).sum()).collect();
    let cluster_counts: Vec<usize> = table.iter().map(|row| row.iter().sum()).collect();

    let entropy = |counts: &[usize]| -> f64 {
        let mut h = 0.0;
        for &cnt in counts {
            if cnt > 0 {
                let p = cnt as f64 / n;
                h -= p * p.ln();
            }
        }
        h
    };
    let h_class = entropy(&class_counts);
    let h_cluster = entropy(&cluster_counts);

    // Conditional entropies accumulated in ascending (cluster, class) order.
    let mut h_class_given_cluster = 0.0;
    let mut h_cluster_given_class = 0.0;
    for k in 0..n_clusters {
        for c in 0..n_classes {
            let cnt = table[k][c];
            if cnt > 0 {
                let joint = cnt as f64 / n;
                h_class_given_cluster -= joint * (cnt as f64 / cluster_counts[k] as f64).ln();
                h_cluster_given_class -= joint * (cnt as f64 / class_counts[c] as f64).ln();
            }
        }
    }

    let homogeneity = if h_class == 0.0 { 1.0 } else { 1.0 - h_class_given_cluster / h_class };
    let completeness =
        if h_cluster == 0.0 { 1.0 } else { 1.0 - h_cluster_given_class / h_cluster };
    if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    }
}

/// Whether top-k selection by the given scores keeps at least one positive
/// instance: 1.0 on a hit, 0.0 on a miss, `None` when the bag has no
/// positives. Averaged over bags this is the fraction of positive bags whose
/// distilled set still contains a positive.
pub fn top_k_recall(scores: &[f64], instance_labels: &[u8], k: usize) -> Option<f64> {
    assert_eq!(scores.len(), instance_labels.len());
    if !instance_labels.iter().any(|&l| l > 0) {
        return None;
    }
    let hit = top_k_indices(scores, k).into_iter().any(|i| instance_labels[i] > 0);
    Some(if hit { 1.0 } else { 0.0 })
}

/// Seeded k-means++ with a fixed 50 Lloyd iterations. Assignment ties break
/// toward the lower center index; an emptied center restarts at the point
/// farthest from its own center.
pub fn kmeans(points: &Matrix, k: usize, seed_value: u64) -> Vec<usize> {
    assert!(k > 0 && k <= points.rows, "k must be in 1..=n_points");
    let (n, d) = (points.rows, points.cols);
    let mut rng = seed::rng(seed_value);

    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding.
    let mut centers = Matrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut best_d2: Vec<f64> = (0..n).map(|i| dist2(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = best_d2.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in best_d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(points.row(chosen));
        for i in 0..n {
            let d2 = dist2(points.row(i), centers.row(c));
            if d2 < best_d2[i] {
                best_d2[i] = d2;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..50 {
        // Assign.
        for i in 0..n {
            let mut best = (0usize, f64::INFINITY);
            for c in 0..k {
                let d2 = dist2(points.row(i), centers.row(c));
                if d2 < best.1 {
                    best = (c, d2);
                }
            }
            assignment[i] = best.0;
        }
        // Update.
        let mut counts = vec![0usize; k];
        let mut sums = Matrix::zeros(k, d);
        for i in 0..n {
            counts[assignment[i]] += 1;
            for (s, &x) in sums.row_mut(assignment[i]).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (ctr, &s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *ctr = s / counts[c] as f64;
                }
            } else {
                // Restart an empty center at the worst-fit point.
                let far = argmax(
                    &(0..n)
                        .map(|i| dist2(points.row(i), centers.row(assignment[i])))
                        .collect::<Vec<_>>(),
                );
                centers.row_mut(c).copy_from_slice(points.row(far));
            }
        }
    }
    assignment
}

/// KNN classification accuracy of `test` against a labeled `train` set.
/// Neighbor ties break toward the lower training index; vote ties prefer
/// the candidate with the smaller mean distance, then the lower label.
pub fn knn_accuracy(
    train: &Matrix,
    train_labels: &[u8],
    test: &Matrix,
    test_labels: &[u8],
    k: usize,
) -> f64 {
    assert_eq!(train.rows, train_labels.len());
    assert_eq!(test.rows, test_labels.len());
    assert!(k > 0 && k <= train.rows, "k must be in 1..=n_train");
    let mut correct = 0usize;
    for t in 0..test.rows {
        let x = test.row(t);
        let mut order: Vec<usize> = (0..train.rows).collect();
        let d2: Vec<f64> = (0..train.rows)
            .map(|i| x.iter().zip(train.row(i)).map(|(&a, &b)| (a - b) * (a - b)).sum())
            .collect();
        order.sort_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(a.cmp(&b)));
        order.truncate(k);

        let mut votes: Vec<(usize, f64)> = vec![(0, 0.0); 256];
        for &i in &order {
            let l = train_labels[i] as usize;
            votes[l].0 += 1;
            votes[l].1 += d2[i].sqrt();
        }
        let mut winner = 0usize;
        for l in 1..votes.len() {
            let (wc, wd) = votes[winner];
            let (lc, ld) = votes[l];
            if lc > wc || (lc == wc && lc > 0 && ld / (lc as f64) < wd / (wc as f64)) {
                winner = l;
            }
        }
        correct += usize::from(winner as u8 == test_labels[t]);
    }
    correct as f64 / test.rows as f64
}

/// Mean of instance features: one bag embedding.
pub fn bag_embedding_mean(features: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; features.cols];
    for r in 0..features.rows {
        for (o, &x) in out.iter_mut().zip(features.row(r)) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= features.rows as f64;
    }
    out
}

/// Per-feature maximum over instances: one bag embedding.
pub fn bag_embedding_max(features: &Matrix) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; features.cols];
    for r in 0..features.rows {
        for (o, &x) in out.iter_mut().zip(features.row(r)) {
            if x > *o {
                *o = x;
            }
        }
    }
    out
}
