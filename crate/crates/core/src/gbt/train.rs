//! Level-wise boosted-tree training with the logistic objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::average_precision;
use crate::features::FeatureMatrix;
use crate::gbt::split::{column_split_scan, SplitCandidate, SplitParams};
use crate::gbt::tree::{sigmoid, Ensemble, Node, Tree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_rounds: u32,
    pub learning_rate: f64,
    pub max_depth: u32,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Per-split penalty.
    pub gamma: f64,
    /// Minimum hessian sum per child.
    pub min_child_weight: f64,
    /// Initial margin (log-odds), not a probability.
    pub base_score: f64,
    /// Stop when validation AUPRC has not improved for this many rounds.
    pub early_stopping_rounds: Option<u32>,
    pub seed: u64,
    /// Reserved; stochastic boosting is not implemented and these must be 1.
    pub row_subsample: f64,
    pub col_subsample: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_rounds: 200,
            learning_rate: 0.1,
            max_depth: 5,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            base_score: 0.0,
            early_stopping_rounds: Some(20),
            seed: 0,
            row_subsample: 1.0,
            col_subsample: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config("learning_rate must lie in (0,1]".into()));
        }
        if self.lambda < 0.0 || self.gamma < 0.0 || self.min_child_weight < 0.0 {
            return Err(Error::Config(
                "lambda, gamma and min_child_weight must be non-negative".into(),
            ));
        }
        if self.max_depth == 0 {
            return Err(Error::Config("max_depth must be at least 1".into()));
        }
        if self.row_subsample != 1.0 || self.col_subsample != 1.0 {
            return Err(Error::Config(
                "row/column subsampling is reserved and must be 1.0".into(),
            ));
        }
        Ok(())
    }

    fn split_params(&self) -> SplitParams {
        SplitParams {
            lambda: self.lambda,
            gamma: self.gamma,
            min_child_weight: self.min_child_weight,
        }
    }
}

/// Per-round training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_logloss: Vec<f64>,
    pub val_auprc: Vec<f64>,
    /// Rounds kept in the returned ensemble.
    pub best_round: u32,
    pub best_val_auprc: Option<f64>,
}

/// Column-major training layout: presorted present values plus null lists.
struct ColumnLayout {
    sorted_present: Vec<Vec<(f64, u32)>>,
    nulls: Vec<Vec<u32>>,
    dense: Vec<Vec<f64>>, // column-major, NaN = null (for routing)
}

impl ColumnLayout {
    fn build(matrix: &FeatureMatrix) -> ColumnLayout {
        let n_rows = matrix.n_rows();
        let n_cols = matrix.n_columns();
        let mut dense: Vec<Vec<f64>> = (0..n_cols)
            .map(|c| {
                let default = matrix.schema.columns[c].sparse_default().unwrap_or(f64::NAN);
                vec![default; n_rows]
            })
            .collect();
        for (i, row) in matrix.rows.iter().enumerate() {
            for &(col, value) in row {
                dense[col as usize][i] = value;
            }
        }
        let built: Vec<(Vec<(f64, u32)>, Vec<u32>)> = dense
            .par_iter()
            .map(|col| {
                let mut present: Vec<(f64, u32)> = Vec::new();
                let mut nulls: Vec<u32> = Vec::new();
                for (i, &v) in col.iter().enumerate() {
                    if v.is_nan() {
                        nulls.push(i as u32);
                    } else {
                        present.push((v, i as u32));
                    }
                }
                present.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
                (present, nulls)
            })
            .collect();
        let mut sorted_present = Vec::with_capacity(n_cols);
        let mut nulls = Vec::with_capacity(n_cols);
        for (p, n) in built {
            sorted_present.push(p);
            nulls.push(n);
        }
        ColumnLayout {
            sorted_present,
            nulls,
            dense,
        }
    }
}

/// Train an ensemble; see [`train_with_history`] for the per-round trace.
pub fn train(
    matrix: &FeatureMatrix,
    config: &TrainConfig,
    validation: Option<&FeatureMatrix>,
) -> Result<Ensemble> {
    Ok(train_with_history(matrix, config, validation)?.0)
}

/// Train an ensemble, returning the per-round loss/metric history.
///
/// Deterministic: given the same matrix and config the serialized ensemble is
/// identical regardless of thread count.
pub fn train_with_history(
    matrix: &FeatureMatrix,
    config: &TrainConfig,
    validation: Option<&FeatureMatrix>,
) -> Result<(Ensemble, TrainHistory)> {
    config.validate()?;
    let n_rows = matrix.n_rows();
    let n_pos = matrix.labels.iter().filter(|&&y| y > 0.5).count();
    if n_pos == 0 || n_pos == n_rows {
        return Err(Error::Train(
            "training requires at least one positive and one negative row".into(),
        ));
    }
    let fingerprint = matrix.schema.fingerprint();
    if let Some(val) = validation {
        if val.schema.fingerprint() != fingerprint {
            return Err(Error::SchemaMismatch(
                "validation matrix schema differs from training schema".into(),
            ));
        }
    }

    let layout = ColumnLayout::build(matrix);
    let params = config.split_params();
    let mut margins = vec![config.base_score; n_rows];
    let mut trees: Vec<Tree> = Vec::new();

    let val_dense: Option<Vec<Vec<f64>>> = validation.map(|val| {
        (0..val.n_rows())
            .into_par_iter()
            .map(|i| val.dense_row(i))
            .collect()
    });
    let val_labels: Option<Vec<bool>> =
        validation.map(|val| val.labels.iter().map(|&y| y > 0.5).collect());
    let mut val_margins: Vec<f64> = validation
        .map(|val| vec![config.base_score; val.n_rows()])
        .unwrap_or_default();

    let mut history = TrainHistory {
        train_logloss: Vec::new(),
        val_auprc: Vec::new(),
        best_round: 0,
        best_val_auprc: None,
    };
    let mut rounds_since_best = 0u32;

    for _round in 0..config.n_rounds {
        let mut grad = vec![0.0f64; n_rows];
        let mut hess = vec![0.0f64; n_rows];
        for i in 0..n_rows {
            let p = sigmoid(margins[i]);
            grad[i] = p - matrix.labels[i];
            hess[i] = p * (1.0 - p);
        }

        let (tree, leaf_of_row) = build_tree(&layout, &grad, &hess, config, &params);
        for i in 0..n_rows {
            if let Node::Leaf { weight, .. } = tree.nodes[leaf_of_row[i] as usize] {
                margins[i] += weight;
            }
        }
        history.train_logloss.push(logloss(&margins, &matrix.labels));

        if let (Some(dense), Some(labels)) = (&val_dense, &val_labels) {
            val_margins
                .par_iter_mut()
                .zip(dense.par_iter())
                .for_each(|(m, row)| *m += tree.predict_row(row));
            let auprc = average_precision(&val_margins, labels)?;
            history.val_auprc.push(auprc);
        }
        trees.push(tree);

        // early stopping on validation AUPRC
        let round_index = trees.len() as u32;
        if let Some(auprc) = history.val_auprc.last().copied() {
            let improved = match history.best_val_auprc {
                None => true,
                Some(best) => auprc > best,
            };
            if improved {
                history.best_val_auprc = Some(auprc);
                history.best_round = round_index;
                rounds_since_best = 0;
            } else {
                rounds_since_best += 1;
                if let Some(patience) = config.early_stopping_rounds {
                    if rounds_since_best >= patience {
                        break;
                    }
                }
            }
        } else {
            history.best_round = round_index;
        }
    }

    // truncate to the best round when early stopping was in force; otherwise
    // the reported metric describes the full returned model
    if config.early_stopping_rounds.is_some() && history.best_val_auprc.is_some() {
        trees.truncate(history.best_round as usize);
    } else {
        history.best_round = trees.len() as u32;
        history.best_val_auprc = history.val_auprc.last().copied();
    }

    // provenance from the actual rows trained on
    let mut train_cs_ids: Vec<u32> = matrix.keys.iter().map(|k| k.cs_id).collect();
    train_cs_ids.sort_unstable();
    train_cs_ids.dedup();
    if train_cs_ids.is_empty() {
        train_cs_ids = matrix.schema.provenance_cs_ids.clone();
    }
    let ensemble = Ensemble {
        schema_fingerprint: fingerprint,
        config: config.clone(),
        base_score: config.base_score,
        n_features: matrix.n_columns() as u32,
        trees,
        train_cs_ids,
    };
    Ok((ensemble, history))
}

fn logloss(margins: &[f64], labels: &[f64]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(&m, &y)| {
            // ln(1 + exp(-z)) with z = margin for y=1, -margin for y=0
            let z = if y > 0.5 { m } else { -m };
            if z > 0.0 {
                (-z).exp().ln_1p()
            } else {
                -z + z.exp().ln_1p()
            }
        })
        .sum();
    total / margins.len() as f64
}

struct FrontierNode {
    arena: u32,
    g: f64,
    h: f64,
}

/// Grow one tree level-wise; returns the tree and each row's leaf index.
fn build_tree(
    layout: &ColumnLayout,
    grad: &[f64],
    hess: &[f64],
    config: &TrainConfig,
    params: &SplitParams,
) -> (Tree, Vec<u32>) {
    let n_rows = grad.len();
    let n_cols = layout.dense.len();

    let g_total: f64 = grad.iter().sum();
    let h_total: f64 = hess.iter().sum();

    let mut nodes: Vec<Node> = vec![Node::Leaf { weight: 0.0, cover: 0.0 }];
    let mut stats: Vec<(f64, f64)> = vec![(g_total, h_total)];
    let mut node_of_row: Vec<u32> = vec![0; n_rows];
    let mut frontier = vec![FrontierNode {
        arena: 0,
        g: g_total,
        h: h_total,
    }];

    for _depth in 0..config.max_depth {
        if frontier.is_empty() {
            break;
        }
        // frontier slot per arena node
        let mut slot_of_arena = vec![u32::MAX; nodes.len()];
        for (slot, node) in frontier.iter().enumerate() {
            slot_of_arena[node.arena as usize] = slot as u32;
        }
        let slot_of_row: Vec<u32> = node_of_row
            .iter()
            .map(|&a| slot_of_arena[a as usize])
            .collect();
        let node_totals: Vec<(f64, f64)> = frontier.iter().map(|n| (n.g, n.h)).collect();

        // best candidate per (column, slot), reduced across columns by
        // (gain desc, column asc); the per-column scan already applies the
        // (threshold asc, Left first) tie rules
        let per_slot: Vec<Option<(u32, SplitCandidate)>> = (0..n_cols)
            .into_par_iter()
            .map(|col| {
                let found = column_split_scan(
                    &layout.sorted_present[col],
                    &layout.nulls[col],
                    &slot_of_row,
                    &node_totals,
                    grad,
                    hess,
                    params,
                    frontier.len(),
                );
                found
                    .into_iter()
                    .map(|c| c.map(|cand| (col as u32, cand)))
                    .collect::<Vec<_>>()
            })
            .reduce(
                || vec![None; frontier.len()],
                |mut acc, other| {
                    for (slot, candidate) in other.into_iter().enumerate() {
                        acc[slot] = match (acc[slot].take(), candidate) {
                            (None, c) => c,
                            (c, None) => c,
                            (Some(a), Some(b)) => {
                                if b.1.gain > a.1.gain || (b.1.gain == a.1.gain && b.0 < a.0) {
                                    Some(b)
                                } else {
                                    Some(a)
                                }
                            }
                        };
                    }
                    acc
                },
            );

        // apply splits
        struct Applied {
            feature: u32,
            threshold: f64,
            default_left: bool,
            left: u32,
            right: u32,
        }
        let mut applied: Vec<Option<Applied>> = Vec::with_capacity(frontier.len());
        let mut any_split = false;
        for (slot, node) in frontier.iter().enumerate() {
            match &per_slot[slot] {
                Some((col, cand)) if cand.gain > 0.0 => {
                    let left = nodes.len() as u32;
                    let right = left + 1;
                    nodes.push(Node::Leaf { weight: 0.0, cover: 0.0 });
                    nodes.push(Node::Leaf { weight: 0.0, cover: 0.0 });
                    stats.push((0.0, 0.0));
                    stats.push((0.0, 0.0));
                    nodes[node.arena as usize] = Node::Branch {
                        feature: *col,
                        threshold: cand.threshold,
                        default_left: cand.default_left,
                        left,
                        right,
                        gain: cand.gain,
                        cover: node.h,
                    };
                    applied.push(Some(Applied {
                        feature: *col,
                        threshold: cand.threshold,
                        default_left: cand.default_left,
                        left,
                        right,
                    }));
                    any_split = true;
                }
                _ => applied.push(None),
            }
        }
        if !any_split {
            break;
        }

        // reroute rows and accumulate child stats in row order
        for row in 0..n_rows {
            let slot = slot_of_row[row];
            if slot == u32::MAX {
                continue;
            }
            if let Some(split) = &applied[slot as usize] {
                let v = layout.dense[split.feature as usize][row];
                let go_left = if v.is_nan() { split.default_left } else { v < split.threshold };
                let child = if go_left { split.left } else { split.right };
                node_of_row[row] = child;
                let s = &mut stats[child as usize];
                s.0 += grad[row];
                s.1 += hess[row];
            }
        }

        frontier = applied
            .iter()
            .flatten()
            .flat_map(|split| [split.left, split.right])
            .map(|arena| FrontierNode {
                arena,
                g: stats[arena as usize].0,
                h: stats[arena as usize].1,
            })
            .collect();
    }

    // finalize leaves
    for (i, node) in nodes.iter_mut().enumerate() {
        if let Node::Leaf { weight, cover } = node {
            let (g, h) = stats[i];
            let denom = h + config.lambda;
            *weight = if denom > 0.0 {
                -config.learning_rate * g / denom
            } else {
                0.0
            };
            *cover = h;
        }
    }
    (Tree { nodes }, node_of_row)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) use crate::testutil::{matrix_from_dense, random_matrix};

    fn cfg(n_rounds: u32) -> TrainConfig {
        TrainConfig {
            n_rounds,
            learning_rate: 1.0,
            max_depth: 1,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 0.0,
            base_score: 0.0,
            early_stopping_rounds: None,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_rounds_gives_constant_model() {
        let m = matrix_from_dense(
            &[vec![Some(0.0)], vec![Some(1.0)]],
            &[0.0, 1.0],
        );
        let ensemble = train(&m, &cfg(0), None).unwrap();
        assert!(ensemble.trees.is_empty());
        let p = ensemble.predict_proba(&m).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hand_computed_leaf_weights() {
        // one round, depth 1, perfectly separating binary feature,
        // 4 positives / 4 negatives, base 0, lambda 1, eta 1:
        // each side has G = -/+2, H = 1, so weights are +/- 1.0
        let data: Vec<Vec<Option<f64>>> = (0..8)
            .map(|i| vec![Some(if i < 4 { 1.0 } else { 0.0 })])
            .collect();
        let labels: Vec<f64> = (0..8).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
        let m = matrix_from_dense(&data, &labels);
        let ensemble = train(&m, &cfg(1), None).unwrap();
        assert_eq!(ensemble.trees.len(), 1);
        let tree = &ensemble.trees[0];
        match &tree.nodes[0] {
            Node::Branch { threshold, left, right, .. } => {
                assert_eq!(*threshold, 0.5);
                let (l, r) = (*left as usize, *right as usize);
                match (&tree.nodes[l], &tree.nodes[r]) {
                    (Node::Leaf { weight: wl, .. }, Node::Leaf { weight: wr, .. }) => {
                        assert!((wl - (-1.0)).abs() < 1e-12, "left {wl}");
                        assert!((wr - 1.0).abs() < 1e-12, "right {wr}");
                    }
                    other => panic!("expected two leaves, got {other:?}"),
                }
            }
            other => panic!("expected branch root, got {other:?}"),
        }
    }

    #[test]
    fn all_one_class_errors() {
        let m = matrix_from_dense(&[vec![Some(0.0)], vec![Some(1.0)]], &[1.0, 1.0]);
        assert!(train(&m, &cfg(1), None).is_err());
    }

    #[test]
    fn validation_schema_mismatch_errors() {
        let m = random_matrix(1, 30, 3, 0.2);
        let other = random_matrix(2, 30, 4, 0.2);
        assert!(train(&m, &cfg(1), Some(&other)).is_err());
    }

    #[test]
    fn loss_descends_with_gamma_zero() {
        for seed in 0..5 {
            let m = random_matrix(seed, 120, 5, 0.2);
            let config = TrainConfig {
                n_rounds: 30,
                learning_rate: 0.3,
                max_depth: 3,
                lambda: 1.0,
                gamma: 0.0,
                min_child_weight: 0.0,
                base_score: 0.0,
                early_stopping_rounds: None,
                ..TrainConfig::default()
            };
            let (_, history) = train_with_history(&m, &config, None).unwrap();
            for pair in history.train_logloss.windows(2) {
                assert!(
                    pair[1] <= pair[0] + 1e-12,
                    "seed {seed}: loss rose from {} to {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let m = random_matrix(3, 80, 6, 0.25);
        let config = TrainConfig {
            n_rounds: 10,
            max_depth: 4,
            early_stopping_rounds: None,
            ..TrainConfig::default()
        };
        let a = train(&m, &config, None).unwrap().to_json().unwrap();
        let b = train(&m, &config, None).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monotone_transform_preserves_predictions() {
        let m = random_matrix(4, 100, 4, 0.2);
        // strictly increasing transform of column 1
        let mut transformed = m.clone();
        for row in &mut transformed.rows {
            for cell in row.iter_mut() {
                if cell.0 == 1 {
                    let v = cell.1;
                    cell.1 = v * v * v + 2.0 * v;
                }
            }
        }
        let config = TrainConfig {
            n_rounds: 8,
            max_depth: 3,
            early_stopping_rounds: None,
            ..TrainConfig::default()
        };
        let e1 = train(&m, &config, None).unwrap();
        let e2 = train(&transformed, &config, None).unwrap();
        let p1 = e1.predict_margin(&m).unwrap();
        let p2 = e2.predict_margin(&transformed).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn null_and_zero_are_distinct() {
        // nulls carry the positive class; zeros the negative. replacing
        // nulls with zero must change the learned tree.
        let data: Vec<Vec<Option<f64>>> = vec![
            vec![None, Some(5.0)],
            vec![None, Some(4.0)],
            vec![None, Some(6.0)],
            vec![Some(0.0), Some(5.0)],
            vec![Some(0.0), Some(4.0)],
            vec![Some(0.0), Some(6.0)],
            vec![Some(5.0), Some(1.0)],
            vec![Some(10.0), Some(9.0)],
        ];
        let labels = vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let m = matrix_from_dense(&data, &labels);
        let zeroed: Vec<Vec<Option<f64>>> = data
            .iter()
            .map(|row| {
                let mut row = row.clone();
                if row[0].is_none() {
                    row[0] = Some(0.0);
                }
                row
            })
            .collect();
        let mz = matrix_from_dense(&zeroed, &labels);
        let config = cfg(1);
        let e1 = train(&m, &config, None).unwrap();
        let e2 = train(&mz, &config, None).unwrap();
        assert_ne!(
            e1.to_json().unwrap().replace(&e1.schema_fingerprint, ""),
            e2.to_json().unwrap().replace(&e2.schema_fingerprint, "")
        );
    }

    #[test]
    fn early_stopping_truncates_to_best_round() {
        let train_m = random_matrix(5, 150, 5, 0.2);
        let val_m = random_matrix(6, 60, 5, 0.2);
        let config = TrainConfig {
            n_rounds: 60,
            learning_rate: 0.5,
            max_depth: 4,
            early_stopping_rounds: Some(5),
            ..TrainConfig::default()
        };
        let (ensemble, history) = train_with_history(&train_m, &config, Some(&val_m)).unwrap();
        assert_eq!(ensemble.trees.len() as u32, history.best_round);
        assert!(history.best_round >= 1);
        let best = history.best_val_auprc.unwrap();
        assert!((history.val_auprc[history.best_round as usize - 1] - best).abs() < 1e-15);
    }
}
