//! Hyperparameter grid search and recursive feature elimination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::gbt::train::{train_with_history, TrainConfig};

/// The stand-in default grid: max_depth {3,5,7} x learning rate
/// {0.05,0.1,0.3} x lambda {1,10}, 200 rounds with 20-round early stopping.
pub fn default_grid() -> Vec<TrainConfig> {
    let mut grid = Vec::new();
    for &max_depth in &[3u32, 5, 7] {
        for &learning_rate in &[0.05f64, 0.1, 0.3] {
            for &lambda in &[1.0f64, 10.0] {
                grid.push(TrainConfig {
                    n_rounds: 200,
                    learning_rate,
                    max_depth,
                    lambda,
                    early_stopping_rounds: Some(20),
                    ..TrainConfig::default()
                });
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchCell {
    pub config: TrainConfig,
    pub val_auprc: Option<f64>,
    pub rounds_used: Option<u32>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_index: usize,
    pub table: Vec<GridSearchCell>,
}

impl GridSearchResult {
    pub fn best_config(&self) -> &TrainConfig {
        &self.table[self.best_index].config
    }

    /// Rounds the winning cell actually used; callers retrain at this count
    /// without a validation set.
    pub fn best_rounds(&self) -> u32 {
        self.table[self.best_index]
            .rounds_used
            .expect("winning cell trained")
    }
}

/// Train every config, score on the validation matrix, and pick the best
/// AUPRC. Ties break toward fewer rounds, then listed order. Failed cells
/// are recorded in the table and skipped for selection.
pub fn grid_search(
    matrix_train: &FeatureMatrix,
    matrix_val: &FeatureMatrix,
    grid: &[TrainConfig],
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    let mut table = Vec::with_capacity(grid.len());
    for config in grid {
        match train_with_history(matrix_train, config, Some(matrix_val)) {
            Ok((ensemble, history)) => table.push(GridSearchCell {
                config: config.clone(),
                val_auprc: history.best_val_auprc,
                rounds_used: Some(ensemble.trees.len() as u32),
                error: None,
            }),
            Err(err) => table.push(GridSearchCell {
                config: config.clone(),
                val_auprc: None,
                rounds_used: None,
                error: Some(err.to_string()),
            }),
        }
    }
    let mut best_index: Option<usize> = None;
    for (i, cell) in table.iter().enumerate() {
        let auprc = match cell.val_auprc {
            Some(v) => v,
            None => continue,
        };
        let better = match best_index {
            None => true,
            Some(j) => {
                let incumbent = table[j].val_auprc.unwrap();
                auprc > incumbent
                    || (auprc == incumbent && cell.rounds_used < table[j].rounds_used)
            }
        };
        if better {
            best_index = Some(i);
        }
    }
    let best_index = best_index
        .ok_or_else(|| Error::Train("every grid cell failed to train".into()))?;
    Ok(GridSearchResult { best_index, table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeStep {
    pub n_features: usize,
    pub val_auprc: f64,
    pub rounds_used: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeResult {
    /// Column indices (into the original schema) of the winning iteration.
    pub selected: Vec<usize>,
    pub trajectory: Vec<RfeStep>,
}

/// Recursive feature elimination: train, rank columns by total split gain,
/// drop the lowest fraction, repeat down to `min_features`; return the
/// column set of the iteration with the best validation AUPRC (ties prefer
/// fewer features).
pub fn rfe(
    matrix_train: &FeatureMatrix,
    matrix_val: &FeatureMatrix,
    config: &TrainConfig,
    drop_fraction: f64,
    min_features: usize,
) -> Result<RfeResult> {
    if !(drop_fraction > 0.0 && drop_fraction < 1.0) {
        return Err(Error::Config("drop_fraction must lie in (0,1)".into()));
    }
    if min_features == 0 {
        return Err(Error::Config("min_features must be positive".into()));
    }

    let mut active: Vec<usize> = (0..matrix_train.n_columns()).collect();
    let mut trajectory: Vec<RfeStep> = Vec::new();
    let mut candidates: Vec<(f64, Vec<usize>)> = Vec::new();

    loop {
        let train_view = matrix_train.select_columns(&active)?;
        let val_view = matrix_val.select_columns(&active)?;
        let (ensemble, history) = train_with_history(&train_view, config, Some(&val_view))?;
        let auprc = history
            .best_val_auprc
            .ok_or_else(|| Error::Train("feature elimination needs a validation set".into()))?;
        trajectory.push(RfeStep {
            n_features: active.len(),
            val_auprc: auprc,
            rounds_used: ensemble.trees.len() as u32,
        });
        candidates.push((auprc, active.clone()));

        if active.len() <= min_features {
            break;
        }
        let mut drop_count = ((active.len() as f64) * drop_fraction).floor() as usize;
        drop_count = drop_count.max(1).min(active.len() - min_features);

        // rank restricted columns by total gain, ascending; ties drop the
        // later column first
        let gains = ensemble.total_gain_per_feature();
        let mut order: Vec<usize> = (0..active.len()).collect();
        order.sort_by(|&a, &b| {
            gains[a]
                .partial_cmp(&gains[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.cmp(&a))
        });
        let dropped: std::collections::BTreeSet<usize> =
            order.into_iter().take(drop_count).collect();
        active = active
            .iter()
            .enumerate()
            .filter(|(i, _)| !dropped.contains(i))
            .map(|(_, &col)| col)
            .collect();
    }

    // best AUPRC; ties prefer fewer features
    let selected = candidates
        .iter()
        .max_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.1.len().cmp(&a.1.len()))
        })
        .map(|(_, cols)| cols.clone())
        .expect("at least one iteration");
    Ok(RfeResult {
        selected,
        trajectory,
    })
}
