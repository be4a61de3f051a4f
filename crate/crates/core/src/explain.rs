//! Additive per-feature attributions for tree ensembles, plus the
//! attribute-to-concept aggregation used for reporting.
//!
//! The attribution is the path-dependent variant: the conditional
//! expectation of a tree given a feature subset is defined by cover-weighted
//! traversal (cover = training hessian mass per node, persisted in the
//! model), so no background data pass is needed at explanation time. Values
//! are in margin (log-odds) units; additivity only holds there.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::features::{ColumnRole, FeatureMatrix, Schema};
use crate::gbt::{Ensemble, Node, Tree};

/// Per-column attributions for one row; `base_value + phi.sum()` equals the
/// predicted margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub base_value: f64,
    pub phi: Vec<f64>,
}

/// Expected margin of the ensemble over its training distribution
/// (cover-weighted).
pub fn expected_margin(ensemble: &Ensemble) -> f64 {
    ensemble.base_score
        + ensemble
            .trees
            .iter()
            .map(|t| t.expected_value())
            .sum::<f64>()
}

/// Attributions for one dense row (NaN = null).
pub fn tree_shap(ensemble: &Ensemble, values: &[f64]) -> AttributionRow {
    let mut phi = vec![0.0f64; ensemble.n_features as usize];
    for tree in &ensemble.trees {
        shap_one_tree(tree, values, &mut phi);
    }
    AttributionRow {
        base_value: expected_margin(ensemble),
        phi,
    }
}

/// Attributions for every row of a matrix (schema-checked, parallel).
pub fn tree_shap_matrix(
    ensemble: &Ensemble,
    matrix: &FeatureMatrix,
) -> Result<Vec<AttributionRow>> {
    ensemble.check_schema(matrix)?;
    let base_value = expected_margin(ensemble);
    Ok((0..matrix.n_rows())
        .into_par_iter()
        .map(|i| {
            let values = matrix.dense_row(i);
            let mut phi = vec![0.0f64; ensemble.n_features as usize];
            for tree in &ensemble.trees {
                shap_one_tree(tree, &values, &mut phi);
            }
            AttributionRow { base_value, phi }
        })
        .collect())
}

#[derive(Debug, Clone, Default)]
struct PathItem {
    feature: Option<usize>,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

fn shap_one_tree(tree: &Tree, values: &[f64], phi: &mut [f64]) {
    let max_depth = tree.max_depth() + 2;
    let mut path = vec![PathItem::default(); max_depth * (max_depth + 1) / 2];
    recurse(tree, values, phi, 0, &mut path, 0, 1.0, 1.0, None);
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &Tree,
    values: &[f64],
    phi: &mut [f64],
    node_index: usize,
    unique_path: &mut [PathItem],
    unique_depth: usize,
    parent_zero_fraction: f64,
    parent_one_fraction: f64,
    parent_feature: Option<usize>,
) {
    extend_path(
        unique_path,
        unique_depth,
        parent_zero_fraction,
        parent_one_fraction,
        parent_feature,
    );
    let mut unique_depth = unique_depth;
    match &tree.nodes[node_index] {
        Node::Leaf { weight, .. } => {
            for path_index in 1..=unique_depth {
                let w = unwound_path_sum(unique_path, unique_depth, path_index);
                let item = &unique_path[path_index];
                let scale = w * (item.one_fraction - item.zero_fraction);
                phi[item.feature.expect("interior path item has a feature")] += scale * weight;
            }
        }
        Node::Branch {
            feature,
            threshold,
            default_left,
            left,
            right,
            cover,
            ..
        } => {
            let feature = *feature as usize;
            let (l, r) = (*left as usize, *right as usize);
            let v = values[feature];
            let go_left = if v.is_nan() { *default_left } else { v < *threshold };
            let (hot, cold) = if go_left { (l, r) } else { (r, l) };
            let node_cover = if *cover > 0.0 {
                *cover
            } else {
                tree.nodes[l].cover() + tree.nodes[r].cover()
            };
            let (hot_zero, cold_zero) = if node_cover > 0.0 {
                (
                    tree.nodes[hot].cover() / node_cover,
                    tree.nodes[cold].cover() / node_cover,
                )
            } else {
                (0.5, 0.5)
            };

            // a repeated feature on the path is undone before re-extending
            let mut incoming_zero = 1.0;
            let mut incoming_one = 1.0;
            if let Some(path_index) =
                (1..=unique_depth).find(|&i| unique_path[i].feature == Some(feature))
            {
                incoming_zero = unique_path[path_index].zero_fraction;
                incoming_one = unique_path[path_index].one_fraction;
                unwind_path(unique_path, unique_depth, path_index);
                unique_depth -= 1;
            }

            let (parent_path, child_path) = unique_path.split_at_mut(unique_depth + 1);
            child_path[..parent_path.len()].clone_from_slice(parent_path);
            recurse(
                tree,
                values,
                phi,
                hot,
                child_path,
                unique_depth + 1,
                hot_zero * incoming_zero,
                incoming_one,
                Some(feature),
            );
            child_path[..parent_path.len()].clone_from_slice(parent_path);
            recurse(
                tree,
                values,
                phi,
                cold,
                child_path,
                unique_depth + 1,
                cold_zero * incoming_zero,
                0.0,
                Some(feature),
            );
        }
    }
}

fn extend_path(
    unique_path: &mut [PathItem],
    unique_depth: usize,
    zero_fraction: f64,
    one_fraction: f64,
    feature: Option<usize>,
) {
    unique_path[unique_depth] = PathItem {
        feature,
        zero_fraction,
        one_fraction,
        pweight: if unique_depth == 0 { 1.0 } else { 0.0 },
    };
    if unique_depth == 0 {
        return;
    }
    let d = (unique_depth + 1) as f64;
    for i in (0..unique_depth).rev() {
        unique_path[i + 1].pweight += one_fraction * unique_path[i].pweight * (i + 1) as f64 / d;
        unique_path[i].pweight =
            zero_fraction * unique_path[i].pweight * (unique_depth - i) as f64 / d;
    }
}

fn unwind_path(unique_path: &mut [PathItem], unique_depth: usize, path_index: usize) {
    let one_fraction = unique_path[path_index].one_fraction;
    let zero_fraction = unique_path[path_index].zero_fraction;
    let mut next_one_portion = unique_path[unique_depth].pweight;
    let d = (unique_depth + 1) as f64;
    for i in (0..unique_depth).rev() {
        if one_fraction != 0.0 {
            let tmp = unique_path[i].pweight;
            unique_path[i].pweight = next_one_portion * d / ((i + 1) as f64 * one_fraction);
            next_one_portion =
                tmp - unique_path[i].pweight * zero_fraction * (unique_depth - i) as f64 / d;
        } else {
            unique_path[i].pweight =
                unique_path[i].pweight * d / (zero_fraction * (unique_depth - i) as f64);
        }
    }
    for i in path_index..unique_depth {
        unique_path[i].feature = unique_path[i + 1].feature;
        unique_path[i].zero_fraction = unique_path[i + 1].zero_fraction;
        unique_path[i].one_fraction = unique_path[i + 1].one_fraction;
    }
}

fn unwound_path_sum(unique_path: &[PathItem], unique_depth: usize, path_index: usize) -> f64 {
    let one_fraction = unique_path[path_index].one_fraction;
    let zero_fraction = unique_path[path_index].zero_fraction;
    let mut next_one_portion = unique_path[unique_depth].pweight;
    let mut total = 0.0;
    let d = (unique_depth + 1) as f64;
    if one_fraction != 0.0 {
        for i in (0..unique_depth).rev() {
            let tmp = next_one_portion / ((i + 1) as f64 * one_fraction);
            total += tmp;
            next_one_portion =
                unique_path[i].pweight - tmp * zero_fraction * (unique_depth - i) as f64;
        }
    } else {
        for i in (0..unique_depth).rev() {
            total += unique_path[i].pweight / (zero_fraction * (unique_depth - i) as f64);
        }
    }
    total * d
}

/// Mean-|phi| importance of one attribute column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeImportance {
    pub column: String,
    pub attribute: String,
    pub mean_abs_shap: f64,
    pub percent_of_total: f64,
}

/// A concept's cumulative importance across its attribute columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptImportance {
    pub concept: String,
    pub mean_abs_shap: f64,
    pub percent_of_total: f64,
    pub attributes: Vec<AttributeImportance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportanceReport {
    pub total_mean_abs_shap: f64,
    pub concepts: Vec<ConceptImportance>,
}

/// Aggregate attributions: mean |phi| per column, summed over each concept's
/// attribute columns, expressed as a percent of the grand total, sorted
/// descending. Demographics count as their own concepts.
pub fn aggregate_importance(
    attributions: &[AttributionRow],
    schema: &Schema,
) -> Result<FeatureImportanceReport> {
    if attributions.is_empty() {
        return Err(crate::error::Error::Eval(
            "importance aggregation needs at least one attribution row".into(),
        ));
    }
    let n_cols = schema.n_columns();
    let mut mean_abs = vec![0.0f64; n_cols];
    for row in attributions {
        for (col, &phi) in row.phi.iter().enumerate() {
            mean_abs[col] += phi.abs();
        }
    }
    for value in &mut mean_abs {
        *value /= attributions.len() as f64;
    }
    let total: f64 = mean_abs.iter().sum();
    let percent = |value: f64| {
        if total > 0.0 {
            100.0 * value / total
        } else {
            0.0
        }
    };

    let mut groups: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
    for (col, fc) in schema.columns.iter().enumerate() {
        let key = match fc.role {
            ColumnRole::Concept { concept, .. } => {
                let c = &schema.concepts[concept];
                format!("{}:{}", c.origin.as_str(), c.name)
            }
            ColumnRole::AgeAtIndex => "demo:age_at_index".to_string(),
            ColumnRole::SexIsFemale => "demo:sex_is_female".to_string(),
        };
        groups.entry(key).or_default().push(col);
    }

    let mut concepts: Vec<ConceptImportance> = groups
        .into_iter()
        .map(|(concept, cols)| {
            let sum: f64 = cols.iter().map(|&c| mean_abs[c]).sum();
            let attributes = cols
                .iter()
                .map(|&c| {
                    let fc = &schema.columns[c];
                    let attribute = match fc.role {
                        ColumnRole::Concept { attribute, .. } => attribute.as_str().to_string(),
                        ColumnRole::AgeAtIndex | ColumnRole::SexIsFemale => "value".to_string(),
                    };
                    AttributeImportance {
                        column: fc.name.clone(),
                        attribute,
                        mean_abs_shap: mean_abs[c],
                        percent_of_total: percent(mean_abs[c]),
                    }
                })
                .collect();
            ConceptImportance {
                concept,
                mean_abs_shap: sum,
                percent_of_total: percent(sum),
                attributes,
            }
        })
        .collect();
    concepts.sort_by(|a, b| {
        b.percent_of_total
            .partial_cmp(&a.percent_of_total)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.concept.cmp(&b.concept))
    });
    Ok(FeatureImportanceReport {
        total_mean_abs_shap: total,
        concepts,
    })
}

pub fn write_importance_csv<W: std::io::Write>(
    report: &FeatureImportanceReport,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "concept,attribute,mean_abs_shap,percent_of_total")?;
    for concept in &report.concepts {
        for attr in &concept.attributes {
            writeln!(
                w,
                "{},{},{},{}",
                concept.concept, attr.attribute, attr.mean_abs_shap, attr.percent_of_total
            )?;
        }
    }
    Ok(())
}
