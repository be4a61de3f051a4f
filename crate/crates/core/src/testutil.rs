//! Shared fixtures for unit tests.

use crate::cohort::Label;
use crate::features::{
    Attribute, ColumnRole, ConceptDef, ConceptOrigin, FeatureColumn, FeatureMatrix, RowKey,
    Schema, SparseRow,
};

/// Matrix over anonymous numeric columns; `None` = null cell.
pub(crate) fn matrix_from_dense(data: &[Vec<Option<f64>>], labels: &[f64]) -> FeatureMatrix {
    let n_cols = data[0].len();
    let concepts: Vec<ConceptDef> = (0..n_cols)
        .map(|i| ConceptDef {
            name: format!("f{i:03}"),
            kind: crate::claims::EventKind::Diagnosis,
            codes: vec![format!("f{i:03}")],
            origin: ConceptOrigin::DD,
        })
        .collect();
    // one date-difference column per concept so nulls are representable
    let columns: Vec<FeatureColumn> = (0..n_cols)
        .map(|i| FeatureColumn {
            name: format!("dd:f{i:03}:days_index_to_first"),
            role: ColumnRole::Concept {
                concept: i,
                attribute: Attribute::DaysIndexToFirst,
            },
        })
        .collect();
    let schema = Schema {
        concepts,
        columns,
        provenance_cs_ids: vec![1],
    };
    let rows: Vec<SparseRow> = data
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter_map(|(c, v)| v.map(|v| (c as u32, v)))
                .collect()
        })
        .collect();
    let keys = (0..data.len())
        .map(|i| RowKey {
            cs_id: 1,
            patient_id: format!("P{i:04}"),
            label: if labels[i] > 0.5 {
                Label::NashDx
            } else {
                Label::Control
            },
            nafl_in_lookback: false,
        })
        .collect();
    FeatureMatrix {
        schema,
        keys,
        rows,
        labels: labels.to_vec(),
    }
}

/// Random matrix whose labels correlate with column 0.
pub(crate) fn random_matrix(
    seed: u64,
    n_rows: usize,
    n_cols: usize,
    null_fraction: f64,
) -> FeatureMatrix {
    use rand::Rng;
    let mut rng = crate::seeding::seeded_rng(seed, 0xBEEF, 0);
    let data: Vec<Vec<Option<f64>>> = (0..n_rows)
        .map(|_| {
            (0..n_cols)
                .map(|_| {
                    if rng.gen::<f64>() < null_fraction {
                        None
                    } else {
                        Some(rng.gen_range(-4..=4) as f64)
                    }
                })
                .collect()
        })
        .collect();
    let labels: Vec<f64> = data
        .iter()
        .map(|row| {
            let base = row[0].unwrap_or(0.0) * 0.6;
            let noise: f64 = rng.gen_range(-1.5..1.5);
            if base + noise > 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    matrix_from_dense(&data, &labels)
}
