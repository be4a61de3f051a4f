//! Sparse (concept x attribute) feature engineering over lookback windows.
//!
//! Concepts come from two origins: knowledge-driven (KD) multi-code sets
//! loaded from config, and data-driven (DD) singleton codes selected by the
//! largest absolute prevalence difference between positive and control rows
//! on training cross-sections only. Each concept yields a claim frequency
//! and three date-difference attributes relative to the index date.
//!
//! Missing-value semantics: a frequency cell is never null (absent means 0);
//! date-difference cells are null exactly when the concept frequency is 0.
//! The distinction is preserved end to end because the tree learner routes
//! nulls through per-node default directions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::claims::{EventKind, PatientRecord, Population};
use crate::cohort::{Label, LabeledCrossSection};
use crate::error::{Error, Result};
use crate::rcs::CrossSection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConceptOrigin {
    KD,
    DD,
}

impl ConceptOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            ConceptOrigin::KD => "kd",
            ConceptOrigin::DD => "dd",
        }
    }
}

/// A named set of codes of one claim kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptDef {
    pub name: String,
    pub kind: EventKind,
    pub codes: Vec<String>,
    pub origin: ConceptOrigin,
}

impl ConceptDef {
    pub fn matches(&self, kind: EventKind, code: &str) -> bool {
        self.kind == kind && self.codes.iter().any(|c| c == code)
    }
}

/// Per-concept attribute columns, in schema order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    Frequency,
    DaysIndexToFirst,
    DaysIndexToLast,
    DaysFirstToLast,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::Frequency,
        Attribute::DaysIndexToFirst,
        Attribute::DaysIndexToLast,
        Attribute::DaysFirstToLast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Frequency => "frequency",
            Attribute::DaysIndexToFirst => "days_index_to_first",
            Attribute::DaysIndexToLast => "days_index_to_last",
            Attribute::DaysFirstToLast => "days_first_to_last",
        }
    }
}

/// What a column holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnRole {
    Concept { concept: usize, attribute: Attribute },
    AgeAtIndex,
    SexIsFemale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub role: ColumnRole,
}

impl FeatureColumn {
    /// Cells absent from a sparse row reconstruct to this default:
    /// 0 for frequencies, null for date differences. Demographic cells are
    /// always stored explicitly.
    pub fn sparse_default(&self) -> Option<f64> {
        match self.role {
            ColumnRole::Concept {
                attribute: Attribute::Frequency,
                ..
            } => Some(0.0),
            ColumnRole::Concept { .. } => None,
            ColumnRole::AgeAtIndex | ColumnRole::SexIsFemale => None,
        }
    }
}

/// Ordered column schema with the cross-section ids it was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub concepts: Vec<ConceptDef>,
    pub columns: Vec<FeatureColumn>,
    /// Cross-section ids consumed while deriving the schema (leakage audit).
    pub provenance_cs_ids: Vec<u32>,
}

impl Schema {
    /// Build the column schema: concepts ordered by (origin, name), each
    /// expanded to its four attributes, demographics appended last.
    pub fn new(
        kd: Vec<ConceptDef>,
        dd: Vec<ConceptDef>,
        provenance_cs_ids: Vec<u32>,
    ) -> Result<Self> {
        let mut concepts: Vec<ConceptDef> = kd.into_iter().chain(dd).collect();
        for c in &concepts {
            if c.codes.is_empty() {
                return Err(Error::Config(format!("concept `{}` has no codes", c.name)));
            }
        }
        concepts.sort_by(|a, b| (a.origin, &a.name).cmp(&(b.origin, &b.name)));
        let mut seen = std::collections::BTreeSet::new();
        for c in &concepts {
            if !seen.insert((c.origin, c.name.clone())) {
                return Err(Error::Config(format!(
                    "duplicate concept ({}, `{}`)",
                    c.origin.as_str(),
                    c.name
                )));
            }
        }
        let mut columns = Vec::with_capacity(concepts.len() * 4 + 2);
        for (i, concept) in concepts.iter().enumerate() {
            for attribute in Attribute::ALL {
                columns.push(FeatureColumn {
                    name: format!(
                        "{}:{}:{}",
                        concept.origin.as_str(),
                        concept.name,
                        attribute.as_str()
                    ),
                    role: ColumnRole::Concept {
                        concept: i,
                        attribute,
                    },
                });
            }
        }
        columns.push(FeatureColumn {
            name: "demo:age_at_index".into(),
            role: ColumnRole::AgeAtIndex,
        });
        columns.push(FeatureColumn {
            name: "demo:sex_is_female".into(),
            role: ColumnRole::SexIsFemale,
        });
        Ok(Schema {
            concepts,
            columns,
            provenance_cs_ids,
        })
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    /// Validate internal references; used after deserializing.
    pub fn validate(&self) -> Result<()> {
        for col in &self.columns {
            if let ColumnRole::Concept { concept, .. } = col.role {
                if concept >= self.concepts.len() {
                    return Err(Error::SchemaMismatch(format!(
                        "column `{}` references unknown concept {concept}",
                        col.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Content hash binding ensembles to the schema they were trained on.
    pub fn fingerprint(&self) -> String {
        let mut text = String::new();
        for col in &self.columns {
            let _ = writeln!(text, "{}", col.name);
            if let ColumnRole::Concept { concept, .. } = col.role {
                let c = &self.concepts[concept];
                let _ = writeln!(text, "  {:?} {:?}", c.kind, c.codes);
            }
        }
        let digest = Sha256::digest(text.as_bytes());
        let mut out = String::with_capacity(16);
        for byte in &digest[..8] {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }

    /// Restrict the schema to a subset of columns (recursive feature
    /// elimination). Concepts are kept; only the column list shrinks.
    pub fn select_columns(&self, keep: &[usize]) -> Result<Schema> {
        let mut columns = Vec::with_capacity(keep.len());
        for &i in keep {
            let col = self
                .columns
                .get(i)
                .ok_or_else(|| Error::SchemaMismatch(format!("column index {i} out of range")))?;
            columns.push(col.clone());
        }
        Ok(Schema {
            concepts: self.concepts.clone(),
            columns,
            provenance_cs_ids: self.provenance_cs_ids.clone(),
        })
    }
}

/// A sparse row: explicitly stored (column, value) cells, ascending by column.
pub type SparseRow = Vec<(u32, f64)>;

/// Identity and label of one matrix row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowKey {
    pub cs_id: u32,
    pub patient_id: String,
    pub label: Label,
    pub nafl_in_lookback: bool,
}

/// Sparse feature matrix with explicit null-vs-zero semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub schema: Schema,
    pub keys: Vec<RowKey>,
    pub rows: Vec<SparseRow>,
    /// 1.0 for positive rows, 0.0 for controls.
    pub labels: Vec<f64>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_columns(&self) -> usize {
        self.schema.n_columns()
    }

    pub fn stored_cells(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// Cell value; `None` is a null (missing) cell.
    pub fn cell(&self, row: usize, col: usize) -> Option<f64> {
        match self.rows[row].binary_search_by_key(&(col as u32), |&(c, _)| c) {
            Ok(i) => Some(self.rows[row][i].1),
            Err(_) => self.schema.columns[col].sparse_default(),
        }
    }

    /// Dense row with NaN for null cells.
    pub fn dense_row(&self, row: usize) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .schema
            .columns
            .iter()
            .map(|c| c.sparse_default().unwrap_or(f64::NAN))
            .collect();
        for &(col, value) in &self.rows[row] {
            out[col as usize] = value;
        }
        out
    }

    /// Restrict to a subset of columns, re-indexing sparse cells.
    pub fn select_columns(&self, keep: &[usize]) -> Result<FeatureMatrix> {
        let schema = self.schema.select_columns(keep)?;
        let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
        for (new, &old) in keep.iter().enumerate() {
            remap.insert(old as u32, new as u32);
        }
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let mut out: SparseRow = row
                    .iter()
                    .filter_map(|&(c, v)| remap.get(&c).map(|&n| (n, v)))
                    .collect();
                out.sort_unstable_by_key(|&(c, _)| c);
                out
            })
            .collect();
        Ok(FeatureMatrix {
            schema,
            keys: self.keys.clone(),
            rows,
            labels: self.labels.clone(),
        })
    }
}

/// Reverse index from (kind, code) to the concepts containing it.
struct ConceptIndex<'a> {
    schema: &'a Schema,
    by_code: BTreeMap<(EventKind, &'a str), Vec<usize>>,
    /// concept index -> first column of its attribute block, if present
    concept_cols: Vec<[Option<u32>; 4]>,
}

impl<'a> ConceptIndex<'a> {
    fn new(schema: &'a Schema) -> Self {
        let mut by_code: BTreeMap<(EventKind, &'a str), Vec<usize>> = BTreeMap::new();
        for (i, concept) in schema.concepts.iter().enumerate() {
            for code in &concept.codes {
                by_code
                    .entry((concept.kind, code.as_str()))
                    .or_default()
                    .push(i);
            }
        }
        let mut concept_cols = vec![[None; 4]; schema.concepts.len()];
        for (col, fc) in schema.columns.iter().enumerate() {
            if let ColumnRole::Concept { concept, attribute } = fc.role {
                let slot = Attribute::ALL.iter().position(|a| *a == attribute).unwrap();
                concept_cols[concept][slot] = Some(col as u32);
            }
        }
        ConceptIndex {
            schema,
            by_code,
            concept_cols,
        }
    }
}

/// Extract one sparse row for an eligible (patient, cross-section) pair.
pub fn extract_row(patient: &PatientRecord, cs: &CrossSection, schema: &Schema) -> SparseRow {
    let index = ConceptIndex::new(schema);
    extract_row_indexed(patient, cs, &index)
}

fn extract_row_indexed(
    patient: &PatientRecord,
    cs: &CrossSection,
    index: &ConceptIndex<'_>,
) -> SparseRow {
    let schema = index.schema;
    // per touched concept: (count, first date, last date); events are date-sorted
    let mut agg: Vec<(u32, chrono::NaiveDate, chrono::NaiveDate)> = Vec::new();
    let mut touched: BTreeMap<usize, usize> = BTreeMap::new();
    for event in patient.events() {
        if !cs.contains_in_lookback(event.date) {
            continue;
        }
        if let Some(concepts) = index.by_code.get(&(event.kind, event.code.as_str())) {
            for &ci in concepts {
                match touched.get(&ci) {
                    Some(&slot) => {
                        let entry = &mut agg[slot];
                        entry.0 += 1;
                        entry.2 = event.date;
                    }
                    None => {
                        touched.insert(ci, agg.len());
                        agg.push((1, event.date, event.date));
                    }
                }
            }
        }
    }

    let mut row: SparseRow = Vec::with_capacity(touched.len() * 4 + 2);
    for (&ci, &slot) in &touched {
        let (count, first, last) = agg[slot];
        let values = [
            count as f64,
            (cs.index_date - first).num_days() as f64,
            (cs.index_date - last).num_days() as f64,
            (last - first).num_days() as f64,
        ];
        for (attr_slot, value) in values.into_iter().enumerate() {
            if let Some(col) = index.concept_cols[ci][attr_slot] {
                row.push((col, value));
            }
        }
    }
    for (col, fc) in schema.columns.iter().enumerate() {
        match fc.role {
            ColumnRole::AgeAtIndex => {
                row.push((col as u32, patient.age_at(cs.index_date) as f64));
            }
            ColumnRole::SexIsFemale => {
                let female = patient.sex == crate::claims::Sex::F;
                row.push((col as u32, if female { 1.0 } else { 0.0 }));
            }
            ColumnRole::Concept { .. } => {}
        }
    }
    row.sort_unstable_by_key(|&(c, _)| c);
    row
}

/// One scored code from data-driven selection.
#[derive(Debug, Clone, PartialEq)]
pub struct DdScore {
    pub kind: EventKind,
    pub code: String,
    pub prevalence_positive: f64,
    pub prevalence_control: f64,
    pub score: f64,
}

/// Full DD ranking: per kind, descending absolute prevalence difference,
/// ties broken by code ascending.
pub fn dd_rank(
    train_rows: &[LabeledCrossSection],
    population: &Population,
    cross_sections: &[CrossSection],
) -> Result<Vec<DdScore>> {
    let cs_by_id: BTreeMap<u32, &CrossSection> =
        cross_sections.iter().map(|cs| (cs.id, cs)).collect();
    let n_pos = train_rows.iter().filter(|r| r.label.is_positive()).count();
    let n_ctl = train_rows.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::Config(
            "data-driven selection undefined without positive rows".into(),
        ));
    }

    let per_row: Vec<Vec<((EventKind, String), bool)>> = train_rows
        .par_iter()
        .map(|row| {
            let mut seen: Vec<((EventKind, String), bool)> = Vec::new();
            let patient = match population.get(&row.patient_id) {
                Some(p) => p,
                None => return seen,
            };
            let cs = match cs_by_id.get(&row.cs_id) {
                Some(cs) => *cs,
                None => return seen,
            };
            let positive = row.label.is_positive();
            let mut present: std::collections::BTreeSet<(EventKind, &str)> =
                std::collections::BTreeSet::new();
            for event in patient.events() {
                if cs.contains_in_lookback(event.date) {
                    present.insert((event.kind, event.code.as_str()));
                }
            }
            seen.extend(
                present
                    .into_iter()
                    .map(|(k, c)| ((k, c.to_string()), positive)),
            );
            seen
        })
        .collect();

    let mut counts: BTreeMap<(EventKind, String), (u32, u32)> = BTreeMap::new();
    for row in per_row {
        for (key, positive) in row {
            let entry = counts.entry(key).or_insert((0, 0));
            if positive {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
        }
    }

    let mut scored: Vec<DdScore> = counts
        .into_iter()
        .map(|((kind, code), (pos, ctl))| {
            let prevalence_positive = pos as f64 / n_pos as f64;
            let prevalence_control = if n_ctl == 0 {
                0.0
            } else {
                ctl as f64 / n_ctl as f64
            };
            DdScore {
                kind,
                code,
                prevalence_positive,
                prevalence_control,
                score: (prevalence_positive - prevalence_control).abs(),
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        a.kind
            .cmp(&b.kind)
            .then(
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then(a.code.cmp(&b.code))
    });
    Ok(scored)
}

/// Data-driven code selection on training rows only: the top `k` codes per
/// kind become singleton DD concepts.
pub fn dd_select(
    train_rows: &[LabeledCrossSection],
    population: &Population,
    cross_sections: &[CrossSection],
    top_k_per_kind: usize,
) -> Result<Vec<ConceptDef>> {
    let ranked = dd_rank(train_rows, population, cross_sections)?;
    let mut out = Vec::new();
    for kind in EventKind::ALL {
        out.extend(
            ranked
                .iter()
                .filter(|r| r.kind == kind)
                .take(top_k_per_kind)
                .map(|r| ConceptDef {
                    name: r.code.clone(),
                    kind: r.kind,
                    codes: vec![r.code.clone()],
                    origin: ConceptOrigin::DD,
                }),
        );
    }
    Ok(out)
}

/// Build a matrix from labeled rows under a fixed schema.
///
/// Rows are ordered by (cs_id, patient_id); extraction is parallel per row
/// but the output is order-deterministic.
pub fn build_matrix(
    rows: &[LabeledCrossSection],
    schema: &Schema,
    population: &Population,
    cross_sections: &[CrossSection],
) -> Result<FeatureMatrix> {
    schema.validate()?;
    let cs_by_id: BTreeMap<u32, &CrossSection> =
        cross_sections.iter().map(|cs| (cs.id, cs)).collect();
    let mut ordered: Vec<&LabeledCrossSection> = rows.iter().collect();
    ordered.sort_by(|a, b| (a.cs_id, &a.patient_id).cmp(&(b.cs_id, &b.patient_id)));

    let index = ConceptIndex::new(schema);
    let extracted: Result<Vec<(RowKey, SparseRow, f64)>> = ordered
        .par_iter()
        .map(|row| {
            let patient = population.get(&row.patient_id).ok_or_else(|| {
                Error::Config(format!(
                    "row references unknown patient `{}`",
                    row.patient_id
                ))
            })?;
            let cs = cs_by_id.get(&row.cs_id).ok_or_else(|| {
                Error::Config(format!("row references unknown cross-section {}", row.cs_id))
            })?;
            let sparse = extract_row_indexed(patient, cs, &index);
            let key = RowKey {
                cs_id: row.cs_id,
                patient_id: row.patient_id.clone(),
                label: row.label,
                nafl_in_lookback: row.nafl_in_lookback,
            };
            let label = if row.label.is_positive() { 1.0 } else { 0.0 };
            Ok((key, sparse, label))
        })
        .collect();

    let mut keys = Vec::with_capacity(ordered.len());
    let mut sparse_rows = Vec::with_capacity(ordered.len());
    let mut labels = Vec::with_capacity(ordered.len());
    for (key, row, label) in extracted? {
        keys.push(key);
        sparse_rows.push(row);
        labels.push(label);
    }
    Ok(FeatureMatrix {
        schema: schema.clone(),
        keys,
        rows: sparse_rows,
        labels,
    })
}

pub const MATRIX_CELLS_HEADER: &str = "row,col,value";
pub const MATRIX_ROWS_HEADER: &str = "row,cs_id,patient_id,label,nafl_in_lookback";
/// Reserved value token for an explicit null cell.
pub const NULL_TOKEN: &str = "null";

/// Sparse triplet CSV of the stored cells.
pub fn write_matrix_cells_csv<W: std::io::Write>(
    matrix: &FeatureMatrix,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "{MATRIX_CELLS_HEADER}")?;
    for (i, row) in matrix.rows.iter().enumerate() {
        for &(col, value) in row {
            writeln!(w, "{i},{col},{value}")?;
        }
    }
    Ok(())
}

/// Row identity and label CSV.
pub fn write_matrix_rows_csv<W: std::io::Write>(
    matrix: &FeatureMatrix,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "{MATRIX_ROWS_HEADER}")?;
    for (i, key) in matrix.keys.iter().enumerate() {
        writeln!(
            w,
            "{i},{},{},{},{}",
            key.cs_id,
            key.patient_id,
            key.label.as_str(),
            key.nafl_in_lookback
        )?;
    }
    Ok(())
}

/// Rebuild a matrix from its persisted parts. A `null` value token marks an
/// explicit null cell, which is only legal where the column default is
/// already null (it is then simply not stored).
pub fn read_matrix(schema: Schema, cells_text: &str, rows_text: &str) -> Result<FeatureMatrix> {
    schema.validate()?;
    let mut keys: Vec<RowKey> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    for (i, line) in rows_text.lines().enumerate() {
        if i == 0 {
            if line != MATRIX_ROWS_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{MATRIX_ROWS_HEADER}`"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: i as u64 + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        let row_index: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("malformed row index `{}`", fields[0])))?;
        if row_index != keys.len() {
            return Err(err(format!(
                "row indices must be dense and ordered; got {row_index}"
            )));
        }
        let label = Label::parse(fields[3])
            .ok_or_else(|| err(format!("unknown label `{}`", fields[3])))?;
        keys.push(RowKey {
            cs_id: fields[1]
                .parse()
                .map_err(|_| err(format!("malformed cs_id `{}`", fields[1])))?,
            patient_id: fields[2].to_string(),
            label,
            nafl_in_lookback: fields[4]
                .parse()
                .map_err(|_| err(format!("malformed flag `{}`", fields[4])))?,
        });
        labels.push(if label.is_positive() { 1.0 } else { 0.0 });
    }

    let mut rows: Vec<SparseRow> = vec![Vec::new(); keys.len()];
    for (i, line) in cells_text.lines().enumerate() {
        if i == 0 {
            if line != MATRIX_CELLS_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{MATRIX_CELLS_HEADER}`"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: i as u64 + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, got {}", fields.len())));
        }
        let row: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("malformed row `{}`", fields[0])))?;
        let col: u32 = fields[1]
            .parse()
            .map_err(|_| err(format!("malformed col `{}`", fields[1])))?;
        if row >= rows.len() || col as usize >= schema.n_columns() {
            return Err(err(format!("cell ({row},{col}) out of range")));
        }
        if fields[2] == NULL_TOKEN {
            let column = &schema.columns[col as usize];
            if column.sparse_default().is_some() {
                return Err(err(format!(
                    "column `{}` cannot hold an explicit null",
                    column.name
                )));
            }
            continue; // null is the default for this column
        }
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| err(format!("malformed value `{}`", fields[2])))?;
        rows[row].push((col, value));
    }
    for row in &mut rows {
        row.sort_unstable_by_key(|&(c, _)| c);
    }
    Ok(FeatureMatrix {
        schema,
        keys,
        rows,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{ClaimEvent, Sex, Source};
    use chrono::NaiveDate;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn dx(date: &str, code: &str) -> ClaimEvent {
        ClaimEvent {
            date: d(date),
            source: Source::Dx,
            kind: EventKind::Diagnosis,
            code: code.into(),
        }
    }

    fn cs() -> CrossSection {
        CrossSection {
            id: 1,
            index_date: d("2017-10-01"),
            lookback_start: d("2015-10-01"),
            outcome_end: d("2018-04-01"),
        }
    }

    fn kd_concept(name: &str, codes: &[&str]) -> ConceptDef {
        ConceptDef {
            name: name.into(),
            kind: EventKind::Diagnosis,
            codes: codes.iter().map(|s| s.to_string()).collect(),
            origin: ConceptOrigin::KD,
        }
    }

    fn schema_with(concepts: Vec<ConceptDef>) -> Schema {
        Schema::new(concepts, vec![], vec![1]).unwrap()
    }

    #[test]
    fn column_order_and_demographics() {
        let schema = Schema::new(
            vec![kd_concept("zeta", &["Z"]), kd_concept("alpha", &["A"])],
            vec![ConceptDef {
                name: "E11".into(),
                kind: EventKind::Diagnosis,
                codes: vec!["E11".into()],
                origin: ConceptOrigin::DD,
            }],
            vec![1, 2],
        )
        .unwrap();
        let names: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names[0], "kd:alpha:frequency");
        assert_eq!(names[4], "kd:zeta:frequency");
        assert_eq!(names[8], "dd:E11:frequency");
        assert_eq!(names[names.len() - 2], "demo:age_at_index");
        assert_eq!(names[names.len() - 1], "demo:sex_is_female");
        assert_eq!(schema.n_columns(), 3 * 4 + 2);
    }

    #[test]
    fn extract_row_attributes() {
        let schema = schema_with(vec![kd_concept("thing", &["X"])]);
        // matches at index-100d and index-10d
        let patient = PatientRecord::new(
            "P".into(),
            1970,
            Sex::F,
            vec![dx("2017-06-23", "X"), dx("2017-09-21", "X")],
        );
        let row = extract_row(&patient, &cs(), &schema);
        let matrix = FeatureMatrix {
            schema: schema.clone(),
            keys: vec![],
            rows: vec![row],
            labels: vec![0.0],
        };
        assert_eq!(matrix.cell(0, 0), Some(2.0)); // frequency
        assert_eq!(matrix.cell(0, 1), Some(100.0)); // index -> first
        assert_eq!(matrix.cell(0, 2), Some(10.0)); // index -> last
        assert_eq!(matrix.cell(0, 3), Some(90.0)); // first -> last
        assert_eq!(matrix.cell(0, 4), Some(47.0)); // age
        assert_eq!(matrix.cell(0, 5), Some(1.0)); // female
    }

    #[test]
    fn no_match_gives_zero_frequency_null_dates() {
        let schema = schema_with(vec![kd_concept("thing", &["X"])]);
        let patient = PatientRecord::new("P".into(), 1970, Sex::M, vec![dx("2016-01-01", "Y")]);
        let row = extract_row(&patient, &cs(), &schema);
        let matrix = FeatureMatrix {
            schema,
            keys: vec![],
            rows: vec![row],
            labels: vec![0.0],
        };
        assert_eq!(matrix.cell(0, 0), Some(0.0));
        assert_eq!(matrix.cell(0, 1), None);
        assert_eq!(matrix.cell(0, 2), None);
        assert_eq!(matrix.cell(0, 3), None);
        assert_eq!(matrix.cell(0, 5), Some(0.0));
    }

    #[test]
    fn single_match_at_index_is_all_zero_days() {
        let schema = schema_with(vec![kd_concept("thing", &["X"])]);
        let patient = PatientRecord::new("P".into(), 1970, Sex::F, vec![dx("2017-10-01", "X")]);
        let row = extract_row(&patient, &cs(), &schema);
        assert!(row.contains(&(0, 1.0)));
        assert!(row.contains(&(1, 0.0)));
        assert!(row.contains(&(2, 0.0)));
        assert!(row.contains(&(3, 0.0)));
    }

    #[test]
    fn dense_row_matches_cells() {
        let schema = schema_with(vec![kd_concept("thing", &["X"])]);
        let patient = PatientRecord::new("P".into(), 1970, Sex::F, vec![dx("2017-09-21", "X")]);
        let row = extract_row(&patient, &cs(), &schema);
        let matrix = FeatureMatrix {
            schema,
            keys: vec![],
            rows: vec![row],
            labels: vec![0.0],
        };
        let dense = matrix.dense_row(0);
        for col in 0..matrix.n_columns() {
            match matrix.cell(0, col) {
                Some(v) => assert_eq!(dense[col], v),
                None => assert!(dense[col].is_nan()),
            }
        }
    }

    fn labeled(patient_id: &str, cs_id: u32, label: Label) -> LabeledCrossSection {
        LabeledCrossSection {
            patient_id: patient_id.into(),
            cs_id,
            label,
            nafl_in_lookback: false,
        }
    }

    #[test]
    fn dd_select_extremes() {
        // code A in all positives and no controls; code B equal in both
        let mut records = Vec::new();
        for i in 0..4 {
            records.push(PatientRecord::new(
                format!("N{i}"),
                1970,
                Sex::F,
                vec![dx("2016-06-01", "A"), dx("2016-06-01", "B")],
            ));
        }
        for i in 0..4 {
            records.push(PatientRecord::new(
                format!("C{i}"),
                1970,
                Sex::F,
                vec![dx("2016-06-01", "B")],
            ));
        }
        let pop = Population::new(records);
        let rows: Vec<LabeledCrossSection> = (0..4)
            .map(|i| labeled(&format!("N{i}"), 1, Label::NashDx))
            .chain((0..4).map(|i| labeled(&format!("C{i}"), 1, Label::Control)))
            .collect();
        let ranked = dd_rank(&rows, &pop, &[cs()]).unwrap();
        assert_eq!(ranked[0].code, "A");
        assert!((ranked[0].score - 1.0).abs() < 1e-12);
        assert_eq!(ranked[1].code, "B");
        assert!(ranked[1].score.abs() < 1e-12);

        let selected = dd_select(&rows, &pop, &[cs()], 1).unwrap();
        assert_eq!(selected.len(), 1);
        assert_eq!(selected[0].name, "A");
        assert_eq!(selected[0].origin, ConceptOrigin::DD);
    }

    #[test]
    fn dd_select_requires_positives() {
        let pop = Population::new(vec![PatientRecord::new(
            "C0".into(),
            1970,
            Sex::F,
            vec![dx("2016-06-01", "B")],
        )]);
        let rows = vec![labeled("C0", 1, Label::Control)];
        assert!(dd_select(&rows, &pop, &[cs()], 5).is_err());
    }

    #[test]
    fn dd_rank_matches_brute_force_recount() {
        use rand::Rng;
        let mut rng = crate::seeding::seeded_rng(99, 1, 1);
        let codes: Vec<String> = (0..20).map(|i| format!("C{i:02}")).collect();
        let mut records = Vec::new();
        let mut rows = Vec::new();
        for i in 0..60 {
            let mut events = Vec::new();
            for code in &codes {
                if rng.gen::<f64>() < 0.3 {
                    events.push(dx("2016-06-01", code));
                }
            }
            let id = format!("P{i:02}");
            records.push(PatientRecord::new(id.clone(), 1970, Sex::F, events));
            let label = if rng.gen::<f64>() < 0.3 {
                Label::NashDx
            } else {
                Label::Control
            };
            rows.push(labeled(&id, 1, label));
        }
        let pop = Population::new(records);
        let ranked = dd_rank(&rows, &pop, &[cs()]).unwrap();

        // independent recount
        let n_pos = rows.iter().filter(|r| r.label.is_positive()).count() as f64;
        let n_ctl = rows.len() as f64 - n_pos;
        for item in &ranked {
            let mut pos = 0.0;
            let mut ctl = 0.0;
            for row in &rows {
                let patient = pop.get(&row.patient_id).unwrap();
                let has = patient
                    .events()
                    .iter()
                    .any(|e| e.code == item.code && cs().contains_in_lookback(e.date));
                if has {
                    if row.label.is_positive() {
                        pos += 1.0;
                    } else {
                        ctl += 1.0;
                    }
                }
            }
            let expect = (pos / n_pos - ctl / n_ctl).abs();
            assert!(
                (item.score - expect).abs() < 1e-12,
                "score mismatch for {}",
                item.code
            );
        }
        // descending within kind, ties by code
        for pair in ranked.windows(2) {
            assert!(
                pair[0].score > pair[1].score
                    || (pair[0].score == pair[1].score && pair[0].code < pair[1].code)
            );
        }
    }

    #[test]
    fn build_matrix_deterministic_under_shuffle() {
        let mut records = Vec::new();
        let mut rows = Vec::new();
        for i in 0..10 {
            let id = format!("P{i}");
            records.push(PatientRecord::new(
                id.clone(),
                1970,
                Sex::F,
                vec![dx("2016-06-01", "A")],
            ));
            rows.push(labeled(
                &id,
                1,
                if i % 3 == 0 { Label::NashDx } else { Label::Control },
            ));
        }
        let pop = Population::new(records);
        let schema = schema_with(vec![kd_concept("a", &["A"])]);
        let m1 = build_matrix(&rows, &schema, &pop, &[cs()]).unwrap();
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(0, 3);
        let m2 = build_matrix(&shuffled, &schema, &pop, &[cs()]).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn empty_rows_build_empty_matrix() {
        let schema = schema_with(vec![kd_concept("a", &["A"])]);
        let pop = Population::default();
        let m = build_matrix(&[], &schema, &pop, &[cs()]).unwrap();
        assert_eq!(m.n_rows(), 0);
        assert_eq!(m.n_columns(), 6);
    }

    #[test]
    fn select_columns_reindexes() {
        let schema = schema_with(vec![kd_concept("a", &["A"]), kd_concept("b", &["B"])]);
        let patient = PatientRecord::new(
            "P".into(),
            1970,
            Sex::F,
            vec![dx("2017-09-21", "A"), dx("2017-09-01", "B")],
        );
        let row = extract_row(&patient, &cs(), &schema);
        let matrix = FeatureMatrix {
            schema,
            keys: vec![RowKey {
                cs_id: 1,
                patient_id: "P".into(),
                label: Label::Control,
                nafl_in_lookback: false,
            }],
            rows: vec![row],
            labels: vec![0.0],
        };
        // keep b:frequency and age
        let keep = vec![4usize, 8];
        let sub = matrix.select_columns(&keep).unwrap();
        assert_eq!(sub.n_columns(), 2);
        assert_eq!(sub.cell(0, 0), matrix.cell(0, 4));
        assert_eq!(sub.cell(0, 1), matrix.cell(0, 8));
    }

    #[test]
    fn matrix_persistence_round_trip() {
        let schema = schema_with(vec![kd_concept("a", &["A"]), kd_concept("b", &["B"])]);
        let patient = PatientRecord::new(
            "P".into(),
            1970,
            Sex::F,
            vec![dx("2017-09-21", "A")],
        );
        let pop = Population::new(vec![patient]);
        let rows = vec![labeled("P", 1, Label::NashDx)];
        let matrix = build_matrix(&rows, &schema, &pop, &[cs()]).unwrap();

        let mut cells = Vec::new();
        let mut row_meta = Vec::new();
        write_matrix_cells_csv(&matrix, &mut cells).unwrap();
        write_matrix_rows_csv(&matrix, &mut row_meta).unwrap();
        let back = read_matrix(
            schema,
            std::str::from_utf8(&cells).unwrap(),
            std::str::from_utf8(&row_meta).unwrap(),
        )
        .unwrap();
        assert_eq!(matrix, back);
    }

    #[test]
    fn explicit_null_token_accepted_for_date_columns_only() {
        let schema = schema_with(vec![kd_concept("a", &["A"])]);
        let rows_text = "row,cs_id,patient_id,label,nafl_in_lookback\n0,1,P,Control,false\n";
        // col 1 is a date-difference column: explicit null is redundant but legal
        let ok = read_matrix(schema.clone(), "row,col,value\n0,1,null\n", rows_text);
        assert!(ok.is_ok());
        assert_eq!(ok.unwrap().cell(0, 1), None);
        // col 0 is a frequency column: explicit null violates the invariant
        let bad = read_matrix(schema, "row,col,value\n0,0,null\n", rows_text);
        assert!(bad.is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let s1 = schema_with(vec![kd_concept("a", &["A"])]);
        let s2 = schema_with(vec![kd_concept("a", &["A", "A2"])]);
        let s3 = schema_with(vec![kd_concept("a", &["A"])]);
        assert_ne!(s1.fingerprint(), s2.fingerprint());
        assert_eq!(s1.fingerprint(), s3.fingerprint());
    }
}
