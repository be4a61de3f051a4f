//! Train/validate regime orchestration with structural leakage guards.
//!
//! The validity of the whole exercise hinges on feature schemas and
//! hyperparameters never touching held-out cross-sections, so the guard is a
//! type: schema construction only accepts [`TrainingRows`], which can only be
//! built by proving every row's cross-section id is in the allowed training
//! set. Every derived artifact carries the cross-section ids it consumed and
//! the audit re-checks them against the regime's test ids before evaluation.

use serde::{Deserialize, Serialize};

use crate::claims::Population;
use crate::cohort::{CodeSetConfig, CohortBuild, CrossSectionStats, LabeledCrossSection};
use crate::error::{Error, Result};
use crate::evaluate::{
    benchmark_rule, evaluate_predictions, pair_with_model, Evaluation, RankedPredictions,
};
use crate::explain::{aggregate_importance, tree_shap_matrix, FeatureImportanceReport};
use crate::features::{build_matrix, dd_select, ConceptDef, FeatureMatrix, Schema};
use crate::gbt::{train_with_history, Ensemble, TrainConfig};
use crate::rcs::{CrossSection, SplitAssignment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    Holdout,
    Prospective,
    Stability,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 3] = [
        RegimeKind::Holdout,
        RegimeKind::Prospective,
        RegimeKind::Stability,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegimeKind::Holdout => "holdout",
            RegimeKind::Prospective => "prospective",
            RegimeKind::Stability => "stability",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "holdout" => Some(RegimeKind::Holdout),
            "prospective" => Some(RegimeKind::Prospective),
            "stability" => Some(RegimeKind::Stability),
            _ => None,
        }
    }
}

/// A regime's train and test cross-section ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    pub kind: RegimeKind,
    pub train_ids: Vec<u32>,
    /// (role, cs id); stability carries both the holdout and scoring sets.
    pub test_sets: Vec<(String, u32)>,
}

impl Regime {
    pub fn from_split(kind: RegimeKind, split: &SplitAssignment) -> Regime {
        match kind {
            RegimeKind::Holdout => Regime {
                kind,
                train_ids: split.train_ids.clone(),
                test_sets: vec![("holdout".into(), split.holdout_id)],
            },
            RegimeKind::Prospective => Regime {
                kind,
                train_ids: (1..=split.holdout_id).collect(),
                test_sets: vec![("scoring".into(), split.scoring_id)],
            },
            RegimeKind::Stability => Regime {
                kind,
                train_ids: split.train_ids.clone(),
                test_sets: vec![
                    ("holdout".into(), split.holdout_id),
                    ("scoring".into(), split.scoring_id),
                ],
            },
        }
    }

    pub fn test_ids(&self) -> Vec<u32> {
        self.test_sets.iter().map(|(_, id)| *id).collect()
    }
}

/// Rows proven to come only from an allowed cross-section set.
///
/// Constructing one is the leakage gate: any row outside the allowed ids is
/// a hard error, not a silent filter.
#[derive(Debug, Clone)]
pub struct TrainingRows {
    rows: Vec<LabeledCrossSection>,
    cs_ids: Vec<u32>,
}

impl TrainingRows {
    pub fn new(rows: Vec<LabeledCrossSection>, allowed_cs_ids: &[u32]) -> Result<TrainingRows> {
        for row in &rows {
            if !allowed_cs_ids.contains(&row.cs_id) {
                return Err(Error::Leakage(format!(
                    "row (patient `{}`, cross-section {}) is outside the allowed training \
                     cross-sections {allowed_cs_ids:?}",
                    row.patient_id, row.cs_id
                )));
            }
        }
        let mut cs_ids: Vec<u32> = rows.iter().map(|r| r.cs_id).collect();
        cs_ids.sort_unstable();
        cs_ids.dedup();
        Ok(TrainingRows { rows, cs_ids })
    }

    /// Gather the rows of `cohort` belonging to `cs_ids`.
    pub fn gather(cohort: &CohortBuild, cs_ids: &[u32]) -> Result<TrainingRows> {
        let rows: Vec<LabeledCrossSection> = cohort
            .rows
            .iter()
            .filter(|r| cs_ids.contains(&r.cs_id))
            .cloned()
            .collect();
        TrainingRows::new(rows, cs_ids)
    }

    pub fn rows(&self) -> &[LabeledCrossSection] {
        &self.rows
    }

    pub fn cs_ids(&self) -> &[u32] {
        &self.cs_ids
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Derive the feature schema (KD concepts + DD selection) from training rows
/// only. The schema records the consumed cross-section ids.
pub fn build_schema(
    training: &TrainingRows,
    population: &Population,
    cross_sections: &[CrossSection],
    kd_concepts: Vec<ConceptDef>,
    top_k_per_kind: usize,
) -> Result<Schema> {
    let dd = dd_select(training.rows(), population, cross_sections, top_k_per_kind)?;
    Schema::new(kd_concepts, dd, training.cs_ids().to_vec())
}

/// Build a feature matrix from guarded training rows.
pub fn build_training_matrix(
    training: &TrainingRows,
    schema: &Schema,
    population: &Population,
    cross_sections: &[CrossSection],
) -> Result<FeatureMatrix> {
    build_matrix(training.rows(), schema, population, cross_sections)
}

/// Cross-section ids consumed upstream of a regime's evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub regime: RegimeKind,
    pub test_cs_ids: Vec<u32>,
    pub schema_cs_ids: Vec<u32>,
    pub tuning_cs_ids: Vec<u32>,
    pub training_cs_ids: Vec<u32>,
}

impl Audit {
    /// No test cross-section may appear upstream of schema, tuning, or
    /// training.
    pub fn verify(&self) -> Result<()> {
        for (stage, ids) in [
            ("schema", &self.schema_cs_ids),
            ("tuning", &self.tuning_cs_ids),
            ("training", &self.training_cs_ids),
        ] {
            for id in ids {
                if self.test_cs_ids.contains(id) {
                    return Err(Error::Leakage(format!(
                        "test cross-section {id} appears upstream in {stage}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Everything a regime run needs beyond the regime itself.
pub struct RegimeInputs<'a> {
    pub population: &'a Population,
    pub cross_sections: &'a [CrossSection],
    pub cohort: &'a CohortBuild,
    pub schema: &'a Schema,
    /// Tuned config; rounds pinned, early stopping already stripped.
    pub config: &'a TrainConfig,
    /// Cross-section ids consumed by hyperparameter tuning.
    pub tuning_cs_ids: &'a [u32],
    pub code_sets: &'a CodeSetConfig,
    /// Benchmark rule names to evaluate against the model.
    pub benchmark_rules: &'a [String],
}

/// One evaluated test set of a regime.
#[derive(Debug)]
pub struct TestSetResult {
    pub role: String,
    pub cs_id: u32,
    pub evaluation: Evaluation,
    pub importance: FeatureImportanceReport,
}

#[derive(Debug)]
pub struct RegimeOutput {
    pub ensemble: Ensemble,
    pub tests: Vec<TestSetResult>,
    pub audit: Audit,
}

fn stats_for<'a>(cohort: &'a CohortBuild, cs_id: u32) -> Result<&'a CrossSectionStats> {
    cohort
        .stats
        .iter()
        .find(|s| s.cs_id == cs_id)
        .ok_or_else(|| Error::Eval(format!("no cohort stats for cross-section {cs_id}")))
}

/// Train on the regime's training cross-sections and evaluate on its test
/// set(s), producing the model, per-test reports/attributions, and the
/// leakage audit. The audit is verified before any test row is touched.
pub fn run_regime(inputs: &RegimeInputs<'_>, regime: &Regime) -> Result<RegimeOutput> {
    let audit = Audit {
        regime: regime.kind,
        test_cs_ids: regime.test_ids(),
        schema_cs_ids: inputs.schema.provenance_cs_ids.clone(),
        tuning_cs_ids: inputs.tuning_cs_ids.to_vec(),
        training_cs_ids: regime.train_ids.clone(),
    };
    audit.verify()?;

    let training = TrainingRows::gather(inputs.cohort, &regime.train_ids)?;
    if training.is_empty() {
        return Err(Error::Train(format!(
            "no cohort rows in training cross-sections {:?}",
            regime.train_ids
        )));
    }
    let train_matrix = build_training_matrix(
        &training,
        inputs.schema,
        inputs.population,
        inputs.cross_sections,
    )?;
    let (ensemble, _history) = train_with_history(&train_matrix, inputs.config, None)?;

    let mut tests = Vec::new();
    for (role, cs_id) in &regime.test_sets {
        let result = evaluate_on(inputs, &ensemble, role, *cs_id)?;
        tests.push(result);
    }
    Ok(RegimeOutput {
        ensemble,
        tests,
        audit,
    })
}

/// Score a trained ensemble on one test cross-section.
pub fn evaluate_on(
    inputs: &RegimeInputs<'_>,
    ensemble: &Ensemble,
    role: &str,
    cs_id: u32,
) -> Result<TestSetResult> {
    let test_rows: Vec<LabeledCrossSection> = inputs
        .cohort
        .rows
        .iter()
        .filter(|r| r.cs_id == cs_id)
        .cloned()
        .collect();
    if test_rows.is_empty() {
        return Err(Error::Eval(format!(
            "no cohort rows in test cross-section {cs_id}"
        )));
    }
    let schema = ensemble_schema(inputs.schema, ensemble)?;
    let matrix = build_matrix(&test_rows, schema, inputs.population, inputs.cross_sections)?;
    let scores = ensemble.predict_proba(&matrix)?;
    let labels: Vec<bool> = matrix.labels.iter().map(|&y| y > 0.5).collect();
    let stats = stats_for(inputs.cohort, cs_id)?;
    let preds = RankedPredictions::new(
        scores,
        labels,
        stats.controls_before_downsampling as u64,
        stats.controls_retained as u64,
    )?;
    let incidence = stats.incidence();
    let mut evaluation = evaluate_predictions(&preds, incidence)?;
    for rule in inputs.benchmark_rules {
        let rule_set = inputs.code_sets.screen_rule(rule)?;
        let mut row = benchmark_rule(
            inputs.population,
            &matrix.keys,
            inputs.cross_sections,
            rule,
            rule_set,
            24,
            preds.k(),
            incidence,
        )?;
        pair_with_model(&mut row, &evaluation.pr_curve, incidence);
        evaluation.report.benchmarks.push(row);
    }

    let attributions = tree_shap_matrix(ensemble, &matrix)?;
    let importance = aggregate_importance(&attributions, &matrix.schema)?;
    Ok(TestSetResult {
        role: role.to_string(),
        cs_id,
        evaluation,
        importance,
    })
}

/// The schema the ensemble was trained against; catches mismatched wiring
/// (for example evaluating a feature-eliminated model with the full schema).
fn ensemble_schema<'a>(schema: &'a Schema, ensemble: &Ensemble) -> Result<&'a Schema> {
    let fp = schema.fingerprint();
    if fp != ensemble.schema_fingerprint {
        return Err(Error::SchemaMismatch(format!(
            "regime schema fingerprint {fp} does not match model {}",
            ensemble.schema_fingerprint
        )));
    }
    Ok(schema)
}
