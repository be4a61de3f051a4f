//! Stage engine behind the CLI: each stage reads only documented files,
//! writes only documented files, and refreshes the output manifest, so any
//! stage can be rerun from persisted intermediates with byte-identical
//! results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::claims::{parse_claims, Population};
use crate::cohort::{
    build_cohort, parse_cohort_csv, write_cohort_csv, CodeSetConfig, CohortBuild, CohortMode,
    CrossSectionStats, LabeledCrossSection,
};
use crate::config::{load_code_sets, load_kd_concepts, PipelineConfig};
use crate::error::{Error, Result};
use crate::evaluate::{
    benchmark_rule, evaluate_predictions, pair_with_model, write_pr_curve_csv, write_roc_curve_csv,
    RankedPredictions,
};
use crate::explain::{aggregate_importance, tree_shap_matrix, write_importance_csv};
use crate::features::{
    build_matrix, read_matrix, write_matrix_cells_csv, write_matrix_rows_csv, FeatureMatrix,
    Schema,
};
use crate::gbt::{
    default_grid, grid_search, rfe, train_with_history, Ensemble, GridSearchResult, RfeResult,
    TrainConfig,
};
use crate::protocol::{Audit, Regime, RegimeKind, TrainingRows};
use crate::rcs::{default_splits, enumerate_cross_sections, CrossSection, SplitAssignment};
use crate::synth::{emit_fixture, generate};

/// Tuning artifact persisted by the tune stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneArtifact {
    pub schema_fingerprint: String,
    pub tune_train_cs_ids: Vec<u32>,
    pub tune_val_cs_id: u32,
    pub tuning_cs_ids: Vec<u32>,
    pub grid: GridSearchResult,
    pub rfe: Option<RfeResult>,
    /// Column indices (into the full schema) kept for final models.
    pub selected_columns: Option<Vec<usize>>,
    /// Winning config with rounds pinned and early stopping stripped.
    pub final_config: TrainConfig,
}

pub struct Pipeline {
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Pipeline> {
        config.validate()?;
        Ok(Pipeline { config })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn out(&self) -> &Path {
        &self.config.out_dir
    }

    fn claims_path(&self) -> PathBuf {
        match &self.config.paths.claims {
            Some(path) => path.clone(),
            None => self.out().join("claims.csv"),
        }
    }

    fn demographics_path(&self) -> PathBuf {
        match &self.config.paths.demographics {
            Some(path) => path.clone(),
            None => self.out().join("demographics.csv"),
        }
    }

    fn mode_dir(&self, mode: CohortMode) -> PathBuf {
        self.out().join(mode.as_str())
    }

    fn regime_dir(&self, mode: CohortMode, regime: RegimeKind) -> PathBuf {
        self.mode_dir(mode).join(regime.as_str())
    }

    fn features_dir(&self, mode: CohortMode) -> PathBuf {
        self.mode_dir(mode).join("features")
    }

    // ---- shared loading -------------------------------------------------

    fn cross_sections(&self) -> Vec<CrossSection> {
        enumerate_cross_sections(&self.config.window)
    }

    fn split(&self) -> Result<SplitAssignment> {
        default_splits(self.cross_sections().len() as u32)
    }

    fn load_population(&self) -> Result<Population> {
        let claims_path = self.claims_path();
        let demo_path = self.demographics_path();
        for path in [&claims_path, &demo_path] {
            self.require(path, "synth")?;
        }
        let claims = fs::File::open(&claims_path)
            .map_err(|e| Error::io(claims_path.display().to_string(), e))?;
        let demo = fs::File::open(&demo_path)
            .map_err(|e| Error::io(demo_path.display().to_string(), e))?;
        parse_claims(
            std::io::BufReader::new(claims),
            std::io::BufReader::new(demo),
        )
    }

    fn load_code_sets(&self) -> Result<CodeSetConfig> {
        let path = self
            .config
            .paths
            .code_sets
            .as_ref()
            .expect("validated config has code_sets");
        load_code_sets(path)
    }

    fn require(&self, path: &Path, producer: &str) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.display().to_string(),
                producer: producer.to_string(),
            });
        }
        Ok(())
    }

    fn load_cohort(&self, mode: CohortMode) -> Result<CohortBuild> {
        let dir = self.mode_dir(mode);
        let rows_path = dir.join("cohort.csv");
        let stats_path = dir.join("cohort_stats.json");
        self.require(&rows_path, "cohort")?;
        self.require(&stats_path, "cohort")?;
        let rows = parse_cohort_csv(&read_text(&rows_path)?)?;
        let stats: Vec<CrossSectionStats> = serde_json::from_str(&read_text(&stats_path)?)?;
        Ok(CohortBuild { mode, rows, stats })
    }

    fn load_schema(&self, mode: CohortMode) -> Result<Schema> {
        let path = self.features_dir(mode).join("schema.json");
        self.require(&path, "featurize")?;
        let schema: Schema = serde_json::from_str(&read_text(&path)?)?;
        schema.validate()?;
        Ok(schema)
    }

    fn load_matrix(&self, mode: CohortMode, name: &str) -> Result<FeatureMatrix> {
        let dir = self.features_dir(mode);
        let cells = dir.join(format!("{name}.cells.csv"));
        let rows = dir.join(format!("{name}.rows.csv"));
        self.require(&cells, "featurize")?;
        self.require(&rows, "featurize")?;
        read_matrix(
            self.load_schema(mode)?,
            &read_text(&cells)?,
            &read_text(&rows)?,
        )
    }

    fn load_tune(&self, mode: CohortMode) -> Result<TuneArtifact> {
        let path = self.mode_dir(mode).join("tune.json");
        self.require(&path, "tune")?;
        Ok(serde_json::from_str(&read_text(&path)?)?)
    }

    fn load_model(&self, mode: CohortMode, regime: RegimeKind) -> Result<Ensemble> {
        let path = self.regime_dir(mode, regime).join("model.json");
        self.require(&path, "train")?;
        Ensemble::from_json(&read_text(&path)?)
    }

    /// Matrix restricted to the tuned column selection, if any.
    fn apply_selection(&self, tune: &TuneArtifact, matrix: FeatureMatrix) -> Result<FeatureMatrix> {
        match &tune.selected_columns {
            Some(cols) => matrix.select_columns(cols),
            None => Ok(matrix),
        }
    }

    /// Benchmark rules for a mode: the precursor screen is only meaningful
    /// when precursor-history rows are part of the cohort.
    fn benchmarks_for(&self, mode: CohortMode) -> Vec<String> {
        self.config
            .benchmarks
            .iter()
            .filter(|rule| !(mode == CohortMode::NonNafl && rule.as_str() == "nafl_screen"))
            .cloned()
            .collect()
    }

    // ---- stages ----------------------------------------------------------

    /// Generate synthetic claims, demographics, and ground truth. The
    /// pipeline seed drives generation so one `--seed` reproduces the whole
    /// run.
    pub fn run_synth(&self) -> Result<()> {
        let synth = self.config.synth.as_ref().ok_or_else(|| {
            Error::Config("no synthetic generator configured; provide input paths instead".into())
        })?;
        let mut synth = synth.clone();
        synth.seed = self.config.seed;
        let (population, ground_truth) = generate(&synth)?;
        emit_fixture(&population, &ground_truth, self.out())?;
        self.write_manifest()
    }

    /// Label cohorts for every configured mode.
    pub fn run_cohort(&self) -> Result<()> {
        let population = self.load_population()?;
        let code_sets = self.load_code_sets()?;
        let cross_sections = self.cross_sections();
        if cross_sections.is_empty() {
            return Err(Error::Config(
                "study period too short for any cross-section".into(),
            ));
        }
        for &mode in &self.config.cohort.modes {
            let build = build_cohort(
                &population,
                &cross_sections,
                &code_sets,
                mode,
                self.config.cohort.control_ratio,
                self.config.window.study_start,
                self.config.seed,
            )?;
            let dir = self.mode_dir(mode);
            ensure_dir(&dir)?;
            let mut rows_csv = Vec::new();
            write_cohort_csv(&build.rows, &mut rows_csv)
                .map_err(|e| Error::io(dir.join("cohort.csv").display().to_string(), e))?;
            write_bytes(&dir.join("cohort.csv"), &rows_csv)?;
            write_json(&dir.join("cohort_stats.json"), &build.stats)?;
        }
        self.write_manifest()
    }

    /// Tune-split rule within the training ids: validate on the last
    /// training cross-section, drop the one before it to keep the outcome
    /// offset, tune-train on the rest.
    fn tune_split(&self, split: &SplitAssignment) -> Result<(Vec<u32>, u32)> {
        if split.train_ids.len() < 3 {
            return Err(Error::Config(format!(
                "tuning needs at least 3 training cross-sections, got {:?}",
                split.train_ids
            )));
        }
        let val = *split.train_ids.last().unwrap();
        let train: Vec<u32> = split
            .train_ids
            .iter()
            .copied()
            .filter(|&id| id != val && id != val - 1)
            .collect();
        Ok((train, val))
    }

    /// Derive the schema from training rows and persist every matrix the
    /// later stages need.
    pub fn run_featurize(&self) -> Result<()> {
        let population = self.load_population()?;
        let cross_sections = self.cross_sections();
        let split = self.split()?;
        let kd_path = self
            .config
            .paths
            .kd_concepts
            .as_ref()
            .expect("validated config has kd_concepts");
        let kd = load_kd_concepts(kd_path)?;
        let (tune_train_ids, tune_val_id) = self.tune_split(&split)?;

        for &mode in &self.config.cohort.modes {
            let cohort = self.load_cohort(mode)?;
            let training = TrainingRows::gather(&cohort, &split.train_ids)?;
            let schema = crate::protocol::build_schema(
                &training,
                &population,
                &cross_sections,
                kd.clone(),
                self.config.features.top_k_per_kind,
            )?;
            let dir = self.features_dir(mode);
            ensure_dir(&dir)?;
            write_json(&dir.join("schema.json"), &schema)?;

            let prospective_ids: Vec<u32> = (1..=split.holdout_id).collect();
            let sets: [(&str, Vec<u32>); 6] = [
                ("tune_train", tune_train_ids.clone()),
                ("tune_val", vec![tune_val_id]),
                ("train_holdout", split.train_ids.clone()),
                ("train_prospective", prospective_ids),
                ("test_holdout", vec![split.holdout_id]),
                ("test_scoring", vec![split.scoring_id]),
            ];
            for (name, cs_ids) in sets {
                let rows: Vec<LabeledCrossSection> = cohort
                    .rows
                    .iter()
                    .filter(|r| cs_ids.contains(&r.cs_id))
                    .cloned()
                    .collect();
                let matrix = build_matrix(&rows, &schema, &population, &cross_sections)?;
                let mut cells = Vec::new();
                let mut row_meta = Vec::new();
                write_matrix_cells_csv(&matrix, &mut cells)
                    .and_then(|_| write_matrix_rows_csv(&matrix, &mut row_meta))
                    .map_err(|e| Error::io(dir.display().to_string(), e))?;
                write_bytes(&dir.join(format!("{name}.cells.csv")), &cells)?;
                write_bytes(&dir.join(format!("{name}.rows.csv")), &row_meta)?;
            }
        }
        self.write_manifest()
    }

    /// Grid search (and optional recursive feature elimination) on the tune
    /// split; pins the final config.
    pub fn run_tune(&self) -> Result<()> {
        let split = self.split()?;
        let (tune_train_ids, tune_val_id) = self.tune_split(&split)?;
        let grid = self.config.train.grid.clone().unwrap_or_else(default_grid);

        for &mode in &self.config.cohort.modes {
            let tune_train = self.load_matrix(mode, "tune_train")?;
            let tune_val = self.load_matrix(mode, "tune_val")?;
            let schema_fingerprint = tune_train.schema.fingerprint();
            let grid_result = grid_search(&tune_train, &tune_val, &grid)?;

            let mut final_config = grid_result.best_config().clone();
            let mut final_rounds = grid_result.best_rounds();
            let mut rfe_result = None;
            let mut selected_columns = None;
            if self.config.train.rfe.enabled {
                let result = rfe(
                    &tune_train,
                    &tune_val,
                    grid_result.best_config(),
                    self.config.train.rfe.drop_fraction,
                    self.config.train.rfe.min_features,
                )?;
                let winning = result
                    .trajectory
                    .iter()
                    .find(|s| s.n_features == result.selected.len())
                    .expect("winning step in trajectory");
                final_rounds = winning.rounds_used;
                selected_columns = Some(result.selected.clone());
                rfe_result = Some(result);
            }
            final_config.n_rounds = final_rounds.max(1);
            final_config.early_stopping_rounds = None;

            let mut tuning_cs_ids = tune_train_ids.clone();
            tuning_cs_ids.push(tune_val_id);
            tuning_cs_ids.sort_unstable();
            let artifact = TuneArtifact {
                schema_fingerprint,
                tune_train_cs_ids: tune_train_ids.clone(),
                tune_val_cs_id: tune_val_id,
                tuning_cs_ids,
                grid: grid_result,
                rfe: rfe_result,
                selected_columns,
                final_config,
            };
            write_json(&self.mode_dir(mode).join("tune.json"), &artifact)?;
        }
        self.write_manifest()
    }

    fn regime_matrices(regime: RegimeKind) -> (&'static str, Vec<(&'static str, &'static str)>) {
        match regime {
            RegimeKind::Holdout => ("train_holdout", vec![("holdout", "test_holdout")]),
            RegimeKind::Prospective => ("train_prospective", vec![("scoring", "test_scoring")]),
            RegimeKind::Stability => (
                "train_holdout",
                vec![("holdout", "test_holdout"), ("scoring", "test_scoring")],
            ),
        }
    }

    /// Train one model per (mode, regime) and write the leakage audit.
    pub fn run_train(&self) -> Result<()> {
        let split = self.split()?;
        for &mode in &self.config.cohort.modes {
            let schema = self.load_schema(mode)?;
            let tune = self.load_tune(mode)?;
            for &kind in &self.config.regimes {
                let regime = Regime::from_split(kind, &split);
                let audit = Audit {
                    regime: kind,
                    test_cs_ids: regime.test_ids(),
                    schema_cs_ids: schema.provenance_cs_ids.clone(),
                    tuning_cs_ids: tune.tuning_cs_ids.clone(),
                    training_cs_ids: regime.train_ids.clone(),
                };
                audit.verify()?;

                let (train_name, _) = Self::regime_matrices(kind);
                let matrix = self.load_matrix(mode, train_name)?;
                // structural re-check on the persisted rows
                let training_rows: Vec<LabeledCrossSection> = matrix
                    .keys
                    .iter()
                    .map(|k| LabeledCrossSection {
                        patient_id: k.patient_id.clone(),
                        cs_id: k.cs_id,
                        label: k.label,
                        nafl_in_lookback: k.nafl_in_lookback,
                    })
                    .collect();
                TrainingRows::new(training_rows, &regime.train_ids)?;
                let matrix = self.apply_selection(&tune, matrix)?;
                let (ensemble, _) = train_with_history(&matrix, &tune.final_config, None)?;

                let dir = self.regime_dir(mode, kind);
                ensure_dir(&dir)?;
                write_bytes(&dir.join("model.json"), ensemble.to_json()?.as_bytes())?;
                write_json(&dir.join("audit.json"), &audit)?;
            }
        }
        self.write_manifest()
    }

    /// Evaluate every trained (mode, regime) model on its test set(s).
    pub fn run_evaluate(&self) -> Result<()> {
        let split = self.split()?;
        let population = self.load_population()?;
        let code_sets = self.load_code_sets()?;
        let cross_sections = self.cross_sections();
        for &mode in &self.config.cohort.modes {
            let cohort = self.load_cohort(mode)?;
            let tune = self.load_tune(mode)?;
            let benchmarks = self.benchmarks_for(mode);
            for &kind in &self.config.regimes {
                let regime = Regime::from_split(kind, &split);
                let dir = self.regime_dir(mode, kind);
                let audit_path = dir.join("audit.json");
                self.require(&audit_path, "train")?;
                let audit: Audit = serde_json::from_str(&read_text(&audit_path)?)?;
                audit.verify()?;
                let ensemble = self.load_model(mode, kind)?;

                let (_, tests) = Self::regime_matrices(kind);
                let multi = tests.len() > 1;
                for (role, matrix_name) in tests {
                    let matrix =
                        self.apply_selection(&tune, self.load_matrix(mode, matrix_name)?)?;
                    let cs_id = regime
                        .test_sets
                        .iter()
                        .find(|(r, _)| r == role)
                        .map(|(_, id)| *id)
                        .expect("role present");
                    let stats = cohort
                        .stats
                        .iter()
                        .find(|s| s.cs_id == cs_id)
                        .ok_or_else(|| {
                            Error::Eval(format!("no cohort stats for cross-section {cs_id}"))
                        })?;
                    let scores = ensemble.predict_proba(&matrix)?;
                    let labels: Vec<bool> = matrix.labels.iter().map(|&y| y > 0.5).collect();
                    let preds = RankedPredictions::new(
                        scores,
                        labels,
                        stats.controls_before_downsampling as u64,
                        stats.controls_retained as u64,
                    )?;
                    let incidence = stats.incidence();
                    let mut evaluation = evaluate_predictions(&preds, incidence)?;
                    for rule in &benchmarks {
                        let rule_set = code_sets.screen_rule(rule)?;
                        let mut row = benchmark_rule(
                            &population,
                            &matrix.keys,
                            &cross_sections,
                            rule,
                            rule_set,
                            24,
                            preds.k(),
                            incidence,
                        )?;
                        pair_with_model(&mut row, &evaluation.pr_curve, incidence);
                        evaluation.report.benchmarks.push(row);
                    }

                    let suffix = if multi {
                        format!("_{role}")
                    } else {
                        String::new()
                    };
                    write_json(
                        &dir.join(format!("report{suffix}.json")),
                        &evaluation.report,
                    )?;
                    let mut pr = Vec::new();
                    write_pr_curve_csv(&evaluation.pr_curve, &mut pr)
                        .map_err(|e| Error::io(dir.display().to_string(), e))?;
                    write_bytes(&dir.join(format!("pr_curve{suffix}.csv")), &pr)?;
                    let mut roc = Vec::new();
                    write_roc_curve_csv(&evaluation.roc_curve, &mut roc)
                        .map_err(|e| Error::io(dir.display().to_string(), e))?;
                    write_bytes(&dir.join(format!("roc_curve{suffix}.csv")), &roc)?;
                }
            }
        }
        self.write_manifest()
    }

    /// Attribution reports for every trained (mode, regime) model.
    pub fn run_explain(&self) -> Result<()> {
        for &mode in &self.config.cohort.modes {
            let tune = self.load_tune(mode)?;
            for &kind in &self.config.regimes {
                let ensemble = self.load_model(mode, kind)?;
                let dir = self.regime_dir(mode, kind);
                let (_, tests) = Self::regime_matrices(kind);
                let multi = tests.len() > 1;
                for (role, matrix_name) in tests {
                    let matrix =
                        self.apply_selection(&tune, self.load_matrix(mode, matrix_name)?)?;
                    let attributions = tree_shap_matrix(&ensemble, &matrix)?;
                    let report = aggregate_importance(&attributions, &matrix.schema)?;
                    let suffix = if multi {
                        format!("_{role}")
                    } else {
                        String::new()
                    };
                    let mut csv = Vec::new();
                    write_importance_csv(&report, &mut csv)
                        .map_err(|e| Error::io(dir.display().to_string(), e))?;
                    write_bytes(&dir.join(format!("importance{suffix}.csv")), &csv)?;
                }
            }
        }
        self.write_manifest()
    }

    /// Chain every stage for every configured mode and regime.
    pub fn run_all(&self) -> Result<()> {
        if self.config.synth.is_some() {
            self.run_synth()?;
        }
        self.run_cohort()?;
        self.run_featurize()?;
        self.run_tune()?;
        self.run_train()?;
        self.run_evaluate()?;
        self.run_explain()?;
        Ok(())
    }

    /// List every output file with its content hash. Deterministic: paths
    /// are sorted and the manifest itself is excluded.
    pub fn write_manifest(&self) -> Result<()> {
        let out = self.out();
        ensure_dir(out)?;
        let mut entries: Vec<(String, String)> = Vec::new();
        for entry in walkdir::WalkDir::new(out).sort_by_file_name() {
            let entry = entry.map_err(|e| {
                Error::io(
                    out.display().to_string(),
                    std::io::Error::other(e.to_string()),
                )
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry
                .path()
                .strip_prefix(out)
                .expect("walked path under out dir")
                .to_string_lossy()
                .replace('\\', "/");
            if rel == "manifest.json" {
                continue;
            }
            let bytes = fs::read(entry.path())
                .map_err(|e| Error::io(entry.path().display().to_string(), e))?;
            let digest = Sha256::digest(&bytes);
            let mut hex = String::with_capacity(64);
            for byte in digest {
                let _ = write!(hex, "{byte:02x}");
            }
            entries.push((rel, hex));
        }
        entries.sort();
        #[derive(Serialize)]
        struct ManifestEntry<'a> {
            path: &'a str,
            sha256: &'a str,
        }
        let listed: Vec<ManifestEntry> = entries
            .iter()
            .map(|(path, sha256)| ManifestEntry { path, sha256 })
            .collect();
        write_json(&out.join("manifest.json"), &listed)
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}
