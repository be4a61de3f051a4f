//! Tree and ensemble representation, prediction, and JSON serialization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::gbt::train::TrainConfig;

pub const ENSEMBLE_FORMAT_VERSION: u32 = 1;

/// Flat (arena) node. A row goes left iff `value < threshold`; a null value
/// follows the default direction. `cover` is the training hessian mass at
/// the node, kept for attribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Branch {
        feature: u32,
        threshold: f64,
        default_left: bool,
        left: u32,
        right: u32,
        gain: f64,
        cover: f64,
    },
    Leaf {
        weight: f64,
        cover: f64,
    },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match self {
            Node::Branch { cover, .. } | Node::Leaf { cover, .. } => *cover,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Index of the leaf a dense row (NaN = null) lands in.
    pub fn leaf_index(&self, values: &[f64]) -> usize {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Branch {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                    ..
                } => {
                    let v = values[*feature as usize];
                    let go_left = if v.is_nan() { *default_left } else { v < *threshold };
                    at = if go_left { *left as usize } else { *right as usize };
                }
            }
        }
    }

    pub fn predict_row(&self, values: &[f64]) -> f64 {
        match &self.nodes[self.leaf_index(values)] {
            Node::Leaf { weight, .. } => *weight,
            Node::Branch { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    pub fn max_depth(&self) -> usize {
        fn depth(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Branch { left, right, .. } => {
                    1 + depth(nodes, *left as usize).max(depth(nodes, *right as usize))
                }
            }
        }
        depth(&self.nodes, 0)
    }

    /// Cover-weighted expected leaf value over the training distribution.
    pub fn expected_value(&self) -> f64 {
        fn walk(nodes: &[Node], at: usize) -> f64 {
            match &nodes[at] {
                Node::Leaf { weight, .. } => *weight,
                Node::Branch { left, right, cover, .. } => {
                    let l = *left as usize;
                    let r = *right as usize;
                    let lc = nodes[l].cover();
                    let rc = nodes[r].cover();
                    let total = if *cover > 0.0 { *cover } else { lc + rc };
                    if total <= 0.0 {
                        return 0.5 * (walk(nodes, l) + walk(nodes, r));
                    }
                    (lc * walk(nodes, l) + rc * walk(nodes, r)) / total
                }
            }
        }
        walk(&self.nodes, 0)
    }

    /// Sum of split gains per feature, added into `acc`.
    pub fn accumulate_gain(&self, acc: &mut [f64]) {
        for node in &self.nodes {
            if let Node::Branch { feature, gain, .. } = node {
                acc[*feature as usize] += *gain;
            }
        }
    }
}

/// Additive tree ensemble over a fixed column schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub schema_fingerprint: String,
    pub config: TrainConfig,
    pub base_score: f64,
    pub n_features: u32,
    pub trees: Vec<Tree>,
    /// Cross-section ids the training rows came from (leakage audit).
    pub train_cs_ids: Vec<u32>,
}

impl Ensemble {
    pub fn check_schema(&self, matrix: &FeatureMatrix) -> Result<()> {
        let fp = matrix.schema.fingerprint();
        if fp != self.schema_fingerprint {
            return Err(Error::SchemaMismatch(format!(
                "matrix fingerprint {fp} != ensemble fingerprint {}",
                self.schema_fingerprint
            )));
        }
        Ok(())
    }

    /// Margin for one dense row (NaN = null).
    pub fn predict_margin_row(&self, values: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict_row(values)).sum::<f64>()
    }

    pub fn predict_proba_row(&self, values: &[f64]) -> f64 {
        sigmoid(self.predict_margin_row(values))
    }

    pub fn predict_margin(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check_schema(matrix)?;
        Ok((0..matrix.n_rows())
            .into_par_iter()
            .map(|i| self.predict_margin_row(&matrix.dense_row(i)))
            .collect())
    }

    pub fn predict_proba(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self.predict_margin(matrix)?.into_iter().map(sigmoid).collect())
    }

    /// Total split gain per feature across all trees.
    pub fn total_gain_per_feature(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_features as usize];
        for tree in &self.trees {
            tree.accumulate_gain(&mut acc);
        }
        acc
    }

    pub fn to_json(&self) -> Result<String> {
        let file = EnsembleFile {
            version: ENSEMBLE_FORMAT_VERSION,
            schema_fingerprint: self.schema_fingerprint.clone(),
            config: self.config.clone(),
            base_score: self.base_score,
            n_features: self.n_features,
            train_cs_ids: self.train_cs_ids.clone(),
            trees: self.trees.iter().map(nest).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Ensemble> {
        let file: EnsembleFile = serde_json::from_str(text)?;
        if file.version != ENSEMBLE_FORMAT_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "unsupported model format version {}",
                file.version
            )));
        }
        let mut trees = Vec::with_capacity(file.trees.len());
        for nested in &file.trees {
            let mut nodes = Vec::new();
            flatten(nested, &mut nodes)?;
            trees.push(Tree { nodes });
        }
        Ok(Ensemble {
            schema_fingerprint: file.schema_fingerprint,
            config: file.config,
            base_score: file.base_score,
            n_features: file.n_features,
            trees,
            train_cs_ids: file.train_cs_ids,
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
}

/// Nested-node view used for the self-describing JSON format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NestedNode {
    Branch {
        feature: u32,
        threshold: f64,
        default: Direction,
        gain: f64,
        cover: f64,
        left: Box<NestedNode>,
        right: Box<NestedNode>,
    },
    Leaf {
        weight: f64,
        cover: f64,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleFile {
    version: u32,
    schema_fingerprint: String,
    config: TrainConfig,
    base_score: f64,
    n_features: u32,
    train_cs_ids: Vec<u32>,
    trees: Vec<NestedNode>,
}

fn nest(tree: &Tree) -> NestedNode {
    fn walk(nodes: &[Node], at: usize) -> NestedNode {
        match &nodes[at] {
            Node::Leaf { weight, cover } => NestedNode::Leaf {
                weight: *weight,
                cover: *cover,
            },
            Node::Branch {
                feature,
                threshold,
                default_left,
                left,
                right,
                gain,
                cover,
            } => NestedNode::Branch {
                feature: *feature,
                threshold: *threshold,
                default: if *default_left { Direction::Left } else { Direction::Right },
                gain: *gain,
                cover: *cover,
                left: Box::new(walk(nodes, *left as usize)),
                right: Box::new(walk(nodes, *right as usize)),
            },
        }
    }
    walk(&tree.nodes, 0)
}

fn flatten(nested: &NestedNode, nodes: &mut Vec<Node>) -> Result<usize> {
    match nested {
        NestedNode::Leaf { weight, cover } => {
            nodes.push(Node::Leaf {
                weight: *weight,
                cover: *cover,
            });
            Ok(nodes.len() - 1)
        }
        NestedNode::Branch {
            feature,
            threshold,
            default,
            gain,
            cover,
            left,
            right,
        } => {
            let at = nodes.len();
            nodes.push(Node::Leaf { weight: 0.0, cover: 0.0 }); // placeholder
            let l = flatten(left, nodes)?;
            let r = flatten(right, nodes)?;
            nodes[at] = Node::Branch {
                feature: *feature,
                threshold: *threshold,
                default_left: *default == Direction::Left,
                left: l as u32,
                right: r as u32,
                gain: *gain,
                cover: *cover,
            };
            Ok(at)
        }
    }
}
