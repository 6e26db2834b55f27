//! On-disk JSON formats for models, evidence, and datasets.
//!
//! The file schemas are separate structs rather than serializations of the
//! runtime types, so the wire format stays stable while internals move.
//! Serialization is deterministic: struct fields keep declaration order,
//! table classes are sorted by name, and floats use the shortest
//! representation that parses back to the identical bits, so saving and
//! reloading is lossless and repeated saves are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{ModelError, ValidationIssue};
use crate::model::{Cpt, DynamicTreeModel, Evidence, MenuEntry, NodeRef, ParentMenu};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("unsupported format version {0}, expected {FORMAT_VERSION}")]
    UnsupportedVersion(u32),
}

/// Model file schema. `menus` lists every node below the top layer; order in
/// the file does not matter because entries carry their node coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub num_states: usize,
    pub layers: Vec<usize>,
    pub root_priors: Vec<Vec<f64>>,
    pub menus: Vec<MenuFile>,
    /// Conditional tables by class name, as rows of P(child state | parent state).
    pub cpts: BTreeMap<String, Vec<Vec<f64>>>,
}

/// One node's candidate-parent menu: parallel arrays over menu slots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MenuFile {
    /// `[layer, index]` of the child node.
    pub child: [usize; 2],
    pub parents: Vec<[usize; 2]>,
    pub rhos: Vec<f64>,
    pub ties: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvidenceFile {
    pub format_version: u32,
    pub assignments: Vec<LeafState>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeafState {
    pub leaf: usize,
    pub state: usize,
}

/// A dataset is a list of complete bottom-layer observations, each a vector
/// of states in leaf order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFile {
    pub format_version: u32,
    pub cases: Vec<Vec<usize>>,
}

impl ModelFile {
    pub fn from_model(model: &DynamicTreeModel) -> ModelFile {
        let mut menus = Vec::new();
        for d in 1..model.num_layers() {
            for i in 0..model.layer_size(d) {
                let node = NodeRef::new(d, i);
                let menu = model.menu(node).expect("below top");
                menus.push(MenuFile {
                    child: [d, i],
                    parents: menu.entries.iter().map(|e| [e.parent.layer, e.parent.index]).collect(),
                    rhos: menu.entries.iter().map(|e| e.rho).collect(),
                    ties: menu.entries.iter().map(|e| e.tie.clone()).collect(),
                });
            }
        }
        let cpts = model
            .cpts()
            .iter()
            .map(|(class, cpt)| (class.clone(), cpt.to_rows()))
            .collect();
        ModelFile {
            format_version: FORMAT_VERSION,
            num_states: model.num_states(),
            layers: model.layer_sizes().to_vec(),
            root_priors: (0..model.layer_size(0)).map(|i| model.root_prior(i).to_vec()).collect(),
            menus,
            cpts,
        }
    }

    pub fn into_model(self) -> Result<DynamicTreeModel, IoError> {
        if self.format_version != FORMAT_VERSION {
            return Err(IoError::UnsupportedVersion(self.format_version));
        }
        let num_layers = self.layers.len();
        if num_layers == 0 {
            return Err(ModelError::BadLayerSizes.into());
        }
        let mut menus: Vec<Vec<Option<ParentMenu>>> = self.layers[1..]
            .iter()
            .map(|&w| vec![None; w])
            .collect();
        let mut issues = Vec::new();
        for entry in &self.menus {
            let [d, i] = entry.child;
            let location = format!("menu ({d},{i})");
            if d == 0 || d >= num_layers || i >= self.layers[d] {
                issues.push(ValidationIssue {
                    location,
                    problem: "child is not a node below the top layer".into(),
                });
                continue;
            }
            if entry.parents.len() != entry.rhos.len() || entry.parents.len() != entry.ties.len() {
                issues.push(ValidationIssue {
                    location,
                    problem: "parents, rhos, and ties must have equal length".into(),
                });
                continue;
            }
            if menus[d - 1][i].is_some() {
                issues.push(ValidationIssue { location, problem: "listed twice".into() });
                continue;
            }
            menus[d - 1][i] = Some(ParentMenu {
                entries: entry
                    .parents
                    .iter()
                    .zip(&entry.rhos)
                    .zip(&entry.ties)
                    .map(|((&[pl, pi], &rho), tie)| MenuEntry {
                        parent: NodeRef::new(pl, pi),
                        rho,
                        tie: tie.clone(),
                    })
                    .collect(),
            });
        }
        let mut full = Vec::with_capacity(menus.len());
        for (d, layer) in menus.into_iter().enumerate() {
            let mut out = Vec::with_capacity(layer.len());
            for (i, menu) in layer.into_iter().enumerate() {
                match menu {
                    Some(menu) => out.push(menu),
                    None => issues.push(ValidationIssue {
                        location: format!("menu ({},{i})", d + 1),
                        problem: "missing from file".into(),
                    }),
                }
            }
            full.push(out);
        }
        if !issues.is_empty() {
            return Err(ModelError::Invalid(issues).into());
        }
        let mut cpts = BTreeMap::new();
        for (class, rows) in self.cpts {
            cpts.insert(class, Cpt::from_rows(&rows)?);
        }
        Ok(DynamicTreeModel::new(self.num_states, self.layers, self.root_priors, full, cpts)?)
    }
}

pub fn save_model(path: impl AsRef<Path>, model: &DynamicTreeModel) -> Result<(), IoError> {
    write_json(path, &ModelFile::from_model(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DynamicTreeModel, IoError> {
    let file: ModelFile = read_json(path)?;
    file.into_model()
}

pub fn save_evidence(path: impl AsRef<Path>, evidence: &Evidence) -> Result<(), IoError> {
    let file = EvidenceFile {
        format_version: FORMAT_VERSION,
        assignments: evidence
            .states()
            .iter()
            .enumerate()
            .map(|(leaf, &state)| LeafState { leaf, state })
            .collect(),
    };
    write_json(path, &file)
}

pub fn load_evidence(
    path: impl AsRef<Path>,
    model: &DynamicTreeModel,
) -> Result<Evidence, IoError> {
    let file: EvidenceFile = read_json(path)?;
    if file.format_version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion(file.format_version));
    }
    let want = model.layer_size(model.bottom_layer());
    let mut states = vec![None; want];
    for a in &file.assignments {
        if a.leaf >= want {
            return Err(ModelError::BadEvidence(format!(
                "leaf {} out of range, bottom layer has {want} nodes",
                a.leaf
            ))
            .into());
        }
        if states[a.leaf].replace(a.state).is_some() {
            return Err(
                ModelError::BadEvidence(format!("leaf {} assigned twice", a.leaf)).into()
            );
        }
    }
    let mut full = Vec::with_capacity(want);
    for (leaf, s) in states.into_iter().enumerate() {
        match s {
            Some(s) => full.push(s),
            None => {
                return Err(
                    ModelError::BadEvidence(format!("leaf {leaf} has no assignment")).into()
                )
            }
        }
    }
    Ok(Evidence::for_model(model, full)?)
}

pub fn save_dataset(path: impl AsRef<Path>, cases: &[Evidence]) -> Result<(), IoError> {
    let file = DatasetFile {
        format_version: FORMAT_VERSION,
        cases: cases.iter().map(|c| c.states().to_vec()).collect(),
    };
    write_json(path, &file)
}

pub fn load_dataset(
    path: impl AsRef<Path>,
    model: &DynamicTreeModel,
) -> Result<Vec<Evidence>, IoError> {
    let file: DatasetFile = read_json(path)?;
    if file.format_version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion(file.format_version));
    }
    file.cases
        .into_iter()
        .map(|states| Ok(Evidence::for_model(model, states)?))
        .collect()
}

fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T, IoError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        build_layered_model, random_strong_diagonal_cpt, CptSpec, ParentPriorSpec, RootPriorSpec,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_model() -> DynamicTreeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        build_layered_model(
            &[2, 3, 4],
            3,
            &ParentPriorSpec::AboveAndRightWrap { rho_above: 0.6 },
            &CptSpec::PerLayer(vec![
                random_strong_diagonal_cpt(3, &mut rng),
                random_strong_diagonal_cpt(3, &mut rng),
            ]),
            &RootPriorSpec::Explicit(vec![vec![0.2, 0.3, 0.5], vec![0.4, 0.4, 0.2]]),
        )
        .unwrap()
    }

    #[test]
    fn model_round_trip_is_lossless() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn repeated_saves_are_byte_identical() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        save_model(&a, &model).unwrap();
        save_model(&b, &load_model(&a).unwrap()).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn menu_order_in_the_file_does_not_matter() {
        let model = sample_model();
        let mut file = ModelFile::from_model(&model);
        file.menus.reverse();
        assert_eq!(file.into_model().unwrap(), model);
    }

    #[test]
    fn bad_tables_are_rejected_on_load() {
        let model = sample_model();
        let mut file = ModelFile::from_model(&model);
        file.cpts.get_mut("layer-1").unwrap()[0][0] += 0.5;
        match file.into_model() {
            Err(IoError::Model(ModelError::Invalid(issues))) => {
                assert!(issues.iter().any(|i| i.location.contains("layer-1")));
            }
            other => panic!("expected a validation failure, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let model = sample_model();
        let mut file = ModelFile::from_model(&model);
        file.format_version = 2;
        assert!(matches!(file.into_model(), Err(IoError::UnsupportedVersion(2))));
    }

    #[test]
    fn evidence_round_trip_and_validation() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("evidence.json");
        let ev = Evidence::for_model(&model, vec![0, 2, 1, 0]).unwrap();
        save_evidence(&path, &ev).unwrap();
        assert_eq!(load_evidence(&path, &model).unwrap(), ev);

        let partial = EvidenceFile {
            format_version: FORMAT_VERSION,
            assignments: vec![LeafState { leaf: 0, state: 1 }],
        };
        let bad = dir.path().join("partial.json");
        write_json(&bad, &partial).unwrap();
        assert!(load_evidence(&bad, &model).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cases.json");
        let cases = vec![
            Evidence::for_model(&model, vec![0, 1, 2, 0]).unwrap(),
            Evidence::for_model(&model, vec![2, 2, 1, 1]).unwrap(),
        ];
        save_dataset(&path, &cases).unwrap();
        assert_eq!(load_dataset(&path, &model).unwrap(), cases);
    }
}
