use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BodyTemplate, Correctives, TemplateParts, Vec3, NUM_SHAPE};
use crate::error::{Error, Result};
use crate::numkit::{fsb1, Array};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    name: String,
    num_vertices: usize,
    num_joints: usize,
    parents: Vec<i64>,
    faces: Vec<[u32; 3]>,
    corrective_joints: Option<Vec<usize>>,
    corrective_scale: Option<f32>,
}

const ARRAYS: [&str; 5] = [
    "vertices",
    "joints",
    "skin_weights",
    "shape_basis",
    "correctives",
];

fn array_path(json: &Path, name: &str) -> PathBuf {
    let stem = json
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("template");
    json.with_file_name(format!("{stem}.{name}.fsb"))
}

fn flat(v: &[Vec3]) -> Vec<f32> {
    v.iter().flatten().copied().collect()
}

fn rows(a: &Array, n: usize) -> Result<Vec<Vec3>> {
    if a.shape() != [n, 3] {
        return Err(Error::Format(format!(
            "expected {n}x3, got {:?}",
            a.shape()
        )));
    }
    Ok(a.data()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect())
}

/// Writes `path` (JSON sidecar) plus one FSB1 file per array next to it.
pub fn save_template(path: &Path, t: &BodyTemplate) -> Result<()> {
    let nv = t.num_vertices();
    let nj = t.num_joints();
    let sidecar = Sidecar {
        name: t.name().to_string(),
        num_vertices: nv,
        num_joints: nj,
        parents: t
            .parents()
            .iter()
            .map(|p| p.map_or(-1, |p| p as i64))
            .collect(),
        faces: t.faces().to_vec(),
        corrective_joints: t.correctives().map(|c| c.joints.clone()),
        corrective_scale: t.correctives().map(|c| c.scale),
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let mut arrays = vec![
        Array::new(vec![nv, 3], flat(t.vertices_rest()))?,
        Array::new(vec![nj, 3], flat(t.joints_rest()))?,
        Array::new(vec![nv, nj], t.skin_weights().to_vec())?,
        Array::new(vec![nv, 3, NUM_SHAPE], t.shape_basis().to_vec())?,
    ];
    if let Some(c) = t.correctives() {
        arrays.push(Array::new(vec![nv, 3, c.count()], c.basis.clone())?);
    }
    for (a, name) in arrays.iter().zip(ARRAYS) {
        fsb1::write(&array_path(path, name), a)?;
    }
    Ok(())
}

pub fn load_template(path: &Path) -> Result<BodyTemplate> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let s: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let (nv, nj) = (s.num_vertices, s.num_joints);
    let read = |name: &str| fsb1::read(&array_path(path, name));
    let vertices_rest = rows(&read("vertices")?, nv)?;
    let joints_rest = rows(&read("joints")?, nj)?;
    let weights = read("skin_weights")?;
    let basis = read("shape_basis")?;
    if weights.shape() != [nv, nj] || basis.shape() != [nv, 3, NUM_SHAPE] {
        return Err(Error::Format(format!(
            "{}: array shapes do not match the sidecar counts",
            path.display()
        )));
    }
    let correctives = match (s.corrective_joints, s.corrective_scale) {
        (Some(joints), Some(scale)) => {
            let a = read("correctives")?;
            if a.shape() != [nv, 3, joints.len()] {
                return Err(Error::Format("corrective basis shape mismatch".into()));
            }
            Some(Correctives {
                basis: a.into_data(),
                joints,
                scale,
            })
        }
        (None, None) => None,
        _ => {
            return Err(Error::Format(
                "corrective joints and scale go together".into(),
            ))
        }
    };
    let parents = s
        .parents
        .iter()
        .map(|&p| if p < 0 { None } else { Some(p as usize) })
        .collect();
    BodyTemplate::new(TemplateParts {
        name: s.name,
        vertices_rest,
        faces: s.faces,
        parents,
        joints_rest,
        skin_weights: weights.into_data(),
        shape_basis: basis.into_data(),
        correctives,
    })
}
