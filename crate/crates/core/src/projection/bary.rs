//! Barycentric correspondence between two mesh topologies.

use std::path::Path;

use rayon::prelude::*;

use crate::bodymodel::{BodyTemplate, Vec3};
use crate::error::{shape_err, Error, Result};
use crate::numkit::fsb1::{self, take};
use crate::numkit::Array;

/// Per-target-vertex source triangle and barycentric weights. Weights are
/// stored in the triangle's corner order.
#[derive(Clone, Debug, PartialEq)]
pub struct BaryMap {
    source_vertices: usize,
    faces: Vec<u32>,
    corners: Vec<[u32; 3]>,
    weights: Vec<[f32; 3]>,
    degenerate: Vec<usize>,
}

impl BaryMap {
    /// Builds a map from explicit rows, validating them against the source
    /// face list.
    pub fn new(
        source_faces: &[[u32; 3]],
        source_vertices: usize,
        faces: Vec<u32>,
        weights: Vec<[f32; 3]>,
    ) -> Result<Self> {
        if faces.len() != weights.len() {
            return Err(shape_err!(
                "{} face indices for {} weight rows",
                faces.len(),
                weights.len()
            ));
        }
        let mut corners = Vec::with_capacity(faces.len());
        for (i, (&f, w)) in faces.iter().zip(&weights).enumerate() {
            let tri = *source_faces
                .get(f as usize)
                .ok_or_else(|| shape_err!("row {i} references face {f} past the face list"))?;
            if tri.iter().any(|&v| v as usize >= source_vertices) {
                return Err(shape_err!("face {f} references a missing vertex"));
            }
            let s = w[0] + w[1] + w[2];
            if w.iter().any(|x| !(*x >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(shape_err!(
                    "row {i} weights {w:?} are not a convex combination"
                ));
            }
            corners.push(tri);
        }
        Ok(Self {
            source_vertices,
            faces,
            corners,
            weights,
            degenerate: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn source_vertices(&self) -> usize {
        self.source_vertices
    }

    pub fn faces(&self) -> &[u32] {
        &self.faces
    }

    pub fn corners(&self) -> &[[u32; 3]] {
        &self.corners
    }

    pub fn weights(&self) -> &[[f32; 3]] {
        &self.weights
    }

    /// Target rows whose minimizing source face had zero area.
    pub fn degenerate_rows(&self) -> &[usize] {
        &self.degenerate
    }

    /// Face indices, weights and degenerate rows as an FSB1 bundle.
    pub fn save(&self, json: &Path) -> Result<()> {
        let n = self.len();
        let faces = Array::new(vec![n], self.faces.iter().map(|&f| f as f32).collect())?;
        let weights = Array::new(vec![n, 3], self.weights.iter().flatten().copied().collect())?;
        let mut degenerate = vec![0.0; n];
        for &r in &self.degenerate {
            degenerate[r] = 1.0;
        }
        let degenerate = Array::new(vec![n], degenerate)?;
        let meta = serde_json::json!({
            "kind": "bary_map",
            "rows": n,
            "source_vertices": self.source_vertices,
        });
        fsb1::write_bundle(
            json,
            meta,
            &[
                ("faces".into(), &faces),
                ("weights".into(), &weights),
                ("degenerate".into(), &degenerate),
            ],
        )
    }

    /// Loads a saved map, checking it against the source topology.
    pub fn load(json: &Path, source: &BodyTemplate) -> Result<Self> {
        #[derive(serde::Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Meta {
            kind: String,
            rows: usize,
            source_vertices: usize,
        }
        let (meta, mut t) = fsb1::read_bundle(json)?;
        let m: Meta = serde_json::from_value(meta).map_err(|e| Error::json(json, e))?;
        if m.kind != "bary_map" {
            return Err(Error::Format(format!(
                "{}: not a barycentric map",
                json.display()
            )));
        }
        if m.source_vertices != source.num_vertices() {
            return Err(shape_err!(
                "{}: map built for {} source vertices, template has {}",
                json.display(),
                m.source_vertices,
                source.num_vertices()
            ));
        }
        let faces = take(&mut t, "faces", &[m.rows])?;
        let weights = take(&mut t, "weights", &[m.rows, 3])?;
        let degenerate = take(&mut t, "degenerate", &[m.rows])?;
        let mut map = Self::new(
            source.faces(),
            m.source_vertices,
            faces.data().iter().map(|&f| f as u32).collect(),
            weights
                .data()
                .chunks_exact(3)
                .map(|w| [w[0], w[1], w[2]])
                .collect(),
        )?;
        map.degenerate = degenerate
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &d)| d != 0.0)
            .map(|(i, _)| i)
            .collect();
        Ok(map)
    }
}

/// Closest point on every source face for every target rest vertex,
/// computed in f64. Ties resolve to the lowest face index.
pub fn precompute_bary(source: &BodyTemplate, target: &BodyTemplate) -> Result<BaryMap> {
    let src: Vec<[f64; 3]> = source
        .vertices_rest()
        .iter()
        .map(|v| v.map(|x| x as f64))
        .collect();
    let faces = source.faces();
    if faces.is_empty() {
        return Err(shape_err!("source template has no faces"));
    }
    let rows: Vec<(u32, [f32; 3], bool)> = target
        .vertices_rest()
        .par_iter()
        .map(|p| {
            let p = p.map(|x| x as f64);
            let mut best = (f64::INFINITY, 0u32, [0.0f64; 3], false);
            for (fi, f) in faces.iter().enumerate() {
                let tri = f.map(|i| src[i as usize]);
                let (w, degenerate) = closest_on_triangle(p, tri);
                let q = combine(tri, w);
                let d = dist2(p, q);
                if d < best.0 {
                    best = (d, fi as u32, w, degenerate);
                }
            }
            (best.1, best.2.map(|x| x as f32), best.3)
        })
        .collect();
    let degenerate = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.2)
        .map(|(i, _)| i)
        .collect();
    let mut map = BaryMap::new(
        faces,
        source.num_vertices(),
        rows.iter().map(|r| r.0).collect(),
        rows.iter().map(|r| r.1).collect(),
    )?;
    map.degenerate = degenerate;
    Ok(map)
}

/// Applies the map: each output vertex is `(w0·a + w1·b) + w2·c`.
pub fn bridge(source: &[Vec3], map: &BaryMap) -> Result<Vec<Vec3>> {
    let mut out = vec![[0.0; 3]; map.len()];
    bridge_into(source, map, &mut out)?;
    Ok(out)
}

pub fn bridge_into(source: &[Vec3], map: &BaryMap, out: &mut [Vec3]) -> Result<()> {
    if source.len() != map.source_vertices {
        return Err(shape_err!(
            "map expects {} source vertices, got {}",
            map.source_vertices,
            source.len()
        ));
    }
    if out.len() != map.len() {
        return Err(shape_err!(
            "output holds {} rows, map {}",
            out.len(),
            map.len()
        ));
    }
    for ((o, c), w) in out.iter_mut().zip(&map.corners).zip(&map.weights) {
        let (a, b, d) = (
            source[c[0] as usize],
            source[c[1] as usize],
            source[c[2] as usize],
        );
        for k in 0..3 {
            o[k] = (w[0] * a[k] + w[1] * b[k]) + w[2] * d[k];
        }
    }
    Ok(())
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

fn combine(t: [[f64; 3]; 3], w: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|k| w[0] * t[0][k] + w[1] * t[1][k] + w[2] * t[2][k])
}

/// Barycentric weights of the closest point on triangle `t` to `p`
/// (Ericson, Real-Time Collision Detection §5.1.5). Zero-area triangles are
/// handled through their longest edge and reported as degenerate.
pub(crate) fn closest_on_triangle(p: [f64; 3], t: [[f64; 3]; 3]) -> ([f64; 3], bool) {
    let [a, b, c] = t;
    let ab = sub(b, a);
    let ac = sub(c, a);
    let n = cross(ab, ac);
    let scale = dot(ab, ab).max(dot(ac, ac));
    if dot(n, n) <= 1e-24 * scale * scale || scale == 0.0 {
        return (closest_on_longest_edge(p, t), true);
    }
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ([1.0, 0.0, 0.0], false);
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return ([0.0, 1.0, 0.0], false);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return ([1.0 - v, v, 0.0], false);
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return ([0.0, 0.0, 1.0], false);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return ([1.0 - w, 0.0, w], false);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return ([0.0, 1.0 - w, w], false);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    ([1.0 - v - w, v, w], false)
}

fn closest_on_longest_edge(p: [f64; 3], t: [[f64; 3]; 3]) -> [f64; 3] {
    let edges = [(0usize, 1usize), (1, 2), (2, 0)];
    let (i, j) = edges
        .into_iter()
        .fold(None::<(usize, usize, f64)>, |best, (i, j)| {
            let l = dist2(t[i], t[j]);
            match best {
                Some(b) if b.2 >= l => Some(b),
                _ => Some((i, j, l)),
            }
        })
        .map(|(i, j, _)| (i, j))
        .expect("three edges");
    let e = sub(t[j], t[i]);
    let l = dot(e, e);
    let s = if l == 0.0 {
        0.0
    } else {
        (dot(sub(p, t[i]), e) / l).clamp(0.0, 1.0)
    };
    let mut w = [0.0; 3];
    w[i] = 1.0 - s;
    w[j] += s;
    w
}
