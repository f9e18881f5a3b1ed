//! Planar environment: convex polygonal obstacles, the vine base pose and workspace bounds,
//! plus signed-distance queries between link collision spheres and obstacles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::Real;
use crate::dynamics::VineState;

const MIN_VERTEX_SPACING: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("obstacles[{index}]: {reason}")]
    BadObstacle { index: usize, reason: String },
    #[error("bounds: {0}")]
    BadBounds(String),
    #[error("base: {0}")]
    BadBase(String),
}

/// Convex, counter-clockwise polygon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Obstacle {
    vertices: Vec<[f64; 2]>,
    /// Outward unit normal of edge `i` (from vertex `i` to `i + 1`).
    normals: Vec<[f64; 2]>,
}

impl TryFrom<Vec<[f64; 2]>> for Obstacle {
    type Error = SceneError;
    fn try_from(v: Vec<[f64; 2]>) -> Result<Self, SceneError> {
        Obstacle::new(v).map_err(|reason| SceneError::BadObstacle { index: 0, reason })
    }
}

impl From<Obstacle> for Vec<[f64; 2]> {
    fn from(o: Obstacle) -> Self {
        o.vertices
    }
}

impl Obstacle {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self, String> {
        let n = vertices.len();
        if n < 3 {
            return Err(format!("needs at least 3 vertices, got {n}"));
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        let mut normals = Vec::with_capacity(n);
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let len = ex.hypot(ey);
            if len < MIN_VERTEX_SPACING {
                return Err(format!("vertices {i} and {} coincide", (i + 1) % n));
            }
            normals.push([ey / len, -ex / len]);
        }
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross <= 0.0 {
                return Err(format!(
                    "not strictly convex and counter-clockwise at vertex {}",
                    (i + 1) % n
                ));
            }
        }
        Ok(Obstacle { vertices, normals })
    }

    /// Axis-aligned rectangle.
    pub fn rect(min: [f64; 2], max: [f64; 2]) -> Result<Self, String> {
        Obstacle::new(vec![min, [max[0], min[1]], max, [min[0], max[1]]])
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        signed_distance(p, self) < 0.0
    }
}

/// Closest boundary feature of a polygon to a query point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    /// Closest point lies in the interior of edge `i` (or the point is inside, nearest edge `i`).
    Edge(usize),
    /// Closest point is vertex `i`.
    Vertex(usize),
}

/// Closest feature by value; lowest index wins ties.
pub fn closest_feature(p: [f64; 2], obs: &Obstacle) -> Feature {
    let verts = &obs.vertices;
    let n = verts.len();
    let mut inside = true;
    let mut best_line = f64::NEG_INFINITY;
    let mut best_line_edge = 0;
    for i in 0..n {
        let a = verts[i];
        let nrm = obs.normals[i];
        let s = nrm[0] * (p[0] - a[0]) + nrm[1] * (p[1] - a[1]);
        if s > 0.0 {
            inside = false;
        }
        if s > best_line {
            best_line = s;
            best_line_edge = i;
        }
    }
    if inside {
        return Feature::Edge(best_line_edge);
    }
    let mut best = f64::INFINITY;
    let mut feature = Feature::Edge(0);
    for i in 0..n {
        let a = verts[i];
        let b = verts[(i + 1) % n];
        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
        let t = ((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / (ex * ex + ey * ey);
        let (f, c) = if t <= 0.0 {
            (Feature::Vertex(i), a)
        } else if t >= 1.0 {
            (Feature::Vertex((i + 1) % n), b)
        } else {
            (Feature::Edge(i), [a[0] + t * ex, a[1] + t * ey])
        };
        let d = (p[0] - c[0]).hypot(p[1] - c[1]);
        if d < best {
            best = d;
            feature = f;
        }
    }
    feature
}

/// Signed distance and unit gradient, differentiable through the selected feature.
pub fn distance_and_normal<T: Real>(p: [T; 2], obs: &Obstacle) -> (T, [T; 2]) {
    let pv = [p[0].value(), p[1].value()];
    match closest_feature(pv, obs) {
        Feature::Edge(i) => {
            let a = obs.vertices[i];
            let nrm = obs.normals[i];
            let d = (p[0] - a[0]) * nrm[0] + (p[1] - a[1]) * nrm[1];
            (d, [T::cst(nrm[0]), T::cst(nrm[1])])
        }
        Feature::Vertex(k) => {
            let v = obs.vertices[k];
            let dx = p[0] - v[0];
            let dy = p[1] - v[1];
            let r2 = (dx * dx + dy * dy).value();
            if r2 == 0.0 {
                // lower-indexed of the two edges meeting at the vertex
                let nrm = obs.normals[k.saturating_sub(1)];
                return (T::zero(), [T::cst(nrm[0]), T::cst(nrm[1])]);
            }
            let r = (dx * dx + dy * dy).sqrt();
            (r, [dx / r, dy / r])
        }
    }
}

/// Positive outside, negative penetration depth inside, zero on the boundary.
pub fn signed_distance<T: Real>(point: [T; 2], obstacle: &Obstacle) -> T {
    distance_and_normal(point, obstacle).0
}

/// Unit outward normal of the closest feature.
pub fn distance_gradient<T: Real>(point: [T; 2], obstacle: &Obstacle) -> [T; 2] {
    distance_and_normal(point, obstacle).1
}

/// Workspace description loaded from a scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SceneFile", into = "SceneFile")]
pub struct Scene {
    pub obstacles: Vec<Obstacle>,
    /// Base pose (x, y, heading).
    pub base: [f64; 3],
    /// `[xmin, ymin, xmax, ymax]`.
    pub bounds: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    bounds: [f64; 4],
    base: [f64; 3],
    #[serde(default)]
    obstacles: Vec<Vec<[f64; 2]>>,
}

impl TryFrom<SceneFile> for Scene {
    type Error = SceneError;
    fn try_from(f: SceneFile) -> Result<Self, SceneError> {
        let obstacles = f
            .obstacles
            .into_iter()
            .enumerate()
            .map(|(index, v)| Obstacle::new(v).map_err(|reason| SceneError::BadObstacle { index, reason }))
            .collect::<Result<Vec<_>, _>>()?;
        Scene::new(obstacles, f.base, f.bounds)
    }
}

impl From<Scene> for SceneFile {
    fn from(s: Scene) -> Self {
        SceneFile {
            bounds: s.bounds,
            base: s.base,
            obstacles: s.obstacles.into_iter().map(|o| o.vertices).collect(),
        }
    }
}

impl Scene {
    pub fn new(obstacles: Vec<Obstacle>, base: [f64; 3], bounds: [f64; 4]) -> Result<Self, SceneError> {
        let [x0, y0, x1, y1] = bounds;
        if !(bounds.iter().all(|b| b.is_finite()) && x0 < x1 && y0 < y1) {
            return Err(SceneError::BadBounds(format!("expected xmin < xmax and ymin < ymax, got {bounds:?}")));
        }
        if !base.iter().all(|b| b.is_finite()) {
            return Err(SceneError::BadBase("non-finite value".into()));
        }
        let [bx, by, _] = base;
        if !(x0..=x1).contains(&bx) || !(y0..=y1).contains(&by) {
            return Err(SceneError::BadBase(format!("({bx}, {by}) lies outside the bounds")));
        }
        for (index, o) in obstacles.iter().enumerate() {
            if o.contains([bx, by]) {
                return Err(SceneError::BadObstacle {
                    index,
                    reason: "contains the base position".into(),
                });
            }
        }
        Ok(Scene { obstacles, base, bounds })
    }

    /// Scene without obstacles.
    pub fn open(base: [f64; 3], bounds: [f64; 4]) -> Self {
        Scene::new(Vec::new(), base, bounds).expect("open scene with base inside bounds")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn in_bounds(&self, p: [f64; 2]) -> bool {
        let [x0, y0, x1, y1] = self.bounds;
        (x0..=x1).contains(&p[0]) && (y0..=y1).contains(&p[1])
    }

    /// Smallest sphere-surface gap over all active links and obstacles (`+inf` if no obstacles).
    pub fn min_gap(&self, state: &VineState, radius: f64) -> f64 {
        let mut best = f64::INFINITY;
        for k in 0..state.n {
            let p = [state.q[k][0], state.q[k][1]];
            for o in &self.obstacles {
                best = best.min(signed_distance(p, o) - radius);
            }
        }
        best
    }
}

/// One candidate contact between a link sphere and an obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub link: usize,
    pub obstacle: usize,
    /// Sphere-surface gap, `signed_distance(center) - radius`.
    pub gap: f64,
    pub normal: [f64; 2],
}

/// All (link, obstacle) pairs whose gap is below `activation`, ordered by link then obstacle.
pub fn vine_contacts(state: &VineState, scene: &Scene, radius: f64, activation: f64) -> Vec<Contact> {
    let mut out = Vec::new();
    for link in 0..state.n {
        let p = [state.q[link][0], state.q[link][1]];
        for (obstacle, o) in scene.obstacles.iter().enumerate() {
            let (d, normal) = distance_and_normal(p, o);
            let gap = d - radius;
            if gap < activation {
                out.push(Contact { link, obstacle, gap, normal });
            }
        }
    }
    out
}
