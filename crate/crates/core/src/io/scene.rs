//! Synthetic labeled scenes built from planes, spheres and boxes.
//!
//! A [`SceneSpec`] is usually read from TOML:
//!
//! ```toml
//! density = 1200.0        # points per square meter
//! noise_sigma = 0.005     # isotropic Gaussian noise, meters
//!
//! [[primitive]]
//! kind = "plane"
//! origin = [0.0, 0.0, 0.0]
//! edge_u = [4.0, 0.0, 0.0]
//! edge_v = [0.0, 4.0, 0.0]
//! class = 0
//!
//! [[primitive]]
//! kind = "sphere"
//! center = [1.0, 1.0, 0.4]
//! radius = 0.4
//! class = 2
//!
//! [[primitive]]
//! kind = "box"
//! center = [2.0, 2.0, 0.3]
//! half_extents = [0.3, 0.2, 0.3]
//! yaw = 0.5               # radians about +z, optional
//! open_bottom = true      # skip the -z face, optional
//! class = 3
//! color = [0.8, 0.1, 0.1] # optional
//! ```

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cloud::{CloudError, PointCloud};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("density must be positive, got {0}")]
    Density(f64),
    #[error("noise sigma must be non-negative, got {0}")]
    Noise(f64),
    #[error("primitive {0} has zero extent")]
    Degenerate(usize),
    #[error("scene has no primitives")]
    Empty,
    #[error("invalid scene file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Parallelogram spanned by two edges from `origin`.
    Plane {
        origin: [f64; 3],
        edge_u: [f64; 3],
        edge_v: [f64; 3],
        class: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        color: Option<[f64; 3]>,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        class: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        color: Option<[f64; 3]>,
    },
    /// Box surface, rotated by `yaw` about the vertical axis through `center`.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        #[serde(default)]
        yaw: f64,
        #[serde(default)]
        open_bottom: bool,
        class: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        color: Option<[f64; 3]>,
    },
}

impl Primitive {
    pub fn class(&self) -> u32 {
        match self {
            Self::Plane { class, .. } | Self::Sphere { class, .. } | Self::Box { class, .. } => {
                *class
            }
        }
    }

    fn color(&self) -> Option<[f64; 3]> {
        match self {
            Self::Plane { color, .. } | Self::Sphere { color, .. } | Self::Box { color, .. } => {
                *color
            }
        }
    }

    /// Faces as (origin, edge_u, edge_v) parallelograms, or `None` for spheres.
    fn faces(&self) -> Option<Vec<[[f64; 3]; 3]>> {
        match self {
            Self::Plane {
                origin,
                edge_u,
                edge_v,
                ..
            } => Some(vec![[*origin, *edge_u, *edge_v]]),
            Self::Sphere { .. } => None,
            Self::Box {
                center,
                half_extents: h,
                yaw,
                open_bottom,
                ..
            } => {
                let (s, c) = yaw.sin_cos();
                let ax = [c * h[0], s * h[0], 0.0];
                let ay = [-s * h[1], c * h[1], 0.0];
                let az = [0.0, 0.0, h[2]];
                let at = |a: f64, b: f64, d: f64| {
                    std::array::from_fn::<f64, 3, _>(|k| {
                        center[k] + a * ax[k] + b * ay[k] + d * az[k]
                    })
                };
                let twice = |v: [f64; 3]| v.map(|x| 2.0 * x);
                let mut faces = vec![
                    [at(1.0, -1.0, -1.0), twice(ay), twice(az)],
                    [at(-1.0, -1.0, -1.0), twice(ay), twice(az)],
                    [at(-1.0, 1.0, -1.0), twice(ax), twice(az)],
                    [at(-1.0, -1.0, -1.0), twice(ax), twice(az)],
                    [at(-1.0, -1.0, 1.0), twice(ax), twice(ay)],
                ];
                if !open_bottom {
                    faces.push([at(-1.0, -1.0, -1.0), twice(ax), twice(ay)]);
                }
                Some(faces)
            }
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Self::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            _ => self
                .faces()
                .unwrap_or_default()
                .iter()
                .map(|f| norm(cross(f[1], f[2])))
                .sum(),
        }
    }

    fn is_degenerate(&self) -> bool {
        match self {
            Self::Sphere { radius, .. } => !(*radius > 0.0 && radius.is_finite()),
            Self::Box { half_extents, .. } => {
                !half_extents.iter().all(|&h| h > 0.0 && h.is_finite())
            }
            Self::Plane { .. } => !(self.area() > 0.0 && self.area().is_finite()),
        }
    }

    /// Distance from `p` to the primitive surface.
    pub fn distance_to_surface(&self, p: [f64; 3]) -> f64 {
        match self {
            Self::Sphere { center, radius, .. } => (norm(sub(p, *center)) - radius).abs(),
            _ => self
                .faces()
                .unwrap_or_default()
                .iter()
                .map(|f| distance_to_parallelogram(p, f))
                .fold(f64::INFINITY, f64::min),
        }
    }
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

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Distance to a rectangle face (edges assumed orthogonal, as produced here).
fn distance_to_parallelogram(p: [f64; 3], face: &[[f64; 3]; 3]) -> f64 {
    let [o, u, v] = *face;
    let r = sub(p, o);
    let s = (dot(r, u) / dot(u, u)).clamp(0.0, 1.0);
    let t = (dot(r, v) / dot(v, v)).clamp(0.0, 1.0);
    let q = std::array::from_fn(|k| o[k] + s * u[k] + t * v[k]);
    norm(sub(p, q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// Points per square meter of surface.
    pub density: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(rename = "primitive", default)]
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self, SceneError> {
        let spec: SceneSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(SceneError::Density(self.density));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SceneError::Noise(self.noise_sigma));
        }
        if self.primitives.is_empty() {
            return Err(SceneError::Empty);
        }
        if let Some(i) = self.primitives.iter().position(Primitive::is_degenerate) {
            return Err(SceneError::Degenerate(i));
        }
        Ok(())
    }

    pub fn total_area(&self) -> f64 {
        self.primitives.iter().map(Primitive::area).sum()
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    /// A small furnished room with five classes, laid out at random from `seed`.
    ///
    /// Classes: 0 floor, 1 wall, 2 ball (sphere resting on the floor),
    /// 3 box, 4 lamp (sphere hanging well above the floor).
    /// About 50k points at the default density.
    pub fn room(seed: u64, noise_sigma: f64) -> Self {
        const SIDE: f64 = 4.0;
        const WALL_HEIGHT: f64 = 2.5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a11);
        let mut primitives = vec![
            Primitive::Plane {
                origin: [0.0, 0.0, 0.0],
                edge_u: [SIDE, 0.0, 0.0],
                edge_v: [0.0, SIDE, 0.0],
                class: 0,
                color: None,
            },
            Primitive::Plane {
                origin: [0.0, SIDE, 0.0],
                edge_u: [SIDE, 0.0, 0.0],
                edge_v: [0.0, 0.0, WALL_HEIGHT],
                class: 1,
                color: None,
            },
            Primitive::Plane {
                origin: [0.0, 0.0, 0.0],
                edge_u: [0.0, SIDE, 0.0],
                edge_v: [0.0, 0.0, WALL_HEIGHT],
                class: 1,
                color: None,
            },
        ];
        // Some draws leave no room for the last objects; start the layout
        // over when a placement keeps failing.
        let objects = loop {
            if let Some(objects) = try_layout(&mut rng, SIDE) {
                break objects;
            }
        };
        primitives.extend(objects);
        SceneSpec {
            density: 1150.0,
            noise_sigma,
            primitives,
        }
    }
}

/// Two balls, two boxes and a lamp, or `None` if some object found no free
/// footprint within a bounded number of draws.
fn try_layout(rng: &mut ChaCha8Rng, side: f64) -> Option<Vec<Primitive>> {
    const ATTEMPTS: usize = 200;
    // footprints (x, y, radius) of objects already placed
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut place = |rng: &mut ChaCha8Rng, radius: f64| {
        for _ in 0..ATTEMPTS {
            let x = rng.gen_range(0.5 + radius..side - 0.2 - radius);
            let y = rng.gen_range(0.2 + radius..side - 0.5 - radius);
            let free = placed
                .iter()
                .all(|&(px, py, pr)| ((px - x).powi(2) + (py - y).powi(2)).sqrt() > pr + radius + 0.15);
            if free {
                placed.push((x, y, radius));
                return Some((x, y));
            }
        }
        None
    };
    let mut out = Vec::new();
    for _ in 0..2 {
        let r = rng.gen_range(0.3..0.5);
        let (x, y) = place(rng, r)?;
        out.push(Primitive::Sphere {
            center: [x, y, r],
            radius: r,
            class: 2,
            color: None,
        });
    }
    for _ in 0..2 {
        let h: [f64; 3] = [
            rng.gen_range(0.25..0.45),
            rng.gen_range(0.25..0.45),
            rng.gen_range(0.2..0.45),
        ];
        let yaw = rng.gen_range(0.0..PI / 2.0);
        let (x, y) = place(rng, (h[0] * h[0] + h[1] * h[1]).sqrt())?;
        out.push(Primitive::Box {
            center: [x, y, h[2]],
            half_extents: h,
            yaw,
            open_bottom: true,
            class: 3,
            color: None,
        });
    }
    let r = rng.gen_range(0.25..0.35);
    let x = rng.gen_range(1.0..side - 1.0);
    let y = rng.gen_range(1.0..side - 1.0);
    out.push(Primitive::Sphere {
        center: [x, y, rng.gen_range(1.6..2.0)],
        radius: r,
        class: 4,
        color: None,
    });
    Some(out)
}

/// Sample a labeled cloud from `spec`. Same spec and seed give the same cloud.
///
/// Each primitive contributes `round(density * area)` points; every point
/// carries its primitive's class, and colors are emitted when any primitive
/// declares one (others default to mid gray).
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<PointCloud, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    let mut colors = Vec::new();
    let want_colors = spec.primitives.iter().any(|p| p.color().is_some());
    for prim in &spec.primitives {
        let start = positions.len();
        match prim {
            Primitive::Sphere { center, radius, .. } => {
                let count = (spec.density * prim.area()).round() as usize;
                for _ in 0..count {
                    let dir = loop {
                        let d: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                        let n = norm(d);
                        if n > 1e-6 {
                            break d.map(|x| x / n);
                        }
                    };
                    positions.push(std::array::from_fn(|k| center[k] + radius * dir[k]));
                }
            }
            _ => {
                for [o, u, v] in prim.faces().unwrap_or_default() {
                    let count = (spec.density * norm(cross(u, v))).round() as usize;
                    for _ in 0..count {
                        let s: f64 = rng.gen();
                        let t: f64 = rng.gen();
                        positions.push(std::array::from_fn(|k| o[k] + s * u[k] + t * v[k]));
                    }
                }
            }
        }
        let added = positions.len() - start;
        labels.extend(std::iter::repeat(prim.class()).take(added));
        if want_colors {
            let c = prim.color().unwrap_or([0.5; 3]);
            colors.extend(std::iter::repeat(c.map(|x| x.clamp(0.0, 1.0))).take(added));
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        for p in &mut positions {
            for c in p.iter_mut() {
                *c += noise.sample(&mut rng);
            }
        }
    }
    let mut cloud = PointCloud::new(positions)?.with_labels(labels)?;
    if want_colors {
        cloud = cloud.with_colors(colors)?;
    }
    Ok(cloud)
}
