//! Tangent frames from local covariance, and projection of neighborhoods
//! onto the tangent plane.

use thiserror::Error;

use crate::par;
use crate::spatial::HashGrid;

/// Values within this distance of zero count as ties in the sign rules.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("degenerate neighborhood ({neighbors} neighbors, eigenvalues {eigenvalues:?})")]
pub struct DegenerateFrame {
    pub neighbors: usize,
    pub eigenvalues: [f64; 3],
}

/// Orthonormal right-handed frame `(i, j, normal)` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentFrame {
    pub normal: [f64; 3],
    pub i: [f64; 3],
    pub j: [f64; 3],
    /// Covariance eigenvalues, descending.
    pub eigenvalues: [f64; 3],
    /// True when this is the substitute frame for a degenerate neighborhood.
    pub degenerate: bool,
}

impl TangentFrame {
    /// Substitute frame: normal `+z`, axes `+x`, `+y`.
    pub fn fallback() -> Self {
        Self {
            normal: [0.0, 0.0, 1.0],
            i: [1.0, 0.0, 0.0],
            j: [0.0, 1.0, 0.0],
            eigenvalues: [0.0; 3],
            degenerate: true,
        }
    }

    /// Tangent-plane coordinates and signed plane distance of offset `r = q - p`.
    #[inline]
    pub fn project(&self, r: &[f64; 3]) -> ([f64; 2], f64) {
        ([dot(r, &self.i), dot(r, &self.j)], dot(r, &self.normal))
    }
}

/// Neighbors of one point expressed in its tangent frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProjectedNeighborhood {
    pub indices: Vec<u32>,
    /// `(r·i, r·j)` per neighbor.
    pub coords: Vec<[f64; 2]>,
    /// `r·n` per neighbor.
    pub distances: Vec<f64>,
}

#[inline]
pub(crate) fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(&a, &a).sqrt();
    (n > 0.0 && n.is_finite()).then(|| a.map(|x| x / n))
}

/// `C = Σ r rᵀ` with `r = q - p`, over the given neighbors of `p`.
pub fn covariance(positions: &[[f64; 3]], center: usize, neighbors: &[u32]) -> [[f64; 3]; 3] {
    let p = positions[center];
    let mut c = [[0.0; 3]; 3];
    for &q in neighbors {
        let q = positions[q as usize];
        let r = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
        for a in 0..3 {
            for b in a..3 {
                c[a][b] += r[a] * r[b];
            }
        }
    }
    c[1][0] = c[0][1];
    c[2][0] = c[0][2];
    c[2][1] = c[1][2];
    c
}

/// Eigenvalues of a symmetric 3x3 matrix, descending, in closed form.
pub fn symmetric_eigenvalues(a: &[[f64; 3]; 3]) -> [f64; 3] {
    let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let mut ev = if off == 0.0 {
        [a[0][0], a[1][1], a[2][2]]
    } else {
        let d = [a[0][0] - q, a[1][1] - q, a[2][2] - q];
        let p2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + 2.0 * off;
        let p = (p2 / 6.0).sqrt();
        let b = [
            [d[0] / p, a[0][1] / p, a[0][2] / p],
            [a[1][0] / p, d[1] / p, a[1][2] / p],
            [a[2][0] / p, a[2][1] / p, d[2] / p],
        ];
        let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
            - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
            + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
        let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
        let l1 = q + 2.0 * p * phi.cos();
        let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        [l1, 3.0 * q - l1 - l3, l3]
    };
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Unit eigenvector for a simple eigenvalue `lambda`, or `None` when the
/// eigenspace is (numerically) more than one-dimensional.
fn simple_eigenvector(a: &[[f64; 3]; 3], lambda: f64) -> Option<[f64; 3]> {
    let rows: [[f64; 3]; 3] =
        std::array::from_fn(|r| std::array::from_fn(|c| a[r][c] - if r == c { lambda } else { 0.0 }));
    let candidates = [
        cross(&rows[0], &rows[1]),
        cross(&rows[0], &rows[2]),
        cross(&rows[1], &rows[2]),
    ];
    let (best, norm2) = candidates
        .iter()
        .map(|v| (v, dot(v, v)))
        .fold((&candidates[0], -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    let scale = rows.iter().map(|r| dot(r, r)).fold(0.0, f64::max);
    if norm2 <= 1e-20 * scale * scale || norm2 == 0.0 {
        return None;
    }
    normalize(*best)
}

/// Some unit vector orthogonal to `v`.
fn any_orthogonal(v: &[f64; 3]) -> [f64; 3] {
    let axis = if v[0].abs() <= v[1].abs() && v[0].abs() <= v[2].abs() {
        [1.0, 0.0, 0.0]
    } else if v[1].abs() <= v[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    normalize(cross(v, &axis)).expect("non-zero input")
}

fn orient(v: [f64; 3], order: [usize; 3]) -> [f64; 3] {
    for k in order {
        if v[k] > TIE_EPS {
            return v;
        }
        if v[k] < -TIE_EPS {
            return v.map(|x| -x);
        }
    }
    v
}

/// Frame from a covariance matrix built over `neighbors` points.
///
/// The normal is the eigenvector of the smallest eigenvalue, oriented into
/// the `+z` hemisphere (ties resolved by `+y`, then `+x`). The first axis is
/// the eigenvector of the largest eigenvalue oriented towards `+x` (ties by
/// `+y`, then `+z`), or the projection of `+x` into the plane when the two
/// largest eigenvalues coincide. The second axis completes a right-handed frame.
pub fn frame_from_covariance(
    c: &[[f64; 3]; 3],
    neighbors: usize,
) -> Result<TangentFrame, DegenerateFrame> {
    let ev = symmetric_eigenvalues(c);
    let degenerate = DegenerateFrame {
        neighbors,
        eigenvalues: ev,
    };
    if neighbors < 3 || !(ev[0] > 0.0) || ev[1] < 1e-12 * ev[0] {
        return Err(degenerate);
    }
    let normal = match simple_eigenvector(c, ev[2]) {
        Some(n) => n,
        None => {
            // smallest eigenvalue is repeated: any vector orthogonal to the
            // dominant direction lies in its eigenspace
            let dominant = simple_eigenvector(c, ev[0]).ok_or(degenerate)?;
            any_orthogonal(&dominant)
        }
    };
    let normal = orient(normal, [2, 1, 0]);

    // restrict to the plane and solve the 2x2 problem there
    let a = any_orthogonal(&normal);
    let b = cross(&normal, &a);
    let ca = mat_vec(c, &a);
    let cb = mat_vec(c, &b);
    let (saa, sab, sbb) = (dot(&a, &ca), dot(&a, &cb), dot(&b, &cb));
    let gap = ((saa - sbb).powi(2) + 4.0 * sab * sab).sqrt();
    let i = if gap <= 1e-9 * (saa + sbb).abs() {
        let x = [1.0, 0.0, 0.0];
        let y = [0.0, 1.0, 0.0];
        let proj = |e: &[f64; 3]| {
            let d = dot(e, &normal);
            [e[0] - d * normal[0], e[1] - d * normal[1], e[2] - d * normal[2]]
        };
        let px = proj(&x);
        if dot(&px, &px) > 1e-12 {
            normalize(px).unwrap()
        } else {
            normalize(proj(&y)).unwrap()
        }
    } else {
        let theta = 0.5 * (2.0 * sab).atan2(saa - sbb);
        let (s, co) = theta.sin_cos();
        orient(
            normalize(std::array::from_fn(|k| co * a[k] + s * b[k])).unwrap(),
            [0, 1, 2],
        )
    };
    let j = cross(&normal, &i);
    Ok(TangentFrame {
        normal,
        i,
        j,
        eigenvalues: ev,
        degenerate: false,
    })
}

fn mat_vec(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|r| dot(&m[r], v))
}

/// Frame of point `index` from its neighbors within `radius`.
pub fn estimate_frame(
    grid: &HashGrid<'_>,
    index: usize,
    radius: f64,
) -> Result<TangentFrame, DegenerateFrame> {
    let neighbors = grid.radius_neighbors(index, radius);
    let c = covariance(grid.positions(), index, &neighbors);
    frame_from_covariance(&c, neighbors.len())
}

/// Frames for every point, with the fallback frame substituted where degenerate.
pub fn estimate_frames(grid: &HashGrid<'_>, radius: f64) -> Vec<TangentFrame> {
    par::map_range(grid.len(), |i| {
        estimate_frame(grid, i, radius).unwrap_or_else(|_| TangentFrame::fallback())
    })
}

/// Express the given neighbors of `center` in `frame`.
pub fn project_neighbors(
    positions: &[[f64; 3]],
    frame: &TangentFrame,
    center: usize,
    neighbors: &[u32],
) -> ProjectedNeighborhood {
    let p = positions[center];
    let mut out = ProjectedNeighborhood {
        indices: neighbors.to_vec(),
        coords: Vec::with_capacity(neighbors.len()),
        distances: Vec::with_capacity(neighbors.len()),
    };
    for &q in neighbors {
        let q = positions[q as usize];
        let (v, d) = frame.project(&[q[0] - p[0], q[1] - p[1], q[2] - p[2]]);
        out.coords.push(v);
        out.distances.push(d);
    }
    out
}

/// Project the neighbors of `center` within `radius` onto its tangent plane.
pub fn project_neighborhood(
    grid: &HashGrid<'_>,
    frame: &TangentFrame,
    center: usize,
    radius: f64,
) -> ProjectedNeighborhood {
    let neighbors = grid.radius_neighbors(center, radius);
    project_neighbors(grid.positions(), frame, center, &neighbors)
}
