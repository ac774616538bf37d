//! The U-shaped segmentation network over a three-level hierarchy.
//!
//! ```text
//! level 0   m(+D) → 32 → 32 ─────────────skip─────────────┐ concat 64 → 64 → 64 → n
//!              pool ↓                                       ↑ unpool
//! level 1     32(+D) → 64 → 64 ──────skip──────┐ concat 128 → 64 → 32
//!                      pool ↓                   ↑ unpool
//! level 2             64(+D) → 128 → 64 ────────┘
//! ```
//!
//! Every layer except the final 1×1 is a tangent convolution with a 3×3
//! image followed by a leaky ReLU. When the distance signal is selected, each
//! level's distance image is appended as an extra per-pixel channel to the
//! first gather of that level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Graph, ParamId, ParamStore, PoolMode, Real, Tensor, Var, LEAKY_SLOPE};
use crate::geometry::TangentFrame;
use crate::io::PointCloud;
use crate::precompute::{ConvPlan, Hierarchy, PoolPlan};

/// Hierarchy depth the network is built for.
pub const LEVELS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("plans do not fit the network: {0}")]
    PlanMismatch(String),
    #[error("input signal {0} requested but the cloud does not carry it")]
    MissingSignal(&'static str),
    #[error("invalid network configuration: {0}")]
    Config(String),
}

/// Which per-point signals feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSignals {
    /// Distance from the tangent plane (per-level distance images).
    pub distance: bool,
    /// Height above the lowest point, scaled by the scan's vertical extent.
    pub height: bool,
    /// Normals mapped to `[0, 1]`.
    pub normals: bool,
    /// Color.
    pub rgb: bool,
}

impl Default for InputSignals {
    fn default() -> Self {
        Self::parse("DHN").unwrap()
    }
}

impl InputSignals {
    /// Parse a compact code such as `"DHN"` or `"D,H,N,RGB"`.
    pub fn parse(code: &str) -> Result<Self, NetworkError> {
        let mut s = Self {
            distance: false,
            height: false,
            normals: false,
            rgb: false,
        };
        let mut rest = code.trim().to_ascii_uppercase().replace([',', ' ', '+'], "");
        if rest.contains("RGB") {
            s.rgb = true;
            rest = rest.replace("RGB", "");
        }
        for ch in rest.chars() {
            match ch {
                'D' => s.distance = true,
                'H' => s.height = true,
                'N' => s.normals = true,
                _ => return Err(NetworkError::Config(format!("unknown signal code {code:?}"))),
            }
        }
        if !(s.distance || s.height || s.normals || s.rgb) {
            return Err(NetworkError::Config("at least one input signal is required".into()));
        }
        Ok(s)
    }

    pub fn code(&self) -> String {
        let mut out = String::new();
        for (on, c) in [(self.distance, "D"), (self.height, "H"), (self.normals, "N"), (self.rgb, "RGB")] {
            if on {
                out.push_str(c);
            }
        }
        out
    }

    /// Input channel count `m`, counting one placeholder column for `D`.
    pub fn channels(&self) -> usize {
        self.distance as usize + self.height as usize + 3 * self.normals as usize + 3 * self.rgb as usize
    }
}

/// Widths of every layer. The default is the reference plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Channels {
    pub enc0: [usize; 2],
    pub enc1: [usize; 2],
    pub bottom: [usize; 2],
    pub dec1: [usize; 2],
    /// Width of the 3×3 layers after the top-level concatenation.
    pub top: usize,
}

impl Default for Channels {
    fn default() -> Self {
        Self {
            enc0: [32, 32],
            enc1: [64, 64],
            bottom: [128, 64],
            dec1: [64, 32],
            top: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub signals: InputSignals,
    pub classes: usize,
    pub channels: Channels,
    /// 3×3 layers between the top concatenation and the final 1×1 layer.
    pub top_convs: usize,
    /// Keep a zero input column for `D` so `m` counts it.
    pub distance_placeholder: bool,
    pub pool: PoolMode,
    pub bias: bool,
}

impl NetworkSpec {
    pub fn new(signals: InputSignals, classes: usize) -> Self {
        Self {
            signals,
            classes,
            channels: Channels::default(),
            top_convs: 2,
            distance_placeholder: true,
            pool: PoolMode::Average,
            bias: true,
        }
    }

    /// Width of the per-point input tensor.
    pub fn input_channels(&self) -> usize {
        self.signals.channels() - (self.signals.distance && !self.distance_placeholder) as usize
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.classes < 2 {
            return Err(NetworkError::Config("at least two classes are required".into()));
        }
        if self.input_channels() == 0 && !self.signals.distance {
            return Err(NetworkError::Config("no input channels".into()));
        }
        let c = &self.channels;
        let all = [c.enc0, c.enc1, c.bottom, c.dec1].concat();
        if all.iter().any(|&w| w == 0) || (self.top_convs > 0 && c.top == 0) {
            return Err(NetworkError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Hierarchy level of every 3×3 layer, in execution order.
    pub fn conv_levels(&self) -> Vec<usize> {
        let mut v = vec![0, 0, 1, 1, 2, 2, 1, 1];
        v.extend(std::iter::repeat(0).take(self.top_convs));
        v
    }
}

/// Receptive field in meters: every 3×3 layer at level `k` adds its
/// neighborhood radius `R = 2 r₀ 2ᵏ`.
pub fn receptive_field(spec: &NetworkSpec, r0: f64) -> f64 {
    let units: u64 = spec.conv_levels().iter().map(|&k| 2u64 << k).sum();
    r0 * units as f64
}

/// Per-point input features: `[D placeholder] [H] [N] [RGB]`, each in `[0, 1]`.
///
/// `H` is zero everywhere (with a warning) if the scan is flat.
pub fn assemble_inputs<T: Real>(
    cloud: &PointCloud,
    frames: &[TangentFrame],
    spec: &NetworkSpec,
) -> Result<Tensor<T>, NetworkError> {
    let n = cloud.len();
    if frames.len() != n {
        return Err(NetworkError::PlanMismatch(format!("{} frames for {n} points", frames.len())));
    }
    let s = spec.signals;
    if s.rgb && cloud.colors().is_none() {
        return Err(NetworkError::MissingSignal("RGB"));
    }
    let m = spec.input_channels();
    let (zmin, zmax) = cloud
        .positions()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[2]), hi.max(p[2])));
    let extent = zmax - zmin;
    if s.height && !(extent > 0.0) {
        log::warn!("scan has no vertical extent; height signal set to 0");
    }
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        if s.distance && spec.distance_placeholder {
            data.push(T::zero());
        }
        if s.height {
            let h = if extent > 0.0 { (cloud.positions()[i][2] - zmin) / extent } else { 0.0 };
            data.push(T::from_f64(h));
        }
        if s.normals {
            data.extend(frames[i].normal.map(|c| T::from_f64((c + 1.0) / 2.0)));
        }
        if s.rgb {
            data.extend(cloud.colors().unwrap()[i].map(T::from_f64));
        }
    }
    Ok(Tensor::new(n, m, data))
}

/// Plans of one hierarchy converted to the network's scalar type.
pub struct PlanSet<'h, T> {
    levels: Vec<LevelPlan<'h, T>>,
    pools: &'h [PoolPlan],
}

struct LevelPlan<'h, T> {
    conv: &'h ConvPlan,
    /// Weight matrix per slot; empty for single-slot plans, whose weights are all 1.
    weights: Vec<Vec<T>>,
    /// Normalized distance image, `N x L`.
    distance: Tensor<T>,
}

impl<'h, T: Real> PlanSet<'h, T> {
    pub fn new(h: &'h Hierarchy) -> Result<Self, NetworkError> {
        if h.levels.len() != LEVELS || h.pools.len() != LEVELS - 1 {
            return Err(NetworkError::PlanMismatch(format!(
                "network needs {LEVELS} levels, hierarchy has {}",
                h.levels.len()
            )));
        }
        let levels = h
            .levels
            .iter()
            .map(|l| {
                let conv = &l.conv;
                let weights = if conv.k > 1 {
                    (0..conv.k)
                        .map(|s| conv.weight_matrix(s).iter().map(|&w| T::from_f64(w)).collect())
                        .collect()
                } else {
                    Vec::new()
                };
                let distance = conv
                    .normalized_distances(l.geometry.radius)
                    .into_iter()
                    .map(T::from_f64)
                    .collect();
                LevelPlan {
                    conv,
                    weights,
                    distance: Tensor::new(conv.points, conv.pixels, distance),
                }
            })
            .collect();
        Ok(Self {
            levels,
            pools: &h.pools,
        })
    }

    pub fn points(&self, level: usize) -> usize {
        self.levels[level].conv.points
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w: ParamId,
    b: Option<ParamId>,
    level: usize,
    /// Appends the level's distance image to the gathered input.
    with_distance: bool,
}

/// Network weights plus the layer layout.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: NetworkSpec,
    pub params: ParamStore<T>,
    convs: Vec<Layer>,
    head: Layer,
}

const PIXELS: usize = 9;

impl<T: Real> Model<T> {
    /// Fresh weights drawn from `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self, NetworkError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = spec.channels;
        let d = spec.signals.distance as usize;
        let m = spec.input_channels();
        // (name, level, c_in, c_out, distance appended)
        let mut plan = vec![
            ("enc0.conv0", 0, m + d, c.enc0[0], d == 1),
            ("enc0.conv1", 0, c.enc0[0], c.enc0[1], false),
            ("enc1.conv0", 1, c.enc0[1] + d, c.enc1[0], d == 1),
            ("enc1.conv1", 1, c.enc1[0], c.enc1[1], false),
            ("bottom.conv0", 2, c.enc1[1] + d, c.bottom[0], d == 1),
            ("bottom.conv1", 2, c.bottom[0], c.bottom[1], false),
            ("dec1.conv0", 1, c.bottom[1] + c.enc1[1], c.dec1[0], false),
            ("dec1.conv1", 1, c.dec1[0], c.dec1[1], false),
        ];
        let top_names: Vec<String> = (0..spec.top_convs).map(|i| format!("dec0.conv{i}")).collect();
        let mut width = c.dec1[1] + c.enc0[1];
        for name in &top_names {
            plan.push((name.as_str(), 0, width, c.top, false));
            width = c.top;
        }
        let mut convs = Vec::new();
        for (name, level, cin, cout, with_distance) in plan {
            let w = params.add_uniform(&format!("{name}.w"), PIXELS * cin, cout, &mut rng);
            let b = spec.bias.then(|| params.add_zeros(&format!("{name}.b"), 1, cout));
            convs.push(Layer {
                w,
                b,
                level,
                with_distance,
            });
        }
        let w = params.add_uniform("head.w", width, spec.classes, &mut rng);
        let b = spec.bias.then(|| params.add_zeros("head.b", 1, spec.classes));
        Ok(Self {
            spec,
            params,
            convs,
            head: Layer {
                w,
                b,
                level: 0,
                with_distance: false,
            },
        })
    }

    fn conv<'g>(
        &self,
        g: &mut Graph<'g, T>,
        plans: &'g PlanSet<'g, T>,
        layer: &Layer,
        x: Var,
    ) -> Result<Var, NetworkError> {
        let lp = &plans.levels[layer.level];
        let conv = lp.conv;
        let mut m = if conv.k == 1 {
            g.gather(x, conv.index_matrix(0), PIXELS)?
        } else {
            let slots = (0..conv.k)
                .map(|s| g.gather(x, conv.index_matrix(s), PIXELS))
                .collect::<Result<Vec<_>, _>>()?;
            let weights: Vec<&'g [T]> = lp.weights.iter().map(|w| w.as_slice()).collect();
            g.weighted_mix(&slots, &weights, PIXELS)?
        };
        if layer.with_distance {
            let d = g.input(lp.distance.clone())?;
            m = g.concat_pixels(m, d, PIXELS)?;
        }
        let w = g.param(&self.params, layer.w)?;
        let b = layer.b.map(|b| g.param(&self.params, b)).transpose()?;
        let y = g.tangent_conv(m, w, b, PIXELS)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE)?)
    }

    /// Record the forward pass and return the level-0 logits.
    pub fn forward<'g>(
        &self,
        g: &mut Graph<'g, T>,
        plans: &'g PlanSet<'g, T>,
        inputs: Tensor<T>,
    ) -> Result<Var, NetworkError> {
        for (level, lp) in plans.levels.iter().enumerate() {
            if lp.conv.pixels != PIXELS {
                return Err(NetworkError::PlanMismatch(format!(
                    "level {level} has {} pixels, network uses {PIXELS}",
                    lp.conv.pixels
                )));
            }
        }
        if inputs.rows != plans.points(0) || inputs.cols != self.spec.input_channels() {
            return Err(NetworkError::PlanMismatch(format!(
                "inputs are {}x{}, expected {}x{}",
                inputs.rows,
                inputs.cols,
                plans.points(0),
                self.spec.input_channels()
            )));
        }
        let pool = self.spec.pool;
        let l = &self.convs;
        let x = g.input(inputs)?;
        let e0 = self.conv(g, plans, &l[0], x)?;
        let skip0 = self.conv(g, plans, &l[1], e0)?;
        let p1 = g.pool(skip0, &plans.pools[0], pool)?;
        let e1 = self.conv(g, plans, &l[2], p1)?;
        let skip1 = self.conv(g, plans, &l[3], e1)?;
        let p2 = g.pool(skip1, &plans.pools[1], pool)?;
        let b0 = self.conv(g, plans, &l[4], p2)?;
        let b1 = self.conv(g, plans, &l[5], b0)?;
        let u1 = g.unpool(b1, &plans.pools[1])?;
        debug_assert_eq!(g.value(u1).rows, g.value(skip1).rows);
        let c1 = g.concat(u1, skip1)?;
        let d1 = self.conv(g, plans, &l[6], c1)?;
        let d1 = self.conv(g, plans, &l[7], d1)?;
        let u0 = g.unpool(d1, &plans.pools[0])?;
        debug_assert_eq!(g.value(u0).rows, g.value(skip0).rows);
        let mut top = g.concat(u0, skip0)?;
        for layer in &l[8..] {
            top = self.conv(g, plans, layer, top)?;
        }
        let w = g.param(&self.params, self.head.w)?;
        let b = self.head.b.map(|b| g.param(&self.params, b)).transpose()?;
        Ok(g.conv1x1(top, w, b)?)
    }

    /// Logits for a whole hierarchy without keeping the graph.
    pub fn predict_logits(&self, h: &Hierarchy) -> Result<Tensor<T>, NetworkError> {
        let plans = PlanSet::new(h)?;
        let inputs = assemble_inputs(&h.base_cloud, &h.levels[0].geometry.frames, &self.spec)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &plans, inputs)?;
        Ok(g.value(out).clone())
    }
}

/// Row-wise argmax; ties go to the smaller class.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<u32> {
    (0..logits.rows)
        .map(|n| {
            let row = logits.row(n);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}
