//! Optimizable representations θ and the render map `x = g(θ, π)`.
//!
//! * [`ParticleScene`]: one free sample per particle (prompt-specific).
//! * [`ConditionalGenerator`]: a network from condition (and optional
//!   latent) to a sample, either a direct MLP or a hypernetwork that emits
//!   the weights of a small per-condition decoder (prompt-amortized).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SparseRowMap, Tape, Var};
use crate::data::Regime;
use crate::denoiser::Condition;
use crate::error::{validate, Error, Result};
use crate::kernels::BatchedLinearShape;
use crate::nn::{add_dense, dense, init_weight, DenseIds, ParamSet};
use crate::rng::{normal, stream, Stream};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    #[default]
    Identity,
    Augmented,
}

/// Random similarity transform ranges: rotation in radians, log-scale, and
/// translation (data units for points, pixels for images).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentRanges {
    pub max_rotation: f64,
    pub max_log_scale: f64,
    pub max_translate: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            max_rotation: 0.2,
            max_log_scale: 0.1,
            max_translate: 1.0,
        }
    }
}

impl AugmentRanges {
    pub fn zero() -> Self {
        AugmentRanges {
            max_rotation: 0.0,
            max_log_scale: 0.0,
            max_translate: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub mode: RenderMode,
    pub ranges: AugmentRanges,
}

impl RenderSpec {
    pub fn identity() -> Self {
        RenderSpec::default()
    }

    pub fn augmented(ranges: AugmentRanges) -> Self {
        RenderSpec {
            mode: RenderMode::Augmented,
            ranges,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Similarity {
    angle: f64,
    scale: f64,
    tx: f64,
    ty: f64,
}

impl Similarity {
    fn draw(r: &AugmentRanges, rng: &mut impl Rng) -> Self {
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        Similarity {
            angle: sym(r.max_rotation),
            scale: sym(r.max_log_scale).exp(),
            tx: sym(r.max_translate),
            ty: sym(r.max_translate),
        }
    }

    /// Bilinear resampling map of a `side×side` image: output pixel `p`
    /// reads the input at the inverse-transformed location.
    fn image_map(&self, side: usize) -> SparseRowMap {
        let c = (side as f64 - 1.0) / 2.0;
        let (sn, cs) = self.angle.sin_cos();
        let mut map = Vec::with_capacity(side * side * 4);
        for i in 0..side {
            for j in 0..side {
                let (dx, dy) = (j as f64 - c - self.tx, i as f64 - c - self.ty);
                let u = (cs * dx + sn * dy) / self.scale + c;
                let v = (-sn * dx + cs * dy) / self.scale + c;
                let (u0, v0) = (u.floor(), v.floor());
                let (fu, fv) = (u - u0, v - v0);
                for (oy, wy) in [(0.0, 1.0 - fv), (1.0, fv)] {
                    for (ox, wx) in [(0.0, 1.0 - fu), (1.0, fu)] {
                        let w = wy * wx;
                        let (yy, xx) = (v0 + oy, u0 + ox);
                        if w != 0.0 && yy >= 0.0 && xx >= 0.0 && yy < side as f64 && xx < side as f64 {
                            map.push((i * side + j, yy as usize * side + xx as usize, w));
                        }
                    }
                }
            }
        }
        map
    }

    /// `x ↦ s R x` on a 2-D point (translation is added separately).
    fn point_map(&self) -> SparseRowMap {
        let (sn, cs) = self.angle.sin_cos();
        let s = self.scale;
        vec![(0, 0, s * cs), (0, 1, -s * sn), (1, 0, s * sn), (1, 1, s * cs)]
    }
}

/// Applies the render transform to an already-produced batch `x`.
pub fn render_transform(
    tape: &mut Tape,
    x: Var,
    spec: &RenderSpec,
    regime: Regime,
    rng: &mut impl Rng,
) -> Result<Var> {
    if spec.mode == RenderMode::Identity {
        return Ok(x);
    }
    let (rows, cols) = tape.value(x).shape();
    let draws: Vec<Similarity> = (0..rows).map(|_| Similarity::draw(&spec.ranges, rng)).collect();
    match regime {
        Regime::Image => {
            let side = (cols as f64).sqrt().round() as usize;
            validate(side * side == cols, || format!("width {cols} is not a square image"))?;
            let maps = Arc::new(draws.iter().map(|d| d.image_map(side)).collect());
            Ok(tape.sparse_map(x, maps, cols))
        }
        Regime::Point => {
            validate(cols == 2, || "point augmentation needs 2-D samples".into())?;
            let maps = Arc::new(draws.iter().map(Similarity::point_map).collect());
            let y = tape.sparse_map(x, maps, cols);
            let shift = Mat::from_rows(&draws.iter().map(|d| vec![d.tx, d.ty]).collect::<Vec<_>>());
            let shift = tape.constant(shift);
            Ok(tape.add(y, shift))
        }
    }
}

/// What to render: chosen particles, or conditions for a generator.
#[derive(Clone, Copy, Debug)]
pub enum SceneRequest<'a> {
    Particles(&'a [usize]),
    Conditions {
        conds: &'a [Condition],
        latent: Option<&'a Mat>,
    },
}

pub trait Scene {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn data_dim(&self) -> usize;
    /// Condition attached to each requested row.
    fn conditions(&self, req: SceneRequest<'_>) -> Result<Vec<Condition>>;
    /// Records the raw (untransformed) output on `tape`.
    fn produce(&self, tape: &mut Tape, vars: &[Var], req: SceneRequest<'_>) -> Result<Var>;
}

/// `g(θ, π)`: produce then transform. Identity mode yields the scene
/// output unchanged.
pub fn render(
    scene: &dyn Scene,
    tape: &mut Tape,
    vars: &[Var],
    req: SceneRequest<'_>,
    spec: &RenderSpec,
    regime: Regime,
    rng: &mut impl Rng,
) -> Result<Var> {
    let x = scene.produce(tape, vars, req)?;
    render_transform(tape, x, spec, regime, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleScene {
    params: ParamSet,
    conds: Vec<Condition>,
}

impl ParticleScene {
    pub fn new(init: Mat, conds: Vec<Condition>) -> Result<Self> {
        validate(init.rows() == conds.len() && init.rows() > 0, || {
            "need one condition per particle".into()
        })?;
        validate(init.is_finite(), || "particles must be finite".into())?;
        let mut params = ParamSet::new();
        params.push("particles", init);
        Ok(ParticleScene { params, conds })
    }

    pub fn particles(&self) -> &Mat {
        self.params.get(0)
    }

    pub fn num_particles(&self) -> usize {
        self.conds.len()
    }

    pub fn particle_conditions(&self) -> &[Condition] {
        &self.conds
    }
}

impl Scene for ParticleScene {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn data_dim(&self) -> usize {
        self.particles().cols()
    }

    fn conditions(&self, req: SceneRequest<'_>) -> Result<Vec<Condition>> {
        match req {
            SceneRequest::Particles(idx) => idx
                .iter()
                .map(|&i| {
                    self.conds
                        .get(i)
                        .copied()
                        .ok_or_else(|| Error::Validation(format!("no particle {i}")))
                })
                .collect(),
            SceneRequest::Conditions { .. } => Err(Error::Validation(
                "particle scenes are addressed by particle index".into(),
            )),
        }
    }

    fn produce(&self, tape: &mut Tape, vars: &[Var], req: SceneRequest<'_>) -> Result<Var> {
        let SceneRequest::Particles(idx) = req else {
            return Err(Error::Validation("particle scenes are addressed by particle index".into()));
        };
        validate(idx.iter().all(|&i| i < self.conds.len()), || "particle index out of range".into())?;
        Ok(tape.gather(vars[0], idx.to_vec()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorArch {
    DirectMlp,
    Hypernet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub arch: GeneratorArch,
    pub emb_dim: usize,
    pub noise_dim: usize,
    /// Hidden width of the direct MLP or of the hypernet trunk.
    pub hidden: usize,
    /// Hidden width of the generated decoder.
    pub decoder_hidden: usize,
    /// Fourier frequencies per axis for the image coordinate grid.
    pub grid_freqs: usize,
    /// Width of the learned seed vector fed to point-regime decoders.
    pub seed_dim: usize,
    pub spectral_norm: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            arch: GeneratorArch::Hypernet,
            emb_dim: 16,
            noise_dim: 0,
            hidden: 64,
            decoder_hidden: 24,
            grid_freqs: 3,
            seed_dim: 8,
            spectral_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum GenLayout {
    Direct {
        emb: usize,
        l1: DenseIds,
        l2: DenseIds,
        out: DenseIds,
    },
    Hyper {
        emb: usize,
        trunk: DenseIds,
        head: DenseIds,
        /// Learned decoder input (point regime only).
        seed: Option<usize>,
    },
}

/// Condition-to-sample network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGenerator {
    cfg: GeneratorConfig,
    regime: Regime,
    data_dim: usize,
    num_classes: usize,
    layout: GenLayout,
    params: ParamSet,
    /// Fixed coordinate features, `1 × (pixels·grid_dim)` (image regime).
    grid: Option<Mat>,
}

/// Fourier features of pixel centers in `[-1, 1]²`.
fn coordinate_grid(side: usize, freqs: usize) -> (Mat, usize) {
    let dim = 2 + 4 * freqs;
    let mut g = Vec::with_capacity(side * side * dim);
    for i in 0..side {
        for j in 0..side {
            let v = 2.0 * i as f64 / (side - 1) as f64 - 1.0;
            let u = 2.0 * j as f64 / (side - 1) as f64 - 1.0;
            g.push(u);
            g.push(v);
            for k in 1..=freqs {
                let w = std::f64::consts::PI * k as f64;
                g.extend_from_slice(&[(w * u).sin(), (w * u).cos(), (w * v).sin(), (w * v).cos()]);
            }
        }
    }
    (Mat::from_vec(1, side * side * dim, g), dim)
}

impl ConditionalGenerator {
    pub fn new(
        cfg: GeneratorConfig,
        regime: Regime,
        data_dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        validate(num_classes > 0 && cfg.emb_dim > 0 && cfg.hidden > 0, || {
            "generator needs classes, emb_dim and hidden".into()
        })?;
        let mut rng = stream(seed, Stream::Init);
        let mut params = ParamSet::new();
        let emb_table = init_weight(&mut rng, 1, num_classes * cfg.emb_dim, 1.0);
        let emb = params.push(
            "emb",
            Mat::from_vec(num_classes, cfg.emb_dim, emb_table.into_vec()),
        );
        let input = cfg.emb_dim + cfg.noise_dim;
        let mut grid = None;
        let layout = match cfg.arch {
            GeneratorArch::DirectMlp => {
                let l1 = add_dense(&mut params, &mut rng, "l1", input, cfg.hidden, 1.0);
                let l2 = add_dense(&mut params, &mut rng, "l2", cfg.hidden, cfg.hidden, 1.0);
                let out = add_dense(&mut params, &mut rng, "out", cfg.hidden, data_dim, 0.5);
                GenLayout::Direct { emb, l1, l2, out }
            }
            GeneratorArch::Hypernet => {
                let din = match regime {
                    Regime::Image => {
                        let side = (data_dim as f64).sqrt().round() as usize;
                        validate(side * side == data_dim && side > 1, || {
                            format!("width {data_dim} is not a square image")
                        })?;
                        let (g, gd) = coordinate_grid(side, cfg.grid_freqs);
                        grid = Some(g);
                        gd
                    }
                    Regime::Point => cfg.seed_dim,
                };
                let shapes = decoder_shapes(&cfg, regime, din, data_dim);
                let total: usize = shapes.iter().map(|s| s.din * s.dout + s.dout).sum();
                let trunk = add_dense(&mut params, &mut rng, "trunk", input, cfg.hidden, 1.0);
                let head = add_dense(&mut params, &mut rng, "head", cfg.hidden, total, 0.3);
                // Head bias starts as an ordinary decoder initialization so
                // every condition begins from a sensible network.
                let mut bias = Vec::with_capacity(total);
                for s in &shapes {
                    let w = init_weight(&mut rng, s.din, s.dout, 1.0);
                    bias.extend_from_slice(w.data());
                    bias.extend(std::iter::repeat_n(0.0, s.dout));
                }
                params.tensors_mut()[head.b] = Mat::from_vec(1, total, bias);
                let seed = match regime {
                    Regime::Point => Some(params.push(
                        "seed",
                        Mat::from_vec(1, cfg.seed_dim, (0..cfg.seed_dim).map(|_| normal(&mut rng)).collect()),
                    )),
                    Regime::Image => None,
                };
                GenLayout::Hyper {
                    emb,
                    trunk,
                    head,
                    seed,
                }
            }
        };
        Ok(ConditionalGenerator {
            cfg,
            regime,
            data_dim,
            num_classes,
            layout,
            params,
            grid,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of scalars the hypernet trunk emits per condition.
    pub fn decoder_weight_count(&self) -> Option<usize> {
        match &self.layout {
            GenLayout::Hyper { head, .. } => Some(self.params.get(head.b).cols()),
            GenLayout::Direct { .. } => None,
        }
    }

    fn input_var(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        conds: &[Condition],
        latent: Option<&Mat>,
    ) -> Result<Var> {
        let mut idx = Vec::with_capacity(conds.len());
        for c in conds {
            match c.class_id() {
                Some(k) if k < self.num_classes => idx.push(k),
                _ => {
                    return Err(Error::Validation(format!(
                        "condition {:?} is not in the generator vocabulary",
                        c.class_id()
                    )))
                }
            }
        }
        let emb = match self.layout {
            GenLayout::Direct { emb, .. } | GenLayout::Hyper { emb, .. } => emb,
        };
        let e = tape.gather(vars[emb], idx);
        if self.cfg.noise_dim == 0 {
            validate(latent.is_none_or(|z| z.cols() == 0), || {
                "generator has noise_dim 0 but a latent was given".into()
            })?;
            return Ok(e);
        }
        let z = latent.ok_or_else(|| Error::Validation("generator needs a latent".into()))?;
        validate(z.shape() == (conds.len(), self.cfg.noise_dim), || {
            format!("latent must be {}×{}", conds.len(), self.cfg.noise_dim)
        })?;
        let z = tape.constant(z.clone());
        Ok(tape.concat(&[e, z]))
    }

    /// Per-condition decoder weights emitted by the trunk (before spectral
    /// normalization), or `None` for the direct architecture.
    pub fn decoder_weights(&self, conds: &[Condition]) -> Result<Option<Mat>> {
        let GenLayout::Hyper { trunk, head, .. } = self.layout else {
            return Ok(None);
        };
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let inp = self.input_var(&mut tape, &vars, conds, None)?;
        let h = dense(&mut tape, inp, &vars, trunk, None);
        let h = tape.silu(h);
        let w = dense(&mut tape, h, &vars, head, None);
        Ok(Some(tape.value(w).clone()))
    }

    /// Records `G(y, z)` on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        conds: &[Condition],
        latent: Option<&Mat>,
    ) -> Result<Var> {
        let inp = self.input_var(tape, vars, conds, latent)?;
        let out = match &self.layout {
            GenLayout::Direct { l1, l2, out, .. } => {
                let h = dense(tape, inp, vars, *l1, None);
                let h = tape.silu(h);
                let h = dense(tape, h, vars, *l2, None);
                let h = tape.silu(h);
                dense(tape, h, vars, *out, None)
            }
            GenLayout::Hyper {
                trunk, head, seed, ..
            } => {
                let h = dense(tape, inp, vars, *trunk, None);
                let h = tape.silu(h);
                let w_all = dense(tape, h, vars, *head, None);
                let (x0, din, n) = match (self.regime, seed) {
                    (Regime::Image, _) => {
                        let g = self.grid.clone().expect("image generator has a grid");
                        let gd = g.cols() / self.data_dim;
                        (tape.constant(g), gd, self.data_dim)
                    }
                    (Regime::Point, Some(s)) => (vars[*s], self.cfg.seed_dim, 1),
                    (Regime::Point, None) => unreachable!("point hypernet has a seed"),
                };
                let shapes = decoder_shapes(&self.cfg, self.regime, din, self.data_dim);
                let mut x = x0;
                let mut off = 0;
                for (li, s) in shapes.iter().enumerate() {
                    let mut w = tape.slice_cols(w_all, off, s.din * s.dout);
                    off += s.din * s.dout;
                    let b = tape.slice_cols(w_all, off, s.dout);
                    off += s.dout;
                    if self.cfg.spectral_norm {
                        w = tape.spectral_norm(w, s.din, s.dout);
                    }
                    let shape = BatchedLinearShape {
                        n,
                        din: s.din,
                        dout: s.dout,
                    };
                    x = tape.batched_linear(x, w, b, shape);
                    if li + 1 < shapes.len() {
                        x = tape.silu(x);
                    }
                }
                x
            }
        };
        Ok(match self.regime {
            Regime::Image => tape.tanh(out),
            Regime::Point => out,
        })
    }

    /// Samples without gradient tracking.
    pub fn generate(&self, conds: &[Condition], latent: Option<&Mat>) -> Result<Mat> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let y = self.forward(&mut tape, &vars, conds, latent)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerShape {
    din: usize,
    dout: usize,
}

/// Two linear layers: `din → decoder_hidden → out`, where `out` is one
/// value per pixel (image) or the full point (point regime).
fn decoder_shapes(cfg: &GeneratorConfig, regime: Regime, din: usize, data_dim: usize) -> Vec<LayerShape> {
    let out = match regime {
        Regime::Image => 1,
        Regime::Point => data_dim,
    };
    vec![
        LayerShape {
            din,
            dout: cfg.decoder_hidden,
        },
        LayerShape {
            din: cfg.decoder_hidden,
            dout: out,
        },
    ]
}

impl Scene for ConditionalGenerator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn conditions(&self, req: SceneRequest<'_>) -> Result<Vec<Condition>> {
        match req {
            SceneRequest::Conditions { conds, .. } => Ok(conds.to_vec()),
            SceneRequest::Particles(_) => Err(Error::Validation(
                "generators are addressed by condition".into(),
            )),
        }
    }

    fn produce(&self, tape: &mut Tape, vars: &[Var], req: SceneRequest<'_>) -> Result<Var> {
        match req {
            SceneRequest::Conditions { conds, latent } => self.forward(tape, vars, conds, latent),
            SceneRequest::Particles(_) => Err(Error::Validation(
                "generators are addressed by condition".into(),
            )),
        }
    }
}
