//! Synthetic class-conditional corpora standing in for text prompts.
//!
//! * Point regime: each class is a Gaussian mixture in R², so every
//!   quantity has an exact oracle.
//! * Image regime: 16×16 single-channel shapes keyed by class.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::oracle::{Component, GaussianMixture};
use crate::error::{validate, Result};
use crate::rng::{normal, normal_mat};
use crate::tensor::Mat;

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_DIM: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    Point,
    Image,
}

/// Source of `(sample, class)` pairs.
pub trait ConditionalSource: Sync {
    fn data_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn sample_class(&self, class: usize, n: usize, rng: &mut dyn rand::RngCore) -> Mat;

    /// `n` samples with classes drawn uniformly.
    fn sample_batch(&self, n: usize, rng: &mut dyn rand::RngCore) -> (Mat, Vec<usize>) {
        let k = self.num_classes();
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut x = Mat::zeros(n, self.data_dim());
        for (r, &c) in classes.iter().enumerate() {
            let s = self.sample_class(c, 1, rng);
            x.row_mut(r).copy_from_slice(s.row(0));
        }
        (x, classes)
    }
}

/// Class-conditional Gaussian mixtures in R^d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCorpus {
    classes: Vec<GaussianMixture>,
}

impl PointCorpus {
    pub fn new(classes: Vec<GaussianMixture>) -> Result<Self> {
        validate(!classes.is_empty(), || "point corpus needs at least one class".into())?;
        let d = classes[0].dim();
        validate(classes.iter().all(|c| c.dim() == d), || {
            "all classes must share a dimension".into()
        })?;
        Ok(PointCorpus { classes })
    }

    /// Five classes: an isotropic Gaussian at the origin (class 0) ringed by
    /// four two-component mixtures at radius 2.5.
    pub fn default_2d() -> Self {
        let mut classes = vec![GaussianMixture::isotropic(&[(1.0, vec![0.0, 0.0])], 0.5)
            .expect("valid default class")];
        for k in 0..4 {
            let ang = std::f64::consts::FRAC_PI_2 * k as f64;
            let (c, s) = (ang.cos(), ang.sin());
            let center = [2.5 * c, 2.5 * s];
            let tangent = [-s, c];
            let comps: Vec<(f64, Vec<f64>)> = [-0.45, 0.45]
                .iter()
                .map(|o| (0.5, vec![center[0] + o * tangent[0], center[1] + o * tangent[1]]))
                .collect();
            classes.push(GaussianMixture::isotropic(&comps, 0.3).expect("valid default class"));
        }
        PointCorpus { classes }
    }

    pub fn class(&self, c: usize) -> &GaussianMixture {
        &self.classes[c]
    }

    pub fn classes(&self) -> &[GaussianMixture] {
        &self.classes
    }

    /// Equal-weight mixture over all classes (the null-condition target).
    pub fn unconditional(&self) -> GaussianMixture {
        let k = self.classes.len() as f64;
        let comps: Vec<Component> = self
            .classes
            .iter()
            .flat_map(|m| {
                m.components().iter().map(move |c| Component {
                    weight: c.weight / k,
                    mean: c.mean.clone(),
                    cov: c.cov.clone(),
                })
            })
            .collect();
        GaussianMixture::new(comps).expect("union of valid mixtures")
    }
}

impl ConditionalSource for PointCorpus {
    fn data_dim(&self) -> usize {
        self.classes[0].dim()
    }

    fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn sample_class(&self, class: usize, n: usize, rng: &mut dyn rand::RngCore) -> Mat {
        self.classes[class].sample(n, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Disk,
    Ring,
    HorizontalBar,
    VerticalBar,
    Plus,
    Cross,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Square,
        Shape::Disk,
        Shape::Ring,
        Shape::HorizontalBar,
        Shape::VerticalBar,
        Shape::Plus,
        Shape::Cross,
        Shape::Triangle,
    ];

    /// Inside test at normalized coordinates `(u, v) ∈ [-1, 1]²`, `v` pointing down.
    fn contains(self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        match self {
            Shape::Square => u.abs().max(v.abs()) < 0.5,
            Shape::Disk => r < 0.78,
            Shape::Ring => r > 0.4 && r < 0.72,
            Shape::HorizontalBar => v.abs() < 0.22 && u.abs() < 0.8,
            Shape::VerticalBar => u.abs() < 0.22 && v.abs() < 0.8,
            Shape::Plus => {
                (u.abs() < 0.18 && v.abs() < 0.75) || (v.abs() < 0.18 && u.abs() < 0.75)
            }
            Shape::Cross => {
                u.abs() < 0.8 && v.abs() < 0.8 && ((u - v).abs() < 0.25 || (u + v).abs() < 0.25)
            }
            Shape::Triangle => v > -0.6 && v < 0.6 && u.abs() < 0.5 * (v + 0.6) / 1.2 * 1.6,
        }
    }
}

/// Shapes rendered at ±1 with one-pixel jitter and additive pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageCorpus {
    shapes: Vec<Shape>,
    jitter: i32,
    pixel_noise: f64,
}

impl Default for ImageCorpus {
    fn default() -> Self {
        ImageCorpus {
            shapes: Shape::ALL.to_vec(),
            jitter: 1,
            pixel_noise: 0.05,
        }
    }
}

impl ImageCorpus {
    pub fn new(shapes: Vec<Shape>, jitter: i32, pixel_noise: f64) -> Result<Self> {
        validate(!shapes.is_empty(), || "image corpus needs at least one shape".into())?;
        Ok(ImageCorpus {
            shapes,
            jitter,
            pixel_noise,
        })
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Clean template with offset `(dx, dy)` in pixels.
    pub fn template(&self, class: usize, dx: i32, dy: i32) -> Vec<f64> {
        let shape = self.shapes[class];
        let mut out = vec![0.0; IMAGE_DIM];
        let side = IMAGE_SIDE as f64;
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let u = ((x as i32 - dx) as f64 + 0.5) / side * 2.0 - 1.0;
                let v = ((y as i32 - dy) as f64 + 0.5) / side * 2.0 - 1.0;
                out[y * IMAGE_SIDE + x] = if shape.contains(u, v) { 1.0 } else { -1.0 };
            }
        }
        out
    }
}

impl ConditionalSource for ImageCorpus {
    fn data_dim(&self) -> usize {
        IMAGE_DIM
    }

    fn num_classes(&self) -> usize {
        self.shapes.len()
    }

    fn sample_class(&self, class: usize, n: usize, rng: &mut dyn rand::RngCore) -> Mat {
        let mut out = Mat::zeros(n, IMAGE_DIM);
        for r in 0..n {
            let dx = rng.random_range(-self.jitter..=self.jitter);
            let dy = rng.random_range(-self.jitter..=self.jitter);
            let t = self.template(class, dx, dy);
            for (o, v) in out.row_mut(r).iter_mut().zip(t) {
                *o = v + self.pixel_noise * normal(rng);
            }
        }
        out
    }
}

/// A corpus of either regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Corpus {
    Points(PointCorpus),
    Images(ImageCorpus),
}

impl Corpus {
    pub fn for_regime(regime: Regime) -> Self {
        match regime {
            Regime::Point => Corpus::Points(PointCorpus::default_2d()),
            Regime::Image => Corpus::Images(ImageCorpus::default()),
        }
    }

    pub fn regime(&self) -> Regime {
        match self {
            Corpus::Points(_) => Regime::Point,
            Corpus::Images(_) => Regime::Image,
        }
    }

    pub fn source(&self) -> &dyn ConditionalSource {
        match self {
            Corpus::Points(p) => p,
            Corpus::Images(i) => i,
        }
    }

    pub fn points(&self) -> Option<&PointCorpus> {
        match self {
            Corpus::Points(p) => Some(p),
            Corpus::Images(_) => None,
        }
    }
}

/// Uniform noise in `[-1, 1]` shaped like corpus samples.
pub fn uniform_noise(n: usize, dim: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_vec(n, dim, (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Standard normal noise shaped like corpus samples.
pub fn gaussian_noise(n: usize, dim: usize, rng: &mut impl Rng) -> Mat {
    normal_mat(rng, n, dim)
}
