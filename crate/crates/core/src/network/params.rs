//! Model configuration, parameter layout and initialization.
//!
//! All learnable arrays live in one flat list of matrices. A [`Layout`]
//! built from the [`ModelConfig`] names every slot with a typed [`ParamId`],
//! so the same structure indexes stored values, tape variables and
//! gradients alike.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::spectral::FilterWeights;

/// Gating nonlinearity of the fusion module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    #[default]
    Sigmoid,
    /// Softmax across channels at every timestep.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub width: usize,
    /// One interactor per entry; each entry is that interactor's filter length.
    pub scales: Vec<usize>,
    pub heads: usize,
    pub kernel: usize,
    pub temporal_dim: usize,
    pub gate: GateKind,
    pub filter_init_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 15,
            width: 64,
            scales: vec![16, 32, 64],
            heads: 4,
            kernel: 5,
            temporal_dim: 64,
            gate: GateKind::Sigmoid,
            filter_init_sigma: 0.02,
        }
    }
}

impl ModelConfig {
    /// Default topology at width `d`.
    pub fn with_width(d: usize) -> Self {
        Self {
            width: d,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.input_channels == 0 || self.width == 0 || self.temporal_dim == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.scales.is_empty() {
            return bad("at least one interactor scale is required".into());
        }
        if let Some(&l) = self.scales.iter().find(|&&l| l < 2) {
            return bad(format!("filter scales must be >= 2, got {l}"));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible into {} heads", self.width, self.heads));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad(format!("conv kernel must be odd, got {}", self.kernel));
        }
        if !(self.filter_init_sigma >= 0.0) {
            return bad("filter init sigma must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `y = x Wᵀ + b` with `W: [out x in]`, `b: [1 x out]`.
#[derive(Clone, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Temporal convolution; weight `[out x kernel·in]`.
#[derive(Clone, Debug)]
pub struct ConvIds {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

#[derive(Clone, Debug)]
pub struct ScaleIds {
    pub even: LinearIds,
    pub filter_re: ParamId,
    pub filter_im: ParamId,
    pub post: LinearIds,
}

#[derive(Clone, Debug)]
pub struct AttentionIds {
    pub query: LinearIds,
    /// No bias: a key offset shifts every score in a row equally and the
    /// softmax cancels it.
    pub key: ParamId,
    pub value: LinearIds,
    pub output: LinearIds,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub scales: Vec<ScaleIds>,
    pub attention: AttentionIds,
    pub gate: LinearIds,
    pub gate_kind: GateKind,
}

/// Gate order in the stacked rows is reset, update, candidate.
#[derive(Clone, Debug)]
pub struct GruIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub convs: [ConvIds; 2],
    pub blocks: [BlockIds; 2],
    pub gru: GruIds,
    pub pool: LinearIds,
    pub temporal_head: [LinearIds; 2],
    pub freq_head: [LinearIds; 2],
}

/// How a slot is filled at initialization.
#[derive(Clone, Copy, Debug)]
enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
    Zeros,
    Orthogonal,
    FilterRe,
    FilterIm,
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

#[derive(Default)]
struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn slot(&mut self, name: String, rows: usize, cols: usize, init: Init) -> ParamId {
        self.specs.push(Spec { name, rows, cols, init });
        ParamId(self.specs.len() - 1)
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> LinearIds {
        LinearIds {
            weight: self.slot(format!("{name}.weight"), out, inp, Init::FanIn(inp)),
            bias: self.slot(format!("{name}.bias"), 1, out, Init::FanIn(inp)),
        }
    }

    fn linear_zero_bias(&mut self, name: &str, inp: usize, out: usize) -> LinearIds {
        LinearIds {
            weight: self.slot(format!("{name}.weight"), out, inp, Init::FanIn(inp)),
            bias: self.slot(format!("{name}.bias"), 1, out, Init::Zeros),
        }
    }

    fn conv(&mut self, name: &str, inp: usize, out: usize, kernel: usize) -> ConvIds {
        let fan = inp * kernel;
        ConvIds {
            weight: self.slot(format!("{name}.weight"), out, fan, Init::FanIn(fan)),
            bias: self.slot(format!("{name}.bias"), 1, out, Init::FanIn(fan)),
            kernel,
        }
    }

    fn block(&mut self, name: &str, cfg: &ModelConfig) -> BlockIds {
        let d = cfg.width;
        let scales = cfg
            .scales
            .iter()
            .enumerate()
            .map(|(s, &l)| ScaleIds {
                even: self.linear(&format!("{name}.scale{s}.even"), d, d),
                filter_re: self.slot(format!("{name}.scale{s}.filter_re"), d, l, Init::FilterRe),
                filter_im: self.slot(format!("{name}.scale{s}.filter_im"), d, l, Init::FilterIm),
                post: self.linear(&format!("{name}.scale{s}.post"), d, d),
            })
            .collect();
        let attention = AttentionIds {
            query: self.linear(&format!("{name}.attn.query"), d, d),
            key: self.slot(format!("{name}.attn.key.weight"), d, d, Init::FanIn(d)),
            value: self.linear(&format!("{name}.attn.value"), d, d),
            output: self.linear(&format!("{name}.attn.output"), d, d),
            heads: cfg.heads,
        };
        BlockIds {
            scales,
            attention,
            gate: self.linear_zero_bias(&format!("{name}.gate"), 2 * d, d),
            gate_kind: cfg.gate,
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<Spec>) {
    let d = cfg.width;
    let mut b = Builder::default();
    let conv0 = b.conv("conv1", cfg.input_channels, d, cfg.kernel);
    let block0 = b.block("block1", cfg);
    let conv1 = b.conv("conv2", d, d, cfg.kernel);
    let block1 = b.block("block2", cfg);
    let gru = GruIds {
        w_ih: b.slot("gru.w_ih".into(), 3 * d, d, Init::FanIn(d)),
        w_hh: b.slot("gru.w_hh".into(), 3 * d, d, Init::Orthogonal),
        b_ih: b.slot("gru.b_ih".into(), 1, 3 * d, Init::FanIn(d)),
        b_hh: b.slot("gru.b_hh".into(), 1, 3 * d, Init::FanIn(d)),
    };
    let pool = b.linear("pool.score", d, 1);
    let temporal_head = [b.linear("temporal_head.0", d, d), b.linear("temporal_head.1", d, cfg.temporal_dim)];
    let freq_head = [b.linear("freq_head.0", d, d), b.linear("freq_head.1", d, 1)];
    let layout = Layout {
        convs: [conv0, conv1],
        blocks: [block0, block1],
        gru,
        pool,
        temporal_head,
        freq_head,
    };
    (layout, b.specs)
}

/// Rows of a `[3d x d]` matrix as three stacked `d x d` orthogonal blocks.
fn orthogonal_blocks(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    let mut remaining = rows;
    while remaining > 0 {
        let n = remaining.min(cols);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
        while basis.len() < n {
            let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
            for q in &basis {
                let p: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|a| *a /= norm);
                basis.push(v);
            }
        }
        for q in basis {
            out.extend(q);
        }
        remaining -= n;
    }
    out
}

/// All learnable arrays of the network.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Scalar> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Matrix<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let m = match s.init {
                Init::FanIn(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    Matrix::from_fn(s.rows, s.cols, |_, _| T::lit(rng.random_range(-bound..bound)))
                }
                Init::Zeros => Matrix::zeros(s.rows, s.cols),
                Init::Orthogonal => {
                    let v = orthogonal_blocks(s.rows, s.cols, &mut rng);
                    Matrix::from_vec(s.rows, s.cols, v.into_iter().map(T::lit).collect())?
                }
                Init::FilterRe | Init::FilterIm => {
                    // Both halves are drawn together at the real slot so the
                    // imaginary slot reads from the same stream position.
                    Matrix::zeros(s.rows, s.cols)
                }
            };
            names.push(s.name);
            tensors.push(m);
        }
        let mut params = Self {
            config,
            layout,
            names,
            tensors,
        };
        let sigma = params.config.filter_init_sigma;
        let filter_slots: Vec<(ParamId, ParamId)> = params
            .layout
            .blocks
            .iter()
            .flat_map(|b| b.scales.iter().map(|s| (s.filter_re, s.filter_im)))
            .collect();
        for (re, im) in filter_slots {
            let (d, l) = params.tensors[re.0].shape();
            let w = FilterWeights::<T>::init(d, l, sigma, &mut rng);
            params.tensors[re.0] = w.re;
            params.tensors[im.0] = w.im;
        }
        Ok(params)
    }

    /// Rebuilds a model from stored arrays, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Matrix<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if named.len() != specs.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} arrays, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (s, (name, m)) in specs.into_iter().zip(named) {
            if name != s.name || m.shape() != (s.rows, s.cols) {
                return Err(Error::ConfigMismatch(format!(
                    "array {name} {:?} does not match slot {} {:?}",
                    m.shape(),
                    s.name,
                    (s.rows, s.cols)
                )));
            }
            names.push(name);
            tensors.push(m);
        }
        Ok(Self {
            config,
            layout,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.tensors[id.0]
    }

    /// Replaces every array; shapes must match.
    pub fn set_tensors(&mut self, tensors: Vec<Matrix<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len()
            || tensors.iter().zip(&self.tensors).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape {
                op: "ModelParams::set_tensors",
                detail: "array list does not match the layout".into(),
            });
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// Records every array on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|m| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) })
            .collect();
        Bound { vars }
    }

    /// Wraps variables already on a tape, one per slot in layout order.
    pub fn bind_vars(&self, vars: &[Var]) -> Bound {
        assert_eq!(vars.len(), self.tensors.len(), "one variable per parameter slot");
        Bound { vars: vars.to_vec() }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
        }
    }
}

/// Tape variables for every parameter slot.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
