//! U-Net encoder–decoder with skip connections and a single-channel logistic
//! output.
//!
//! Each stage applies two same-padded 3×3 convolutions with ReLU. The encoder
//! halves resolution with 2×2 max-pooling; the decoder doubles it (learned
//! 2×2 transposed convolution, or nearest-neighbour + 3×3 convolution) and
//! concatenates the matching encoder features before its two convolutions.
//! A 1×1 convolution and a sigmoid produce per-pixel vessel probabilities.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{self, Tensor};
use crate::plane::Plane;
use crate::rng;

/// Smallest and largest representable output probabilities; outputs are
/// clamped so they stay strictly inside `(0, 1)` in `f32`.
pub const PROB_MIN: f32 = 5.960_464_5e-8; // 2^-24
pub const PROB_MAX: f32 = 1.0 - 5.960_464_5e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Transposed,
    NearestConv,
}

impl UpsampleMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            UpsampleMode::Transposed => "transposed",
            UpsampleMode::NearestConv => "nearest",
        }
    }
}

impl std::str::FromStr for UpsampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transposed" => Ok(UpsampleMode::Transposed),
            "nearest" => Ok(UpsampleMode::NearestConv),
            other => Err(Error::Config(format!(
                "unknown upsample mode '{other}' (expected transposed|nearest)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub init_seed: u64,
    pub upsample: UpsampleMode,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 16,
            init_seed: 0,
            upsample: UpsampleMode::Transposed,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config("depth and base_channels must be at least 1".into()));
        }
        if self.depth > 12 {
            return Err(Error::Config(format!("depth {} is unreasonably deep", self.depth)));
        }
        Ok(())
    }

    /// Spatial dimensions must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Named parameter array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    weight: usize,
    bias: usize,
    cout: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<[ConvRef; 2]>,
    mid: [ConvRef; 2],
    /// Indexed by level; each entry is `[up, conv1, conv2]`.
    dec: Vec<[ConvRef; 3]>,
    head: ConvRef,
}

enum Init {
    /// He-normal: std = sqrt(2 / fan_in), for layers followed by ReLU.
    Relu(usize),
    /// std = sqrt(1 / fan_in), for linear layers.
    Linear(usize),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Option<Init>,
}

fn plan(config: &UNetConfig) -> (Layout, Vec<ParamSpec>) {
    let mut specs: Vec<ParamSpec> = Vec::new();
    let conv = |specs: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, init: Init| {
        let cout = match name.as_str() {
            n if n.ends_with(".up") && config.upsample == UpsampleMode::Transposed => shape[1],
            _ => shape[0],
        };
        let weight = specs.len();
        specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape,
            init: Some(init),
        });
        specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            init: None,
        });
        ConvRef {
            weight,
            bias: weight + 1,
            cout,
        }
    };
    let c = |l| config.channels(l);
    let mut enc = Vec::new();
    for l in 0..config.depth {
        let cin = if l == 0 { 1 } else { c(l - 1) };
        let a = conv(
            &mut specs,
            format!("enc{l}.conv1"),
            vec![c(l), cin, 3, 3],
            Init::Relu(cin * 9),
        );
        let b = conv(
            &mut specs,
            format!("enc{l}.conv2"),
            vec![c(l), c(l), 3, 3],
            Init::Relu(c(l) * 9),
        );
        enc.push([a, b]);
    }
    let d = config.depth;
    let mid = [
        conv(
            &mut specs,
            "mid.conv1".into(),
            vec![c(d), c(d - 1), 3, 3],
            Init::Relu(c(d - 1) * 9),
        ),
        conv(
            &mut specs,
            "mid.conv2".into(),
            vec![c(d), c(d), 3, 3],
            Init::Relu(c(d) * 9),
        ),
    ];
    let mut dec = vec![None; d];
    for l in (0..d).rev() {
        let up = match config.upsample {
            UpsampleMode::Transposed => conv(
                &mut specs,
                format!("dec{l}.up"),
                vec![c(l + 1), c(l), 2, 2],
                Init::Linear(c(l + 1)),
            ),
            UpsampleMode::NearestConv => conv(
                &mut specs,
                format!("dec{l}.up"),
                vec![c(l), c(l + 1), 3, 3],
                Init::Linear(c(l + 1) * 9),
            ),
        };
        let a = conv(
            &mut specs,
            format!("dec{l}.conv1"),
            vec![c(l), 2 * c(l), 3, 3],
            Init::Relu(2 * c(l) * 9),
        );
        let b = conv(
            &mut specs,
            format!("dec{l}.conv2"),
            vec![c(l), c(l), 3, 3],
            Init::Relu(c(l) * 9),
        );
        dec[l] = Some([up, a, b]);
    }
    let head = conv(&mut specs, "head".into(), vec![1, c(0), 1, 1], Init::Linear(c(0)));
    (
        Layout {
            enc,
            mid,
            dec: dec.into_iter().map(Option::unwrap).collect(),
            head,
        },
        specs,
    )
}

#[derive(Clone, Debug)]
pub struct Model {
    config: UNetConfig,
    params: Vec<Param>,
    layout: Layout,
    checkpoint_id: Option<String>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Builds a U-Net with weights drawn deterministically from `config.init_seed`.
pub fn build_unet(config: &UNetConfig) -> Result<Model> {
    config.validate()?;
    let (layout, specs) = plan(config);
    let mut r = rng::seeded(config.init_seed);
    let params = specs
        .into_iter()
        .map(|s| {
            let len: usize = s.shape.iter().product();
            let data = match s.init {
                None => vec![0.0; len],
                Some(init) => {
                    let std = match init {
                        Init::Relu(fan_in) => (2.0 / fan_in as f64).sqrt(),
                        Init::Linear(fan_in) => (1.0 / fan_in as f64).sqrt(),
                    };
                    let normal = Normal::new(0.0, std).expect("finite std");
                    (0..len).map(|_| normal.sample(&mut r) as f32).collect()
                }
            };
            Param {
                name: s.name,
                shape: s.shape,
                data,
            }
        })
        .collect();
    Ok(Model {
        config: config.clone(),
        params,
        layout,
        checkpoint_id: None,
    })
}

/// Activations retained by a training forward pass.
pub struct Trace {
    enc: Vec<Stage>,
    mid: Stage,
    dec: Vec<Stage>,
    probs: Vec<f32>,
}

impl Trace {
    pub fn probs(&self) -> &[f32] {
        &self.probs
    }
}

struct Stage {
    input: Tensor,
    a1: Tensor,
    a2: Tensor,
}

fn empty() -> Tensor {
    Tensor::from_vec(0, 0, 0, Vec::new())
}

fn sigmoid(z: f32) -> f32 {
    let p = 1.0 / (1.0 + (-(z as f64)).exp());
    (p as f32).clamp(PROB_MIN, PROB_MAX)
}

impl Model {
    /// Reassembles a model from stored arrays, checking names and shapes.
    pub fn from_params(config: UNetConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = plan(&config);
        if specs.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter arrays, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.name != p.name || s.shape != p.shape || p.data.len() != s.shape.iter().product::<usize>() {
                return Err(Error::Incompatible(format!(
                    "parameter '{}' {:?} does not match expected '{}' {:?}",
                    p.name, p.shape, s.name, s.shape
                )));
            }
        }
        Ok(Model {
            config,
            params,
            layout,
            checkpoint_id: None,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn checkpoint_id(&self) -> Option<&str> {
        self.checkpoint_id.as_deref()
    }

    /// Tags the model with the id of the checkpoint it was saved to or loaded from.
    pub fn set_checkpoint_id(&mut self, id: String) {
        self.checkpoint_id = Some(id);
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let d = self.config.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!(
                "input {w}x{h} is not divisible by {d} (2^depth); pad the image first"
            )));
        }
        Ok(())
    }

    /// Rough peak working-set size in bytes of an inference pass over `h`×`w`.
    pub fn inference_bytes(&self, h: usize, w: usize) -> usize {
        let px = h * w;
        let c0 = self.config.base_channels;
        let skips: usize = (0..=self.config.depth)
            .map(|l| (self.config.channels(l) * px) >> (2 * l))
            .sum();
        let working = 7 * c0 * px;
        let scratch = 2 * 2 * c0 * 9 * 8192;
        4 * (skips + working + scratch + px)
    }

    fn conv(&self, r: ConvRef, x: &Tensor, relu: bool) -> Result<Tensor> {
        nn::conv3x3(x, &self.params[r.weight].data, &self.params[r.bias].data, r.cout, relu)
    }

    fn upsample(&self, r: ConvRef, x: &Tensor) -> Result<Tensor> {
        match self.config.upsample {
            UpsampleMode::Transposed => {
                nn::upconv2x2(x, &self.params[r.weight].data, &self.params[r.bias].data, r.cout)
            }
            UpsampleMode::NearestConv => self.conv(r, &nn::upsample_nearest2(x)?, false),
        }
    }

    fn run(&self, x: Tensor, keep: bool) -> Result<(Vec<f32>, Option<Trace>)> {
        let depth = self.config.depth;
        let lay = &self.layout;
        let mut enc = Vec::with_capacity(depth);
        let mut cur = x;
        for l in 0..depth {
            let a1 = self.conv(lay.enc[l][0], &cur, true)?;
            let a2 = self.conv(lay.enc[l][1], &a1, true)?;
            let pooled = nn::maxpool2(&a2)?;
            enc.push(if keep {
                Stage { input: cur, a1, a2 }
            } else {
                Stage {
                    input: empty(),
                    a1: empty(),
                    a2,
                }
            });
            cur = pooled;
        }
        let a1 = self.conv(lay.mid[0], &cur, true)?;
        let a2 = self.conv(lay.mid[1], &a1, true)?;
        let mut mid = if keep {
            Stage { input: cur, a1, a2 }
        } else {
            Stage {
                input: empty(),
                a1: empty(),
                a2,
            }
        };

        let mut dec: Vec<Option<Stage>> = (0..depth).map(|_| None).collect();
        for l in (0..depth).rev() {
            let up = {
                let src = if l + 1 == depth {
                    &mid.a2
                } else {
                    &dec[l + 1].as_ref().expect("decoded").a2
                };
                self.upsample(lay.dec[l][0], src)?
            };
            let cat = Tensor::concat(&enc[l].a2, &up)?;
            drop(up);
            let a1 = self.conv(lay.dec[l][1], &cat, true)?;
            let a2 = self.conv(lay.dec[l][2], &a1, true)?;
            dec[l] = Some(if keep {
                Stage { input: cat, a1, a2 }
            } else {
                drop(cat);
                enc[l].a2 = empty();
                if l + 1 == depth {
                    mid.a2 = empty();
                } else if let Some(s) = dec[l + 1].as_mut() {
                    s.a2 = empty();
                }
                Stage {
                    input: empty(),
                    a1: empty(),
                    a2,
                }
            });
        }
        let dec: Vec<Stage> = dec.into_iter().map(|s| s.expect("decoded")).collect();
        let head = lay.head;
        let mut probs = nn::head1x1(
            &dec[0].a2,
            &self.params[head.weight].data,
            self.params[head.bias].data[0],
        )?;
        probs.iter_mut().for_each(|z| *z = sigmoid(*z));
        let trace = keep.then(|| Trace {
            enc,
            mid,
            dec,
            probs: probs.clone(),
        });
        Ok((probs, trace))
    }

    /// Probability map for one `H×W` intensity plane.
    pub fn forward_one(&self, input: &Plane<f32>) -> Result<Plane<f32>> {
        let (w, h) = input.dims();
        self.check_dims(h, w)?;
        let x = Tensor::from_vec(1, h, w, input.as_slice().to_vec());
        let (probs, _) = self.run(x, false)?;
        Plane::from_vec(w, h, probs)
    }

    /// Batched forward pass; images are processed in parallel.
    pub fn forward(&self, batch: &[Plane<f32>]) -> Result<Vec<Plane<f32>>> {
        batch.par_iter().map(|p| self.forward_one(p)).collect()
    }

    /// Forward pass retaining the activations needed by [`Model::backward`].
    pub fn forward_train(&self, input: &Plane<f32>) -> Result<Trace> {
        let (w, h) = input.dims();
        self.check_dims(h, w)?;
        let x = Tensor::from_vec(1, h, w, input.as_slice().to_vec());
        Ok(self.run(x, true)?.1.expect("trace kept"))
    }

    fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }

    fn conv_back(
        &self,
        r: ConvRef,
        x: &Tensor,
        dout: &Tensor,
        grads: &mut [Vec<f32>],
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        let (gw, gb) = two_mut(grads, r.weight, r.bias);
        nn::conv3x3_backward(x, &self.params[r.weight].data, dout, gw, gb, need_dx)
    }

    /// Two stacked ReLU convolutions: returns the gradient at the stage input.
    fn stage_back(
        &self,
        refs: [ConvRef; 2],
        stage: &Stage,
        mut g: Tensor,
        grads: &mut [Vec<f32>],
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        nn::relu_backward(&mut g, &stage.a2);
        let mut g1 = self.conv_back(refs[1], &stage.a1, &g, grads, true)?.expect("dx");
        drop(g);
        nn::relu_backward(&mut g1, &stage.a1);
        self.conv_back(refs[0], &stage.input, &g1, grads, need_dx)
    }

    /// Gradients of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to each output probability.
    pub fn backward(&self, trace: &Trace, dprobs: &[f32]) -> Result<Vec<Vec<f32>>> {
        let depth = self.config.depth;
        let lay = &self.layout;
        let mut grads = self.zero_grads();
        if dprobs.len() != trace.probs.len() {
            return Err(Error::Contract("gradient length does not match output".into()));
        }
        let dz: Vec<f32> = trace
            .probs
            .iter()
            .zip(dprobs)
            .map(|(&p, &g)| g * p * (1.0 - p))
            .collect();
        let (gw, gb) = two_mut(&mut grads, lay.head.weight, lay.head.bias);
        let mut g = nn::head1x1_backward(&trace.dec[0].a2, &self.params[lay.head.weight].data, &dz, gw, gb)?;

        let mut skips = Vec::with_capacity(depth);
        for l in 0..depth {
            let [up, c1, c2] = lay.dec[l];
            let gcat = self
                .stage_back([c1, c2], &trace.dec[l], g, &mut grads, true)?
                .expect("dx");
            let (gskip, gup) = gcat.split_channels(self.config.channels(l));
            skips.push(gskip);
            let src = if l + 1 == depth {
                &trace.mid.a2
            } else {
                &trace.dec[l + 1].a2
            };
            g = match self.config.upsample {
                UpsampleMode::Transposed => {
                    let (gw, gb) = two_mut(&mut grads, up.weight, up.bias);
                    nn::upconv2x2_backward(src, &self.params[up.weight].data, &gup, gw, gb)?
                }
                UpsampleMode::NearestConv => {
                    let upsampled = nn::upsample_nearest2(src)?;
                    let d = self.conv_back(up, &upsampled, &gup, &mut grads, true)?.expect("dx");
                    nn::upsample_nearest2_backward(&d)?
                }
            };
        }

        let gin = self.stage_back(lay.mid, &trace.mid, g, &mut grads, true)?.expect("dx");
        let mut g = nn::maxpool2_backward(&trace.enc[depth - 1].a2, &gin)?;
        for l in (0..depth).rev() {
            g.add_assign(&skips[l]);
            let gin = self.stage_back(lay.enc[l], &trace.enc[l], g, &mut grads, l > 0)?;
            if l == 0 {
                break;
            }
            g = nn::maxpool2_backward(&trace.enc[l - 1].a2, &gin.expect("dx"))?;
        }
        Ok(grads)
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}
