//! Frozen convolutional feature extractors.
//!
//! Each architecture is described once as a flat program of [`Op`]s built
//! for a fixed input size. The same program yields the parameter inventory,
//! surrogate initialization, batch-norm calibration and inference. Layer
//! names and shapes follow the Keras application models; convolution kernels
//! are stored as `[cout, cin/groups, k, k]`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeometry};
use crate::nn::{he_normal, ParamStore};
use crate::tensor::Tensor;
use crate::util;

pub const WEIGHTS_DIR_ENV: &str = "DEFECTDIFF_WEIGHTS_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "resnet50v2")]
    ResNet50V2,
    #[serde(rename = "efficientnetb0")]
    EfficientNetB0,
    #[serde(rename = "mobilenetv2")]
    MobileNetV2,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [BackboneKind::ResNet50V2, BackboneKind::EfficientNetB0, BackboneKind::MobileNetV2];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::ResNet50V2 => "resnet50v2",
            BackboneKind::EfficientNetB0 => "efficientnetb0",
            BackboneKind::MobileNetV2 => "mobilenetv2",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            BackboneKind::ResNet50V2 => "ResNet50V2",
            BackboneKind::EfficientNetB0 => "EfficientNetB0",
            BackboneKind::MobileNetV2 => "MobileNetV2",
        }
    }

    /// Input convention applied inside the program, for run metadata.
    pub fn preprocessing(self) -> &'static str {
        match self {
            BackboneKind::ResNet50V2 | BackboneKind::MobileNetV2 => "x / 127.5 - 1",
            BackboneKind::EfficientNetB0 => "(x / 255 - imagenet_mean) / imagenet_std",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s) || k.display_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown backbone {s:?} (expected resnet50v2, efficientnetb0 or mobilenetv2)")))
    }
}

/// Architecture plus scale knobs. `width` is the channel multiplier
/// (`alpha` for MobileNetV2, the width coefficient for EfficientNet).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub width: f64,
    pub input_size: usize,
}

impl BackboneConfig {
    pub fn full(kind: BackboneKind) -> Self {
        Self {
            kind,
            width: 1.0,
            input_size: 224,
        }
    }

    /// Narrow, low-resolution variant that runs quickly on a CPU.
    pub fn desk(kind: BackboneKind) -> Self {
        let width = match kind {
            BackboneKind::MobileNetV2 => 0.35,
            _ => 0.25,
        };
        Self {
            kind,
            width,
            input_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width <= 4.0) {
            return Err(Error::config(format!("backbone width {} not in (0, 4]", self.width)));
        }
        if self.input_size < 32 {
            return Err(Error::config(format!("input_size {} below the minimum of 32", self.input_size)));
        }
        Ok(())
    }

    pub fn weights_file_name(&self) -> String {
        format!("{}_w{}.safetensors", self.kind.name(), self.width)
    }
}

/// Directory holding backbone weight files: explicit path, else the
/// `DEFECTDIFF_WEIGHTS_DIR` environment variable, else `./weights`.
pub fn resolve_weights_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("weights"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Relu6,
    Swish,
    Sigmoid,
}

impl Activation {
    fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Relu6 => v.clamp(0.0, 6.0),
            Activation::Swish => kernels::silu(v),
            Activation::Sigmoid => kernels::sigmoid(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Rescale { scale: f32, offset: f32 },
    Normalize { name: String },
    ZeroPad([usize; 4]),
    Conv { name: String, stride: usize, pad: usize, groups: usize, bias: bool },
    BatchNorm { name: String, eps: f64 },
    Act(Activation),
    MaxPool { kernel: usize, stride: usize },
    Subsample(usize),
    GlobalPool,
    Save(usize),
    Load(usize),
    AddSaved(usize),
    /// Current `[N, C, 1, 1]` gate times saved `[N, C, H, W]`.
    GateSaved(usize),
}

#[derive(Clone, Debug, PartialEq)]
enum Init {
    HeNormal(usize),
    Zeros,
    Ones,
    Values(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Padding {
    Same,
    Valid,
}

struct Builder {
    ops: Vec<Op>,
    specs: Vec<ParamSpec>,
    shape: [usize; 3],
    slots: Vec<[usize; 3]>,
}

fn same_pad(input: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(input);
    (total / 2, total - total / 2)
}

impl Builder {
    fn new(input_size: usize) -> Self {
        Self {
            ops: Vec::new(),
            specs: Vec::new(),
            shape: [3, input_size, input_size],
            slots: Vec::new(),
        }
    }

    fn c(&self) -> usize {
        self.shape[0]
    }

    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    fn rescale(&mut self, scale: f32, offset: f32) {
        self.ops.push(Op::Rescale { scale, offset });
    }

    fn normalize(&mut self, name: &str, mean: [f32; 3], std: [f32; 3]) {
        self.param(format!("{name}.mean"), vec![3], Init::Values(mean.to_vec()));
        self.param(format!("{name}.variance"), vec![3], Init::Values(std.iter().map(|s| s * s).collect()));
        self.param(format!("{name}.count"), vec![1], Init::Zeros);
        self.ops.push(Op::Normalize { name: name.to_string() });
    }

    fn zero_pad(&mut self, pad: [usize; 4]) {
        self.shape[1] += pad[0] + pad[1];
        self.shape[2] += pad[2] + pad[3];
        self.ops.push(Op::ZeroPad(pad));
    }

    /// TF-style padding used before stride-2 valid convolutions.
    fn correct_pad(&self, k: usize) -> [usize; 4] {
        let c = k / 2;
        let adj_h = 1 - self.shape[1] % 2;
        let adj_w = 1 - self.shape[2] % 2;
        [c - adj_h, c, c - adj_w, c]
    }

    fn conv_impl(&mut self, name: &str, cout: usize, k: usize, stride: usize, groups: usize, bias: bool, padding: Padding) {
        let cin = self.c();
        let mut pad = 0;
        if padding == Padding::Same {
            let (t, b) = same_pad(self.shape[1], k, stride);
            let (l, r) = same_pad(self.shape[2], k, stride);
            if t == b && l == r && t == l {
                pad = t;
            } else {
                self.zero_pad([t, b, l, r]);
            }
        }
        let geo = ConvGeometry { stride, pad, groups };
        self.param(format!("{name}.kernel"), vec![cout, cin / groups, k, k], Init::HeNormal(cin / groups * k * k));
        if bias {
            self.param(format!("{name}.bias"), vec![cout], Init::Zeros);
        }
        self.shape = [cout, geo.out_size(self.shape[1], k), geo.out_size(self.shape[2], k)];
        self.ops.push(Op::Conv {
            name: name.to_string(),
            stride,
            pad,
            groups,
            bias,
        });
    }

    fn conv(&mut self, name: &str, cout: usize, k: usize, stride: usize, bias: bool, padding: Padding) {
        self.conv_impl(name, cout, k, stride, 1, bias, padding);
    }

    fn depthwise(&mut self, name: &str, k: usize, stride: usize, padding: Padding) {
        let c = self.c();
        self.conv_impl(name, c, k, stride, c, false, padding);
    }

    fn bn(&mut self, name: &str, eps: f64) {
        let c = self.c();
        self.param(format!("{name}.gamma"), vec![c], Init::Ones);
        self.param(format!("{name}.beta"), vec![c], Init::Zeros);
        self.param(format!("{name}.moving_mean"), vec![c], Init::Zeros);
        self.param(format!("{name}.moving_variance"), vec![c], Init::Ones);
        self.ops.push(Op::BatchNorm {
            name: name.to_string(),
            eps,
        });
    }

    fn act(&mut self, a: Activation) {
        self.ops.push(Op::Act(a));
    }

    fn max_pool(&mut self, kernel: usize, stride: usize) {
        self.shape[1] = (self.shape[1] - kernel) / stride + 1;
        self.shape[2] = (self.shape[2] - kernel) / stride + 1;
        self.ops.push(Op::MaxPool { kernel, stride });
    }

    fn subsample(&mut self, stride: usize) {
        self.shape[1] = (self.shape[1] - 1) / stride + 1;
        self.shape[2] = (self.shape[2] - 1) / stride + 1;
        self.ops.push(Op::Subsample(stride));
    }

    fn global_pool(&mut self) {
        self.shape = [self.c(), 1, 1];
        self.ops.push(Op::GlobalPool);
    }

    fn save(&mut self) -> usize {
        self.slots.push(self.shape);
        self.ops.push(Op::Save(self.slots.len() - 1));
        self.slots.len() - 1
    }

    fn load(&mut self, slot: usize) {
        self.shape = self.slots[slot];
        self.ops.push(Op::Load(slot));
    }

    fn add(&mut self, slot: usize) {
        assert_eq!(self.shape, self.slots[slot], "residual shapes");
        self.ops.push(Op::AddSaved(slot));
    }

    fn gate(&mut self, slot: usize) {
        assert_eq!(self.shape[0], self.slots[slot][0], "gate channels");
        self.shape = self.slots[slot];
        self.ops.push(Op::GateSaved(slot));
    }
}

/// Keras `_make_divisible`.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = d.max(((v + d / 2.0) as usize / divisor * divisor) as f64);
    if new_v < 0.9 * v {
        new_v += d;
    }
    new_v as usize
}

fn resnet50v2(b: &mut Builder, width: f64) {
    let f = |n: usize| make_divisible(n as f64 * width, 8);
    b.rescale(1.0 / 127.5, -1.0);
    b.zero_pad([3; 4]);
    b.conv("conv1_conv", f(64), 7, 2, true, Padding::Valid);
    b.zero_pad([1; 4]);
    b.max_pool(3, 2);
    for (stack, (filters, blocks, stride)) in [(64, 3, 2), (128, 4, 2), (256, 6, 2), (512, 3, 1)].into_iter().enumerate() {
        let name = format!("conv{}", stack + 2);
        for i in 0..blocks {
            let block_stride = if i == blocks - 1 { stride } else { 1 };
            resnet_block(b, f(filters), block_stride, i == 0, &format!("{name}_block{}", i + 1));
        }
    }
    b.bn("post_bn", 1.001e-5);
    b.act(Activation::Relu);
}

fn resnet_block(b: &mut Builder, filters: usize, stride: usize, conv_shortcut: bool, name: &str) {
    let eps = 1.001e-5;
    let x_in = b.save();
    b.bn(&format!("{name}_preact_bn"), eps);
    b.act(Activation::Relu);
    let preact = b.save();
    let shortcut = if conv_shortcut {
        b.conv(&format!("{name}_0_conv"), 4 * filters, 1, stride, true, Padding::Valid);
        b.save()
    } else if stride > 1 {
        b.load(x_in);
        b.subsample(stride);
        b.save()
    } else {
        x_in
    };
    b.load(preact);
    b.conv(&format!("{name}_1_conv"), filters, 1, 1, false, Padding::Valid);
    b.bn(&format!("{name}_1_bn"), eps);
    b.act(Activation::Relu);
    b.zero_pad([1; 4]);
    b.conv(&format!("{name}_2_conv"), filters, 3, stride, false, Padding::Valid);
    b.bn(&format!("{name}_2_bn"), eps);
    b.act(Activation::Relu);
    b.conv(&format!("{name}_3_conv"), 4 * filters, 1, 1, true, Padding::Valid);
    b.add(shortcut);
}

fn mobilenetv2(b: &mut Builder, alpha: f64) {
    let eps = 1e-3;
    b.rescale(1.0 / 127.5, -1.0);
    b.conv("Conv1", make_divisible(32.0 * alpha, 8), 3, 2, false, Padding::Same);
    b.bn("bn_Conv1", eps);
    b.act(Activation::Relu6);
    let blocks: [(usize, usize, usize); 17] = [
        (16, 1, 1),
        (24, 2, 6),
        (24, 1, 6),
        (32, 2, 6),
        (32, 1, 6),
        (32, 1, 6),
        (64, 2, 6),
        (64, 1, 6),
        (64, 1, 6),
        (64, 1, 6),
        (96, 1, 6),
        (96, 1, 6),
        (96, 1, 6),
        (160, 2, 6),
        (160, 1, 6),
        (160, 1, 6),
        (320, 1, 6),
    ];
    for (id, (filters, stride, expansion)) in blocks.into_iter().enumerate() {
        let in_ch = b.c();
        let pointwise = make_divisible((filters as f64 * alpha).trunc(), 8);
        let prefix = if id == 0 {
            "expanded_conv_".to_string()
        } else {
            format!("block_{id}_")
        };
        let x_in = b.save();
        if id != 0 {
            b.conv(&format!("{prefix}expand"), expansion * in_ch, 1, 1, false, Padding::Same);
            b.bn(&format!("{prefix}expand_BN"), eps);
            b.act(Activation::Relu6);
        }
        if stride == 2 {
            b.zero_pad(b.correct_pad(3));
            b.depthwise(&format!("{prefix}depthwise"), 3, 2, Padding::Valid);
        } else {
            b.depthwise(&format!("{prefix}depthwise"), 3, 1, Padding::Same);
        }
        b.bn(&format!("{prefix}depthwise_BN"), eps);
        b.act(Activation::Relu6);
        b.conv(&format!("{prefix}project"), pointwise, 1, 1, false, Padding::Same);
        b.bn(&format!("{prefix}project_BN"), eps);
        if in_ch == pointwise && stride == 1 {
            b.add(x_in);
        }
    }
    let last = if alpha > 1.0 { make_divisible(1280.0 * alpha, 8) } else { 1280 };
    b.conv("Conv_1", last, 1, 1, false, Padding::Same);
    b.bn("Conv_1_bn", eps);
    b.act(Activation::Relu6);
}

fn efficientnetb0(b: &mut Builder, width: f64) {
    let eps = 1e-3;
    let round_filters = |f: usize| make_divisible(f as f64 * width, 8);
    b.rescale(1.0 / 255.0, 0.0);
    b.normalize("normalization", [0.485, 0.456, 0.406], [0.229, 0.224, 0.225]);
    b.zero_pad(b.correct_pad(3));
    b.conv("stem_conv", round_filters(32), 3, 2, false, Padding::Valid);
    b.bn("stem_bn", eps);
    b.act(Activation::Swish);
    // (kernel, repeats, filters_in, filters_out, expand_ratio, stride)
    let args: [(usize, usize, usize, usize, usize, usize); 7] = [
        (3, 1, 32, 16, 1, 1),
        (3, 2, 16, 24, 6, 2),
        (5, 2, 24, 40, 6, 2),
        (3, 3, 40, 80, 6, 2),
        (5, 3, 80, 112, 6, 1),
        (5, 4, 112, 192, 6, 2),
        (3, 1, 192, 320, 6, 1),
    ];
    for (i, (k, repeats, fin, fout, expand, stride)) in args.into_iter().enumerate() {
        let fout = round_filters(fout);
        let mut fin = round_filters(fin);
        let mut stride = stride;
        for j in 0..repeats {
            if j > 0 {
                stride = 1;
                fin = fout;
            }
            let name = format!("block{}{}_", i + 1, (b'a' + j as u8) as char);
            efficient_block(b, &name, fin, fout, k, stride, expand);
        }
    }
    b.conv("top_conv", round_filters(1280), 1, 1, false, Padding::Same);
    b.bn("top_bn", eps);
    b.act(Activation::Swish);
}

fn efficient_block(b: &mut Builder, name: &str, fin: usize, fout: usize, k: usize, stride: usize, expand: usize) {
    let eps = 1e-3;
    let filters = fin * expand;
    let x_in = b.save();
    if expand != 1 {
        b.conv(&format!("{name}expand_conv"), filters, 1, 1, false, Padding::Same);
        b.bn(&format!("{name}expand_bn"), eps);
        b.act(Activation::Swish);
    }
    if stride == 2 {
        b.zero_pad(b.correct_pad(k));
        b.depthwise(&format!("{name}dwconv"), k, 2, Padding::Valid);
    } else {
        b.depthwise(&format!("{name}dwconv"), k, 1, Padding::Same);
    }
    b.bn(&format!("{name}bn"), eps);
    b.act(Activation::Swish);
    let main = b.save();
    let filters_se = ((fin as f64 * 0.25) as usize).max(1);
    b.global_pool();
    b.conv(&format!("{name}se_reduce"), filters_se, 1, 1, true, Padding::Same);
    b.act(Activation::Swish);
    b.conv(&format!("{name}se_expand"), filters, 1, 1, true, Padding::Same);
    b.act(Activation::Sigmoid);
    b.gate(main);
    b.conv(&format!("{name}project_conv"), fout, 1, 1, false, Padding::Same);
    b.bn(&format!("{name}project_bn"), eps);
    if stride == 1 && fin == fout {
        b.add(x_in);
    }
}

/// Compiled architecture: op program, parameter inventory and output shape.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: BackboneConfig,
    ops: Vec<Op>,
    specs: Vec<ParamSpec>,
    num_slots: usize,
    output_shape: [usize; 3],
}

impl Architecture {
    pub fn new(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(config.input_size);
        match config.kind {
            BackboneKind::ResNet50V2 => resnet50v2(&mut b, config.width),
            BackboneKind::EfficientNetB0 => efficientnetb0(&mut b, config.width),
            BackboneKind::MobileNetV2 => mobilenetv2(&mut b, config.width),
        }
        Ok(Self {
            config: config.clone(),
            ops: b.ops,
            specs: b.specs,
            num_slots: b.slots.len(),
            output_shape: b.shape,
        })
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    /// Pooled feature dimension.
    pub fn feature_dim(&self) -> usize {
        self.output_shape[0]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.output_shape
    }

    /// Backbone parameters without any classification top, counting
    /// batch-norm moving statistics.
    pub fn parameter_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Count with the 1000-way ImageNet dense top, the figure usually quoted
    /// for these architectures.
    pub fn parameter_count_with_imagenet_top(&self) -> usize {
        self.parameter_count() + self.feature_dim() * 1000 + 1000
    }

    fn empty_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for s in &self.specs {
            store.insert(s.name.clone(), Tensor::zeros(s.shape.clone()), false);
        }
        store
    }
}

/// A frozen backbone with loaded weights.
#[derive(Clone, Debug)]
pub struct Backbone {
    arch: Architecture,
    params: ParamStore,
    weights_sha256: String,
}

enum Params<'a> {
    Frozen(&'a ParamStore),
    Calibrate(&'a mut ParamStore),
}

impl Params<'_> {
    fn store(&self) -> &ParamStore {
        match self {
            Params::Frozen(p) => p,
            Params::Calibrate(p) => p,
        }
    }
}

fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.by_name(name).unwrap_or_else(|| panic!("parameter {name} missing from a store built from the same program"))
}

impl Backbone {
    /// Seeded stand-in for pretrained weights: He-normal kernels, zero biases
    /// and batch-norm statistics calibrated on a seeded synthetic batch.
    pub fn surrogate(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for s in &arch.specs {
            let t = match &s.init {
                Init::HeNormal(fan_in) => he_normal(s.shape.clone(), *fan_in, &mut rng),
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Ones => Tensor::full(s.shape.clone(), 1.0),
                Init::Values(v) => Tensor::from_vec(s.shape.clone(), v.clone())?,
            };
            params.insert(s.name.clone(), t, false);
        }
        let batch = calibration_batch(config.input_size, seed);
        run_ops(&arch, Params::Calibrate(&mut params), batch)?;
        let bytes = params.to_safetensors()?;
        Ok(Self {
            arch,
            params,
            weights_sha256: util::sha256_hex(&bytes),
        })
    }

    /// Loads `<dir>/<kind>_w<width>.safetensors`, checking `expected_sha256`
    /// when given.
    pub fn load(config: &BackboneConfig, dir: &Path, expected_sha256: Option<&str>) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let path = dir.join(config.weights_file_name());
        if !path.is_file() {
            return Err(Error::WeightsUnavailable { path });
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let actual = util::sha256_hex(&bytes);
        if let Some(expected) = expected_sha256 {
            if !expected.eq_ignore_ascii_case(&actual) {
                return Err(Error::WeightsHashMismatch {
                    path,
                    expected: expected.to_string(),
                    actual,
                });
            }
        }
        let mut params = arch.empty_store();
        params.load_from_bytes(&bytes, &path)?;
        Ok(Self {
            arch,
            params,
            weights_sha256: actual,
        })
    }

    /// Writes the weights file into `dir` and returns its path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        util::create_dir(dir)?;
        let path = dir.join(self.arch.config.weights_file_name());
        self.params.save(&path)?;
        Ok(path)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.arch.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    /// SHA-256 of the serialized weights file.
    pub fn weights_sha256(&self) -> &str {
        &self.weights_sha256
    }

    /// Final convolutional feature map for raw `[0, 255]` RGB input
    /// `[N, 3, S, S]`.
    pub fn feature_map(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.arch.config.input_size;
        x.ensure_shape(&[x.dim(0), 3, s, s])?;
        run_ops(&self.arch, Params::Frozen(&self.params), x.clone())
    }

    /// Globally average-pooled features `[N, feature_dim]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        kernels::global_avg_pool(&self.feature_map(x)?)
    }
}

/// Smooth random fields with pixel noise of varying amplitude, in `[0, 255]`.
fn calibration_batch(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let n = 16;
    let mut data = Vec::with_capacity(n * 3 * size * size);
    let scale = 1.0 / size as f32;
    for _ in 0..n {
        let waves: Vec<[f32; 4]> = (0..6)
            .map(|_| {
                [
                    rng.random_range(-12.0f32..12.0) * scale,
                    rng.random_range(-12.0f32..12.0) * scale,
                    rng.random_range(0.0f32..6.3),
                    rng.random_range(10.0f32..40.0),
                ]
            })
            .collect();
        let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(40.0f32..215.0));
        let noise = rng.random_range(2.0f32..128.0);
        for b in base {
            for y in 0..size {
                for x in 0..size {
                    let mut v = b + rng.random_range(-noise..noise);
                    for w in &waves {
                        v += w[3] * (w[0] * x as f32 + w[1] * y as f32 + w[2]).sin();
                    }
                    data.push(v.clamp(0.0, 255.0));
                }
            }
        }
    }
    Tensor::from_vec(vec![n, 3, size, size], data).expect("calibration shape")
}

fn run_ops(arch: &Architecture, mut params: Params<'_>, mut x: Tensor) -> Result<Tensor> {
    let mut slots: Vec<Option<Tensor>> = vec![None; arch.num_slots];
    for op in &arch.ops {
        match op {
            Op::Rescale { scale, offset } => {
                x.data_mut().iter_mut().for_each(|v| *v = *v * scale + offset);
            }
            Op::Normalize { name } => {
                let store = params.store();
                let mean = param(store, &format!("{name}.mean")).data().to_vec();
                let var = param(store, &format!("{name}.variance")).data().to_vec();
                let ones = vec![1.0; mean.len()];
                let zeros = vec![0.0; mean.len()];
                kernels::batch_norm_inference(&mut x, &ones, &zeros, &mean, &var, 0.0);
            }
            Op::ZeroPad(pad) => x = kernels::pad2d(&x, *pad)?,
            Op::Conv { name, stride, pad, groups, bias } => {
                let store = params.store();
                let w = param(store, &format!("{name}.kernel"));
                let b = bias.then(|| param(store, &format!("{name}.bias")));
                let geo = ConvGeometry {
                    stride: *stride,
                    pad: *pad,
                    groups: *groups,
                };
                x = kernels::conv2d(&x, w, b, geo)?;
            }
            Op::BatchNorm { name, eps } => {
                let key = |s: &str| format!("{name}.{s}");
                if let Params::Calibrate(store) = &mut params {
                    let (mean, mut var) = kernels::channel_moments(&x);
                    let c = mean.len();
                    // Channels that were nearly constant on the calibration
                    // batch would otherwise amplify unseen inputs.
                    let mut sorted = var.clone();
                    sorted.sort_by(f32::total_cmp);
                    let floor = sorted[c / 2];
                    var.iter_mut().for_each(|v| *v = v.max(floor));
                    *store.get_mut(store.id_of(&key("moving_mean")).expect("bn mean")) = Tensor::from_vec(vec![c], mean)?;
                    *store.get_mut(store.id_of(&key("moving_variance")).expect("bn var")) = Tensor::from_vec(vec![c], var)?;
                }
                let store = params.store();
                kernels::batch_norm_inference(
                    &mut x,
                    param(store, &key("gamma")).data(),
                    param(store, &key("beta")).data(),
                    param(store, &key("moving_mean")).data(),
                    param(store, &key("moving_variance")).data(),
                    *eps,
                );
            }
            Op::Act(a) => x.data_mut().iter_mut().for_each(|v| *v = a.apply(*v)),
            Op::MaxPool { kernel, stride } => x = kernels::max_pool2d(&x, *kernel, *stride, 0)?,
            Op::Subsample(stride) => x = kernels::subsample(&x, *stride)?,
            Op::GlobalPool => {
                let (n, c) = (x.dim(0), x.dim(1));
                x = kernels::global_avg_pool(&x)?.reshape([n, c, 1, 1])?;
            }
            Op::Save(slot) => slots[*slot] = Some(x.clone()),
            Op::Load(slot) => x = slots[*slot].clone().expect("slot saved before load"),
            Op::AddSaved(slot) => x.add_assign(slots[*slot].as_ref().expect("slot saved before add")),
            Op::GateSaved(slot) => {
                let main = slots[*slot].as_ref().expect("slot saved before gate");
                let hw = main.dim(2) * main.dim(3);
                let mut out = main.clone();
                for (plane, g) in out.data_mut().chunks_mut(hw).zip(x.data()) {
                    plane.iter_mut().for_each(|v| *v *= g);
                }
                x = out;
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_parameter_counts_match_reference_models() {
        let count = |k| Architecture::new(&BackboneConfig::full(k)).unwrap();
        let r = count(BackboneKind::ResNet50V2);
        assert_eq!(r.parameter_count_with_imagenet_top(), 25_613_800);
        assert_eq!(r.parameter_count(), 23_564_800);
        assert_eq!(r.feature_dim(), 2048);
        assert_eq!(r.output_shape(), [2048, 7, 7]);
        let m = count(BackboneKind::MobileNetV2);
        assert_eq!(m.parameter_count_with_imagenet_top(), 3_538_984);
        assert_eq!(m.feature_dim(), 1280);
        assert_eq!(m.output_shape(), [1280, 7, 7]);
        let e = count(BackboneKind::EfficientNetB0);
        assert_eq!(e.parameter_count_with_imagenet_top(), 5_330_571);
        assert_eq!(e.output_shape(), [1280, 7, 7]);
    }

    #[test]
    fn make_divisible_matches_reference_rounding() {
        assert_eq!(make_divisible(32.0 * 0.35, 8), 16);
        assert_eq!(make_divisible(16.0 * 0.35, 8), 8);
        assert_eq!(make_divisible(24.0, 8), 24);
        assert_eq!(make_divisible(1280.0 * 1.4, 8), 1792);
    }

    #[test]
    fn tf_same_padding() {
        assert_eq!(same_pad(224, 3, 2), (0, 1));
        assert_eq!(same_pad(7, 3, 1), (1, 1));
        assert_eq!(same_pad(5, 1, 1), (0, 0));
    }

    #[test]
    fn surrogate_is_deterministic_and_finite() {
        for kind in BackboneKind::ALL {
            let cfg = BackboneConfig {
                kind,
                width: 0.25,
                input_size: 32,
            };
            let a = Backbone::surrogate(&cfg, 3).unwrap();
            let b = Backbone::surrogate(&cfg, 3).unwrap();
            assert_eq!(a.weights_sha256(), b.weights_sha256());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let x = Tensor::<f32>::randn(vec![2, 3, 32, 32], &mut rng).map(|v| (v * 60.0 + 128.0).clamp(0.0, 255.0));
            let f = a.features(&x).unwrap();
            assert_eq!(f.shape(), &[2, a.feature_dim()]);
            assert!(f.is_finite());
            assert_eq!(f, b.features(&x).unwrap());
            assert!(f.data().iter().any(|&v| v.abs() > 1e-3), "{kind} features collapsed");
        }
    }

    #[test]
    fn load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BackboneConfig {
            kind: BackboneKind::MobileNetV2,
            width: 0.35,
            input_size: 32,
        };
        match Backbone::load(&cfg, dir.path(), None) {
            Err(Error::WeightsUnavailable { path }) => assert!(path.ends_with("mobilenetv2_w0.35.safetensors")),
            other => panic!("unexpected {other:?}"),
        }
        let b = Backbone::surrogate(&cfg, 1).unwrap();
        b.save(dir.path()).unwrap();
        let loaded = Backbone::load(&cfg, dir.path(), Some(b.weights_sha256())).unwrap();
        assert_eq!(loaded.params().content_hash(), b.params().content_hash());
        assert!(matches!(
            Backbone::load(&cfg, dir.path(), Some("00")),
            Err(Error::WeightsHashMismatch { .. })
        ));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("ResNet50V2".parse::<BackboneKind>().unwrap(), BackboneKind::ResNet50V2);
        assert_eq!("mobilenetv2".parse::<BackboneKind>().unwrap(), BackboneKind::MobileNetV2);
        assert!("vgg16".parse::<BackboneKind>().is_err());
    }
}
