//! A miniature fully-convolutional encoder-decoder segmentation model
//! with hand-written forward and backward passes.
//!
//! The architecture is a small U-Net: per level a 3x3 same-padded
//! convolution with tanh activation, 2x2 average pooling between
//! encoder levels, nearest-neighbor x2 upsampling plus skip
//! concatenation between decoder levels, and a 1x1 convolution head
//! followed by a per-pixel softmax. Tanh and average pooling keep the
//! network smooth, so central-difference gradient checks hold tightly.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, Axis, Zip};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{Capabilities, SegmentationAdapter};
use crate::error::{MisureError, Result};
use crate::io::TensorMap;
use crate::types::{Image, ProbabilityMap};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyModelSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Feature widths per level; the list length sets the level count.
    /// Inputs must be divisible by `2^(levels-1)`.
    pub channels: Vec<usize>,
    /// Convolution kernel side length; must be odd.
    pub kernel_size: usize,
    pub seed: u64,
    /// Zero-initialize the head so a fresh model outputs the uniform
    /// distribution over classes at every pixel.
    pub zero_head: bool,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            channels: vec![8, 16, 32],
            kernel_size: 3,
            seed: 0,
            zero_head: false,
        }
    }
}

/// One tensor per layer; the struct doubles as gradient and optimizer
/// moment storage since those share every shape.
#[derive(Debug, Clone)]
struct ParamSet {
    enc_w: Vec<Array4<f64>>,
    enc_b: Vec<Array1<f64>>,
    dec_w: Vec<Array4<f64>>,
    dec_b: Vec<Array1<f64>>,
    head_w: Array2<f64>,
    head_b: Array1<f64>,
}

impl ParamSet {
    fn zeros_like(&self) -> Self {
        Self {
            enc_w: self.enc_w.iter().map(|a| Array4::zeros(a.dim())).collect(),
            enc_b: self.enc_b.iter().map(|a| Array1::zeros(a.dim())).collect(),
            dec_w: self.dec_w.iter().map(|a| Array4::zeros(a.dim())).collect(),
            dec_b: self.dec_b.iter().map(|a| Array1::zeros(a.dim())).collect(),
            head_w: Array2::zeros(self.head_w.dim()),
            head_b: Array1::zeros(self.head_b.dim()),
        }
    }

    fn num_params(&self) -> usize {
        self.enc_w.iter().map(|a| a.len()).sum::<usize>()
            + self.enc_b.iter().map(|a| a.len()).sum::<usize>()
            + self.dec_w.iter().map(|a| a.len()).sum::<usize>()
            + self.dec_b.iter().map(|a| a.len()).sum::<usize>()
            + self.head_w.len()
            + self.head_b.len()
    }
}

/// Applies `f` to every (param, grad, m, v) quadruple element-wise.
fn zip_params(
    params: &mut ParamSet,
    grads: &ParamSet,
    m: &mut ParamSet,
    v: &mut ParamSet,
    f: &mut impl FnMut(&mut f64, f64, &mut f64, &mut f64),
) {
    macro_rules! field {
        ($name:ident, vec) => {
            for i in 0..params.$name.len() {
                Zip::from(&mut params.$name[i])
                    .and(&grads.$name[i])
                    .and(&mut m.$name[i])
                    .and(&mut v.$name[i])
                    .for_each(|p, &g, mm, vv| f(p, g, mm, vv));
            }
        };
        ($name:ident, one) => {
            Zip::from(&mut params.$name)
                .and(&grads.$name)
                .and(&mut m.$name)
                .and(&mut v.$name)
                .for_each(|p, &g, mm, vv| f(p, g, mm, vv));
        };
    }
    field!(enc_w, vec);
    field!(enc_b, vec);
    field!(dec_w, vec);
    field!(dec_b, vec);
    field!(head_w, one);
    field!(head_b, one);
}

pub struct ToyModel {
    spec: ToyModelSpec,
    params: ParamSet,
}

struct ForwardCache {
    /// Convolution inputs per encoder level (level 0 is the image).
    enc_in: Vec<Array3<f64>>,
    /// Encoder activations per level; the last is the bottleneck.
    enc_act: Vec<Array3<f64>>,
    /// Concatenated convolution inputs per decoder level.
    dec_cat: Vec<Array3<f64>>,
    /// Decoder activations per level; level 0 feeds the head.
    dec_act: Vec<Array3<f64>>,
    probs: Array3<f64>,
}

struct BackwardResult {
    input_grad: Array3<f64>,
    bottleneck_grad: Array3<f64>,
    /// Gradient on the activation stack feeding the 1x1 head.
    top_grad: Array3<f64>,
    grads: ParamSet,
}

fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> f64 {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.gen_range(-bound..bound)
}

impl ToyModel {
    pub fn new(spec: ToyModelSpec) -> Result<Self> {
        if spec.channels.is_empty() {
            return Err(MisureError::Config("channels list must be non-empty".into()));
        }
        if spec.in_channels == 0 || spec.num_classes < 2 {
            return Err(MisureError::Config(
                "need at least one input channel and two classes".into(),
            ));
        }
        if spec.kernel_size % 2 == 0 || spec.kernel_size == 0 {
            return Err(MisureError::Config("kernel size must be odd".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let levels = spec.channels.len();
        let mut enc_w = Vec::with_capacity(levels);
        let mut enc_b = Vec::with_capacity(levels);
        let k = spec.kernel_size;
        let mut prev = spec.in_channels;
        for &c in &spec.channels {
            let fan_in = prev * k * k;
            let fan_out = c * k * k;
            enc_w.push(Array4::from_shape_fn((c, prev, k, k), |_| {
                xavier_uniform(&mut rng, fan_in, fan_out)
            }));
            enc_b.push(Array1::zeros(c));
            prev = c;
        }
        let mut dec_w = Vec::new();
        let mut dec_b = Vec::new();
        for i in 0..levels.saturating_sub(1) {
            let cin = spec.channels[i + 1] + spec.channels[i];
            let cout = spec.channels[i];
            let fan_in = cin * k * k;
            let fan_out = cout * k * k;
            dec_w.push(Array4::from_shape_fn((cout, cin, k, k), |_| {
                xavier_uniform(&mut rng, fan_in, fan_out)
            }));
            dec_b.push(Array1::zeros(cout));
        }
        let head_w = if spec.zero_head {
            Array2::zeros((spec.num_classes, spec.channels[0]))
        } else {
            let fan_in = spec.channels[0];
            let fan_out = spec.num_classes;
            Array2::from_shape_fn((spec.num_classes, spec.channels[0]), |_| {
                xavier_uniform(&mut rng, fan_in, fan_out)
            })
        };
        let head_b = Array1::zeros(spec.num_classes);
        Ok(Self {
            spec,
            params: ParamSet {
                enc_w,
                enc_b,
                dec_w,
                dec_b,
                head_w,
                head_b,
            },
        })
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    fn levels(&self) -> usize {
        self.spec.channels.len()
    }

    fn check_input(&self, input: &Array3<f64>) -> Result<()> {
        let (c, h, w) = input.dim();
        let div = 1usize << (self.levels() - 1);
        if c != self.spec.in_channels || h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(MisureError::InputShape {
                expected: format!(
                    "{} channels, dims divisible by {div}",
                    self.spec.in_channels
                ),
                got: format!("{c} channels, {h}x{w}"),
            });
        }
        Ok(())
    }

    fn forward_cached(&self, input: &Array3<f64>) -> Result<ForwardCache> {
        self.check_input(input)?;
        let levels = self.levels();
        let mut enc_in = Vec::with_capacity(levels);
        let mut enc_act = Vec::with_capacity(levels);
        let mut a = input.clone();
        for i in 0..levels {
            let z = conv2d(&a, &self.params.enc_w[i], &self.params.enc_b[i]);
            let e = z.mapv(f64::tanh);
            enc_in.push(a);
            a = if i + 1 < levels {
                avgpool2(&e)
            } else {
                Array3::zeros((0, 0, 0))
            };
            enc_act.push(e);
        }
        let mut dec_cat = vec![Array3::zeros((0, 0, 0)); levels - 1];
        let mut dec_act = vec![Array3::zeros((0, 0, 0)); levels - 1];
        let mut d = enc_act[levels - 1].clone();
        for i in (0..levels - 1).rev() {
            let up = upsample2(&d);
            let cat = concat_channels(&up, &enc_act[i]);
            let z = conv2d(&cat, &self.params.dec_w[i], &self.params.dec_b[i]);
            d = z.mapv(f64::tanh);
            dec_cat[i] = cat;
            dec_act[i] = d.clone();
        }
        let top = if levels == 1 { &enc_act[0] } else { &dec_act[0] };
        let logits = conv1x1(top, &self.params.head_w, &self.params.head_b);
        let probs = softmax_channels(&logits);
        Ok(ForwardCache {
            enc_in,
            enc_act,
            dec_cat,
            dec_act,
            probs,
        })
    }

    /// Backward pass from a gradient on the logits. Returns gradients
    /// for the input image, the bottleneck activations, and all
    /// parameters.
    fn backward_from_dlogits(
        &self,
        cache: &ForwardCache,
        dlogits: &Array3<f64>,
    ) -> BackwardResult {
        let levels = self.levels();
        let mut grads = self.params.zeros_like();
        let top = if levels == 1 {
            &cache.enc_act[0]
        } else {
            &cache.dec_act[0]
        };
        // Head: logits[l] = sum_k head_w[l][k] * top[k] + head_b[l].
        let (nc, h, w) = dlogits.dim();
        let k = top.dim().0;
        let mut dtop = Array3::<f64>::zeros((k, h, w));
        for l in 0..nc {
            let dl = dlogits.index_axis(Axis(0), l);
            grads.head_b[l] += dl.sum();
            for ki in 0..k {
                let tk = top.index_axis(Axis(0), ki);
                grads.head_w[[l, ki]] +=
                    Zip::from(&dl).and(&tk).fold(0.0, |acc, &a, &b| acc + a * b);
                dtop.index_axis_mut(Axis(0), ki)
                    .scaled_add(self.params.head_w[[l, ki]], &dl);
            }
        }
        let top_grad = dtop.clone();
        // Decoder chain, finest to coarsest.
        let mut dskip = vec![Array3::zeros((0, 0, 0)); levels.saturating_sub(1)];
        let mut dd = dtop;
        for i in 0..levels.saturating_sub(1) {
            let dz = &dd * &cache.dec_act[i].mapv(|a| 1.0 - a * a);
            conv2d_param_grad(
                &cache.dec_cat[i],
                &dz,
                &mut grads.dec_w[i],
                &mut grads.dec_b[i],
            );
            let dcat = conv2d_input_grad(&dz, &self.params.dec_w[i]);
            let c_up = self.spec.channels[i + 1];
            let du = dcat.slice(s![..c_up, .., ..]).to_owned();
            dskip[i] = dcat.slice(s![c_up.., .., ..]).to_owned();
            dd = upsample2_backward(&du);
        }
        // After the loop dd sits on the bottleneck activations.
        let bottleneck_grad = dd.clone();
        // Encoder chain, coarsest to finest.
        let mut de = dd;
        let mut input_grad = Array3::zeros((0, 0, 0));
        for i in (0..levels).rev() {
            if i < levels - 1 {
                de += &dskip[i];
            }
            let dz = &de * &cache.enc_act[i].mapv(|a| 1.0 - a * a);
            conv2d_param_grad(
                &cache.enc_in[i],
                &dz,
                &mut grads.enc_w[i],
                &mut grads.enc_b[i],
            );
            let da = conv2d_input_grad(&dz, &self.params.enc_w[i]);
            if i > 0 {
                de = avgpool2_backward(&da);
            } else {
                input_grad = da;
            }
        }
        BackwardResult {
            input_grad,
            bottleneck_grad,
            top_grad,
            grads,
        }
    }

    /// Softmax backward: from a gradient on probabilities to one on
    /// logits. `dlogits_l = p_l * (g_l - sum_j g_j p_j)` per pixel.
    fn dprobs_to_dlogits(probs: &Array3<f64>, dprobs: &Array3<f64>) -> Array3<f64> {
        let (nc, h, w) = probs.dim();
        let mut dlogits = Array3::<f64>::zeros((nc, h, w));
        for y in 0..h {
            for x in 0..w {
                let mut dot = 0.0;
                for l in 0..nc {
                    dot += dprobs[[l, y, x]] * probs[[l, y, x]];
                }
                for l in 0..nc {
                    dlogits[[l, y, x]] = probs[[l, y, x]] * (dprobs[[l, y, x]] - dot);
                }
            }
        }
        dlogits
    }

    /// One Adam step on pixel-wise cross-entropy for a single labeled
    /// image. Returns the loss before the step.
    fn train_step(
        &mut self,
        input: &Array3<f64>,
        labels: &Array2<u8>,
        state: &mut AdamState,
        lr: f64,
    ) -> Result<f64> {
        let cache = self.forward_cached(input)?;
        let (nc, h, w) = cache.probs.dim();
        if labels.dim() != (h, w) {
            return Err(MisureError::InputShape {
                expected: format!("labels {h}x{w}"),
                got: format!("{}x{}", labels.dim().0, labels.dim().1),
            });
        }
        let n = (h * w) as f64;
        let mut loss = 0.0;
        let mut dlogits = cache.probs.clone();
        for y in 0..h {
            for x in 0..w {
                let cls = labels[[y, x]] as usize;
                if cls >= nc {
                    return Err(MisureError::ClassAbsent { class: cls });
                }
                loss -= (cache.probs[[cls, y, x]].max(1e-12)).ln();
                dlogits[[cls, y, x]] -= 1.0;
            }
        }
        loss /= n;
        dlogits.mapv_inplace(|v| v / n);
        if !loss.is_finite() {
            return Err(MisureError::TrainingDiverged(format!(
                "non-finite loss {loss}"
            )));
        }
        let back = self.backward_from_dlogits(&cache, &dlogits);
        state.step(&mut self.params, &back.grads, lr);
        Ok(loss)
    }

    pub fn to_tensors(&self) -> TensorMap {
        let mut t = TensorMap::new();
        let mut meta = vec![
            self.spec.in_channels as f64,
            self.spec.num_classes as f64,
            self.spec.kernel_size as f64,
        ];
        meta.extend(self.spec.channels.iter().map(|&c| c as f64));
        t.insert(
            "meta".into(),
            ArrayD::from_shape_vec(ndarray::IxDyn(&[meta.len()]), meta).unwrap(),
        );
        for (i, w) in self.params.enc_w.iter().enumerate() {
            t.insert(format!("enc{i}.w"), w.clone().into_dyn());
            t.insert(format!("enc{i}.b"), self.params.enc_b[i].clone().into_dyn());
        }
        for (i, w) in self.params.dec_w.iter().enumerate() {
            t.insert(format!("dec{i}.w"), w.clone().into_dyn());
            t.insert(format!("dec{i}.b"), self.params.dec_b[i].clone().into_dyn());
        }
        t.insert("head.w".into(), self.params.head_w.clone().into_dyn());
        t.insert("head.b".into(), self.params.head_b.clone().into_dyn());
        t
    }

    pub fn from_tensors(tensors: &TensorMap) -> Result<Self> {
        let bad = |what: &str| MisureError::Format {
            path: "<tensors>".into(),
            reason: format!("model container: {what}"),
        };
        let meta = tensors.get("meta").ok_or_else(|| bad("missing meta"))?;
        let meta: Vec<usize> = meta.iter().map(|&v| v as usize).collect();
        if meta.len() < 4 {
            return Err(bad("meta too short"));
        }
        let spec = ToyModelSpec {
            in_channels: meta[0],
            num_classes: meta[1],
            kernel_size: meta[2],
            channels: meta[3..].to_vec(),
            seed: 0,
            zero_head: false,
        };
        let levels = spec.channels.len();
        let get = |name: String| tensors.get(&name).ok_or_else(|| bad(&format!("missing {name}")));
        let mut enc_w = Vec::new();
        let mut enc_b = Vec::new();
        for i in 0..levels {
            enc_w.push(
                get(format!("enc{i}.w"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(|_| bad("enc weight rank"))?,
            );
            enc_b.push(
                get(format!("enc{i}.b"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(|_| bad("enc bias rank"))?,
            );
        }
        let mut dec_w = Vec::new();
        let mut dec_b = Vec::new();
        for i in 0..levels.saturating_sub(1) {
            dec_w.push(
                get(format!("dec{i}.w"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(|_| bad("dec weight rank"))?,
            );
            dec_b.push(
                get(format!("dec{i}.b"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(|_| bad("dec bias rank"))?,
            );
        }
        let head_w = get("head.w".into())?
            .clone()
            .into_dimensionality()
            .map_err(|_| bad("head weight rank"))?;
        let head_b = get("head.b".into())?
            .clone()
            .into_dimensionality()
            .map_err(|_| bad("head bias rank"))?;
        Ok(Self {
            spec,
            params: ParamSet {
                enc_w,
                enc_b,
                dec_w,
                dec_b,
                head_w,
                head_b,
            },
        })
    }
}

struct AdamState {
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

impl AdamState {
    fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        self.t += 1;
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        zip_params(params, grads, &mut self.m, &mut self.v, &mut |p, g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Shuffles the sample order each epoch.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Trains on labeled images (labels are per-pixel class indices) with
/// Adam on pixel-wise cross-entropy. Returns the mean loss per epoch.
pub fn train_toy_model(
    model: &mut ToyModel,
    images: &[Image],
    labels: &[Array2<u8>],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(MisureError::EmptyInput(
            "training needs equally many images and label maps".into(),
        ));
    }
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        // Fisher-Yates so the permutation depends only on the seed.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0;
        for &idx in &order {
            total += model.train_step(images[idx].data(), &labels[idx], &mut state, config.lr)?;
        }
        let mean = total / images.len() as f64;
        if !mean.is_finite() {
            return Err(MisureError::TrainingDiverged(format!(
                "non-finite epoch loss {mean}"
            )));
        }
        trace.push(mean);
    }
    Ok(trace)
}

impl SegmentationAdapter for ToyModel {
    fn name(&self) -> &str {
        "toy"
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn input_shape(&self) -> crate::adapter::InputShape {
        crate::adapter::InputShape {
            channels: self.spec.in_channels,
            height: None,
            width: None,
        }
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            vjp: true,
            activations: true,
            thread_safe: true,
        }
    }

    fn forward(&self, image: &Image) -> Result<ProbabilityMap> {
        let cache = self.forward_cached(image.data())?;
        Ok(ProbabilityMap::new_unchecked(cache.probs))
    }

    fn vjp(&self, image: &Image, cotangent: &Array3<f64>) -> Result<Array3<f64>> {
        let cache = self.forward_cached(image.data())?;
        if cotangent.dim() != cache.probs.dim() {
            return Err(MisureError::InputShape {
                expected: format!("{:?}", cache.probs.dim()),
                got: format!("{:?}", cotangent.dim()),
            });
        }
        let dlogits = Self::dprobs_to_dlogits(&cache.probs, cotangent);
        Ok(self.backward_from_dlogits(&cache, &dlogits).input_grad)
    }

    fn activations(&self, image: &Image, layer: &str) -> Result<Array3<f64>> {
        let cache = self.forward_cached(image.data())?;
        match layer {
            "bottleneck" => Ok(cache.enc_act[self.levels() - 1].clone()),
            "head_input" => Ok(if self.levels() == 1 {
                cache.enc_act[0].clone()
            } else {
                cache.dec_act[0].clone()
            }),
            other => Err(MisureError::Capability {
                adapter: self.name().into(),
                capability: format!("layer `{other}`"),
            }),
        }
    }

    fn activation_gradient(
        &self,
        image: &Image,
        layer: &str,
        cotangent: &Array3<f64>,
    ) -> Result<Array3<f64>> {
        let cache = self.forward_cached(image.data())?;
        if cotangent.dim() != cache.probs.dim() {
            return Err(MisureError::InputShape {
                expected: format!("{:?}", cache.probs.dim()),
                got: format!("{:?}", cotangent.dim()),
            });
        }
        let dlogits = Self::dprobs_to_dlogits(&cache.probs, cotangent);
        let back = self.backward_from_dlogits(&cache, &dlogits);
        match layer {
            "bottleneck" => Ok(back.bottleneck_grad),
            "head_input" => Ok(back.top_grad),
            other => Err(MisureError::Capability {
                adapter: self.name().into(),
                capability: format!("layer `{other}`"),
            }),
        }
    }
}

/// Odd-sized same-padded convolution (zero padding).
fn conv2d(input: &Array3<f64>, w: &Array4<f64>, b: &Array1<f64>) -> Array3<f64> {
    let (cin, h, wd) = input.dim();
    let cout = w.dim().0;
    let k = w.dim().2;
    let half = (k / 2) as isize;
    debug_assert_eq!(w.dim().1, cin);
    let mut out = Array3::<f64>::zeros((cout, h, wd));
    for o in 0..cout {
        let mut plane = out.index_axis_mut(Axis(0), o);
        plane.fill(b[o]);
        for i in 0..cin {
            let src = input.index_axis(Axis(0), i);
            for ky in 0..k {
                let dy = ky as isize - half;
                for kx in 0..k {
                    let dx = kx as isize - half;
                    let wv = w[[o, i, ky, kx]];
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((wd as isize - dx).min(wd as isize)).max(0) as usize;
                    if y0 >= y1 || x0 >= x1 {
                        continue;
                    }
                    let sy0 = (y0 as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let sview = src.slice(s![sy0..sy0 + (y1 - y0), sx0..sx0 + (x1 - x0)]);
                    plane.slice_mut(s![y0..y1, x0..x1]).scaled_add(wv, &sview);
                }
            }
        }
    }
    out
}

/// Gradient of `conv2d` with respect to its input.
fn conv2d_input_grad(dout: &Array3<f64>, w: &Array4<f64>) -> Array3<f64> {
    let (cout, h, wd) = dout.dim();
    let cin = w.dim().1;
    let k = w.dim().2;
    let half = (k / 2) as isize;
    let mut din = Array3::<f64>::zeros((cin, h, wd));
    for o in 0..cout {
        let gsrc = dout.index_axis(Axis(0), o);
        for i in 0..cin {
            let mut plane = din.index_axis_mut(Axis(0), i);
            for ky in 0..k {
                let dy = ky as isize - half;
                for kx in 0..k {
                    let dx = kx as isize - half;
                    let wv = w[[o, i, ky, kx]];
                    // din[y+dy][x+dx] += wv * dout[y][x].
                    let ty0 = dy.max(0) as usize;
                    let ty1 = ((h as isize + dy.min(0)).max(0)) as usize;
                    let tx0 = dx.max(0) as usize;
                    let tx1 = ((wd as isize + dx.min(0)).max(0)) as usize;
                    if ty0 >= ty1 || tx0 >= tx1 {
                        continue;
                    }
                    let sy0 = (ty0 as isize - dy) as usize;
                    let sx0 = (tx0 as isize - dx) as usize;
                    let sview = gsrc.slice(s![sy0..sy0 + (ty1 - ty0), sx0..sx0 + (tx1 - tx0)]);
                    plane.slice_mut(s![ty0..ty1, tx0..tx1]).scaled_add(wv, &sview);
                }
            }
        }
    }
    din
}

/// Accumulates weight and bias gradients for `conv2d`.
fn conv2d_param_grad(
    input: &Array3<f64>,
    dout: &Array3<f64>,
    dw: &mut Array4<f64>,
    db: &mut Array1<f64>,
) {
    let (cin, h, wd) = input.dim();
    let cout = dout.dim().0;
    let k = dw.dim().2;
    let half = (k / 2) as isize;
    for o in 0..cout {
        let g = dout.index_axis(Axis(0), o);
        db[o] += g.sum();
        for i in 0..cin {
            let src = input.index_axis(Axis(0), i);
            for ky in 0..k {
                let dy = ky as isize - half;
                for kx in 0..k {
                    let dx = kx as isize - half;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((wd as isize - dx).min(wd as isize)).max(0) as usize;
                    if y0 >= y1 || x0 >= x1 {
                        continue;
                    }
                    let sy0 = (y0 as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let gview = g.slice(s![y0..y1, x0..x1]);
                    let sview = src.slice(s![sy0..sy0 + (y1 - y0), sx0..sx0 + (x1 - x0)]);
                    dw[[o, i, ky, kx]] += Zip::from(&gview)
                        .and(&sview)
                        .fold(0.0, |acc, &a, &b| acc + a * b);
                }
            }
        }
    }
}

fn conv1x1(input: &Array3<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array3<f64> {
    let (cin, h, wd) = input.dim();
    let cout = w.dim().0;
    debug_assert_eq!(w.dim().1, cin);
    let mut out = Array3::<f64>::zeros((cout, h, wd));
    for o in 0..cout {
        let mut plane = out.index_axis_mut(Axis(0), o);
        plane.fill(b[o]);
        for i in 0..cin {
            plane.scaled_add(w[[o, i]], &input.index_axis(Axis(0), i));
        }
    }
    out
}

/// 2x2 average pooling with stride 2. Dims must be even.
fn avgpool2(input: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = input.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, x)| {
        (input[[ch, 2 * y, 2 * x]]
            + input[[ch, 2 * y, 2 * x + 1]]
            + input[[ch, 2 * y + 1, 2 * x]]
            + input[[ch, 2 * y + 1, 2 * x + 1]])
            / 4.0
    })
}

fn avgpool2_backward(dout: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = dout.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ch, y, x)| {
        dout[[ch, y / 2, x / 2]] / 4.0
    })
}

/// Nearest-neighbor x2 upsampling.
fn upsample2(input: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = input.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ch, y, x)| input[[ch, y / 2, x / 2]])
}

fn upsample2_backward(dout: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = dout.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, x)| {
        dout[[ch, 2 * y, 2 * x]]
            + dout[[ch, 2 * y, 2 * x + 1]]
            + dout[[ch, 2 * y + 1, 2 * x]]
            + dout[[ch, 2 * y + 1, 2 * x + 1]]
    })
}

fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Numerically stable per-pixel softmax over the channel axis.
fn softmax_channels(logits: &Array3<f64>) -> Array3<f64> {
    let (nc, h, w) = logits.dim();
    let mut out = Array3::<f64>::zeros((nc, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut mx = f64::NEG_INFINITY;
            for l in 0..nc {
                mx = mx.max(logits[[l, y, x]]);
            }
            let mut denom = 0.0;
            for l in 0..nc {
                let e = (logits[[l, y, x]] - mx).exp();
                out[[l, y, x]] = e;
                denom += e;
            }
            for l in 0..nc {
                out[[l, y, x]] /= denom;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{finite_difference_vjp, max_relative_error};
    use crate::io::{read_model, write_model};

    fn small_spec() -> ToyModelSpec {
        ToyModelSpec {
            in_channels: 1,
            num_classes: 2,
            channels: vec![3, 5],
            kernel_size: 3,
            seed: 42,
            zero_head: false,
        }
    }

    fn ramp_image(h: usize, w: usize) -> Image {
        Image::new(Array3::from_shape_fn((1, h, w), |(_, y, x)| {
            ((y * w + x) as f64 / (h * w) as f64).min(1.0)
        }))
        .unwrap()
    }

    #[test]
    fn zero_head_outputs_uniform_distribution() {
        let spec = ToyModelSpec {
            num_classes: 3,
            zero_head: true,
            ..small_spec()
        };
        let model = ToyModel::new(spec).unwrap();
        let probs = model.forward(&ramp_image(4, 4)).unwrap();
        for &v in probs.data().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn default_spec_param_count() {
        let model = ToyModel::new(ToyModelSpec::default()).unwrap();
        assert_eq!(model.num_params(), 14570);
    }

    #[test]
    fn rejects_indivisible_input_dims() {
        let model = ToyModel::new(small_spec()).unwrap();
        let img = ramp_image(5, 6);
        assert!(matches!(
            model.forward(&img),
            Err(MisureError::InputShape { .. })
        ));
    }

    #[test]
    fn construction_is_deterministic() {
        let a = ToyModel::new(small_spec()).unwrap();
        let b = ToyModel::new(small_spec()).unwrap();
        assert_eq!(a.to_tensors(), b.to_tensors());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let model = ToyModel::new(small_spec()).unwrap();
        let img = ramp_image(6, 6);
        let cot = Array3::from_shape_fn((2, 6, 6), |(l, y, x)| {
            ((l * 31 + y * 7 + x * 3) as f64 * 0.11).sin()
        });
        let analytic = model.vjp(&img, &cot).unwrap();
        let fd = finite_difference_vjp(&model, &img, &cot, 1e-4).unwrap();
        let err = max_relative_error(&analytic, &fd, 1e-6);
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn vjp_matches_finite_differences_three_levels() {
        let spec = ToyModelSpec {
            channels: vec![2, 3, 4],
            seed: 7,
            ..small_spec()
        };
        let model = ToyModel::new(spec).unwrap();
        let img = ramp_image(8, 8);
        let cot = Array3::from_shape_fn((2, 8, 8), |(l, y, x)| {
            ((l + y + 2 * x) as f64 * 0.17).cos()
        });
        let analytic = model.vjp(&img, &cot).unwrap();
        let fd = finite_difference_vjp(&model, &img, &cot, 1e-4).unwrap();
        let err = max_relative_error(&analytic, &fd, 1e-6);
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn activation_gradient_has_bottleneck_shape_and_is_linear() {
        let model = ToyModel::new(small_spec()).unwrap();
        let img = ramp_image(6, 6);
        let acts = model.activations(&img, "bottleneck").unwrap();
        assert_eq!(acts.dim(), (5, 3, 3));
        assert_eq!(model.activations(&img, "head_input").unwrap().dim(), (3, 6, 6));
        assert!(matches!(
            model.activations(&img, "nope"),
            Err(MisureError::Capability { .. })
        ));
        let c1 = Array3::from_shape_fn((2, 6, 6), |(l, y, x)| (l + y * x) as f64 * 0.02);
        let c2 = Array3::from_shape_fn((2, 6, 6), |(l, y, x)| (2 * l + y + x) as f64 * 0.03);
        let g1 = model.activation_gradient(&img, "bottleneck", &c1).unwrap();
        let g2 = model.activation_gradient(&img, "bottleneck", &c2).unwrap();
        let combo = model
            .activation_gradient(&img, "bottleneck", &(&c1 * 2.0 + &c2))
            .unwrap();
        assert_eq!(g1.dim(), (5, 3, 3));
        for ((&a, &b), &c) in g1.iter().zip(g2.iter()).zip(combo.iter()) {
            assert!((2.0 * a + b - c).abs() < 1e-9);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        // Task: label a pixel foreground iff its intensity exceeds 0.5.
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for k in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(k);
            let img = Array3::from_shape_fn((1, 8, 8), |_| rng.gen::<f64>());
            labels.push(img.index_axis(Axis(0), 0).mapv(|v| u8::from(v > 0.5)));
            images.push(Image::new(img).unwrap());
        }
        let config = TrainConfig {
            epochs: 30,
            lr: 0.01,
            seed: 1,
        };
        let mut model = ToyModel::new(small_spec()).unwrap();
        let trace = train_toy_model(&mut model, &images, &labels, &config).unwrap();
        assert!(trace.last().unwrap() < &(trace[0] * 0.5), "trace {trace:?}");

        let mut model2 = ToyModel::new(small_spec()).unwrap();
        let trace2 = train_toy_model(&mut model2, &images, &labels, &config).unwrap();
        assert_eq!(trace, trace2);
        assert_eq!(model.to_tensors(), model2.to_tensors());
    }

    #[test]
    fn model_file_roundtrip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.msum");
        let model = ToyModel::new(small_spec()).unwrap();
        write_model(&path, &model.to_tensors()).unwrap();
        let restored = ToyModel::from_tensors(&read_model(&path).unwrap()).unwrap();
        assert_eq!(restored.spec().channels, vec![3, 5]);
        let img = ramp_image(4, 4);
        let a = model.forward(&img).unwrap();
        let b = restored.forward(&img).unwrap();
        // Parameters pass through f32, so outputs agree to f32 noise.
        for (&x, &y) in a.data().iter().zip(b.data().iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn from_tensors_rejects_missing_layer() {
        let model = ToyModel::new(small_spec()).unwrap();
        let mut tensors = model.to_tensors();
        tensors.remove("dec0.w");
        assert!(matches!(
            ToyModel::from_tensors(&tensors),
            Err(MisureError::Format { .. })
        ));
    }
}
