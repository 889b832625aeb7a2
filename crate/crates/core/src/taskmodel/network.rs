use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numcore::{conv2d_backward_parts, conv2d_forward, rng_derive, KernelBank, Real, Tensor3};

/// Width of the penultimate (feature) layer.
pub const FEATURE_WIDTH: usize = 512;
const KERNEL: usize = 3;
const PADDING: usize = 1;

/// Layout of the task network: `[3×3 conv (same padding), ReLU, 2×2 max-pool]`
/// blocks, global average pooling, a dense `→ 512` ReLU layer and a dense
/// `512 → 1` head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_size: usize,
    pub conv_channels: Vec<usize>,
    /// When false every bias is held at zero.
    pub bias: bool,
}

impl Architecture {
    /// Three blocks with 16, 32 and 64 channels.
    pub fn standard(input_channels: usize, input_size: usize) -> Self {
        Self {
            input_channels,
            input_size,
            conv_channels: vec![16, 32, 64],
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::invalid("architecture needs non-empty channel counts"));
        }
        if self.input_size >> self.conv_channels.len() == 0 {
            return Err(Error::invalid(format!(
                "input size {} is too small for {} pooling stages",
                self.input_size,
                self.conv_channels.len()
            )));
        }
        Ok(())
    }

    pub fn gap_width(&self) -> usize {
        *self.conv_channels.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lineage {
    Pretrained,
    Finetuned { domain: usize, fallback: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub kernels: KernelBank<T>,
    pub bias: Vec<T>,
}

/// Dense layer with `outputs × inputs` row-major weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> DenseLayer<T> {
    fn forward(&self, x: &[T]) -> Vec<T> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &v)| acc + w * v))
            .collect()
    }

    fn cast<U: Real>(&self) -> DenseLayer<U> {
        DenseLayer {
            inputs: self.inputs,
            outputs: self.outputs,
            weights: self.weights.iter().map(|v| U::of(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Image-to-score regressor. The raw head output is in standardized target
/// units; [`TaskNetwork::predict`] maps it back with the stored constants.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskNetwork<T = f32> {
    pub(crate) arch: Architecture,
    pub(crate) convs: Vec<ConvLayer<T>>,
    pub(crate) hidden: DenseLayer<T>,
    pub(crate) head: DenseLayer<T>,
    pub(crate) target_mean: f64,
    pub(crate) target_std: f64,
    pub(crate) seed: u64,
    pub(crate) lineage: Lineage,
}

/// Activations kept for the backward pass.
pub struct Forward<T> {
    conv_inputs: Vec<Tensor3<T>>,
    activations: Vec<Tensor3<T>>,
    pool_argmax: Vec<Vec<u32>>,
    pooled_shape: (usize, usize, usize),
    pub gap: Vec<T>,
    hidden_pre: Vec<T>,
    pub features: Vec<T>,
    pub output: T,
}

/// Parameter-shaped buffers in the order of [`TaskNetwork::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(net: &TaskNetwork<T>) -> Self {
        Self {
            tensors: net.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= s);
    }
}

fn max_pool2(x: &Tensor3<impl Real>) -> (Vec<u32>, (usize, usize, usize)) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = x.plane(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if plane[idx] > plane[best] {
                        best = idx;
                    }
                }
                arg.push(best as u32);
            }
        }
    }
    (arg, (c, oh, ow))
}

impl<T: Real> TaskNetwork<T> {
    /// He-normal initialization of every weight from `rng_derive(seed, layer)`;
    /// biases start at zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut convs = Vec::with_capacity(arch.conv_channels.len());
        let mut cin = arch.input_channels;
        for (l, &cout) in arch.conv_channels.iter().enumerate() {
            let mut rng = rng_derive(seed, l as u64);
            let std = (2.0 / (cin * KERNEL * KERNEL) as f64).sqrt();
            let data = (0..cout * cin * KERNEL * KERNEL)
                .map(|_| T::of(rng.normal() * std))
                .collect();
            convs.push(ConvLayer {
                kernels: KernelBank::from_vec(cout, cin, KERNEL, KERNEL, data)?,
                bias: vec![T::zero(); cout],
            });
            cin = cout;
        }
        let dense = |inputs: usize, outputs: usize, stream: u64, gain: f64| {
            let mut rng = rng_derive(seed, stream);
            let std = (gain / inputs as f64).sqrt();
            DenseLayer {
                inputs,
                outputs,
                weights: (0..inputs * outputs).map(|_| T::of(rng.normal() * std)).collect(),
                bias: vec![T::zero(); outputs],
            }
        };
        let n = arch.conv_channels.len() as u64;
        let hidden = dense(cin, FEATURE_WIDTH, n, 2.0);
        let head = dense(FEATURE_WIDTH, 1, n + 1, 1.0);
        Ok(Self {
            arch,
            convs,
            hidden,
            head,
            target_mean: 0.0,
            target_std: 1.0,
            seed,
            lineage: Lineage::Pretrained,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn conv_layers(&self) -> &[ConvLayer<T>] {
        &self.convs
    }

    pub fn hidden_layer(&self) -> &DenseLayer<T> {
        &self.hidden
    }

    pub fn head_layer(&self) -> &DenseLayer<T> {
        &self.head
    }

    pub fn lineage(&self) -> &Lineage {
        &self.lineage
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `(mean, std)` used to standardize training targets.
    pub fn target_standardization(&self) -> (f64, f64) {
        (self.target_mean, self.target_std)
    }

    pub fn set_target_standardization(&mut self, mean: f64, std: f64) -> Result<()> {
        if !mean.is_finite() || !std.is_finite() || std <= 0.0 {
            return Err(Error::invalid(
                "target standardization needs finite mean and positive std",
            ));
        }
        self.target_mean = mean;
        self.target_std = std;
        Ok(())
    }

    pub fn is_fallback(&self) -> bool {
        matches!(self.lineage, Lineage::Finetuned { fallback: true, .. })
    }

    /// All parameters: per conv block kernels then bias, then hidden weights,
    /// hidden bias, head weights, head bias.
    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for c in &self.convs {
            out.push(c.kernels.data());
            out.push(&c.bias);
        }
        out.extend([
            &self.hidden.weights[..],
            &self.hidden.bias[..],
            &self.head.weights[..],
            &self.head.bias[..],
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for c in &mut self.convs {
            out.push(c.kernels.data_mut());
            out.push(&mut c.bias);
        }
        out.extend([
            &mut self.hidden.weights[..],
            &mut self.hidden.bias[..],
            &mut self.head.weights[..],
            &mut self.head.bias[..],
        ]);
        out
    }

    /// Parameter slots that are biases (held at zero when the architecture
    /// has no bias).
    pub fn bias_slots(&self) -> Vec<usize> {
        let n = self.convs.len();
        let mut slots: Vec<usize> = (0..n).map(|i| 2 * i + 1).collect();
        slots.extend([2 * n + 1, 2 * n + 3]);
        slots
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> TaskNetwork<U> {
        TaskNetwork {
            arch: self.arch.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| ConvLayer {
                    kernels: c.kernels.cast(),
                    bias: c.bias.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
            hidden: self.hidden.cast(),
            head: self.head.cast(),
            target_mean: self.target_mean,
            target_std: self.target_std,
            seed: self.seed,
            lineage: self.lineage.clone(),
        }
    }

    fn check_input(&self, image: &Tensor3<T>) -> Result<()> {
        check_dim(
            "task network",
            "input channels",
            self.arch.input_channels,
            image.channels(),
        )?;
        check_dim("task network", "input height", self.arch.input_size, image.height())?;
        check_dim("task network", "input width", self.arch.input_size, image.width())
    }

    pub fn forward(&self, image: &Tensor3<T>) -> Result<Forward<T>> {
        self.check_input(image)?;
        let n = self.convs.len();
        let mut conv_inputs = Vec::with_capacity(n);
        let mut activations = Vec::with_capacity(n);
        let mut pool_argmax = Vec::with_capacity(n);
        let mut x = image.clone();
        let mut pooled_shape = x.shape();
        for layer in &self.convs {
            let mut act = conv2d_forward(&x, &layer.kernels, 1, PADDING)?;
            for (ch, &b) in layer.bias.iter().enumerate() {
                for v in act.plane_mut(ch) {
                    *v = (*v + b).max(T::zero());
                }
            }
            let (arg, shape) = max_pool2(&act);
            let (c, h, w) = shape;
            let mut pooled = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                let plane = act.plane(ch);
                pooled.extend(arg[ch * h * w..(ch + 1) * h * w].iter().map(|&i| plane[i as usize]));
            }
            conv_inputs.push(std::mem::replace(&mut x, Tensor3::from_raw(c, h, w, pooled)));
            activations.push(act);
            pool_argmax.push(arg);
            pooled_shape = shape;
        }
        let area = T::of(x.plane_len() as f64);
        let gap: Vec<T> = (0..x.channels())
            .map(|c| x.plane(c).iter().copied().sum::<T>() / area)
            .collect();
        let hidden_pre = self.hidden.forward(&gap);
        let features: Vec<T> = hidden_pre.iter().map(|&v| v.max(T::zero())).collect();
        let output = self.head.forward(&features)[0];
        Ok(Forward {
            conv_inputs,
            activations,
            pool_argmax,
            pooled_shape,
            gap,
            hidden_pre,
            features,
            output,
        })
    }

    /// Gradients of the parameters given `∂L/∂output`.
    pub fn backward(&self, fwd: &Forward<T>, d_output: T) -> Result<Grads<T>> {
        let n = self.convs.len();
        let mut tensors: Vec<Vec<T>> = vec![Vec::new(); 2 * n + 4];

        tensors[2 * n + 2] = fwd.features.iter().map(|&f| d_output * f).collect();
        tensors[2 * n + 3] = vec![d_output];
        let d_hidden: Vec<T> = self
            .head
            .weights
            .iter()
            .zip(&fwd.hidden_pre)
            .map(|(&w, &pre)| if pre > T::zero() { d_output * w } else { T::zero() })
            .collect();

        let gap_len = self.hidden.inputs;
        let mut d_hw = Vec::with_capacity(self.hidden.weights.len());
        let mut d_gap = vec![T::zero(); gap_len];
        for (o, &dh) in d_hidden.iter().enumerate() {
            let row = &self.hidden.weights[o * gap_len..(o + 1) * gap_len];
            d_hw.extend(fwd.gap.iter().map(|&g| dh * g));
            if dh != T::zero() {
                for (dg, &w) in d_gap.iter_mut().zip(row) {
                    *dg += dh * w;
                }
            }
        }
        tensors[2 * n] = d_hw;
        tensors[2 * n + 1] = d_hidden;

        let (c, h, w) = fwd.pooled_shape;
        let area = T::of((h * w) as f64);
        let mut d_pooled = Tensor3::zeros(c, h, w);
        for (ch, &dg) in d_gap.iter().enumerate().take(c) {
            let g = dg / area;
            d_pooled.plane_mut(ch).iter_mut().for_each(|v| *v = g);
        }

        for l in (0..n).rev() {
            let act = &fwd.activations[l];
            let arg = &fwd.pool_argmax[l];
            let (ac, ah, aw) = act.shape();
            let mut d_act = Tensor3::zeros(ac, ah, aw);
            let pooled_plane = d_pooled.plane_len();
            for ch in 0..ac {
                let src = d_pooled.plane(ch);
                let a_plane = act.plane(ch);
                let dst = d_act.plane_mut(ch);
                for (k, &idx) in arg[ch * pooled_plane..(ch + 1) * pooled_plane].iter().enumerate() {
                    // ReLU gate folded into the unpooling.
                    if a_plane[idx as usize] > T::zero() {
                        dst[idx as usize] += src[k];
                    }
                }
            }
            tensors[2 * l + 1] = (0..ac).map(|ch| d_act.plane(ch).iter().copied().sum()).collect();
            let (dk, dx) =
                conv2d_backward_parts(&d_act, &fwd.conv_inputs[l], &self.convs[l].kernels, 1, PADDING, l > 0)?;
            tensors[2 * l] = dk.data().to_vec();
            if let Some(dx) = dx {
                d_pooled = dx;
            }
        }

        if !self.arch.bias {
            for slot in self.bias_slots() {
                tensors[slot].iter_mut().for_each(|v| *v = T::zero());
            }
        }
        Ok(Grads { tensors })
    }

    /// Squared error `(output − target)²` against a standardized target,
    /// with its parameter gradients.
    pub fn loss_and_grads(&self, image: &Tensor3<T>, standardized_target: T) -> Result<(T, Grads<T>)> {
        let fwd = self.forward(image)?;
        let r = fwd.output - standardized_target;
        let grads = self.backward(&fwd, r + r)?;
        Ok((r * r, grads))
    }

    /// Raw head output (standardized units).
    pub fn raw_output(&self, image: &Tensor3<T>) -> Result<T> {
        Ok(self.forward(image)?.output)
    }

    /// Score prediction in target units.
    pub fn predict(&self, image: &Tensor3<T>) -> Result<f64> {
        let out = self.raw_output(image)?.as_f64();
        Ok(out * self.target_std + self.target_mean)
    }

    /// The 512 post-ReLU values feeding the head.
    pub fn features(&self, image: &Tensor3<T>) -> Result<Vec<T>> {
        Ok(self.forward(image)?.features)
    }

    /// Global-average-pool output.
    pub fn pooled_features(&self, image: &Tensor3<T>) -> Result<Vec<T>> {
        Ok(self.forward(image)?.gap)
    }

    /// Head weights and bias with de-standardization folded in, so that
    /// `predict(x) = w · features(x) + b`.
    pub fn effective_head(&self) -> (Vec<f64>, f64) {
        let w = self.head.weights.iter().map(|v| v.as_f64() * self.target_std).collect();
        let b = self.head.bias[0].as_f64() * self.target_std + self.target_mean;
        (w, b)
    }

    /// Mutable head access (tests and tooling).
    pub fn head_layer_mut(&mut self) -> &mut DenseLayer<T> {
        &mut self.head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Architecture {
        Architecture {
            input_channels: 2,
            input_size: 8,
            conv_channels: vec![3, 4],
            bias: true,
        }
    }

    fn image<T: Real>(c: usize, s: usize, seed: u64) -> Tensor3<T> {
        let mut rng = rng_derive(seed, 5);
        Tensor3::from_vec(c, s, s, (0..c * s * s).map(|_| T::of(rng.uniform(0.0, 1.0))).collect()).unwrap()
    }

    #[test]
    fn default_feature_width() {
        let net = TaskNetwork::<f32>::init(Architecture::standard(6, 64), 1).unwrap();
        let f = net.features(&image(6, 64, 2)).unwrap();
        assert_eq!(f.len(), FEATURE_WIDTH);
        assert_eq!(
            net.param_count(),
            864 + 16 + 4608 + 32 + 18432 + 64 + 32768 + 512 + 512 + 1
        );
    }

    #[test]
    fn zero_image_bias_free() {
        let net = TaskNetwork::<f32>::init(Architecture::standard(6, 64).without_bias(), 1).unwrap();
        let f = net.features(&Tensor3::zeros(6, 64, 64)).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_head_outputs_bias() {
        let mut net = TaskNetwork::<f32>::init(small_arch(), 3).unwrap();
        net.set_target_standardization(1.5, 2.0).unwrap();
        net.head.weights.iter_mut().for_each(|w| *w = 0.0);
        net.head.bias[0] = 0.25;
        let (_, b) = net.effective_head();
        assert_eq!(net.predict(&image(2, 8, 1)).unwrap(), b);
        assert_eq!(b, 0.25 * 2.0 + 1.5);
    }

    #[test]
    fn predict_matches_effective_head() {
        let mut net = TaskNetwork::<f32>::init(Architecture::standard(6, 64), 4).unwrap();
        net.set_target_standardization(2.0, 0.7).unwrap();
        net.head.bias[0] = 0.3;
        let img = image(6, 64, 9);
        let (w, b) = net.effective_head();
        let f = net.features(&img).unwrap();
        let manual: f64 = w.iter().zip(&f).map(|(w, &f)| w * f as f64).sum::<f64>() + b;
        assert!((net.predict(&img).unwrap() - manual).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch() {
        let net = TaskNetwork::<f32>::init(small_arch(), 3).unwrap();
        assert!(net.forward(&image(2, 9, 1)).is_err());
        assert!(net.forward(&image(3, 8, 1)).is_err());
    }

    #[test]
    fn deterministic_forward() {
        let net = TaskNetwork::<f32>::init(small_arch(), 3).unwrap();
        let img = image(2, 8, 1);
        assert_eq!(net.predict(&img).unwrap(), net.predict(&img).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences_small() {
        let mut net = TaskNetwork::<f64>::init(small_arch(), 7).unwrap();
        // Non-zero biases so their gradients are exercised.
        let mut rng = rng_derive(1, 1);
        for c in &mut net.convs {
            c.bias.iter_mut().for_each(|b| *b = rng.gaussian(0.0, 0.1));
        }
        let img = image::<f64>(2, 8, 11);
        let target = 0.7;
        let (_, grads) = net.loss_and_grads(&img, target).unwrap();
        let h = 1e-6;
        let loss = |n: &TaskNetwork<f64>| {
            let r = n.raw_output(&img).unwrap() - target;
            r * r
        };
        for slot in 0..grads.tensors.len() {
            for i in 0..grads.tensors[slot].len() {
                let mut p = net.clone();
                p.params_mut()[slot][i] += h;
                let mut m = net.clone();
                m.params_mut()[slot][i] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let an = grads.tensors[slot][i];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / denom < 1e-4, "slot {slot} idx {i}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn bias_free_gradients_are_zero_on_biases() {
        let net = TaskNetwork::<f64>::init(small_arch().without_bias(), 7).unwrap();
        let (_, grads) = net.loss_and_grads(&image(2, 8, 3), 1.0).unwrap();
        for slot in net.bias_slots() {
            assert!(grads.tensors[slot].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn relu_homogeneity_at_gap() {
        let net = TaskNetwork::<f32>::init(Architecture::standard(6, 64).without_bias(), 5).unwrap();
        let img = image::<f32>(6, 64, 6);
        let alpha = 2.5f32;
        let a = net.pooled_features(&img).unwrap();
        let b = net.pooled_features(&img.scaled(alpha)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((alpha * x - y).abs() <= 1e-5 * y.abs().max(1.0));
        }
    }
}
