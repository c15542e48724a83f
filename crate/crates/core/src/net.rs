//! The fully convolutional segmenter: a few conv-relu(-pool) stages followed
//! by a 1x1 score layer with one output channel per class. Channel 0 is
//! background everywhere in this crate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Weights are drawn from `U(-b, b)` with `b = INIT_GAIN / sqrt(fan_in)`.
/// A gain of 1.5 sits below the variance-preserving sqrt(6), so a cold network
/// starts with small, nearly uniform scores.
pub const INIT_GAIN: f64 = 1.5;

/// Subtracted from every input value before the first convolution, centering
/// `[0, 1]` images on zero.
pub const INPUT_OFFSET: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub num_fg_classes: usize,
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    /// Total spatial reduction; a power of two, one 2x2 pool per factor of two.
    pub downsample: usize,
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_fg_classes: 4,
            widths: vec![16, 32, 64],
            kernel_size: 3,
            downsample: 4,
            input_channels: 3,
        }
    }
}

impl NetworkConfig {
    pub fn with_classes(num_fg_classes: usize) -> Self {
        NetworkConfig {
            num_fg_classes,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_fg_classes == 0 {
            return bad("num_fg_classes must be positive".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("stage widths must be positive, got {:?}", self.widths));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return bad(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if !self.downsample.is_power_of_two() {
            return bad(format!("downsample must be a power of two, got {}", self.downsample));
        }
        if self.num_pools() > self.widths.len() {
            return bad(format!(
                "downsample {} needs {} pooling stages but only {} stages exist",
                self.downsample,
                self.num_pools(),
                self.widths.len()
            ));
        }
        if self.input_channels == 0 {
            return bad("input channels must be positive".into());
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_fg_classes + 1
    }

    /// Stages `0..num_pools()` end in a 2x2 max pool.
    pub fn num_pools(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// `(name, shape)` of every parameter tensor in network order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel_size;
        let mut shapes = Vec::new();
        let mut c_in = self.input_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            shapes.push((format!("stage{i}.weight"), vec![w, c_in, k, k]));
            shapes.push((format!("stage{i}.bias"), vec![w]));
            c_in = w;
        }
        shapes.push(("score.weight".into(), vec![self.num_classes(), c_in, 1, 1]));
        shapes.push(("score.bias".into(), vec![self.num_classes()]));
        shapes
    }

    /// Checks that an image height/width can pass through the network.
    pub fn check_input_dims(&self, h: usize, w: usize) -> Result<()> {
        let d = self.downsample;
        if h < d || w < d || h % d != 0 || w % d != 0 {
            let up = |v: usize| v.max(d).div_ceil(d) * d;
            return Err(shape_err!(
                "input {}x{} must be a positive multiple of the downsample factor {} in both dims; pad to {}x{}",
                h,
                w,
                d,
                up(h),
                up(w)
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Param>,
}

/// Raw per-class scores `[num_classes, h, w]` at coarse resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreStack(pub Tensor);

impl ScoreStack {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn coarse_dims(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }
}

/// Vars recorded for one forward pass.
pub struct ForwardPass {
    pub scores: Var,
    pub params: Vec<Var>,
}

/// Builds a network with fan-in scaled uniform weights (see [`INIT_GAIN`])
/// and zero biases.
pub fn build_network(config: NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = config
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let value = if shape.len() == 4 {
                let bound = INIT_GAIN / ((shape[1] * shape[2] * shape[3]) as f64).sqrt();
                Tensor::uniform(&shape, -bound, bound, &mut rng)
            } else {
                Tensor::zeros(&shape)
            };
            Param { name, value }
        })
        .collect();
    Ok(Network { config, params })
}

impl Network {
    /// Assembles a network from loaded tensors, checking names and shapes.
    pub fn from_params(config: NetworkConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(shape_err!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            ));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || shape[..] != *p.value.shape() {
                return Err(shape_err!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    shape
                ));
            }
        }
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers the parameters as leaves and records the forward pass.
    pub fn forward(&self, graph: &mut Graph, image: Var) -> Result<ForwardPass> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone()))
            .collect();
        let scores = self.forward_with(graph, image, &params)?;
        Ok(ForwardPass { scores, params })
    }

    /// Records the forward pass using caller-provided parameter vars, which
    /// must follow [`NetworkConfig::param_shapes`] order.
    pub fn forward_with(&self, graph: &mut Graph, image: Var, params: &[Var]) -> Result<Var> {
        let cfg = &self.config;
        let (c, h, w) = graph.value(image).dims3()?;
        if c != cfg.input_channels {
            return Err(shape_err!(
                "image has {} channels, network expects {}",
                c,
                cfg.input_channels
            ));
        }
        cfg.check_input_dims(h, w)?;
        if params.len() != self.params.len() {
            return Err(shape_err!(
                "forward given {} parameter vars, network has {}",
                params.len(),
                self.params.len()
            ));
        }
        let mut x = self.center(graph, image)?;
        for stage in 0..self.num_stages() {
            x = self.stage(graph, x, stage, params[2 * stage], params[2 * stage + 1])?;
        }
        Ok(x)
    }

    /// Conv stages plus the score layer, which is the last stage.
    pub fn num_stages(&self) -> usize {
        self.config.widths.len() + 1
    }

    /// Subtracts [`INPUT_OFFSET`] from every input value.
    pub fn center(&self, graph: &mut Graph, image: Var) -> Result<Var> {
        let shape = graph.value(image).shape().to_vec();
        let offset = graph.leaf(Tensor::full(&shape, -INPUT_OFFSET));
        graph.add(image, offset)
    }

    /// One stage: conv, relu and (on the first stages) a 2x2 pool, or the
    /// 1x1 score conv for the last stage.
    pub fn stage(&self, graph: &mut Graph, x: Var, stage: usize, kernel: Var, bias: Var) -> Result<Var> {
        let cfg = &self.config;
        if stage == cfg.widths.len() {
            return graph.conv2d(x, kernel, bias, 1, 0);
        }
        let mut x = graph.conv2d(x, kernel, bias, 1, cfg.kernel_size / 2)?;
        x = graph.relu(x);
        if stage < cfg.num_pools() {
            x = graph.maxpool2(x)?;
        }
        Ok(x)
    }

    /// Forward pass without keeping the graph.
    pub fn predict(&self, image: &Tensor) -> Result<ScoreStack> {
        let mut graph = Graph::new();
        let img = graph.leaf(image.clone());
        let pass = self.forward(&mut graph, img)?;
        Ok(ScoreStack(graph.value(pass.scores).clone()))
    }
}

/// Copies every parameter of `pretrained` into a network shaped like `net`,
/// then zeroes the background row of the score layer (kernel and bias).
pub fn transfer_classifier_weights(net: &Network, pretrained: &Network) -> Result<Network> {
    if net.config != pretrained.config {
        return Err(Error::Config(format!(
            "cannot transfer between configs {:?} and {:?}",
            pretrained.config, net.config
        )));
    }
    let mut out = pretrained.clone();
    let n = out.params.len();
    let c_in = *out.config.widths.last().expect("validated");
    out.params[n - 2].value.data_mut()[..c_in].fill(0.0);
    out.params[n - 1].value.data_mut()[0] = 0.0;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_layer_has_background_channel() {
        let net = build_network(NetworkConfig::with_classes(4), 0).unwrap();
        let score = &net.params()[net.params().len() - 2];
        assert_eq!(score.name, "score.weight");
        assert_eq!(score.value.shape()[0], 5);
    }

    #[test]
    fn default_param_count_matches_hand_count() {
        let net = build_network(NetworkConfig::default(), 0).unwrap();
        let hand = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64) + (5 * 64 + 5);
        assert_eq!(hand, 23_909);
        assert_eq!(net.param_count(), hand);
    }

    #[test]
    fn seeding_is_deterministic() {
        let a = build_network(NetworkConfig::default(), 11).unwrap();
        let b = build_network(NetworkConfig::default(), 11).unwrap();
        let c = build_network(NetworkConfig::default(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_bounds_follow_fan_in() {
        let net = build_network(NetworkConfig::default(), 5).unwrap();
        for p in net.params() {
            let shape = p.value.shape();
            if shape.len() == 4 {
                let bound = INIT_GAIN / ((shape[1] * shape[2] * shape[3]) as f64).sqrt();
                assert!(p.value.data().iter().all(|v| v.abs() <= bound));
            } else {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetworkConfig::default();
        cfg.downsample = 3;
        assert!(cfg.validate().is_err());
        cfg.downsample = 16;
        assert!(cfg.validate().is_err());
        cfg.downsample = 8;
        assert!(cfg.validate().is_ok());
        cfg.kernel_size = 2;
        assert!(cfg.validate().is_err());
        assert!(NetworkConfig::with_classes(0).validate().is_err());
    }

    #[test]
    fn rejects_non_multiple_dims_with_padding_hint() {
        let net = build_network(NetworkConfig::default(), 0).unwrap();
        let err = net.predict(&Tensor::zeros(&[3, 66, 64])).unwrap_err().to_string();
        assert!(err.contains("downsample factor 4") && err.contains("68x64"), "{err}");
        assert!(net.predict(&Tensor::zeros(&[3, 2, 4])).is_err());
        assert!(net.predict(&Tensor::zeros(&[1, 8, 8])).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_scores() {
        let mut net = build_network(NetworkConfig::default(), 0).unwrap();
        for p in net.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        let img = Tensor::from_fn(&[3, 16, 16], |i| (i as f64 * 0.1).sin());
        let scores = net.predict(&img).unwrap();
        assert_eq!(scores.tensor().shape(), &[5, 4, 4]);
        assert!(scores.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transfer_zeroes_background_and_copies_the_rest() {
        let cfg = NetworkConfig::default();
        let target = build_network(cfg.clone(), 1).unwrap();
        let pre = build_network(cfg.clone(), 2).unwrap();
        let t = transfer_classifier_weights(&target, &pre).unwrap();
        let n = t.params().len();
        let c_in = 64;
        let w = &t.params()[n - 2].value;
        let b = &t.params()[n - 1].value;
        assert!(w.data()[..c_in].iter().all(|&v| v == 0.0));
        assert_eq!(b.data()[0], 0.0);
        assert_eq!(w.data()[c_in..], pre.params()[n - 2].value.data()[c_in..]);
        for i in 0..n - 2 {
            assert_eq!(t.params()[i], pre.params()[i]);
        }

        let img = Tensor::from_fn(&[3, 16, 24], |i| ((i * 7919) % 101) as f64 / 100.0);
        let scores = t.predict(&img).unwrap();
        let (h, w) = scores.coarse_dims();
        assert!((0..h * w).all(|p| scores.tensor().data()[p] == 0.0));

        let again = transfer_classifier_weights(&target, &pre).unwrap();
        assert_eq!(t, again);

        let other = build_network(NetworkConfig::with_classes(3), 2).unwrap();
        assert!(transfer_classifier_weights(&target, &other).is_err());
    }
}
