//! Small configurable CNN: `[conv -> relu -> maxpool]* -> flatten ->
//! [linear -> relu] -> linear -> softmax`, producing two class
//! probabilities (negative, positive) per tile.
//!
//! Pixels arrive in `[0, 1]` and are shifted by [`INPUT_OFFSET`] before the
//! first convolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Subtracted from every input value so the first layer sees data centred
/// near zero.
pub const INPUT_OFFSET: f32 = 0.5;

fn centred(batch: &Tensor) -> Vec<f32> {
    batch.data().iter().map(|v| v - INPUT_OFFSET).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

/// Architecture description. Convolutions are unpadded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_side: usize,
    pub channels: usize,
    pub conv_layers: Vec<ConvLayerSpec>,
    /// Max-pool window after each conv layer; 1 disables pooling.
    pub pool: Vec<usize>,
    /// Width of the fully-connected layer before the classifier; 0 means the
    /// classifier reads the flattened conv features directly.
    pub hidden_units: usize,
    pub outputs: usize,
}

impl ModelConfig {
    /// Two 3x3 conv layers (8 and 16 channels) with 2x2 pooling and a
    /// 64-unit hidden layer.
    pub fn small_cnn(input_side: usize) -> Self {
        Self {
            input_side,
            channels: 3,
            conv_layers: vec![
                ConvLayerSpec {
                    out_channels: 8,
                    kernel_size: 3,
                    stride: 1,
                },
                ConvLayerSpec {
                    out_channels: 16,
                    kernel_size: 3,
                    stride: 1,
                },
            ],
            pool: vec![2, 2],
            hidden_units: 64,
            outputs: 2,
        }
    }

    fn conv_geometries(&self) -> Result<(Vec<ConvGeometry>, usize)> {
        if self.outputs != 2 {
            return Err(Error::Config(format!(
                "model must have 2 outputs, got {}",
                self.outputs
            )));
        }
        if self.channels == 0 || self.input_side == 0 {
            return Err(Error::Config("input side and channels must be positive".into()));
        }
        if self.pool.len() != self.conv_layers.len() {
            return Err(Error::Config(format!(
                "{} pool windows for {} conv layers",
                self.pool.len(),
                self.conv_layers.len()
            )));
        }
        let (mut side, mut channels) = (self.input_side, self.channels);
        let mut geos = Vec::with_capacity(self.conv_layers.len());
        for (i, (layer, &window)) in self.conv_layers.iter().zip(&self.pool).enumerate() {
            if layer.out_channels == 0 || layer.kernel_size == 0 || layer.stride == 0 || window == 0 {
                return Err(Error::Config(format!("conv layer {i} has a zero parameter")));
            }
            if layer.kernel_size > side {
                return Err(Error::Config(format!(
                    "conv layer {i}: kernel {} exceeds spatial size {side}",
                    layer.kernel_size
                )));
            }
            let geo = ConvGeometry {
                in_channels: channels,
                in_h: side,
                in_w: side,
                out_channels: layer.out_channels,
                kernel: layer.kernel_size,
                stride: layer.stride,
            };
            side = geo.out_h() / window;
            if side == 0 {
                return Err(Error::Config(format!(
                    "pool window {window} after conv layer {i} leaves no spatial extent"
                )));
            }
            channels = layer.out_channels;
            geos.push(geo);
        }
        Ok((geos, channels * side * side))
    }

    pub fn validate(&self) -> Result<()> {
        self.conv_geometries().map(|_| ())
    }

    /// Length of the flattened conv output.
    pub fn flat_features(&self) -> Result<usize> {
        Ok(self.conv_geometries()?.1)
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let convs = self
            .conv_layers
            .iter()
            .map(|c| format!("{}:{}:{}", c.out_channels, c.kernel_size, c.stride))
            .collect::<Vec<_>>()
            .join(",");
        let pools = self
            .pool
            .iter()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("input_side".into(), self.input_side.to_string()),
            ("channels".into(), self.channels.to_string()),
            ("conv_layers".into(), convs),
            ("pool".into(), pools),
            ("hidden_units".into(), self.hidden_units.to_string()),
            ("outputs".into(), self.outputs.to_string()),
            ("padding".into(), "valid".into()),
        ]
    }

    /// Parses the pairs written by [`ModelConfig::to_kv`]; unrelated keys are
    /// ignored.
    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut input_side = None;
        let mut channels = None;
        let mut conv_layers = None;
        let mut pool = None;
        let mut hidden_units = None;
        let mut outputs = None;
        for (k, v) in pairs {
            match k {
                "input_side" => input_side = Some(parse_usize(k, v)?),
                "channels" => channels = Some(parse_usize(k, v)?),
                "conv_layers" => conv_layers = Some(parse_conv_layers(v)?),
                "pool" => pool = Some(parse_usize_list(k, v)?),
                "hidden_units" => hidden_units = Some(parse_usize(k, v)?),
                "outputs" => outputs = Some(parse_usize(k, v)?),
                "padding" if v != "valid" => {
                    return Err(Error::Config(format!("unsupported padding {v:?}")))
                }
                _ => {}
            }
        }
        let missing = |k: &str| Error::Config(format!("model config missing {k}"));
        let cfg = Self {
            input_side: input_side.ok_or_else(|| missing("input_side"))?,
            channels: channels.ok_or_else(|| missing("channels"))?,
            conv_layers: conv_layers.ok_or_else(|| missing("conv_layers"))?,
            pool: pool.ok_or_else(|| missing("pool"))?,
            hidden_units: hidden_units.ok_or_else(|| missing("hidden_units"))?,
            outputs: outputs.ok_or_else(|| missing("outputs"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
}

pub(crate) fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_usize(key, s)).collect()
}

/// Parses `out:kernel:stride` triples separated by commas.
pub(crate) fn parse_conv_layers(v: &str) -> Result<Vec<ConvLayerSpec>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "conv layer {item:?} must be out_channels:kernel:stride"
                )));
            }
            Ok(ConvLayerSpec {
                out_channels: parse_usize("conv_layers", parts[0])?,
                kernel_size: parse_usize("conv_layers", parts[1])?,
                stride: parse_usize("conv_layers", parts[2])?,
            })
        })
        .collect()
}

/// Parameters in registration order alongside their names.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Result<Tensor> {
    let limit = (6.0 / fan_in as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Ok(Tensor::new(shape, data)?.with_grad())
}

/// Taped forward pass: the probability output plus the parameter leaves in
/// model order.
pub struct TapedForward {
    pub probs: Var,
    pub features: Option<Var>,
    pub params: Vec<Var>,
}

impl Model {
    /// He-uniform weights (fan-in scaling) and zero biases from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (geos, flat) = config.conv_geometries()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (i, geo) in geos.iter().enumerate() {
            names.push(format!("conv{i}.weight"));
            params.push(he_uniform(
                &mut rng,
                vec![geo.out_channels, geo.in_channels, geo.kernel, geo.kernel],
                geo.patch(),
            )?);
            names.push(format!("conv{i}.bias"));
            params.push(Tensor::zeros(vec![geo.out_channels])?.with_grad());
        }
        let mut width = flat;
        if config.hidden_units > 0 {
            names.push("hidden.weight".into());
            params.push(he_uniform(&mut rng, vec![width, config.hidden_units], width)?);
            names.push("hidden.bias".into());
            params.push(Tensor::zeros(vec![config.hidden_units])?.with_grad());
            width = config.hidden_units;
        }
        names.push("head.weight".into());
        params.push(he_uniform(&mut rng, vec![width, config.outputs], width)?);
        names.push("head.bias".into());
        params.push(Tensor::zeros(vec![config.outputs])?.with_grad());
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Rebuilds a model from named tensors, checking them against `config`.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Self::new(config, 0)?;
        if template.names.len() != named.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                template.names.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((want_name, want), (name, mut t)) in template.names.iter().zip(&template.params).zip(named) {
            if *want_name != name || want.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match {want_name} {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
            t.set_requires_grad(true);
            params.push(t);
        }
        Ok(Self {
            config: template.config,
            names: template.names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Zeroes the classifier weights and bias so both logits are equal.
    pub fn zero_head(&mut self) {
        let n = self.params.len();
        for p in &mut self.params[n - 2..] {
            p.data_mut().fill(0.0);
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let s = batch.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.channels || s[2] != c.input_side || s[3] != c.input_side {
            return Err(Error::Config(format!(
                "batch shape {s:?} does not match model input [n, {}, {}, {}]",
                c.channels, c.input_side, c.input_side
            )));
        }
        Ok(s[0])
    }

    fn conv_stack(&self, batch: &Tensor) -> Result<(usize, Vec<f32>)> {
        let n = self.check_batch(batch)?;
        let (geos, _) = self.config.conv_geometries()?;
        let mut x = centred(batch);
        for (i, geo) in geos.iter().enumerate() {
            let w = self.params[2 * i].data();
            let b = self.params[2 * i + 1].data();
            x = kernels::relu_forward(&kernels::conv2d_forward(geo, &x, w, b, n));
            let window = self.config.pool[i];
            if window > 1 {
                x = kernels::max_pool_forward(&x, n * geo.out_channels, geo.out_h(), geo.out_w(), window).0;
            }
        }
        Ok((n, x))
    }

    fn hidden_index(&self) -> usize {
        2 * self.config.conv_layers.len()
    }

    /// Activations feeding the final classifier, `[n, hidden_units]`.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        if self.config.hidden_units == 0 {
            return Err(Error::Config("model has no hidden layer to read features from".into()));
        }
        let (n, x) = self.conv_stack(batch)?;
        let h = self.hidden_index();
        let (w, b) = (&self.params[h], &self.params[h + 1]);
        let hidden = kernels::relu_forward(&kernels::linear_forward(
            &x,
            w.data(),
            b.data(),
            w.shape()[0],
            w.shape()[1],
        ));
        let t = Tensor::new(vec![n, self.config.hidden_units], hidden)?;
        if !t.is_finite() {
            return Err(Error::Numeric("non-finite hidden activation".into()));
        }
        Ok(t)
    }

    /// Class probabilities `[n, 2]` without recording a graph.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let (n, mut x) = self.conv_stack(batch)?;
        let mut idx = self.hidden_index();
        if self.config.hidden_units > 0 {
            let (w, b) = (&self.params[idx], &self.params[idx + 1]);
            x = kernels::relu_forward(&kernels::linear_forward(
                &x,
                w.data(),
                b.data(),
                w.shape()[0],
                w.shape()[1],
            ));
            idx += 2;
        }
        let (w, b) = (&self.params[idx], &self.params[idx + 1]);
        let logits = kernels::linear_forward(&x, w.data(), b.data(), w.shape()[0], w.shape()[1]);
        let probs = Tensor::new(vec![n, self.config.outputs], kernels::softmax_forward(&logits, self.config.outputs))?;
        if !probs.is_finite() {
            return Err(Error::Numeric("non-finite class probability".into()));
        }
        Ok(probs)
    }

    /// Records the forward pass on `graph`.
    pub fn forward_taped(&self, graph: &mut Graph, batch: Tensor) -> Result<TapedForward> {
        let n = self.check_batch(&batch)?;
        let params: Vec<Var> = self.params.iter().map(|p| graph.leaf(p.detached().with_grad())).collect();
        let mut x = graph.leaf(Tensor::new(batch.shape().to_vec(), centred(&batch))?);
        for (i, layer) in self.config.conv_layers.iter().enumerate() {
            x = graph.conv2d(x, params[2 * i], params[2 * i + 1], layer.stride)?;
            x = graph.relu(x)?;
            if self.config.pool[i] > 1 {
                x = graph.max_pool2d(x, self.config.pool[i])?;
            }
        }
        x = graph.flatten(x)?;
        debug_assert_eq!(graph.value(x).shape()[0], n);
        let mut idx = self.hidden_index();
        let mut features = None;
        if self.config.hidden_units > 0 {
            x = graph.linear(x, params[idx], params[idx + 1])?;
            x = graph.relu(x)?;
            features = Some(x);
            idx += 2;
        }
        let logits = graph.linear(x, params[idx], params[idx + 1])?;
        let probs = graph.softmax(logits)?;
        Ok(TapedForward {
            probs,
            features,
            params,
        })
    }

    /// Copies gradients from the taped parameter leaves onto the model.
    pub fn load_grads(&mut self, graph: &Graph, params: &[Var]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Usage("parameter handle count mismatch".into()));
        }
        for (p, &v) in self.params.iter_mut().zip(params) {
            match graph.value(v).grad() {
                Some(g) => p.set_grad(g.to_vec())?,
                None => p.set_grad(vec![0.0; p.numel()])?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * side * side).map(|_| rng.gen::<f32>()).collect();
        Tensor::new(vec![n, 3, side, side], data).unwrap()
    }

    #[test]
    fn default_cnn_geometry() {
        let cfg = ModelConfig::small_cnn(32);
        // 32 -> conv 30 -> pool 15 -> conv 13 -> pool 6
        assert_eq!(cfg.flat_features().unwrap(), 16 * 6 * 6);
    }

    #[test]
    fn rejects_collapsing_geometry() {
        let mut cfg = ModelConfig::small_cnn(8);
        cfg.pool = vec![4, 4];
        assert!(matches!(Model::new(cfg, 1), Err(Error::Config(_))));
        let mut cfg = ModelConfig::small_cnn(32);
        cfg.outputs = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rows_sum_to_one() {
        let m = Model::new(ModelConfig::small_cnn(16), 3).unwrap();
        let p = m.forward(&batch(5, 16, 9)).unwrap();
        for row in p.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let mut m = Model::new(ModelConfig::small_cnn(16), 3).unwrap();
        m.zero_head();
        let p = m.forward(&batch(4, 16, 1)).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_is_deterministic_and_matches_taped_path() {
        let x = batch(3, 16, 4);
        let a = Model::new(ModelConfig::small_cnn(16), 11).unwrap();
        let b = Model::new(ModelConfig::small_cnn(16), 11).unwrap();
        let pa = a.forward(&x).unwrap();
        assert_eq!(pa.data(), b.forward(&x).unwrap().data());
        let mut g = Graph::new();
        let t = a.forward_taped(&mut g, x).unwrap();
        assert_eq!(g.value(t.probs).data(), pa.data());
    }

    #[test]
    fn batch_composition_does_not_change_results() {
        let m = Model::new(ModelConfig::small_cnn(16), 2).unwrap();
        let x = batch(4, 16, 5);
        let all = m.forward(&x).unwrap();
        let per = 3 * 16 * 16;
        for i in 0..4 {
            let one = Tensor::new(vec![1, 3, 16, 16], x.data()[i * per..(i + 1) * per].to_vec()).unwrap();
            assert_eq!(m.forward(&one).unwrap().data(), &all.data()[2 * i..2 * i + 2]);
        }
    }

    #[test]
    fn wrong_batch_shape_is_config_error() {
        let m = Model::new(ModelConfig::small_cnn(16), 2).unwrap();
        assert!(matches!(m.forward(&batch(1, 18, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn features_need_hidden_layer() {
        let mut cfg = ModelConfig::small_cnn(16);
        cfg.hidden_units = 0;
        let m = Model::new(cfg, 1).unwrap();
        assert!(matches!(m.features(&batch(1, 16, 0)), Err(Error::Config(_))));
        assert!(m.forward(&batch(1, 16, 0)).is_ok());
    }

    #[test]
    fn config_kv_roundtrip() {
        let cfg = ModelConfig::small_cnn(32);
        let kv = cfg.to_kv();
        let back = ModelConfig::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, cfg);
    }
}
