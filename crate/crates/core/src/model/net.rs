use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LesionSize, ModelConfig};
use crate::autodiff::norm::BN_MOMENTUM;
use crate::autodiff::{BatchStats, ConvSpec, Graph, ParamId, ParamKind, ParamStore, Var};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are reported for update.
    Train,
    /// Running statistics.
    Infer,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    spec: ConvSpec,
}

#[derive(Clone, Debug)]
struct BnLayer {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Pre-activation residual unit: BN, ReLU, conv, BN, ReLU, conv, plus skip.
#[derive(Clone, Debug)]
struct ResidualUnit {
    bn1: BnLayer,
    conv1: ConvLayer,
    bn2: BnLayer,
    conv2: ConvLayer,
}

/// 3x3 stride-2 conv, BN, ReLU; doubles the depth.
#[derive(Clone, Debug)]
struct Reduction {
    conv: ConvLayer,
    bn: BnLayer,
}

#[derive(Clone, Debug)]
struct Stage {
    residual: ResidualUnit,
    reduction: Reduction,
}

#[derive(Clone, Debug)]
struct PyramidBranch {
    conv: ConvLayer,
    bn: BnLayer,
}

/// Running-statistic update owed after a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

/// Graph handles produced by one forward pass.
#[derive(Debug)]
pub struct NetOutput {
    /// Pre-sigmoid linear map `[N,1,F,F]`.
    pub z: Var,
    /// `sigmoid(z)`, the normalized activation map.
    pub activation: Var,
    /// Pooled logit per sample, `[N]`.
    pub logit: Var,
    /// `sigmoid(logit)`, `[N]`.
    pub y_pred: Var,
    pub bn_updates: Vec<BnUpdate>,
}

/// Plain values from an inference pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub z: Tensor,
    pub activation: Tensor,
    pub logit: Vec<f64>,
    pub y_pred: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GuidedNet {
    config: ModelConfig,
    stem: ConvLayer,
    stages: Vec<Stage>,
    pyramid: Vec<PyramidBranch>,
    head: ConvLayer,
    /// `(spatial side, channels)` after the stem and after each reduction.
    depths: Vec<(usize, usize)>,
    params: ParamStore,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(
        &mut self,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Result<ConvLayer> {
        // Xavier/Glorot uniform
        let fan_in = (in_ch * k * k) as f64;
        let fan_out = (out_ch * k * k) as f64;
        let bound = (6.0 / (fan_in + fan_out)).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(vec![out_ch, in_ch, k, k], |_| rng.random_range(-bound..bound));
        Ok(ConvLayer {
            weight: self
                .store
                .add(format!("{name}.weight"), ParamKind::Trainable, w)?,
            bias: self.store.add(
                format!("{name}.bias"),
                ParamKind::Trainable,
                Tensor::zeros(vec![out_ch]),
            )?,
            spec,
        })
    }

    fn bn(&mut self, name: &str, ch: usize) -> Result<BnLayer> {
        Ok(BnLayer {
            gamma: self.store.add(
                format!("{name}.gamma"),
                ParamKind::Trainable,
                Tensor::full(vec![ch], 1.0),
            )?,
            beta: self.store.add(
                format!("{name}.beta"),
                ParamKind::Trainable,
                Tensor::zeros(vec![ch]),
            )?,
            running_mean: self.store.add(
                format!("{name}.running_mean"),
                ParamKind::Buffer,
                Tensor::zeros(vec![ch]),
            )?,
            running_var: self.store.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::full(vec![ch], 1.0),
            )?,
        })
    }
}

impl GuidedNet {
    /// Build the network with Xavier-uniform weights drawn from `seed` and
    /// zero biases.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let same = ConvSpec::new(1, 1, 1);
        let stem = b.conv("stem", config.stem_depth, 3, 3, same)?;
        let mut depth = config.stem_depth;
        let mut side = config.input_size;
        let mut depths = vec![(side, depth)];
        let mut stages = Vec::with_capacity(config.stage_count);
        for s in 0..config.stage_count {
            let p = format!("stage{s}");
            let residual = ResidualUnit {
                bn1: b.bn(&format!("{p}.res.bn1"), depth)?,
                conv1: b.conv(&format!("{p}.res.conv1"), depth, depth, 3, same)?,
                bn2: b.bn(&format!("{p}.res.bn2"), depth)?,
                conv2: b.conv(&format!("{p}.res.conv2"), depth, depth, 3, same)?,
            };
            let reduction = Reduction {
                conv: b.conv(
                    &format!("{p}.reduce.conv"),
                    2 * depth,
                    depth,
                    3,
                    ConvSpec::new(2, 1, 1),
                )?,
                bn: b.bn(&format!("{p}.reduce.bn"), 2 * depth)?,
            };
            depth *= 2;
            side /= 2;
            depths.push((side, depth));
            stages.push(Stage {
                residual,
                reduction,
            });
        }
        let concat_depth: usize = depths[1..].iter().map(|d| d.1).sum();
        let mut pyramid = Vec::new();
        for &rate in config.pyramid_rates() {
            pyramid.push(PyramidBranch {
                conv: b.conv(
                    &format!("pyramid.rate{rate}.conv"),
                    config.pyramid_depth,
                    concat_depth,
                    3,
                    ConvSpec::new(1, rate, rate),
                )?,
                bn: b.bn(&format!("pyramid.rate{rate}.bn"), config.pyramid_depth)?,
            });
        }
        let head = b.conv(
            "head",
            1,
            config.pyramid_depth * pyramid.len(),
            1,
            ConvSpec::new(1, 1, 0),
        )?;
        Ok(GuidedNet {
            config,
            stem,
            stages,
            pyramid,
            head,
            depths,
            params: b.store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn feature_size(&self) -> usize {
        self.config.feature_size()
    }

    /// `(spatial side, channels)` after the stem and after each reduction.
    pub fn depth_chain(&self) -> &[(usize, usize)] {
        &self.depths
    }

    /// Parameter id of the depth-1 output conv `(weight, bias)`.
    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.head.weight, self.head.bias)
    }

    pub fn forward(&self, g: &mut Graph, input: Var, mode: Mode) -> Result<NetOutput> {
        self.forward_with(g, &self.params, input, mode)
    }

    /// Forward pass reading parameters from `store`, which must share this
    /// network's layout.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        mode: Mode,
    ) -> Result<NetOutput> {
        let x = g.value(input);
        let [_, c, h, w] = x.dims4()?;
        ensure!(
            c == 3 && h == self.config.input_size && w == self.config.input_size,
            "expected input [N,3,{s},{s}], got {:?}",
            x.shape(),
            s = self.config.input_size
        );
        if cfg!(debug_assertions) {
            ensure!(
                x.data().iter().all(|v| (0.0..=1.0).contains(v)),
                "input values must lie in [0, 1]"
            );
        }
        let mut updates = Vec::new();
        let mut h = conv(g, store, &self.stem, input)?;
        let mut reductions = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            h = residual(g, store, &stage.residual, h, mode, &mut updates)?;
            let r = conv(g, store, &stage.reduction.conv, h)?;
            let r = bn(g, store, &stage.reduction.bn, r, mode, &mut updates)?;
            h = g.relu(r);
            reductions.push(h);
        }
        let last = reductions.len() - 1;
        let mut pooled = Vec::with_capacity(reductions.len());
        for (i, &r) in reductions.iter().enumerate() {
            let factor = 1 << (last - i);
            pooled.push(if factor == 1 {
                r
            } else {
                g.avg_pool(r, factor, factor)?
            });
        }
        let features = g.concat(&pooled)?;
        let mut branches = Vec::with_capacity(self.pyramid.len());
        for br in &self.pyramid {
            let y = conv(g, store, &br.conv, features)?;
            let y = bn(g, store, &br.bn, y, mode, &mut updates)?;
            branches.push(g.relu(y));
        }
        let pyr = g.concat(&branches)?;
        let z = conv(g, store, &self.head, pyr)?;
        let activation = g.sigmoid(z);
        let pooled_z = match self.config.lesion_size {
            LesionSize::Small => {
                g.max_pool(z, self.config.maxpool_window, self.config.maxpool_stride)?
            }
            LesionSize::Medium | LesionSize::Large => z,
        };
        let gap = g.global_avg_pool(pooled_z)?;
        let n = g.value(gap).len();
        let logit = g.reshape(gap, vec![n])?;
        let y_pred = g.sigmoid(logit);
        Ok(NetOutput {
            z,
            activation,
            logit,
            y_pred,
            bn_updates: updates,
        })
    }

    /// Inference-mode forward pass on a `[N,3,S,S]` batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let out = self.forward(&mut g, x, Mode::Infer)?;
        Ok(Prediction {
            z: g.value(out.z).clone(),
            activation: g.value(out.activation).clone(),
            logit: g.value(out.logit).data().to_vec(),
            y_pred: g.value(out.y_pred).data().to_vec(),
        })
    }

    /// Fold batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let n = u.stats.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let mean = self.params.value_mut(u.running_mean);
            for (r, m) in mean.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            let var = self.params.value_mut(u.running_var);
            for (r, v) in var.data_mut().iter_mut().zip(&u.stats.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbias;
            }
        }
    }

    /// Checkpoint bytes: every parameter and running statistic, with the
    /// model config as JSON metadata.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        self.params.to_bytes(&meta)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, meta) = ParamStore::from_bytes(bytes)?;
        let config: ModelConfig = serde_json::from_str(&meta)
            .map_err(|e| Error::format("checkpoint config", e.to_string()))?;
        let mut net = GuidedNet::build(config, 0)?;
        net.params
            .copy_values_from(&store)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

fn conv(g: &mut Graph, store: &ParamStore, layer: &ConvLayer, x: Var) -> Result<Var> {
    let w = g.param(store, layer.weight);
    let b = g.param(store, layer.bias);
    g.conv2d(x, w, Some(b), layer.spec)
}

fn bn(
    g: &mut Graph,
    store: &ParamStore,
    layer: &BnLayer,
    x: Var,
    mode: Mode,
    updates: &mut Vec<BnUpdate>,
) -> Result<Var> {
    let gamma = g.param(store, layer.gamma);
    let beta = g.param(store, layer.beta);
    match mode {
        Mode::Train => {
            let (y, stats) = g.batch_norm(x, gamma, beta)?;
            updates.push(BnUpdate {
                running_mean: layer.running_mean,
                running_var: layer.running_var,
                stats,
            });
            Ok(y)
        }
        Mode::Infer => g.batch_norm_infer(
            x,
            gamma,
            beta,
            store.value(layer.running_mean),
            store.value(layer.running_var),
        ),
    }
}

fn residual(
    g: &mut Graph,
    store: &ParamStore,
    unit: &ResidualUnit,
    x: Var,
    mode: Mode,
    updates: &mut Vec<BnUpdate>,
) -> Result<Var> {
    let y = bn(g, store, &unit.bn1, x, mode, updates)?;
    let y = g.relu(y);
    let y = conv(g, store, &unit.conv1, y)?;
    let y = bn(g, store, &unit.bn2, y, mode, updates)?;
    let y = g.relu(y);
    let y = conv(g, store, &unit.conv2, y)?;
    ensure!(
        g.value(y).shape() == g.value(x).shape(),
        "residual branch changed shape {:?} -> {:?}",
        g.value(x).shape(),
        g.value(y).shape()
    );
    g.add(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![n, 3, size, size], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn default_config_shapes() {
        // Shape arithmetic only; building at 512 is cheap, running it is not.
        let net = GuidedNet::build(ModelConfig::default(), 0).unwrap();
        assert_eq!(net.feature_size(), 32);
        assert_eq!(
            net.depth_chain(),
            &[(512, 16), (256, 32), (128, 64), (64, 128), (32, 256)]
        );
    }

    #[test]
    fn toy_forward_shapes_and_ranges() {
        let net = GuidedNet::build(ModelConfig::toy(), 1).unwrap();
        let p = net.predict(&batch(2, 64, 2)).unwrap();
        assert_eq!(p.z.shape(), &[2, 1, 16, 16]);
        assert_eq!(p.activation.shape(), &[2, 1, 16, 16]);
        assert!(p.activation.data().iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(p.y_pred.iter().all(|&y| y > 0.0 && y < 1.0));
        // GAP head: the logit is the spatial mean of z
        for (i, &l) in p.logit.iter().enumerate() {
            let m = p.z.data()[i * 256..(i + 1) * 256].iter().sum::<f64>() / 256.0;
            assert_eq!(l, m);
        }
    }

    #[test]
    fn depth_doubles_as_side_halves() {
        let net = GuidedNet::build(ModelConfig::toy(), 0).unwrap();
        for w in net.depth_chain().windows(2) {
            assert_eq!(w[1].0 * 2, w[0].0);
            assert_eq!(w[1].1, w[0].1 * 2);
        }
    }

    #[test]
    fn zero_head_gives_half_everywhere() {
        let mut net = GuidedNet::build(ModelConfig::toy(), 3).unwrap();
        let (w, b) = net.head_params();
        net.params_mut().value_mut(w).data_mut().fill(0.0);
        net.params_mut().value_mut(b).data_mut().fill(0.0);
        let p = net.predict(&batch(2, 64, 4)).unwrap();
        assert!(p.activation.data().iter().all(|&a| a == 0.5));
        assert!(p.y_pred.iter().all(|&y| y == 0.5));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = GuidedNet::build(ModelConfig::toy(), 9).unwrap();
        let b = GuidedNet::build(ModelConfig::toy(), 9).unwrap();
        assert_eq!(a.to_checkpoint_bytes(), b.to_checkpoint_bytes());
        let c = GuidedNet::build(ModelConfig::toy(), 10).unwrap();
        assert_ne!(a.to_checkpoint_bytes(), c.to_checkpoint_bytes());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let net = GuidedNet::build(ModelConfig::toy(), 5).unwrap();
        let back = GuidedNet::from_checkpoint_bytes(&net.to_checkpoint_bytes()).unwrap();
        let x = batch(1, 64, 6);
        assert_eq!(net.predict(&x).unwrap().y_pred, back.predict(&x).unwrap().y_pred);
        assert_eq!(back.config(), net.config());
    }

    #[test]
    fn wrong_input_size_rejected() {
        let net = GuidedNet::build(ModelConfig::toy(), 0).unwrap();
        assert!(net.predict(&batch(1, 32, 0)).is_err());
    }

    #[test]
    fn inadmissible_config_rejected() {
        let cfg = ModelConfig {
            lesion_size: LesionSize::Large,
            stage_count: 3,
            downscale_factor: 8,
            ..ModelConfig::toy()
        };
        assert!(GuidedNet::build(cfg, 0).is_err());
    }
}
