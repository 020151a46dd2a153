//! Encoder → dual-path separator (optionally grouped) → mask → decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dprnn::{default_hop, overlap_add, segment, DprnnBlock};
use crate::error::{Error, Result};
use crate::groupcomm::{group_communicate, group_merge, group_split, GroupComm};
use crate::layers::Linear;
use crate::params::{Bound, ParamId, ParamRegistry};
use crate::tensor::Tensor;

/// Model hyperparameters.
///
/// `groups == 1` selects the baseline: a linear bottleneck `N → hidden_in`
/// feeds an ungrouped separator. With `groups > 1` the encoder output is
/// split directly into `groups` groups of `group_size` features and
/// `hidden_in` must equal `group_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub groups: usize,
    pub group_size: usize,
    pub filters: usize,
    pub hidden_in: usize,
    pub hidden_out: usize,
    pub depth: usize,
    pub window: usize,
    pub stride: usize,
    pub speakers: usize,
    pub sample_rate: u32,
    /// Half block length; `None` picks `ceil(sqrt(frames / 2))` per input.
    pub block_hop: Option<usize>,
    pub inter_bidirectional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::baseline()
    }
}

impl ModelConfig {
    /// 2 ms window at 16 kHz with 50 % hop, two speakers.
    pub fn new(
        groups: usize,
        group_size: usize,
        filters: usize,
        hidden_in: usize,
        hidden_out: usize,
        depth: usize,
    ) -> Self {
        ModelConfig {
            groups,
            group_size,
            filters,
            hidden_in,
            hidden_out,
            depth,
            window: 32,
            stride: 16,
            speakers: 2,
            sample_rate: 16_000,
            block_hop: None,
            inter_bidirectional: true,
        }
    }

    pub fn baseline() -> Self {
        ModelConfig::new(1, 128, 128, 64, 128, 6)
    }

    /// The twelve configurations of the reference comparison, baseline first.
    pub fn table2() -> Vec<ModelConfig> {
        [
            (1, 128, 128, 64, 128, 6),
            (2, 64, 128, 64, 128, 4),
            (4, 32, 128, 32, 64, 4),
            (8, 16, 128, 16, 32, 4),
            (16, 8, 128, 8, 16, 4),
            (16, 8, 128, 8, 16, 6),
            (16, 16, 256, 16, 32, 2),
            (16, 16, 256, 16, 32, 4),
            (32, 4, 128, 4, 8, 6),
            (32, 4, 128, 4, 8, 10),
            (32, 8, 256, 8, 16, 2),
            (32, 8, 256, 8, 16, 4),
        ]
        .into_iter()
        .map(|(k, m, n, hi, ho, l)| ModelConfig::new(k, m, n, hi, ho, l))
        .collect()
    }

    pub fn is_baseline(&self) -> bool {
        self.groups == 1
    }

    /// Feature width seen by the separator blocks (`H_i` for the baseline, `M` otherwise).
    pub fn feature_dim(&self) -> usize {
        if self.is_baseline() {
            self.hidden_in
        } else {
            self.group_size
        }
    }

    pub fn frames_for(&self, samples: usize) -> Result<usize> {
        if samples < self.window {
            return Err(Error::InputTooShort {
                len: samples,
                min: self.window,
            });
        }
        Ok((samples - self.window) / self.stride + 1)
    }

    pub fn hop_for(&self, frames: usize) -> usize {
        self.block_hop.unwrap_or_else(|| default_hop(frames))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("groups", self.groups),
            ("group_size", self.group_size),
            ("filters", self.filters),
            ("hidden_in", self.hidden_in),
            ("hidden_out", self.hidden_out),
            ("depth", self.depth),
            ("window", self.window),
            ("stride", self.stride),
            ("speakers", self.speakers),
            ("sample_rate", self.sample_rate as usize),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.block_hop == Some(0) {
            return Err(Error::config("block_hop", "must be positive (or auto)"));
        }
        if self.groups * self.group_size != self.filters {
            return Err(Error::config(
                "group_size",
                format!(
                    "groups × group_size = {} × {} must equal filters = {}",
                    self.groups, self.group_size, self.filters
                ),
            ));
        }
        if !self.is_baseline() && self.hidden_in != self.group_size {
            return Err(Error::config(
                "hidden_in",
                format!("must equal group_size ({}) when groups > 1", self.group_size),
            ));
        }
        Ok(())
    }
}

/// A fully parameterised separator.
#[derive(Debug, Clone)]
pub struct SeparatorModel {
    config: ModelConfig,
    registry: ParamRegistry,
    encoder: ParamId,
    bottleneck: Option<Linear>,
    comms: Vec<GroupComm>,
    blocks: Vec<DprnnBlock>,
    mask: Linear,
    decoder: ParamId,
}

impl SeparatorModel {
    /// Builds and initialises every parameter from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = ParamRegistry::new();
        let (n, w) = (cfg.filters, cfg.window);

        let bound = 1.0 / (w as f64).sqrt();
        let enc_data = (0..n * w)
            .map(|_| rand::Rng::gen_range(&mut rng, -bound..bound))
            .collect();
        let encoder = reg.register("encoder.weight", &[n, 1, w], enc_data)?;

        let bottleneck = if cfg.is_baseline() {
            Some(Linear::new(&mut reg, "bottleneck", n, cfg.hidden_in, &mut rng)?)
        } else {
            None
        };

        let d = cfg.feature_dim();
        let mut comms = Vec::new();
        let mut blocks = Vec::new();
        for b in 0..cfg.depth {
            if !cfg.is_baseline() {
                comms.push(GroupComm::new(
                    &mut reg,
                    &format!("block{b}.comm"),
                    d,
                    cfg.hidden_out,
                    &mut rng,
                )?);
            }
            blocks.push(DprnnBlock::new(
                &mut reg,
                &format!("block{b}"),
                d,
                cfg.hidden_out,
                cfg.inter_bidirectional,
                &mut rng,
            )?);
        }

        let mask = if cfg.is_baseline() {
            Linear::new(&mut reg, "mask", cfg.hidden_in, cfg.speakers * n, &mut rng)?
        } else {
            Linear::new(&mut reg, "mask", d, cfg.speakers * d, &mut rng)?
        };

        // each output sample collects N channels from ceil(W/stride) frames
        let fan_in = n * w.div_ceil(cfg.stride);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dec_data = (0..n * w)
            .map(|_| rand::Rng::gen_range(&mut rng, -bound..bound))
            .collect();
        let decoder = reg.register("decoder.weight", &[n, 1, w], dec_data)?;

        Ok(SeparatorModel {
            config: cfg,
            registry: reg,
            encoder,
            bottleneck,
            comms,
            blocks,
            mask,
            decoder,
        })
    }

    /// Rebuilds a model from a config and previously saved parameters.
    pub fn from_registry(config: &ModelConfig, params: &ParamRegistry) -> Result<Self> {
        let mut model = SeparatorModel::new(config, 0)?;
        model.registry.copy_values_from(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParamRegistry {
        &mut self.registry
    }

    pub fn mask_layer(&self) -> &Linear {
        &self.mask
    }

    pub fn blocks(&self) -> &[DprnnBlock] {
        &self.blocks
    }

    pub fn comms(&self) -> &[GroupComm] {
        &self.comms
    }

    /// Linear strided encoder: `[1 × L] -> [N × F]`.
    pub fn encode(&self, p: &Bound, wave: &Tensor) -> Result<Tensor> {
        let wave = as_row(wave)?;
        let len = wave.shape()[1];
        self.config.frames_for(len)?;
        wave.conv1d(p.get(self.encoder), self.config.stride)
    }

    /// Nonnegative masks `[speakers × N × F]` from separator output `[F × D]`
    /// (`D = N` for grouped models after merging, `H_i` for the baseline).
    pub fn estimate_masks(&self, p: &Bound, features: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let (n, spk) = (cfg.filters, cfg.speakers);
        if features.rank() != 2 {
            return Err(Error::shape("estimate_masks", features.shape(), &[n]));
        }
        let frames = features.shape()[0];
        if cfg.is_baseline() {
            self.mask
                .forward(p, features)?
                .relu()
                .reshape(&[frames, spk, n])?
                .permute(&[1, 2, 0])?
                .reshape(&[spk, n, frames])
        } else {
            let (k, m) = (cfg.groups, cfg.group_size);
            if features.shape()[1] != n {
                return Err(Error::shape("estimate_masks", features.shape(), &[frames, n]));
            }
            self.mask
                .forward(p, &features.reshape(&[frames * k, m])?)?
                .relu()
                .reshape(&[frames, k, spk, m])?
                .permute(&[2, 1, 3, 0])?
                .reshape(&[spk, n, frames])
        }
    }

    /// Separator core on `[F × D]` frames (after encoder/bottleneck).
    fn separate_features(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let frames = x.shape()[0];
        let seg = segment(x, cfg.hop_for(frames))?;
        let seg = if cfg.is_baseline() {
            let mut seg = seg;
            for block in &self.blocks {
                seg = block.forward(&seg, p)?;
            }
            seg
        } else {
            let mut g = group_split(&seg, cfg.groups)?;
            for (comm, block) in self.comms.iter().zip(&self.blocks) {
                g = group_communicate(&g, comm, p)?;
                g.seg = block.forward(&g.seg, p)?;
            }
            group_merge(&g)?
        };
        overlap_add(&seg)
    }

    /// Full differentiable pass: `[1 × L]` (or `[L]`) waveform to
    /// `[speakers × L]` estimates.
    pub fn forward(&self, p: &Bound, wave: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let wave = as_row(wave)?;
        let len = wave.shape()[1];
        let enc = self.encode(p, &wave)?;
        let frames_major = enc.transpose()?;
        let x = match &self.bottleneck {
            Some(bn) => bn.forward(p, &frames_major)?,
            None => frames_major,
        };
        let y = self.separate_features(p, &x)?;
        let masks = self.estimate_masks(p, &y)?;
        let masked = masks.mul(&enc)?;

        let frames = enc.shape()[1];
        let mut outs = Vec::with_capacity(cfg.speakers);
        for s in 0..cfg.speakers {
            let feat = masked.slice(0, s, 1)?.reshape(&[cfg.filters, frames])?;
            let wav = feat.conv1d_transpose(p.get(self.decoder), cfg.stride)?;
            outs.push(fit_length(&wav, len)?);
        }
        Tensor::concat(&outs, 0)
    }

    /// Inference on raw samples; one vector per speaker, same length as input.
    pub fn separate(&self, wave: &[f64]) -> Result<Vec<Vec<f64>>> {
        let p = self.registry.bind(false);
        let x = Tensor::new(wave.to_vec(), &[1, wave.len()]).map_err(|_| Error::InputTooShort {
            len: 0,
            min: self.config.window,
        })?;
        let y = self.forward(&p, &x)?;
        Ok(y.data().chunks(wave.len()).map(<[f64]>::to_vec).collect())
    }
}

fn as_row(wave: &Tensor) -> Result<Tensor> {
    match wave.shape() {
        [1, _] => Ok(wave.clone()),
        [n] => wave.reshape(&[1, *n]),
        other => Err(Error::shape("waveform", other, &[1, 0])),
    }
}

/// Trims or zero-pads `[1 × L']` to `[1 × len]`.
fn fit_length(wav: &Tensor, len: usize) -> Result<Tensor> {
    let have = wav.shape()[1];
    match have.cmp(&len) {
        std::cmp::Ordering::Equal => Ok(wav.clone()),
        std::cmp::Ordering::Greater => wav.slice(1, 0, len),
        std::cmp::Ordering::Less => Tensor::concat(&[wav.clone(), Tensor::zeros(&[1, len - have])], 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(groups: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(groups, 8 / groups, 8, 8 / groups, 4, 1);
        if groups == 1 {
            cfg.hidden_in = 4;
        }
        cfg.window = 4;
        cfg.stride = 2;
        cfg
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::baseline().validate().is_ok());
        for cfg in ModelConfig::table2() {
            cfg.validate().unwrap();
        }
        let mut bad = ModelConfig::new(4, 8, 30, 8, 16, 2);
        assert!(matches!(bad.validate(), Err(Error::Config { ref key, .. }) if key == "group_size"));
        bad.filters = 32;
        bad.hidden_in = 7;
        assert!(matches!(bad.validate(), Err(Error::Config { ref key, .. }) if key == "hidden_in"));
        bad.hidden_in = 8;
        bad.depth = 0;
        assert!(matches!(bad.validate(), Err(Error::Config { ref key, .. }) if key == "depth"));
    }

    #[test]
    fn encoder_length_formula_and_zero_input() {
        let model = SeparatorModel::new(&micro(2), 3).unwrap();
        let p = model.registry().bind(false);
        let enc = model.encode(&p, &Tensor::zeros(&[1, 64])).unwrap();
        assert_eq!(enc.shape(), &[8, 31]);
        assert!(enc.data().iter().all(|&v| v == 0.0));
        assert!(model.encode(&p, &Tensor::zeros(&[1, 3])).is_err());
        assert_eq!(ModelConfig::baseline().frames_for(64_000).unwrap(), 3999);
    }

    #[test]
    fn selector_kernel_samples_input() {
        let mut cfg = micro(2);
        cfg.filters = 2;
        cfg.group_size = 1;
        cfg.hidden_in = 1;
        let mut model = SeparatorModel::new(&cfg, 1).unwrap();
        let enc_id = model.registry().id("encoder.weight").unwrap();
        model.registry_mut().entry_mut(enc_id).data = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let p = model.registry().bind(false);
        let wave: Vec<f64> = (0..10).map(f64::from).collect();
        let enc = model.encode(&p, &Tensor::vector(&wave)).unwrap();
        assert_eq!(&enc.data()[..4], &[0.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn output_shape_and_zero_mask() {
        for groups in [1, 2] {
            let mut model = SeparatorModel::new(&micro(groups), 5).unwrap();
            let wave: Vec<f64> = (0..37).map(|i| (i as f64 * 0.3).sin() * 0.5).collect();
            let out = model.separate(&wave).unwrap();
            assert_eq!(out.len(), 2);
            assert!(out.iter().all(|o| o.len() == 37));
            let mask = model.mask_layer().clone();
            model.registry_mut().entry_mut(mask.weight).data.fill(0.0);
            model.registry_mut().entry_mut(mask.bias).data.fill(0.0);
            let out = model.separate(&wave).unwrap();
            assert!(out.iter().flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn grouped_mask_shape() {
        let model = SeparatorModel::new(&micro(2), 9).unwrap();
        let p = model.registry().bind(false);
        let feats = Tensor::new((0..8 * 5).map(|i| (i as f64).cos()).collect(), &[5, 8]).unwrap();
        let masks = model.estimate_masks(&p, &feats).unwrap();
        assert_eq!(masks.shape(), &[2, 8, 5]);
        assert!(masks.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn dprnn_weights_registered_once_per_block() {
        let cfg = ModelConfig::new(16, 8, 128, 8, 16, 6);
        let model = SeparatorModel::new(&cfg, 0).unwrap();
        // encoder, decoder, mask (2), and per block 3 branches × (2·3 lstm + 2 fc + 2 ln)
        assert_eq!(model.registry().len(), 2 + 2 + 6 * 3 * 10);
    }
}
