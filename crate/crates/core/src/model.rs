//! Generator (pyramid-context encoder, attention transfer stack,
//! multi-scale decoder) and the spectrally normalized patch discriminator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atn::{Atn, LevelTrace};
use crate::autograd::{Tape, Var};
use crate::conv::{bilinear, ConvSpec};
use crate::error::{Error, Result};
use crate::mask::{evolve_mask, BinaryMask, MaskPyramid};
use crate::nn::{Bound, Conv2d, Deconv2d, ParamStore};
use crate::sample::{mask_batch, MultiScaleOutputs};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DISC_KERNEL: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input size in pixels.
    pub resolution: usize,
    /// Encoder channel width per level, finest first. Its length is the depth.
    pub encoder_widths: Vec<usize>,
    /// Widths of the four stride-2 discriminator layers; a final stride-1
    /// layer maps to one logit channel.
    pub discriminator_widths: Vec<usize>,
}

impl ModelConfig {
    /// Seven-level encoder at 256×256.
    pub fn full() -> Self {
        ModelConfig {
            resolution: 256,
            encoder_widths: vec![16, 32, 64, 128, 256, 256, 256],
            discriminator_widths: vec![64, 128, 256, 512],
        }
    }

    /// Five levels, 128×128, half the channel widths.
    pub fn mini() -> Self {
        ModelConfig {
            resolution: 128,
            encoder_widths: vec![8, 16, 32, 64, 128],
            discriminator_widths: vec![32, 64, 128, 256],
        }
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn depth(&self) -> usize {
        self.encoder_widths.len()
    }

    /// Spatial size of encoder level `l` (0-based).
    pub fn level_size(&self, l: usize) -> usize {
        self.resolution >> l
    }

    /// Spatial size of the discriminator logit map.
    pub fn logit_size(&self) -> usize {
        self.resolution >> 4
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.depth();
        if depth < 2 {
            return Err(Error::config("the encoder needs at least two levels"));
        }
        if !self.resolution.is_power_of_two() || self.resolution < (1 << depth) {
            return Err(Error::config(format!(
                "resolution {} must be a power of two of at least 2^{depth}",
                self.resolution
            )));
        }
        if self.resolution < 16 {
            return Err(Error::config("the discriminator needs at least 16×16 inputs"));
        }
        if let Some(w) = self.encoder_widths[..depth - 1].iter().find(|&&w| w == 0 || w % 4 != 0) {
            return Err(Error::config(format!(
                "encoder width {w} is not divisible by the four refinement groups"
            )));
        }
        if self.discriminator_widths.len() != 4 || self.discriminator_widths.contains(&0) {
            return Err(Error::config("the discriminator needs four nonzero widths"));
        }
        Ok(())
    }
}

/// Checks a `[N, 3, R, R]` batch against `N` masks of size `R`.
fn check_batch(config: &ModelConfig, images: &Tensor, masks: &[&BinaryMask]) -> Result<()> {
    let shape = images.shape();
    let r = config.resolution;
    if shape.len() != 4 || shape[1] != 3 || shape[2] != r || shape[3] != r {
        return Err(Error::shape(format!(
            "expected images [N, 3, {r}, {r}], got {shape:?}"
        )));
    }
    if masks.len() != shape[0] {
        return Err(Error::shape(format!(
            "{} masks for a batch of {}",
            masks.len(),
            shape[0]
        )));
    }
    if let Some(m) = masks.iter().find(|m| m.height() != r || m.width() != r) {
        return Err(Error::shape(format!(
            "mask {}x{} does not match {r}x{r} image",
            m.height(),
            m.width()
        )));
    }
    Ok(())
}

/// Every intermediate of one generator pass.
pub struct GeneratorPass<'t> {
    /// Encoder features, finest first.
    pub phi: Vec<Var<'t>>,
    /// Attention-filled features for levels `0..depth-1`.
    pub psi: Vec<Var<'t>>,
    /// Clipped RGB predictions per level, finest first.
    pub outputs: Vec<Var<'t>>,
    /// Prediction inside holes, input elsewhere.
    pub composed: Var<'t>,
}

impl GeneratorPass<'_> {
    pub fn multi_scale(&self) -> MultiScaleOutputs {
        MultiScaleOutputs {
            outputs: self.outputs.iter().map(|o| (*o.value()).clone()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Vec<Conv2d>,
    atns: Vec<Atn>,
    deconvs: Vec<Deconv2d>,
    heads: Vec<Conv2d>,
}

impl Generator {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let widths = &config.encoder_widths;
        let depth = widths.len();
        let mut params = ParamStore::new();

        let mut encoder = Vec::with_capacity(depth);
        let mut in_ch = 4;
        for (l, &w) in widths.iter().enumerate() {
            let stride = if l == 0 { 1 } else { 2 };
            encoder.push(Conv2d::new(
                &mut params,
                rng,
                &format!("encoder.{l}"),
                in_ch,
                w,
                3,
                ConvSpec::same(3, stride, 1),
                LEAKY_SLOPE,
            ));
            in_ch = w;
        }

        let mut atns = Vec::with_capacity(depth - 1);
        let mut deconvs = Vec::with_capacity(depth - 1);
        let mut heads = Vec::with_capacity(depth - 1);
        for l in 0..depth - 1 {
            atns.push(Atn::new(&mut params, rng, &format!("atn.{l}"), l + 2, widths[l])?);
            let deconv_in = if l == depth - 2 {
                widths[depth - 1]
            } else {
                2 * widths[l + 1]
            };
            deconvs.push(Deconv2d::new(
                &mut params,
                rng,
                &format!("decoder.{l}"),
                deconv_in,
                widths[l],
            ));
            heads.push(Conv2d::new(
                &mut params,
                rng,
                &format!("head.{l}"),
                2 * widths[l],
                3,
                1,
                ConvSpec::same(1, 1, 1),
                1.0,
            ));
        }
        Ok(Generator {
            config,
            params,
            encoder,
            atns,
            deconvs,
            heads,
        })
    }

    pub fn depth(&self) -> usize {
        self.config.depth()
    }

    /// Encoder features for a batch of images (`[N, 3, R, R]` in `[-1, 1]`).
    /// The first layer sees the masked image concatenated with the mask.
    pub fn encode<'t>(
        &self,
        params: &Bound<'t>,
        images: &Tensor,
        masks: &[&BinaryMask],
    ) -> Result<Vec<Var<'t>>> {
        check_batch(&self.config, images, masks)?;
        let tape = params_tape(params)?;
        let holes = mask_batch(masks, 3)?;
        let masked = images.zip_map(&holes, |x, m| x * (1.0 - m));
        let input = Tensor::concat_channels(&[&masked, &mask_batch(masks, 1)?])?;
        let mut x = tape.constant(input);
        let mut phi = Vec::with_capacity(self.depth());
        for (l, layer) in self.encoder.iter().enumerate() {
            let y = layer.forward(params, x)?;
            x = if l + 1 == self.depth() {
                y.relu()
            } else {
                y.leaky_relu(LEAKY_SLOPE)
            };
            phi.push(x);
        }
        Ok(phi)
    }

    /// Attention transfer from the deepest level to the finest:
    /// `ψ[L-2] = f(φ[L-2], φ[L-1])`, then `ψ[l] = f(φ[l], ψ[l+1])`.
    pub fn fill_pyramid<'t>(
        &self,
        params: &Bound<'t>,
        phi: &[Var<'t>],
        pyramids: &[MaskPyramid],
        mut trace: Option<&mut Vec<LevelTrace>>,
    ) -> Result<Vec<Var<'t>>> {
        let depth = self.depth();
        if phi.len() != depth {
            return Err(Error::shape(format!(
                "{} feature levels for a depth-{depth} encoder",
                phi.len()
            )));
        }
        if let Some(p) = pyramids.iter().find(|p| p.len() != depth) {
            return Err(Error::shape(format!(
                "mask pyramid has {} levels, encoder has {depth}",
                p.len()
            )));
        }
        let mut psi: Vec<Option<Var<'t>>> = vec![None; depth - 1];
        let mut high = phi[depth - 1];
        for l in (0..depth - 1).rev() {
            let low_masks: Vec<&BinaryMask> = pyramids.iter().map(|p| p.level(l)).collect();
            let high_masks: Vec<&BinaryMask> = pyramids.iter().map(|p| p.level(l + 1)).collect();
            let filled = self.atns[l].forward(
                params,
                phi[l],
                high,
                &low_masks,
                &high_masks,
                trace.as_deref_mut(),
            )?;
            psi[l] = Some(filled);
            high = filled;
        }
        Ok(psi.into_iter().map(|p| p.expect("every level filled")).collect())
    }

    /// Multi-scale decoding; returns the clipped prediction of every level
    /// `0..depth-1`, finest first.
    pub fn decode<'t>(
        &self,
        params: &Bound<'t>,
        latent: Var<'t>,
        psi: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>> {
        let depth = self.depth();
        if psi.len() != depth - 1 {
            return Err(Error::shape(format!(
                "{} filled levels for a depth-{depth} decoder",
                psi.len()
            )));
        }
        let mut outputs: Vec<Option<Var<'t>>> = vec![None; depth - 1];
        let mut x = latent;
        for l in (0..depth - 1).rev() {
            let up = self.deconvs[l].forward(params, x)?.relu();
            let (up_shape, skip_shape) = (up.shape(), psi[l].shape());
            if up_shape[0] != skip_shape[0] || up_shape[2..] != skip_shape[2..] {
                return Err(Error::shape(format!(
                    "decoder level {l}: upsampled {up_shape:?} vs skip {skip_shape:?}"
                )));
            }
            x = Var::concat_channels(&[up, psi[l]])?;
            if x.shape()[1] != self.heads[l].in_channels {
                return Err(Error::shape(format!(
                    "decoder level {l}: {} channels, head expects {}",
                    x.shape()[1],
                    self.heads[l].in_channels
                )));
            }
            outputs[l] = Some(self.heads[l].forward(params, x)?.clamp(-1.0, 1.0));
        }
        Ok(outputs.into_iter().map(|o| o.expect("every level decoded")).collect())
    }

    /// Full pass with gradients recorded on `params`' tape.
    pub fn forward<'t>(
        &self,
        params: &Bound<'t>,
        images: &Tensor,
        masks: &[&BinaryMask],
        trace: Option<&mut Vec<LevelTrace>>,
    ) -> Result<GeneratorPass<'t>> {
        let phi = self.encode(params, images, masks)?;
        let pyramids = masks
            .iter()
            .map(|m| evolve_mask(m, self.depth()))
            .collect::<Result<Vec<_>>>()?;
        let psi = self.fill_pyramid(params, &phi, &pyramids, trace)?;
        let outputs = self.decode(params, phi[self.depth() - 1], &psi)?;
        let tape = params_tape(params)?;
        let composed = compose_output(outputs[0], tape.constant(images.clone()), masks)?;
        Ok(GeneratorPass {
            phi,
            psi,
            outputs,
            composed,
        })
    }

    /// Inference-only pass: multi-scale outputs and the composed image.
    pub fn generate(
        &self,
        images: &Tensor,
        masks: &[&BinaryMask],
    ) -> Result<(MultiScaleOutputs, Tensor)> {
        let tape = Tape::inference();
        let params = self.params.bind(&tape);
        let pass = self.forward(&params, images, masks, None)?;
        Ok((pass.multi_scale(), (*pass.composed.value()).clone()))
    }
}

fn params_tape<'t>(params: &Bound<'t>) -> Result<&'t Tape> {
    params
        .iter()
        .next()
        .map(|(_, v)| v.tape())
        .ok_or_else(|| Error::config("no parameters bound"))
}

/// `z = prediction ⊙ M + x ⊙ (1 − M)`, realized as an exact per-pixel select.
pub fn compose_output<'t>(
    prediction: Var<'t>,
    images: Var<'t>,
    masks: &[&BinaryMask],
) -> Result<Var<'t>> {
    let (ps, xs) = (prediction.shape(), images.shape());
    if ps != xs || ps.len() != 4 || ps[0] != masks.len() {
        return Err(Error::shape(format!(
            "compose: prediction {ps:?}, image {xs:?}, {} masks",
            masks.len()
        )));
    }
    if let Some(m) = masks.iter().find(|m| m.height() != ps[2] || m.width() != ps[3]) {
        return Err(Error::shape(format!(
            "compose: mask {}x{} vs image {}x{}",
            m.height(),
            m.width(),
            ps[2],
            ps[3]
        )));
    }
    let holes = mask_batch(masks, ps[1])?;
    Ok(prediction.select(&holes, images))
}

/// Power-iteration state of one spectrally normalized weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn normalized(mut x: Vec<f64>) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in &mut x {
        *v /= n;
    }
    x
}

impl SpectralState {
    fn new<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let u = Tensor::randn(&[rows], 1.0, rng).into_data();
        SpectralState {
            u: normalized(u),
            v: vec![0.0; cols],
        }
    }

    /// One step: `v ← Wᵀu / ‖Wᵀu‖`, `u ← Wv / ‖Wv‖`.
    pub fn iterate(&mut self, weight: &Tensor) {
        let rows = self.u.len();
        let cols = self.v.len();
        let w = weight.data();
        let mut v = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                v[j] += w[i * cols + j] * self.u[i];
            }
        }
        self.v = normalized(v);
        let u = (0..rows)
            .map(|i| (0..cols).map(|j| w[i * cols + j] * self.v[j]).sum())
            .collect();
        self.u = normalized(u);
    }

    /// Current estimate of the top singular value.
    pub fn sigma(&self, weight: &Tensor) -> f64 {
        bilinear(&self.u, weight.data(), &self.v)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: ModelConfig,
    pub params: ParamStore,
    layers: Vec<Conv2d>,
    spectral: Vec<SpectralState>,
}

impl Discriminator {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(5);
        let mut in_ch = 3;
        let widths = config.discriminator_widths.iter().copied().chain([1]);
        for (i, w) in widths.enumerate() {
            let stride = if i < 4 { 2 } else { 1 };
            layers.push(Conv2d::new(
                &mut params,
                rng,
                &format!("disc.{i}"),
                in_ch,
                w,
                DISC_KERNEL,
                ConvSpec::same(DISC_KERNEL, stride, 1),
                LEAKY_SLOPE,
            ));
            in_ch = w;
        }
        let spectral = layers
            .iter()
            .map(|l| {
                SpectralState::new(l.out_channels, l.in_channels * DISC_KERNEL * DISC_KERNEL, rng)
            })
            .collect();
        let mut d = Discriminator {
            config,
            params,
            layers,
            spectral,
        };
        d.power_iterate();
        Ok(d)
    }

    pub fn layers(&self) -> &[Conv2d] {
        &self.layers
    }

    pub fn spectral(&self) -> &[SpectralState] {
        &self.spectral
    }

    pub fn spectral_mut(&mut self) -> &mut [SpectralState] {
        &mut self.spectral
    }

    /// Advances every layer's power iteration by one step.
    pub fn power_iterate(&mut self) {
        for (layer, state) in self.layers.iter().zip(&mut self.spectral) {
            let w = self
                .params
                .get(&layer.weight_name())
                .expect("discriminator weight registered at construction");
            state.iterate(w);
        }
    }

    /// Weight of layer `i` divided by its current spectral-norm estimate.
    pub fn normalized_weight(&self, i: usize) -> Result<Tensor> {
        let w = self
            .params
            .get(&self.layers[i].weight_name())
            .ok_or_else(|| Error::config("missing discriminator weight"))?;
        let sigma = self.spectral[i].sigma(w);
        Ok(w.scale(1.0 / sigma))
    }

    /// Patch logits `[N, 1, R/16, R/16]` for images `[N, 3, R, R]`. Uses the
    /// stored power-iteration vectors without advancing them.
    pub fn forward<'t>(&self, params: &Bound<'t>, images: Var<'t>) -> Result<Var<'t>> {
        let shape = images.shape();
        let r = self.config.resolution;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != r || shape[3] != r {
            return Err(Error::shape(format!(
                "discriminator expects [N, 3, {r}, {r}], got {shape:?}"
            )));
        }
        let mut x = images;
        for (layer, state) in self.layers.iter().zip(&self.spectral) {
            let w = params
                .var(&layer.weight_name())?
                .spectral_normalize(&state.u, &state.v)?;
            x = layer
                .forward_with_weight(params, x, w)?
                .leaky_relu(LEAKY_SLOPE);
        }
        Ok(x)
    }

    pub fn discriminate(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let params = self.params.bind(&tape);
        let out = self.forward(&params, tape.constant(images.clone()))?;
        Ok((*out.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            resolution: 32,
            encoder_widths: vec![4, 4, 8, 8],
            discriminator_widths: vec![4, 4, 4, 4],
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::full().validate().is_ok());
        assert!(ModelConfig::mini().validate().is_ok());
        assert!(ModelConfig::mini().with_resolution(32).validate().is_ok());
        let mut bad = toy_config();
        bad.encoder_widths[1] = 6;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(toy_config().with_resolution(48).validate().is_err());
        assert!(toy_config().with_resolution(8).validate().is_err());
    }

    #[test]
    fn zero_parameters_give_zero_features_and_outputs() {
        let mut g = Generator::new(toy_config(), 1).unwrap();
        g.params.zero_all();
        let images = Tensor::zeros(&[1, 3, 32, 32]);
        let mask = BinaryMask::zeros(32, 32);
        let tape = Tape::inference();
        let p = g.params.bind(&tape);
        let pass = g.forward(&p, &images, &[&mask], None).unwrap();
        for v in pass.phi.iter().chain(&pass.psi).chain(&pass.outputs) {
            assert!(v.value().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn encode_rejects_mismatched_mask() {
        let g = Generator::new(toy_config(), 1).unwrap();
        let tape = Tape::inference();
        let p = g.params.bind(&tape);
        let images = Tensor::zeros(&[1, 3, 32, 32]);
        let mask = BinaryMask::zeros(16, 16);
        assert!(matches!(g.encode(&p, &images, &[&mask]), Err(Error::Shape(_))));
        assert!(matches!(g.encode(&p, &images, &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn fill_pyramid_rejects_level_mismatch() {
        let g = Generator::new(toy_config(), 1).unwrap();
        let tape = Tape::inference();
        let p = g.params.bind(&tape);
        let images = Tensor::zeros(&[1, 3, 32, 32]);
        let mask = BinaryMask::zeros(32, 32);
        let phi = g.encode(&p, &images, &[&mask]).unwrap();
        let short = evolve_mask(&mask, 3).unwrap();
        assert!(g.fill_pyramid(&p, &phi, &[short], None).is_err());
        assert!(g
            .fill_pyramid(&p, &phi[..3], &[evolve_mask(&mask, 4).unwrap()], None)
            .is_err());
    }

    #[test]
    fn decode_rejects_channel_mismatch() {
        let g = Generator::new(toy_config(), 1).unwrap();
        let tape = Tape::inference();
        let p = g.params.bind(&tape);
        let latent = tape.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let psi = vec![
            tape.constant(Tensor::zeros(&[1, 4, 32, 32])),
            tape.constant(Tensor::zeros(&[1, 4, 16, 16])),
            tape.constant(Tensor::zeros(&[1, 5, 8, 8])),
        ];
        assert!(matches!(g.decode(&p, latent, &psi), Err(Error::Shape(_))));
    }

    #[test]
    fn compose_selects_exactly() {
        let tape = Tape::inference();
        let pred = tape.constant(Tensor::full(&[1, 3, 2, 2], 0.5));
        let x = tape.constant(Tensor::full(&[1, 3, 2, 2], -0.25));
        let m = BinaryMask::new(2, 2, vec![1., 0., 0., 1.]).unwrap();
        let z = compose_output(pred, x, &[&m]).unwrap().value();
        for c in 0..3 {
            assert_eq!(z.at4(0, c, 0, 0), 0.5);
            assert_eq!(z.at4(0, c, 0, 1), -0.25);
            assert_eq!(z.at4(0, c, 1, 0), -0.25);
            assert_eq!(z.at4(0, c, 1, 1), 0.5);
        }
        assert!(compose_output(pred, x, &[&BinaryMask::zeros(3, 3)]).is_err());
    }

    #[test]
    fn discriminator_zero_input_zero_bias_gives_zero_logits() {
        let d = Discriminator::new(toy_config(), 2).unwrap();
        let logits = d.discriminate(&Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        assert_eq!(logits.shape(), &[2, 1, 2, 2]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discriminator_rejects_wrong_size() {
        let d = Discriminator::new(toy_config(), 2).unwrap();
        assert!(d.discriminate(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
    }
}
