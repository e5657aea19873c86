//! Variational affordance encoder-decoder.
//!
//! An RGB image is encoded by four strided convolutions into a diagonal
//! Gaussian over a small latent space; a latent vector is decoded by a dense
//! layer and four mirrored transposed convolutions into one sigmoid
//! probability map per affordance.

use ndarray::{Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis, Dimension};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::metrics::PixelCounts;
use crate::nn::{
    leaky_relu, leaky_relu_backward, sigmoid, Adam, Conv2d, ConvCache, ConvGeometry,
    ConvTranspose2d, ConvTransposeCache, Linear, Module, Scalar,
};
use crate::scenegen::{LoadedDataset, RgbImage};
use crate::{Error, Result};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
pub const BCE_EPS: f64 = 1e-7;
pub const CHECKPOINT_KIND: &str = "vaed";
const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// How the per-pixel cross-entropy is reduced before β·KL is added.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconReduction {
    /// Sum over pixels and channels, mean over the batch.
    #[default]
    Sum,
    /// Mean over pixels, channels and batch.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaedConfig {
    pub latent_dim: usize,
    pub beta: f64,
    pub conv_spec: Vec<ConvStage>,
    /// `(H, W)`.
    pub image_size: [usize; 2],
    pub n_affordances: usize,
    pub recon_reduction: ReconReduction,
}

impl Default for VaedConfig {
    fn default() -> Self {
        let stage = |channels| ConvStage {
            channels,
            kernel: 4,
            stride: 2,
        };
        Self {
            latent_dim: 10,
            beta: 4.0,
            conv_spec: vec![stage(32), stage(64), stage(128), stage(256)],
            image_size: [64, 64],
            n_affordances: 2,
            recon_reduction: ReconReduction::Sum,
        }
    }
}

impl VaedConfig {
    /// Spatial geometry of each encoder stage, validating the whole spec.
    pub fn geometries(&self) -> Result<Vec<ConvGeometry>> {
        if self.latent_dim == 0 || !(self.beta >= 0.0) || self.n_affordances == 0 {
            return Err(Error::Config(
                "vaed: latent_dim and n_affordances must be >= 1 and beta >= 0".into(),
            ));
        }
        if self.conv_spec.len() != 4 {
            return Err(Error::Config(format!(
                "vaed: expected 4 conv stages, got {}",
                self.conv_spec.len()
            )));
        }
        let mut size = (self.image_size[0], self.image_size[1]);
        let mut out = Vec::with_capacity(4);
        for (i, s) in self.conv_spec.iter().enumerate() {
            let g = ConvGeometry::halving(s.kernel, s.stride, size).ok_or_else(|| {
                Error::Config(format!(
                    "vaed: stage {i} (kernel {}, stride {}) does not fit a {}x{} input",
                    s.kernel, s.stride, size.0, size.1
                ))
            })?;
            if s.channels == 0 {
                return Err(Error::Config(format!("vaed: stage {i} has zero channels")));
            }
            size = g.small;
            out.push(g);
        }
        Ok(out)
    }

    fn flat_shape(&self, geoms: &[ConvGeometry]) -> (usize, usize, usize) {
        let (h, w) = geoms[3].small;
        (self.conv_spec[3].channels, h, w)
    }

    fn pixels(&self) -> usize {
        self.n_affordances * self.image_size[0] * self.image_size[1]
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDistribution {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// `z = μ + exp(logvar / 2) ⊙ ε`.
pub fn reparameterize(dist: &LatentDistribution, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != dist.mu.len() {
        return Err(Error::Input(format!(
            "noise has length {}, latent has {}",
            noise.len(),
            dist.mu.len()
        )));
    }
    Ok(dist
        .mu
        .iter()
        .zip(&dist.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I))`, summed over dimensions.
pub fn kl_divergence(dist: &LatentDistribution) -> f64 {
    0.5 * dist
        .mu
        .iter()
        .zip(&dist.logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Mean binary cross-entropy with predictions clamped to `[ε, 1 − ε]`.
pub fn bce_loss<D: Dimension>(
    pred: ndarray::ArrayView<f64, D>,
    target: ndarray::ArrayView<f64, D>,
) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Input(format!(
            "prediction shape {:?} does not match target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    /// Reconstruction term after the configured reduction.
    pub bce: f64,
    /// KL summed over latent dimensions, averaged over the batch.
    pub kl: f64,
}

impl LossParts {
    pub fn combine(bce: f64, kl: f64, beta: f64) -> Self {
        Self {
            total: bce + beta * kl,
            bce,
            kl,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Vaed<T> {
    pub config: VaedConfig,
    encoder: Vec<Conv2d<T>>,
    mu_head: Linear<T>,
    logvar_head: Linear<T>,
    dec_fc: Linear<T>,
    decoder: Vec<ConvTranspose2d<T>>,
}

struct EncoderCache<T> {
    convs: Vec<ConvCache<T>>,
    pre: Vec<Array4<T>>,
    flat: Array2<T>,
    logvar_raw: Array2<T>,
}

struct DecoderCache<T> {
    z: Array2<T>,
    fc_pre: Array2<T>,
    convs: Vec<ConvTransposeCache<T>>,
    pre: Vec<Array4<T>>,
}

impl<T: Scalar> Vaed<T> {
    pub fn new(config: VaedConfig, seed: u64) -> Result<Self> {
        let geoms = config.geometries()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(4);
        let mut in_ch = INPUT_CHANNELS;
        for (s, g) in config.conv_spec.iter().zip(&geoms) {
            encoder.push(Conv2d::new(in_ch, s.channels, *g, &mut rng));
            in_ch = s.channels;
        }
        let (c, h, w) = config.flat_shape(&geoms);
        let flat = c * h * w;
        let mu_head = Linear::new(flat, config.latent_dim, &mut rng);
        let mut logvar_head = Linear::new(flat, config.latent_dim, &mut rng);
        logvar_head.weight.mapv_inplace(|v| v * T::of(0.1));
        let dec_fc = Linear::new(config.latent_dim, flat, &mut rng);
        let mut decoder = Vec::with_capacity(4);
        for j in 0..4 {
            let stage = 3 - j;
            let input = config.conv_spec[stage].channels;
            let output = if stage == 0 {
                config.n_affordances
            } else {
                config.conv_spec[stage - 1].channels
            };
            decoder.push(ConvTranspose2d::new(input, output, geoms[stage], &mut rng));
        }
        Ok(Self {
            config,
            encoder,
            mu_head,
            logvar_head,
            dec_fc,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_images(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let [eh, ew] = self.config.image_size;
        if (c, h, w) != (INPUT_CHANNELS, eh, ew) {
            return Err(Error::Input(format!(
                "expected images of shape (3, {eh}, {ew}), got ({c}, {h}, {w})"
            )));
        }
        Ok(())
    }

    fn encode_cached(&self, x: &Array4<T>) -> (Array2<T>, Array2<T>, EncoderCache<T>) {
        let batch = x.dim().0;
        let mut convs = Vec::with_capacity(4);
        let mut pre = Vec::with_capacity(4);
        let mut h = x.clone();
        for conv in &self.encoder {
            let (z, cache) = conv.forward(&h);
            h = leaky_relu(&z);
            pre.push(z);
            convs.push(cache);
        }
        let flat_len = h.len() / batch;
        let flat = h
            .into_shape_with_order((batch, flat_len))
            .expect("contiguous activations");
        let mu = self.mu_head.forward(&flat);
        let logvar_raw = self.logvar_head.forward(&flat);
        let (lo, hi) = (T::of(LOGVAR_MIN), T::of(LOGVAR_MAX));
        let logvar = logvar_raw.mapv(|v| v.max(lo).min(hi));
        (
            mu,
            logvar,
            EncoderCache {
                convs,
                pre,
                flat,
                logvar_raw,
            },
        )
    }

    /// Batched encoder: `(B, 3, H, W)` in `[0, 1]` to `(μ, logvar)`, each `(B, latent)`.
    pub fn encode_batch(&self, x: &Array4<T>) -> Result<(Array2<T>, Array2<T>)> {
        self.check_images(x)?;
        let (mu, logvar, _) = self.encode_cached(x);
        Ok((mu, logvar))
    }

    fn decode_cached(&self, z: &Array2<T>) -> (Array4<T>, DecoderCache<T>) {
        let batch = z.nrows();
        let geoms = self.config.geometries().expect("validated at construction");
        let (c, h, w) = self.config.flat_shape(&geoms);
        let fc_pre = self.dec_fc.forward(z);
        let mut x = leaky_relu(&fc_pre)
            .into_shape_with_order((batch, c, h, w))
            .expect("contiguous activations");
        let mut convs = Vec::with_capacity(4);
        let mut pre = Vec::with_capacity(3);
        for (j, deconv) in self.decoder.iter().enumerate() {
            let (y, cache) = deconv.forward(&x);
            convs.push(cache);
            if j < 3 {
                x = leaky_relu(&y);
                pre.push(y);
            } else {
                x = y;
            }
        }
        (
            x,
            DecoderCache {
                z: z.clone(),
                fc_pre,
                convs,
                pre,
            },
        )
    }

    /// Batched decoder returning logits `(B, C, H, W)`.
    pub fn decode_logits(&self, z: &Array2<T>) -> Result<Array4<T>> {
        if z.ncols() != self.config.latent_dim {
            return Err(Error::Input(format!(
                "latent has {} dims, model expects {}",
                z.ncols(),
                self.config.latent_dim
            )));
        }
        Ok(self.decode_cached(z).0)
    }

    /// Batched decoder returning probabilities `(B, C, H, W)`.
    pub fn decode_batch(&self, z: &Array2<T>) -> Result<Array4<T>> {
        Ok(self.decode_logits(z)?.mapv(sigmoid))
    }

    /// Loss on a batch and its gradient with respect to every parameter.
    ///
    /// `noise` is the `(B, latent)` standard-normal draw used for the
    /// reparameterised sample.
    pub fn loss_and_grad(
        &self,
        x: &Array4<T>,
        target: &Array4<T>,
        noise: &Array2<T>,
        beta: f64,
    ) -> Result<(LossParts, Vaed<T>)> {
        self.check_images(x)?;
        let batch = x.dim().0;
        let (_, c, h, w) = target.dim();
        if target.dim().0 != batch
            || (c, h, w)
                != (
                    self.config.n_affordances,
                    self.config.image_size[0],
                    self.config.image_size[1],
                )
        {
            return Err(Error::Input(format!(
                "target shape {:?} does not match batch {batch} and model output",
                target.dim()
            )));
        }
        if noise.dim() != (batch, self.config.latent_dim) {
            return Err(Error::Input(
                "noise shape does not match (batch, latent_dim)".into(),
            ));
        }
        let (mu, logvar, enc) = self.encode_cached(x);
        let sigma = logvar.mapv(|v| (v * T::of(0.5)).exp());
        let z = &mu + &(&sigma * noise);
        let (logits, dec) = self.decode_cached(&z);

        // Reconstruction term and its gradient with respect to the logits.
        let scale = match self.config.recon_reduction {
            ReconReduction::Sum => 1.0 / batch as f64,
            ReconReduction::Mean => 1.0 / (batch * self.config.pixels()) as f64,
        };
        let (eps, one) = (T::of(BCE_EPS), T::one());
        let mut bce_sum = 0.0;
        let mut dlogits = Array4::<T>::zeros(logits.raw_dim());
        ndarray::Zip::from(&mut dlogits)
            .and(&logits)
            .and(target)
            .for_each(|d, &l, &t| {
                let p = sigmoid(l);
                let pc = p.max(eps).min(one - eps);
                bce_sum -= (t * pc.ln() + (one - t) * (one - pc).ln()).as_f64();
                *d = if p == pc {
                    (p - t) * T::of(scale)
                } else {
                    T::zero()
                };
            });
        let bce = bce_sum * scale;

        let kl = 0.5
            * ndarray::Zip::from(&mu)
                .and(&logvar)
                .fold(0.0, |acc, &m, &lv| {
                    acc + (m * m + lv.exp() - one - lv).as_f64()
                })
            / batch as f64;

        let mut grads = self.zeros_grad();

        // Decoder.
        let mut g = dlogits;
        for j in (0..4).rev() {
            if j < 3 {
                g = leaky_relu_backward(&dec.pre[j], &g);
            }
            g = self.decoder[j].backward(&dec.convs[j], &g, &mut grads.decoder[j]);
        }
        let g_fc = g
            .into_shape_with_order(dec.fc_pre.raw_dim())
            .expect("contiguous gradient");
        let g_fc = leaky_relu_backward(&dec.fc_pre, &g_fc);
        let dz = self.dec_fc.backward(&dec.z, &g_fc, &mut grads.dec_fc);

        // Reparameterisation and KL.
        let kb = T::of(beta / batch as f64);
        let half = T::of(0.5);
        let dmu = &dz + &mu.mapv(|m| m * kb);
        let (lo, hi) = (T::of(LOGVAR_MIN), T::of(LOGVAR_MAX));
        let mut dlv = Array2::<T>::zeros(logvar.raw_dim());
        ndarray::Zip::from(&mut dlv)
            .and(&dz)
            .and(&sigma)
            .and(noise)
            .and(&logvar)
            .and(&enc.logvar_raw)
            .for_each(|d, &gz, &s, &e, &lv, &raw| {
                *d = if raw < lo || raw > hi {
                    T::zero()
                } else {
                    gz * half * s * e + kb * half * (lv.exp() - one)
                };
            });

        // Encoder.
        let mut gflat = self.mu_head.backward(&enc.flat, &dmu, &mut grads.mu_head);
        gflat += &self
            .logvar_head
            .backward(&enc.flat, &dlv, &mut grads.logvar_head);
        let mut g = gflat
            .into_shape_with_order(enc.pre[3].raw_dim())
            .expect("contiguous gradient");
        for i in (0..4).rev() {
            g = leaky_relu_backward(&enc.pre[i], &g);
            g = self.encoder[i].backward(&enc.convs[i], &g, &mut grads.encoder[i]);
        }
        Ok((LossParts::combine(bce, kl, beta), grads))
    }

    /// Loss only, for validation and gradient checks.
    pub fn loss(
        &self,
        x: &Array4<T>,
        target: &Array4<T>,
        noise: &Array2<T>,
        beta: f64,
    ) -> Result<LossParts> {
        self.loss_and_grad(x, target, noise, beta).map(|(l, _)| l)
    }

    fn zeros_grad(&self) -> Self {
        let mut g = self.clone();
        g.fill_zero();
        g
    }

    /// Encodes one image with pixel values scaled to `[0, 1]`.
    pub fn encode(&self, image: &RgbImage) -> Result<LatentDistribution> {
        let x = images_to_tensor::<T>(std::slice::from_ref(image));
        let (mu, logvar) = self.encode_batch(&x)?;
        Ok(LatentDistribution {
            mu: mu.row(0).iter().map(|v| v.as_f64()).collect(),
            logvar: logvar.row(0).iter().map(|v| v.as_f64()).collect(),
        })
    }

    /// Decodes one latent vector to a `(C, H, W)` probability map.
    pub fn decode(&self, z: &[f64]) -> Result<Array3<f64>> {
        let z = Array2::from_shape_vec((1, z.len()), z.iter().map(|&v| T::of(v)).collect())
            .expect("row vector");
        let probs = self.decode_batch(&z)?;
        Ok(probs.index_axis(Axis(0), 0).mapv(|v| v.as_f64()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_module(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.config).expect("config serializes"),
            self,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Config(format!(
                "expected a `{CHECKPOINT_KIND}` checkpoint, found `{}`",
                ck.kind
            )));
        }
        let config: VaedConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Config(format!("vaed checkpoint config: {e}")))?;
        let mut model = Self::new(config, 0)?;
        ck.load_into(&mut model)?;
        Ok(model)
    }
}

impl<T: Scalar> Module<T> for Vaed<T> {
    fn named_params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            out.extend(c.params(&format!("enc.{i}")));
        }
        out.extend(self.mu_head.params("mu"));
        out.extend(self.logvar_head.params("logvar"));
        out.extend(self.dec_fc.params("dec_fc"));
        for (j, c) in self.decoder.iter().enumerate() {
            out.extend(c.params(&format!("dec.{j}")));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter_mut().enumerate() {
            out.extend(c.params_mut(&format!("enc.{i}")));
        }
        out.extend(self.mu_head.params_mut("mu"));
        out.extend(self.logvar_head.params_mut("logvar"));
        out.extend(self.dec_fc.params_mut("dec_fc"));
        for (j, c) in self.decoder.iter_mut().enumerate() {
            out.extend(c.params_mut(&format!("dec.{j}")));
        }
        out
    }
}

/// Stacks `(H, W, 3)` byte images into a `(B, 3, H, W)` tensor in `[0, 1]`.
pub fn images_to_tensor<T: Scalar>(images: &[RgbImage]) -> Array4<T> {
    let (h, w) = images
        .first()
        .map(|i| (i.height, i.width))
        .unwrap_or((0, 0));
    let scale = T::of(1.0 / 255.0);
    let mut out = Array4::<T>::zeros((images.len(), INPUT_CHANNELS, h, w));
    for (b, img) in images.iter().enumerate() {
        for (i, px) in img.data.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                out[[b, ch, i / w, i % w]] = T::of(px[ch] as f64) * scale;
            }
        }
    }
    out
}

/// Images and per-pixel binary affordance masks held in memory as bytes.
#[derive(Clone, Debug, Default)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `(N, H, W, 3)`.
    pub pixels: Vec<u8>,
    /// `(N, C, H, W)` of 0/1.
    pub masks: Vec<u8>,
}

impl ImageSet {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: Vec::new(),
            masks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pixels
            .len()
            .checked_div(self.height * self.width * 3)
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, image: &RgbImage, masks: &[u8]) -> Result<()> {
        if (image.height, image.width) != (self.height, self.width)
            || masks.len() != self.channels * self.height * self.width
        {
            return Err(Error::Input(format!(
                "sample of size {}x{} with {} mask values does not fit a {}x{}x{} set",
                image.height,
                image.width,
                masks.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        self.pixels.extend_from_slice(&image.data);
        self.masks.extend_from_slice(masks);
        Ok(())
    }

    pub fn from_dataset(data: &LoadedDataset) -> Result<Self> {
        let (h, w) = data
            .images
            .first()
            .map(|i| (i.height, i.width))
            .unwrap_or((0, 0));
        let mut set = Self::new(h, w, 2);
        for (img, lab) in data.images.iter().zip(&data.labels) {
            set.push(img, &lab.data)?;
        }
        Ok(set)
    }

    pub fn image(&self, i: usize) -> RgbImage {
        let per = self.height * self.width * 3;
        RgbImage {
            height: self.height,
            width: self.width,
            data: self.pixels[i * per..(i + 1) * per].to_vec(),
        }
    }

    pub fn mask(&self, i: usize) -> &[u8] {
        let per = self.channels * self.height * self.width;
        &self.masks[i * per..(i + 1) * per]
    }

    /// Subset by indices, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut out = Self::new(self.height, self.width, self.channels);
        for &i in idx {
            out.pixels.extend_from_slice(&self.image(i).data);
            out.masks.extend_from_slice(self.mask(i));
        }
        out
    }

    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (Array4<T>, Array4<T>) {
        self.batch_augmented(idx, &vec![Augment::default(); idx.len()])
    }

    /// Like [`ImageSet::batch`] with one augmentation per sample.
    pub fn batch_augmented<T: Scalar>(
        &self,
        idx: &[usize],
        augs: &[Augment],
    ) -> (Array4<T>, Array4<T>) {
        let (h, w, c) = (self.height, self.width, self.channels);
        let per_img = h * w * 3;
        let mut x = Array4::<T>::zeros((idx.len(), 3, h, w));
        let mut y = Array4::<T>::zeros((idx.len(), c, h, w));
        let scale = 1.0 / 255.0;
        for (b, (&i, aug)) in idx.iter().zip(augs).enumerate() {
            let col = |p: usize| if aug.mirror { w - 1 - p % w } else { p % w };
            let perm = CHANNEL_PERMUTATIONS[aug.channel_order % 6];
            let px = &self.pixels[i * per_img..(i + 1) * per_img];
            for (p, rgb) in px.chunks_exact(3).enumerate() {
                for ch in 0..3 {
                    x[[b, ch, p / w, col(p)]] = T::of(rgb[perm[ch]] as f64 * scale);
                }
            }
            let m = self.mask(i);
            for (k, &v) in m.iter().enumerate() {
                let p = k % (h * w);
                y[[b, k / (h * w), p / w, col(p)]] = T::of(v as f64);
            }
        }
        (x, y)
    }
}

const CHANNEL_PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Label-preserving transform of one training sample: a left-right mirror
/// of image and masks, and a permutation of the colour channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub mirror: bool,
    /// Index into the six channel orders; 0 is the identity.
    pub channel_order: usize,
}

impl Augment {
    pub fn sample<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            mirror: rng.random_bool(0.5),
            channel_order: rng.random_range(0..6),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Random mirror and colour-channel permutation of image batches.
    /// Vector-valued models ignore it.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            augment: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub bce: f64,
    pub kl: f64,
    pub total: f64,
    /// Validation loss with the latent set to μ; NaN when there is no validation set.
    pub val_total: f64,
}

pub const LOG_HEADER: &str = "epoch,bce,kl,total,val_total";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.bce, self.kl, self.total, self.val_total
        )
    }
}

pub struct TrainedVaed {
    pub model: Vaed<f32>,
    pub log: Vec<EpochLog>,
}

/// Trains a VAED with Adam on shuffled mini-batches. Everything random
/// (initialisation, shuffling, reparameterisation noise) derives from
/// `opt.seed`, so equal inputs give bit-identical weights.
pub fn train_vaed(
    train: &ImageSet,
    val: Option<&ImageSet>,
    config: &VaedConfig,
    opt: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedVaed> {
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if train.channels != config.n_affordances || [train.height, train.width] != config.image_size {
        return Err(Error::Config(format!(
            "dataset is {}x{} with {} channels, config expects {:?} with {}",
            train.height, train.width, train.channels, config.image_size, config.n_affordances
        )));
    }
    let mut model = Vaed::<f32>::new(config.clone(), opt.seed)?;
    let mut adam = Adam::new(opt.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0x5EED_0F_DA7A);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(opt.epochs);
    let bs = opt.batch_size.max(1);
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut seen = 0usize;
        for chunk in order.chunks(bs) {
            let (x, y) = if opt.augment {
                let augs: Vec<Augment> = chunk.iter().map(|_| Augment::sample(&mut rng)).collect();
                train.batch_augmented::<f32>(chunk, &augs)
            } else {
                train.batch::<f32>(chunk)
            };
            let noise = Array2::from_shape_fn((chunk.len(), config.latent_dim), |_| {
                StandardNormal.sample(&mut rng)
            });
            let (parts, grads) = model.loss_and_grad(&x, &y, &noise, config.beta)?;
            if !parts.total.is_finite() {
                return Err(Error::Runtime(format!(
                    "vaed loss diverged at epoch {epoch}"
                )));
            }
            adam.step(&mut model, &grads);
            let n = chunk.len() as f64;
            sums.total += parts.total * n;
            sums.bce += parts.bce * n;
            sums.kl += parts.kl * n;
            seen += chunk.len();
        }
        let n = seen as f64;
        let val_total = match val {
            Some(v) if !v.is_empty() => evaluate_loss(&model, v, bs)?.total,
            _ => f64::NAN,
        };
        let entry = EpochLog {
            epoch,
            bce: sums.bce / n,
            kl: sums.kl / n,
            total: sums.total / n,
            val_total,
        };
        log::info!(
            "vaed epoch {epoch}: bce {:.4} kl {:.4} total {:.4} val {:.4}",
            entry.bce,
            entry.kl,
            entry.total,
            entry.val_total
        );
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainedVaed { model, log })
}

/// Mean loss over a set with `z = μ`.
pub fn evaluate_loss(model: &Vaed<f32>, set: &ImageSet, batch_size: usize) -> Result<LossParts> {
    let mut acc = LossParts::default();
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = set.batch::<f32>(chunk);
        let noise = Array2::zeros((chunk.len(), model.latent_dim()));
        let parts = model.loss(&x, &y, &noise, model.config.beta)?;
        let n = chunk.len() as f64;
        acc.total += parts.total * n;
        acc.bce += parts.bce * n;
        acc.kl += parts.kl * n;
    }
    let n = set.len().max(1) as f64;
    Ok(LossParts {
        total: acc.total / n,
        bce: acc.bce / n,
        kl: acc.kl / n,
    })
}

/// Posterior means for every image in the set, `(N, latent)`.
pub fn encode_means(model: &Vaed<f32>, set: &ImageSet, batch_size: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((set.len(), model.latent_dim()));
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = set.batch::<f32>(chunk);
        let (mu, _) = model.encode_batch(&x)?;
        for (r, &i) in chunk.iter().enumerate() {
            for d in 0..model.latent_dim() {
                out[[i, d]] = mu[[r, d]] as f64;
            }
        }
    }
    Ok(out)
}

/// Thresholded per-channel pixel counts over a set, decoding from `z = μ`.
pub fn pixel_counts(
    model: &Vaed<f32>,
    set: &ImageSet,
    threshold: f32,
    batch_size: usize,
) -> Result<Vec<PixelCounts>> {
    let mut counts = vec![PixelCounts::default(); set.channels];
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = set.batch::<f32>(chunk);
        let (mu, _) = model.encode_batch(&x)?;
        let probs = model.decode_batch(&mu)?;
        for b in 0..chunk.len() {
            for (ch, count) in counts.iter_mut().enumerate() {
                let p = probs.index_axis(Axis(0), b);
                let p = p.index_axis(Axis(0), ch);
                let t = y.index_axis(Axis(0), b);
                let t = t.index_axis(Axis(0), ch);
                for (&pv, &tv) in p.iter().zip(t.iter()) {
                    match (pv >= threshold, tv >= 0.5) {
                        (true, true) => count.tp += 1,
                        (true, false) => count.fp += 1,
                        (false, true) => count.fn_ += 1,
                        _ => {}
                    }
                }
            }
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn tiny_config() -> VaedConfig {
        let st = |channels, kernel, stride| ConvStage {
            channels,
            kernel,
            stride,
        };
        VaedConfig {
            latent_dim: 2,
            beta: 4.0,
            conv_spec: vec![st(2, 3, 1), st(3, 4, 2), st(3, 3, 1), st(4, 4, 2)],
            image_size: [8, 8],
            n_affordances: 2,
            recon_reduction: ReconReduction::Sum,
        }
    }

    #[test]
    fn bce_reference_values() {
        let half = Array2::from_elem((3, 4), 0.5);
        let t = Array2::from_shape_fn((3, 4), |(r, c)| ((r + c) % 2) as f64);
        assert!((bce_loss(half.view(), t.view()).unwrap() - 2f64.ln()).abs() < 1e-12);
        let p = array![(-1.0f64).exp()];
        let one = array![1.0];
        assert!((bce_loss(p.view(), one.view()).unwrap() - 1.0).abs() < 1e-12);
        let exact = array![BCE_EPS, 1.0 - BCE_EPS];
        let tgt = array![0.0, 1.0];
        assert!(bce_loss(exact.view(), tgt.view()).unwrap() <= 1e-6);
        assert!(bce_loss(exact.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn kl_reference_values() {
        let zero = LatentDistribution {
            mu: vec![0.0; 3],
            logvar: vec![0.0; 3],
        };
        assert_eq!(kl_divergence(&zero), 0.0);
        let one = LatentDistribution {
            mu: vec![1.0],
            logvar: vec![0.0],
        };
        assert!((kl_divergence(&one) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reparameterize_cases() {
        let d = LatentDistribution {
            mu: vec![0.5, -1.0],
            logvar: vec![0.0, 0.0],
        };
        assert_eq!(reparameterize(&d, &[0.0, 0.0]).unwrap(), d.mu);
        assert_eq!(reparameterize(&d, &[1.0, 0.0]).unwrap(), vec![1.5, -1.0]);
        assert!(reparameterize(&d, &[1.0]).is_err());
    }

    #[test]
    fn loss_combination() {
        assert_eq!(LossParts::combine(1.0, 0.25, 4.0).total, 2.0);
        assert_eq!(LossParts::combine(1.3, 0.25, 0.0).total, 1.3);
    }

    #[test]
    fn shapes_and_range() {
        let model = Vaed::<f64>::new(tiny_config(), 1).unwrap();
        let img = RgbImage {
            height: 8,
            width: 8,
            data: (0..192).map(|v| (v * 7 % 256) as u8).collect(),
        };
        let d = model.encode(&img).unwrap();
        assert_eq!(d.mu.len(), 2);
        assert_eq!(d, model.encode(&img).unwrap());
        let map = model.decode(&[3.0, -20.0]).unwrap();
        assert_eq!(map.dim(), (2, 8, 8));
        assert!(map.iter().all(|&p| (0.0..=1.0).contains(&p)));
        let wrong = RgbImage {
            height: 4,
            width: 8,
            data: vec![0; 96],
        };
        assert!(matches!(model.encode(&wrong), Err(Error::Input(_))));
        assert!(model.decode(&[0.0]).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = tiny_config();
        c.conv_spec.pop();
        assert!(Vaed::<f32>::new(c, 0).is_err());
        let mut c = tiny_config();
        c.image_size = [9, 9];
        assert!(Vaed::<f32>::new(c, 0).is_err());
        let mut c = tiny_config();
        c.latent_dim = 0;
        assert!(Vaed::<f32>::new(c, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Vaed::<f32>::new(tiny_config(), 4).unwrap();
        let ck = model.to_checkpoint();
        let back =
            Vaed::<f32>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.flat_params(), model.flat_params());
        assert_eq!(back.config, model.config);
    }
}
