//! PCA variational auto-encoder over flattened surfaces.
//!
//! Encoder: 56 -> 32 (tanh) -> 16 (tanh), then two linear heads for the
//! latent mean and the log standard deviation. Decoder: D -> 16 (tanh) ->
//! 32 (tanh) -> 56 with a softplus output so every decoded vol is positive.
//!
//! Training minimizes `recon_scale * recon + lambda_kl * kl + lambda_cov * cov`.
//! `recon` is the mean absolute error in decimal vol, weighted by
//! [`DEFAULT_RECON_SCALE`] unless configured otherwise. The covariance term sums the batch covariance
//! over all latent pairs of the sampled codes, in absolute value by default
//! (see [`CovPenalty`]). Setting `lambda_cov = 0` gives the classic VAE.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{adam_step, softplus_inv, Activation, AdamState, Dense, DenseNet};
use crate::surface::{Corpus, GridSpec, SurfaceGrid};

pub const CANONICAL_LATENT_DIM: usize = 3;
pub const CANONICAL_LAMBDA_COV: f64 = 0.1;
pub const DEFAULT_LAMBDA_KL: f64 = 1e-4;
/// Weight on the decimal-vol reconstruction error. At weight 1 the penalty terms
/// swamp reconstruction and training shrinks the latents instead of decorrelating them.
pub const DEFAULT_RECON_SCALE: f64 = 25.0;
const HIDDEN: [usize; 2] = [32, 16];
/// Decoded vols are floored here so that extreme codes still give a valid surface.
const MIN_DECODED_VOL: f64 = 1e-12;

/// How pair covariances of the sampled codes enter the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovPenalty {
    /// Sum of signed pair covariances. Unbounded below: training can drive it to
    /// large negative values by inflating anti-correlated latents.
    Signed,
    /// Sum of absolute pair covariances.
    #[default]
    Absolute,
}

impl CovPenalty {
    pub fn apply(self, pair_covs: &[f64]) -> f64 {
        match self {
            CovPenalty::Signed => pair_covs.iter().sum(),
            CovPenalty::Absolute => pair_covs.iter().map(|c| c.abs()).sum(),
        }
    }

    fn weight(self, c: f64) -> f64 {
        match self {
            CovPenalty::Signed => 1.0,
            CovPenalty::Absolute => sign(c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub lambda_kl: f64,
    pub lambda_cov: f64,
    #[serde(default)]
    pub cov_penalty: CovPenalty,
    #[serde(default = "default_recon_scale")]
    pub recon_scale: f64,
    pub seed: u64,
}

fn default_recon_scale() -> f64 {
    DEFAULT_RECON_SCALE
}

impl VaeConfig {
    pub fn pca(seed: u64) -> Self {
        Self {
            latent_dim: CANONICAL_LATENT_DIM,
            lambda_kl: DEFAULT_LAMBDA_KL,
            lambda_cov: CANONICAL_LAMBDA_COV,
            cov_penalty: CovPenalty::Absolute,
            recon_scale: DEFAULT_RECON_SCALE,
            seed,
        }
    }

    /// Same network and KL weight, no covariance penalty.
    pub fn classic(seed: u64) -> Self {
        Self {
            lambda_cov: 0.0,
            ..Self::pca(seed)
        }
    }
}

/// Encoder output for one surface, optionally with a recorded sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub z: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eps: Option<Vec<f64>>,
}

impl LatentCode {
    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>) -> Self {
        Self {
            mu,
            log_sigma,
            z: None,
            eps: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `mu + exp(log_sigma) * eps`.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .zip(eps)
            .map(|((m, ls), e)| m + ls.exp() * e)
            .collect()
    }
}

/// Draws `eps ~ N(0, I)`, records it in the code and returns `z`.
pub fn sample_z<R: Rng + ?Sized>(code: &mut LatentCode, rng: &mut R) -> Vec<f64> {
    let eps: Vec<f64> = (0..code.dim()).map(|_| rng.sample(StandardNormal)).collect();
    let z = code.reparameterize(&eps);
    code.eps = Some(eps);
    code.z = Some(z.clone());
    z
}

/// Loss terms of one batch. `cov` is the penalized covariance term (per [`CovPenalty`]);
/// `cov_signed` is always the plain signed pair sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub cov: f64,
    pub cov_signed: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, kl: f64, cov: f64, cov_signed: f64, cfg: &VaeConfig) -> Self {
        Self {
            recon,
            kl,
            cov,
            cov_signed,
            total: cfg.recon_scale * recon + cfg.lambda_kl * kl + cfg.lambda_cov * cov,
        }
    }
}

/// Batch-mean KL divergence of `N(mu, sigma^2)` from `N(0, 1)`.
pub fn loss_kl(codes: &[LatentCode]) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    codes.iter().map(|c| kl_single(&c.mu, &c.log_sigma)).sum::<f64>() / codes.len() as f64
}

fn kl_single(mu: &[f64], log_sigma: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(log_sigma)
        .map(|(m, ls)| 1.0 + 2.0 * ls - (2.0 * ls).exp() - m * m)
        .sum::<f64>()
}

fn pair_covariances(z: &[Vec<f64>]) -> Result<Vec<f64>> {
    let b = z.len();
    if b < 2 {
        return Err(Error::Precondition(format!("covariance loss needs a batch of at least 2, got {b}")));
    }
    let d = z[0].len();
    if let Some(row) = z.iter().find(|r| r.len() != d) {
        return Err(Error::Dimension {
            context: "latent batch row",
            expected: d,
            actual: row.len(),
        });
    }
    let bf = b as f64;
    let sums: Vec<f64> = (0..d).map(|i| z.iter().map(|r| r[i]).sum()).collect();
    let mut out = Vec::with_capacity(d * d.saturating_sub(1) / 2);
    for i in 0..d {
        for j in i + 1..d {
            let cross: f64 = z.iter().map(|r| r[i] * r[j]).sum();
            out.push(cross / bf - sums[i] * sums[j] / (bf * bf));
        }
    }
    Ok(out)
}

/// Sum over latent pairs `i < j` of the signed batch covariance of `z`.
pub fn loss_cov(z: &[Vec<f64>]) -> Result<f64> {
    Ok(CovPenalty::Signed.apply(&pair_covariances(z)?))
}

/// Sum over latent pairs of the absolute batch covariance of `z`.
pub fn loss_cov_abs(z: &[Vec<f64>]) -> Result<f64> {
    Ok(CovPenalty::Absolute.apply(&pair_covariances(z)?))
}

pub fn loss_recon(x: &[f64], x_hat: &[f64]) -> f64 {
    x.iter().zip(x_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64
}

/// Gradients in [`VaeModel::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    grid: GridSpec,
    latent_dim: usize,
    lambda_kl: f64,
    lambda_cov: f64,
    cov_penalty: CovPenalty,
    #[serde(default = "default_recon_scale")]
    recon_scale: f64,
    seed: u64,
    /// Whether input normalization and the output bias have been fitted to training data.
    prepared: bool,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    encoder: DenseNet,
    mu_head: DenseNet,
    log_sigma_head: DenseNet,
    decoder: DenseNet,
}

impl VaeModel {
    /// Fresh model. Hidden layers use fan-in uniform weights; both latent heads start at zero,
    /// so every input encodes to the standard-normal prior.
    pub fn new(grid: GridSpec, cfg: VaeConfig) -> Result<Self> {
        if cfg.latent_dim == 0 {
            return Err(Error::Validation("latent dimension must be positive".into()));
        }
        if !(cfg.lambda_kl >= 0.0 && cfg.lambda_cov >= 0.0 && cfg.recon_scale > 0.0 && cfg.recon_scale.is_finite()) {
            return Err(Error::Validation("loss weights must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = grid.len();
        let d = cfg.latent_dim;
        let encoder = DenseNet::init(&[n, HIDDEN[0], HIDDEN[1]], &[Activation::Tanh, Activation::Tanh], &mut rng)?;
        let mu_head = DenseNet::new(vec![Dense::zeros(HIDDEN[1], d, Activation::Identity)])?;
        let log_sigma_head = DenseNet::new(vec![Dense::zeros(HIDDEN[1], d, Activation::Identity)])?;
        let decoder = DenseNet::init(
            &[d, HIDDEN[1], HIDDEN[0], n],
            &[Activation::Tanh, Activation::Tanh, Activation::Softplus],
            &mut rng,
        )?;
        Ok(Self {
            grid,
            latent_dim: d,
            lambda_kl: cfg.lambda_kl,
            lambda_cov: cfg.lambda_cov,
            cov_penalty: cfg.cov_penalty,
            recon_scale: cfg.recon_scale,
            seed: cfg.seed,
            prepared: false,
            input_shift: vec![0.0; n],
            input_scale: vec![1.0; n],
            encoder,
            mu_head,
            log_sigma_head,
            decoder,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn lambda_kl(&self) -> f64 {
        self.lambda_kl
    }

    pub fn lambda_cov(&self) -> f64 {
        self.lambda_cov
    }

    pub fn cov_penalty(&self) -> CovPenalty {
        self.cov_penalty
    }

    pub fn recon_scale(&self) -> f64 {
        self.recon_scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_prepared(&self) -> bool {
        self.prepared
    }

    pub fn config(&self) -> VaeConfig {
        VaeConfig {
            latent_dim: self.latent_dim,
            lambda_kl: self.lambda_kl,
            lambda_cov: self.lambda_cov,
            cov_penalty: self.cov_penalty,
            recon_scale: self.recon_scale,
            seed: self.seed,
        }
    }

    pub(crate) fn parts(&self) -> (&[f64], &[f64], [&DenseNet; 4]) {
        (
            &self.input_shift,
            &self.input_scale,
            [&self.encoder, &self.mu_head, &self.log_sigma_head, &self.decoder],
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        grid: GridSpec,
        cfg: VaeConfig,
        prepared: bool,
        input_shift: Vec<f64>,
        input_scale: Vec<f64>,
        encoder: DenseNet,
        mu_head: DenseNet,
        log_sigma_head: DenseNet,
        decoder: DenseNet,
    ) -> Self {
        Self {
            grid,
            latent_dim: cfg.latent_dim,
            lambda_kl: cfg.lambda_kl,
            lambda_cov: cfg.lambda_cov,
            cov_penalty: cfg.cov_penalty,
            recon_scale: cfg.recon_scale,
            seed: cfg.seed,
            prepared,
            input_shift,
            input_scale,
            encoder,
            mu_head,
            log_sigma_head,
            decoder,
        }
    }

    pub fn decoder_net(&self) -> &DenseNet {
        &self.decoder
    }

    /// Sets per-point input standardization and starts the decoder output at the mean surface.
    pub fn prepare(&mut self, data: &[Vec<f64>]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Precondition("cannot fit input normalization to no data".into()));
        }
        let n = self.grid.len();
        let count = data.len() as f64;
        let mean: Vec<f64> = (0..n).map(|k| data.iter().map(|x| x[k]).sum::<f64>() / count).collect();
        let sd: Vec<f64> = (0..n)
            .map(|k| {
                let v = data.iter().map(|x| (x[k] - mean[k]).powi(2)).sum::<f64>() / count;
                v.sqrt().max(1e-6)
            })
            .collect();
        let last = self.decoder.layers().len() - 1;
        let out = self.decoder.layer_mut(last);
        for (b, m) in out.bias.iter_mut().zip(&mean) {
            *b = softplus_inv(m.max(1e-6));
        }
        self.input_shift = mean;
        self.input_scale = sd;
        self.prepared = true;
        Ok(())
    }

    fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_shift)
            .zip(&self.input_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.grid.len() {
            return Err(Error::Dimension {
                context: "encoder input",
                expected: self.grid.len(),
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("encoder input must be finite".into()));
        }
        Ok(())
    }

    /// Deterministic encoding to (mu, log_sigma).
    pub fn encode(&self, x: &[f64]) -> Result<LatentCode> {
        self.check_input(x)?;
        let h = self.encoder.eval(&self.normalize(x))?;
        Ok(LatentCode::new(self.mu_head.eval(&h)?, self.log_sigma_head.eval(&h)?))
    }

    pub fn encode_surface(&self, s: &SurfaceGrid) -> Result<LatentCode> {
        self.grid.ensure_matches(s.grid())?;
        self.encode(s.as_slice())
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim {
            return Err(Error::Dimension {
                context: "latent vector",
                expected: self.latent_dim,
                actual: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("latent vector must be finite".into()));
        }
        Ok(())
    }

    /// Raw decoder output (flattened vols).
    pub fn decode_vec(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_z(z)?;
        Ok(self.decoder.eval(z)?.into_iter().map(|v| v.max(MIN_DECODED_VOL)).collect())
    }

    pub fn decode(&self, z: &[f64]) -> Result<SurfaceGrid> {
        SurfaceGrid::new(self.grid.clone(), self.decode_vec(z)?)
    }

    /// Decoded vols and the gradient of `sum_k upstream(vols)_k * vols_k` w.r.t. `z`,
    /// where `upstream` maps the decoded vols to the output-gradient vector.
    pub fn decode_with_grad(&self, z: &[f64], upstream: impl FnOnce(&[f64]) -> Vec<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_z(z)?;
        let (out, cache) = self.decoder.forward(z)?;
        let up = upstream(&out);
        let g = self.decoder.backward(&up, &cache)?;
        Ok((out, g.input))
    }

    pub fn num_params(&self) -> usize {
        self.nets().iter().map(|n| n.num_params()).sum()
    }

    fn nets(&self) -> [&DenseNet; 4] {
        [&self.encoder, &self.mu_head, &self.log_sigma_head, &self.decoder]
    }

    /// Encoder, mean head, log-sigma head and decoder parameters, concatenated.
    pub fn params(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.params()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Dimension {
                context: "model parameters",
                expected: self.num_params(),
                actual: params.len(),
            });
        }
        let mut offset = 0;
        for net in [&mut self.encoder, &mut self.mu_head, &mut self.log_sigma_head, &mut self.decoder] {
            let n = net.num_params();
            net.set_params(&params[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    /// Loss and exact parameter gradients for a batch with fixed noise draws.
    pub fn batch_loss_grad(&self, xs: &[&[f64]], eps: &[Vec<f64>]) -> Result<(LossBreakdown, VaeGrads)> {
        let b = xs.len();
        if b < 2 {
            return Err(Error::Precondition(format!("training batch needs at least 2 samples, got {b}")));
        }
        if eps.len() != b {
            return Err(Error::Dimension {
                context: "noise draws",
                expected: b,
                actual: eps.len(),
            });
        }
        let d = self.latent_dim;
        let n = self.grid.len();
        let bf = b as f64;

        struct Pass {
            enc: crate::neural::ForwardCache,
            mu_c: crate::neural::ForwardCache,
            ls_c: crate::neural::ForwardCache,
            dec: crate::neural::ForwardCache,
            mu: Vec<f64>,
            ls: Vec<f64>,
            z: Vec<f64>,
            xhat: Vec<f64>,
        }

        let mut passes = Vec::with_capacity(b);
        for (x, e) in xs.iter().zip(eps) {
            self.check_input(x)?;
            if e.len() != d {
                return Err(Error::Dimension {
                    context: "noise draw",
                    expected: d,
                    actual: e.len(),
                });
            }
            let (h, enc) = self.encoder.forward(&self.normalize(x))?;
            let (mu, mu_c) = self.mu_head.forward(&h)?;
            let (ls, ls_c) = self.log_sigma_head.forward(&h)?;
            let z: Vec<f64> = (0..d).map(|k| mu[k] + ls[k].exp() * e[k]).collect();
            let (xhat, dec) = self.decoder.forward(&z)?;
            passes.push(Pass {
                enc,
                mu_c,
                ls_c,
                dec,
                mu,
                ls,
                z,
                xhat,
            });
        }

        let recon = passes.iter().zip(xs).map(|(p, x)| loss_recon(x, &p.xhat)).sum::<f64>() / bf;
        let kl = passes.iter().map(|p| kl_single(&p.mu, &p.ls)).sum::<f64>() / bf;
        let zs: Vec<Vec<f64>> = passes.iter().map(|p| p.z.clone()).collect();
        let pairs = pair_covariances(&zs)?;
        let cov = self.cov_penalty.apply(&pairs);
        let cov_signed = CovPenalty::Signed.apply(&pairs);
        // pair_weight[i][j] = d(penalty)/d(cov_ij), symmetric, zero diagonal
        let mut pair_weight = vec![vec![0.0; d]; d];
        let mut idx = 0;
        for i in 0..d {
            for j in i + 1..d {
                let w = self.cov_penalty.weight(pairs[idx]);
                pair_weight[i][j] = w;
                pair_weight[j][i] = w;
                idx += 1;
            }
        }
        let z_mean: Vec<f64> = (0..d).map(|k| zs.iter().map(|z| z[k]).sum::<f64>() / bf).collect();

        let mut grad = vec![0.0; self.num_params()];
        for ((p, x), e) in passes.iter().zip(xs).zip(eps) {
            let up: Vec<f64> = p
                .xhat
                .iter()
                .zip(x.iter())
                .map(|(h, t)| self.recon_scale * sign(h - t) / (n as f64 * bf))
                .collect();
            let g_dec = self.decoder.backward(&up, &p.dec)?;
            let centered: Vec<f64> = (0..d).map(|k| p.z[k] - z_mean[k]).collect();
            let dz: Vec<f64> = (0..d)
                .map(|k| {
                    let pull: f64 = (0..d).map(|j| pair_weight[k][j] * centered[j]).sum();
                    g_dec.input[k] + self.lambda_cov * pull / bf
                })
                .collect();
            let dmu: Vec<f64> = (0..d).map(|k| dz[k] + self.lambda_kl * p.mu[k] / bf).collect();
            let dls: Vec<f64> = (0..d)
                .map(|k| {
                    dz[k] * p.ls[k].exp() * e[k] + self.lambda_kl * ((2.0 * p.ls[k]).exp() - 1.0) / bf
                })
                .collect();
            let g_mu = self.mu_head.backward(&dmu, &p.mu_c)?;
            let g_ls = self.log_sigma_head.backward(&dls, &p.ls_c)?;
            let dh: Vec<f64> = g_mu.input.iter().zip(&g_ls.input).map(|(a, b)| a + b).collect();
            let g_enc = self.encoder.backward(&dh, &p.enc)?;

            let mut flat = Vec::with_capacity(grad.len());
            g_enc.flatten_into(&mut flat);
            g_mu.flatten_into(&mut flat);
            g_ls.flatten_into(&mut flat);
            g_dec.flatten_into(&mut flat);
            for (acc, g) in grad.iter_mut().zip(&flat) {
                *acc += g;
            }
        }
        Ok((
            LossBreakdown::new(recon, kl, cov, cov_signed, &self.config()),
            VaeGrads(grad),
        ))
    }

    /// Loss only, for the same batch and noise; used as the finite-difference oracle.
    pub fn batch_loss(&self, xs: &[&[f64]], eps: &[Vec<f64>]) -> Result<LossBreakdown> {
        let mut codes = Vec::with_capacity(xs.len());
        let mut zs = Vec::with_capacity(xs.len());
        let mut recon = 0.0;
        for (x, e) in xs.iter().zip(eps) {
            let code = self.encode(x)?;
            let z = code.reparameterize(e);
            let xhat = self.decoder.eval(&z)?;
            recon += loss_recon(x, &xhat);
            zs.push(z);
            codes.push(code);
        }
        let recon = recon / xs.len() as f64;
        let pairs = pair_covariances(&zs)?;
        Ok(LossBreakdown::new(
            recon,
            loss_kl(&codes),
            self.cov_penalty.apply(&pairs),
            CovPenalty::Signed.apply(&pairs),
            &self.config(),
        ))
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            shuffle: true,
        }
    }
}

/// Epoch-mean losses plus the mean encoder sigma seen during the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub mean_sigma: f64,
}

pub fn train(model: &VaeModel, corpus: &Corpus, cfg: &TrainConfig) -> Result<(VaeModel, Vec<EpochStats>)> {
    let data: Vec<Vec<f64>> = corpus.train().map(|r| r.surface.flatten()).collect();
    if data.is_empty() {
        return Err(Error::Precondition("corpus has no training records before the split date".into()));
    }
    if let Some(g) = corpus.grid() {
        model.grid().ensure_matches(g)?;
    }
    train_on(model, &data, cfg)
}

/// Minibatch Adam on flattened surfaces.
pub fn train_on(model: &VaeModel, data: &[Vec<f64>], cfg: &TrainConfig) -> Result<(VaeModel, Vec<EpochStats>)> {
    if cfg.batch_size < 2 {
        return Err(Error::Validation("batch size must be at least 2".into()));
    }
    if data.len() < 2 {
        return Err(Error::Precondition("training needs at least 2 surfaces".into()));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Validation("learning rate must be positive".into()));
    }
    let mut model = model.clone();
    if !model.prepared {
        model.prepare(data)?;
    }
    let d = model.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.params();
    let mut adam = AdamState::new(params.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut acc = LossBreakdown::default();
        let mut sigma_sum = 0.0;
        let mut seen = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
            let eps: Vec<Vec<f64>> = (0..chunk.len())
                .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let (loss, VaeGrads(grad)) = model.batch_loss_grad(&xs, &eps)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1 });
            }
            for x in &xs {
                let code = model.encode(x)?;
                sigma_sum += code.log_sigma.iter().map(|v| v.exp()).sum::<f64>() / d as f64;
            }
            seen += xs.len();
            acc.recon += loss.recon;
            acc.kl += loss.kl;
            acc.cov += loss.cov;
            acc.cov_signed += loss.cov_signed;
            acc.total += loss.total;
            batches += 1;
            adam_step(&mut params, &grad, &mut adam)?;
            model.set_params(&params)?;
        }
        let nb = batches.max(1) as f64;
        history.push(EpochStats {
            epoch: epoch + 1,
            loss: LossBreakdown {
                recon: acc.recon / nb,
                kl: acc.kl / nb,
                cov: acc.cov / nb,
                cov_signed: acc.cov_signed / nb,
                total: acc.total / nb,
            },
            mean_sigma: sigma_sum / seen.max(1) as f64,
        });
        log::debug!("epoch {} {:?}", epoch + 1, history.last());
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::{central_difference, max_relative_error};

    fn code(mu: &[f64], ls: &[f64]) -> LatentCode {
        LatentCode::new(mu.to_vec(), ls.to_vec())
    }

    #[test]
    fn kl_examples() {
        assert_eq!(loss_kl(&[code(&[0.0], &[0.0])]), 0.0);
        assert!((loss_kl(&[code(&[1.0], &[0.0])]) - 0.5).abs() < 1e-12);
        let e = std::f64::consts::E;
        assert!((loss_kl(&[code(&[0.0], &[0.5])]) - (e - 2.0) / 2.0).abs() < 1e-12);
        // batch mean
        assert!((loss_kl(&[code(&[1.0], &[0.0]), code(&[0.0], &[0.0])]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn cov_examples() {
        assert!((loss_cov(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(loss_cov(&vec![vec![0.5, 1.5, 2.0]; 4]).unwrap(), 0.0);
        assert_eq!(loss_cov(&[vec![1.0], vec![2.0], vec![5.0]]).unwrap(), 0.0);
        assert!(loss_cov(&[vec![1.0, 2.0]]).is_err());
        // signed: a negative pair covariance survives in the plain sum but not in the abs variant
        let z = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
        assert!((loss_cov(&z).unwrap() + 1.0).abs() < 1e-12);
        assert!((loss_cov_abs(&z).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recon_examples() {
        let x = vec![0.2, 0.3, 0.25];
        assert_eq!(loss_recon(&x, &x), 0.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.01).collect();
        assert!((loss_recon(&x, &shifted) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn fresh_model_encodes_to_prior() {
        let m = VaeModel::new(GridSpec::canonical(), VaeConfig::pca(1)).unwrap();
        let x: Vec<f64> = (0..56).map(|k| 0.1 + 0.003 * k as f64).collect();
        let c = m.encode(&x).unwrap();
        assert_eq!(c.mu, vec![0.0; 3]);
        assert_eq!(c.log_sigma, vec![0.0; 3]);
        assert_eq!(m.encode(&x).unwrap(), c);
    }

    #[test]
    fn sample_with_vanishing_sigma_returns_mu() {
        let mut c = code(&[0.3, -1.2, 2.0], &[-50.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = sample_z(&mut c, &mut rng);
        for (a, b) in z.iter().zip(&c.mu) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        assert_eq!(c.z.as_ref(), Some(&z));
        assert_eq!(c.reparameterize(c.eps.as_ref().unwrap()), z);
    }

    #[test]
    fn sample_is_seeded() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            sample_z(&mut code(&[0.0; 3], &[0.0; 3]), &mut rng)
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn prior_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let z = sample_z(&mut code(&[0.0; 3], &[0.0; 3]), &mut rng);
            for k in 0..3 {
                sum[k] += z[k];
            }
        }
        for s in sum {
            assert!((s / n as f64).abs() < 3.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn decode_is_deterministic_and_positive() {
        let m = VaeModel::new(GridSpec::canonical(), VaeConfig::pca(2)).unwrap();
        let z = [0.4, -0.3, 1.1];
        assert_eq!(m.decode(&z).unwrap(), m.decode(&z).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let z: Vec<f64> = (0..3).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            assert!(m.decode_vec(&z).unwrap().iter().all(|v| *v > 0.0));
        }
        assert!(m.decode(&[0.0; 4]).is_err());
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let xs = (0..b).map(|_| (0..56).map(|_| rng.random_range(0.1..0.4)).collect()).collect();
        let eps = (0..b).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
        (xs, eps)
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..4 {
            let cfg = VaeConfig {
                latent_dim: 2 + trial % 3,
                lambda_kl: 0.3,
                lambda_cov: 0.7,
                cov_penalty: if trial % 2 == 0 { CovPenalty::Absolute } else { CovPenalty::Signed },
                recon_scale: if trial < 2 { 1.0 } else { DEFAULT_RECON_SCALE },
                seed: trial as u64,
            };
            let mut m = VaeModel::new(GridSpec::canonical(), cfg).unwrap();
            // move the heads off zero so every path carries gradient
            let mut p = m.params();
            for v in p.iter_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
            m.set_params(&p).unwrap();
            let (xs, eps) = random_batch(&mut rng, 4, cfg.latent_dim);
            let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            let (loss, VaeGrads(g)) = m.batch_loss_grad(&refs, &eps).unwrap();
            let oracle = m.batch_loss(&refs, &eps).unwrap();
            assert!((loss.total - oracle.total).abs() < 1e-12);
            let mut probe = m.clone();
            let numeric = central_difference(
                |q| {
                    probe.set_params(q).unwrap();
                    probe.batch_loss(&refs, &eps).unwrap().total
                },
                &p,
                1e-5,
            );
            let err = max_relative_error(&g, &numeric, 1e-8);
            assert!(err <= 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn total_combines_weighted_terms() {
        let cfg = VaeConfig {
            lambda_kl: 1e-4,
            lambda_cov: 0.1,
            recon_scale: 1.0,
            ..VaeConfig::pca(0)
        };
        let l = LossBreakdown::new(0.1, 2.0, -0.5, -0.5, &cfg);
        assert_eq!(l.total, 0.1 + 1e-4 * 2.0 + 0.1 * -0.5);
        let l = LossBreakdown::new(0.01, 2.0, 0.5, -0.5, &VaeConfig::pca(0));
        assert_eq!(l.total, 25.0 * 0.01 + 1e-4 * 2.0 + 0.1 * 0.5);
    }

    #[test]
    fn classic_config_has_no_cov_weight() {
        assert_eq!(VaeConfig::classic(3).lambda_cov, 0.0);
        assert_eq!(VaeConfig::pca(3).lambda_cov, CANONICAL_LAMBDA_COV);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Vec<f64>> = (0..40).map(|_| (0..56).map(|_| rng.random_range(0.15..0.3)).collect()).collect();
        let m = VaeModel::new(GridSpec::canonical(), VaeConfig::pca(3)).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let (a, ha) = train_on(&m, &data, &cfg).unwrap();
        let (b, hb) = train_on(&m, &data, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ha, hb);
        assert_eq!(ha.len(), 3);
        assert!(a.is_prepared());
    }

    #[test]
    fn training_rejects_tiny_batches() {
        let m = VaeModel::new(GridSpec::canonical(), VaeConfig::pca(3)).unwrap();
        let data = vec![vec![0.2; 56]; 4];
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(train_on(&m, &data, &cfg).is_err());
    }
}
