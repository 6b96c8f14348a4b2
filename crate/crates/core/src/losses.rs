//! The optimization objective, term by term.
//!
//! Every term is a pure function from graph nodes to a scalar node, so
//! the analytic gradients the trainer consumes are exactly the ones the
//! finite-difference checks verify. The weighted composition mirrors the
//! training objective: adversarial + L1 + structural dissimilarity +
//! total variation + contrastive, each behind its own coefficient.

use ndarray::{Array2, ArrayView2};

use crate::autodiff::{Graph, NodeId};
use crate::error::LossError;

/// Coefficients of the weighted objective, plus the contrastive
/// temperature. Defaults follow the reference configuration
/// (gan 1, l1 1, ssim 10, tv 1e-4, cl 1, tau 0.1).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_gan: f64,
    pub lambda_l1: f64,
    pub lambda_ssim: f64,
    pub lambda_tv: f64,
    pub lambda_cl: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gan: 1.0,
            lambda_l1: 1.0,
            lambda_ssim: 10.0,
            lambda_tv: 1e-4,
            lambda_cl: 1.0,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            ("lambda_gan", self.lambda_gan),
            ("lambda_l1", self.lambda_l1),
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_tv", self.lambda_tv),
            ("lambda_cl", self.lambda_cl),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::NonFiniteTerm(match name {
                    "lambda_gan" => "lambda_gan",
                    "lambda_l1" => "lambda_l1",
                    "lambda_ssim" => "lambda_ssim",
                    "lambda_tv" => "lambda_tv",
                    _ => "lambda_cl",
                }));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(LossError::NonFiniteTerm("tau"));
        }
        Ok(())
    }
}

/// How the SSIM statistics are gathered.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum SsimMode {
    /// Sliding Gaussian window (the loss default).
    Windowed,
    /// Whole-image statistics with sample (n-1) variance, the literal
    /// luminance/contrast/structure product. Kept for fidelity testing.
    Global,
}

/// SSIM stabilization constants and window shape.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the data (1.0 for normalized images).
    pub data_range: f64,
    pub mode: SsimMode,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
            mode: SsimMode::Windowed,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(LossError::NonFiniteTerm("ssim window must be odd"));
        }
        if !(self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.data_range > 0.0) {
            return Err(LossError::NonFiniteTerm("ssim parameters must be positive"));
        }
        Ok(())
    }
}

/// Which side of the adversarial game the loss is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversarialSide {
    Generator,
    Discriminator,
}

/// Normalized 1-D Gaussian kernel.
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-0.5 * (d / sigma).powi(2)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

fn check_same_shape(g: &Graph, a: NodeId, b: NodeId) -> Result<(), LossError> {
    let sa = g.value(a).shape();
    let sb = g.value(b).shape();
    if sa != sb {
        return Err(LossError::ShapeMismatch(sa.to_vec(), sb.to_vec()));
    }
    Ok(())
}

/// Non-saturating adversarial loss on raw patch logits, computed in
/// stable log-logit form (softplus), never via an explicit sigmoid.
///
/// Discriminator side: mean softplus(-d_real) + mean softplus(d_fake).
/// Generator side: mean softplus(-d_fake); `d_real` is ignored.
pub fn adversarial_loss(
    g: &mut Graph,
    d_real: NodeId,
    d_fake: NodeId,
    side: AdversarialSide,
) -> Result<NodeId, LossError> {
    match side {
        AdversarialSide::Discriminator => {
            let neg_real = g.mul_scalar(d_real, -1.0);
            let sp_real = g.softplus(neg_real);
            let real_term = g.mean_all(sp_real);
            let sp_fake = g.softplus(d_fake);
            let fake_term = g.mean_all(sp_fake);
            Ok(g.add(real_term, fake_term))
        }
        AdversarialSide::Generator => {
            let neg_fake = g.mul_scalar(d_fake, -1.0);
            let sp = g.softplus(neg_fake);
            Ok(g.mean_all(sp))
        }
    }
}

/// Mean absolute difference.
pub fn l1_loss(g: &mut Graph, generated: NodeId, target: NodeId) -> Result<NodeId, LossError> {
    check_same_shape(g, generated, target)?;
    let d = g.sub(generated, target);
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

fn windowed_ssim_map(
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
    params: &SsimParams,
) -> Result<NodeId, LossError> {
    let shape = g.value(x).shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    if params.window > h || params.window > w {
        return Err(LossError::WindowTooLarge {
            window: params.window,
            height: h,
            width: w,
        });
    }
    let kernel = gaussian_kernel_1d(params.window, params.sigma);
    let blur = |g: &mut Graph, t: NodeId| {
        let r = g.row_filter_valid(t, &kernel);
        g.col_filter_valid(r, &kernel)
    };
    let c1 = params.c1();
    let c2 = params.c2();

    let mu_x = blur(g, x);
    let mu_y = blur(g, y);
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let exx = blur(g, xx);
    let eyy = blur(g, yy);
    let exy = blur(g, xy);

    let mu_xx = g.mul(mu_x, mu_x);
    let mu_yy = g.mul(mu_y, mu_y);
    let mu_xy = g.mul(mu_x, mu_y);
    let var_x = g.sub(exx, mu_xx);
    let var_y = g.sub(eyy, mu_yy);
    let cov = g.sub(exy, mu_xy);

    let n1 = g.mul_scalar(mu_xy, 2.0);
    let n1 = g.add_scalar(n1, c1);
    let n2 = g.mul_scalar(cov, 2.0);
    let n2 = g.add_scalar(n2, c2);
    let num = g.mul(n1, n2);

    let d1 = g.add(mu_xx, mu_yy);
    let d1 = g.add_scalar(d1, c1);
    let d2 = g.add(var_x, var_y);
    let d2 = g.add_scalar(d2, c2);
    let den = g.mul(d1, d2);

    Ok(g.div(num, den))
}

fn global_ssim_map(
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
    params: &SsimParams,
) -> Result<NodeId, LossError> {
    let shape = g.value(x).shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let m = (h * w) as f64;
    if m < 2.0 {
        return Err(LossError::WindowTooLarge {
            window: h.max(w),
            height: h,
            width: w,
        });
    }
    // uniform whole-image window gives the per-image means as 1x1 maps
    let kr: Vec<f64> = vec![1.0 / w as f64; w];
    let kc: Vec<f64> = vec![1.0 / h as f64; h];
    let blur = |g: &mut Graph, t: NodeId| {
        let r = g.row_filter_valid(t, &kr);
        g.col_filter_valid(r, &kc)
    };
    let c1 = params.c1();
    let c2 = params.c2();
    let c3 = params.c3();
    let bessel = m / (m - 1.0);

    let mu_x = blur(g, x);
    let mu_y = blur(g, y);
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let exx = blur(g, xx);
    let eyy = blur(g, yy);
    let exy = blur(g, xy);

    let mu_xx = g.mul(mu_x, mu_x);
    let mu_yy = g.mul(mu_y, mu_y);
    let mu_xy = g.mul(mu_x, mu_y);
    let var_x = g.sub(exx, mu_xx);
    let var_x = g.mul_scalar(var_x, bessel);
    let var_y = g.sub(eyy, mu_yy);
    let var_y = g.mul_scalar(var_y, bessel);
    let cov = g.sub(exy, mu_xy);
    let cov = g.mul_scalar(cov, bessel);
    let sd_x = g.sqrt(var_x);
    let sd_y = g.sqrt(var_y);

    // luminance
    let ln = g.mul_scalar(mu_xy, 2.0);
    let ln = g.add_scalar(ln, c1);
    let ld = g.add(mu_xx, mu_yy);
    let ld = g.add_scalar(ld, c1);
    let l = g.div(ln, ld);
    // contrast
    let sd_xy = g.mul(sd_x, sd_y);
    let cn = g.mul_scalar(sd_xy, 2.0);
    let cn = g.add_scalar(cn, c2);
    let cd = g.add(var_x, var_y);
    let cd = g.add_scalar(cd, c2);
    let c = g.div(cn, cd);
    // structure
    let sn = g.add_scalar(cov, c3);
    let sd = g.add_scalar(sd_xy, c3);
    let s = g.div(sn, sd);

    let lc = g.mul(l, c);
    Ok(g.mul(lc, s))
}

/// Structural similarity index of a batch of image pairs, averaged over
/// windows (and the batch). Inputs are (n, 1, h, w) in [0, data_range].
pub fn ssim_index(
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
    params: &SsimParams,
) -> Result<NodeId, LossError> {
    check_same_shape(g, x, y)?;
    params.validate()?;
    let map = match params.mode {
        SsimMode::Windowed => windowed_ssim_map(g, x, y, params)?,
        SsimMode::Global => global_ssim_map(g, x, y, params)?,
    };
    Ok(g.mean_all(map))
}

/// Structural dissimilarity: (1 - ssim) / 2, in [0, 1].
pub fn dssim_loss(
    g: &mut Graph,
    generated: NodeId,
    target: NodeId,
    params: &SsimParams,
) -> Result<NodeId, LossError> {
    let s = ssim_index(g, generated, target, params)?;
    let half = g.mul_scalar(s, -0.5);
    Ok(g.add_scalar(half, 0.5))
}

/// Anisotropic total variation: sum of absolute horizontal and vertical
/// neighbor differences, normalized by pixel count per image and
/// averaged over the batch. Input is (n, 1, h, w).
pub fn tv_loss(g: &mut Graph, y: NodeId) -> Result<NodeId, LossError> {
    let shape = g.value(y).shape().to_vec();
    assert_eq!(shape.len(), 4, "tv_loss expects NCHW input");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    debug_assert_eq!(c, 1, "tv_loss is defined on single-channel images");
    let scale = 1.0 / (n * h * w) as f64;

    let mut terms: Vec<NodeId> = Vec::new();
    if h >= 2 {
        let dr = g.diff_rows(y);
        let ar = g.abs(dr);
        terms.push(g.sum_all(ar));
    }
    if w >= 2 {
        let dc = g.diff_cols(y);
        let ac = g.abs(dc);
        terms.push(g.sum_all(ac));
    }
    let total = match terms.as_slice() {
        [] => g.scalar(0.0),
        [one] => *one,
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    };
    Ok(g.mul_scalar(total, scale))
}

/// Positive-pair assignment for the contrastive batch: a fixed-point-free
/// involution on 0..2n.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndex {
    partner: Vec<usize>,
}

impl PairIndex {
    pub fn new(partner: Vec<usize>) -> Result<Self, LossError> {
        let n = partner.len();
        for (i, &j) in partner.iter().enumerate() {
            if j >= n {
                return Err(LossError::BadPairIndex(format!("partner {j} out of range")));
            }
            if j == i {
                return Err(LossError::BadPairIndex(format!("anchor {i} paired with itself")));
            }
            if partner[j] != i {
                return Err(LossError::BadPairIndex(format!(
                    "pairing is not an involution at {i} -> {j}"
                )));
            }
        }
        Ok(Self { partner })
    }

    /// The standard layout: rows 0..n are base samples, rows n..2n their
    /// augmented partners, pairing i with i + n.
    pub fn two_view(n: usize) -> Self {
        let partner = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
        Self { partner }
    }

    pub fn len(&self) -> usize {
        self.partner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partner.is_empty()
    }

    pub fn partner_of(&self, i: usize) -> usize {
        self.partner[i]
    }

    /// Re-index the pairing under a permutation of the batch rows.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, LossError> {
        let n = self.partner.len();
        if perm.len() != n {
            return Err(LossError::BadPairIndex("permutation length mismatch".into()));
        }
        let mut inverse = vec![0usize; n];
        for (new_i, &old_i) in perm.iter().enumerate() {
            inverse[old_i] = new_i;
        }
        let partner = perm.iter().map(|&old_i| inverse[self.partner[old_i]]).collect();
        Self::new(partner)
    }
}

/// Normalized temperature-scaled cross entropy over a batch of 2n
/// unit-norm embeddings with one positive partner per row. Cosine
/// similarity, self-similarity excluded from the denominator, mean over
/// all 2n anchors.
pub fn ntxent_loss(
    g: &mut Graph,
    embeddings: NodeId,
    pairs: &PairIndex,
    tau: f64,
) -> Result<NodeId, LossError> {
    let shape = g.value(embeddings).shape().to_vec();
    assert_eq!(shape.len(), 2, "embeddings must be (2n, d)");
    let rows = shape[0];
    if rows < 4 {
        return Err(LossError::BatchTooSmall(rows));
    }
    if pairs.len() != rows {
        return Err(LossError::BadPairIndex(format!(
            "pair index covers {} rows, batch has {rows}",
            pairs.len()
        )));
    }
    assert!(tau > 0.0, "temperature must be positive");
    {
        let e = crate::autodiff::as2(g.value(embeddings));
        for (i, row) in e.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(LossError::NonUnitNorm { row: i, norm });
            }
        }
    }

    let sims = g.matmul_nt(embeddings, embeddings);
    let scaled = g.mul_scalar(sims, 1.0 / tau);
    // push self-similarity out of the softmax support
    let mut self_mask = Array2::<f64>::zeros((rows, rows));
    for i in 0..rows {
        self_mask[[i, i]] = -1e9;
    }
    let mask = g.constant(self_mask);
    let masked = g.add(scaled, mask);
    let lsm = g.log_softmax_rows(masked);

    let mut pos_mask = Array2::<f64>::zeros((rows, rows));
    for i in 0..rows {
        pos_mask[[i, pairs.partner_of(i)]] = 1.0;
    }
    let pm = g.constant(pos_mask);
    let picked = g.mul(lsm, pm);
    let total = g.sum_all(picked);
    Ok(g.mul_scalar(total, -1.0 / rows as f64))
}

/// Raw per-term scalars of one generator objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub gan_g: f64,
    pub l1: f64,
    pub ssim: f64,
    pub tv: f64,
    pub cl: f64,
}

/// Weighted composition of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeLoss {
    pub total: f64,
    /// Per-term weighted contributions (lambda * term).
    pub weighted: LossTerms,
}

/// total = lambda_gan*gan + lambda_l1*l1 + lambda_ssim*ssim
///       + lambda_tv*tv + lambda_cl*cl.
pub fn composite_loss(terms: &LossTerms, weights: &LossWeights) -> Result<CompositeLoss, LossError> {
    let named = [
        ("gan", terms.gan_g),
        ("l1", terms.l1),
        ("ssim", terms.ssim),
        ("tv", terms.tv),
        ("cl", terms.cl),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(LossError::NonFiniteTerm(match name {
                "gan" => "gan",
                "l1" => "l1",
                "ssim" => "ssim",
                "tv" => "tv",
                _ => "cl",
            }));
        }
    }
    let weighted = LossTerms {
        gan_g: weights.lambda_gan * terms.gan_g,
        l1: weights.lambda_l1 * terms.l1,
        ssim: weights.lambda_ssim * terms.ssim,
        tv: weights.lambda_tv * terms.tv,
        cl: weights.lambda_cl * terms.cl,
    };
    let total = weighted.gan_g + weighted.l1 + weighted.ssim + weighted.tv + weighted.cl;
    Ok(CompositeLoss { total, weighted })
}

/// One row of the per-iteration loss CSV. The unweighted term values are
/// logged; `total` is the weighted generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iteration: u64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub l1: f64,
    pub ssim: f64,
    pub tv: f64,
    pub cl: f64,
    pub total: f64,
}

/// Fixed header of the loss CSV.
pub const LOSS_CSV_HEADER: [&str; 8] = [
    "iteration", "L_GAN_G", "L_GAN_D", "L_L1", "L_SSIM", "L_TV", "L_CL", "total",
];

/// Streaming writer for the loss CSV.
pub struct LossCsvWriter<W: std::io::Write> {
    inner: csv::Writer<W>,
}

impl<W: std::io::Write> LossCsvWriter<W> {
    pub fn new(sink: W) -> std::io::Result<Self> {
        let mut inner = csv::Writer::from_writer(sink);
        inner.write_record(LOSS_CSV_HEADER)?;
        Ok(Self { inner })
    }

    /// Open in append mode: no header is written.
    pub fn append(sink: W) -> Self {
        Self {
            inner: csv::Writer::from_writer(sink),
        }
    }

    pub fn write(&mut self, row: &LossRow) -> std::io::Result<()> {
        self.inner.write_record([
            row.iteration.to_string(),
            row.gan_g.to_string(),
            row.gan_d.to_string(),
            row.l1.to_string(),
            row.ssim.to_string(),
            row.tv.to_string(),
            row.cl.to_string(),
            row.total.to_string(),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

// ----- plain-array convenience wrappers -----

/// SSIM of a single image pair, through the same computation path as the
/// differentiable loss.
pub fn ssim_value(x: &ArrayView2<f64>, y: &ArrayView2<f64>, params: &SsimParams) -> Result<f64, LossError> {
    if x.dim() != y.dim() {
        return Err(LossError::ShapeMismatch(
            vec![x.nrows(), x.ncols()],
            vec![y.nrows(), y.ncols()],
        ));
    }
    let (h, w) = x.dim();
    let mut g = Graph::new();
    let xb = g.constant(x.to_owned().into_shape_with_order((1, 1, h, w)).unwrap());
    let yb = g.constant(y.to_owned().into_shape_with_order((1, 1, h, w)).unwrap());
    let s = ssim_index(&mut g, xb, yb, params)?;
    Ok(g.scalar_value(s))
}

/// Total variation of a single image (evaluation convenience).
pub fn tv_value(y: &ArrayView2<f64>) -> f64 {
    let (h, w) = y.dim();
    let mut g = Graph::new();
    let yb = g.constant(y.to_owned().into_shape_with_order((1, 1, h, w)).unwrap());
    let t = tv_loss(&mut g, yb).expect("tv on owned array");
    g.scalar_value(t)
}
