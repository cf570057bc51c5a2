use super::ops::{gelu, layer_norm, linear, softmax_in_place, LnCache};
use super::DeskParams;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Matrix};
use crate::sae::SaeParams;
use crate::scalar::Scalar;

/// Resid-post activations of one forward pass, one `positions x d_model`
/// matrix per layer. Spliced layers record the value passed downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct HookRecord<T> {
    pub resid_post: Vec<Matrix<T>>,
}

impl<T> HookRecord<T> {
    pub fn n_layers(&self) -> usize {
        self.resid_post.len()
    }

    pub fn layer(&self, l: usize) -> &Matrix<T> {
        &self.resid_post[l]
    }
}

/// Sets feature `feature` at sequence position `position` to `value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureOverride<T> {
    pub position: usize,
    pub feature: usize,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpliceMode<T> {
    /// Replace resid-post by the SAE reconstruction at every position.
    SaeReconstruction,
    ZeroAblation,
    /// One replacement matrix per spliced layer, in `SpliceSpec::layers` order.
    FixedValues(Vec<Matrix<T>>),
    /// Reconstruction with selected feature activations replaced before
    /// decoding. Only the changed features' decoder columns are read.
    FeatureOverride(Vec<FeatureOverride<T>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpliceSpec<T> {
    pub layers: Vec<usize>,
    pub mode: SpliceMode<T>,
}

impl<T: Scalar> SpliceSpec<T> {
    pub fn reconstruction(layers: &[usize]) -> Self {
        Self {
            layers: layers.to_vec(),
            mode: SpliceMode::SaeReconstruction,
        }
    }

    pub fn zero_ablation(layers: &[usize]) -> Self {
        Self {
            layers: layers.to_vec(),
            mode: SpliceMode::ZeroAblation,
        }
    }

    pub fn fixed(layers: &[usize], values: Vec<Matrix<T>>) -> Self {
        Self {
            layers: layers.to_vec(),
            mode: SpliceMode::FixedValues(values),
        }
    }

    pub fn override_features(layer: usize, overrides: Vec<FeatureOverride<T>>) -> Self {
        Self {
            layers: vec![layer],
            mode: SpliceMode::FeatureOverride(overrides),
        }
    }

    fn needs_sae(&self) -> bool {
        matches!(
            self.mode,
            SpliceMode::SaeReconstruction | SpliceMode::FeatureOverride(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplicedOutput<T> {
    pub logits: Matrix<T>,
    pub hooks: HookRecord<T>,
    /// Feature activations decoded at each spliced layer (after overrides),
    /// as `(layer, positions x d_sae)`. Empty without an SAE.
    pub features: Vec<(usize, Matrix<T>)>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    pub ln1: LnCache<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Per head, row-major `n x n` attention weights (zero above the diagonal).
    pub probs: Vec<Vec<T>>,
    pub attn: Matrix<T>,
    pub ln2: LnCache<T>,
    pub h_pre: Matrix<T>,
    pub h_act: Matrix<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache<T> {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerCache<T>>,
    pub lnf: LnCache<T>,
}

pub(crate) fn check_tokens<T>(params: &DeskParams<T>, tokens: &[u32]) -> Result<()> {
    let cfg = &params.config;
    if tokens.is_empty() || tokens.len() > cfg.context {
        return Err(Error::Data(format!(
            "sequence length {} outside 1..={}",
            tokens.len(),
            cfg.context
        )));
    }
    if let Some(p) = tokens.iter().position(|&t| t as usize >= cfg.vocab) {
        return Err(Error::Data(format!(
            "token {} at position {p} is outside the vocabulary of {}",
            tokens[p], cfg.vocab
        )));
    }
    Ok(())
}

fn check_splice<T: Scalar>(
    params: &DeskParams<T>,
    n: usize,
    splice: &SpliceSpec<T>,
    sae: Option<&SaeParams<T>>,
) -> Result<()> {
    let cfg = &params.config;
    if let Some(&l) = splice.layers.iter().find(|&&l| l >= cfg.n_layers) {
        return Err(Error::Config(format!(
            "splice layer {l} outside the model's {} layers",
            cfg.n_layers
        )));
    }
    if splice.needs_sae() && sae.is_none() {
        return Err(Error::Config("splice mode requires an attached SAE".into()));
    }
    if let Some(sae) = sae {
        if sae.d() != cfg.d_model {
            return Err(Error::Config(format!(
                "SAE input dimension {} does not match d_model {}",
                sae.d(),
                cfg.d_model
            )));
        }
    }
    match &splice.mode {
        SpliceMode::FixedValues(values) => {
            if values.len() != splice.layers.len() {
                return Err(Error::Config(format!(
                    "{} replacement matrices for {} spliced layers",
                    values.len(),
                    splice.layers.len()
                )));
            }
            if let Some(m) = values.iter().find(|m| m.shape() != (n, cfg.d_model)) {
                return Err(Error::Shape(format!(
                    "replacement of shape {:?}, expected ({n}, {})",
                    m.shape(),
                    cfg.d_model
                )));
            }
        }
        SpliceMode::FeatureOverride(overrides) => {
            let d_sae = sae.map_or(0, |s| s.d_sae());
            if let Some(o) = overrides.iter().find(|o| o.position >= n || o.feature >= d_sae) {
                return Err(Error::Config(format!(
                    "override of feature {} at position {} out of range",
                    o.feature, o.position
                )));
            }
        }
        _ => {}
    }
    Ok(())
}

fn attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, n_heads: usize) -> (Matrix<T>, Vec<Vec<T>>) {
    let (n, d) = q.shape();
    let dh = d / n_heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(n_heads);
    let mut s = vec![T::zero(); n];
    for h in 0..n_heads {
        let span = h * dh..(h + 1) * dh;
        let mut p = vec![T::zero(); n * n];
        for i in 0..n {
            let qi = &q.row(i)[span.clone()];
            for j in 0..=i {
                s[j] = dot(qi, &k.row(j)[span.clone()]) * scale;
            }
            softmax_in_place(&mut s[..=i]);
            p[i * n..i * n + i + 1].copy_from_slice(&s[..=i]);
            let oi = &mut out.row_mut(i)[span.clone()];
            for j in 0..=i {
                axpy(s[j], &v.row(j)[span.clone()], oi);
            }
        }
        probs.push(p);
    }
    (out, probs)
}

/// Applies the splice to `x` (resid-post of one layer) in place.
fn apply_splice<T: Scalar>(
    x: &mut Matrix<T>,
    slot: usize,
    splice: &SpliceSpec<T>,
    sae: Option<&SaeParams<T>>,
) -> Result<Option<Matrix<T>>> {
    match &splice.mode {
        SpliceMode::ZeroAblation => {
            x.as_mut_slice().fill(T::zero());
            Ok(None)
        }
        SpliceMode::FixedValues(values) => {
            x.as_mut_slice().copy_from_slice(values[slot].as_slice());
            Ok(None)
        }
        SpliceMode::SaeReconstruction => {
            let sae = sae.expect("checked");
            let f = sae.encode(x)?;
            for r in 0..x.rows() {
                sae.decode_row(f.row(r), x.row_mut(r));
            }
            Ok(Some(f))
        }
        SpliceMode::FeatureOverride(overrides) => {
            let sae = sae.expect("checked");
            let mut f = sae.encode(x)?;
            for r in 0..x.rows() {
                sae.decode_row(f.row(r), x.row_mut(r));
            }
            for o in overrides {
                let old = f.get(o.position, o.feature);
                if o.value != old {
                    axpy(o.value - old, sae.decoder_column(o.feature), x.row_mut(o.position));
                    f.set(o.position, o.feature, o.value);
                }
            }
            Ok(Some(f))
        }
    }
}

pub(crate) fn run<T: Scalar>(
    params: &DeskParams<T>,
    tokens: &[u32],
    splice: Option<&SpliceSpec<T>>,
    sae: Option<&SaeParams<T>>,
) -> Result<(SplicedOutput<T>, ForwardCache<T>)> {
    check_tokens(params, tokens)?;
    let n = tokens.len();
    if let Some(s) = splice {
        check_splice(params, n, s, sae)?;
    }
    let cfg = &params.config;
    let d = cfg.d_model;
    let mut x = Matrix::zeros(n, d);
    for (p, &t) in tokens.iter().enumerate() {
        let row = x.row_mut(p);
        row.copy_from_slice(params.tok_emb.row(t as usize));
        axpy(T::one(), params.pos_emb.row(p), row);
    }
    let mut caches = Vec::with_capacity(cfg.n_layers);
    let mut hooks = Vec::with_capacity(cfg.n_layers);
    let mut features = Vec::new();
    for (l, lp) in params.layers.iter().enumerate() {
        let ln1 = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
        let q = linear(&ln1.out, &lp.w_q, &lp.b_q);
        let k = linear(&ln1.out, &lp.w_k, &lp.b_k);
        let v = linear(&ln1.out, &lp.w_v, &lp.b_v);
        let (attn, probs) = attention(&q, &k, &v, cfg.n_heads);
        let mut mid = linear(&attn, &lp.w_o, &lp.b_o);
        for (m, &xi) in mid.as_mut_slice().iter_mut().zip(x.as_slice()) {
            *m += xi;
        }
        let ln2 = layer_norm(&mid, &lp.ln2_g, &lp.ln2_b);
        let h_pre = linear(&ln2.out, &lp.w_in, &lp.b_in);
        let h_act = h_pre.map(gelu);
        let mut out = linear(&h_act, &lp.w_out, &lp.b_out);
        for (o, &m) in out.as_mut_slice().iter_mut().zip(mid.as_slice()) {
            *o += m;
        }
        if let Some(s) = splice {
            if let Some(slot) = s.layers.iter().position(|&sl| sl == l) {
                if let Some(f) = apply_splice(&mut out, slot, s, sae)? {
                    features.push((l, f));
                }
            }
        }
        x = out.clone();
        caches.push(LayerCache {
            ln1,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            h_pre,
            h_act,
        });
        hooks.push(out);
    }
    let lnf = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let logits = linear(&lnf.out, &params.w_u, &params.b_u);
    let output = SplicedOutput {
        logits,
        hooks: HookRecord { resid_post: hooks },
        features,
    };
    let cache = ForwardCache {
        tokens: tokens.to_vec(),
        layers: caches,
        lnf,
    };
    Ok((output, cache))
}

/// Logits (`positions x vocab`) and resid-post hooks of a plain forward pass.
pub fn forward<T: Scalar>(params: &DeskParams<T>, tokens: &[u32]) -> Result<(Matrix<T>, HookRecord<T>)> {
    let (out, _) = run(params, tokens, None, None)?;
    Ok((out.logits, out.hooks))
}

pub fn forward_spliced<T: Scalar>(
    params: &DeskParams<T>,
    tokens: &[u32],
    splice: &SpliceSpec<T>,
    sae: Option<&SaeParams<T>>,
) -> Result<SplicedOutput<T>> {
    Ok(run(params, tokens, Some(splice), sae)?.0)
}

/// Mean negative log-likelihood (natural log) of `targets` under the rows of
/// `logits`.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &[u32]) -> Result<f64> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        if t as usize >= row.len() {
            return Err(Error::Data(format!("target {t} outside the vocabulary")));
        }
        total += nll(row, t as usize);
    }
    Ok(total / targets.len() as f64)
}

pub(crate) fn nll<T: Scalar>(row: &[T], target: usize) -> f64 {
    let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
    lse - row[target].as_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::desk_model::{init_desk_model, DeskConfig};
    use crate::sae::identity_sae;

    fn micro() -> DeskParams<f64> {
        init_desk_model(&DeskConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            vocab: 290,
            context: 20,
            seed: 3,
        })
        .unwrap()
    }

    const TOKENS: [u32; 7] = [0, 1, 12, 3, 2, 77, 289];

    #[test]
    fn shapes() {
        let p = micro();
        let (logits, hooks) = forward(&p, &TOKENS).unwrap();
        assert_eq!(logits.shape(), (7, 290));
        assert_eq!(hooks.n_layers(), 3);
        assert!(hooks.resid_post.iter().all(|h| h.shape() == (7, 8)));
    }

    #[test]
    fn deterministic() {
        let p = micro();
        assert_eq!(forward(&p, &TOKENS).unwrap(), forward(&p, &TOKENS).unwrap());
    }

    #[test]
    fn out_of_vocab_is_data_error() {
        let p = micro();
        assert!(matches!(forward(&p, &[0, 290]), Err(Error::Data(_))));
        assert!(matches!(forward(&p, &[0; 21]), Err(Error::Data(_))));
    }

    #[test]
    fn causal() {
        let p = micro();
        let (a, _) = forward(&p, &TOKENS).unwrap();
        let mut other = TOKENS;
        other[6] = 5;
        let (b, _) = forward(&p, &other).unwrap();
        for r in 0..6 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(6), b.row(6));
    }

    #[test]
    fn fixed_splice_of_own_values_is_bit_identical() {
        let p = micro();
        let (logits, hooks) = forward(&p, &TOKENS).unwrap();
        let spec = SpliceSpec::fixed(&[0, 1, 2], hooks.resid_post.clone());
        let out = forward_spliced(&p, &TOKENS, &spec, None).unwrap();
        assert_eq!(out.logits, logits);
    }

    #[test]
    fn identity_sae_splice_preserves_logits() {
        let p = micro();
        let sae = identity_sae::<f64>(8);
        let (logits, _) = forward(&p, &TOKENS).unwrap();
        let out = forward_spliced(&p, &TOKENS, &SpliceSpec::reconstruction(&[1]), Some(&sae)).unwrap();
        assert!(out.logits.max_abs_diff(&logits) < 1e-5);
        assert_eq!(out.features.len(), 1);
        assert_eq!(out.features[0].1.shape(), (7, 16));
    }

    #[test]
    fn zero_ablation_everywhere_matches_zeroed_hooks() {
        let p = micro();
        let zeros = vec![Matrix::zeros(7, 8); 3];
        let a = forward_spliced(&p, &TOKENS, &SpliceSpec::zero_ablation(&[0, 1, 2]), None).unwrap();
        let b = forward_spliced(&p, &TOKENS, &SpliceSpec::fixed(&[0, 1, 2], zeros), None).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn empty_override_is_reconstruction() {
        let p = micro();
        let mut rng = crate::numerics::RngStream::new(8);
        let mut sae = SaeParams::<f64>::init(8, 2, &[0.0; 8], 3.0, 0.0, crate::sae::Activation::HeavisideJumpRelu, &mut rng).unwrap();
        for (name, b) in sae.blocks_mut() {
            if name == "w_dec" {
                let v = rng.normal_vec::<f64>(b.len(), 0.3);
                b.copy_from_slice(&v);
            }
        }
        let a = forward_spliced(&p, &TOKENS, &SpliceSpec::reconstruction(&[2]), Some(&sae)).unwrap();
        let b = forward_spliced(&p, &TOKENS, &SpliceSpec::override_features(2, vec![]), Some(&sae)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splice_errors() {
        let p = micro();
        let sae = identity_sae::<f64>(4);
        assert!(matches!(
            forward_spliced(&p, &TOKENS, &SpliceSpec::reconstruction(&[0]), Some(&sae)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            forward_spliced(&p, &TOKENS, &SpliceSpec::reconstruction(&[0]), None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            forward_spliced(&p, &TOKENS, &SpliceSpec::zero_ablation(&[3]), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let v = 7;
        let uniform = Matrix::<f64>::zeros(3, v);
        let ce = cross_entropy(&uniform, &[0, 3, 6]).unwrap();
        assert!((ce - (v as f64).ln()).abs() < 1e-12);

        let mut sharp = Matrix::<f64>::zeros(1, 3);
        sharp.set(0, 1, 60.0);
        assert!(cross_entropy(&sharp, &[1]).unwrap() < 1e-20);

        // Rows (1, 2, 3) -> target 2 and (0, 0, 0) -> target 0:
        // (ln(e + e^2 + e^3) - 3 + ln 3) / 2.
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let e = std::f64::consts::E;
        let first = (e + e * e + e * e * e).ln() - 3.0;
        let second = 3.0f64.ln();
        let ce = cross_entropy(&m, &[2, 0]).unwrap();
        assert!((ce - (first + second) / 2.0).abs() < 1e-12);
    }
}
