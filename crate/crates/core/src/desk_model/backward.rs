use super::forward::{run, FeatureOverride, ForwardCache, SpliceSpec, SplicedOutput};
use super::ops::{gelu_grad, layer_norm_backward, linear_backward};
use super::DeskParams;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Matrix};
use crate::sae::SaeParams;
use crate::scalar::Scalar;

/// Returns `(dq, dk, dv)` given the gradient of the concatenated head outputs.
fn attention_backward<T: Scalar>(
    cache: &super::forward::LayerCache<T>,
    d_attn: &Matrix<T>,
    n_heads: usize,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let (n, d) = d_attn.shape();
    let dh = d / n_heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let (q, k, v) = (&cache.q, &cache.k, &cache.v);
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut dp = vec![T::zero(); n];
    for (h, p) in cache.probs.iter().enumerate() {
        let span = h * dh..(h + 1) * dh;
        for i in 0..n {
            let doi = &d_attn.row(i)[span.clone()];
            let pi = &p[i * n..i * n + i + 1];
            for j in 0..=i {
                dp[j] = dot(doi, &v.row(j)[span.clone()]);
                axpy(pi[j], doi, &mut dv.row_mut(j)[span.clone()]);
            }
            let mean = (0..=i).map(|j| pi[j] * dp[j]).sum::<T>();
            for j in 0..=i {
                let ds = pi[j] * (dp[j] - mean) * scale;
                if ds != T::zero() {
                    axpy(ds, &k.row(j)[span.clone()], &mut dq.row_mut(i)[span.clone()]);
                    axpy(ds, &q.row(i)[span.clone()], &mut dk.row_mut(j)[span.clone()]);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Reverse pass from `dlogits`. Returns the gradient with respect to each
/// layer's resid-post value (the value consumed downstream, so after any
/// splice). With `down_to = Some(l)` the pass stops once layer `l`'s
/// resid-post gradient is known; `None` continues into the embeddings.
/// Parameter gradients are accumulated into `grads` when given.
pub(crate) fn backward<T: Scalar>(
    params: &DeskParams<T>,
    cache: &ForwardCache<T>,
    dlogits: &Matrix<T>,
    mut grads: Option<&mut DeskParams<T>>,
    down_to: Option<usize>,
) -> Vec<Option<Matrix<T>>> {
    let n_layers = params.layers.len();
    let n_heads = params.config.n_heads;
    let mut d_resid: Vec<Option<Matrix<T>>> = vec![None; n_layers];

    let dlnf = linear_backward(
        &cache.lnf.out,
        &params.w_u,
        dlogits,
        grads.as_deref_mut().map(|g| (&mut g.w_u, &mut g.b_u[..])),
    );
    let mut dx = layer_norm_backward(
        &dlnf,
        &cache.lnf,
        &params.lnf_g,
        grads.as_deref_mut().map(|g| (&mut g.lnf_g[..], &mut g.lnf_b[..])),
    );

    for l in (0..n_layers).rev() {
        d_resid[l] = Some(dx.clone());
        if down_to == Some(l) {
            return d_resid;
        }
        let lp = &params.layers[l];
        let c = &cache.layers[l];
        let mut lg = grads.as_deref_mut().map(|g| &mut g.layers[l]);

        let mut dmid = dx.clone();
        let mut dh = linear_backward(
            &c.h_act,
            &lp.w_out,
            &dx,
            lg.as_deref_mut().map(|g| (&mut g.w_out, &mut g.b_out[..])),
        );
        for (g, &z) in dh.as_mut_slice().iter_mut().zip(c.h_pre.as_slice()) {
            *g *= gelu_grad(z);
        }
        let dln2 = linear_backward(
            &c.ln2.out,
            &lp.w_in,
            &dh,
            lg.as_deref_mut().map(|g| (&mut g.w_in, &mut g.b_in[..])),
        );
        let d_from_ln2 = layer_norm_backward(
            &dln2,
            &c.ln2,
            &lp.ln2_g,
            lg.as_deref_mut().map(|g| (&mut g.ln2_g[..], &mut g.ln2_b[..])),
        );
        for (a, &b) in dmid.as_mut_slice().iter_mut().zip(d_from_ln2.as_slice()) {
            *a += b;
        }

        let d_attn = linear_backward(
            &c.attn,
            &lp.w_o,
            &dmid,
            lg.as_deref_mut().map(|g| (&mut g.w_o, &mut g.b_o[..])),
        );
        let (dq, dk, dv) = attention_backward(c, &d_attn, n_heads);
        let mut dln1 = linear_backward(
            &c.ln1.out,
            &lp.w_q,
            &dq,
            lg.as_deref_mut().map(|g| (&mut g.w_q, &mut g.b_q[..])),
        );
        let dk_in = linear_backward(
            &c.ln1.out,
            &lp.w_k,
            &dk,
            lg.as_deref_mut().map(|g| (&mut g.w_k, &mut g.b_k[..])),
        );
        let dv_in = linear_backward(
            &c.ln1.out,
            &lp.w_v,
            &dv,
            lg.as_deref_mut().map(|g| (&mut g.w_v, &mut g.b_v[..])),
        );
        for ((a, &b), &c2) in dln1
            .as_mut_slice()
            .iter_mut()
            .zip(dk_in.as_slice())
            .zip(dv_in.as_slice())
        {
            *a += b + c2;
        }
        let d_from_ln1 = layer_norm_backward(
            &dln1,
            &c.ln1,
            &lp.ln1_g,
            lg.map(|g| (&mut g.ln1_g[..], &mut g.ln1_b[..])),
        );
        for (a, &b) in dmid.as_mut_slice().iter_mut().zip(d_from_ln1.as_slice()) {
            *a += b;
        }
        dx = dmid;
    }

    if down_to.is_none() {
        if let Some(g) = grads {
            for (p, &t) in cache.tokens.iter().enumerate() {
                axpy(T::one(), dx.row(p), g.tok_emb.row_mut(t as usize));
                axpy(T::one(), dx.row(p), g.pos_emb.row_mut(p));
            }
        }
    }
    d_resid
}

/// Mean next-token cross-entropy over every predicted position of `batch`
/// and its gradient with respect to all parameters.
pub fn training_grads<T: Scalar>(params: &DeskParams<T>, batch: &[Vec<u32>]) -> Result<(f64, DeskParams<T>)> {
    let mut grads = DeskParams::zeros(&params.config);
    let loss = accumulate_training_grads(params, batch, &mut grads)?;
    Ok((loss, grads))
}

pub(crate) fn accumulate_training_grads<T: Scalar>(
    params: &DeskParams<T>,
    batch: &[Vec<u32>],
    grads: &mut DeskParams<T>,
) -> Result<f64> {
    let total: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if total == 0 {
        return Err(Error::Data("batch has no next-token targets".into()));
    }
    let inv = T::one() / T::lit(total as f64);
    let mut loss = 0.0;
    for seq in batch {
        if seq.len() < 2 {
            continue;
        }
        let (out, cache) = run(params, seq, None, None)?;
        let mut dlogits = Matrix::zeros(out.logits.rows(), out.logits.cols());
        for p in 0..seq.len() - 1 {
            let target = seq[p + 1] as usize;
            let row = out.logits.row(p);
            loss += super::forward::nll(row, target);
            let dr = dlogits.row_mut(p);
            dr.copy_from_slice(row);
            super::ops::softmax_in_place(dr);
            dr[target] -= T::one();
            dr.iter_mut().for_each(|v| *v *= inv);
        }
        backward(params, &cache, &dlogits, Some(grads), None);
    }
    Ok(loss / total as f64)
}

/// Gradient of a metric of the final-position logits with respect to the SAE
/// features at `layer`'s final position, with the SAE reconstruction spliced
/// in at that layer. `metric_grad` is `dm/dlogits` at the final position.
pub fn grad_wrt_features<T: Scalar>(
    params: &DeskParams<T>,
    tokens: &[u32],
    sae: &SaeParams<T>,
    layer: usize,
    metric_grad: &[T],
) -> Result<Vec<T>> {
    Ok(grad_wrt_features_at(params, tokens, sae, layer, &[], metric_grad)?.0)
}

/// As [`grad_wrt_features`], evaluated with `overrides` applied at `layer`.
/// Also returns the spliced forward output.
pub fn grad_wrt_features_at<T: Scalar>(
    params: &DeskParams<T>,
    tokens: &[u32],
    sae: &SaeParams<T>,
    layer: usize,
    overrides: &[FeatureOverride<T>],
    metric_grad: &[T],
) -> Result<(Vec<T>, SplicedOutput<T>)> {
    if metric_grad.len() != params.config.vocab {
        return Err(Error::Shape(format!(
            "metric gradient has length {}, vocab is {}",
            metric_grad.len(),
            params.config.vocab
        )));
    }
    let spec = SpliceSpec::override_features(layer, overrides.to_vec());
    let (out, cache) = run(params, tokens, Some(&spec), Some(sae))?;
    let n = tokens.len();
    let mut dlogits = Matrix::zeros(n, params.config.vocab);
    dlogits.row_mut(n - 1).copy_from_slice(metric_grad);
    let d_resid = backward(params, &cache, &dlogits, None, Some(layer));
    let dx = d_resid[layer].as_ref().expect("reached splice layer");
    let last = dx.row(n - 1);
    let grad: Vec<T> = (0..sae.d_sae()).map(|j| dot(sae.decoder_column(j), last)).collect();
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite feature gradient".into()));
    }
    Ok((grad, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::desk_model::{forward, forward_spliced, init_desk_model, DeskConfig};
    use crate::numerics::{finite_diff_grad, RngStream};
    use crate::sae::Activation;

    fn micro(seed: u64) -> DeskParams<f64> {
        init_desk_model(&DeskConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            vocab: 290,
            context: 20,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn resid_gradient_matches_differences() {
        // Perturb resid-post of layer 0 through a fixed splice and compare.
        let p = micro(4);
        let tokens = [0u32, 5, 9, 41, 100];
        let (_, hooks) = forward(&p, &tokens).unwrap();
        let base = hooks.layer(0).clone();
        let w: Vec<f64> = (0..290).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let metric = |x: &[f64]| {
            let m = Matrix::from_vec(5, 8, x.to_vec());
            let out = forward_spliced(&p, &tokens, &SpliceSpec::fixed(&[0], vec![m]), None).unwrap();
            dot(out.logits.row(4), &w)
        };
        let fd = finite_diff_grad(metric, base.as_slice(), 1e-5).unwrap();
        let (_, cache) = run(&p, &tokens, None, None).unwrap();
        let mut dl = Matrix::zeros(5, 290);
        dl.row_mut(4).copy_from_slice(&w);
        let d = backward(&p, &cache, &dl, None, Some(0));
        let got = d[0].as_ref().unwrap();
        for (a, b) in got.as_slice().iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    fn random_sae(seed: u64) -> SaeParams<f64> {
        let mut rng = RngStream::new(seed);
        let mut sae = SaeParams::<f64>::init(8, 2, &[0.0; 8], 4.0, 0.0, Activation::HeavisideJumpRelu, &mut rng).unwrap();
        for (name, b) in sae.blocks_mut() {
            if name == "w_dec" {
                let v = rng.normal_vec::<f64>(b.len(), 0.4);
                b.copy_from_slice(&v);
            }
        }
        sae
    }

    #[test]
    fn feature_gradient_matches_differences() {
        let p = micro(5);
        let sae = random_sae(6);
        let tokens = [0u32, 1, 12, 3, 2, 60];
        let mut w = vec![0.0; 290];
        w[70] = 1.0;
        w[50] = -1.0;
        let (_, f0) = {
            let out = forward_spliced(&p, &tokens, &SpliceSpec::reconstruction(&[0]), Some(&sae)).unwrap();
            (out.logits, out.features[0].1.row(5).to_vec())
        };
        let metric = |f: &[f64]| {
            let ov = f
                .iter()
                .enumerate()
                .map(|(j, &value)| FeatureOverride { position: 5, feature: j, value })
                .collect();
            let out = forward_spliced(&p, &tokens, &SpliceSpec::override_features(0, ov), Some(&sae)).unwrap();
            out.logits.get(5, 70) - out.logits.get(5, 50)
        };
        let fd = finite_diff_grad(metric, &f0, 1e-5).unwrap();
        let g = grad_wrt_features(&p, &tokens, &sae, 0, &w).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * b.abs() + 1e-8, "{a} vs {b}");
        }
        let w3: Vec<f64> = w.iter().map(|v| 3.0 * v).collect();
        let g3 = grad_wrt_features(&p, &tokens, &sae, 0, &w3).unwrap();
        for (a, b) in g.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
        let zero = grad_wrt_features(&p, &tokens, &sae, 0, &vec![0.0; 290]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_batch_is_data_error() {
        let p = micro(1);
        assert!(matches!(training_grads(&p, &[vec![3]]), Err(Error::Data(_))));
    }
}
