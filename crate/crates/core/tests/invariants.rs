use std::collections::BTreeMap;

use proptest::prelude::*;
use sae_groups::activation_store::{read_shard, write_shard, ActivationDataset, BatchSampler};
use sae_groups::clustering::{agglomerate, merge_trace, DistanceMatrix};
use sae_groups::desk_model::{forward, forward_spliced, init_desk_model, SpliceSpec, TemplateKind};
use sae_groups::downstream::{
    atp_ie, build_task, exact_ie_all, exact_ie_feature, ig_ie, select_features, AblationContext, FeatureReadout,
    Ranking, SelectionRule,
};
use sae_groups::evaluation::{l0_sparsity, mmcs, r_squared};
use sae_groups::sae::identity_sae;
use sae_groups::{Activation, DeskConfig, Matrix, RngStream, SaeParams};

fn matrix(rows: usize, cols: usize, seed: u64, std: f64) -> Matrix<f64> {
    let mut rng = RngStream::new(seed);
    Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols, std))
}

fn random_sae(d: usize, d_sae: usize, seed: u64) -> SaeParams<f64> {
    let mut rng = RngStream::new(seed);
    SaeParams::from_parts(
        Matrix::from_vec(d_sae, d, rng.normal_vec(d_sae * d, 1.0)),
        rng.normal_vec(d_sae, 0.1),
        &Matrix::from_vec(d, d_sae, rng.normal_vec(d * d_sae, 1.0)),
        rng.normal_vec(d, 0.1),
        vec![0.05; d_sae],
        Activation::HeavisideJumpRelu,
    )
    .unwrap()
}

struct Affine {
    w: Vec<f64>,
    c: f64,
}

impl FeatureReadout for Affine {
    fn d_sae(&self) -> usize {
        self.w.len()
    }
    fn metric_at(&self, f: &[f64]) -> sae_groups::Result<f64> {
        Ok(self.c + self.w.iter().zip(f).map(|(w, x)| w * x).sum::<f64>())
    }
    fn grad_at(&self, _f: &[f64]) -> sae_groups::Result<Vec<f64>> {
        Ok(self.w.clone())
    }
}

/// Metric that is nonlinear in every coordinate, to check locality of exact IE.
struct Cubic;

impl FeatureReadout for Cubic {
    fn d_sae(&self) -> usize {
        6
    }
    fn metric_at(&self, f: &[f64]) -> sae_groups::Result<f64> {
        let s: f64 = f.iter().sum();
        Ok(s * s * s + f.iter().map(|x| x.sin()).sum::<f64>())
    }
    fn grad_at(&self, f: &[f64]) -> sae_groups::Result<Vec<f64>> {
        let s: f64 = f.iter().sum();
        Ok(f.iter().map(|x| 3.0 * s * s + x.cos()).collect())
    }
}

fn distance_matrix(n: usize, seed: u64, quantize: bool) -> DistanceMatrix {
    let mut rng = RngStream::new(seed);
    let mut e = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let mut v = rng.uniform();
            if quantize {
                v = (v * 4.0).floor() / 4.0;
            }
            e[i * n + j] = v;
            e[j * n + i] = v;
        }
    }
    DistanceMatrix::new(n, e, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn r_squared_is_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let x = matrix(12, 5, seed, 1.0);
        let noise = matrix(12, 5, seed ^ 1, 0.3);
        let x_hat = x.as_slice().iter().zip(noise.as_slice()).map(|(a, b)| a + b).collect::<Vec<_>>();
        let x_hat = Matrix::from_vec(12, 5, x_hat);
        let mu: Vec<f64> = (0..5).map(|c| x.column(c).iter().sum::<f64>() / 12.0).collect();
        let base = r_squared(&x, &x_hat, &mu).unwrap();
        let xs = x.map(|v| v + shift);
        let xhs = x_hat.map(|v| v + shift);
        let mus: Vec<f64> = mu.iter().map(|m| m + shift).collect();
        let shifted = r_squared(&xs, &xhs, &mus).unwrap();
        prop_assert!((base - shifted).abs() < 1e-9, "{base} vs {shifted}");
        prop_assert!(base <= 1.0);
    }

    #[test]
    fn mmcs_ignores_column_order_and_positive_scale(seed in any::<u64>(), scales in prop::collection::vec(0.1f64..10.0, 8)) {
        let a = random_sae(4, 8, seed);
        let b = random_sae(4, 8, seed ^ 7);
        let base = mmcs(&a, &b).unwrap();
        // Reverse and rescale the columns of b.
        let wd = b.w_dec();
        let mut permuted = Matrix::zeros(4, 8);
        for j in 0..8 {
            for r in 0..4 {
                permuted.set(r, 7 - j, wd.get(r, j) * scales[j]);
            }
        }
        let b2 = SaeParams::from_parts(b.w_enc().clone(), b.b_enc().to_vec(), &permuted, b.b_dec().to_vec(), b.theta().to_vec(), b.activation()).unwrap();
        let other = mmcs(&a, &b2).unwrap();
        prop_assert!((base - other).abs() < 1e-12);
        prop_assert!((mmcs(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn l0_is_scale_invariant(seed in any::<u64>(), s in 1e-3f64..1e3) {
        let f = matrix(10, 16, seed, 1.0).map(|v| if v > 0.3 { v } else { 0.0 });
        prop_assert_eq!(l0_sparsity(&f), l0_sparsity(&f.scale(s)));
    }

    #[test]
    fn selection_is_scale_invariant_and_sized(
        ie in prop::collection::vec(-5.0f64..5.0, 1..40),
        mask in prop::collection::vec(any::<bool>(), 40),
        p in 0.0f64..=1.0,
        s in 0.01f64..100.0,
    ) {
        let active = &mask[..ie.len()];
        let n_active = active.iter().filter(|&&a| a).count();
        let scaled: Vec<f64> = ie.iter().map(|v| v * s).collect();
        for ranking in [Ranking::Absolute, Ranking::Signed] {
            let a = select_features(&ie, active, SelectionRule::TopFraction(p), ranking).unwrap();
            let b = select_features(&scaled, active, SelectionRule::TopFraction(p), ranking).unwrap();
            prop_assert_eq!(&a.indices, &b.indices);
            prop_assert_eq!(a.indices.len(), (p * n_active as f64).ceil() as usize);
            prop_assert!(a.indices.iter().all(|&i| active[i]));
        }
    }

    #[test]
    fn partitions_are_contiguous_and_nested(n in 1usize..12, seed in any::<u64>(), quantize in any::<bool>()) {
        let d = distance_matrix(n, seed, quantize);
        let mut coarser: Option<Vec<Vec<usize>>> = None;
        for k in 1..=n {
            let p = agglomerate(&d, k).unwrap();
            p.validate(n).unwrap();
            prop_assert_eq!(p.groups.len(), k);
            if let Some(c) = &coarser {
                // Every group at k is inside a group at k - 1.
                for g in &p.groups {
                    prop_assert!(c.iter().any(|cg| g.iter().all(|l| cg.contains(l))));
                }
            }
            coarser = Some(p.groups);
        }
        prop_assert!(agglomerate(&d, 0).is_err());
        prop_assert!(agglomerate(&d, n + 1).is_err());
        let trace = merge_trace(&d);
        for m in &trace.merges {
            let min = m.candidates.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(m.linkage, min);
        }
    }

    #[test]
    fn shard_round_trip(rows in 0usize..20, cols in 1usize..9, layer in 0usize..8, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let m = matrix(rows, cols, seed, 3.0).map(|v| v as f32 as f64);
        write_shard(layer, &m, &path).unwrap();
        let (h, back) = read_shard(&path).unwrap();
        prop_assert_eq!(h.layer_index as usize, layer);
        prop_assert_eq!(back.shape(), (rows, cols));
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            prop_assert_eq!(*a as f32, *b);
        }
    }

    #[test]
    fn exact_ie_reads_only_its_own_coordinate(
        fc in prop::collection::vec(-1.0f64..1.0, 6),
        fp in prop::collection::vec(-1.0f64..1.0, 6),
        noise in prop::collection::vec(-1.0f64..1.0, 6),
        i in 0usize..6,
    ) {
        let a = exact_ie_feature(&Cubic, &fc, &fp, i).unwrap();
        let mut fp2 = noise;
        fp2[i] = fp[i];
        let b = exact_ie_feature(&Cubic, &fc, &fp2, i).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn atp_and_ig_are_exact_on_affine_metrics(
        w in prop::collection::vec(-2.0f64..2.0, 7),
        fc in prop::collection::vec(-1.0f64..1.0, 7),
        fp in prop::collection::vec(-1.0f64..1.0, 7),
        c in -3.0f64..3.0,
        steps in 1usize..12,
    ) {
        let r = Affine { w, c };
        let exact = exact_ie_all(&r, &fc, &fp).unwrap();
        let atp = atp_ie(&r, &fc, &fp).unwrap();
        let ig = ig_ie(&r, &fc, &fp, steps, true).unwrap();
        for j in 0..7 {
            prop_assert!((exact[j] - atp[j]).abs() < 1e-12);
            prop_assert!((exact[j] - ig[j]).abs() < 1e-12);
        }
    }
}

fn tiny_desk() -> DeskConfig {
    DeskConfig {
        n_layers: 3,
        d_model: 8,
        n_heads: 2,
        vocab: 300,
        context: 24,
        seed: 5,
    }
}

#[test]
fn identity_splice_reproduces_the_model() {
    let model = init_desk_model::<f64>(&tiny_desk()).unwrap();
    let sae = identity_sae::<f64>(8);
    let mut rng = RngStream::new(3);
    let tokens: Vec<u32> = (0..24).map(|_| rng.below(300) as u32).collect();
    let (logits, hooks) = forward(&model, &tokens).unwrap();
    for l in 0..3 {
        let out = forward_spliced(&model, &tokens, &SpliceSpec::reconstruction(&[l]), Some(&sae)).unwrap();
        assert!(out.logits.max_abs_diff(&logits) < 1e-10, "layer {l}");
        assert!(out.hooks.layer(l).max_abs_diff(hooks.layer(l)) < 1e-10);
    }
}

#[test]
fn completeness_equals_faithfulness_of_the_complement() {
    let config = tiny_desk();
    let model = init_desk_model::<f64>(&config).unwrap();
    let sae = random_sae(8, 32, 9);
    let task = build_task(TemplateKind::GreaterThan, 4, 6, &config).unwrap();
    let ctx = AblationContext::new(&model, &sae, 1, &task).unwrap();
    let mut rng = RngStream::new(12);
    for _ in 0..5 {
        let sel: Vec<usize> = (0..32).filter(|_| rng.below(3) == 0).collect();
        let comp: Vec<usize> = (0..32).filter(|j| !sel.contains(j)).collect();
        let keep = ctx.task_metric(|j| !sel.contains(&j)).unwrap();
        let drop = ctx.task_metric(|j| comp.contains(&j)).unwrap();
        assert_eq!(keep.to_bits(), drop.to_bits());
        assert_eq!(
            ctx.faithfulness(&sel).unwrap().to_bits(),
            ctx.completeness(&comp).unwrap().to_bits()
        );
    }
    assert_eq!(ctx.faithfulness(&[]).unwrap(), 0.0);
    assert_eq!(ctx.completeness(&[]).unwrap(), ctx.full_score().unwrap());
}

#[test]
fn sampler_draws_rows_uniformly_across_layers() {
    let mut layers = BTreeMap::new();
    layers.insert(0, Matrix::<f32>::zeros(7, 2));
    layers.insert(1, Matrix::<f32>::zeros(13, 2));
    layers.insert(2, Matrix::<f32>::zeros(5, 2));
    let ds = ActivationDataset::from_layers(layers).unwrap();
    let mut sampler = BatchSampler::new(&[0, 1], 100, RngStream::new(21)).unwrap();
    let mut counts = [0usize; 2];
    let mut origin = Vec::new();
    let mut buf = Matrix::<f32>::zeros(100, 2);
    for _ in 0..200 {
        sampler.sample_into(&ds, &mut buf, Some(&mut origin)).unwrap();
        for &l in &origin {
            counts[l] += 1;
        }
    }
    let total = 20_000.0;
    let expected = [total * 7.0 / 20.0, total * 13.0 / 20.0];
    let chi2: f64 = counts
        .iter()
        .zip(expected)
        .map(|(&c, e)| (c as f64 - e).powi(2) / e)
        .sum();
    // One degree of freedom; 10.83 is the 0.001 critical value.
    assert!(chi2 < 10.83, "chi2 {chi2}, counts {counts:?}");
}
