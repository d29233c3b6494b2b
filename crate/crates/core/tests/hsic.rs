use ibrar_core::gradcheck::finite_diff_check;
use ibrar_core::hsic::{channel_hsic, gram_matrix, hsic, hsic_value, KernelConfig};
use ibrar_core::{one_hot, Bandwidth, Error, Graph, KernelKind, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn rows_of(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Textbook Gram matrix, median rule included.
fn dense_gram(a: &Mat, cfg: &KernelConfig) -> Mat {
    let m = a.len();
    let sq = |i: usize, j: usize| -> f64 { a[i].iter().zip(&a[j]).map(|(x, y)| (x - y) * (x - y)).sum() };
    match cfg.kind {
        KernelKind::Linear => (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| a[i].iter().zip(&a[j]).map(|(x, y)| x * y).sum())
                    .collect()
            })
            .collect(),
        KernelKind::Gaussian => {
            let sigma = match cfg.bandwidth {
                Bandwidth::Fixed(s) => s,
                Bandwidth::Median => {
                    let mut d: Vec<f64> = (0..m)
                        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
                        .map(|(i, j)| sq(i, j).sqrt())
                        .collect();
                    d.sort_by(f64::total_cmp);
                    let n = d.len();
                    let med = if n % 2 == 1 {
                        d[n / 2]
                    } else {
                        0.5 * (d[n / 2 - 1] + d[n / 2])
                    };
                    if med > 0.0 {
                        med
                    } else {
                        1.0
                    }
                }
            };
            (0..m)
                .map(|i| (0..m).map(|j| (-sq(i, j) / (2.0 * sigma * sigma)).exp()).collect())
                .collect()
        }
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, p) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..p).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

/// `tr(K_A H K_B H) / (m − 1)²` with explicit matrix products.
fn dense_hsic(a: &Mat, b: &Mat, ca: &KernelConfig, cb: &KernelConfig) -> f64 {
    let m = a.len();
    let h: Mat = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / m as f64)
                .collect()
        })
        .collect();
    let prod = matmul(&matmul(&matmul(&dense_gram(a, ca), &h), &dense_gram(b, cb)), &h);
    (0..m).map(|i| prod[i][i]).sum::<f64>() / ((m - 1) * (m - 1)) as f64
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn kernel_choices() -> [KernelConfig; 4] {
    [
        KernelConfig::gaussian_median(),
        KernelConfig::gaussian(1.0),
        KernelConfig::gaussian(0.7),
        KernelConfig::linear(),
    ]
}

#[test]
fn fifty_random_pairs_match_the_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let m = rng.random_range(2..=6);
        let (da, db) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let a = random(&mut rng, &[m, da]);
        let b = random(&mut rng, &[m, db]);
        let ks = kernel_choices();
        let (ca, cb) = (ks[case % 4], ks[(case / 4) % 4]);
        let got = hsic_value(&a, &b, &ca, &cb).unwrap();
        let want = dense_hsic(&rows_of(&a), &rows_of(&b), &ca, &cb);
        assert!((got - want).abs() <= 1e-10, "case {case}: {got} vs {want}");
    }
}

#[test]
fn three_point_line_value() {
    // Recorded from the dense script before the graph version existed.
    const ORACLE: f64 = 0.200_883_006_297_129_85;
    let a = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
    let k = KernelConfig::gaussian(1.0);
    let dense = dense_hsic(&rows_of(&a), &rows_of(&a), &k, &k);
    assert!((dense - ORACLE).abs() < 1e-15);
    let got = hsic_value(&a, &a, &k, &k).unwrap();
    assert!((got - ORACLE).abs() < 1e-12, "{got}");
}

#[test]
fn gram_examples() {
    let same = Tensor::new(vec![3, 2], vec![0.4, -1.0, 0.4, -1.0, 0.4, -1.0]).unwrap();
    let k = gram_matrix(&same, &KernelConfig::gaussian_median()).unwrap();
    assert!(k.data().iter().all(|&v| v == 1.0));

    let pair = Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
    let k = gram_matrix(&pair, &KernelConfig::gaussian(5.0)).unwrap();
    assert_eq!(k.data()[0], 1.0);
    assert!((k.data()[1] - (-0.5f64).exp()).abs() < 1e-15);

    let s = 0.5f64.sqrt();
    let ortho = Tensor::new(vec![3, 3], vec![s, s, 0.0, s, -s, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let k = gram_matrix(&ortho, &KernelConfig::linear()).unwrap();
    assert!(k.max_abs_diff(&Tensor::eye(3)) < 1e-15);
}

#[test]
fn degenerate_batches_rejected() {
    let one = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    assert_eq!(
        gram_matrix(&one, &KernelConfig::default()),
        Err(Error::BatchTooSmall(1))
    );
    let a = Tensor::zeros(&[3, 2]);
    let b = Tensor::zeros(&[4, 2]);
    let k = KernelConfig::default();
    assert_eq!(hsic_value(&a, &b, &k, &k), Err(Error::BatchMismatch(3, 4)));
    assert!(KernelConfig::gaussian(0.0).validate().is_err());
    assert!(KernelConfig::gaussian(-1.0).validate().is_err());
}

#[test]
fn constant_batch_has_zero_dependence() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Tensor::full(&[5, 3], 0.25);
    let b = random(&mut rng, &[5, 2]);
    for k in kernel_choices() {
        let v = hsic_value(&a, &b, &KernelConfig::gaussian_median(), &k).unwrap();
        assert!(v.abs() < 1e-15, "{v}");
    }
}

#[test]
fn gradient_matches_differences_in_first_argument() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for &(m, d) in &[(2, 1), (4, 2), (6, 3), (5, 3)] {
        let a = random(&mut rng, &[m, d]);
        let b = random(&mut rng, &[m, 2]);
        for ka in [
            KernelConfig::gaussian_median(),
            KernelConfig::gaussian(1.0),
            KernelConfig::linear(),
        ] {
            let err = finite_diff_check(
                |g: &mut Graph, v: Var| {
                    let bv = g.constant(b.clone());
                    hsic(g, v, bv, &ka, &KernelConfig::gaussian_median())
                },
                &a,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "m={m} d={d} {ka:?}: {err:e}");
        }
    }
}

#[test]
fn channel_scores_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let m = 60;
    let labels: Vec<usize> = (0..m).map(|i| i % 3).collect();
    let y = one_hot(&labels, 3).unwrap();
    let embed = [[1.0, -0.5, 0.3, 0.8], [-0.7, 0.9, -1.1, 0.2], [0.4, 0.6, 1.0, -0.9]];
    let plane = 4;
    // Channel 0 embeds Y, channels 1-2 are noise with the same per-pixel
    // variance, channel 3 is constant and channel 4 duplicates channel 1.
    let var: f64 = embed.iter().flat_map(|r| r.iter()).map(|v| v * v).sum::<f64>() / 12.0;
    let noise_sd = var.sqrt();
    let mut data = vec![0.0; m * 5 * plane];
    for i in 0..m {
        for p in 0..plane {
            let base = i * 5 * plane;
            data[base + p] = embed[labels[i]][p];
            data[base + plane + p] = noise_sd * rng.random_range(-3f64.sqrt()..3f64.sqrt());
            data[base + 2 * plane + p] = noise_sd * rng.random_range(-3f64.sqrt()..3f64.sqrt());
            data[base + 3 * plane + p] = 0.5;
            data[base + 4 * plane + p] = data[base + plane + p];
        }
    }
    let stack = Tensor::new(vec![m, 5, 2, 2], data.clone()).unwrap();
    let lin = KernelConfig::linear();
    let scores = channel_hsic(&stack, &y, &lin, &lin).unwrap();
    assert!(scores[0] > 0.0);
    assert!(scores[0] > scores[1] && scores[0] > scores[2], "{scores:?}");
    assert!(scores[3].abs() < 1e-15);
    assert_eq!(scores[4], scores[1]);
    // Oracle for the embedded channel.
    let slab: Mat = (0..m)
        .map(|i| data[i * 5 * plane..i * 5 * plane + plane].to_vec())
        .collect();
    let want = dense_hsic(&slab, &rows_of(&y), &lin, &lin);
    assert!((scores[0] - want).abs() < 1e-10);

    let defaults = channel_hsic(
        &stack,
        &y,
        &KernelConfig::gaussian_median(),
        &KernelConfig::gaussian(1.0),
    )
    .unwrap();
    assert!(defaults.iter().all(|s| s.is_finite()));
    assert!(defaults[3].abs() < 1e-15);
}

#[test]
fn zero_channel_stack_rejected() {
    // Tensors refuse zero-sized dimensions, so an empty stack fails at
    // construction or at the channel check.
    let y = one_hot(&[0, 1], 2).unwrap();
    match Tensor::new(vec![2, 0, 1, 1], vec![]) {
        Ok(t) => assert_eq!(
            channel_hsic(&t, &y, &KernelConfig::linear(), &KernelConfig::linear()),
            Err(Error::NoChannels)
        ),
        Err(e) => assert!(matches!(e, Error::InvalidShape { .. } | Error::DataLength { .. })),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nonnegative_symmetric_and_permutation_invariant(seed in 0u64..1_000_000, m in 2usize..7, da in 1usize..4, db in 1usize..4, kind in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, da]);
        let b = random(&mut rng, &[m, db]);
        let k = kernel_choices()[kind];
        let kb = KernelConfig::gaussian_median();
        let ab = hsic_value(&a, &b, &k, &kb).unwrap();
        let ba = hsic_value(&b, &a, &kb, &k).unwrap();
        prop_assert!(ab >= -1e-10, "{ab}");
        prop_assert!((ab - ba).abs() <= 1e-12, "{ab} vs {ba}");
        let mut perm: Vec<usize> = (0..m).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let pa = hsic_value(&a.select_rows(&perm), &b.select_rows(&perm), &k, &kb).unwrap();
        prop_assert!((ab - pa).abs() <= 1e-12, "{ab} vs {pa}");
    }

    #[test]
    fn gram_is_symmetric_with_unit_diagonal(seed in 0u64..1_000_000, m in 2usize..8, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, d]);
        let k = gram_matrix(&a, &KernelConfig::gaussian_median()).unwrap();
        for i in 0..m {
            prop_assert_eq!(k.data()[i * m + i], 1.0);
            for j in 0..m {
                let v = k.data()[i * m + j];
                prop_assert!(v > 0.0 && v <= 1.0);
                prop_assert!((v - k.data()[j * m + i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn median_gram_is_scale_covariant(seed in 0u64..1_000_000, m in 2usize..8, d in 1usize..4, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, d]);
        let k1 = gram_matrix(&a, &KernelConfig::gaussian_median()).unwrap();
        let k2 = gram_matrix(&a.map(|v| v * c), &KernelConfig::gaussian_median()).unwrap();
        prop_assert!(k1.max_abs_diff(&k2) <= 1e-9, "{}", k1.max_abs_diff(&k2));
    }
}
