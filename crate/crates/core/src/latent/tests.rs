use super::*;
use crate::progae::ModelConfig;
use crate::trajdata::{base_helix, SyntheticConfig};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, dims: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

fn emb(rows: Vec<Vec<f64>>) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows(rows).unwrap()
}

fn mat_of(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

fn sample_cov(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let ma = a.row_mean();
    let mb = b.row_mean();
    DMatrix::from_fn(a.ncols(), b.ncols(), |i, j| {
        (0..n).map(|r| (a[(r, i)] - ma[i]) * (b[(r, j)] - mb[j])).sum::<f64>() / (n - 1) as f64
    })
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, sorted descending.
fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let mut rot = DMatrix::identity(n, n);
                rot[(p, p)] = c;
                rot[(q, q)] = c;
                rot[(p, q)] = s;
                rot[(q, p)] = -s;
                a = rot.transpose() * a * &rot;
            }
        }
    }
    let mut v: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    v.sort_by(|x, y| y.total_cmp(x));
    v
}

/// Squared canonical correlations as eigenvalues of
/// `L⁻¹ Cxy Cyy⁻¹ Cyx L⁻ᵀ` with `Cxx = L Lᵀ`.
fn cca_oracle(x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<f64> {
    let (xm, ym) = (mat_of(x), mat_of(y));
    let cxx = sample_cov(&xm, &xm) + DMatrix::identity(x[0].len(), x[0].len()) * RIDGE;
    let cyy = sample_cov(&ym, &ym) + DMatrix::identity(y[0].len(), y[0].len()) * RIDGE;
    let cxy = sample_cov(&xm, &ym);
    let l = cxx.cholesky().unwrap().l();
    let linv = l.try_inverse().unwrap();
    let cyy_inv = cyy.try_inverse().unwrap();
    let m = &linv * &cxy * cyy_inv * cxy.transpose() * linv.transpose();
    let r = x[0].len().min(y[0].len());
    jacobi_eigenvalues((&m + m.transpose()) * 0.5)
        .into_iter()
        .take(r)
        .map(|v| v.max(0.0).sqrt())
        .collect()
}

#[test]
fn cca_identical_embeddings_are_fully_correlated() {
    let x = gaussian(200, 4, 1);
    let r = run_cca(&emb(x.clone()), &emb(x)).unwrap();
    assert_eq!(r.correlations.len(), 4);
    for c in &r.correlations {
        assert!((c - 1.0).abs() < 1e-6, "{c}");
    }
}

#[test]
fn cca_independent_noise_is_uncorrelated() {
    let x = gaussian(1000, 4, 2);
    let y = gaussian(1000, 4, 3);
    let r = run_cca(&emb(x.clone()), &emb(y.clone())).unwrap();
    assert!(r.leading() < 0.2, "{}", r.leading());
    let oracle = cca_oracle(&x, &y);
    for (a, b) in r.correlations.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn cca_matches_two_by_two_closed_form() {
    // Rows whose sample covariance equals `sigma` exactly.
    let sigma = DMatrix::from_row_slice(
        4,
        4,
        &[
            2.0, 0.3, 0.8, 0.1, //
            0.3, 1.0, 0.2, 0.4, //
            0.8, 0.2, 1.5, -0.2, //
            0.1, 0.4, -0.2, 1.2,
        ],
    );
    let z = mat_of(&gaussian(50, 4, 4));
    let zc = {
        let m = z.row_mean();
        DMatrix::from_fn(50, 4, |i, j| z[(i, j)] - m[j])
    };
    let lz = sample_cov(&zc, &zc).cholesky().unwrap().l();
    let white = &zc * lz.try_inverse().unwrap().transpose();
    let data = white * sigma.clone().cholesky().unwrap().l().transpose();
    let rows = |c0: usize| -> Vec<Vec<f64>> { (0..50).map(|i| vec![data[(i, c0)], data[(i, c0 + 1)]]).collect() };
    let r = run_cca(&emb(rows(0)), &emb(rows(2))).unwrap();

    let sxx = sigma.view((0, 0), (2, 2)).into_owned();
    let syy = sigma.view((2, 2), (2, 2)).into_owned();
    let sxy = sigma.view((0, 2), (2, 2)).into_owned();
    let m = sxx.try_inverse().unwrap() * &sxy * syy.try_inverse().unwrap() * sxy.transpose();
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = (tr * tr / 4.0 - det).sqrt();
    let expected = [(tr / 2.0 + disc).sqrt(), (tr / 2.0 - disc).sqrt()];
    for (a, b) in r.correlations.iter().zip(expected) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn cca_transforms_whiten_and_correlate() {
    let x = gaussian(300, 3, 5);
    let noise = gaussian(300, 5, 6);
    let y: Vec<Vec<f64>> = x
        .iter()
        .zip(&noise)
        .map(|(a, n)| vec![a[0] + 0.3 * n[0], a[1] - a[2] + n[1], n[2], 0.5 * a[2] + n[3], n[4]])
        .collect();
    let r = run_cca(&emb(x.clone()), &emb(y.clone())).unwrap();
    assert_eq!((r.a.shape(), r.b.shape()), ((3, 3), (5, 5)));
    let (xm, ym) = (mat_of(&x), mat_of(&y));
    let (u, v) = (&xm * &r.a, &ym * &r.b);
    let cu = sample_cov(&u, &u);
    let cv = sample_cov(&v, &v);
    let cuv = sample_cov(&u, &v);
    assert!((cu - DMatrix::identity(3, 3)).amax() < 1e-6);
    assert!((cv - DMatrix::identity(5, 5)).amax() < 1e-6);
    for k in 0..3 {
        assert!((cuv[(k, k)] - r.correlations[k]).abs() < 1e-6);
    }
    assert!(r.correlations.windows(2).all(|w| w[0] >= w[1]));
    for (a, b) in r.correlations.iter().zip(cca_oracle(&x, &y)) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn cca_rejects_short_or_mismatched_inputs() {
    assert!(run_cca(&emb(gaussian(4, 4, 7)), &emb(gaussian(4, 2, 8))).is_err());
    assert!(run_cca(&emb(gaussian(20, 2, 7)), &emb(gaussian(21, 2, 8))).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cca_is_affine_invariant(seed in 0u64..1000, shift in -5.0f64..5.0) {
        let x = gaussian(120, 3, seed);
        let noise = gaussian(120, 2, seed + 1);
        let y: Vec<Vec<f64>> = x.iter().zip(&noise).map(|(a, n)| vec![a[0] + n[0], a[1] * 0.5 + n[1]]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let mut m = DMatrix::<f64>::from_fn(3, 3, |_, _| rng.random_range(-0.5..0.5));
        m += DMatrix::identity(3, 3) * 2.0;
        let xm = mat_of(&x) * m;
        let x2: Vec<Vec<f64>> = (0..120).map(|i| xm.row(i).iter().map(|v| v + shift).collect()).collect();
        let a = run_cca(&emb(x), &emb(y.clone())).unwrap();
        let b = run_cca(&emb(x2), &emb(y)).unwrap();
        for (p, q) in a.correlations.iter().zip(&b.correlations) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn classifier_is_translation_and_scale_invariant(seed in 0u64..1000, scale in 0.1f64..10.0, shift in -3.0f64..3.0) {
        let train = gaussian(3, 4, seed);
        let test = gaussian(30, 4, seed + 1);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let tr = emb(train.clone()).with_labels(vec![0, 1, 2]).unwrap();
        let te = emb(test.clone()).with_labels(labels.clone()).unwrap();
        let map = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter().map(|r| r.iter().map(|v| scale * v + shift).collect()).collect()
        };
        let tr2 = emb(map(&train)).with_labels(vec![0, 1, 2]).unwrap();
        let te2 = emb(map(&test)).with_labels(labels).unwrap();
        let ex: Vec<(usize, Vec<f64>)> = train.iter().cloned().enumerate().collect();
        let ex2: Vec<(usize, Vec<f64>)> = map(&train).into_iter().enumerate().collect();
        for (p, q) in test.iter().zip(map(&test)) {
            prop_assert_eq!(nearest_class(&ex, p), nearest_class(&ex2, &q));
        }
        prop_assert_eq!(one_shot_classifier(&tr, &te).unwrap(), one_shot_classifier(&tr2, &te2).unwrap());
    }

    #[test]
    fn probe_is_invariant_to_affine_property_rescaling(seed in 0u64..1000, a in 0.01f64..100.0, b in -50.0f64..50.0, flip in proptest::bool::ANY) {
        let x = gaussian(80, 3, seed);
        let noise = gaussian(80, 1, seed + 9);
        let y: Vec<f64> = x.iter().zip(&noise).map(|(r, n)| r[0] - 2.0 * r[2] + n[0]).collect();
        let a = if flip { -a } else { a };
        let y2: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let e1 = regression_probe(&emb(x.clone()), &y, seed).unwrap();
        let e2 = regression_probe(&emb(x), &y2, seed).unwrap();
        prop_assert!((e1 - e2).abs() < 1e-6 * e1.max(1.0));
        prop_assert!(e1 >= 0.0);
    }

    #[test]
    fn pca_scores_are_orthogonal(seed in 0u64..1000) {
        let raw = gaussian(60, 6, seed);
        let mixed: Vec<Vec<f64>> = raw.iter().map(|r| vec![r[0], r[0] + 0.5 * r[1], r[2] * 3.0, r[3] - r[4], r[5] * 0.1, r[1] + r[2]]).collect();
        let fit = fit_pca(&emb(mixed), 4).unwrap();
        let s = fit.scores.to_matrix();
        let gram = s.transpose() * &s / 59.0;
        for i in 0..4 {
            prop_assert!((gram[(i, i)] - fit.explained_variance[i]).abs() < 1e-8 * fit.explained_variance[0].max(1.0));
            for j in 0..4 {
                if i != j {
                    prop_assert!(gram[(i, j)].abs() < 1e-8);
                }
            }
        }
    }
}

#[test]
fn classifier_simple_cases() {
    let ex = vec![(0, vec![-1.0, -1.0]), (1, vec![1.0, 1.0])];
    assert_eq!(nearest_class(&ex, &[0.9, 0.9]), 1);
    assert_eq!(nearest_class(&ex, &[-1.0, -1.0]), 0);
    assert_eq!(nearest_class(&ex, &[1.0, -1.0]), 0, "ties go to the lowest class");
    let rev = vec![(1, vec![1.0, 1.0]), (0, vec![-1.0, -1.0])];
    assert_eq!(nearest_class(&rev, &[0.0, 0.0]), 0);

    let tr = emb(vec![vec![-1.0, -1.0], vec![1.0, 1.0]]).with_labels(vec![0, 1]).unwrap();
    let te = emb(vec![vec![0.9, 0.9], vec![-1.0, -1.0], vec![-0.5, -0.1]]).with_labels(vec![1, 0, 1]).unwrap();
    assert!((one_shot_classifier(&tr, &te).unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn classifier_rejects_bad_training_sets() {
    let te = emb(vec![vec![0.0]]).with_labels(vec![2]).unwrap();
    let tr = emb(vec![vec![-1.0], vec![1.0]]).with_labels(vec![0, 1]).unwrap();
    assert!(one_shot_classifier(&tr, &te).is_err(), "absent class");
    let dup = emb(vec![vec![-1.0], vec![1.0]]).with_labels(vec![0, 0]).unwrap();
    assert!(one_shot_classifier(&dup, &te.clone().with_labels(vec![0]).unwrap()).is_err());
    let single = emb(vec![vec![-1.0]]).with_labels(vec![0]).unwrap();
    assert!(one_shot_classifier(&single, &te.with_labels(vec![0]).unwrap()).is_err());
}

#[test]
fn regression_probe_edge_cases() {
    let x = gaussian(50, 3, 11);
    assert!(regression_probe(&emb(x.clone()), &[4.2; 50], 0).is_err());
    let y: Vec<f64> = x.iter().map(|r| 3.0 * r[0] - r[1] + 0.25 * r[2] + 7.0).collect();
    assert!(regression_probe(&emb(x.clone()), &y, 0).unwrap() < 1e-6);
    assert!(regression_probe(&emb(x.clone()), &y[..49], 0).is_err());
    let pure_noise: Vec<f64> = gaussian(50, 1, 12).into_iter().map(|r| r[0]).collect();
    let e = regression_probe(&emb(x), &pure_noise, 0).unwrap();
    assert!(e > 0.5, "{e}");
}

#[test]
fn pca_matches_jacobi_oracle() {
    for seed in 0..20 {
        let raw = gaussian(40, 6, 100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix = DMatrix::<f64>::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let xm = mat_of(&raw) * mix;
        let rows: Vec<Vec<f64>> = (0..40).map(|i| xm.row(i).iter().copied().collect()).collect();
        let oracle = jacobi_eigenvalues(sample_cov(&xm, &xm));
        let fit = fit_pca(&emb(rows), 4).unwrap();
        for k in 0..4 {
            assert!((fit.explained_variance[k] - oracle[k]).abs() < 1e-8 * oracle[0].max(1.0));
        }
        for c in fit.components.column_iter() {
            let lead = c.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(lead > 0.0);
        }
    }
}

#[test]
fn pca_full_rank_reproduces_centered_data() {
    let x = gaussian(30, 4, 13);
    let fit = fit_pca(&emb(x.clone()), 4).unwrap();
    let back = fit.scores.to_matrix() * fit.components.transpose();
    let xm = mat_of(&x);
    let mean = xm.row_mean();
    for i in 0..30 {
        for j in 0..4 {
            assert!((back[(i, j)] - (xm[(i, j)] - mean[j])).abs() < 1e-10);
        }
    }
}

#[test]
fn pca_rank_one_puts_all_variance_first() {
    let t = gaussian(25, 1, 14);
    let rows: Vec<Vec<f64>> = t.iter().map(|r| vec![r[0], -2.0 * r[0], 0.5 * r[0]]).collect();
    let fit = fit_pca(&emb(rows), 3).unwrap();
    assert!(fit.explained_variance[0] > 1.0);
    assert!(fit.explained_variance[1].abs() < 1e-12 && fit.explained_variance[2].abs() < 1e-12);
    let s = fit.scores.to_matrix();
    assert!(s.column(1).amax() < 1e-10 && s.column(2).amax() < 1e-10);
}

#[test]
fn pca_rejects_too_few_features() {
    assert!(fit_pca(&emb(gaussian(40, 3, 15)), 4).is_err());
}

#[test]
fn embedding_csv_and_select() {
    let m = EmbeddingMatrix::new(vec![vec![0.5, -1.0], vec![2.0, 3.0]], vec![7, 9])
        .unwrap()
        .with_labels(vec![1, 0])
        .unwrap();
    assert_eq!(m.to_csv("z"), "frame_index,label,z0,z1\n7,1,0.5,-1\n9,0,2,3\n");
    let s = m.select(&[1]);
    assert_eq!((s.row(0), s.frame_indices[0], s.labels.clone()), (&[2.0, 3.0][..], 9, Some(vec![0])));
    assert!(EmbeddingMatrix::new(vec![vec![f64::NAN]], vec![0]).is_err());
    assert!(EmbeddingMatrix::new(vec![vec![1.0]], vec![0, 1]).is_err());
}

fn small_model() -> (ProGaeModel, Vec<Point3>, Vec<Point3>) {
    let cfg = SyntheticConfig {
        atom_count: 16,
        class_count: 2,
        frames_per_class: 3,
        seed: 21,
        ..SyntheticConfig::default()
    };
    let ds = crate::trajdata::generate_synthetic(&cfg).unwrap();
    let model = ProGaeModel::init(ModelConfig::new(16, 3), &base_helix(16, cfg.spacing)).unwrap();
    let a = ds.frames.iter().find(|f| f.label_id == 0).unwrap().coords.clone();
    let b = ds.frames.iter().find(|f| f.label_id == 1).unwrap().coords.clone();
    (model, a, b)
}

#[test]
fn interpolation_endpoints_match_reconstruction() {
    let (model, a, b) = small_model();
    let path = interpolate_latent(&model, &a, &b, INTERP_STEPS).unwrap();
    assert_eq!(path.len(), 11);
    assert!((path[1].alpha - 0.1).abs() < 1e-15 && path[10].alpha == 1.0);
    let ra = model.reconstruct(&a, 0.5).unwrap().rmsd;
    let rb = model.reconstruct(&b, 0.5).unwrap().rmsd;
    assert!((path[0].rmsd_to_a - ra).abs() < 1e-9);
    assert!((path[10].rmsd_to_b - rb).abs() < 1e-9);
    let csv = interp_to_csv(&path);
    assert_eq!(csv.lines().count(), 12);
}

#[test]
fn interpolation_between_identical_codes_is_constant() {
    let (model, a, _) = small_model();
    let path = interpolate_latent(&model, &a, &a, 5).unwrap();
    for s in &path {
        assert_eq!(s.coords, path[0].coords);
        assert_eq!(s.rmsd_to_a, s.rmsd_to_b);
    }
}

#[test]
fn interpolation_refines_smoothly() {
    let (model, a, b) = small_model();
    let max_step = |steps: usize| -> f64 {
        let path = interpolate_latent(&model, &a, &b, steps).unwrap();
        path.windows(2)
            .map(|w| {
                w[0].coords
                    .iter()
                    .zip(&w[1].coords)
                    .map(|(p, q)| crate::geom::dist(p, q).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    };
    let (s11, s21, s41) = (max_step(11), max_step(21), max_step(41));
    assert!(s11.is_finite() && s11 < 100.0);
    assert!(s21 < s11 && s41 < s21, "{s11} {s21} {s41}");
}

#[test]
fn interpolation_rejects_bad_inputs() {
    let (model, a, b) = small_model();
    assert!(interpolate_latent(&model, &a, &b[..15], 11).is_err());
    assert!(interpolate_latent(&model, &a, &b, 1).is_err());
}

#[test]
fn extrinsic_features_are_unit_bonds() {
    let frames: Vec<ConformationFrame> = (0..3).map(|_| ConformationFrame::new(base_helix(10, 3.8))).collect();
    let refs: Vec<&ConformationFrame> = frames.iter().collect();
    let f = extrinsic_features(&refs).unwrap();
    assert_eq!((f.rows(), f.dims()), (3, 27));
    for c in f.row(0).chunks(3) {
        assert!((c.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
