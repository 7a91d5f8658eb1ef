use cdsl_lab::diffcore::{Tape, Tensor};
use cdsl_lab::labeler::{list_size, softmax_from, t2pl_from, LabelerConfig};
use cdsl_lab::memory::ExemplarMemory;
use cdsl_lab::nets::{softmax, Model, ModelSpec};
use cdsl_lab::protocol::{compute_metrics, AccuracyMatrix, MetricsReport};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn square_matrix() -> impl Strategy<Value = AccuracyMatrix> {
    (1usize..7).prop_flat_map(|t| {
        prop::collection::vec(prop::collection::vec(0.0f64..=1.0, t), t).prop_map(move |rows| AccuracyMatrix {
            domains: (0..t).map(|j| format!("d{j}")).collect(),
            rows,
        })
    })
}

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn metrics_follow_triangles(m in square_matrix()) {
        let r = compute_metrics(&m).unwrap();
        let t = m.domains.len();
        for j in 0..t {
            prop_assert_eq!(r.tda[j], m.rows[j][j]);
            prop_assert_eq!(r.tdg[j].is_none(), j == 0);
            prop_assert_eq!(r.fa[j].is_none(), j + 1 == t);
            if let Some(g) = r.tdg[j] {
                let want = (0..j).map(|k| m.rows[k][j]).sum::<f64>() / j as f64;
                prop_assert!((g - want).abs() < 1e-12);
            }
            if let Some(f) = r.fa[j] {
                let want = (j + 1..t).map(|k| m.rows[k][j]).sum::<f64>() / (t - j - 1) as f64;
                prop_assert!((f - want).abs() < 1e-12);
            }
        }
        for v in [r.avg_tdg, Some(r.avg_tda), r.avg_fa].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(MetricsReport::from_csv(&r.to_csv()).unwrap(), r);
    }

    #[test]
    fn list_size_stays_in_range(n in 1usize..500, k in 1usize..10, r in 1.0f64..50.0) {
        match list_size(n, k, r) {
            Ok(m) => {
                prop_assert!(n >= k);
                prop_assert!((1..=n).contains(&m));
                let raw = (n as f64 / (r * k as f64)).floor() as usize;
                prop_assert_eq!(m, raw.max(1));
            }
            Err(_) => prop_assert!(n < k),
        }
    }

    #[test]
    fn labels_are_valid_classes(z in mat(24, 3), f in mat(24, 5)) {
        let p = softmax(&z);
        let cfg = LabelerConfig { r_top: 2.0, r_top_prime: 4.0, ..LabelerConfig::default() };
        let labels = t2pl_from(&f, &p, &cfg).unwrap();
        prop_assert_eq!(labels.len(), 24);
        prop_assert!(labels.iter().all(|&l| l < 3));
        for (i, &l) in softmax_from(&p).iter().enumerate() {
            prop_assert!(p.row(i).iter().all(|&v| v <= p.at(i, l)));
        }
    }

    #[test]
    fn standardized_rows_are_centered(x in mat(4, 6)) {
        let mut t = Tape::new();
        let v = t.leaf(x);
        let y = t.row_standardize(v, 1e-5).unwrap();
        for r in 0..4 {
            let row = t.value(y).row(r);
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-9);
            prop_assert!(row.iter().map(|v| v * v).sum::<f64>() / 6.0 <= 1.0 + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn memory_holds_its_quota(capacity in 8usize..80, sizes in prop::collection::vec(4usize..40, 1..6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec { input_dim: 3, hidden: vec![4], bottleneck: None, classes: 2 };
        let model = Model::init(spec, &mut rng).unwrap();
        let mut mem = ExemplarMemory::new(capacity);
        for (t, &n) in sizes.iter().enumerate() {
            let data = Tensor::matrix(n, 3, (0..n * 3).map(|i| ((i * 7 + t) % 11) as f64 / 11.0).collect()).unwrap();
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let res = mem.admit_domain(&model, &data, &labels, t);
            if capacity / (t + 1) == 0 {
                prop_assert!(res.is_err());
                return Ok(());
            }
            res.unwrap();
            let quota = capacity / (t + 1);
            prop_assert!(mem.len() <= capacity);
            for (d, bucket) in mem.buckets() {
                prop_assert!(d <= t);
                prop_assert!(bucket.len() <= quota);
                prop_assert!(bucket.iter().all(|e| e.domain_id == d));
            }
            prop_assert_eq!(mem.bucket(t).len(), quota.min(n));
        }
    }
}
