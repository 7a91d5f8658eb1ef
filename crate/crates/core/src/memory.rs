//! Fixed-capacity exemplar memory with an equal quota per seen domain.
//!
//! After `t` domains have been admitted every bucket holds at most `⌊|M|/t⌋`
//! exemplars, chosen as the samples closest to their own class centroid in
//! representation space.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    pub input: Vec<f64>,
    pub label: usize,
    pub domain_id: usize,
    /// Distance to the class centroid when the exemplar was admitted.
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarMemory {
    capacity: usize,
    buckets: BTreeMap<usize, Vec<Exemplar>>,
}

/// Per-class nearest-to-centroid order: `(sample, distance)` ascending.
pub fn rank_by_centroid(features: &Tensor, labels: &[usize], classes: usize) -> Vec<Vec<(usize, f64)>> {
    let d = features.cols();
    (0..classes)
        .map(|c| {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                return Vec::new();
            }
            let mut centroid = vec![0.0; d];
            for &i in &members {
                for (a, f) in centroid.iter_mut().zip(features.row(i)) {
                    *a += f;
                }
            }
            centroid.iter_mut().for_each(|a| *a /= members.len() as f64);
            let mut ranked: Vec<(usize, f64)> = members
                .into_iter()
                .map(|i| {
                    let dist = features.row(i).iter().zip(&centroid).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    (i, dist)
                })
                .collect();
            ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            ranked
        })
        .collect()
}

impl ExemplarMemory {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, buckets: BTreeMap::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domain_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn bucket(&self, domain_id: usize) -> &[Exemplar] {
        self.buckets.get(&domain_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn buckets(&self) -> impl Iterator<Item = (usize, &[Exemplar])> {
        self.buckets.iter().map(|(&d, b)| (d, b.as_slice()))
    }

    /// All exemplars, bucket by bucket.
    pub fn iter(&self) -> impl Iterator<Item = &Exemplar> {
        self.buckets.values().flatten()
    }

    pub fn quota(&self, domains: usize) -> usize {
        if domains == 0 {
            self.capacity
        } else {
            self.capacity / domains
        }
    }

    /// Truncates every bucket to `⌊|M|/t⌋`, keeping the smallest distances.
    pub fn rebalance(&mut self, domains: usize) {
        let quota = self.quota(domains.max(1));
        for bucket in self.buckets.values_mut() {
            bucket.sort_by(|a, b| a.distance.total_cmp(&b.distance));
            bucket.truncate(quota);
        }
    }

    /// Stores the samples of one domain nearest to their class centroids,
    /// taking classes round-robin until the new quota is filled.
    pub fn admit_domain(&mut self, model: &Model, data: &Tensor, labels: &[usize], domain_id: usize) -> Result<()> {
        if labels.len() != data.rows() {
            return Err(Error::shape("admit_domain", format!("{} labels for {} rows", labels.len(), data.rows())));
        }
        let domains = self.buckets.len() + usize::from(!self.buckets.contains_key(&domain_id));
        let quota = self.quota(domains);
        if quota == 0 {
            return Err(Error::ZeroQuota { capacity: self.capacity, domains });
        }
        let features = model.features(data)?;
        let ranked = rank_by_centroid(&features, labels, model.classes());
        let mut chosen = Vec::with_capacity(quota);
        let mut depth = 0;
        'fill: loop {
            let mut any = false;
            for per_class in &ranked {
                if let Some(&(i, dist)) = per_class.get(depth) {
                    any = true;
                    chosen.push(Exemplar { input: data.row(i).to_vec(), label: labels[i], domain_id, distance: dist });
                    if chosen.len() == quota {
                        break 'fill;
                    }
                }
            }
            if !any {
                break;
            }
            depth += 1;
        }
        self.buckets.insert(domain_id, chosen);
        self.rebalance(domains);
        Ok(())
    }

    /// Uniform draw without replacement, or with replacement when `n` exceeds
    /// the number stored.
    pub fn replay_batch(&self, n: usize, rng: &mut impl Rng) -> Vec<Exemplar> {
        let all: Vec<&Exemplar> = self.iter().collect();
        if all.is_empty() || n == 0 {
            return Vec::new();
        }
        if n <= all.len() {
            index::sample(rng, all.len(), n).into_iter().map(|i| all[i].clone()).collect()
        } else {
            (0..n).map(|_| all[rng.gen_range(0..all.len())].clone()).collect()
        }
    }

    /// CSV rows `domain_id,label,distance,input...` with 17 significant digits.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let dim = self.iter().next().map(|e| e.input.len()).unwrap_or(0);
        let mut header = String::from("domain_id,label,distance");
        for j in 0..dim {
            header.push_str(&format!(",x{j}"));
        }
        writeln!(w, "{header}")?;
        for e in self.iter() {
            write!(w, "{},{},{:.16e}", e.domain_id, e.label, e.distance)?;
            for v in &e.input {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv(capacity: usize, r: impl BufRead) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "memory CSV", detail };
        let mut mem = Self::new(capacity);
        for (n, line) in r.lines().enumerate().skip(1) {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 3 {
                return Err(bad(format!("line {}: expected at least 3 fields", n + 1)));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("line {}: {e}", n + 1)));
            let int = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(format!("line {}: {e}", n + 1)));
            let e = Exemplar {
                domain_id: int(fields[0])?,
                label: int(fields[1])?,
                distance: num(fields[2])?,
                input: fields[3..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            };
            mem.buckets.entry(e.domain_id).or_default().push(e);
        }
        if mem.len() > capacity {
            return Err(bad(format!("{} exemplars exceed capacity {capacity}", mem.len())));
        }
        Ok(mem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Model whose representation equals its (nonnegative) 2-d input.
    fn identity_model(classes: usize) -> Model {
        let spec = ModelSpec { input_dim: 2, hidden: vec![2], bottleneck: None, classes };
        let mut m = Model::init(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let w = &mut m.params_mut()[0].tensor;
        w.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        m
    }

    fn points(rows: &[[f64; 2]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn quota_follows_domain_count() {
        let mem = ExemplarMemory::new(200);
        assert_eq!(mem.quota(1), 200);
        assert_eq!(mem.quota(2), 100);
        assert_eq!(mem.quota(3), 66);
    }

    #[test]
    fn single_class_keeps_nearest_to_mean() {
        let data = points(&[[0.0, 0.0], [10.0, 0.0], [4.0, 0.0], [5.0, 1.0], [6.0, 0.0], [1.0, 0.0]]);
        // mean = (4.333.., 0.1666..)
        let mut mem = ExemplarMemory::new(3);
        mem.admit_domain(&identity_model(1), &data, &[0; 6], 0).unwrap();
        let mut kept: Vec<Vec<f64>> = mem.bucket(0).iter().map(|e| e.input.clone()).collect();
        kept.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(kept, vec![vec![4.0, 0.0], vec![5.0, 1.0], vec![6.0, 0.0]]);
    }

    #[test]
    fn round_robin_balances_classes() {
        let data = points(&[[0.0, 0.0], [0.2, 0.0], [0.1, 0.1], [9.0, 9.0], [9.1, 9.0], [9.0, 9.2], [9.5, 9.5]]);
        let labels = [0, 0, 0, 1, 1, 1, 1];
        let mut mem = ExemplarMemory::new(4);
        mem.admit_domain(&identity_model(2), &data, &labels, 0).unwrap();
        let per_class = |c| mem.bucket(0).iter().filter(|e| e.label == c).count();
        assert_eq!((per_class(0), per_class(1)), (2, 2));
    }

    #[test]
    fn later_domains_shrink_earlier_buckets() {
        let model = identity_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mem = ExemplarMemory::new(10);
        for d in 0..4 {
            let data = Tensor::matrix(20, 2, (0..40).map(|_| rng.gen_range(0.0..5.0)).collect()).unwrap();
            let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
            mem.admit_domain(&model, &data, &labels, d).unwrap();
            let t = d + 1;
            assert!(mem.len() <= 10);
            for (_, b) in mem.buckets() {
                assert!(b.len() <= 10 / t);
            }
        }
    }

    #[test]
    fn zero_quota_is_an_error() {
        let model = identity_model(1);
        let mut mem = ExemplarMemory::new(1);
        mem.admit_domain(&model, &points(&[[0.0, 0.0]]), &[0], 0).unwrap();
        let err = mem.admit_domain(&model, &points(&[[1.0, 0.0]]), &[0], 1).unwrap_err();
        assert!(matches!(err, Error::ZeroQuota { capacity: 1, domains: 2 }));
    }

    #[test]
    fn rebalance_keeps_smallest_distances() {
        let mut mem = ExemplarMemory::new(6);
        let dists = [0.9, 0.1, 0.5, 0.3, 0.7, 0.2];
        mem.buckets.insert(
            0,
            dists.iter().map(|&d| Exemplar { input: vec![d], label: 0, domain_id: 0, distance: d }).collect(),
        );
        mem.rebalance(2);
        let kept: Vec<f64> = mem.bucket(0).iter().map(|e| e.distance).collect();
        assert_eq!(kept, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn replay_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let empty = ExemplarMemory::new(5);
        assert!(empty.replay_batch(3, &mut rng).is_empty());
        let mut mem = ExemplarMemory::new(4);
        mem.admit_domain(&identity_model(1), &points(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]), &[0; 4], 0).unwrap();
        assert!(mem.replay_batch(0, &mut rng).is_empty());
        let mut all: Vec<f64> = mem.replay_batch(4, &mut rng).iter().map(|e| e.input[0]).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(mem.replay_batch(9, &mut rng).len(), 9);
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = Tensor::matrix(12, 2, (0..24).map(|_| rng.gen_range(0.0..1.0) / 3.0).collect()).unwrap();
        let mut mem = ExemplarMemory::new(6);
        mem.admit_domain(&identity_model(2), &data, &(0..12).map(|i| i % 2).collect::<Vec<_>>(), 3).unwrap();
        let mut buf = Vec::new();
        mem.write_csv(&mut buf).unwrap();
        let back = ExemplarMemory::read_csv(6, buf.as_slice()).unwrap();
        assert_eq!(back, mem);
        assert!(ExemplarMemory::read_csv(2, buf.as_slice()).is_err());
    }

    #[test]
    fn selection_matches_exhaustive_sort() {
        let model = identity_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data = Tensor::matrix(30, 2, (0..60).map(|_| rng.gen_range(0.0..4.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..30).map(|_| rng.gen_range(0..3)).collect();
        let mut mem = ExemplarMemory::new(9);
        mem.admit_domain(&model, &data, &labels, 0).unwrap();
        for c in 0..3 {
            let idx: Vec<usize> = (0..30).filter(|&i| labels[i] == c).collect();
            let n = idx.len() as f64;
            let mean: Vec<f64> = (0..2).map(|j| idx.iter().map(|&i| data.at(i, j)).sum::<f64>() / n).collect();
            let mut all: Vec<f64> = idx
                .iter()
                .map(|&i| ((data.at(i, 0) - mean[0]).powi(2) + (data.at(i, 1) - mean[1]).powi(2)).sqrt())
                .collect();
            all.sort_by(f64::total_cmp);
            let mut got: Vec<f64> = mem.bucket(0).iter().filter(|e| e.label == c).map(|e| e.distance).collect();
            got.sort_by(f64::total_cmp);
            assert_eq!(got.len(), 3);
            for (g, w) in got.iter().zip(&all) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn replay_is_uniform() {
        let mut mem = ExemplarMemory::new(10);
        let data = Tensor::matrix(10, 2, (0..20).map(|v| v as f64).collect()).unwrap();
        mem.admit_domain(&identity_model(1), &data, &[0; 10], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2022);
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            let e = &mem.replay_batch(1, &mut rng)[0];
            counts[(e.input[0] / 2.0) as usize] += 1;
        }
        let expected = 1000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 9 degrees of freedom, p = 0.01
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }
}
