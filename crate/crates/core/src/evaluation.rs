//! Retrieval ranking and the evaluation battery: top-k accuracy plus average
//! similarity criteria (CD and the four fitting-gap variants) over the top-k
//! ranked results.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::fitgap::FitGapMatrix;
use crate::geometry::{chamfer_distance, PointCloud};

/// Pairwise value lookup keyed by (ground-truth id, gallery id).
pub trait PairLookup {
    fn value(&self, gt_id: &str, other_id: &str) -> Result<f64>;
}

impl PairLookup for FitGapMatrix {
    fn value(&self, gt_id: &str, other_id: &str) -> Result<f64> {
        self.get_by_id(gt_id, other_id)
    }
}

/// Plain Chamfer distances from a set of ground-truth shapes to the gallery.
/// Only the needed rows are stored.
#[derive(Debug, Clone)]
pub struct CdMatrix {
    rows: HashMap<String, HashMap<String, f64>>,
}

impl CdMatrix {
    /// Computes CD(gt, gallery) for every (row, column) pair.
    pub fn build(
        rows: &[(String, PointCloud)],
        cols: &[(String, PointCloud)],
    ) -> Result<CdMatrix> {
        use rayon::prelude::*;
        let computed: Vec<(String, HashMap<String, f64>)> = rows
            .par_iter()
            .map(|(rid, rc)| {
                let mut row = HashMap::new();
                for (cid, cc) in cols {
                    row.insert(cid.clone(), chamfer_distance(rc, cc)?);
                }
                Ok((rid.clone(), row))
            })
            .collect::<Result<_>>()?;
        Ok(CdMatrix {
            rows: computed.into_iter().collect(),
        })
    }
}

impl PairLookup for CdMatrix {
    fn value(&self, gt_id: &str, other_id: &str) -> Result<f64> {
        self.rows
            .get(gt_id)
            .and_then(|r| r.get(other_id))
            .copied()
            .ok_or_else(|| Error::IncompleteMatrix {
                row: gt_id.into(),
                col: other_id.into(),
            })
    }
}

/// Sorts the gallery by ascending embedding distance; ties break on the
/// lowest id. Equals a brute-force sort.
pub fn rank_gallery(
    query: &Embedding,
    gallery: &[(String, Embedding)],
) -> Result<Vec<(String, f64)>> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("rank_gallery: empty gallery".into()));
    }
    let mut ranked: Vec<(String, f64)> = gallery
        .iter()
        .map(|(id, e)| (id.clone(), query.dist(e)))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Percentage of queries whose ground truth appears among the top k.
pub fn top_k_accuracy(
    rankings: &[Vec<(String, f64)>],
    ground_truth: &[String],
    k: usize,
) -> Result<f64> {
    if rankings.len() != ground_truth.len() || rankings.is_empty() {
        return Err(Error::InvalidArgument(
            "top_k_accuracy: rankings/ground-truth length mismatch or empty".into(),
        ));
    }
    let mut hits = 0usize;
    for (ranking, gt) in rankings.iter().zip(ground_truth) {
        if !ranking.iter().any(|(id, _)| id == gt) {
            return Err(Error::InvalidArgument(format!(
                "top_k_accuracy: ground truth {gt} missing from gallery"
            )));
        }
        if ranking.iter().take(k).any(|(id, _)| id == gt) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

/// Mean over queries of the mean criterion value between the ground truth
/// and each top-k result. CD-based criteria are reported multiplied by 1e2;
/// F-based criteria stay on their 0-100 scale.
pub fn avg_metric_at_k(
    rankings: &[Vec<(String, f64)>],
    ground_truth: &[String],
    k: usize,
    lookup: &dyn PairLookup,
    is_f_criterion: bool,
) -> Result<f64> {
    if rankings.len() != ground_truth.len() || rankings.is_empty() {
        return Err(Error::InvalidArgument(
            "avg_metric_at_k: rankings/ground-truth length mismatch or empty".into(),
        ));
    }
    let mut total = 0.0;
    for (ranking, gt) in rankings.iter().zip(ground_truth) {
        let top = ranking.iter().take(k);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (id, _) in top {
            sum += lookup.value(gt, id)?;
            count += 1;
        }
        total += sum / count as f64;
    }
    let mean = total / rankings.len() as f64;
    Ok(if is_f_criterion { mean } else { mean * 1e2 })
}

/// Per-query rankings plus aggregate metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub query_ids: Vec<String>,
    pub rankings: Vec<Vec<(String, f64)>>,
    pub acc_at: BTreeMap<usize, f64>,
    /// (criterion name, k) -> value
    pub avg_metric: BTreeMap<(String, usize), f64>,
}

impl RetrievalReport {
    pub fn build(
        query_ids: Vec<String>,
        rankings: Vec<Vec<(String, f64)>>,
        ground_truth: &[String],
        ks: &[usize],
        criteria: &[(String, &dyn PairLookup, bool)],
    ) -> Result<RetrievalReport> {
        let mut acc_at = BTreeMap::new();
        let mut avg_metric = BTreeMap::new();
        for &k in ks {
            acc_at.insert(k, top_k_accuracy(&rankings, ground_truth, k)?);
            for (name, lookup, is_f) in criteria {
                let v = avg_metric_at_k(&rankings, ground_truth, k, *lookup, *is_f)?;
                avg_metric.insert((name.clone(), k), v);
            }
        }
        Ok(RetrievalReport {
            query_ids,
            rankings,
            acc_at,
            avg_metric,
        })
    }

    /// Human-readable aligned table: one column block per criterion, one row.
    pub fn render_table(&self) -> String {
        let ks: Vec<usize> = self.acc_at.keys().copied().collect();
        let criteria: Vec<String> = {
            let mut seen = Vec::new();
            for (name, _) in self.avg_metric.keys() {
                if !seen.contains(name) {
                    seen.push(name.clone());
                }
            }
            seen
        };
        let mut out = String::new();
        let mut header = String::from("metric      ");
        for k in &ks {
            header.push_str(&format!("{:>10}", format!("t-{k}")));
        }
        out.push_str(&header);
        out.push('\n');
        let row = |label: &str, values: Vec<f64>| {
            let mut line = format!("{label:<12}");
            for v in values {
                line.push_str(&format!("{v:>10.2}"));
            }
            line.push('\n');
            line
        };
        out.push_str(&row(
            "Acc",
            ks.iter().map(|k| self.acc_at[k]).collect(),
        ));
        for name in &criteria {
            out.push_str(&row(
                &format!("Avg {name}"),
                ks.iter()
                    .map(|k| self.avg_metric[&(name.clone(), *k)])
                    .collect(),
            ));
        }
        out
    }

    /// Machine-readable records, one metric per line.
    pub fn render_records(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.acc_at {
            out.push_str(&format!("acc k={k} value={v}\n"));
        }
        for ((name, k), v) in &self.avg_metric {
            out.push_str(&format!("avg criterion={name} k={k} value={v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: Vec<f64>) -> Embedding {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Embedding {
            vector: v.into_iter().map(|x| x / n).collect(),
        }
    }

    fn axis(dim: usize, i: usize, sign: f64) -> Embedding {
        let mut v = vec![0.0; dim];
        v[i] = sign;
        emb(v)
    }

    #[test]
    fn rank_self_first() {
        let q = axis(4, 0, 1.0);
        let gallery = vec![
            ("b".to_string(), axis(4, 1, 1.0)),
            ("a".to_string(), axis(4, 0, 1.0)),
        ];
        let r = rank_gallery(&q, &gallery).unwrap();
        assert_eq!(r[0].0, "a");
        assert_eq!(r[0].1, 0.0);
    }

    #[test]
    fn rank_matches_brute_force_sort() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let gallery: Vec<(String, Embedding)> = (0..64)
            .map(|i| {
                (
                    format!("g{i:03}"),
                    emb((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()),
                )
            })
            .collect();
        let q = emb((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let r = rank_gallery(&q, &gallery).unwrap();
        let mut brute: Vec<(String, f64)> = gallery
            .iter()
            .map(|(id, e)| (id.clone(), q.dist(e)))
            .collect();
        brute.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        assert_eq!(r, brute);
        for w in r.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn rank_tie_break_by_id() {
        let q = axis(3, 0, 1.0);
        let same = axis(3, 1, 1.0);
        let gallery = vec![
            ("z".to_string(), same.clone()),
            ("a".to_string(), same.clone()),
            ("m".to_string(), same),
        ];
        let r = rank_gallery(&q, &gallery).unwrap();
        let order: Vec<&str> = r.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(order, vec!["a", "m", "z"]);
    }

    fn fake_rankings(ranks: &[usize], gallery_size: usize) -> (Vec<Vec<(String, f64)>>, Vec<String>) {
        // query i has its ground truth ("q<i>") at position ranks[i] (1-based)
        let mut rankings = Vec::new();
        let mut gts = Vec::new();
        for (i, &rank) in ranks.iter().enumerate() {
            let gt = format!("q{i}");
            let mut ranking = Vec::new();
            let mut filler = 0;
            for pos in 1..=gallery_size {
                if pos == rank {
                    ranking.push((gt.clone(), pos as f64 * 0.01));
                } else {
                    ranking.push((format!("f{i}_{filler}"), pos as f64 * 0.01));
                    filler += 1;
                }
            }
            rankings.push(ranking);
            gts.push(gt);
        }
        (rankings, gts)
    }

    #[test]
    fn top_k_examples() {
        let (r, gt) = fake_rankings(&[1, 1, 1], 12);
        assert_eq!(top_k_accuracy(&r, &gt, 1).unwrap(), 100.0);

        let (r, gt) = fake_rankings(&[6, 6], 12);
        assert_eq!(top_k_accuracy(&r, &gt, 5).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&r, &gt, 10).unwrap(), 100.0);

        let (r, gt) = fake_rankings(&[1, 2, 7, 11], 12);
        assert_eq!(top_k_accuracy(&r, &gt, 5).unwrap(), 50.0);
    }

    #[test]
    fn acc_non_decreasing_in_k() {
        let (r, gt) = fake_rankings(&[3, 8, 1, 12, 5], 12);
        let mut prev = 0.0;
        for k in 1..=12 {
            let a = top_k_accuracy(&r, &gt, k).unwrap();
            assert!(a >= prev);
            prev = a;
        }
    }

    #[test]
    fn missing_ground_truth_rejected() {
        let (r, _) = fake_rankings(&[1], 4);
        assert!(top_k_accuracy(&r, &["absent".to_string()], 1).is_err());
    }

    struct MapLookup(HashMap<(String, String), f64>);
    impl PairLookup for MapLookup {
        fn value(&self, a: &str, b: &str) -> Result<f64> {
            self.0
                .get(&(a.to_string(), b.to_string()))
                .copied()
                .ok_or_else(|| Error::IncompleteMatrix {
                    row: a.into(),
                    col: b.into(),
                })
        }
    }

    #[test]
    fn avg_metric_examples() {
        // one query, gt ranked first, k=1 -> 0
        let (r, gt) = fake_rankings(&[1], 4);
        let mut map = HashMap::new();
        map.insert((gt[0].clone(), gt[0].clone()), 0.0);
        let lk = MapLookup(map);
        assert_eq!(avg_metric_at_k(&r, &gt, 1, &lk, false).unwrap(), 0.0);

        // one query, top-2 gaps {0.01, 0.03}, k=2 -> 2.0 after x1e2
        let (r, gt) = fake_rankings(&[1], 4);
        let mut map = HashMap::new();
        map.insert((gt[0].clone(), r[0][0].0.clone()), 0.01);
        map.insert((gt[0].clone(), r[0][1].0.clone()), 0.03);
        let lk = MapLookup(map);
        let v = avg_metric_at_k(&r, &gt, 2, &lk, false).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn avg_metric_matches_scalar_recomputation() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let (r, gt) = fake_rankings(&[2, 5, 1, 9], 10);
        let mut map = HashMap::new();
        for (ranking, g) in r.iter().zip(&gt) {
            for (id, _) in ranking {
                map.insert((g.clone(), id.clone()), rng.random_range(0.0..0.1));
            }
        }
        let lk = MapLookup(map.clone());
        for k in [1, 5, 10] {
            let got = avg_metric_at_k(&r, &gt, k, &lk, false).unwrap();
            let mut expect = 0.0;
            for (ranking, g) in r.iter().zip(&gt) {
                let mut s = 0.0;
                for (id, _) in ranking.iter().take(k) {
                    s += map[&(g.clone(), id.clone())];
                }
                expect += s / k as f64;
            }
            expect = expect / r.len() as f64 * 1e2;
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn report_build_and_render() {
        let (r, gt) = fake_rankings(&[1, 3], 10);
        let mut map = HashMap::new();
        for (ranking, g) in r.iter().zip(&gt) {
            for (id, _) in ranking {
                map.insert((g.clone(), id.clone()), 0.02);
            }
        }
        let lk = MapLookup(map);
        let criteria: Vec<(String, &dyn PairLookup, bool)> =
            vec![("CD".to_string(), &lk, false)];
        let report = RetrievalReport::build(
            gt.clone(),
            r,
            &gt,
            &[1, 5],
            &criteria,
        )
        .unwrap();
        assert_eq!(report.acc_at[&1], 50.0);
        assert_eq!(report.acc_at[&5], 100.0);
        let table = report.render_table();
        assert!(table.contains("Acc"));
        assert!(table.contains("Avg CD"));
        let records = report.render_records();
        assert!(records.contains("acc k=1 value=50"));
    }
}
