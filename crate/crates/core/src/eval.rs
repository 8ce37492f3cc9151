//! Single-query retrieval evaluation: cosine ranking, junk filtering, CMC and mAP.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{header, read_f32, split_header};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"HBFV";
pub const FEATURE_VERSION: u32 = 1;

/// Ranks at which CMC is reported.
pub const REPORT_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    /// −1 marks junk.
    pub person_id: i64,
    pub camera_id: i64,
}

/// `N` feature rows of width `D` with per-row identity metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    data: Vec<f32>,
    meta: Vec<SampleMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureManifest {
    #[serde(rename = "D")]
    dim: usize,
    #[serde(rename = "N")]
    count: usize,
    meta: Vec<SampleMeta>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f32>, meta: Vec<SampleMeta>) -> Result<Self> {
        if dim == 0 || data.len() != dim * meta.len() {
            return Err(Error::shape("features", format!("{} values for {} rows of width {dim}", data.len(), meta.len())));
        }
        Ok(FeatureSet { dim, data, meta })
    }

    pub fn from_rows(rows: &[Vec<f32>], meta: Vec<SampleMeta>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != meta.len() || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("features", "ragged rows or row/metadata count mismatch"));
        }
        FeatureSet::new(dim, rows.concat(), meta)
    }

    /// L2-normalizes every `width`-long level of each row in place. All-zero
    /// levels are left as they are.
    pub fn normalize_levels(&mut self, width: usize) -> Result<()> {
        if width == 0 || !self.dim.is_multiple_of(width) {
            return Err(Error::shape("normalize_levels", format!("level width {width} does not divide {}", self.dim)));
        }
        for level in self.data.chunks_mut(width) {
            let n = norm(level);
            if n > 0.0 {
                level.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self) -> &[SampleMeta] {
        &self.meta
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = FeatureManifest { dim: self.dim, count: self.len(), meta: self.meta.clone() };
        let mut out = header(FEATURE_MAGIC, FEATURE_VERSION, &serde_json::to_vec(&manifest)?);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, blob) = split_header(bytes, FEATURE_MAGIC, FEATURE_VERSION)?;
        let m: FeatureManifest =
            serde_json::from_slice(manifest).map_err(|e| Error::Format(format!("bad feature manifest: {e}")))?;
        if m.count != m.meta.len() {
            return Err(Error::Format(format!("N = {} but {} metadata rows", m.count, m.meta.len())));
        }
        if blob.len() != m.dim * m.count * 4 {
            return Err(Error::Format(format!("expected {} feature bytes, found {}", m.dim * m.count * 4, blob.len())));
        }
        FeatureSet::new(m.dim, read_f32(blob), m.meta).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        FeatureSet::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Row-major |Q|×|G| cosine similarities, accumulated in `f64`.
pub fn cosine_matrix(q: &FeatureSet, g: &FeatureSet) -> Result<Vec<Vec<f64>>> {
    if q.dim != g.dim {
        return Err(Error::Eval(format!("query width {} differs from gallery width {}", q.dim, g.dim)));
    }
    let norms = |s: &FeatureSet, which: &str| -> Result<Vec<f64>> {
        (0..s.len())
            .map(|i| match norm(s.row(i)) {
                n if n > 0.0 && n.is_finite() => Ok(n),
                _ => Err(Error::Eval(format!("{which} row {i} has zero or non-finite norm"))),
            })
            .collect()
    };
    let (qn, gn) = (norms(q, "query")?, norms(g, "gallery")?);
    Ok((0..q.len())
        .map(|i| {
            let qi = q.row(i);
            (0..g.len())
                .map(|j| {
                    let dot: f64 = qi.iter().zip(g.row(j)).map(|(&a, &b)| a as f64 * b as f64).sum();
                    dot / (qn[i] * gn[j])
                })
                .collect()
        })
        .collect())
}

/// Gallery entries in rank order after protocol filtering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ranking {
    pub indices: Vec<usize>,
    /// Same person, different camera.
    pub relevant: Vec<bool>,
}

/// Sorts by descending score (ties by ascending gallery index), drops junk
/// and same-person-same-camera entries.
pub fn rank_and_filter(scores: &[f64], query: SampleMeta, gallery: &[SampleMeta]) -> Ranking {
    let mut order: Vec<usize> = (0..scores.len().min(gallery.len()))
        .filter(|&j| {
            let g = gallery[j];
            g.person_id != -1 && !(g.person_id == query.person_id && g.camera_id == query.camera_id)
        })
        .collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let relevant = order
        .iter()
        .map(|&j| gallery[j].person_id == query.person_id && gallery[j].camera_id != query.camera_id)
        .collect();
    Ranking { indices: order, relevant }
}

/// Mean of precision at each relevant position; `None` when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (i + 1) as f64;
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Fraction of queries whose first relevant match is at (1-based) rank ≤ `k`.
pub fn cmc(first_hits: &[usize], k: usize) -> f64 {
    if first_hits.is_empty() {
        return 0.0;
    }
    first_hits.iter().filter(|&&r| r <= k).count() as f64 / first_hits.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    /// CMC at ranks 1..=L, L = the largest filtered gallery size.
    pub cmc_curve: Vec<f64>,
    /// Per-query AP; `None` for skipped queries.
    pub ap: Vec<Option<f64>>,
    pub skipped: usize,
}

impl EvalReport {
    /// CMC at rank `k`; ranks past the curve count as its final value.
    pub fn cmc_at(&self, k: usize) -> f64 {
        match self.cmc_curve.len() {
            0 => 0.0,
            n => self.cmc_curve[k.clamp(1, n) - 1],
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "mAP={:.6} R1={:.6} R5={:.6} R10={:.6} R20={:.6}",
            self.map,
            self.cmc_at(1),
            self.cmc_at(5),
            self.cmc_at(10),
            self.cmc_at(20)
        )
    }
}

pub fn evaluate(q: &FeatureSet, g: &FeatureSet) -> Result<EvalReport> {
    if q.is_empty() || g.is_empty() {
        return Err(Error::Eval("query and gallery sets must be non-empty".into()));
    }
    let scores = cosine_matrix(q, g)?;
    let mut ap = Vec::with_capacity(q.len());
    let mut first_hits = Vec::new();
    let mut longest = 0;
    for (i, row) in scores.iter().enumerate() {
        let r = rank_and_filter(row, q.meta[i], &g.meta);
        longest = longest.max(r.indices.len());
        let a = average_precision(&r.relevant);
        if a.is_some() {
            first_hits.push(r.relevant.iter().position(|&x| x).expect("has a relevant entry") + 1);
        }
        ap.push(a);
    }
    let scored: Vec<f64> = ap.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::Eval("every query was skipped: no valid relevant gallery entries".into()));
    }
    let map = scored.iter().sum::<f64>() / scored.len() as f64;
    let cmc_curve = (1..=longest).map(|k| cmc(&first_hits, k)).collect();
    Ok(EvalReport { map, cmc_curve, skipped: ap.len() - scored.len(), ap })
}

/// Writes `metrics.csv` (metric,value) and `cmc_curve.csv` (rank,cmc) into `dir`.
pub fn emit_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut metrics = String::from("metric,value\n");
    metrics.push_str(&format!("mAP,{:.6}\n", report.map));
    for k in REPORT_RANKS {
        metrics.push_str(&format!("R{k},{:.6}\n", report.cmc_at(k)));
    }
    metrics.push_str(&format!("queries,{}\nskipped,{}\n", report.ap.len(), report.skipped));
    let mut curve = String::from("rank,cmc\n");
    for (i, v) in report.cmc_curve.iter().enumerate() {
        curve.push_str(&format!("{},{v:.6}\n", i + 1));
    }
    for (name, body) in [("metrics.csv", metrics), ("cmc_curve.csv", curve)] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn meta(person_id: i64, camera_id: i64) -> SampleMeta {
        SampleMeta { person_id, camera_id }
    }

    fn set(rows: &[&[f32]], m: &[(i64, i64)]) -> FeatureSet {
        FeatureSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), m.iter().map(|&(p, c)| meta(p, c)).collect())
            .unwrap()
    }

    #[test]
    fn cosine_basics() {
        let q = set(&[&[1.0, 2.0], &[3.0, 0.0]], &[(0, 0), (1, 0)]);
        let g = set(&[&[1.0, 2.0], &[0.0, 5.0], &[-2.0, 1.0]], &[(0, 1), (1, 1), (2, 1)]);
        let s = cosine_matrix(&q, &g).unwrap();
        assert!((s[0][0] - 1.0).abs() < 1e-12);
        assert!(s[0][2].abs() < 1e-12);
        let scaled = set(&[&[2.5, 5.0], &[7.5, 0.0]], &[(0, 0), (1, 0)]);
        let s2 = cosine_matrix(&scaled, &g).unwrap();
        for (a, b) in s.iter().flatten().zip(s2.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = set(&[&[0.0, 0.0]], &[(0, 0)]);
        assert!(matches!(cosine_matrix(&zero, &g), Err(Error::Eval(_))));
        let wide = set(&[&[1.0, 0.0, 0.0]], &[(0, 0)]);
        assert!(cosine_matrix(&wide, &g).is_err());
    }

    #[test]
    fn filtering_and_ties() {
        let gallery = [meta(7, 1), meta(7, 2), meta(-1, 2), meta(3, 1), meta(7, 3)];
        let r = rank_and_filter(&[0.9, 0.5, 0.95, 0.5, 0.1], meta(7, 1), &gallery);
        assert_eq!(r.indices, vec![1, 3, 4]);
        assert_eq!(r.relevant, vec![true, false, true]);
    }

    #[test]
    fn average_precision_cases() {
        assert_eq!(average_precision(&[true, true, false, false]), Some(1.0));
        let ap = average_precision(&[true, false, true, false]).unwrap();
        assert!((ap - 0.8333333333333334).abs() < 1e-9);
        assert_eq!(average_precision(&[false, false, false, true]), Some(0.25));
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn cmc_cases() {
        assert_eq!(cmc(&[1, 3], 1), 0.5);
        assert_eq!(cmc(&[1, 3], 3), 1.0);
        assert_eq!(cmc(&[1, 3], 100), 1.0);
        assert_eq!(cmc(&[1, 1, 1], 1), 1.0);
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let rows: Vec<Vec<f32>> = (0..6).map(|i| (0..4).map(|d| ((i / 2) * 4 + d) as f32 + 1.0).collect()).collect();
        let m: Vec<SampleMeta> = (0..6).map(|i| meta(i as i64 / 2, i as i64 % 2)).collect();
        let fs = FeatureSet::from_rows(&rows, m).unwrap();
        let rep = evaluate(&fs, &fs).unwrap();
        assert_eq!(rep.map, 1.0);
        assert_eq!(rep.cmc_at(1), 1.0);
        assert_eq!(rep.skipped, 0);
    }

    #[test]
    fn all_skipped_is_an_error() {
        let q = set(&[&[1.0]], &[(0, 0)]);
        let g = set(&[&[1.0]], &[(1, 1)]);
        assert!(matches!(evaluate(&q, &g), Err(Error::Eval(_))));
    }

    #[test]
    fn report_files() {
        let rep = EvalReport { map: 0.5, cmc_curve: vec![0.5, 1.0], ap: vec![Some(1.0), Some(0.0), None], skipped: 1 };
        let dir = tempfile::tempdir().unwrap();
        emit_report(&rep, dir.path()).unwrap();
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.lines().any(|l| l == "mAP,0.500000"));
        assert!(metrics.lines().any(|l| l == "R20,1.000000"));
        let curve = std::fs::read(dir.path().join("cmc_curve.csv")).unwrap();
        assert_eq!(String::from_utf8_lossy(&curve).lines().count(), 3);
        emit_report(&rep, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("cmc_curve.csv")).unwrap(), curve);
        assert_eq!(rep.summary_line(), "mAP=0.500000 R1=0.500000 R5=1.000000 R10=1.000000 R20=1.000000");
    }

    #[test]
    fn per_level_normalization() {
        let meta = vec![SampleMeta { person_id: 1, camera_id: 1 }];
        let mut f = FeatureSet::from_rows(&[vec![3.0, 4.0, 0.0, 0.0, 0.0, 2.0]], meta).unwrap();
        assert!(f.normalize_levels(4).is_err());
        f.normalize_levels(2).unwrap();
        assert_eq!(f.row(0), &[0.6, 0.8, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn feature_file_round_trip() {
        let fs = set(&[&[1.0, -2.5], &[0.125, 3.0]], &[(4, 1), (-1, 2)]);
        let bytes = fs.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"HBFV");
        assert_eq!(FeatureSet::from_bytes(&bytes).unwrap(), fs);
        assert!(FeatureSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(FeatureSet::from_bytes(&bad), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn ap_bounds(flags in prop::collection::vec(any::<bool>(), 1..40)) {
            if let Some(ap) = average_precision(&flags) {
                prop_assert!((0.0..=1.0).contains(&ap));
                let hits = flags.iter().filter(|&&f| f).count();
                let front = flags[..hits].iter().all(|&f| f);
                prop_assert_eq!(ap == 1.0, front);
            } else {
                prop_assert!(flags.iter().all(|&f| !f));
            }
        }

        #[test]
        fn cmc_curve_monotone_and_complete(
            q in prop::collection::vec((0i64..5, 0i64..3), 1..12),
            g in prop::collection::vec((-1i64..5, 0i64..3), 1..40),
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let mut next = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((state >> 33) as f32 / (1u64 << 31) as f32) + 0.01 };
            let qs = FeatureSet::new(3, (0..q.len() * 3).map(|_| next()).collect(), q.iter().map(|&(p, c)| meta(p, c)).collect()).unwrap();
            let gs = FeatureSet::new(3, (0..g.len() * 3).map(|_| next()).collect(), g.iter().map(|&(p, c)| meta(p, c)).collect()).unwrap();
            if let Ok(rep) = evaluate(&qs, &gs) {
                prop_assert!(rep.cmc_curve.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(*rep.cmc_curve.last().unwrap(), 1.0);
                prop_assert!((0.0..=1.0).contains(&rep.map));
            }
        }
    }
}
