//! Training-set rebalancing: random under/oversampling, SMOTE and Tomek-link cleaning.
//!
//! Every function here must only ever see training rows. Synthetic rows get
//! fresh ids at or above [`SYNTHETIC_ID_BASE`] so they can never be confused
//! with rows loaded from disk.

use std::cmp::Ordering;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{rng, sq_dist, Dataset, Matrix, Warnings};

pub const SYNTHETIC_ID_BASE: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMethod {
    #[default]
    None,
    Rus,
    /// Duplicate-row random oversampling.
    Ros,
    Smote,
    SmoteTomek,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleSpec {
    pub method: ResampleMethod,
    pub smote_k: usize,
    /// Minority/majority ratio after oversampling.
    pub target_ratio: f64,
    pub seed: u64,
}

impl Default for ResampleSpec {
    fn default() -> Self {
        Self { method: ResampleMethod::None, smote_k: 5, target_ratio: 1.0, seed: 0 }
    }
}

impl ResampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.smote_k < 1 {
            return Err(Error::InvalidHyperparameter("smote_k must be >= 1".into()));
        }
        if !(self.target_ratio > 0.0 && self.target_ratio <= 1.0) {
            return Err(Error::InvalidHyperparameter("target_ratio must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// A cross-class pair of mutual nearest neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TomekLink {
    pub majority_id: u64,
    pub minority_id: u64,
}

/// (minority label, majority label); ties make class 1 the minority.
fn class_roles(data: &Dataset) -> Result<(u8, u8)> {
    let pos = data.n_positive();
    let neg = data.n_negative();
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok(if pos <= neg { (1, 0) } else { (0, 1) })
}

fn fresh_ids(data: &Dataset, count: usize) -> Vec<u64> {
    let start = data
        .row_ids()
        .iter()
        .copied()
        .max()
        .map_or(SYNTHETIC_ID_BASE, |m| m.saturating_add(1).max(SYNTHETIC_ID_BASE));
    (0..count as u64).map(|i| start + i).collect()
}

fn synthetic_target(n_min: usize, n_maj: usize, ratio: f64) -> usize {
    ((ratio * n_maj as f64).ceil() as usize).saturating_sub(n_min)
}

pub fn resample(train: &Dataset, spec: &ResampleSpec, warnings: &mut Warnings) -> Result<Dataset> {
    spec.validate()?;
    match spec.method {
        ResampleMethod::None => Ok(train.clone()),
        ResampleMethod::Rus => random_undersample(train, spec.seed),
        ResampleMethod::Ros => random_oversample(train, spec),
        ResampleMethod::Smote => smote(train, spec, warnings),
        ResampleMethod::SmoteTomek => smote_tomek(train, spec, warnings),
    }
}

/// Drops majority rows uniformly without replacement until both classes have equal counts.
pub fn random_undersample(train: &Dataset, seed: u64) -> Result<Dataset> {
    let (minority, majority) = class_roles(train)?;
    let n_min = train.class_rows(minority).len();
    let mut maj = train.class_rows(majority);
    maj.shuffle(&mut rng(seed));
    let mut keep = vec![false; train.n_rows()];
    for i in train.class_rows(minority).into_iter().chain(maj.into_iter().take(n_min)) {
        keep[i] = true;
    }
    let idx: Vec<usize> = (0..train.n_rows()).filter(|&i| keep[i]).collect();
    Ok(train.subset(&idx))
}

/// Appends duplicated minority rows (drawn with replacement) up to the target ratio.
pub fn random_oversample(train: &Dataset, spec: &ResampleSpec) -> Result<Dataset> {
    let (minority, majority) = class_roles(train)?;
    let min_rows = train.class_rows(minority);
    let need = synthetic_target(min_rows.len(), train.class_rows(majority).len(), spec.target_ratio);
    if need == 0 {
        return Ok(train.clone());
    }
    let mut r = rng(spec.seed);
    let picks: Vec<usize> = (0..need).map(|_| *min_rows.choose(&mut r).unwrap()).collect();
    let feats = train.features().select_rows(&picks);
    train.append(&feats, &vec![minority; need], &fresh_ids(train, need))
}

/// Orders candidates by (distance, row id).
fn nearer(a: (f64, u64), b: (f64, u64)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// SMOTE: interpolates between minority rows and their minority-class nearest neighbours.
pub fn smote(train: &Dataset, spec: &ResampleSpec, warnings: &mut Warnings) -> Result<Dataset> {
    spec.validate()?;
    let (minority, majority) = class_roles(train)?;
    let min_rows = train.class_rows(minority);
    if min_rows.len() < 2 {
        return Err(Error::MinorityTooSmall(min_rows.len()));
    }
    let need = synthetic_target(min_rows.len(), train.class_rows(majority).len(), spec.target_ratio);
    if need == 0 {
        return Ok(train.clone());
    }
    let mut k = spec.smote_k;
    if k > min_rows.len() - 1 {
        k = min_rows.len() - 1;
        warnings.push(format!(
            "smote_k {} clamped to {k} ({} minority rows)",
            spec.smote_k,
            min_rows.len()
        ));
    }
    let x = train.features();
    let ids = train.row_ids();
    let neighbours: Vec<Vec<usize>> = min_rows
        .par_iter()
        .map(|&a| {
            let mut cand: Vec<(f64, u64, usize)> = min_rows
                .iter()
                .filter(|&&b| b != a)
                .map(|&b| (sq_dist(x.row(a), x.row(b)), ids[b], b))
                .collect();
            cand.sort_by(|p, q| nearer((p.0, p.1), (q.0, q.1)));
            cand.into_iter().take(k).map(|c| c.2).collect()
        })
        .collect();

    let mut r = rng(spec.seed);
    let mut synth = Matrix::zeros(need, train.n_features());
    for out in 0..need {
        let which = r.random_range(0..min_rows.len());
        let s = x.row(min_rows[which]);
        let nn = x.row(*neighbours[which].choose(&mut r).unwrap());
        let g: f64 = r.random();
        for (o, (a, b)) in synth.row_mut(out).iter_mut().zip(s.iter().zip(nn)) {
            *o = a + g * (b - a);
        }
    }
    train.append(&synth, &vec![minority; need], &fresh_ids(train, need))
}

/// Nearest neighbour of every row (ties to the lower row id), by brute force.
fn nearest_neighbours(data: &Dataset) -> Vec<usize> {
    let x = data.features();
    let ids = data.row_ids();
    (0..data.n_rows())
        .into_par_iter()
        .map(|a| {
            let mut best: Option<(f64, u64, usize)> = None;
            for b in 0..data.n_rows() {
                if b == a {
                    continue;
                }
                let cand = (sq_dist(x.row(a), x.row(b)), ids[b], b);
                if best.is_none_or(|cur| nearer((cand.0, cand.1), (cur.0, cur.1)) == Ordering::Less) {
                    best = Some(cand);
                }
            }
            best.map_or(a, |b| b.2)
        })
        .collect()
}

fn tomek_links_for(data: &Dataset, majority: u8) -> Vec<TomekLink> {
    let nn = nearest_neighbours(data);
    let labels = data.labels();
    let ids = data.row_ids();
    let mut links = Vec::new();
    for a in 0..data.n_rows() {
        let b = nn[a];
        if a < b && nn[b] == a && labels[a] != labels[b] {
            let (maj, min) = if labels[a] == majority { (a, b) } else { (b, a) };
            links.push(TomekLink { majority_id: ids[maj], minority_id: ids[min] });
        }
    }
    links
}

/// All Tomek links in `data`. The more frequent class (class 0 on ties) is the majority.
pub fn find_tomek_links(data: &Dataset) -> Result<Vec<TomekLink>> {
    let pos = data.n_positive();
    let neg = data.n_negative();
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let majority = if pos > neg { 1 } else { 0 };
    Ok(tomek_links_for(data, majority))
}

/// SMOTE followed by one pass of Tomek-link cleaning that drops only majority rows.
pub fn smote_tomek(train: &Dataset, spec: &ResampleSpec, warnings: &mut Warnings) -> Result<Dataset> {
    let (_, majority) = class_roles(train)?;
    let oversampled = smote(train, spec, warnings)?;
    let links = tomek_links_for(&oversampled, majority);
    if links.is_empty() {
        return Ok(oversampled);
    }
    let drop: std::collections::HashSet<u64> = links.iter().map(|l| l.majority_id).collect();
    let keep: Vec<usize> =
        (0..oversampled.n_rows()).filter(|&i| !drop.contains(&oversampled.row_ids()[i])).collect();
    Ok(oversampled.subset(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(rows: &[[f64; 2]], labels: &[u8]) -> Dataset {
        Dataset::from_parts(Matrix::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn rus_balances() {
        let rows: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 0.0]).collect();
        let d = ds(&rows, &[0, 0, 0, 1, 0, 0, 0, 1, 0, 0]);
        let out = random_undersample(&d, 4).unwrap();
        assert_eq!((out.n_negative(), out.n_positive()), (2, 2));
        assert!(out.row_ids().contains(&3) && out.row_ids().contains(&7));

        let bal = ds(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0], [5.0, 0.0]], &[0, 1, 0, 1, 0, 1]);
        assert_eq!(random_undersample(&bal, 9).unwrap(), bal);
        assert!(matches!(random_undersample(&ds(&[[0.0, 0.0], [1.0, 1.0]], &[0, 0]), 0), Err(Error::SingleClass)));
    }

    #[test]
    fn smote_single_segment() {
        // 3 majority, 2 minority: ratio 1.0 needs exactly one synthetic row.
        let d = ds(&[[5.0, 5.0], [6.0, 6.0], [7.0, 7.0], [0.0, 0.0], [1.0, 1.0]], &[0, 0, 0, 1, 1]);
        let spec = ResampleSpec { method: ResampleMethod::Smote, smote_k: 1, ..Default::default() };
        let out = smote(&d, &spec, &mut Warnings::new()).unwrap();
        assert_eq!(out.n_rows(), 6);
        let s = out.features().row(5);
        assert_eq!(s[0], s[1]);
        assert!((0.0..=1.0).contains(&s[0]));
        assert!(out.row_ids()[5] >= SYNTHETIC_ID_BASE);
        assert_eq!(out.subset(&[0, 1, 2, 3, 4]), d);
    }

    #[test]
    fn smote_identity_at_target_ratio() {
        let d = ds(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]], &[0, 0, 1, 1]);
        let spec = ResampleSpec { method: ResampleMethod::Smote, ..Default::default() };
        assert_eq!(smote(&d, &spec, &mut Warnings::new()).unwrap(), d);
    }

    #[test]
    fn smote_clamps_k_with_warning() {
        let d = ds(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [9.0, 9.0], [8.0, 9.0]], &[0, 0, 0, 0, 1, 1]);
        let mut w = Warnings::new();
        let out = smote(&d, &ResampleSpec { smote_k: 5, ..Default::default() }, &mut w).unwrap();
        assert_eq!(out.n_positive(), 4);
        assert_eq!(w.len(), 1);
        let tiny = ds(&[[0.0, 0.0], [1.0, 0.0], [9.0, 9.0]], &[0, 0, 1]);
        assert!(matches!(smote(&tiny, &ResampleSpec::default(), &mut w), Err(Error::MinorityTooSmall(1))));
    }

    #[test]
    fn tomek_examples() {
        let d = ds(&[[0.0, 0.0], [10.0, 10.0], [0.1, 0.0]], &[0, 0, 1]);
        assert_eq!(find_tomek_links(&d).unwrap(), vec![TomekLink { majority_id: 0, minority_id: 2 }]);

        let far = ds(&[[0.0, 0.0], [0.1, 0.0], [100.0, 100.0], [100.1, 100.0]], &[0, 0, 1, 1]);
        assert!(find_tomek_links(&far).unwrap().is_empty());

        let dup = ds(&[[3.0, 3.0], [3.0, 3.0], [9.0, 0.0], [9.5, 0.0]], &[0, 1, 0, 0]);
        assert_eq!(find_tomek_links(&dup).unwrap(), vec![TomekLink { majority_id: 0, minority_id: 1 }]);
    }

    #[test]
    fn smote_tomek_without_links_equals_smote() {
        let d = ds(
            &[[0.0, 0.0], [0.5, 0.0], [0.0, 0.5], [0.5, 0.5], [50.0, 50.0], [51.0, 50.0]],
            &[0, 0, 0, 0, 1, 1],
        );
        let spec = ResampleSpec { method: ResampleMethod::SmoteTomek, smote_k: 1, seed: 3, ..Default::default() };
        let a = smote_tomek(&d, &spec, &mut Warnings::new()).unwrap();
        let b = smote(&d, &spec, &mut Warnings::new()).unwrap();
        assert_eq!(a, b);
    }

    /// All-pairs oracle: (majority position, minority position) of every mutual 1-NN cross pair.
    fn brute_links(d: &Dataset, majority: u8) -> Vec<(usize, usize)> {
        let n = d.n_rows();
        let nn = |a: usize| {
            (0..n)
                .filter(|&b| b != a)
                .min_by(|&p, &q| {
                    let dp = sq_dist(d.features().row(a), d.features().row(p));
                    let dq = sq_dist(d.features().row(a), d.features().row(q));
                    dp.total_cmp(&dq).then(d.row_ids()[p].cmp(&d.row_ids()[q]))
                })
                .unwrap()
        };
        let mut out = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if d.labels()[a] != d.labels()[b] && nn(a) == b && nn(b) == a {
                    out.push(if d.labels()[a] == majority { (a, b) } else { (b, a) });
                }
            }
        }
        out
    }

    #[test]
    fn smote_tomek_removes_linked_majority_row() {
        // Majority row 0 at (5,1) sits beside minority row 4 at (4,1); SMOTE adds one
        // synthetic minority point, and the oracle confirms a single surviving link.
        let d = ds(
            &[[5.0, 1.0], [20.0, 20.0], [21.0, 20.0], [20.0, 21.0], [4.0, 1.0], [0.0, 0.0], [0.0, 2.0]],
            &[0, 0, 0, 0, 1, 1, 1],
        );
        let spec = ResampleSpec { method: ResampleMethod::SmoteTomek, smote_k: 1, seed: 1, ..Default::default() };
        let oversampled = smote(&d, &spec, &mut Warnings::new()).unwrap();
        assert_eq!(oversampled.n_rows(), 8);
        let oracle = brute_links(&oversampled, 0);
        assert_eq!(oracle, vec![(0, 4)]);
        assert_eq!(
            tomek_links_for(&oversampled, 0),
            vec![TomekLink { majority_id: 0, minority_id: 4 }]
        );
        let out = smote_tomek(&d, &spec, &mut Warnings::new()).unwrap();
        let keep: Vec<usize> = (1..8).collect();
        assert_eq!(out, oversampled.subset(&keep));
    }

    #[test]
    fn ros_duplicates_minority() {
        let d = ds(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [7.0, 7.0]], &[0, 0, 0, 0, 1]);
        let out = random_oversample(&d, &ResampleSpec::default()).unwrap();
        assert_eq!(out.n_positive(), 4);
        for i in 5..8 {
            assert_eq!(out.features().row(i), &[7.0, 7.0]);
        }
    }
}
