//! Classification, regression and separation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ratios in dB are clamped to this magnitude.
pub const DB_CAP: f64 = 300.0;

/// `10 log10(num / den)` clamped to `[-DB_CAP, DB_CAP]`. A zero numerator
/// maps to the lower cap, a zero denominator to the upper one.
pub fn ratio_db(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        return -DB_CAP;
    }
    if den <= 0.0 {
        return DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

pub fn to_db(x: f64) -> f64 {
    ratio_db(x, 1.0)
}

/// Rows index the true class, columns the prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { classes: c, counts: rows.concat() })
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!("{} labels, {} predictions", truth.len(), pred.len())));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Contract(format!("label pair ({truth}, {pred}) outside {} classes", self.classes)));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::InsufficientData("empty confusion matrix".into())),
            n => Ok(n as f64),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("truth\\pred");
        for c in 0..self.classes {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
        for t in 0..self.classes {
            s.push_str(&t.to_string());
            for p in 0..self.classes {
                s.push_str(&format!(",{}", self.get(t, p)));
            }
            s.push('\n');
        }
        s
    }
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty()?;
    let trace: u64 = (0..cm.classes).map(|c| cm.get(c, c)).sum();
    Ok(trace as f64 / n)
}

/// Cohen's kappa. When chance agreement is total the statistic is undefined
/// and 0 is returned.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty()?;
    let po = overall_accuracy(cm)?;
    let pe: f64 = (0..cm.classes)
        .map(|c| {
            let row: u64 = (0..cm.classes).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..cm.classes).map(|t| cm.get(t, c)).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if pe >= 1.0 {
        log::warn!("kappa undefined: chance agreement is 1; reporting 0");
        return Ok(0.0);
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Percent with two decimals, e.g. `99.87`.
pub fn percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("lengths {} and {} differ or are empty", a.len(), b.len())));
    }
    Ok(())
}

pub fn mae_metric(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn mse_metric(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Scale-invariant SDR in dB.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    same_len(estimate, reference)?;
    let rr = energy(reference);
    if rr == 0.0 {
        return Err(Error::Degenerate("reference has zero energy".into()));
    }
    let a = dot(estimate, reference) / rr;
    let target: Vec<f64> = reference.iter().map(|r| a * r).collect();
    let resid: f64 = estimate.iter().zip(&target).map(|(e, t)| (e - t) * (e - t)).sum();
    Ok(ratio_db(energy(&target), resid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BssScore {
    pub sdr_db: f64,
    pub sir_db: f64,
    pub sar_db: f64,
    pub si_sdr_db: f64,
    pub mse: f64,
    pub mse_db: f64,
}

/// Orthogonal split of an estimate against a reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct BssDecomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
}

/// Solves `a x = b` for a small dense system by Gaussian elimination with
/// partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).expect("nonempty");
        if a[p][c].abs() <= 1e-12 * scale {
            return Err(Error::Degenerate("reference set is linearly dependent".into()));
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for c in (0..n).rev() {
        let s: f64 = (c + 1..n).map(|k| a[c][k] * x[k]).sum();
        x[c] = (b[c] - s) / a[c][c];
    }
    Ok(x)
}

/// Projection-form decomposition of `estimate` with `references[target]` as
/// the true source.
pub fn bss_decompose(estimate: &[f64], references: &[&[f64]], target: usize) -> Result<BssDecomposition> {
    if target >= references.len() {
        return Err(Error::Contract(format!("target {target} outside {} references", references.len())));
    }
    for r in references {
        same_len(estimate, r)?;
        if energy(r) == 0.0 {
            return Err(Error::Degenerate("reference has zero energy".into()));
        }
    }
    let t = references[target];
    let a = dot(estimate, t) / energy(t);
    let s_target: Vec<f64> = t.iter().map(|x| a * x).collect();
    let gram: Vec<Vec<f64>> = references.iter().map(|ri| references.iter().map(|rj| dot(ri, rj)).collect()).collect();
    let rhs: Vec<f64> = references.iter().map(|r| dot(r, estimate)).collect();
    let c = solve(gram, rhs)?;
    let mut p_all = vec![0.0; estimate.len()];
    for (ck, r) in c.iter().zip(references) {
        for (p, x) in p_all.iter_mut().zip(r.iter()) {
            *p += ck * x;
        }
    }
    let e_interf = p_all.iter().zip(&s_target).map(|(p, s)| p - s).collect();
    let e_artif = estimate.iter().zip(&p_all).map(|(e, p)| e - p).collect();
    Ok(BssDecomposition { s_target, e_interf, e_artif })
}

/// BSS-Eval ratios, SI-SDR and MSE of `estimate` against
/// `references[target]`. Complex signals are passed as interleaved I/Q.
pub fn bss_eval(estimate: &[f64], references: &[&[f64]], target: usize) -> Result<BssScore> {
    let d = bss_decompose(estimate, references, target)?;
    let st = energy(&d.s_target);
    let ei = energy(&d.e_interf);
    let ea = energy(&d.e_artif);
    let distortion: f64 = d.e_interf.iter().zip(&d.e_artif).map(|(i, a)| (i + a) * (i + a)).sum();
    let signal: f64 = d.s_target.iter().zip(&d.e_interf).map(|(s, i)| (s + i) * (s + i)).sum();
    let mse = mse_metric(estimate, references[target])?;
    Ok(BssScore {
        sdr_db: ratio_db(st, distortion),
        sir_db: ratio_db(st, ei),
        sar_db: ratio_db(signal, ea),
        si_sdr_db: si_sdr(estimate, references[target])?,
        mse,
        mse_db: to_db(mse),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    #[test]
    fn accuracy_and_kappa_oracles() {
        let half = ConfusionMatrix::from_rows(&[vec![1, 1], vec![1, 1]]).unwrap();
        assert_eq!(overall_accuracy(&half).unwrap(), 0.5);
        assert_eq!(kappa(&half).unwrap(), 0.0);
        let diag = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 9]]).unwrap();
        assert_eq!(overall_accuracy(&diag).unwrap(), 1.0);
        assert_eq!(kappa(&diag).unwrap(), 1.0);
        assert!(overall_accuracy(&ConfusionMatrix::new(3)).is_err());
        assert!(kappa(&ConfusionMatrix::new(3)).is_err());
        assert_eq!(percent(0.99871), "99.87");
    }

    #[test]
    fn single_class_kappa_is_zero() {
        let cm = ConfusionMatrix::from_rows(&[vec![4, 0], vec![0, 0]]).unwrap();
        assert_eq!(kappa(&cm).unwrap(), 0.0);
    }

    #[test]
    fn kappa_brute_force() {
        let mut r = crate::rng::rng(1, &[]);
        for _ in 0..200 {
            let c = r.random_range(2..6);
            let rows: Vec<Vec<u64>> = (0..c).map(|_| (0..c).map(|_| r.random_range(0..20)).collect()).collect();
            let cm = ConfusionMatrix::from_rows(&rows).unwrap();
            let n: f64 = rows.iter().flatten().sum::<u64>() as f64;
            if n == 0.0 {
                continue;
            }
            let po = (0..c).map(|i| rows[i][i] as f64).sum::<f64>() / n;
            let mut pe = 0.0;
            for k in 0..c {
                let row: f64 = rows[k].iter().sum::<u64>() as f64 / n;
                let col: f64 = rows.iter().map(|x| x[k]).sum::<u64>() as f64 / n;
                pe += row * col;
            }
            let k = (po - pe) / (1.0 - pe);
            assert!((kappa(&cm).unwrap() - k).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_metrics() {
        assert_eq!(mae_metric(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let p = [1.5, 2.5, -0.5];
        let t = [1.0, 2.0, -1.0];
        assert_eq!(mae_metric(&p, &t).unwrap(), 0.5);
        assert_eq!(mse_metric(&p, &t).unwrap(), 0.25);
        assert!(mse_metric(&p, &t[..2]).is_err());
        assert!((to_db(0.01) + 20.0).abs() < 1e-12);
    }

    #[test]
    fn si_sdr_oracles() {
        assert!((si_sdr(&[1.0, 0.1], &[1.0, 0.0]).unwrap() - 20.0).abs() < 1e-9);
        let r = [0.3, -1.0, 2.0];
        for a in [0.5, 10.0] {
            let e: Vec<f64> = r.iter().map(|x| a * x).collect();
            assert_eq!(si_sdr(&e, &r).unwrap(), DB_CAP);
        }
        assert!(matches!(si_sdr(&[1.0], &[0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn bss_eval_oracles() {
        let r1 = [1.0, 0.0, 0.0];
        let r2 = [0.0, 1.0, 0.0];
        let exact = bss_eval(&r1, &[&r1], 0).unwrap();
        assert_eq!((exact.sdr_db, exact.sir_db), (DB_CAP, DB_CAP));
        let e = [1.0, 0.1, 0.0];
        let s = bss_eval(&e, &[&r1, &r2], 0).unwrap();
        assert!((s.sir_db - 20.0).abs() < 1e-9);
        assert_eq!(s.sar_db, DB_CAP);
        assert!(matches!(bss_eval(&e, &[&r1, &[0.0; 3]], 0), Err(Error::Degenerate(_))));
        assert!(matches!(bss_eval(&e, &[&r1, &r1], 0), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn energy_identity(seed in any::<u64>(), n in 8usize..64) {
            let mut r = crate::rng::rng(seed, &[]);
            let mut v = || (0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let (e, a, b) = (v(), v(), v());
            let d = bss_decompose(&e, &[&a, &b], 0).unwrap();
            let total = energy(&e);
            let parts = energy(&d.s_target) + energy(&d.e_interf) + energy(&d.e_artif);
            prop_assert!((total - parts).abs() <= 1e-8 * total);
        }

        #[test]
        fn si_sdr_scale_invariance(seed in any::<u64>()) {
            let mut r = crate::rng::rng(seed, &[]);
            let mut v = || (0..32).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let (e, rf) = (v(), v());
            let base = si_sdr(&e, &rf).unwrap();
            for a in [0.1, 10.0] {
                let s: Vec<f64> = e.iter().map(|x| a * x).collect();
                prop_assert!((si_sdr(&s, &rf).unwrap() - base).abs() < 1e-6);
            }
        }
    }
}
