//! Classification metrics, robustness curves over missing rates and the
//! area under the indicator line chart (AUILC).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{binary_of_class, Sample};
use crate::error::{Error, Result};
use crate::masking::{apply_masks, generate, mix_seed, MissingSpec, Modalities, Scenario};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc2: f64,
    /// Support-weighted F1 over the two binary classes.
    pub f1: f64,
    /// Seven-class accuracy; absent for binary models.
    pub acc7: Option<f64>,
    /// Binary confusion counts `[[tn, fp], [fn, tp]]`.
    pub confusion: [[usize; 2]; 2],
}

/// Percent metrics for class-index predictions under `cls` classes.
pub fn metrics(predictions: &[usize], labels: &[usize], cls: usize) -> Result<MetricReport> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(cls == 2 || cls == 7) {
        return Err(Error::InvalidArgument(format!("unsupported class count {cls}")));
    }
    let n = labels.len() as f64;
    let mut confusion = [[0usize; 2]; 2];
    let mut exact = 0usize;
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= cls || y >= cls {
            return Err(Error::InvalidArgument(format!("class index out of range for {cls} classes")));
        }
        confusion[binary_of_class(y, cls)][binary_of_class(p, cls)] += 1;
        exact += usize::from(p == y);
    }
    let correct = confusion[0][0] + confusion[1][1];
    let mut f1 = 0.0;
    for c in 0..2 {
        let tp = confusion[c][c] as f64;
        let predicted = (confusion[0][c] + confusion[1][c]) as f64;
        let support = (confusion[c][0] + confusion[c][1]) as f64;
        let denom = predicted + support;
        if denom > 0.0 {
            f1 += support / n * (2.0 * tp / denom);
        }
    }
    Ok(MetricReport {
        acc2: 100.0 * correct as f64 / n,
        f1: 100.0 * f1,
        acc7: (cls == 7).then(|| 100.0 * exact as f64 / n),
        confusion,
    })
}

/// Metric values over increasing missing rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub rates: Vec<f64>,
    pub values: Vec<f64>,
}

impl EvalCurve {
    pub fn new(rates: Vec<f64>, values: Vec<f64>) -> Self {
        Self { rates, values }
    }
}

/// Trapezoidal area of a curve whose rates run from 0 to 1.
pub fn auilc(curve: &EvalCurve) -> Result<f64> {
    let bad = |m: String| Err(Error::InvalidCurve(m));
    let (p, v) = (&curve.rates, &curve.values);
    if p.len() != v.len() {
        return bad(format!("{} rates but {} values", p.len(), v.len()));
    }
    if p.len() < 2 {
        return bad("at least two points are required".into());
    }
    if p.iter().chain(v).any(|x| !x.is_finite()) {
        return bad("non-finite entry".into());
    }
    if p.windows(2).any(|w| w[1] <= w[0]) {
        return bad("rates must be strictly increasing".into());
    }
    const SPAN_TOL: f64 = 1e-9;
    if p[0].abs() > SPAN_TOL || (p[p.len() - 1] - 1.0).abs() > SPAN_TOL {
        return bad(format!("rates span [{}, {}], expected [0, 1]", p[0], p[p.len() - 1]));
    }
    Ok(p.windows(2)
        .zip(v.windows(2))
        .map(|(p, v)| 0.5 * (v[0] + v[1]) * (p[1] - p[0]))
        .sum())
}

/// Parses `start:end:step` or a comma-separated list of rates.
pub fn parse_rates(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("invalid rate list `{spec}`"));
    let rates: Vec<f64> = if spec.contains(':') {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, end, step] = parts[..] else {
            return Err(bad());
        };
        if step <= 0.0 || end < start {
            return Err(bad());
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
            .collect()
    } else {
        spec.split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if rates.is_empty() || rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::InvalidArgument(format!(
            "rates must lie in [0, 1]: `{spec}`"
        )));
    }
    Ok(rates)
}

/// Anything that maps one sample to a class index.
pub trait Predictor {
    fn cls(&self) -> usize;
    fn predict(&self, sample: &Sample) -> Result<usize>;
}

#[derive(Clone, Debug)]
pub struct RobustnessSpec {
    pub scenario: Scenario,
    pub rates: Vec<f64>,
    pub smm_keep: Option<Modalities>,
    pub seed: u64,
    /// Independent mask draws per rate; metrics are averaged over draws.
    pub repeats: usize,
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub scenario: String,
    pub rate: f64,
    pub acc2: f64,
    pub f1: f64,
    pub acc7: Option<f64>,
}

fn rate_key(rate: f64) -> u64 {
    (rate * 1e9).round() as u64
}

/// Evaluates one trained predictor at every rate, corrupting each sample
/// with a mask seeded by (seed, rate, draw, sample index).
pub fn run_robustness_eval<P: Predictor + ?Sized>(
    model: &P,
    samples: &[Sample],
    spec: &RobustnessSpec,
) -> Result<Vec<CurveRow>> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if spec.repeats == 0 {
        return Err(Error::InvalidArgument("mask repeats must be positive".into()));
    }
    let cls = model.cls();
    let labels: Vec<usize> = samples.iter().map(|s| s.label(cls)).collect();
    let mut rows = Vec::with_capacity(spec.rates.len());
    for &rate in &spec.rates {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("rate {rate} outside [0, 1]")));
        }
        let mut acc = (0.0, 0.0, 0.0);
        for draw in 0..spec.repeats {
            let base = mix_seed(mix_seed(spec.seed, rate_key(rate)), draw as u64);
            let mut preds = Vec::with_capacity(samples.len());
            for (j, s) in samples.iter().enumerate() {
                let ms = match spec.scenario {
                    Scenario::Smm => MissingSpec::smm(spec.smm_keep.ok_or_else(|| {
                        Error::InvalidArgument("smm needs a keep set".into())
                    })?),
                    sc => MissingSpec::new(sc, rate, mix_seed(base, j as u64)),
                };
                let masks = generate(&ms, s.lengths())?;
                let corrupted = if masks.is_identity() {
                    s.clone()
                } else {
                    apply_masks(s, &masks)?
                };
                preds.push(model.predict(&corrupted)?);
            }
            let m = metrics(&preds, &labels, cls)?;
            acc.0 += m.acc2;
            acc.1 += m.f1;
            acc.2 += m.acc7.unwrap_or(0.0);
        }
        let k = spec.repeats as f64;
        rows.push(CurveRow {
            scenario: spec.scenario.to_string(),
            rate,
            acc2: acc.0 / k,
            f1: acc.1 / k,
            acc7: (cls == 7).then_some(acc.2 / k),
        });
    }
    Ok(rows)
}

pub fn write_csv(rows: &[CurveRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<CurveRow>, _>>()?;
    Ok(rows)
}

/// Per-scenario AUILC of each metric column; `None` where a metric is absent.
pub type AuilcSummary = BTreeMap<String, BTreeMap<String, Option<f64>>>;

pub fn summarize_auilc(rows: &[CurveRow]) -> Result<AuilcSummary> {
    let mut by_scenario: BTreeMap<&str, Vec<&CurveRow>> = BTreeMap::new();
    for r in rows {
        by_scenario.entry(&r.scenario).or_default().push(r);
    }
    let mut out = AuilcSummary::new();
    for (scenario, mut rs) in by_scenario {
        rs.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        let rates: Vec<f64> = rs.iter().map(|r| r.rate).collect();
        let curve = |f: &dyn Fn(&CurveRow) -> f64| auilc(&EvalCurve::new(rates.clone(), rs.iter().map(|r| f(r)).collect()));
        let mut m = BTreeMap::new();
        m.insert("acc2".to_string(), Some(curve(&|r| r.acc2)?));
        m.insert("f1".to_string(), Some(curve(&|r| r.f1)?));
        let acc7 = if rs.iter().all(|r| r.acc7.is_some()) {
            Some(curve(&|r| r.acc7.unwrap_or(0.0))?)
        } else {
            None
        };
        m.insert("acc7".to_string(), acc7);
        out.insert(scenario.to_string(), m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MOSI_ACC2: [f64; 11] = [86.4, 83.8, 81.7, 80.6, 76.7, 73.2, 70.1, 65.9, 60.2, 56.6, 57.8];

    fn tenths() -> Vec<f64> {
        parse_rates("0:1:0.1").unwrap()
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&[0, 1, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!((m.acc2, m.f1, m.acc7), (100.0, 100.0, None));
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i < 7)).collect();
        let m = metrics(&[1; 10], &labels, 2).unwrap();
        assert!((m.acc2 - 70.0).abs() < 1e-12);
        let m = metrics(&[1, 1, 0, 0], &[1, 0, 1, 0], 2).unwrap();
        assert_eq!(m.confusion, [[1, 1], [1, 1]]);
        assert!((m.f1 - 50.0).abs() < 1e-12);
        let m = metrics(&[6, 3, 0], &[6, 4, 1], 7).unwrap();
        assert!((m.acc2 - 100.0).abs() < 1e-12);
        assert!((m.acc7.unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert!(metrics(&[], &[], 2).is_err());
        assert!(metrics(&[2], &[0], 2).is_err());
    }

    #[test]
    fn auilc_examples() {
        assert!((auilc(&EvalCurve::new(vec![0.0, 1.0], vec![80.0, 80.0])).unwrap() - 80.0).abs() < 1e-12);
        assert!((auilc(&EvalCurve::new(vec![0.0, 1.0], vec![80.0, 60.0])).unwrap() - 70.0).abs() < 1e-12);
        let a = auilc(&EvalCurve::new(tenths(), MOSI_ACC2.to_vec())).unwrap();
        assert!((a - 72.09).abs() < 1e-9, "{a}");
        assert!((a - 72.1).abs() <= 0.05);
    }

    #[test]
    fn auilc_rejects_bad_curves() {
        assert!(auilc(&EvalCurve::new(vec![0.0], vec![1.0])).is_err());
        assert!(auilc(&EvalCurve::new(vec![0.0, 0.6, 0.5, 1.0], vec![1.0; 4])).is_err());
        assert!(auilc(&EvalCurve::new(vec![0.1, 1.0], vec![1.0; 2])).is_err());
        assert!(auilc(&EvalCurve::new(vec![0.0, 0.9], vec![1.0; 2])).is_err());
        assert!(auilc(&EvalCurve::new(vec![0.0, 1.0], vec![1.0])).is_err());
    }

    #[test]
    fn auilc_properties() {
        let base = EvalCurve::new(vec![0.0, 0.4, 1.0], vec![90.0, 50.0, 70.0]);
        let a = auilc(&base).unwrap();
        assert!((50.0..=90.0).contains(&a));
        // A collinear midpoint changes nothing.
        let mid = EvalCurve::new(vec![0.0, 0.2, 0.4, 1.0], vec![90.0, 70.0, 50.0, 70.0]);
        assert!((auilc(&mid).unwrap() - a).abs() < 1e-12);
        let doubled = EvalCurve::new(base.rates.clone(), base.values.iter().map(|v| 2.0 * v).collect());
        assert!((auilc(&doubled).unwrap() - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn rate_parsing() {
        let r = tenths();
        assert_eq!(r.len(), 11);
        assert_eq!(r[3], 0.3);
        assert_eq!(r[10], 1.0);
        assert_eq!(parse_rates("0,0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_rates("0:2:0.5").is_err());
        assert!(parse_rates("0:1:0").is_err());
        assert!(parse_rates("x").is_err());
    }

    #[test]
    fn csv_round_trip_and_summary() {
        let rows: Vec<CurveRow> = tenths()
            .into_iter()
            .zip(MOSI_ACC2)
            .map(|(rate, v)| CurveRow {
                scenario: "rmfm".into(),
                rate,
                acc2: v,
                f1: 50.0,
                acc7: None,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_csv(&rows, &p).unwrap();
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("scenario,rate,acc2,f1,acc7\n"));
        let back = read_csv(&p).unwrap();
        assert_eq!(back, rows);
        let s = summarize_auilc(&back).unwrap();
        assert!((s["rmfm"]["acc2"].unwrap() - 72.09).abs() < 1e-9);
        assert_eq!(s["rmfm"]["acc7"], None);
    }
}
