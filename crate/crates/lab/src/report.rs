//! Method rankings and ablation deltas from a [`ResultsTable`].

use iib_core::objectives::Method;
use serde::{Deserialize, Serialize};

use crate::grid::{Aggregate, ResultsTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub method: Method,
    pub lambda: f64,
    pub beta: f64,
    pub test_median: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub runs: usize,
}

/// Full IIB against its two ablations at matching weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub lambda: f64,
    pub beta: f64,
    pub iib: f64,
    /// `IIB_NO_INV` at the same `β`.
    pub no_inv: Option<f64>,
    /// `IIB_NO_IB` at the same `λ`.
    pub no_ib: Option<f64>,
}

impl Ablation {
    pub fn delta_no_inv(&self) -> Option<f64> {
        self.no_inv.map(|v| self.iib - v)
    }

    pub fn delta_no_ib(&self) -> Option<f64> {
        self.no_ib.map(|v| self.iib - v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset: String,
    /// Best median test accuracy first.
    pub ranking: Vec<Ranked>,
    pub ablations: Vec<Ablation>,
    pub failed_runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub datasets: Vec<DatasetReport>,
}

fn median_test(a: &Aggregate) -> Option<f64> {
    a.test.as_ref().map(|s| s.median)
}

pub fn report(table: &ResultsTable) -> Report {
    let mut names: Vec<&str> = table.aggregates.iter().map(|a| a.dataset.as_str()).collect();
    names.dedup();
    let datasets = names
        .into_iter()
        .map(|name| {
            let aggs: Vec<&Aggregate> = table.aggregates.iter().filter(|a| a.dataset == name).collect();
            let mut ranking: Vec<Ranked> = aggs
                .iter()
                .filter_map(|a| {
                    let t = a.test.as_ref()?;
                    Some(Ranked {
                        method: a.method,
                        lambda: a.lambda,
                        beta: a.beta,
                        test_median: t.median,
                        test_mean: t.mean,
                        test_std: t.std,
                        runs: a.runs,
                    })
                })
                .collect();
            ranking.sort_by(|a, b| b.test_median.total_cmp(&a.test_median).then(a.method.cmp(&b.method)));
            let find = |m: Method, l: f64, b: f64| {
                aggs.iter()
                    .find(|a| a.method == m && a.lambda == l && a.beta == b)
                    .and_then(|a| median_test(a))
            };
            let ablations = aggs
                .iter()
                .filter(|a| a.method == Method::Iib)
                .filter_map(|a| {
                    Some(Ablation {
                        lambda: a.lambda,
                        beta: a.beta,
                        iib: median_test(a)?,
                        no_inv: find(Method::IibNoInv, 0.0, a.beta),
                        no_ib: find(Method::IibNoIb, a.lambda, 0.0),
                    })
                })
                .collect();
            DatasetReport {
                dataset: name.to_string(),
                ranking,
                ablations,
                failed_runs: aggs.iter().map(|a| a.failed).sum(),
            }
        })
        .collect();
    Report { datasets }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for d in &self.datasets {
            out.push_str(&format!("== {}\n", d.dataset));
            if d.ranking.len() == 1 {
                let r = &d.ranking[0];
                out.push_str(&format!(
                    "{} (lambda {}, beta {}): {} median test accuracy over {} runs\n",
                    r.method, r.lambda, r.beta, pct(r.test_median), r.runs
                ));
            } else {
                for (i, r) in d.ranking.iter().enumerate() {
                    out.push_str(&format!(
                        "{:>2}. {:<11} lambda {:<6} beta {:<8} median {:>6}  mean {:>6} +- {:<5}  ({} runs)\n",
                        i + 1,
                        r.method.name(),
                        r.lambda,
                        r.beta,
                        pct(r.test_median),
                        pct(r.test_mean),
                        pct(r.test_std),
                        r.runs
                    ));
                }
            }
            for a in &d.ablations {
                let delta = |v: Option<f64>| v.map(|x| format!("{:+.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into());
                out.push_str(&format!(
                    "ablation lambda {} beta {}: IIB {}  vs IIB(lambda=0) {}  vs IIB(beta=0) {}\n",
                    a.lambda,
                    a.beta,
                    pct(a.iib),
                    delta(a.delta_no_inv()),
                    delta(a.delta_no_ib())
                ));
            }
            if d.failed_runs > 0 {
                out.push_str(&format!("{} failed runs excluded\n", d.failed_runs));
            }
        }
        out
    }
}
