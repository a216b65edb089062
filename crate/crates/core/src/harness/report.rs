use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{ensure, Error, Result};

use super::records::{stage, ExperimentRecord};

/// Mean and population standard deviation of test accuracy over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub regime: String,
    pub k: usize,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
    /// `(dataset_seed, selected_cell)` in seed order.
    pub selected: Vec<(u64, String)>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups successful test rows by `(regime, k)`.
pub fn aggregate(records: &[ExperimentRecord]) -> Result<Vec<Aggregate>> {
    ensure!(!records.is_empty(), Argument, "no records to aggregate");
    let mut groups: BTreeMap<(String, usize), Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.ok() && r.stage == stage::TEST) {
        let (Some(regime), Some(k), Some(_)) = (&r.regime, r.k, r.test_accuracy) else {
            return Err(Error::Consistency(format!("test row {} lacks regime, k or accuracy", r.cell_id)));
        };
        groups.entry((regime.clone(), k)).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((regime, k), mut rows)| {
            rows.sort_by_key(|r| r.dataset_seed);
            let accs: Vec<f64> = rows.iter().filter_map(|r| r.test_accuracy).collect();
            let (mean, std) = mean_std(&accs);
            let selected = rows.iter().map(|r| (r.dataset_seed, r.selected_cell.clone().unwrap_or_default())).collect();
            Aggregate { regime, k, seeds: rows.len(), mean, std, selected }
        })
        .collect())
}

/// Text tables plus the data files written by [`render_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    pub fid_vs_k: String,
    pub accuracy_vs_ns: String,
    pub semi_vs_sup: String,
}

const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
# Plots the data files next to this script. Requires pandas and matplotlib.
import pathlib
import matplotlib.pyplot as plt
import pandas as pd

here = pathlib.Path(__file__).parent
fid = pd.read_csv(here / "fid_vs_k.csv")
fig, ax = plt.subplots()
for regime, g in fid.groupby("regime"):
    ax.errorbar(g["k"], g["fid_mean"], yerr=g["fid_std"], label=regime, marker="o")
ax.set_xscale("log"); ax.set_xlabel("k"); ax.set_ylabel("FID"); ax.legend()
fig.savefig(here / "fid_vs_k.png", dpi=150)

acc = pd.read_csv(here / "accuracy_vs_ns.csv")
for (regime, k), g in acc.groupby(["regime", "k"]):
    fig, ax = plt.subplots()
    ax.plot(g["n_s"], g["valid_accuracy"], marker="o", label="valid")
    ax.plot(g["n_s"], g["fake_valid_accuracy"], marker="s", label="fake valid")
    ax.set_xlabel("n_s"); ax.set_ylabel("accuracy"); ax.set_title(f"{regime}, k={k}"); ax.legend()
    fig.savefig(here / f"accuracy_vs_ns_{regime.replace('+', '_')}_k{k}.png", dpi=150)

semi = pd.read_csv(here / "semi_vs_sup.csv")
fig, ax = plt.subplots()
ax.plot(semi["k"], semi["gan"], marker="o", label="gan")
ax.plot(semi["k"], semi["gan_semi"], marker="s", label="gan+semi")
ax.set_xscale("log"); ax.set_xlabel("k"); ax.set_ylabel("test accuracy"); ax.legend()
fig.savefig(here / "semi_vs_sup.png", dpi=150)
"#;

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Builds the summary tables and, when `out_dir` is given, writes
/// `report.txt`, the three CSV data files and `plot.py` into it.
pub fn render_report(records: &[ExperimentRecord], out_dir: Option<&Path>) -> Result<Report> {
    let aggs = aggregate(records)?;
    let mut text = String::new();
    writeln!(text, "Test accuracy (mean ± population std over seeds)").unwrap();
    writeln!(text, "{:<14} {:>5} {:>6} {:>9} {:>9}", "regime", "k", "seeds", "mean", "std").unwrap();
    for a in &aggs {
        writeln!(text, "{:<14} {:>5} {:>6} {:>9.4} {:>9.4}", a.regime, a.k, a.seeds, a.mean, a.std).unwrap();
    }
    writeln!(text, "\nSelected cells").unwrap();
    for a in &aggs {
        for (seed, cell) in &a.selected {
            writeln!(text, "{} k={} seed={seed}: {cell}", a.regime, a.k).unwrap();
        }
    }
    let mut failed: Vec<&ExperimentRecord> = records.iter().filter(|r| !r.ok()).collect();
    failed.sort_by(|a, b| (&a.cell_id, &a.stage).cmp(&(&b.cell_id, &b.stage)));
    if !failed.is_empty() {
        writeln!(text, "\nFailed cells").unwrap();
        for r in failed {
            writeln!(text, "{} [{}]: {}", r.cell_id, r.stage, r.error.as_deref().unwrap_or("")).unwrap();
        }
    }

    // Best FID per (seed, k, regime) among GAN cells, then mean/std over seeds.
    let mut best_fid: BTreeMap<(String, usize, u64), f64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.ok() && r.stage == stage::FINETUNE_GAN) {
        if let (Some(regime), Some(k), Some(fid)) = (&r.regime, r.k, r.fid) {
            let e = best_fid.entry((regime.clone(), k, r.dataset_seed)).or_insert(f64::INFINITY);
            *e = e.min(fid);
        }
    }
    let mut fid_groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for ((regime, k, _), fid) in best_fid {
        fid_groups.entry((regime, k)).or_default().push(fid);
    }
    let mut fid_vs_k = String::from("regime,k,seeds,fid_mean,fid_std\n");
    for ((regime, k), fids) in &fid_groups {
        let (m, s) = mean_std(fids);
        writeln!(fid_vs_k, "{regime},{k},{},{m:.6},{s:.6}", fids.len()).unwrap();
    }

    let mut ns_groups: BTreeMap<(String, usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.ok() && r.stage == stage::FINETUNE_CLASSIFIER) {
        if let (Some(regime), Some(k), Some(n_s), Some(v)) = (&r.regime, r.k, r.n_s, r.valid_accuracy) {
            let g = ns_groups.entry((regime.clone(), k, n_s)).or_default();
            g.0.push(v);
            g.1.extend(r.fake_valid_accuracy);
        }
    }
    let mut accuracy_vs_ns = String::from("regime,k,n_s,valid_accuracy,fake_valid_accuracy\n");
    for ((regime, k, n_s), (v, f)) in &ns_groups {
        let fake = (!f.is_empty()).then(|| mean_std(f).0);
        writeln!(accuracy_vs_ns, "{regime},{k},{n_s},{:.6},{}", mean_std(v).0, fmt_opt(fake)).unwrap();
    }

    let by_key: BTreeMap<(&str, usize), f64> = aggs.iter().map(|a| ((a.regime.as_str(), a.k), a.mean)).collect();
    let mut ks: Vec<usize> = aggs.iter().filter(|a| a.regime.starts_with("gan")).map(|a| a.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut semi_vs_sup = String::from("k,gan,gan_semi\n");
    for k in ks {
        writeln!(semi_vs_sup, "{k},{},{}", fmt_opt(by_key.get(&("gan", k)).copied()), fmt_opt(by_key.get(&("gan+semi", k)).copied())).unwrap();
    }

    let report = Report { text, fid_vs_k, accuracy_vs_ns, semi_vs_sup };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        for (name, body) in [
            ("report.txt", &report.text),
            ("fid_vs_k.csv", &report.fid_vs_k),
            ("accuracy_vs_ns.csv", &report.accuracy_vs_ns),
            ("semi_vs_sup.csv", &report.semi_vs_sup),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(Error::io(&p))?;
        }
        let p = dir.join("plot.py");
        std::fs::write(&p, PLOT_SCRIPT).map_err(Error::io(&p))?;
    }
    Ok(report)
}
