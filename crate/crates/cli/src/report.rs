use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use fpdetect::injection::{read_trials_csv, CampaignMode, TrialRecord};
use serde::Serialize;

/// Detection statistics of one benchmark and mode within one input file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateRow {
    pub input: String,
    pub benchmark: String,
    pub mode: CampaignMode,
    pub trials: usize,
    pub reached: usize,
    pub manifested: usize,
    pub detected: usize,
    pub protected_manifested: usize,
    pub protected_detected: usize,
    pub rate_protected: Option<f64>,
    pub rate_unprotected: Option<f64>,
    pub false_positives: usize,
}

fn row(input: &str, benchmark: &str, mode: CampaignMode, records: &[&TrialRecord]) -> RateRow {
    let count = |f: &dyn Fn(&TrialRecord) -> bool| records.iter().filter(|r| f(r)).count();
    let rate = |prot: bool| {
        let m = count(&|r| r.manifested && r.protected == prot);
        (m > 0).then(|| count(&|r| r.manifested && r.detected && r.protected == prot) as f64 / m as f64)
    };
    RateRow {
        input: input.to_string(),
        benchmark: benchmark.to_string(),
        mode,
        trials: records.len(),
        reached: count(&|r| r.reached),
        manifested: count(&|r| r.manifested),
        detected: count(&|r| r.detected),
        protected_manifested: count(&|r| r.manifested && r.protected),
        protected_detected: count(&|r| r.manifested && r.protected && r.detected),
        rate_protected: rate(true),
        rate_unprotected: rate(false),
        false_positives: count(&|r| r.detected && !r.manifested),
    }
}

/// One row per input file, benchmark and mode, in input order.
pub fn aggregate(inputs: &[PathBuf]) -> Result<Vec<RateRow>> {
    let mut rows = Vec::new();
    for path in inputs {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let records = read_trials_csv(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
        let mut groups: BTreeMap<(String, String), (CampaignMode, Vec<&TrialRecord>)> = BTreeMap::new();
        for r in &records {
            let key = (r.benchmark.clone(), format!("{:?}", r.mode));
            groups.entry(key).or_insert_with(|| (r.mode, Vec::new())).1.push(r);
        }
        let name = path.display().to_string();
        rows.extend(groups.into_iter().map(|((bench, _), (mode, recs))| row(&name, &bench, mode, &recs)));
    }
    Ok(rows)
}

pub fn write_csv(out: &mut dyn Write, rows: &[RateRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
