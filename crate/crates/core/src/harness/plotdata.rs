//! Plot-ready text output. Learning curves are written in dB (`10·log10`).

use std::fmt::Write as _;

use serde::Serialize;

use super::HarnessError;
use crate::engine::TrajectoryRecord;

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// One learning curve with an optional theory line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Series {
    pub label: String,
    pub blocks: Vec<usize>,
    pub msd: Vec<f64>,
    pub theory: Option<f64>,
}

/// Wide CSV: `block`, then `<label>_db` for every series, then
/// `<label>_theory_db` for every series with a theory line.
pub fn curves_csv(series: &[Series]) -> Result<String, HarnessError> {
    let Some(first) = series.first() else {
        return Err(HarnessError::Config("no series to write".into()));
    };
    if series
        .iter()
        .any(|s| s.blocks != first.blocks || s.msd.len() != s.blocks.len())
    {
        return Err(HarnessError::Config(
            "series do not share a block grid".into(),
        ));
    }
    let mut out = String::from("block");
    for s in series {
        write!(out, ",{}_db", s.label).unwrap();
    }
    for s in series.iter().filter(|s| s.theory.is_some()) {
        write!(out, ",{}_theory_db", s.label).unwrap();
    }
    out.push('\n');
    for (i, block) in first.blocks.iter().enumerate() {
        write!(out, "{block}").unwrap();
        for s in series {
            write!(out, ",{}", to_db(s.msd[i])).unwrap();
        }
        for t in series.iter().filter_map(|s| s.theory) {
            write!(out, ",{}", to_db(t)).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Long CSV of one run: MSD, dB, fourth moment, pattern digest and,
/// when recorded, per-agent deviations.
pub fn trajectory_csv(trajectory: &TrajectoryRecord) -> String {
    let mut out = String::from("block,msd,msd_db,fourth_moment,pattern_digest");
    if trajectory.per_agent.is_some() {
        for k in 0..trajectory.agents {
            write!(out, ",agent{k}").unwrap();
        }
    }
    out.push('\n');
    for i in 0..trajectory.blocks.len() {
        write!(
            out,
            "{},{},{},{},{:016x}",
            trajectory.blocks[i],
            trajectory.msd[i],
            to_db(trajectory.msd[i]),
            trajectory.fourth[i],
            trajectory.digests[i]
        )
        .unwrap();
        if let Some(pa) = &trajectory.per_agent {
            for v in &pa[i] {
                write!(out, ",{v}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn db_scale() {
        assert_eq!(to_db(1.0), 0.0);
        assert!((to_db(0.01) + 20.0).abs() < 1e-12);
    }

    #[test]
    fn wide_csv_layout() {
        let a = Series {
            label: "a".into(),
            blocks: vec![0, 10],
            msd: vec![1.0, 0.1],
            theory: Some(0.1),
        };
        let b = Series {
            label: "b".into(),
            blocks: vec![0, 10],
            msd: vec![1.0, 10.0],
            theory: None,
        };
        let csv = curves_csv(&[a.clone(), b]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "block,a_db,b_db,a_theory_db");
        assert_eq!(lines[2], "10,-10,10,-10");
        let mut c = a.clone();
        c.blocks = vec![0, 5];
        assert!(curves_csv(&[a, c]).is_err());
    }
}
