//! Raw sample dump: one comma-separated record per sample under a fixed header.
//!
//! ```text
//! run,class,input_idx,rep,duration_ns
//! 0,0,0,0,10412.5
//! ```
//!
//! Durations use the shortest decimal that round-trips the `f64`.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

use super::{DistributionSet, TimingDistribution, TimingTrace};

pub const DUMP_HEADER: &str = "run,class,input_idx,rep,duration_ns";

pub fn write_dump<W: Write>(set: &DistributionSet, mut out: W) -> Result<()> {
    writeln!(out, "{DUMP_HEADER}")?;
    // run-major order mirrors the collection schedule
    for run in 0..set.runs {
        for class in 0..set.classes {
            let Some(dist) = set.get(class, run) else {
                continue;
            };
            for (input_idx, trace) in dist.traces.iter().enumerate() {
                for (rep, d) in trace.samples_ns.iter().enumerate() {
                    writeln!(out, "{run},{class},{input_idx},{rep},{d}")?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_dump<R: BufRead>(input: R) -> Result<DistributionSet> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(DUMP_HEADER) {
        return Err(Error::Format(format!("dump must start with `{DUMP_HEADER}`")));
    }
    let mut records: Vec<(usize, usize, usize, usize, f64)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("dump line {}: malformed record `{line}`", n + 2));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad());
        }
        let int = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
        let dur: f64 = fields[4].trim().parse().map_err(|_| bad())?;
        records.push((int(fields[0])?, int(fields[1])?, int(fields[2])?, int(fields[3])?, dur));
    }

    let runs = records.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let classes = records.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    let mut set = DistributionSet::new(classes, runs);
    for (run, class, input_idx, rep, d) in records {
        let dist = set
            .map
            .entry((class, run))
            .or_insert_with(|| TimingDistribution {
                class_id: class,
                run_id: run,
                traces: Vec::new(),
            });
        if dist.traces.len() <= input_idx {
            dist.traces.resize(input_idx + 1, TimingTrace { samples_ns: Vec::new() });
        }
        let trace = &mut dist.traces[input_idx];
        if trace.samples_ns.len() != rep {
            return Err(Error::Format(format!(
                "dump record (run {run}, class {class}, input {input_idx}) has rep {rep} out of order"
            )));
        }
        trace.samples_ns.push(d);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut set = DistributionSet::new(2, 2);
        for run in 0..2 {
            for class in 0..2 {
                set.push_trace(
                    class,
                    run,
                    TimingTrace::new(vec![1.0 + run as f64, 0.1 + 0.2, 1e9 / 3.0]).unwrap(),
                );
                set.push_trace(class, run, TimingTrace::new(vec![7.0, 8.0, 9.0]).unwrap());
            }
        }
        let mut buf = Vec::new();
        write_dump(&set, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(DUMP_HEADER));
        assert_eq!(text.lines().count(), 1 + 2 * 2 * 2 * 3);
        let back = read_dump(buf.as_slice()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn rejects_missing_header_and_bad_rows() {
        assert!(read_dump("0,0,0,0,1\n".as_bytes()).is_err());
        let bad = format!("{DUMP_HEADER}\n0,0,0,x,1\n");
        assert!(read_dump(bad.as_bytes()).is_err());
        let gap = format!("{DUMP_HEADER}\n0,0,0,1,1\n");
        assert!(read_dump(gap.as_bytes()).is_err());
    }
}
