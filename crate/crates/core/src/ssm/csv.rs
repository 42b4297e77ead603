//! Trajectory CSV format.
//!
//! ```text
//! # optional comment lines
//! t,x1,..,xn,y1,..,ym[,vc]
//! 0,<x0>,,..,[,]
//! 1,<x1>,<y1>[,<vc1>]
//! ```
//!
//! The `t = 0` row carries the initial state with empty measurement cells and is optional.
//! Floats are written in shortest round-trip form, so re-reading is bit exact.

use std::io::{BufRead, Write};

use nalgebra::DVector;

use super::{SsmSpec, Trajectory};
use crate::error::{Error, Result};

pub fn header(n: usize, m: usize, with_control: bool) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("x{i}")));
    cols.extend((1..=m).map(|i| format!("y{i}")));
    if with_control {
        cols.push("vc".into());
    }
    cols.join(",")
}

/// Writes `traj`; each entry of `comments` becomes a `# ` line above the header.
pub fn write_trajectory<W: Write>(mut w: W, traj: &Trajectory, comments: &[String]) -> Result<()> {
    let n = traj.spec.state_dim();
    let m = traj.spec.meas_dim();
    let ctl = traj.controls.is_some();
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    if let Some(seed) = traj.seed {
        writeln!(w, "# seed={seed}")?;
    }
    writeln!(w, "{}", header(n, m, ctl))?;
    if let Some(x0) = &traj.initial_state {
        let mut row = vec!["0".to_string()];
        row.extend(x0.iter().map(|v| format!("{v:?}")));
        row.extend(std::iter::repeat_n(String::new(), m + usize::from(ctl)));
        writeln!(w, "{}", row.join(","))?;
    }
    for (k, (x, y)) in traj.states.iter().zip(&traj.measurements).enumerate() {
        let mut row = vec![(k + 1).to_string()];
        row.extend(x.iter().map(|v| format!("{v:?}")));
        row.extend(y.iter().map(|v| format!("{v:?}")));
        if ctl {
            row.push(format!("{:?}", traj.control(k)));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

fn parse_f64(s: &str, line: usize, col: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("column {col}: cannot parse {s:?} as a number"),
    })
}

/// Reads a trajectory written by [`write_trajectory`] (or any file with the same columns).
pub fn read_trajectory<R: BufRead>(r: R, spec: &SsmSpec) -> Result<Trajectory> {
    let n = spec.state_dim();
    let m = spec.meas_dim();
    let mut seed = None;
    let mut with_control = None;
    let mut initial_state = None;
    let mut states = Vec::new();
    let mut measurements = Vec::new();
    let mut controls = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(c) = trimmed.strip_prefix('#') {
            if let Some(s) = c.trim().strip_prefix("seed=") {
                seed = s.trim().parse().ok();
            }
            continue;
        }
        let cells: Vec<&str> = trimmed.split(',').collect();
        let Some(ctl) = with_control else {
            if cells == header(n, m, false).split(',').collect::<Vec<_>>() {
                with_control = Some(false);
            } else if cells == header(n, m, true).split(',').collect::<Vec<_>>() {
                with_control = Some(true);
            } else {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!(
                        "expected header {:?} for model {}",
                        header(n, m, spec.uses_control()),
                        spec.name()
                    ),
                });
            }
            continue;
        };
        let width = 1 + n + m + usize::from(ctl);
        if cells.len() != width {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {width} columns, found {}", cells.len()),
            });
        }
        let t: usize = cells[0].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad step index {:?}", cells[0]),
        })?;
        let x = (0..n)
            .map(|i| parse_f64(cells[1 + i], lineno, &format!("x{}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        if t == 0 {
            if !states.is_empty() || initial_state.is_some() {
                return Err(Error::Parse {
                    line: lineno,
                    message: "t=0 row must come first".into(),
                });
            }
            initial_state = Some(DVector::from_vec(x));
            continue;
        }
        if t != states.len() + 1 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected t={}, found t={t}", states.len() + 1),
            });
        }
        let y = (0..m)
            .map(|i| parse_f64(cells[1 + n + i], lineno, &format!("y{}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        if ctl {
            controls.push(parse_f64(cells[1 + n + m], lineno, "vc")?);
        }
        states.push(DVector::from_vec(x));
        measurements.push(DVector::from_vec(y));
    }
    let Some(ctl) = with_control else {
        return Err(Error::Parse {
            line: 0,
            message: "missing header row".into(),
        });
    };
    if measurements.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "no data rows".into(),
        });
    }
    Ok(Trajectory {
        spec: *spec,
        true_cov: None,
        seed,
        initial_state,
        states,
        measurements,
        controls: ctl.then_some(controls),
    })
}
