//! Plain CSV dumps of matrices and routing traces.

use std::path::Path;

use capsgraph_core::routing::RoutingState;
use capsgraph_core::Tensor;

use crate::error::{Error, Result};

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

/// One CSV row per matrix row, six decimals, no header.
pub fn write_matrix(path: &Path, m: &Tensor<f32>) -> Result<()> {
    let cols = m.shape().get(1).copied().unwrap_or(1).max(1);
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for row in m.data().chunks(cols) {
        w.write_record(row.iter().map(|x| format!("{x:.6}"))).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Long-format trace: one row per iteration, child and parent.
pub fn write_trace(path: &Path, states: &[RoutingState<f32>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["iteration", "child", "parent", "logit", "coupling", "leak", "parent_norm"])
        .map_err(csv_err(path))?;
    for s in states {
        let classes = s.logits.shape()[1];
        let cc = s.couplings.shape()[1];
        for i in 0..s.logits.shape()[0] {
            for j in 0..classes {
                let leak = s.leak.as_ref().map(|l| format!("{:.6}", l[i])).unwrap_or_default();
                w.write_record([
                    (s.iteration + 1).to_string(),
                    i.to_string(),
                    j.to_string(),
                    format!("{:.6}", s.logits.data()[i * classes + j]),
                    format!("{:.6}", s.couplings.data()[i * cc + j]),
                    leak,
                    format!("{:.6}", s.parent_norms[j]),
                ])
                .map_err(csv_err(path))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a matrix written by [`write_matrix`].
pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err(path))?;
            rec.iter()
                .map(|x| x.parse::<f64>().map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
                .collect()
        })
        .collect()
}
