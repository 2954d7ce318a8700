use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::gala::cosine_via_decomposition;
use crate::{Error, Result};

/// `(beta, T, u, cos_alpha)` as read back from CSV.
type Row = (f64, f64, f64, Option<f64>);

/// Criterion values over a `(beta, T, u)` grid, for contour plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryGrid {
    pub t_values: Vec<f64>,
    pub u_values: Vec<f64>,
    pub beta_values: Vec<f64>,
    /// Indexed `[beta][t][u]`, flattened; `None` marks undefined cells.
    pub cells: Vec<Option<f64>>,
}

impl GeometryGrid {
    pub fn get(&self, beta: usize, t: usize, u: usize) -> Option<f64> {
        let (nt, nu) = (self.t_values.len(), self.u_values.len());
        self.cells[(beta * nt + t) * nu + u]
    }

    /// Long-format CSV: `beta,T,u,cos_alpha`, undefined cells left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["beta", "T", "u", "cos_alpha"])?;
        for (bi, beta) in self.beta_values.iter().enumerate() {
            for (ti, t) in self.t_values.iter().enumerate() {
                for (ui, u) in self.u_values.iter().enumerate() {
                    let cell = self.get(bi, ti, ui).map(|v| v.to_string()).unwrap_or_default();
                    w.write_record([beta.to_string(), t.to_string(), u.to_string(), cell])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut rows: Vec<Row> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Format("short geometry row".into()))?
                    .parse()
                    .map_err(|e| Error::Format(format!("bad number: {e}")))
            };
            let cell = match rec.get(3) {
                Some("") | None => None,
                Some(_) => Some(num(3)?),
            };
            rows.push((num(0)?, num(1)?, num(2)?, cell));
        }
        let axis = |pick: fn(&Row) -> f64| {
            let mut v: Vec<f64> = Vec::new();
            for row in &rows {
                let x = pick(row);
                if !v.iter().any(|y| y.to_bits() == x.to_bits()) {
                    v.push(x);
                }
            }
            v
        };
        let beta_values = axis(|r| r.0);
        let t_values = axis(|r| r.1);
        let u_values = axis(|r| r.2);
        if rows.len() != beta_values.len() * t_values.len() * u_values.len() {
            return Err(Error::Format("geometry grid is not rectangular".into()));
        }
        Ok(Self {
            t_values,
            u_values,
            beta_values,
            cells: rows.into_iter().map(|r| r.3).collect(),
        })
    }
}

pub fn geometry_grid(t_values: &[f64], u_values: &[f64], beta_values: &[f64]) -> Result<GeometryGrid> {
    if t_values.is_empty() || u_values.is_empty() || beta_values.is_empty() {
        return Err(Error::precondition("geometry axes must be nonempty"));
    }
    let mut cells = Vec::with_capacity(t_values.len() * u_values.len() * beta_values.len());
    for &beta in beta_values {
        for &t in t_values {
            for &u in u_values {
                cells.push(cosine_via_decomposition(t, u, beta));
            }
        }
    }
    Ok(GeometryGrid {
        t_values: t_values.to_vec(),
        u_values: u_values.to_vec(),
        beta_values: beta_values.to_vec(),
        cells,
    })
}
