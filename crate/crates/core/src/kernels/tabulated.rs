use std::path::Path;

use super::KernelError;

/// Kernel given by samples on a rectangular `(t, s)` lattice, restricted to
/// `s < t`. Evaluation interpolates linearly in `s` within each sampled row
/// (clamping to the row's defined range) and then linearly in `t`.
#[derive(Debug, Clone)]
pub struct TabulatedKernel {
    /// Sorted distinct `t` values, each with its `(s, value)` samples sorted by `s`.
    rows: Vec<(f64, Vec<(f64, f64)>)>,
}

impl TabulatedKernel {
    pub fn from_triples(mut triples: Vec<(f64, f64, f64)>) -> Result<Self, KernelError> {
        if triples.is_empty() {
            return Err(KernelError::Table("no samples".into()));
        }
        for &(t, s, v) in &triples {
            if !(t.is_finite() && s.is_finite() && v.is_finite()) {
                return Err(KernelError::Table(format!(
                    "non-finite sample ({t}, {s}, {v})"
                )));
            }
            if s >= t || s < 0.0 {
                return Err(KernelError::Table(format!(
                    "sample ({t}, {s}) lies outside 0 <= s < t"
                )));
            }
        }
        triples.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut rows: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
        for (t, s, v) in triples {
            match rows.last_mut() {
                Some((rt, samples)) if *rt == t => {
                    if samples.last().is_some_and(|&(ls, _)| ls == s) {
                        return Err(KernelError::Table(format!("duplicate sample ({t}, {s})")));
                    }
                    samples.push((s, v));
                }
                _ => rows.push((t, vec![(s, v)])),
            }
        }
        Ok(Self { rows })
    }

    /// Reads a CSV file with header `t,s,value`.
    pub fn from_csv_path(path: &Path) -> Result<Self, KernelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KernelError::Table(format!("{}: {e}", path.display())))?;
        Self::from_csv_str(&text)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, KernelError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| KernelError::Table("empty file".into()))?
            .1;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["t", "s", "value"] {
            return Err(KernelError::Table(format!(
                "expected header `t,s,value`, found `{header}`"
            )));
        }
        let mut triples = Vec::new();
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(KernelError::Table(format!(
                    "line {}: expected 3 fields, found {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let mut parsed = [0.0; 3];
            for (slot, field) in parsed.iter_mut().zip(&fields) {
                *slot = field.parse().map_err(|_| {
                    KernelError::Table(format!("line {}: cannot parse `{field}`", lineno + 1))
                })?;
            }
            triples.push((parsed[0], parsed[1], parsed[2]));
        }
        Self::from_triples(triples)
    }

    pub fn len(&self) -> usize {
        self.rows.iter().map(|(_, r)| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub(crate) fn eval(&self, t: f64, s: f64) -> f64 {
        let idx = self.rows.partition_point(|(rt, _)| *rt <= t);
        if idx == 0 {
            return row_value(&self.rows[0].1, s);
        }
        if idx == self.rows.len() {
            return row_value(&self.rows[idx - 1].1, s);
        }
        let (t0, r0) = &self.rows[idx - 1];
        let (t1, r1) = &self.rows[idx];
        let w = (t - t0) / (t1 - t0);
        (1.0 - w) * row_value(r0, s) + w * row_value(r1, s)
    }
}

fn row_value(row: &[(f64, f64)], s: f64) -> f64 {
    let idx = row.partition_point(|(rs, _)| *rs <= s);
    if idx == 0 {
        return row[0].1;
    }
    if idx == row.len() {
        return row[idx - 1].1;
    }
    let (s0, v0) = row[idx - 1];
    let (s1, v1) = row[idx];
    v0 + (v1 - v0) * (s - s0) / (s1 - s0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_linear_kernel() {
        let mut text = String::from("t,s,value\n");
        for i in 1..=10 {
            for j in 0..i {
                let (t, s) = (i as f64 * 0.1, j as f64 * 0.1);
                text.push_str(&format!("{t},{s},{}\n", 2.0 + t - s));
            }
        }
        let k = TabulatedKernel::from_csv_str(&text).unwrap();
        assert_eq!(k.len(), 55);
        let v = k.eval(0.55, 0.25);
        assert!((v - 2.30).abs() < 1e-12, "{v}");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TabulatedKernel::from_csv_str("a,b,c\n1,0,1\n").is_err());
        assert!(TabulatedKernel::from_csv_str("t,s,value\n1,1,1\n").is_err());
        assert!(TabulatedKernel::from_csv_str("t,s,value\n1,0,x\n").is_err());
        assert!(TabulatedKernel::from_csv_str("t,s,value\n").is_err());
    }
}
