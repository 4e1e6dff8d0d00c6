//! CSV/JSON reporting helpers shared by the studies and the experiment
//! runner. All floating point output goes through [`fmt_f64`] (9 significant
//! digits) so artifacts are byte-stable for a fixed seed.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Canonical float formatting for CSV artifacts: 9 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".to_string()
        } else if v > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        };
    }
    let formatted = format!("{v:.8e}");
    // render plainly when the exponent is small, scientific otherwise
    let exp: i32 = formatted
        .split('e')
        .nth(1)
        .and_then(|e| e.parse().ok())
        .unwrap_or(0);
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let plain = format!("{v:.decimals$}");
        trim_zeros(&plain)
    } else {
        formatted
    }
}

fn trim_zeros(s: &str) -> String {
    if !s.contains('.') {
        return s.to_string();
    }
    let t = s.trim_end_matches('0');
    let t = t.strip_suffix('.').unwrap_or(t);
    t.to_string()
}

/// A simple in-memory table written as comma-delimited CSV with a header
/// row, `.` decimal separator and floats at 9 significant digits.
#[derive(Debug, Clone)]
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone)]
pub enum Cell {
    Str(String),
    Int(i64),
    Float(f64),
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Str(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Str(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Str(s) => {
                if s.contains(',') || s.contains('"') || s.contains('\n') {
                    format!("\"{}\"", s.replace('"', "\"\""))
                } else {
                    s.clone()
                }
            }
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => fmt_f64(*v),
        }
    }
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row arity mismatch");
        self.rows.push(row.iter().map(Cell::render).collect());
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Runs `f(0..count)` across up to `threads` scoped workers, returning
/// results in index order regardless of scheduling. Aggregation downstream
/// therefore sees a fixed order and stays deterministic.
pub fn map_indexed<T, F>(count: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.max(1).min(count.max(1));
    if threads <= 1 || count <= 1 {
        return (0..count).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..count).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slot_ptr = SlotPtr(slots.as_mut_ptr());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            let next = &next;
            let f = &f;
            let slot_ptr = &slot_ptr;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let value = f(i);
                // each index is claimed exactly once, so the write is unique
                unsafe { *slot_ptr.0.add(i) = Some(value) };
            });
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

struct SlotPtr<T>(*mut Option<T>);
unsafe impl<T: Send> Sync for SlotPtr<T> {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_is_nine_significant_digits() {
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(1.0), "1");
        assert_eq!(fmt_f64(-2.5), "-2.5");
        assert_eq!(fmt_f64(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_f64(1234.56789), "1234.56789");
        assert_eq!(fmt_f64(1.23456789e12), "1.23456789e12");
        assert_eq!(fmt_f64(-9.87654321e-7), "-9.87654321e-7");
    }

    #[test]
    fn table_renders_header_and_rows() {
        let mut t = Table::new(&["name", "n", "value"]);
        t.push(vec!["a".into(), 3usize.into(), 0.5.into()]);
        assert_eq!(t.to_csv(), "name,n,value\na,3,0.5\n");
    }

    #[test]
    fn map_indexed_preserves_order() {
        let out = map_indexed(100, 4, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
        let single = map_indexed(10, 1, |i| i + 1);
        assert_eq!(single, (1..=10).collect::<Vec<_>>());
    }
}
