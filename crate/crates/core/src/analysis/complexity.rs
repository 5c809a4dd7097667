//! Closed-form complexity table and per-layer counting.
//!
//! Only floating multiplies are counted. Weight counts exclude biases;
//! biases are reported in their own column.

use std::fmt::Write as _;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};

use crate::cra::{cra_flops, cra_param_count};
use crate::error::AnalysisError;
use crate::net::{LayerCount, LayerKind, Model};
use crate::shift::{ssb_flops, ssb_param_count};
use crate::tensor::Element;

pub type Q = Ratio<i128>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entry {
    Resblock,
    Ssb,
    Attention,
    Nonlocal,
    Cra,
}

impl Entry {
    pub const ALL: [Entry; 5] = [Entry::Resblock, Entry::Ssb, Entry::Attention, Entry::Nonlocal, Entry::Cra];

    pub fn parse(s: &str) -> Result<Self, AnalysisError> {
        Ok(match s {
            "resblock" => Entry::Resblock,
            "ssb" => Entry::Ssb,
            "attention" => Entry::Attention,
            "nonlocal" => Entry::Nonlocal,
            "cra" => Entry::Cra,
            other => return Err(AnalysisError::UnknownEntry(other.to_string())),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Entry::Resblock => "resblock",
            Entry::Ssb => "ssb",
            Entry::Attention => "attention",
            Entry::Nonlocal => "nonlocal",
            Entry::Cra => "cra",
        }
    }
}

fn q(v: u64) -> Q {
    Q::from_integer(v as i128)
}

/// Exact `(params, flops)` of one building block. `m` is the input and `n`
/// the output width; entries with a single width read `n`.
pub fn closed_form(entry: &str, m: u64, n: u64, h: u64, w: u64) -> Result<(Q, Q), AnalysisError> {
    let entry = Entry::parse(entry)?;
    if m == 0 || n == 0 || h == 0 || w == 0 {
        return Err(AnalysisError::NonPositiveDims);
    }
    Ok(closed_form_entry(entry, m, n, h, w))
}

pub fn closed_form_entry(entry: Entry, m: u64, n: u64, h: u64, w: u64) -> (Q, Q) {
    let (mq, nq, hw) = (q(m), q(n), q(h * w));
    match entry {
        Entry::Resblock => {
            let p = q(9) * mq * mq + q(18) * mq * nq;
            (p, hw * p)
        }
        Entry::Ssb => (q(ssb_param_count(m, n)), q(ssb_flops(m, n, h, w))),
        Entry::Attention => {
            let p = Q::new(41, 2) * nq * nq;
            (p, hw * (p + nq))
        }
        Entry::Nonlocal => {
            let p = Q::new(45, 2) * nq * nq;
            (p, hw * (p + nq + hw * nq))
        }
        Entry::Cra => (cra_param_count(n), cra_flops(n, h, w)),
    }
}

/// One counted layer next to its closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub name: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
    /// False for layers outside the table (plain 1×1 convs, the prior);
    /// their closed columns hold the structural count.
    pub has_closed_form: bool,
    pub closed_params: Q,
    pub counted_params: u64,
    pub biases: u64,
    pub closed_macs: Q,
    pub counted_macs: u64,
}

impl Row {
    fn deviation(closed: Q, counted: u64) -> f64 {
        if closed.is_zero() {
            return if counted == 0 { 0.0 } else { f64::INFINITY };
        }
        ((q(counted) - closed) / closed).to_f64().unwrap_or(f64::NAN)
    }

    /// `(counted − closed) / closed` on weights.
    pub fn params_deviation(&self) -> f64 {
        Self::deviation(self.closed_params, self.counted_params)
    }

    pub fn macs_deviation(&self) -> f64 {
        Self::deviation(self.closed_macs, self.counted_macs)
    }

    pub fn from_count(c: &LayerCount) -> Self {
        let (h, w) = (c.height as u64, c.width as u64);
        let (has, closed_params, closed_macs) = match c.kind {
            LayerKind::Ssb => {
                let (p, f) = closed_form_entry(Entry::Ssb, c.cin as u64, c.cout as u64, h, w);
                (true, p, f)
            }
            LayerKind::Cra => {
                let (p, f) = closed_form_entry(Entry::Cra, c.cin as u64, c.cout as u64, h, w);
                (true, p, f)
            }
            LayerKind::Conv => {
                let p = q(c.cin as u64 * c.cout as u64);
                (false, p, p * q(h * w))
            }
            LayerKind::Prior => (false, q(c.weights), q(c.macs)),
        };
        Self {
            name: c.name.clone(),
            kind: c.kind,
            cin: c.cin,
            cout: c.cout,
            height: c.height,
            width: c.width,
            has_closed_form: has,
            closed_params,
            counted_params: c.weights,
            biases: c.biases,
            closed_macs,
            counted_macs: c.macs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Totals {
    pub closed_params: Q,
    pub counted_params: u64,
    pub biases: u64,
    pub closed_macs: Q,
    pub counted_macs: u64,
}

impl Totals {
    /// Weights plus biases.
    pub fn total_params(&self) -> u64 {
        self.counted_params + self.biases
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub height: usize,
    pub width: usize,
    pub rows: Vec<Row>,
    /// Column sums of `rows`.
    pub totals: Totals,
}

impl ComplexityReport {
    pub fn from_rows(rows: Vec<Row>, height: usize, width: usize) -> Self {
        let totals = Totals {
            closed_params: rows.iter().map(|r| r.closed_params).sum(),
            counted_params: rows.iter().map(|r| r.counted_params).sum(),
            biases: rows.iter().map(|r| r.biases).sum(),
            closed_macs: rows.iter().map(|r| r.closed_macs).sum(),
            counted_macs: rows.iter().map(|r| r.counted_macs).sum(),
        };
        Self {
            height,
            width,
            rows,
            totals,
        }
    }

    /// Counted multiplies over `H·W·1000`.
    pub fn kmacs_per_pixel(&self) -> f64 {
        let px = (self.height * self.width) as f64;
        if px == 0.0 {
            return 0.0;
        }
        self.totals.counted_macs as f64 / (px * 1000.0)
    }

    /// BD-rate gain per multiply per pixel.
    pub fn bd_rate_per_flops(&self, bd_rate: f64) -> f64 {
        bd_rate / (self.kmacs_per_pixel() * 1000.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "name,kind,cin,cout,height,width,closed_form,closed_params,counted_params,biases,params_dev,closed_macs,counted_macs,macs_dev\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:?},{},{},{},{},{},{},{},{},{:.6},{},{},{:.6}",
                r.name,
                r.kind,
                r.cin,
                r.cout,
                r.height,
                r.width,
                r.has_closed_form,
                fmt_q(r.closed_params),
                r.counted_params,
                r.biases,
                r.params_deviation(),
                fmt_q(r.closed_macs),
                r.counted_macs,
                r.macs_deviation()
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "total,,,,{},{},,{},{},{},{:.6},{},{},{:.6}",
            self.height,
            self.width,
            fmt_q(t.closed_params),
            t.counted_params,
            t.biases,
            Row::deviation(t.closed_params, t.counted_params),
            fmt_q(t.closed_macs),
            t.counted_macs,
            Row::deviation(t.closed_macs, t.counted_macs)
        );
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>5} {:>5} {:>9} {:>14} {:>11} {:>9} {:>16} {:>14} {:>9}",
            "layer", "cin", "cout", "size", "closed params", "params", "dev", "closed MACs", "MACs", "dev"
        );
        for r in &self.rows {
            let mark = if r.has_closed_form { "" } else { "*" };
            let _ = writeln!(
                s,
                "{:<16} {:>5} {:>5} {:>9} {:>14} {:>11} {:>8.3}% {:>16} {:>14} {:>8.3}%",
                r.name,
                r.cin,
                r.cout,
                format!("{}x{}", r.width, r.height),
                format!("{}{}", fmt_q(r.closed_params), mark),
                r.counted_params,
                100.0 * r.params_deviation(),
                format!("{}{}", fmt_q(r.closed_macs), mark),
                r.counted_macs,
                100.0 * r.macs_deviation()
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "total: {} weights + {} biases = {} params; {} MACs; {:.2} KMACs/pixel at {}x{}",
            t.counted_params,
            t.biases,
            t.total_params(),
            t.counted_macs,
            self.kmacs_per_pixel(),
            self.width,
            self.height
        );
        s.push_str("* no closed form; closed column holds the structural count\n");
        s
    }
}

/// Integers print plainly, fractions as `p/q`.
pub fn fmt_q(v: Q) -> String {
    if v.is_integer() {
        v.to_integer().to_string()
    } else {
        format!("{}/{}", v.numer(), v.denom())
    }
}

/// Walks `model` at an `h × w` input.
pub fn count_model<F: Element>(model: &Model<F>, h: usize, w: usize) -> ComplexityReport {
    let rows = model.layer_counts(h, w).iter().map(Row::from_count).collect();
    ComplexityReport::from_rows(rows, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;

    #[test]
    fn table_examples() {
        assert_eq!(closed_form("resblock", 1, 1, 1, 1).unwrap().0, q(27));
        assert_eq!(closed_form("attention", 2, 2, 1, 1).unwrap().0, q(82));
        assert_eq!(closed_form("nonlocal", 1, 1, 2, 2).unwrap().1, q(110));
        assert_eq!(closed_form("cra", 32, 32, 1, 1).unwrap().0, q(5280));
        assert_eq!(closed_form("ssb", 128, 128, 768, 512).unwrap().1, q(768 * 512 * 32768));
        assert_eq!(closed_form("attention", 3, 3, 1, 1).unwrap().0, Q::new(369, 2));
    }

    #[test]
    fn bad_entries_error() {
        assert_eq!(closed_form("conv3", 1, 1, 1, 1), Err(AnalysisError::UnknownEntry("conv3".into())));
        assert_eq!(closed_form("ssb", 0, 1, 1, 1), Err(AnalysisError::NonPositiveDims));
    }

    #[test]
    fn empty_report_is_zero() {
        let r = ComplexityReport::from_rows(Vec::new(), 64, 64);
        assert_eq!(r.totals.counted_macs, 0);
        assert_eq!(r.totals.closed_params, Q::zero());
        assert_eq!(r.kmacs_per_pixel(), 0.0);
    }

    #[test]
    fn totals_are_column_sums_and_ssb_rows_are_exact() {
        let model = Model::<f32>::new(ModelConfig::tiny(), 0).unwrap();
        let r = count_model(&model, 64, 64);
        assert_eq!(r.totals.counted_params, r.rows.iter().map(|x| x.counted_params).sum::<u64>());
        assert_eq!(r.totals.counted_macs, r.rows.iter().map(|x| x.counted_macs).sum::<u64>());
        assert_eq!(r.totals.total_params() as usize, model.num_params());
        for row in r.rows.iter().filter(|x| x.kind == LayerKind::Ssb) {
            assert_eq!(row.params_deviation(), 0.0, "{}", row.name);
            assert_eq!(row.macs_deviation(), 0.0, "{}", row.name);
        }
        assert!(r.to_csv().lines().count() == r.rows.len() + 2);
        assert!(r.to_table().contains("KMACs/pixel"));
    }
}
