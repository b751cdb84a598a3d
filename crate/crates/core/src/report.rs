//! Shared CSV conventions: `%g`-style floats with 6 significant digits and a leading
//! provenance comment line.

use std::io::{self, Write};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Formats like C's `%g`: 6 significant digits, trailing zeros dropped, scientific
/// notation below 1e-4 or from 1e6.
pub fn fmt_g(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        strip_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// First line of every emitted file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceLine {
    pub config_hash: String,
    pub seed: u64,
}

impl ProvenanceLine {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "# bnn {} config={} seed={}", TOOL_VERSION, self.config_hash, self.seed)
    }

    /// Parses a line written by [`ProvenanceLine::write_to`].
    pub fn parse(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# bnn ")?;
        let mut parts = rest.split_whitespace().skip(1);
        let config_hash = parts.next()?.strip_prefix("config=")?.to_string();
        let seed = parts.next()?.strip_prefix("seed=")?.parse().ok()?;
        Some(Self { config_hash, seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_printf_g() {
        let cases = [
            (std::f64::consts::LN_2, "0.693147"),
            (-1.3132616875182228, "-1.31326"),
            (2.884615384615385, "2.88462"),
            (100.0, "100"),
            (1e-5, "1e-05"),
            (0.0001, "0.0001"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (999999.5, "1e+06"),
            (-0.1, "-0.1"),
            (0.5, "0.5"),
        ];
        for (x, s) in cases {
            assert_eq!(fmt_g(x), s, "{x}");
        }
    }

    #[test]
    fn provenance_round_trip() {
        let p = ProvenanceLine::new("abc123", 42);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert!(line.starts_with("# bnn "));
        assert_eq!(ProvenanceLine::parse(line.trim_end()), Some(p));
    }
}
