//! Text raster container.
//!
//! A field is written as a header line `PF2 <width> <height>` followed by one
//! line per row of space-separated decimals with 17 significant digits, which
//! round-trips every finite `f64` exactly. A flow field is the line `FLOW`
//! followed by the `u` block and then the `v` block.

use std::io::{BufRead, Write};

use crate::flow::FlowField;
use crate::tensor::ScalarField;
use crate::{Error, Result};

/// Formats a real with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_real(token: &str, context: &str) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|e| Error::parse(context, format!("bad number {token:?}: {e}")))?;
    if !v.is_finite() {
        return Err(Error::parse(context, format!("non-finite number {token:?}")));
    }
    Ok(v)
}

pub fn write_field<W: Write>(out: &mut W, field: &ScalarField) -> Result<()> {
    writeln!(out, "PF2 {} {}", field.width(), field.height())?;
    let mut line = String::new();
    for row in field.samples().chunks(field.width()) {
        line.clear();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&fmt_real(*v));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn next_line<R: BufRead>(input: &mut R, context: &str) -> Result<String> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Err(Error::parse(context, "unexpected end of input"));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

pub fn read_field<R: BufRead>(input: &mut R) -> Result<ScalarField> {
    let header = next_line(input, "PF2 header")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("PF2") {
        return Err(Error::parse("PF2 header", format!("expected PF2, got {header:?}")));
    }
    let mut dim = |name: &str| -> Result<usize> {
        parts
            .next()
            .ok_or_else(|| Error::parse("PF2 header", format!("missing {name}")))?
            .parse()
            .map_err(|e| Error::parse("PF2 header", e))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let mut samples = Vec::with_capacity(width * height);
    for r in 0..height {
        let line = next_line(input, "PF2 row")?;
        let before = samples.len();
        for tok in line.split_whitespace() {
            samples.push(parse_real(tok, "PF2 row")?);
        }
        if samples.len() - before != width {
            return Err(Error::parse(
                "PF2 row",
                format!("row {r} has {} values, expected {width}", samples.len() - before),
            ));
        }
    }
    ScalarField::new(width, height, samples)
}

pub fn write_flow<W: Write>(out: &mut W, flow: &FlowField) -> Result<()> {
    writeln!(out, "FLOW")?;
    write_field(out, flow.u())?;
    write_field(out, flow.v())
}

pub fn read_flow<R: BufRead>(input: &mut R) -> Result<FlowField> {
    let header = next_line(input, "FLOW header")?;
    if header.trim() != "FLOW" {
        return Err(Error::parse("FLOW header", format!("expected FLOW, got {header:?}")));
    }
    let u = read_field(input)?;
    let v = read_field(input)?;
    FlowField::new(u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_and_layout() {
        let f = ScalarField::new(2, 1, vec![0.5, -3.0]).unwrap();
        let mut buf = Vec::new();
        write_field(&mut buf, &f).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "PF2 2 1\n5.0000000000000000e-1 -3.0000000000000000e0\n");
    }

    #[test]
    fn malformed_input_is_rejected() {
        for text in ["PF3 1 1\n0\n", "PF2 2 1\n1.0\n", "PF2 1 2\n1.0\n", "PF2 1 1\nnan\n"] {
            assert!(read_field(&mut text.as_bytes()).is_err(), "{text:?}");
        }
        assert!(read_flow(&mut "PF2 1 1\n0\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn fields_round_trip_bit_exactly(vals in proptest::collection::vec(
            proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 12)) {
            let f = ScalarField::new(4, 3, vals).unwrap();
            let mut buf = Vec::new();
            write_field(&mut buf, &f).unwrap();
            let g = read_field(&mut buf.as_slice()).unwrap();
            let bits = |s: &ScalarField| s.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&f), bits(&g));
        }

        #[test]
        fn flows_round_trip(a in -50.0..50.0f64, b in -50.0..50.0f64) {
            let u = ScalarField::filled(3, 2, a);
            let v = ScalarField::filled(3, 2, b);
            let flow = FlowField::new(u, v).unwrap();
            let mut buf = Vec::new();
            write_flow(&mut buf, &flow).unwrap();
            let back = read_flow(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, flow);
        }
    }
}
