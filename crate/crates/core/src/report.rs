//! JSON output with every float written in fixed six-decimal notation.

use std::io;

use serde::Serialize;
use serde_json::ser::Formatter;

use crate::error::Result;

struct FixedFloats;

fn write_fixed<W: ?Sized + io::Write>(w: &mut W, v: f64) -> io::Result<()> {
    if !v.is_finite() {
        return w.write_all(b"null");
    }
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        w.write_all(b"0.000000")
    } else {
        w.write_all(s.as_bytes())
    }
}

impl Formatter for FixedFloats {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write_fixed(w, v)
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        write_fixed(w, f64::from(v))
    }
}

/// Compact JSON followed by a newline. Key order follows struct field
/// order and `BTreeMap` ordering, so output is byte-stable.
pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedFloats);
    value
        .serialize(&mut ser)
        .map_err(|e| crate::Error::Data(format!("serializing report: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[derive(Serialize)]
    struct R {
        b: f64,
        a: Vec<f64>,
        m: BTreeMap<String, f64>,
        n: u32,
    }

    #[test]
    fn six_decimals_and_stable_order() {
        let mut m = BTreeMap::new();
        m.insert("z".to_string(), 1.0 / 3.0);
        m.insert("y".to_string(), -1e-9);
        let r = R { b: 0.5, a: vec![2.0, f64::NAN], m, n: 7 };
        let s = String::from_utf8(to_json(&r).unwrap()).unwrap();
        assert_eq!(s, "{\"b\":0.500000,\"a\":[2.000000,null],\"m\":{\"y\":0.000000,\"z\":0.333333},\"n\":7}\n");
    }
}
