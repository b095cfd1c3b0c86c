use std::io::{self, Write};
use std::time::Instant;

use serde::Serialize;
use serde_json::ser::Formatter;
use serde_json::Value;
use subpop_core::fmt_g17;

/// Compact JSON with every float written to 17 significant digits.
struct G17Formatter;

impl Formatter for G17Formatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_g17(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

pub fn to_json_line<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, G17Formatter);
    value.serialize(&mut ser).expect("in-memory JSON serialization");
    buf.push(b'\n');
    String::from_utf8(buf).expect("JSON is UTF-8")
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub flags: Value,
    pub seed: Option<u64>,
    /// FNV-1a digest of the input CSV bytes as 16 hex digits.
    pub input_digest: Option<String>,
    pub version: &'static str,
    pub wall_clock_seconds: f64,
}

pub struct Run {
    command: &'static str,
    flags: Value,
    seed: Option<u64>,
    digest: Option<u64>,
    started: Instant,
}

impl Run {
    pub fn start<F: Serialize>(command: &'static str, flags: &F, seed: Option<u64>) -> Self {
        Self {
            command,
            flags: serde_json::to_value(flags).expect("flags serialize"),
            seed,
            digest: None,
            started: Instant::now(),
        }
    }

    pub fn record_input(&mut self, bytes: &[u8]) {
        self.digest = Some(fnv1a64(bytes));
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            command: self.command,
            flags: self.flags.clone(),
            seed: self.seed,
            input_digest: self.digest.map(|d| format!("{d:016x}")),
            version: env!("CARGO_PKG_VERSION"),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        }
    }

    /// `{"manifest": ..., "result": ...}` as one JSON line.
    pub fn render<T: Serialize>(&self, result: &T) -> String {
        #[derive(Serialize)]
        struct Envelope<'a, T> {
            manifest: RunManifest,
            result: &'a T,
        }
        to_json_line(&Envelope { manifest: self.manifest(), result })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn floats_use_seventeen_digits() {
        let line = to_json_line(&serde_json::json!({"x": 0.647, "y": 3.5, "z": [1e20]}));
        assert_eq!(line, "{\"x\":0.64700000000000002,\"y\":3.5,\"z\":[1e+20]}\n");
        let back: Value = serde_json::from_str(&line).unwrap();
        assert_eq!(back["x"].as_f64(), Some(0.647));
    }
}
