//! Text model files.
//!
//! ```text
//! covnet-model v1
//! arch deepshared
//! R 3
//! d 2
//! widths 3 3
//! networks 1
//! layer 0 0 3 2
//! <out rows of `in` weights>
//! <out biases>
//! ...
//! lambda
//! <row i of the lower triangle, i+1 values>
//! mean none | mean <R values>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use covnet_core::{ArchKind, Architecture, FittedCovariance, ModelParams};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const HEADER: &str = "covnet-model v1";

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn push_row<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        out.push_str(&fmt_f64(*v));
        first = false;
    }
    out.push('\n');
}

pub fn encode_model(model: &FittedCovariance) -> String {
    let arch = model.architecture();
    let mut s = String::new();
    writeln!(s, "{HEADER}").unwrap();
    writeln!(s, "arch {}", arch.kind().name()).unwrap();
    writeln!(s, "R {}", arch.r()).unwrap();
    writeln!(s, "d {}", arch.d()).unwrap();
    let widths: Vec<String> = arch.widths().iter().map(usize::to_string).collect();
    writeln!(s, "widths {}", widths.join(" ")).unwrap();
    writeln!(s, "networks {}", model.params().networks.len()).unwrap();
    for (k, net) in model.params().networks.iter().enumerate() {
        for (l, layer) in net.layers.iter().enumerate() {
            let (o, i) = layer.weights.shape();
            writeln!(s, "layer {k} {l} {o} {i}").unwrap();
            for row in layer.weights.row_iter() {
                push_row(&mut s, row.iter());
            }
            push_row(&mut s, layer.biases.iter());
        }
    }
    s.push_str("lambda\n");
    let lambda = model.lambda();
    for i in 0..arch.r() {
        push_row(&mut s, (0..=i).map(|j| &lambda[(i, j)]));
    }
    match model.mean_coeffs() {
        None => s.push_str("mean none\n"),
        Some(m) => {
            s.push_str("mean ");
            push_row(&mut s, m.iter());
        }
    }
    s
}

pub fn save_model(path: &Path, model: &FittedCovariance) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

struct Lines<'a> {
    path: &'a Path,
    text: &'a str,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::format(self.path, at as u64, msg)
    }

    /// Next line and its byte offset.
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        if self.pos >= self.text.len() {
            return Err(self.err(self.pos, format!("unexpected end of file, expected {what}")));
        }
        let start = self.pos;
        let rest = &self.text[start..];
        let (line, adv) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1),
            None => (rest, rest.len()),
        };
        self.pos += adv;
        Ok((start, line.trim_end_matches('\r')))
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (at, line) = self.next(key)?;
        let mut parts = line.splitn(2, ' ');
        if parts.next() != Some(key) {
            return Err(self.err(at, format!("expected `{key}`, found `{line}`")));
        }
        Ok((at, parts.next().unwrap_or("").trim()))
    }

    fn keyed_usize(&mut self, key: &str) -> Result<usize> {
        let (at, v) = self.keyed(key)?;
        v.parse().map_err(|_| {
            self.err(
                at,
                format!("`{key}` must be a non-negative integer, found `{v}`"),
            )
        })
    }

    fn floats(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let (at, line) = self.next(what)?;
        parse_floats(self, at, line, count, what)
    }
}

fn parse_floats(
    lines: &Lines,
    at: usize,
    line: &str,
    count: usize,
    what: &str,
) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| lines.err(at, format!("bad number `{t}` in {what}")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != count {
        return Err(lines.err(
            at,
            format!("{what}: expected {count} values, found {}", vals.len()),
        ));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(lines.err(at, format!("non-finite value in {what}")));
    }
    Ok(vals)
}

pub fn decode_model(path: &Path, text: &str) -> Result<FittedCovariance> {
    let mut lines = Lines { path, text, pos: 0 };
    let (at, header) = lines.next("header")?;
    if header != HEADER {
        return Err(lines.err(
            at,
            format!("unsupported header `{header}`, expected `{HEADER}`"),
        ));
    }
    let (at, kind) = lines.keyed("arch")?;
    let kind = ArchKind::parse(kind)
        .ok_or_else(|| lines.err(at, format!("unknown architecture `{kind}`")))?;
    let r = lines.keyed_usize("R")?;
    let d = lines.keyed_usize("d")?;
    let (at, w) = lines.keyed("widths")?;
    let widths: Vec<usize> = w
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| lines.err(at, format!("bad width `{t}`")))
        })
        .collect::<Result<_>>()?;
    let arch = Architecture::new(kind, r, d, widths).map_err(|e| lines.err(at, e.to_string()))?;
    let mut params = ModelParams::zeros(&arch);
    let (at, nets) = lines.keyed("networks")?;
    if nets.parse::<usize>().ok() != Some(params.networks.len()) {
        return Err(lines.err(
            at,
            format!(
                "expected {} networks for this architecture",
                params.networks.len()
            ),
        ));
    }
    for (k, net) in params.networks.iter_mut().enumerate() {
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (o, i) = layer.weights.shape();
            let (at, shape) = lines.keyed("layer")?;
            if shape != format!("{k} {l} {o} {i}") {
                return Err(lines.err(
                    at,
                    format!("layer header `{shape}` does not match expected `{k} {l} {o} {i}`"),
                ));
            }
            for row in 0..o {
                let vals = lines.floats(i, "weights")?;
                for (c, v) in vals.into_iter().enumerate() {
                    layer.weights[(row, c)] = v;
                }
            }
            layer.biases = DVector::from_vec(lines.floats(o, "biases")?);
        }
    }
    let (at, rest) = lines.keyed("lambda")?;
    if !rest.is_empty() {
        return Err(lines.err(at, "unexpected data after `lambda`"));
    }
    let lambda_at = at;
    let mut lambda = DMatrix::zeros(r, r);
    for i in 0..r {
        let vals = lines.floats(i + 1, "lambda")?;
        for (j, v) in vals.into_iter().enumerate() {
            lambda[(i, j)] = v;
            lambda[(j, i)] = v;
        }
    }
    let (at, mean) = lines.keyed("mean")?;
    let mean_coeffs = if mean == "none" {
        None
    } else {
        Some(DVector::from_vec(parse_floats(
            &lines, at, mean, r, "mean",
        )?))
    };
    if text[lines.pos..].trim().is_empty() {
        FittedCovariance::new(arch, params, lambda, mean_coeffs)
            .map_err(|e| lines.err(lambda_at, e.to_string()))
    } else {
        Err(lines.err(lines.pos, "trailing content after model"))
    }
}

pub fn load_model(path: &Path) -> Result<FittedCovariance> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_model(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use covnet_core::{lambda_from_coefficients, Stream};

    fn random_model(arch: Architecture, seed: u64, mean: bool) -> FittedCovariance {
        let mut s = Stream::new(seed);
        let mut p = ModelParams::zeros(&arch);
        let mut flat = Vec::new();
        p.write_flat(&mut flat);
        let flat: Vec<f64> = flat.iter().map(|_| s.normal() * 3.0).collect();
        p.read_flat(&flat);
        let xi = DMatrix::from_fn(2 * arch.r() + 1, arch.r(), |_, _| s.normal());
        let m = mean.then(|| DVector::from_fn(arch.r(), |_, _| s.normal()));
        FittedCovariance::new(arch, p, lambda_from_coefficients(&xi, true), m).unwrap()
    }

    #[test]
    fn round_trip_all_architectures() {
        for (k, arch) in [
            Architecture::shallow(3, 2).unwrap(),
            Architecture::deep(2, 3, 2).unwrap(),
            Architecture::deep_shared(4, 1, 3).unwrap(),
        ]
        .into_iter()
        .enumerate()
        {
            let m = random_model(arch, k as u64, k == 1);
            let back = decode_model(Path::new("m"), &encode_model(&m)).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn rejects_tampered_lambda() {
        let arch = Architecture::shallow(2, 1).unwrap();
        let m = FittedCovariance::new(
            arch.clone(),
            ModelParams::zeros(&arch),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])),
            None,
        )
        .unwrap();
        let text = encode_model(&m);
        let bad = text.replace(
            &format!("{} {}\n", fmt_f64(0.0), fmt_f64(2.0)),
            &format!("{} {}\n", fmt_f64(0.0), fmt_f64(-0.1)),
        );
        assert_ne!(bad, text);
        assert!(matches!(
            decode_model(Path::new("m"), &bad),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn rejects_wrong_version_and_shapes() {
        let arch = Architecture::shallow(2, 1).unwrap();
        let text = encode_model(&random_model(arch, 1, false));
        let v2 = text.replacen("covnet-model v1", "covnet-model v2", 1);
        assert!(matches!(
            decode_model(Path::new("m"), &v2),
            Err(Error::Format { offset: 0, .. })
        ));
        let r3 = text.replacen("R 2", "R 3", 1);
        assert!(decode_model(Path::new("m"), &r3).is_err());
        let cut = &text[..text.len() - 20];
        assert!(decode_model(Path::new("m"), cut).is_err());
    }

    #[test]
    fn shallow_forty_is_small() {
        let m = random_model(Architecture::shallow(40, 3).unwrap(), 5, false);
        let text = encode_model(&m);
        assert!(text.len() < 100 * 1024, "{}", text.len());
    }
}
