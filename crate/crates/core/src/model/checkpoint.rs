//! Line-oriented text checkpoints.
//!
//! ```text
//! temporal-range-checkpoint
//! version 1
//! cell gru
//! input_dim 3
//! hidden_dim 8
//! output_dim 2
//! lem_dt 0.5
//! encoder identity            (or: encoder tanh <width>)
//! tensor <name> <rows> <cols>
//! <cols values>               (repeated <rows> times)
//! ...
//! end
//! ```
//!
//! Tensors appear in [`SequenceModel::named_params`] order. Values use the
//! shortest decimal form that parses back to the same `f64`, so a saved and
//! reloaded model is bitwise identical.

use std::fmt::Write as _;
use std::path::Path;

use super::{CellKind, CellSpec, EncoderSpec, Init, ModelSpec, SequenceModel};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MAGIC: &str = "temporal-range-checkpoint";
pub const VERSION: u32 = 1;

pub fn to_string(model: &SequenceModel) -> String {
    let spec = model.spec();
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "version {VERSION}");
    let _ = writeln!(out, "cell {}", spec.cell.kind.as_str());
    let _ = writeln!(out, "input_dim {}", spec.cell.input_dim);
    let _ = writeln!(out, "hidden_dim {}", spec.cell.hidden_dim);
    let _ = writeln!(out, "output_dim {}", spec.output_dim);
    let _ = writeln!(out, "lem_dt {:?}", spec.cell.lem_dt);
    match spec.encoder {
        EncoderSpec::Identity => {
            let _ = writeln!(out, "encoder identity");
        }
        EncoderSpec::Tanh { width } => {
            let _ = writeln!(out, "encoder tanh {width}");
        }
    }
    for (name, m) in model.named_params() {
        let _ = writeln!(out, "tensor {name} {} {}", m.rows(), m.cols());
        for i in 0..m.rows() {
            let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    let _ = writeln!(out, "end");
    out
}

pub fn save(model: &SequenceModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<SequenceModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text)
}

struct Lines<'a> {
    text: &'a str,
    offset: usize,
}

impl<'a> Lines<'a> {
    /// Next non-empty line and its starting byte offset.
    fn next(&mut self) -> Result<(usize, &'a str)> {
        loop {
            if self.offset >= self.text.len() {
                return Err(Error::Format {
                    offset: self.text.len(),
                    message: "unexpected end of file".into(),
                });
            }
            let start = self.offset;
            let rest = &self.text[start..];
            let (line, advance) = match rest.find('\n') {
                Some(i) => (&rest[..i], i + 1),
                None => (rest, rest.len()),
            };
            self.offset += advance;
            let line = line.trim_end_matches('\r');
            if !line.trim().is_empty() {
                return Ok((start, line));
            }
        }
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (off, line) = self.next()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok((off, v.trim())),
            _ => Err(Error::Format {
                offset: off,
                message: format!("expected `{key} <value>`, found `{line}`"),
            }),
        }
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, offset: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format {
        offset,
        message: format!("cannot parse {what} from `{s}`"),
    })
}

pub fn from_str(text: &str) -> Result<SequenceModel> {
    let mut lines = Lines { text, offset: 0 };
    let (off, magic) = lines.next()?;
    if magic.trim() != MAGIC {
        return Err(Error::Format {
            offset: off,
            message: "not a temporal-range checkpoint".into(),
        });
    }
    let (off, v) = lines.keyed("version")?;
    let version: u32 = parse_num(v, off, "version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: v.to_string(),
            expected: VERSION,
        });
    }
    let (off, kind) = lines.keyed("cell")?;
    let kind = CellKind::parse(kind).ok_or_else(|| Error::Format {
        offset: off,
        message: format!("unknown cell kind `{kind}`"),
    })?;
    let (off, v) = lines.keyed("input_dim")?;
    let input_dim = parse_num(v, off, "input_dim")?;
    let (off, v) = lines.keyed("hidden_dim")?;
    let hidden_dim = parse_num(v, off, "hidden_dim")?;
    let (off, v) = lines.keyed("output_dim")?;
    let output_dim = parse_num(v, off, "output_dim")?;
    let (off, v) = lines.keyed("lem_dt")?;
    let lem_dt = parse_num(v, off, "lem_dt")?;
    let (off, enc) = lines.keyed("encoder")?;
    let encoder = match enc.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["identity"] => EncoderSpec::Identity,
        ["tanh", w] => EncoderSpec::Tanh {
            width: parse_num(w, off, "encoder width")?,
        },
        _ => {
            return Err(Error::Format {
                offset: off,
                message: format!("unknown encoder `{enc}`"),
            })
        }
    };
    let spec = ModelSpec {
        cell: CellSpec {
            kind,
            input_dim,
            hidden_dim,
            lem_dt,
        },
        encoder,
        output_dim,
    };
    let mut model = SequenceModel::init(&spec, Init::Zeros, &mut Rng::new(0)).map_err(|e| Error::Format {
        offset: off,
        message: format!("invalid header: {e}"),
    })?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, param) in names.iter().zip(model.params_mut()) {
        let (off, header) = lines.next()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let (rows, cols) = match parts.as_slice() {
            ["tensor", n, r, c] if n == name => {
                (parse_num::<usize>(r, off, "rows")?, parse_num::<usize>(c, off, "cols")?)
            }
            _ => {
                return Err(Error::Format {
                    offset: off,
                    message: format!("expected tensor `{name}`, found `{header}`"),
                })
            }
        };
        if (rows, cols) != param.shape() {
            return Err(Error::Format {
                offset: off,
                message: format!(
                    "tensor `{name}` has shape {rows}x{cols}, expected {}x{}",
                    param.rows(),
                    param.cols()
                ),
            });
        }
        for i in 0..rows {
            let (off, line) = lines.next()?;
            let values: Vec<&str> = line.split_whitespace().collect();
            if values.len() != cols {
                return Err(Error::Format {
                    offset: off,
                    message: format!("row {i} of `{name}` has {} values, expected {cols}", values.len()),
                });
            }
            for (j, v) in values.iter().enumerate() {
                let x: f64 = parse_num(v, off, "value")?;
                if !x.is_finite() {
                    return Err(Error::Format {
                        offset: off,
                        message: format!("non-finite value in `{name}`"),
                    });
                }
                param.set(i, j, x);
            }
        }
    }
    let (off, end) = lines.next()?;
    if end.trim() != "end" {
        return Err(Error::Format {
            offset: off,
            message: format!("expected `end`, found `{end}`"),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::ObservationSequence;

    fn models() -> Vec<SequenceModel> {
        let mut rng = Rng::new(31);
        let mut out = Vec::new();
        for kind in [CellKind::LinearRec, CellKind::Gru, CellKind::Lstm, CellKind::Lem] {
            for encoder in [EncoderSpec::Identity, EncoderSpec::Tanh { width: 3 }] {
                let spec = ModelSpec {
                    cell: CellSpec::new(kind, 2, 4),
                    encoder,
                    output_dim: 3,
                };
                out.push(SequenceModel::init(&spec, Init::Glorot, &mut rng).unwrap());
            }
        }
        out
    }

    #[test]
    fn round_trip_is_bitwise() {
        let x = ObservationSequence::from_rows(&[vec![0.3, -0.1], vec![1e-7, 0.9], vec![-0.4, 0.2]]).unwrap();
        for m in models() {
            let back = from_str(&to_string(&m)).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.forward(&x).unwrap(), m.forward(&x).unwrap());
        }
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = SequenceModel::shift_copy(2, &Matrix::identity(2)).unwrap();
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let text = to_string(&models()[1]);
        let cut = &text[..text.len() / 2];
        match from_str(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_value_reports_line_offset() {
        let text = to_string(&models()[0]);
        let pos = text.find("tensor").unwrap();
        let line_start = pos + text[pos..].find('\n').unwrap() + 1;
        let mut bad = text.clone();
        bad.replace_range(line_start..line_start + 1, "x");
        match from_str(&bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, line_start),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let text = to_string(&models()[0]).replace("version 1", "version 7");
        assert!(matches!(from_str(&text), Err(Error::Version { .. })));
    }
}
