use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::{check_expert_set, ActivationTrace, Iteration, LayerActivations};
use crate::error::{Error, Result};

const SCHEMA: u64 = 1;

/// First line of a trace file.
#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: u64,
    num_experts: usize,
    experts_per_token: usize,
    batch: usize,
    layers: usize,
    iterations: usize,
}

/// One `(iteration, layer, token)` routing decision.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    iter: usize,
    layer: usize,
    token: usize,
    experts: Vec<usize>,
}

pub fn write_trace<W: Write>(trace: &ActivationTrace, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    let header = Header {
        schema: SCHEMA,
        num_experts: trace.num_experts,
        experts_per_token: trace.experts_per_token,
        batch: trace.batch_size(),
        layers: trace.num_layers(),
        iterations: trace.iterations.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (iter, it) in trace.iterations.iter().enumerate() {
        for (layer, acts) in it.layers.iter().enumerate() {
            for (token, set) in acts.tokens().enumerate() {
                let experts = set.iter().map(|&x| x as usize).collect();
                serde_json::to_writer(
                    &mut out,
                    &Record {
                        iter,
                        layer,
                        token,
                        experts,
                    },
                )?;
                out.write_all(b"\n")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_trace(trace: &ActivationTrace, path: &Path) -> Result<()> {
    write_trace(trace, std::fs::File::create(path)?)
}

pub fn load_trace(path: &Path) -> Result<ActivationTrace> {
    read_trace(std::fs::File::open(path)?)
}

/// Parses a trace file: a schema header line followed by one record per
/// `(iter, layer, token)`. Every slot must appear exactly once.
pub fn read_trace<R: Read>(input: R) -> Result<ActivationTrace> {
    let mut lines = BufReader::new(input).lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(Error::EmptyTrace),
            Some((_, line)) if line.as_ref().is_ok_and(|l| l.trim().is_empty()) => continue,
            Some((n, line)) => {
                break serde_json::from_str(&line?).map_err(|e| Error::Parse {
                    line: n + 1,
                    message: e.to_string(),
                })?
            }
        }
    };
    if header.schema != SCHEMA {
        return Err(Error::Schema(header.schema));
    }
    let (e_total, e) = (header.num_experts, header.experts_per_token);
    if e == 0 || e > e_total || e_total > u16::MAX as usize + 1 {
        return Err(Error::Parse {
            line: 1,
            message: format!("invalid expert counts {e} of {e_total}"),
        });
    }
    let (n_iter, n_layer, batch) = (header.iterations, header.layers, header.batch);
    let slots = n_iter * n_layer * batch;
    let mut flat = vec![0u16; slots * e];
    let mut seen = vec![false; slots];
    let mut filled = 0usize;
    let mut set = Vec::with_capacity(e);

    for (n, line) in lines {
        let line_no = n + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|err| parse_err(err.to_string()))?;
        if rec.iter >= n_iter || rec.layer >= n_layer || rec.token >= batch {
            return Err(parse_err(format!(
                "record ({}, {}, {}) outside the declared {n_iter}x{n_layer}x{batch} shape",
                rec.iter, rec.layer, rec.token
            )));
        }
        if rec.experts.len() != e {
            return Err(parse_err(format!(
                "expected {e} experts per token, found {}",
                rec.experts.len()
            )));
        }
        set.clear();
        for &x in &rec.experts {
            if x >= e_total {
                return Err(parse_err(format!(
                    "expert id out of range: {x} >= {e_total}"
                )));
            }
            set.push(x as u16);
        }
        check_expert_set(&set, e_total).map_err(parse_err)?;
        let slot = (rec.iter * n_layer + rec.layer) * batch + rec.token;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(parse_err(format!(
                "duplicate record ({}, {}, {})",
                rec.iter, rec.layer, rec.token
            )));
        }
        flat[slot * e..(slot + 1) * e].copy_from_slice(&set);
        filled += 1;
    }
    if filled != slots {
        let missing = seen.iter().position(|s| !s).unwrap_or(0);
        let (it, rest) = (missing / (n_layer * batch), missing % (n_layer * batch));
        return Err(Error::InvalidTrace(format!(
            "{} records missing, first at ({it}, {}, {})",
            slots - filled,
            rest / batch,
            rest % batch
        )));
    }

    let mut chunks = flat.chunks_exact(batch * e);
    let iterations = (0..n_iter)
        .map(|_| Iteration {
            layers: (0..n_layer)
                .map(|_| {
                    let mut layer = LayerActivations::with_capacity(e, batch);
                    for tok in chunks.next().unwrap().chunks_exact(e) {
                        let ids: Vec<usize> = tok.iter().map(|&x| x as usize).collect();
                        layer.push(&ids);
                    }
                    layer
                })
                .collect(),
        })
        .collect();
    Ok(ActivationTrace {
        num_experts: e_total,
        experts_per_token: e,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::trace::{generate_trace, TraceGenConfig};

    const HEADER: &str =
        r#"{"schema":1,"num_experts":4,"experts_per_token":2,"batch":1,"layers":1,"iterations":1}"#;

    fn parse(body: &str) -> Result<ActivationTrace> {
        read_trace(format!("{HEADER}\n{body}\n").as_bytes())
    }

    #[test]
    fn round_trip_is_lossless() {
        let model = ModelSpec {
            num_layers: 3,
            ..ModelSpec::DEEPSEEK
        };
        let mut cfg = TraceGenConfig::new(model, 17, 2, 11);
        cfg.skew = 1.0;
        let trace = generate_trace(&cfg).unwrap();
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        assert_eq!(read_trace(buf.as_slice()).unwrap(), trace);
    }

    #[test]
    fn record_format_is_stable() {
        let mut buf = Vec::new();
        write_trace(
            &parse(r#"{"iter":0,"layer":0,"token":0,"experts":[1,3]}"#).unwrap(),
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().nth(1).unwrap(),
            r#"{"iter":0,"layer":0,"token":0,"experts":[1,3]}"#
        );
    }

    #[test]
    fn duplicate_expert_id() {
        let err = parse(r#"{"iter":0,"layer":0,"token":0,"experts":[1,1]}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("duplicate expert id"), "{err}");
        assert!(err.starts_with("line 2"), "{err}");
    }

    #[test]
    fn expert_id_out_of_range() {
        let err = parse(r#"{"iter":0,"layer":0,"token":0,"experts":[1,4]}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("expert id out of range"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("{not json").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_key_and_wrong_size() {
        let rec = r#"{"iter":0,"layer":0,"token":0,"experts":[1,2]}"#;
        let err = parse(&format!("{rec}\n{rec}")).unwrap_err().to_string();
        assert!(err.contains("duplicate record"), "{err}");
        let err = parse(r#"{"iter":0,"layer":0,"token":0,"experts":[1]}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("expected 2 experts"), "{err}");
    }

    #[test]
    fn missing_records_are_reported() {
        let err = read_trace(HEADER.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("missing"), "{err}");
    }
}
