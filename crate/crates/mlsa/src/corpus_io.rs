//! Line-oriented TSV files: corpora, oracles and generated samples.
//!
//! Every file opens with a header comment such as
//! `# vocab_size=64 aspects=2 attrs=2,4 max_len=16`; other `#` lines are
//! ignored.

use std::fmt::Write as _;
use std::path::Path;

use mlsa_core::corpus::{CorpusIndex, OracleClassifier, Schema, TokenSequence};
use mlsa_core::eval::GeneratedSample;

use crate::error::CliError;

pub fn header(schema: &Schema) -> String {
    let attrs: Vec<String> = schema.attrs_per_aspect.iter().map(|a| a.to_string()).collect();
    format!(
        "# vocab_size={} aspects={} attrs={} max_len={}\n",
        schema.vocab_size,
        schema.aspects(),
        attrs.join(","),
        schema.max_len
    )
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CliError {
    CliError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn parse_header(path: &Path, line_no: usize, line: &str) -> Result<Schema, CliError> {
    let mut vocab = None;
    let mut aspects = None;
    let mut attrs = None;
    let mut max_len = None;
    for field in line.trim_start_matches('#').split_whitespace() {
        let Some((k, v)) = field.split_once('=') else { continue };
        let bad = || parse_err(path, line_no, format!("bad header field `{field}`"));
        match k {
            "vocab_size" => vocab = Some(v.parse::<usize>().map_err(|_| bad())?),
            "aspects" => aspects = Some(v.parse::<usize>().map_err(|_| bad())?),
            "max_len" => max_len = Some(v.parse::<usize>().map_err(|_| bad())?),
            "attrs" => {
                attrs = Some(v.split(',').map(|a| a.parse::<usize>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad())?)
            }
            _ => {}
        }
    }
    let missing = |what: &str| parse_err(path, line_no, format!("header lacks `{what}`"));
    let schema = Schema {
        attrs_per_aspect: attrs.ok_or_else(|| missing("attrs"))?,
        vocab_size: vocab.ok_or_else(|| missing("vocab_size"))?,
        max_len: max_len.ok_or_else(|| missing("max_len"))?,
    };
    let n = aspects.ok_or_else(|| missing("aspects"))?;
    if n != schema.aspects() {
        return Err(parse_err(path, line_no, format!("header says {n} aspects but lists {}", schema.aspects())));
    }
    schema.validate().map_err(|e| parse_err(path, line_no, e.to_string()))?;
    Ok(schema)
}

/// Split `text` into the header schema and numbered data lines.
type NumberedLines<'a> = Vec<(usize, &'a str)>;

fn split_lines<'a>(path: &Path, text: &'a str) -> Result<(Schema, NumberedLines<'a>), CliError> {
    let mut schema = None;
    let mut data = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let no = i + 1;
        if line.starts_with('#') {
            if schema.is_none() && line.contains("vocab_size=") {
                schema = Some(parse_header(path, no, line)?);
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if schema.is_none() {
            return Err(parse_err(path, no, "data before the `# vocab_size=...` header"));
        }
        data.push((no, line));
    }
    let schema = schema.ok_or_else(|| parse_err(path, 1, "missing `# vocab_size=...` header"))?;
    Ok((schema, data))
}

fn parse_tokens(path: &Path, no: usize, field: &str) -> Result<Vec<u32>, CliError> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(' ')
        .map(|t| t.parse::<u32>().map_err(|_| parse_err(path, no, format!("bad token `{t}`"))))
        .collect()
}

fn parse_index(path: &Path, no: usize, field: &str, what: &str) -> Result<usize, CliError> {
    field.parse().map_err(|_| parse_err(path, no, format!("bad {what} `{field}`")))
}

fn join_tokens(tokens: &[u32]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn format_corpus(schema: &Schema, seqs: &[TokenSequence]) -> String {
    let mut out = header(schema);
    for s in seqs {
        let _ = writeln!(out, "{}\t{}\t{}", s.aspect, s.attribute, join_tokens(&s.tokens));
    }
    out
}

pub fn parse_corpus(path: &Path, text: &str) -> Result<(Schema, Vec<TokenSequence>, CorpusIndex), CliError> {
    let (schema, lines) = split_lines(path, text)?;
    let mut seqs = Vec::with_capacity(lines.len());
    for (no, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, no, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let seq = TokenSequence {
            aspect: parse_index(path, no, fields[0], "aspect")?,
            attribute: parse_index(path, no, fields[1], "attribute")?,
            tokens: parse_tokens(path, no, fields[2])?,
        };
        schema.check(&seq).map_err(|e| CliError::Validation(format!("{}:{no}: {e}", path.display())))?;
        seqs.push(seq);
    }
    let index = CorpusIndex::build(&schema, &seqs)?;
    Ok((schema, seqs, index))
}

pub fn format_oracle(oracle: &OracleClassifier) -> String {
    let mut out = header(&oracle.schema);
    for (n, per) in oracle.probs.iter().enumerate() {
        for (j, p) in per.iter().enumerate() {
            let probs: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{n}\t{j}\t{}", probs.join(" "));
        }
    }
    out
}

pub fn parse_oracle(path: &Path, text: &str) -> Result<OracleClassifier, CliError> {
    let (schema, lines) = split_lines(path, text)?;
    let mut probs: Vec<Vec<Option<Vec<f64>>>> = schema.attrs_per_aspect.iter().map(|k| vec![None; *k]).collect();
    for (no, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, no, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let n = parse_index(path, no, fields[0], "aspect")?;
        let j = parse_index(path, no, fields[1], "attribute")?;
        let slot = probs
            .get_mut(n)
            .and_then(|p| p.get_mut(j))
            .ok_or_else(|| parse_err(path, no, format!("attribute ({n},{j}) outside the header schema")))?;
        let p = fields[2]
            .split(' ')
            .map(|v| v.parse::<f64>().map_err(|_| parse_err(path, no, format!("bad probability `{v}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        if slot.replace(p).is_some() {
            return Err(parse_err(path, no, format!("duplicate distribution for ({n},{j})")));
        }
    }
    let mut full = Vec::new();
    for (n, per) in probs.into_iter().enumerate() {
        let mut row = Vec::new();
        for (j, p) in per.into_iter().enumerate() {
            row.push(p.ok_or_else(|| CliError::Validation(format!("{}: no distribution for ({n},{j})", path.display())))?);
        }
        full.push(row);
    }
    OracleClassifier::new(schema, full).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn target_field(t: Option<usize>) -> String {
    t.map_or_else(|| "*".to_string(), |j| j.to_string())
}

/// One line per sample: target attribute per aspect (`*` if untargeted),
/// then the tokens.
pub fn format_samples(schema: &Schema, samples: &[GeneratedSample]) -> String {
    let mut out = header(schema);
    for s in samples {
        for t in &s.target {
            out.push_str(&target_field(*t));
            out.push('\t');
        }
        out.push_str(&join_tokens(&s.tokens));
        out.push('\n');
    }
    out
}

pub fn parse_samples(path: &Path, text: &str) -> Result<(Schema, Vec<GeneratedSample>), CliError> {
    let (schema, lines) = split_lines(path, text)?;
    let n = schema.aspects();
    let mut out = Vec::with_capacity(lines.len());
    for (no, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != n + 1 {
            return Err(parse_err(path, no, format!("expected {} tab-separated fields, found {}", n + 1, fields.len())));
        }
        let mut target = Vec::with_capacity(n);
        for (a, f) in fields[..n].iter().enumerate() {
            if *f == "*" {
                target.push(None);
                continue;
            }
            let j = parse_index(path, no, f, "target attribute")?;
            if j >= schema.attrs_per_aspect[a] {
                return Err(CliError::Validation(format!(
                    "{}:{no}: target attribute {j} out of range for aspect {a}",
                    path.display()
                )));
            }
            target.push(Some(j));
        }
        let tokens = parse_tokens(path, no, fields[n])?;
        if let Some(t) = tokens.iter().find(|t| **t as usize >= schema.vocab_size) {
            return Err(CliError::Validation(format!("{}:{no}: token {t} outside the vocabulary", path.display())));
        }
        out.push(GeneratedSample { target, tokens });
    }
    Ok((schema, out))
}

pub fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<(Schema, Vec<TokenSequence>, CorpusIndex), CliError> {
    parse_corpus(path, &read(path)?)
}

pub fn load_oracle(path: &Path) -> Result<OracleClassifier, CliError> {
    parse_oracle(path, &read(path)?)
}

pub fn load_samples(path: &Path) -> Result<(Schema, Vec<GeneratedSample>), CliError> {
    parse_samples(path, &read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlsa_core::corpus::{generate_synthetic, SyntheticSpec};

    fn p() -> &'static Path {
        Path::new("mem.tsv")
    }

    #[test]
    fn format_line_example() {
        let text = "# vocab_size=64 aspects=2 attrs=2,4 max_len=16\n0\t1\t5 7 5\n";
        let (_, seqs, _) = parse_corpus(p(), text).unwrap();
        assert_eq!(seqs, vec![TokenSequence { tokens: vec![5, 7, 5], aspect: 0, attribute: 1 }]);
    }

    #[test]
    fn attribute_out_of_range() {
        let text = "# vocab_size=64 aspects=2 attrs=2,4 max_len=16\n0\t9\t1\n";
        assert!(matches!(parse_corpus(p(), text), Err(CliError::Validation(_))));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = "# vocab_size=64 aspects=2 attrs=2,4 max_len=16\n0\t1\t1 2\n\n0 1 3\n";
        match parse_corpus(p(), text) {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_corpus(p(), "0\t1\t2\n"), Err(CliError::Parse { line: 1, .. })));
    }

    #[test]
    fn corpus_and_oracle_roundtrip() {
        let spec = SyntheticSpec { sequences_per_attribute: 200, ..SyntheticSpec::default() };
        let (seqs, index, oracle) = generate_synthetic(&spec).unwrap();
        let text = format_corpus(&spec.schema, &seqs);
        let (schema, back, back_index) = parse_corpus(p(), &text).unwrap();
        assert_eq!(schema, spec.schema);
        assert_eq!(back, seqs);
        assert_eq!(back_index, index);
        assert_eq!(parse_oracle(p(), &format_oracle(&oracle)).unwrap(), oracle);
    }

    #[test]
    fn samples_roundtrip() {
        let schema = Schema { attrs_per_aspect: vec![2, 4], vocab_size: 64, max_len: 16 };
        let samples = vec![
            GeneratedSample { target: vec![Some(1), None], tokens: vec![1, 2, 3] },
            GeneratedSample { target: vec![Some(0), Some(3)], tokens: vec![63] },
        ];
        let (s, back) = parse_samples(p(), &format_samples(&schema, &samples)).unwrap();
        assert_eq!(s, schema);
        assert_eq!(back, samples);
    }
}
