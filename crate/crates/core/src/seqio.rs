//! FASTA and Stockholm ingestion.
//!
//! Everything that leaves this module is a validated [`RnaSequence`] over the
//! four-letter alphabet `{A, C, G, U}`. Lowercase input is folded, `T` becomes
//! `U`, and anything else (IUPAC ambiguity codes included) is rejected with the
//! offending character and its position.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use thiserror::Error;

/// A validated RNA sequence belonging to a family.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RnaSequence {
    pub id: String,
    pub family: String,
    residues: String,
}

impl RnaSequence {
    /// Builds a sequence, normalizing `raw` through [`normalize_residues`].
    pub fn new(
        id: impl Into<String>,
        family: impl Into<String>,
        raw: &str,
    ) -> Result<Self, SeqError> {
        let id = id.into();
        if id.is_empty() {
            return Err(SeqError::MalformedHeader { line: 0 });
        }
        let residues = normalize_residues(raw).map_err(|e| SeqError::Residue {
            record: id.clone(),
            line: None,
            source: e,
        })?;
        if residues.is_empty() {
            return Err(SeqError::EmptySequence { record: id, line: 0 });
        }
        Ok(Self {
            id,
            family: family.into(),
            residues,
        })
    }

    pub fn residues(&self) -> &str {
        &self.residues
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.residues.as_bytes()
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    /// Identifier that is unique across families: `family/id`.
    pub fn key(&self) -> String {
        format!("{}/{}", self.family, self.id)
    }
}

impl fmt::Display for RnaSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} ({} nt)", self.family, self.id, self.len())
    }
}

/// A family accession with its member sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Family {
    pub accession: String,
    pub members: Vec<RnaSequence>,
}

impl Family {
    /// Builds a family, checking that every member carries `accession` and that
    /// member ids are unique.
    pub fn new(accession: impl Into<String>, members: Vec<RnaSequence>) -> Result<Self, SeqError> {
        let accession = accession.into();
        let mut seen = HashSet::new();
        for m in &members {
            if m.family != accession {
                return Err(SeqError::FamilyMismatch {
                    record: m.id.clone(),
                    expected: accession,
                    found: m.family.clone(),
                });
            }
            if !seen.insert(m.id.as_str()) {
                return Err(SeqError::DuplicateName { name: m.id.clone() });
            }
        }
        Ok(Self { accession, members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// A single character outside the accepted alphabet.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid residue {ch:?} at position {position}")]
pub struct ResidueError {
    pub ch: char,
    /// 1-based position within the raw input.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SeqError {
    #[error("line {line}: malformed header (no sequence id)")]
    MalformedHeader { line: usize },
    #[error("line {line}: record {record:?} has no family accession (header lacks '/' and no default family was given)")]
    MissingFamily { record: String, line: usize },
    #[error("line {line}: record {record:?} has an empty sequence")]
    EmptySequence { record: String, line: usize },
    #[error("record {record:?}{}: {source}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Residue {
        record: String,
        line: Option<usize>,
        source: ResidueError,
    },
    #[error("line {line}: sequence data before the first header")]
    DataBeforeHeader { line: usize },
    #[error("missing \"# STOCKHOLM 1.0\" header")]
    MissingMagic,
    #[error("duplicate name {name:?}")]
    DuplicateName { name: String },
    #[error("line {line}: malformed alignment row")]
    MalformedRow { line: usize },
    #[error("record {record:?} has family {found:?}, expected {expected:?}")]
    FamilyMismatch {
        record: String,
        expected: String,
        found: String,
    },
    #[error("input is not valid UTF-8")]
    NotUtf8,
}

/// Uppercases, maps `T` to `U` and rejects anything outside `{A, C, G, U}`.
pub fn normalize_residues(raw: &str) -> Result<String, ResidueError> {
    raw.chars()
        .enumerate()
        .map(|(i, c)| match c.to_ascii_uppercase() {
            c @ ('A' | 'C' | 'G' | 'U') => Ok(c),
            'T' => Ok('U'),
            _ => Err(ResidueError {
                ch: c,
                position: i + 1,
            }),
        })
        .collect()
}

fn lines(bytes: &[u8]) -> Result<impl Iterator<Item = (usize, &str)>, SeqError> {
    let text = std::str::from_utf8(bytes).map_err(|_| SeqError::NotUtf8)?;
    Ok(text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .enumerate()
        .map(|(i, l)| (i + 1, l)))
}

struct PendingRecord {
    id: String,
    family: String,
    header_line: usize,
    residues: String,
}

impl PendingRecord {
    fn finish(self) -> Result<RnaSequence, SeqError> {
        if self.residues.is_empty() {
            return Err(SeqError::EmptySequence {
                record: self.id,
                line: self.header_line,
            });
        }
        Ok(RnaSequence {
            id: self.id,
            family: self.family,
            residues: self.residues,
        })
    }
}

/// Parses FASTA records with `>FAMILY/id` headers.
///
/// Headers without a `/` take `default_family`; if none is given they are an
/// error. Text after the first whitespace in a header is ignored.
pub fn parse_fasta(bytes: &[u8], default_family: Option<&str>) -> Result<Vec<RnaSequence>, SeqError> {
    let mut out = Vec::new();
    let mut current: Option<PendingRecord> = None;
    for (line_no, line) in lines(bytes)? {
        if let Some(header) = line.strip_prefix('>') {
            if let Some(rec) = current.take() {
                out.push(rec.finish()?);
            }
            let name = header.split_whitespace().next().unwrap_or("");
            let (family, id) = match name.split_once('/') {
                Some((fam, id)) if !fam.is_empty() => (Some(fam), id),
                Some((_, id)) => (default_family, id),
                None => (default_family, name),
            };
            if id.is_empty() {
                return Err(SeqError::MalformedHeader { line: line_no });
            }
            let Some(family) = family else {
                return Err(SeqError::MissingFamily {
                    record: id.to_string(),
                    line: line_no,
                });
            };
            current = Some(PendingRecord {
                id: id.to_string(),
                family: family.to_string(),
                header_line: line_no,
                residues: String::new(),
            });
            continue;
        }
        let body = line.trim();
        if body.is_empty() {
            continue;
        }
        let Some(rec) = current.as_mut() else {
            return Err(SeqError::DataBeforeHeader { line: line_no });
        };
        let offset = rec.residues.len();
        let normalized = normalize_residues(body).map_err(|e| SeqError::Residue {
            record: rec.id.clone(),
            line: Some(line_no),
            source: ResidueError {
                ch: e.ch,
                position: offset + e.position,
            },
        })?;
        rec.residues.push_str(&normalized);
    }
    if let Some(rec) = current.take() {
        out.push(rec.finish()?);
    }
    Ok(out)
}

/// Writes sequences as FASTA with `>family/id` headers, one residue line per
/// record, LF line endings.
pub fn serialize_fasta(seqs: &[RnaSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        out.push('>');
        out.push_str(&s.family);
        out.push('/');
        out.push_str(&s.id);
        out.push('\n');
        out.push_str(&s.residues);
        out.push('\n');
    }
    out
}

/// Strips alignment gap characters (`.`, `-`, `~`).
pub fn degap(row: &str) -> String {
    row.chars().filter(|c| !matches!(c, '.' | '-' | '~')).collect()
}

#[derive(Default)]
struct Block {
    accession: Option<String>,
    rows: Vec<(String, String, usize)>,
    names: HashSet<String>,
}

impl Block {
    fn finish(self, default_family: &str) -> Result<Option<Family>, SeqError> {
        if self.rows.is_empty() {
            return Ok(None);
        }
        let accession = self.accession.unwrap_or_else(|| default_family.to_string());
        let mut members = Vec::with_capacity(self.rows.len());
        for (name, aligned, line) in self.rows {
            let residues = normalize_residues(&degap(&aligned)).map_err(|e| SeqError::Residue {
                record: name.clone(),
                line: Some(line),
                source: e,
            })?;
            if residues.is_empty() {
                return Err(SeqError::EmptySequence { record: name, line });
            }
            members.push(RnaSequence {
                id: name,
                family: accession.clone(),
                residues,
            });
        }
        Ok(Some(Family { accession, members }))
    }
}

/// Parses the Stockholm 1.0 subset: sequence rows, `#=GF AC` markup and the
/// `//` block terminator. Each block becomes one family; blocks without an
/// `AC` line take `default_family`.
pub fn parse_stockholm(bytes: &[u8], default_family: &str) -> Result<Vec<Family>, SeqError> {
    let mut families = Vec::new();
    let mut block = Block::default();
    let mut seen_magic = false;
    for (line_no, line) in lines(bytes)? {
        let trimmed = line.trim();
        if !seen_magic {
            if trimmed.is_empty() {
                continue;
            }
            if !trimmed.starts_with("# STOCKHOLM 1.") {
                return Err(SeqError::MissingMagic);
            }
            seen_magic = true;
            continue;
        }
        if trimmed.is_empty() || trimmed.starts_with("# STOCKHOLM") {
            continue;
        }
        if trimmed == "//" {
            if let Some(f) = std::mem::take(&mut block).finish(default_family)? {
                families.push(f);
            }
            continue;
        }
        if let Some(markup) = trimmed.strip_prefix("#=GF") {
            let mut parts = markup.split_whitespace();
            if parts.next() == Some("AC") {
                if let Some(acc) = parts.next() {
                    block.accession = Some(acc.to_string());
                }
            }
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let (Some(name), Some(aligned), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(SeqError::MalformedRow { line: line_no });
        };
        if !block.names.insert(name.to_string()) {
            return Err(SeqError::DuplicateName {
                name: name.to_string(),
            });
        }
        block.rows.push((name.to_string(), aligned.to_string(), line_no));
    }
    if !seen_magic {
        return Err(SeqError::MissingMagic);
    }
    if let Some(f) = block.finish(default_family)? {
        families.push(f);
    }
    Ok(families)
}

/// Groups sequences by family accession (sorted by accession, member order
/// preserved). Fails on a duplicate id within a family.
pub fn group_families(seqs: Vec<RnaSequence>) -> Result<Vec<Family>, SeqError> {
    let mut by_acc: BTreeMap<String, Vec<RnaSequence>> = BTreeMap::new();
    for s in seqs {
        by_acc.entry(s.family.clone()).or_default().push(s);
    }
    by_acc
        .into_iter()
        .map(|(acc, members)| Family::new(acc, members))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_record() {
        let seqs = parse_fasta(b">FAM1/s1\nGAAAC\n", None).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].id, "s1");
        assert_eq!(seqs[0].family, "FAM1");
        assert_eq!(seqs[0].residues(), "GAAAC");
    }

    #[test]
    fn multiline_and_case_fold() {
        let seqs = parse_fasta(b">F/a\nGA\nAAC\n>F/b\nacgu\n", None).unwrap();
        let res: Vec<_> = seqs.iter().map(|s| s.residues()).collect();
        assert_eq!(res, ["GAAAC", "ACGU"]);
    }

    #[test]
    fn crlf_accepted() {
        let seqs = parse_fasta(b">F/a\r\nGA\r\nAAC\r\n", None).unwrap();
        assert_eq!(seqs[0].residues(), "GAAAC");
    }

    #[test]
    fn bad_residue_names_record_and_line() {
        let err = parse_fasta(b">F/a\nGAXAC\n", None).unwrap_err();
        match err {
            SeqError::Residue { record, line, source } => {
                assert_eq!(record, "a");
                assert_eq!(line, Some(2));
                assert_eq!(source.ch, 'X');
                assert_eq!(source.position, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn residue_position_spans_lines() {
        let err = parse_fasta(b">F/a\nGAA\nCN\n", None).unwrap_err();
        assert!(matches!(
            err,
            SeqError::Residue { line: Some(3), source: ResidueError { ch: 'N', position: 5 }, .. }
        ));
    }

    #[test]
    fn header_errors() {
        assert_eq!(
            parse_fasta(b">\nACGU\n", Some("F")).unwrap_err(),
            SeqError::MalformedHeader { line: 1 }
        );
        assert_eq!(
            parse_fasta(b">F/\nACGU\n", None).unwrap_err(),
            SeqError::MalformedHeader { line: 1 }
        );
        assert!(matches!(
            parse_fasta(b">abc\nACGU\n", None).unwrap_err(),
            SeqError::MissingFamily { .. }
        ));
        let seqs = parse_fasta(b">abc desc\nACGU\n", Some("RF1")).unwrap();
        assert_eq!((seqs[0].family.as_str(), seqs[0].id.as_str()), ("RF1", "abc"));
    }

    #[test]
    fn empty_body_rejected() {
        assert!(matches!(
            parse_fasta(b">F/a\n>F/b\nAC\n", None).unwrap_err(),
            SeqError::EmptySequence { .. }
        ));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_residues("acgt").unwrap(), "ACGU");
        assert_eq!(normalize_residues("GAAAC").unwrap(), "GAAAC");
        assert_eq!(
            normalize_residues("GANAC").unwrap_err(),
            ResidueError { ch: 'N', position: 3 }
        );
        for amb in ["R", "Y", "n"] {
            assert!(normalize_residues(amb).is_err());
        }
    }

    #[test]
    fn stockholm_gap_stripping() {
        let fams = parse_stockholm(b"# STOCKHOLM 1.0\ns1 GA--AAC.\n//\n", "DEF").unwrap();
        assert_eq!(fams.len(), 1);
        assert_eq!(fams[0].accession, "DEF");
        assert_eq!(fams[0].members[0].id, "s1");
        assert_eq!(fams[0].members[0].residues(), "GAAAC");
    }

    #[test]
    fn stockholm_accession_and_blocks() {
        let text = "# STOCKHOLM 1.0\n#=GF AC RF00005\n#=GF ID tRNA\na ACGU\nb AC~GU\n//\n\
                    # STOCKHOLM 1.0\nc GGG\n//\n";
        let fams = parse_stockholm(text.as_bytes(), "X").unwrap();
        assert_eq!(fams.len(), 2);
        assert_eq!(fams[0].accession, "RF00005");
        assert_eq!(fams[0].members.len(), 2);
        assert!(fams[0].members.iter().all(|m| m.family == "RF00005"));
        assert_eq!(fams[1].accession, "X");
        assert_eq!(fams[1].members[0].residues(), "GGG");
    }

    #[test]
    fn stockholm_errors() {
        assert_eq!(parse_stockholm(b"s1 ACGU\n//\n", "X").unwrap_err(), SeqError::MissingMagic);
        assert_eq!(parse_stockholm(b"", "X").unwrap_err(), SeqError::MissingMagic);
        assert_eq!(
            parse_stockholm(b"# STOCKHOLM 1.0\ns1 ACGU\ns1 ACGU\n//\n", "X").unwrap_err(),
            SeqError::DuplicateName { name: "s1".into() }
        );
        assert!(matches!(
            parse_stockholm(b"# STOCKHOLM 1.0\ns1 AC-NU\n//\n", "X").unwrap_err(),
            SeqError::Residue { .. }
        ));
    }

    #[test]
    fn group_rejects_duplicate_ids() {
        let seqs = parse_fasta(b">F/a\nAC\n>G/a\nAC\n>F/a\nGG\n", None).unwrap();
        assert!(matches!(group_families(seqs), Err(SeqError::DuplicateName { .. })));
        let seqs = parse_fasta(b">G/a\nAC\n>F/a\nAC\n>F/b\nGG\n", None).unwrap();
        let fams = group_families(seqs).unwrap();
        assert_eq!(fams.iter().map(|f| f.len()).collect::<Vec<_>>(), [2, 1]);
        assert_eq!(fams[0].accession, "F");
    }

    fn seq_strategy() -> impl Strategy<Value = RnaSequence> {
        ("[A-Za-z0-9_]{1,8}", "[A-Za-z0-9_.-]{1,8}", "[ACGU]{1,80}")
            .prop_map(|(fam, id, res)| RnaSequence::new(id, fam, &res).unwrap())
    }

    proptest! {
        #[test]
        fn fasta_round_trip(seqs in prop::collection::vec(seq_strategy(), 0..8)) {
            let text = serialize_fasta(&seqs);
            prop_assert_eq!(parse_fasta(text.as_bytes(), None).unwrap(), seqs);
        }

        #[test]
        fn arbitrary_bytes_never_yield_invalid_sequences(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            if let Ok(seqs) = parse_fasta(&bytes, Some("F")) {
                for s in seqs {
                    prop_assert!(!s.is_empty());
                    prop_assert!(s.residues().bytes().all(|b| b"ACGU".contains(&b)));
                }
            }
        }

        #[test]
        fn fasta_like_noise_never_yields_invalid_sequences(text in "(>[A-Z]{0,2}/?[a-z]{0,2}\n|[ACGUTNacgux ]{0,10}\r?\n){0,12}") {
            if let Ok(seqs) = parse_fasta(text.as_bytes(), None) {
                for s in seqs {
                    prop_assert!(!s.is_empty() && !s.id.is_empty());
                    prop_assert!(s.residues().bytes().all(|b| b"ACGU".contains(&b)));
                }
            }
        }

        #[test]
        fn degap_is_order_preserving_subsequence(row in "[ACGU.~-]{0,60}") {
            let out = degap(&row);
            let mut it = row.chars();
            for c in out.chars() {
                prop_assert!(it.any(|r| r == c));
            }
            prop_assert_eq!(out.len(), row.chars().filter(|c| c.is_ascii_alphabetic()).count());
        }
    }
}
