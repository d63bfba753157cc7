//! Dataset types, JSONL serialization, vocabulary, and split assignment.
//!
//! All files are UTF-8; floats are serialized with 17 significant digits so
//! re-parsing reproduces the exact f64 bit patterns.

use crate::error::{Error, Result};
use crate::hierarchy::CodeTrie;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

// ---- records ----------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabEvent {
    pub var: String,
    pub t: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Visit {
    pub time: f64,
    pub diag: Vec<String>,
    #[serde(rename = "proc")]
    pub proc_codes: Vec<String>,
    pub drug: Vec<String>,
    pub labs: Vec<LabEvent>,
}

impl Visit {
    pub fn all_codes(&self) -> impl Iterator<Item = &String> {
        self.diag.iter().chain(self.proc_codes.iter()).chain(self.drug.iter())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if self.visits.len() < 2 {
            return Err(Error::Data(format!(
                "patient {} has {} visits, need at least 2",
                self.patient_id,
                self.visits.len()
            )));
        }
        for w in self.visits.windows(2) {
            if w[1].time <= w[0].time {
                return Err(Error::Data(format!(
                    "patient {}: visit times not strictly increasing",
                    self.patient_id
                )));
            }
        }
        Ok(())
    }
}

// ---- questions ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QType {
    Boolean,
    Concept,
    Value,
    Count,
}

impl QType {
    pub fn tag(&self) -> &'static str {
        match self {
            QType::Boolean => "boolean",
            QType::Concept => "concept",
            QType::Value => "value",
            QType::Count => "count",
        }
    }
}

/// Canonical answer array. Exact-match comparison treats floats as equal
/// within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub enum Answer {
    Empty,
    Bool(u8),
    Concept(String),
    Value(f64),
    Count(i64),
}

impl Answer {
    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::json;
        match self {
            Answer::Empty => json!([]),
            Answer::Bool(b) => json!([*b]),
            Answer::Concept(s) => json!([s]),
            Answer::Value(v) => json!([*v]),
            Answer::Count(k) => json!([*k]),
        }
    }

    pub fn from_json(value: &serde_json::Value, qtype: QType) -> Result<Answer> {
        let arr = value
            .as_array()
            .ok_or_else(|| Error::Data(format!("answer must be an array, got {value}")))?;
        if arr.is_empty() {
            return Ok(Answer::Empty);
        }
        if arr.len() != 1 {
            return Err(Error::Data(format!("answer arrays hold at most one element: {value}")));
        }
        let v = &arr[0];
        match qtype {
            QType::Boolean => {
                let b = v
                    .as_i64()
                    .filter(|b| *b == 0 || *b == 1)
                    .ok_or_else(|| Error::Data(format!("boolean answer must be 0/1: {value}")))?;
                Ok(Answer::Bool(b as u8))
            }
            QType::Concept => {
                let s = v
                    .as_str()
                    .ok_or_else(|| Error::Data(format!("concept answer must be a string: {value}")))?;
                Ok(Answer::Concept(s.to_string()))
            }
            QType::Value => {
                let f = v
                    .as_f64()
                    .ok_or_else(|| Error::Data(format!("value answer must be a float: {value}")))?;
                Ok(Answer::Value(f))
            }
            QType::Count => {
                let k = v
                    .as_i64()
                    .ok_or_else(|| Error::Data(format!("count answer must be an integer: {value}")))?;
                Ok(Answer::Count(k))
            }
        }
    }

    /// Element-wise exact match with |a-b| <= 1e-9 float equality.
    pub fn exact_match(&self, other: &Answer) -> bool {
        match (self, other) {
            (Answer::Empty, Answer::Empty) => true,
            (Answer::Bool(a), Answer::Bool(b)) => a == b,
            (Answer::Concept(a), Answer::Concept(b)) => a == b,
            (Answer::Value(a), Answer::Value(b)) => (a - b).abs() <= 1e-9,
            (Answer::Count(a), Answer::Count(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QAInstance {
    pub qid: String,
    pub patient_id: String,
    pub qtype: QType,
    pub text: String,
    pub gold: Answer,
}

impl QAInstance {
    pub fn validate(&self) -> Result<()> {
        let ok = match (&self.qtype, &self.gold) {
            (_, Answer::Empty) => true,
            (QType::Boolean, Answer::Bool(_)) => true,
            (QType::Concept, Answer::Concept(_)) => true,
            (QType::Value, Answer::Value(_)) => true,
            (QType::Count, Answer::Count(k)) => *k >= 0,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("question {}: gold answer shape does not match type", self.qid)))
        }
    }

    /// Empty boolean golds are annotation artifacts; they normalize to "no"
    /// for both training and evaluation.
    pub fn normalized_gold(&self) -> Answer {
        match (&self.qtype, &self.gold) {
            (QType::Boolean, Answer::Empty) => Answer::Bool(0),
            _ => self.gold.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct QAWire {
    qid: String,
    patient_id: String,
    #[serde(rename = "type")]
    qtype: QType,
    text: String,
    answer: serde_json::Value,
}

// ---- JSON with 17-significant-digit floats -----------------------------------

struct SigDigits;

impl serde_json::ser::Formatter for SigDigits {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serialize one value as a single JSON line with fixed float formatting.
pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigDigits);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

// ---- file IO ------------------------------------------------------------------

pub fn write_patients(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", to_json_line(r)?)?;
    }
    Ok(())
}

pub fn read_patients(path: &Path) -> Result<Vec<PatientRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: PatientRecord = serde_json::from_str(line)?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_qa(path: &Path, questions: &[QAInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for q in questions {
        let wire = QAWire {
            qid: q.qid.clone(),
            patient_id: q.patient_id.clone(),
            qtype: q.qtype,
            text: q.text.clone(),
            answer: q.gold.to_json(),
        };
        writeln!(f, "{}", to_json_line(&wire)?)?;
    }
    Ok(())
}

pub fn read_qa(path: &Path) -> Result<Vec<QAInstance>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let wire: QAWire = serde_json::from_str(line)?;
        let gold = Answer::from_json(&wire.answer, wire.qtype)?;
        let q = QAInstance {
            qid: wire.qid,
            patient_id: wire.patient_id,
            qtype: wire.qtype,
            text: wire.text,
            gold,
        };
        q.validate()?;
        out.push(q);
    }
    Ok(out)
}

pub fn write_hierarchy_edges(path: &Path, trie: &CodeTrie) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# parent<TAB>child")?;
    for (p, c) in trie.extract_pairs(false).pairs {
        writeln!(f, "{}\t{}", trie.code(p), trie.code(c))?;
    }
    Ok(())
}

pub fn read_hierarchy(path: &Path) -> Result<CodeTrie> {
    let text = std::fs::read_to_string(path)?;
    CodeTrie::from_text(&text)
}

// ---- splits ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// 8/1/1 split by patient-id hash; no patient appears in two splits.
pub fn split_of(patient_id: &str) -> Split {
    let digest = Sha256::digest(patient_id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    match u64::from_be_bytes(bytes) % 10 {
        0..=7 => Split::Train,
        8 => Split::Valid,
        _ => Split::Test,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

pub fn build_split_manifest(records: &[PatientRecord]) -> SplitManifest {
    let mut m = SplitManifest { train: Vec::new(), valid: Vec::new(), test: Vec::new() };
    for r in records {
        match split_of(&r.patient_id) {
            Split::Train => m.train.push(r.patient_id.clone()),
            Split::Valid => m.valid.push(r.patient_id.clone()),
            Split::Test => m.test.push(r.patient_id.clone()),
        }
    }
    m
}

// ---- vocabulary --------------------------------------------------------------------

pub const PAD_TOKEN: &str = "[PAD]";
pub const CLS_TOKEN: &str = "[CLS]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeKind {
    Special,
    Diagnosis,
    Procedure,
    Drug,
}

/// Code vocabulary with disjoint id ranges per kind. Ids 0 and 1 are the
/// padding and [CLS] sentinels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    codes: Vec<String>,
    kinds: Vec<CodeKind>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    pub diag_range: (usize, usize),
    pub proc_range: (usize, usize),
    pub drug_range: (usize, usize),
}

impl Vocab {
    /// Diagnosis codes come from the trie (all nodes, internal codes
    /// included); procedure and drug codes from the records.
    pub fn build(trie: &CodeTrie, records: &[PatientRecord]) -> Vocab {
        let mut codes = vec![PAD_TOKEN.to_string(), CLS_TOKEN.to_string()];
        let mut kinds = vec![CodeKind::Special, CodeKind::Special];
        let diag_start = codes.len();
        for id in 0..trie.len() {
            codes.push(trie.code(id).to_string());
            kinds.push(CodeKind::Diagnosis);
        }
        let diag_end = codes.len();
        let mut procs: Vec<String> = Vec::new();
        let mut drugs: Vec<String> = Vec::new();
        for r in records {
            for v in &r.visits {
                procs.extend(v.proc_codes.iter().cloned());
                drugs.extend(v.drug.iter().cloned());
            }
        }
        procs.sort();
        procs.dedup();
        drugs.sort();
        drugs.dedup();
        let proc_start = codes.len();
        for p in procs {
            codes.push(p);
            kinds.push(CodeKind::Procedure);
        }
        let proc_end = codes.len();
        let drug_start = codes.len();
        for d in drugs {
            codes.push(d);
            kinds.push(CodeKind::Drug);
        }
        let drug_end = codes.len();
        let index = codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Vocab {
            codes,
            kinds,
            index,
            diag_range: (diag_start, diag_end),
            proc_range: (proc_start, proc_end),
            drug_range: (drug_start, drug_end),
        }
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn id_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn code(&self, id: usize) -> &str {
        &self.codes[id]
    }

    pub fn kind(&self, id: usize) -> CodeKind {
        self.kinds[id]
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn cls_id(&self) -> usize {
        1
    }

    pub fn n_diag(&self) -> usize {
        self.diag_range.1 - self.diag_range.0
    }

    /// Index of a diagnosis code within the diagnosis range.
    pub fn diag_offset(&self, id: usize) -> Option<usize> {
        (self.diag_range.0..self.diag_range.1).contains(&id).then(|| id - self.diag_range.0)
    }
}

/// Whitespace tokenizer vocabulary for question text, built on the training
/// split. Index 0 is the unknown token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

pub const UNK_TOKEN: &str = "[UNK]";

impl TextVocab {
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>) -> TextVocab {
        let mut set: std::collections::BTreeSet<String> = Default::default();
        for t in texts {
            for tok in t.split_whitespace() {
                set.insert(tok.to_string());
            }
        }
        let mut tokens = vec![UNK_TOKEN.to_string()];
        tokens.extend(set);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        TextVocab { tokens, index }
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.index.get(t).copied().unwrap_or(0)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_serialization_round_trips_exactly() {
        let vals = [0.1, 1.0 / 3.0, 5.0, 1e-17, 123456.789012345678, f64::MIN_POSITIVE];
        for v in vals {
            let line = to_json_line(&v).unwrap();
            let back: f64 = serde_json::from_str(&line).unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{v} -> {line} -> {back}");
        }
    }

    #[test]
    fn answer_json_round_trip() {
        let cases = vec![
            (Answer::Empty, QType::Boolean),
            (Answer::Bool(1), QType::Boolean),
            (Answer::Concept("D01.2".into()), QType::Concept),
            (Answer::Value(7.25), QType::Value),
            (Answer::Count(4), QType::Count),
        ];
        for (a, t) in cases {
            let j = a.to_json();
            let back = Answer::from_json(&j, t).unwrap();
            assert!(a.exact_match(&back), "{j}");
        }
        // float tolerance
        assert!(Answer::Value(1.0).exact_match(&Answer::Value(1.0 + 5e-10)));
        assert!(!Answer::Value(1.0).exact_match(&Answer::Value(1.0 + 5e-9)));
    }

    #[test]
    fn boolean_empty_gold_normalizes_to_no() {
        let q = QAInstance {
            qid: "q".into(),
            patient_id: "p".into(),
            qtype: QType::Boolean,
            text: "was code X recorded for this patient".into(),
            gold: Answer::Empty,
        };
        assert_eq!(q.normalized_gold(), Answer::Bool(0));
    }

    #[test]
    fn split_is_stable_and_disjoint() {
        for id in ["p0001", "p0042", "zzz"] {
            assert_eq!(split_of(id), split_of(id));
        }
        // rough proportions over many ids
        let mut counts = [0usize; 3];
        for i in 0..5000 {
            match split_of(&format!("p{i:05}")) {
                Split::Train => counts[0] += 1,
                Split::Valid => counts[1] += 1,
                Split::Test => counts[2] += 1,
            }
        }
        assert!(counts[0] > 3600 && counts[0] < 4400, "{counts:?}");
        assert!(counts[1] > 300 && counts[1] < 700, "{counts:?}");
        assert!(counts[2] > 300 && counts[2] < 700, "{counts:?}");
    }

    #[test]
    fn text_vocab_encodes_with_unk() {
        let v = TextVocab::build(["was code D0 recorded", "how many visits"].into_iter());
        let ids = v.encode("was code D9 recorded");
        assert_eq!(ids[2], 0, "unseen token must map to UNK");
        assert_ne!(ids[0], 0);
    }
}
