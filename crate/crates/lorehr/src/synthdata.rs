//! Deterministic synthetic-EHR benchmark: code hierarchy, patient
//! trajectories with a learnable next-visit structure, lab events, and
//! templated QA pairs of all four types (plus no-answer cases).
//!
//! Everything is a pure function of (seed, config); per-patient streams are
//! derived so generation order never matters.

use crate::data::{Answer, LabEvent, PatientRecord, QAInstance, QType, Visit};
use crate::error::{Error, Result};
use crate::hierarchy::{CodeTrie, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct QaPerPatient {
    pub boolean: usize,
    pub concept: usize,
    pub value: usize,
    pub count: usize,
}

impl Default for QaPerPatient {
    fn default() -> Self {
        QaPerPatient { boolean: 2, concept: 2, value: 2, count: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    /// Visit counts are min_visits plus a geometric tail, capped.
    pub min_visits: usize,
    pub visit_tail_p: f64,
    pub max_visits: usize,
    /// Children per hierarchy level, root excluded (4 levels by default).
    pub branching: Vec<usize>,
    pub n_lab_variables: usize,
    pub n_procedures: usize,
    pub n_drugs: usize,
    /// Probability that a visit transition is branch-coherent rather than
    /// uniform noise.
    pub transition_coherence: f64,
    pub qa_per_patient: QaPerPatient,
    pub no_answer_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            n_patients: 240,
            min_visits: 2,
            visit_tail_p: 0.45,
            max_visits: 9,
            branching: vec![3, 4, 4, 3],
            n_lab_variables: 8,
            n_procedures: 20,
            n_drugs: 12,
            transition_coherence: 0.9,
            qa_per_patient: QaPerPatient::default(),
            no_answer_rate: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_visits < 2 {
            return Err(Error::Config("min_visits must be at least 2".into()));
        }
        if self.branching.is_empty() || self.branching[0] < 2 {
            return Err(Error::Config("top-level branching must be at least 2".into()));
        }
        if self.branching.iter().any(|&b| b == 0 || b > 36) {
            return Err(Error::Config("branching factors must be in 1..=36".into()));
        }
        for (what, p) in [
            ("visit_tail_p", self.visit_tail_p),
            ("transition_coherence", self.transition_coherence),
            ("no_answer_rate", self.no_answer_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{what} must be in [0,1], got {p}")));
            }
        }
        if self.max_visits < self.min_visits {
            return Err(Error::Config("max_visits < min_visits".into()));
        }
        if self.n_lab_variables == 0 {
            return Err(Error::Config("need at least one lab variable".into()));
        }
        Ok(())
    }

    pub fn lab_variables(&self) -> Vec<String> {
        (0..self.n_lab_variables).map(|i| format!("lab{i}")).collect()
    }
}

const B36: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyz";

/// Deterministic code hierarchy: root "D", one base-36 character per level,
/// a dot before the last level (so prefix truncation and explicit edges
/// agree). Returns the trie and its leaf codes.
pub fn gen_hierarchy(cfg: &SynthConfig) -> Result<(CodeTrie, Vec<String>)> {
    cfg.validate()?;
    let mut edges: Vec<(String, String)> = Vec::new();
    let mut frontier = vec!["D".to_string()];
    for (level, &b) in cfg.branching.iter().enumerate() {
        let last = level + 1 == cfg.branching.len();
        let mut next = Vec::with_capacity(frontier.len() * b);
        for parent in &frontier {
            for k in 0..b {
                let sep = if last && cfg.branching.len() > 1 { "." } else { "" };
                let child = format!("{parent}{sep}{}", B36[k] as char);
                edges.push((parent.clone(), child.clone()));
                next.push(child);
            }
        }
        frontier = next;
    }
    let trie = CodeTrie::from_edges(&edges)?;
    Ok((trie, frontier))
}

fn proc_codes(cfg: &SynthConfig) -> Vec<String> {
    (0..cfg.n_procedures).map(|i| format!("P{i:02}")).collect()
}

fn drug_codes(cfg: &SynthConfig) -> Vec<String> {
    (0..cfg.n_drugs).map(|i| format!("M{i:02}")).collect()
}

/// Leaves grouped by their depth-1 chapter, in chapter id order.
fn leaves_by_chapter(trie: &CodeTrie) -> BTreeMap<NodeId, Vec<String>> {
    let mut m: BTreeMap<NodeId, Vec<String>> = BTreeMap::new();
    for leaf in trie.leaves() {
        if let Some(b) = trie.branch_of(leaf) {
            m.entry(b).or_default().push(trie.code(leaf).to_string());
        }
    }
    m
}

fn sample_normal(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn lab_value(var_idx: usize, rng: &mut ChaCha20Rng) -> f64 {
    let mu = (10.0 * (1 + var_idx) as f64).ln();
    let sigma = 0.25 + 0.03 * var_idx as f64;
    (mu + sigma * sample_normal(rng)).exp()
}

pub fn gen_patients(cfg: &SynthConfig, trie: &CodeTrie) -> Result<Vec<PatientRecord>> {
    cfg.validate()?;
    let by_chapter = leaves_by_chapter(trie);
    let chapters: Vec<NodeId> = by_chapter.keys().copied().collect();
    let all_leaves: Vec<String> =
        trie.leaves().iter().map(|&l| trie.code(l).to_string()).collect();
    let chapter_of: BTreeMap<String, NodeId> = trie
        .leaves()
        .iter()
        .map(|&l| (trie.code(l).to_string(), trie.branch_of(l).unwrap()))
        .collect();
    let procs = proc_codes(cfg);
    let drugs = drug_codes(cfg);
    let vars = cfg.lab_variables();

    let mut records = Vec::with_capacity(cfg.n_patients);
    for pi in 0..cfg.n_patients {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1_000_000 + pi as u64);

        let mut n_visits = cfg.min_visits;
        while n_visits < cfg.max_visits && rng.gen::<f64>() < cfg.visit_tail_p {
            n_visits += 1;
        }

        let primary = chapters[rng.gen_range(0..chapters.len())];
        let secondary = {
            let mut s = chapters[rng.gen_range(0..chapters.len())];
            while s == primary && chapters.len() > 1 {
                s = chapters[rng.gen_range(0..chapters.len())];
            }
            s
        };
        let pick_from = |chapter: NodeId, rng: &mut ChaCha20Rng| -> String {
            let leaves = &by_chapter[&chapter];
            leaves[rng.gen_range(0..leaves.len())].clone()
        };

        let mut diag: Vec<String> = Vec::new();
        let n0 = rng.gen_range(1..=3);
        for _ in 0..n0 {
            let ch = if rng.gen::<f64>() < 0.8 { primary } else { secondary };
            diag.push(pick_from(ch, &mut rng));
        }
        diag.sort();
        diag.dedup();

        let mut time = 0.0f64;
        let mut visits = Vec::with_capacity(n_visits);
        for vi in 0..n_visits {
            if vi > 0 {
                let gap = 3.0 - 25.0 * (1.0 - rng.gen::<f64>()).ln();
                time += gap;
                if rng.gen::<f64>() < cfg.transition_coherence {
                    // branch-coherent evolution: codes persist or move
                    // within their own chapter
                    let mut next: Vec<String> = Vec::new();
                    for c in &diag {
                        if rng.gen::<f64>() < 0.65 {
                            next.push(c.clone());
                        } else {
                            next.push(pick_from(chapter_of[c], &mut rng));
                        }
                    }
                    if next.len() < 5 && rng.gen::<f64>() < 0.35 {
                        let anchor = &next[rng.gen_range(0..next.len())];
                        let ch = chapter_of[anchor];
                        next.push(pick_from(ch, &mut rng));
                    }
                    if next.len() > 1 && rng.gen::<f64>() < 0.25 {
                        let drop = rng.gen_range(0..next.len());
                        next.remove(drop);
                    }
                    next.sort();
                    next.dedup();
                    diag = next;
                } else {
                    // uniform noise
                    let n = rng.gen_range(1..=4);
                    let mut next: Vec<String> = (0..n)
                        .map(|_| all_leaves[rng.gen_range(0..all_leaves.len())].clone())
                        .collect();
                    next.sort();
                    next.dedup();
                    diag = next;
                }
            }

            let mut pcs: Vec<String> = (0..rng.gen_range(0..=2usize))
                .map(|_| procs[rng.gen_range(0..procs.len())].clone())
                .collect();
            pcs.sort();
            pcs.dedup();
            let mut dcs: Vec<String> = (0..rng.gen_range(0..=2usize))
                .map(|_| drugs[rng.gen_range(0..drugs.len())].clone())
                .collect();
            dcs.sort();
            dcs.dedup();

            let mut labs = Vec::new();
            for (li, var) in vars.iter().enumerate() {
                if rng.gen::<f64>() < 0.4 {
                    let n_ev = rng.gen_range(1..=2usize);
                    for e in 0..n_ev {
                        labs.push(LabEvent {
                            var: var.clone(),
                            t: time + 0.1 + 0.3 * e as f64 + rng.gen::<f64>() * 0.05,
                            v: lab_value(li, &mut rng),
                        });
                    }
                }
            }

            visits.push(Visit {
                time,
                diag: diag.clone(),
                proc_codes: pcs,
                drug: dcs,
                labs,
            });
        }

        let record = PatientRecord { patient_id: format!("p{pi:05}"), visits };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

// ---- questions ------------------------------------------------------------

/// Parsed form of a templated question; the gold answer of any generated
/// question is re-derivable from this plus the record.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedQuestion {
    CodeRecorded { code: String },
    VarMeasured { var: String },
    FirstDiagOfVisit { visit: usize },
    MostFrequentDiag,
    ValueAgg { agg: ValueAgg, var: String },
    VisitCountWithCode { code: String },
    VarEventCount { var: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueAgg {
    First,
    Last,
    Highest,
    Lowest,
}

impl ValueAgg {
    fn word(&self) -> &'static str {
        match self {
            ValueAgg::First => "first",
            ValueAgg::Last => "last",
            ValueAgg::Highest => "highest",
            ValueAgg::Lowest => "lowest",
        }
    }

    fn from_word(w: &str) -> Option<ValueAgg> {
        match w {
            "first" => Some(ValueAgg::First),
            "last" => Some(ValueAgg::Last),
            "highest" => Some(ValueAgg::Highest),
            "lowest" => Some(ValueAgg::Lowest),
            _ => None,
        }
    }
}

pub fn render_question(q: &ParsedQuestion) -> String {
    match q {
        ParsedQuestion::CodeRecorded { code } => {
            format!("was code {code} recorded for this patient")
        }
        ParsedQuestion::VarMeasured { var } => {
            format!("did any visit record a {var} lab measurement")
        }
        ParsedQuestion::FirstDiagOfVisit { visit } => {
            format!("what was the first diagnosis code of visit {visit}")
        }
        ParsedQuestion::MostFrequentDiag => {
            "which diagnosis code appears most often overall".to_string()
        }
        ParsedQuestion::ValueAgg { agg, var } => {
            format!("what was the {} recorded value of {var}", agg.word())
        }
        ParsedQuestion::VisitCountWithCode { code } => {
            format!("how many visits recorded code {code}")
        }
        ParsedQuestion::VarEventCount { var } => {
            format!("how many {var} measurements were recorded")
        }
    }
}

pub fn parse_question(text: &str) -> Result<ParsedQuestion> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let bad = || Error::Data(format!("unparseable question: {text}"));
    match toks.as_slice() {
        ["was", "code", code, "recorded", "for", "this", "patient"] => {
            Ok(ParsedQuestion::CodeRecorded { code: code.to_string() })
        }
        ["did", "any", "visit", "record", "a", var, "lab", "measurement"] => {
            Ok(ParsedQuestion::VarMeasured { var: var.to_string() })
        }
        ["what", "was", "the", "first", "diagnosis", "code", "of", "visit", v] => {
            let visit = v.parse::<usize>().map_err(|_| bad())?;
            Ok(ParsedQuestion::FirstDiagOfVisit { visit })
        }
        ["which", "diagnosis", "code", "appears", "most", "often", "overall"] => {
            Ok(ParsedQuestion::MostFrequentDiag)
        }
        ["what", "was", "the", agg, "recorded", "value", "of", var] => {
            let agg = ValueAgg::from_word(agg).ok_or_else(bad)?;
            Ok(ParsedQuestion::ValueAgg { agg, var: var.to_string() })
        }
        ["how", "many", "visits", "recorded", "code", code] => {
            Ok(ParsedQuestion::VisitCountWithCode { code: code.to_string() })
        }
        ["how", "many", var, "measurements", "were", "recorded"] => {
            Ok(ParsedQuestion::VarEventCount { var: var.to_string() })
        }
        _ => Err(bad()),
    }
}

/// Lab events of one variable across the whole record, in time order.
pub fn events_for_var<'a>(record: &'a PatientRecord, var: &str) -> Vec<&'a LabEvent> {
    let mut evs: Vec<&LabEvent> = record
        .visits
        .iter()
        .flat_map(|v| v.labs.iter())
        .filter(|e| e.var == var)
        .collect();
    evs.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
    evs
}

/// Rule-based gold computation. Count answers of zero and missing lookups
/// come back as the empty answer.
pub fn answer_oracle(record: &PatientRecord, q: &ParsedQuestion) -> Answer {
    match q {
        ParsedQuestion::CodeRecorded { code } => {
            let found = record.visits.iter().any(|v| v.all_codes().any(|c| c == code));
            Answer::Bool(u8::from(found))
        }
        ParsedQuestion::VarMeasured { var } => {
            let found = record.visits.iter().any(|v| v.labs.iter().any(|e| &e.var == var));
            Answer::Bool(u8::from(found))
        }
        ParsedQuestion::FirstDiagOfVisit { visit } => {
            // 1-based visit index
            match record.visits.get(visit.wrapping_sub(1)) {
                Some(v) if !v.diag.is_empty() => Answer::Concept(v.diag[0].clone()),
                _ => Answer::Empty,
            }
        }
        ParsedQuestion::MostFrequentDiag => {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for v in &record.visits {
                for d in &v.diag {
                    *counts.entry(d).or_insert(0) += 1;
                }
            }
            // BTreeMap order makes ties resolve to the smallest code
            counts
                .iter()
                .max_by_key(|(_, &c)| c)
                .map(|(code, _)| Answer::Concept(code.to_string()))
                .unwrap_or(Answer::Empty)
        }
        ParsedQuestion::ValueAgg { agg, var } => {
            let evs = events_for_var(record, var);
            if evs.is_empty() {
                return Answer::Empty;
            }
            let v = match agg {
                ValueAgg::First => evs[0].v,
                ValueAgg::Last => evs[evs.len() - 1].v,
                ValueAgg::Highest => evs.iter().map(|e| e.v).fold(f64::NEG_INFINITY, f64::max),
                ValueAgg::Lowest => evs.iter().map(|e| e.v).fold(f64::INFINITY, f64::min),
            };
            Answer::Value(v)
        }
        ParsedQuestion::VisitCountWithCode { code } => {
            let k = record.visits.iter().filter(|v| v.all_codes().any(|c| c == code)).count();
            if k == 0 {
                Answer::Empty
            } else {
                Answer::Count(k as i64)
            }
        }
        ParsedQuestion::VarEventCount { var } => {
            let k: usize =
                record.visits.iter().map(|v| v.labs.iter().filter(|e| &e.var == var).count()).sum();
            if k == 0 {
                Answer::Empty
            } else {
                Answer::Count(k as i64)
            }
        }
    }
}

pub fn gen_qa(cfg: &SynthConfig, records: &[PatientRecord]) -> Result<Vec<QAInstance>> {
    cfg.validate()?;
    let (trie, leaves) = gen_hierarchy(cfg)?;
    let _ = trie;
    let vars = cfg.lab_variables();
    let all_codes: Vec<String> = leaves
        .iter()
        .cloned()
        .chain(proc_codes(cfg))
        .chain(drug_codes(cfg))
        .collect();

    let mut out = Vec::new();
    for (pi, record) in records.iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2_000_000 + pi as u64);

        let present: BTreeSet<String> =
            record.visits.iter().flat_map(|v| v.all_codes().cloned()).collect();
        let present_vec: Vec<&String> = present.iter().collect();
        let absent_vec: Vec<&String> =
            all_codes.iter().filter(|c| !present.contains(*c)).collect();
        let vars_with: Vec<&String> = vars
            .iter()
            .filter(|v| record.visits.iter().any(|vi| vi.labs.iter().any(|e| &e.var == **v)))
            .collect();
        let vars_without: Vec<&String> =
            vars.iter().filter(|v| !vars_with.contains(v)).collect();

        let mut push = |qtype: QType,
                        k: usize,
                        parsed: ParsedQuestion,
                        gold: Answer,
                        out: &mut Vec<QAInstance>| {
            let text = render_question(&parsed);
            let q = QAInstance {
                qid: format!("{}-{}{}", record.patient_id, qtype.tag(), k),
                patient_id: record.patient_id.clone(),
                qtype,
                text,
                gold,
            };
            // every emitted gold must be re-derivable by the oracle
            let re = answer_oracle(record, &parsed);
            assert!(
                re.exact_match(&q.normalized_gold()),
                "oracle disagrees on {}: {:?} vs {:?}",
                q.qid,
                re,
                q.normalized_gold()
            );
            out.push(q);
        };

        for k in 0..cfg.qa_per_patient.boolean {
            let no_answer = rng.gen::<f64>() < cfg.no_answer_rate;
            if k % 2 == 0 {
                let parsed = if no_answer && !absent_vec.is_empty() {
                    ParsedQuestion::CodeRecorded {
                        code: absent_vec[rng.gen_range(0..absent_vec.len())].clone(),
                    }
                } else {
                    ParsedQuestion::CodeRecorded {
                        code: present_vec[rng.gen_range(0..present_vec.len())].clone(),
                    }
                };
                let mut gold = answer_oracle(record, &parsed);
                // a slice of negative booleans carries the upstream
                // empty-array annotation artifact
                if gold == Answer::Bool(0) && rng.gen::<f64>() < 0.3 {
                    gold = Answer::Empty;
                }
                push(QType::Boolean, k, parsed, gold, &mut out);
            } else {
                let var = if no_answer && !vars_without.is_empty() {
                    vars_without[rng.gen_range(0..vars_without.len())].clone()
                } else if !vars_with.is_empty() {
                    vars_with[rng.gen_range(0..vars_with.len())].clone()
                } else {
                    vars[rng.gen_range(0..vars.len())].clone()
                };
                let parsed = ParsedQuestion::VarMeasured { var };
                let gold = answer_oracle(record, &parsed);
                push(QType::Boolean, k, parsed, gold, &mut out);
            }
        }

        for k in 0..cfg.qa_per_patient.concept {
            let no_answer = rng.gen::<f64>() < cfg.no_answer_rate;
            if k % 2 == 0 {
                let visit = if no_answer {
                    record.visits.len() + 1 + rng.gen_range(0..3)
                } else {
                    rng.gen_range(1..=record.visits.len())
                };
                let parsed = ParsedQuestion::FirstDiagOfVisit { visit };
                let gold = answer_oracle(record, &parsed);
                push(QType::Concept, k, parsed, gold, &mut out);
            } else {
                let parsed = ParsedQuestion::MostFrequentDiag;
                let gold = answer_oracle(record, &parsed);
                push(QType::Concept, k, parsed, gold, &mut out);
            }
        }

        let aggs = [ValueAgg::First, ValueAgg::Last, ValueAgg::Highest, ValueAgg::Lowest];
        for k in 0..cfg.qa_per_patient.value {
            let no_answer = rng.gen::<f64>() < cfg.no_answer_rate;
            let agg = aggs[rng.gen_range(0..aggs.len())];
            let var = if no_answer && !vars_without.is_empty() {
                vars_without[rng.gen_range(0..vars_without.len())].clone()
            } else if !vars_with.is_empty() {
                vars_with[rng.gen_range(0..vars_with.len())].clone()
            } else {
                vars[rng.gen_range(0..vars.len())].clone()
            };
            let parsed = ParsedQuestion::ValueAgg { agg, var };
            let gold = answer_oracle(record, &parsed);
            push(QType::Value, k, parsed, gold, &mut out);
        }

        for k in 0..cfg.qa_per_patient.count {
            let no_answer = rng.gen::<f64>() < cfg.no_answer_rate;
            if k % 2 == 0 {
                let code = if no_answer && !absent_vec.is_empty() {
                    absent_vec[rng.gen_range(0..absent_vec.len())].clone()
                } else {
                    present_vec[rng.gen_range(0..present_vec.len())].clone()
                };
                let parsed = ParsedQuestion::VisitCountWithCode { code };
                let gold = answer_oracle(record, &parsed);
                push(QType::Count, k, parsed, gold, &mut out);
            } else {
                let var = if no_answer && !vars_without.is_empty() {
                    vars_without[rng.gen_range(0..vars_without.len())].clone()
                } else if !vars_with.is_empty() {
                    vars_with[rng.gen_range(0..vars_with.len())].clone()
                } else {
                    vars[rng.gen_range(0..vars.len())].clone()
                };
                let parsed = ParsedQuestion::VarEventCount { var };
                let gold = answer_oracle(record, &parsed);
                push(QType::Count, k, parsed, gold, &mut out);
            }
        }
    }
    Ok(out)
}

// ---- trajectory-classification labels ---------------------------------------

/// Rule-derived labels for the generic sequence-classification head.
#[derive(Debug, Clone)]
pub struct TaskLabels {
    /// last visit contains a chapter-0 diagnosis
    pub mortality_like: u8,
    /// gap between the last two visits under 30 days
    pub readmission_like: u8,
    /// total record span bucketed into 4 classes
    pub los_like: usize,
    /// chapters present anywhere in the record (multi-hot)
    pub phenotype_like: Vec<u8>,
}

pub const LOS_CLASSES: usize = 4;

pub fn derive_task_labels(record: &PatientRecord, trie: &CodeTrie) -> TaskLabels {
    let chapters: Vec<NodeId> = trie.children(trie.root()).to_vec();
    let chapter_index: BTreeMap<NodeId, usize> =
        chapters.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let chapter_of = |code: &str| -> Option<usize> {
        trie.id_of(code).and_then(|id| trie.branch_of(id)).and_then(|b| chapter_index.get(&b).copied())
    };

    let last = record.visits.last().expect("validated record");
    let mortality_like =
        u8::from(last.diag.iter().filter_map(|c| chapter_of(c)).any(|ch| ch == 0));

    let n = record.visits.len();
    let gap = record.visits[n - 1].time - record.visits[n - 2].time;
    let readmission_like = u8::from(gap < 30.0);

    let span = last.time - record.visits[0].time;
    let los_like = match span {
        s if s < 30.0 => 0,
        s if s < 90.0 => 1,
        s if s < 180.0 => 2,
        _ => 3,
    };

    let mut phenotype_like = vec![0u8; chapters.len()];
    for v in &record.visits {
        for d in &v.diag {
            if let Some(ch) = chapter_of(d) {
                phenotype_like[ch] = 1;
            }
        }
    }

    TaskLabels { mortality_like, readmission_like, los_like, phenotype_like }
}

// ---- statistics ----------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DataStats {
    pub n_patients: usize,
    pub n_visits: usize,
    pub avg_visits_per_patient: f64,
    pub max_visits_per_patient: usize,
    pub n_unique_diagnoses: usize,
    pub n_unique_procedures: usize,
    pub n_unique_drugs: usize,
    pub avg_diag_per_visit: f64,
    pub n_lab_events: usize,
    pub n_questions: usize,
    pub no_answer_fraction: f64,
}

pub fn compute_stats(records: &[PatientRecord], questions: &[QAInstance]) -> DataStats {
    let n_visits: usize = records.iter().map(|r| r.visits.len()).sum();
    let max_visits = records.iter().map(|r| r.visits.len()).max().unwrap_or(0);
    let mut diag: BTreeSet<&str> = BTreeSet::new();
    let mut procs: BTreeSet<&str> = BTreeSet::new();
    let mut drugs: BTreeSet<&str> = BTreeSet::new();
    let mut n_diag_slots = 0usize;
    let mut n_labs = 0usize;
    for r in records {
        for v in &r.visits {
            n_diag_slots += v.diag.len();
            n_labs += v.labs.len();
            diag.extend(v.diag.iter().map(String::as_str));
            procs.extend(v.proc_codes.iter().map(String::as_str));
            drugs.extend(v.drug.iter().map(String::as_str));
        }
    }
    let empties = questions.iter().filter(|q| q.gold == Answer::Empty).count();
    DataStats {
        n_patients: records.len(),
        n_visits,
        avg_visits_per_patient: n_visits as f64 / records.len().max(1) as f64,
        max_visits_per_patient: max_visits,
        n_unique_diagnoses: diag.len(),
        n_unique_procedures: procs.len(),
        n_unique_drugs: drugs.len(),
        avg_diag_per_visit: n_diag_slots as f64 / n_visits.max(1) as f64,
        n_lab_events: n_labs,
        n_questions: questions.len(),
        no_answer_fraction: empties as f64 / questions.len().max(1) as f64,
    }
}

impl DataStats {
    /// Loose sanity bands on the generated shapes.
    pub fn check_bands(&self, cfg: &SynthConfig) -> Result<()> {
        if self.avg_visits_per_patient < cfg.min_visits as f64
            || self.avg_visits_per_patient > cfg.max_visits as f64
        {
            return Err(Error::Data(format!(
                "avg visits {:.2} outside [{}, {}]",
                self.avg_visits_per_patient, cfg.min_visits, cfg.max_visits
            )));
        }
        if self.n_unique_diagnoses == 0 || self.n_lab_events == 0 {
            return Err(Error::Data("degenerate dataset".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hierarchy_counts() {
        let cfg = SynthConfig { branching: vec![2, 2], ..SynthConfig::default() };
        let (trie, leaves) = gen_hierarchy(&cfg).unwrap();
        assert_eq!(leaves.len(), 4);
        assert_eq!(trie.extract_pairs(false).pairs.len(), 6);
        // depth histogram matches the level spec
        let mut hist = [0usize; 3];
        for i in 0..trie.len() {
            hist[trie.depth(i)] += 1;
        }
        assert_eq!(hist, [1, 2, 4]);
    }

    #[test]
    fn hierarchy_deterministic_and_prefix_consistent() {
        let cfg = SynthConfig::default();
        let (a, _) = gen_hierarchy(&cfg).unwrap();
        let (b, _) = gen_hierarchy(&cfg).unwrap();
        assert_eq!(a.codes(), b.codes());
        // prefix parenting over the same code strings rebuilds the same trie
        let rebuilt = CodeTrie::from_codes(a.codes()).unwrap();
        for id in 0..a.len() {
            let code = a.code(id);
            let rid = rebuilt.id_of(code).unwrap();
            assert_eq!(a.depth(id), rebuilt.depth(rid), "{code}");
            let pa = a.parent(id).map(|p| a.code(p));
            let pb = rebuilt.parent(rid).map(|p| rebuilt.code(p));
            assert_eq!(pa, pb, "{code}");
        }
    }

    #[test]
    fn patient_count_and_structure() {
        let cfg = SynthConfig { n_patients: 10, ..SynthConfig::default() };
        let (trie, _) = gen_hierarchy(&cfg).unwrap();
        let records = gen_patients(&cfg, &trie).unwrap();
        assert_eq!(records.len(), 10);
        for r in &records {
            assert!(r.visits.len() >= 2);
            r.validate().unwrap();
        }
    }

    #[test]
    fn full_coherence_keeps_codes_in_their_branches() {
        let cfg = SynthConfig {
            n_patients: 12,
            transition_coherence: 1.0,
            ..SynthConfig::default()
        };
        let (trie, _) = gen_hierarchy(&cfg).unwrap();
        let records = gen_patients(&cfg, &trie).unwrap();
        for r in &records {
            for w in r.visits.windows(2) {
                let prev_branches: BTreeSet<NodeId> = w[0]
                    .diag
                    .iter()
                    .map(|c| trie.branch_of(trie.id_of(c).unwrap()).unwrap())
                    .collect();
                for c in &w[1].diag {
                    let b = trie.branch_of(trie.id_of(c).unwrap()).unwrap();
                    assert!(
                        prev_branches.contains(&b),
                        "code {c} jumped out of branch under full coherence"
                    );
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig { n_patients: 6, ..SynthConfig::default() };
        let (trie, _) = gen_hierarchy(&cfg).unwrap();
        let r1 = gen_patients(&cfg, &trie).unwrap();
        let r2 = gen_patients(&cfg, &trie).unwrap();
        let j1: Vec<String> =
            r1.iter().map(|r| crate::data::to_json_line(r).unwrap()).collect();
        let j2: Vec<String> =
            r2.iter().map(|r| crate::data::to_json_line(r).unwrap()).collect();
        assert_eq!(j1, j2);
        let q1 = gen_qa(&cfg, &r1).unwrap();
        let q2 = gen_qa(&cfg, &r2).unwrap();
        assert_eq!(q1.len(), q2.len());
        for (a, b) in q1.iter().zip(q2.iter()) {
            assert_eq!(a.text, b.text);
            assert!(a.gold.exact_match(&b.gold));
        }
    }

    #[test]
    fn questions_parse_and_oracle_agrees() {
        let cfg = SynthConfig { n_patients: 20, ..SynthConfig::default() };
        let (trie, _) = gen_hierarchy(&cfg).unwrap();
        let records = gen_patients(&cfg, &trie).unwrap();
        let questions = gen_qa(&cfg, &records).unwrap();
        assert_eq!(questions.len(), 20 * 8);
        let by_id: BTreeMap<&str, &PatientRecord> =
            records.iter().map(|r| (r.patient_id.as_str(), r)).collect();
        let mut n_empty = 0;
        for q in &questions {
            q.validate().unwrap();
            let parsed = parse_question(&q.text).unwrap();
            let oracle = answer_oracle(by_id[q.patient_id.as_str()], &parsed);
            assert!(oracle.exact_match(&q.normalized_gold()), "{}: {:?}", q.qid, q.gold);
            if q.gold == Answer::Empty {
                n_empty += 1;
            }
        }
        assert!(n_empty > 0, "expected some no-answer questions");
    }

    #[test]
    fn count_questions_match_brute_force_recount() {
        let cfg = SynthConfig { n_patients: 15, ..SynthConfig::default() };
        let (trie, _) = gen_hierarchy(&cfg).unwrap();
        let records = gen_patients(&cfg, &trie).unwrap();
        let questions = gen_qa(&cfg, &records).unwrap();
        let by_id: BTreeMap<&str, &PatientRecord> =
            records.iter().map(|r| (r.patient_id.as_str(), r)).collect();
        for q in questions.iter().filter(|q| q.qtype == QType::Count) {
            let record = by_id[q.patient_id.as_str()];
            let recount = match parse_question(&q.text).unwrap() {
                ParsedQuestion::VisitCountWithCode { code } => record
                    .visits
                    .iter()
                    .filter(|v| v.all_codes().any(|c| *c == code))
                    .count(),
                ParsedQuestion::VarEventCount { var } => record
                    .visits
                    .iter()
                    .flat_map(|v| v.labs.iter())
                    .filter(|e| e.var == var)
                    .count(),
                other => panic!("count question parsed as {other:?}"),
            };
            let want = if recount == 0 { Answer::Empty } else { Answer::Count(recount as i64) };
            assert!(q.gold.exact_match(&want));
        }
    }

    #[test]
    fn value_questions_reference_real_events() {
        let cfg = SynthConfig { n_patients: 12, ..SynthConfig::default() };
        let (trie, _) = gen_hierarchy(&cfg).unwrap();
        let records = gen_patients(&cfg, &trie).unwrap();
        let questions = gen_qa(&cfg, &records).unwrap();
        let by_id: BTreeMap<&str, &PatientRecord> =
            records.iter().map(|r| (r.patient_id.as_str(), r)).collect();
        for q in questions.iter().filter(|q| q.qtype == QType::Value) {
            if let Answer::Value(gold) = q.gold {
                let record = by_id[q.patient_id.as_str()];
                let hit = record
                    .visits
                    .iter()
                    .flat_map(|v| v.labs.iter())
                    .any(|e| (e.v - gold).abs() <= 1e-9);
                assert!(hit, "{}: gold value not present in record", q.qid);
            }
        }
    }

    #[test]
    fn stats_land_in_bands() {
        let cfg = SynthConfig::default();
        let (trie, _) = gen_hierarchy(&cfg).unwrap();
        let records = gen_patients(&cfg, &trie).unwrap();
        let questions = gen_qa(&cfg, &records).unwrap();
        let stats = compute_stats(&records, &questions);
        stats.check_bands(&cfg).unwrap();
        assert_eq!(stats.n_patients, cfg.n_patients);
        assert!(stats.no_answer_fraction > 0.02 && stats.no_answer_fraction < 0.5);
    }

    #[test]
    fn task_labels_shapes() {
        let cfg = SynthConfig { n_patients: 5, ..SynthConfig::default() };
        let (trie, _) = gen_hierarchy(&cfg).unwrap();
        let records = gen_patients(&cfg, &trie).unwrap();
        for r in &records {
            let l = derive_task_labels(r, &trie);
            assert!(l.los_like < LOS_CLASSES);
            assert_eq!(l.phenotype_like.len(), cfg.branching[0]);
            assert!(l.phenotype_like.iter().any(|&x| x == 1));
        }
    }
}
