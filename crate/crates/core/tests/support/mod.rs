//! Reference implementations used as test oracles. Nothing in here calls the
//! code paths it is used to check.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use lmc::dates::{extract_candidates, CanonicalDate};
use lmc::gateway::extract_answer;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn days_in_month(month: u32, year: u32) -> u32 {
    let leap = (year.is_multiple_of(4) && !year.is_multiple_of(100)) || year.is_multiple_of(400);
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if leap => 29,
        2 => 28,
        _ => 0,
    }
}

fn all_digits(s: &[char]) -> bool {
    !s.is_empty() && s.iter().all(|c| c.is_ascii_digit())
}

fn number(s: &[char]) -> u32 {
    s.iter().fold(0, |acc, c| acc * 10 + c.to_digit(10).unwrap())
}

/// Checks one exact substring against the numeric date rule.
fn numeric_rule(sub: &[char]) -> Option<(u32, u32, u32)> {
    let seps: Vec<usize> = sub
        .iter()
        .enumerate()
        .filter(|(_, c)| matches!(c, '/' | '.' | '-'))
        .map(|(i, _)| i)
        .collect();
    let [a, b] = seps[..] else { return None };
    if sub[a] != sub[b] {
        return None;
    }
    let (day, month, year) = (&sub[..a], &sub[a + 1..b], &sub[b + 1..]);
    if !(all_digits(day) && all_digits(month) && all_digits(year)) {
        return None;
    }
    if day.len() > 2 || month.len() > 2 {
        return None;
    }
    let (d, m) = (number(day), number(month));
    if !(1..=31).contains(&d) || !(1..=12).contains(&m) {
        return None;
    }
    let y = match year.len() {
        2 => {
            let yy = number(year);
            if yy > 25 {
                1900 + yy
            } else {
                2000 + yy
            }
        }
        4 => {
            let y = number(year);
            if !(1000..=2999).contains(&y) {
                return None;
            }
            y
        }
        _ => return None,
    };
    (d <= days_in_month(m, y)).then_some((d, m, y))
}

/// Every substring is tried; the ones obeying the numeric rule (with digit
/// runs left intact) are then taken greedily, leftmost first, longest first.
pub fn brute_force_numeric(text: &str) -> Vec<(usize, usize, CanonicalDate)> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut found = Vec::new();
    for i in 0..n {
        for j in i + 1..=n {
            if i > 0 && chars[i - 1].is_ascii_digit() {
                continue;
            }
            if j < n && chars[j].is_ascii_digit() {
                continue;
            }
            if let Some((d, m, y)) = numeric_rule(&chars[i..j]) {
                found.push((i, j, CanonicalDate::new(d, m, y).unwrap()));
            }
        }
    }
    found.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut out = Vec::new();
    let mut end = 0;
    for f in found {
        if f.0 >= end {
            end = f.1;
            out.push(f);
        }
    }
    out
}

/// A scripted cascade instance: documents, a chain, and per (model, doc)
/// replies with latencies.
#[derive(Debug, Clone)]
pub struct Instance {
    pub docs: Vec<(String, String)>,
    pub models: Vec<String>,
    pub replies: HashMap<(String, String), (f64, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRecord {
    pub document_id: String,
    pub stage_index: Option<usize>,
    pub model_name: Option<String>,
    pub answer: Option<CanonicalDate>,
    pub in_document: bool,
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleStage {
    pub model: String,
    pub documents_in: Vec<String>,
    pub resolved: Vec<String>,
}

fn verdict(inst: &Instance, model: &str, doc: &(String, String)) -> (f64, Option<CanonicalDate>, bool) {
    let (latency, reply) = &inst.replies[&(model.to_string(), doc.0.clone())];
    let answer = extract_answer(reply);
    let ok = answer.is_some_and(|a| extract_candidates(&doc.1).distinct_dates().contains(&a));
    (*latency, answer, ok)
}

/// Walks each document through the models independently.
pub fn simulate_walks(inst: &Instance) -> (Vec<OracleRecord>, Vec<OracleStage>) {
    let mut records = Vec::new();
    let mut stages: Vec<OracleStage> = Vec::new();
    for doc in &inst.docs {
        let mut elapsed = 0.0;
        let mut record = OracleRecord {
            document_id: doc.0.clone(),
            stage_index: None,
            model_name: None,
            answer: None,
            in_document: false,
            elapsed: 0.0,
        };
        for (k, model) in inst.models.iter().enumerate() {
            if stages.len() <= k {
                stages.push(OracleStage {
                    model: model.clone(),
                    documents_in: Vec::new(),
                    resolved: Vec::new(),
                });
            }
            stages[k].documents_in.push(doc.0.clone());
            let (latency, answer, ok) = verdict(inst, model, doc);
            elapsed += latency;
            record.model_name = Some(model.clone());
            record.answer = answer;
            record.in_document = ok;
            if ok {
                record.stage_index = Some(k);
                stages[k].resolved.push(doc.0.clone());
                break;
            }
        }
        record.elapsed = elapsed;
        records.push(record);
    }
    if stages.is_empty() {
        stages.push(OracleStage {
            model: inst.models[0].clone(),
            documents_in: Vec::new(),
            resolved: Vec::new(),
        });
    }
    // Stages nobody reached never ran.
    while stages.len() > 1 && stages.last().unwrap().documents_in.is_empty() {
        stages.pop();
    }
    (records, stages)
}

/// Direct recursive transcription: pop the head model, predict everything,
/// recurse on the failures, merge.
pub fn recursive_chain(inst: &Instance) -> Vec<OracleRecord> {
    fn go(
        inst: &Instance,
        docs: &[&(String, String)],
        models: &[String],
        stage: usize,
        elapsed: &mut HashMap<String, f64>,
    ) -> Vec<OracleRecord> {
        let Some((model, rest)) = models.split_first() else {
            return Vec::new();
        };
        if docs.is_empty() {
            return Vec::new();
        }
        let mut y = Vec::new();
        let mut wrong = Vec::new();
        for doc in docs {
            let (latency, answer, ok) = verdict(inst, model, doc);
            *elapsed.entry(doc.0.clone()).or_insert(0.0) += latency;
            y.push(OracleRecord {
                document_id: doc.0.clone(),
                stage_index: ok.then_some(stage),
                model_name: Some(model.clone()),
                answer,
                in_document: ok,
                elapsed: 0.0,
            });
            if !ok {
                wrong.push(*doc);
            }
        }
        let later = go(inst, &wrong, rest, stage + 1, elapsed);
        let replaced: HashSet<&str> = later.iter().map(|r| r.document_id.as_str()).collect();
        y.retain(|r| !replaced.contains(r.document_id.as_str()));
        y.extend(later);
        y
    }
    let docs: Vec<&(String, String)> = inst.docs.iter().collect();
    let mut elapsed = HashMap::new();
    let mut out = go(inst, &docs, &inst.models, 0, &mut elapsed);
    let order: HashMap<&str, usize> = inst
        .docs
        .iter()
        .enumerate()
        .map(|(i, d)| (d.0.as_str(), i))
        .collect();
    out.sort_by_key(|r| order[r.document_id.as_str()]);
    for r in &mut out {
        r.elapsed = elapsed[&r.document_id];
    }
    out
}
