//! Line-oriented domain ontology, forward-chaining inference and decision
//! fusion.
//!
//! ```text
//! # comment
//! concept LungOpacity
//! isa LungOpacity OpacityRegion
//! rule R1: LungOpacity & InfectionPattern => Pneumonia
//! map p_cnn >= 0.7 -> LungOpacity
//! ```
//!
//! Mapping fields are `p_cnn`, `age_months` or any metadata key. Values that
//! parse as numbers on both sides compare numerically; otherwise only `==`
//! can hold, by exact string equality. A missing field never matches.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::data::SampleRecord;
use crate::error::{Error, OntologyErrorKind, Result};

pub type FindingSet = BTreeSet<String>;

pub const DEFAULT_ONTOLOGY: &str = include_str!("../assets/pneumonia.onto");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Le,
    Ge,
    Lt,
    Gt,
    Eq,
}

impl CmpOp {
    fn parse(s: &str) -> Option<CmpOp> {
        Some(match s {
            "<=" => CmpOp::Le,
            ">=" => CmpOp::Ge,
            "<" => CmpOp::Lt,
            ">" => CmpOp::Gt,
            "==" => CmpOp::Eq,
            _ => return None,
        })
    }

    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Le => "<=",
            CmpOp::Ge => ">=",
            CmpOp::Lt => "<",
            CmpOp::Gt => ">",
            CmpOp::Eq => "==",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mapping {
    pub field: String,
    pub op: CmpOp,
    pub value: String,
    pub concept: String,
}

impl Mapping {
    pub fn holds(&self, actual: Option<&str>) -> bool {
        let Some(actual) = actual else { return false };
        match (actual.trim().parse::<f64>(), self.value.parse::<f64>()) {
            (Ok(a), Ok(b)) => match self.op {
                CmpOp::Le => a <= b,
                CmpOp::Ge => a >= b,
                CmpOp::Lt => a < b,
                CmpOp::Gt => a > b,
                CmpOp::Eq => a == b,
            },
            _ => self.op == CmpOp::Eq && actual == self.value,
        }
    }
}

impl fmt::Display for Mapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "map {} {} {} -> {}", self.field, self.op.symbol(), self.value, self.concept)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rule {
    pub name: String,
    pub body: Vec<String>,
    pub head: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ontology {
    pub concepts: BTreeSet<String>,
    /// child -> parent edges in file order.
    pub isa: Vec<(String, String)>,
    pub rules: Vec<Rule>,
    pub mappings: Vec<Mapping>,
    parents: BTreeMap<String, Vec<String>>,
}

fn parse_err(line: usize, kind: OntologyErrorKind, msg: impl Into<String>) -> Error {
    Error::OntologyParse {
        line,
        kind,
        msg: msg.into(),
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn ident(s: &str, line: usize, what: &str) -> Result<String> {
    let s = s.trim();
    if is_ident(s) {
        Ok(s.to_string())
    } else {
        Err(parse_err(line, OntologyErrorKind::Malformed, format!("bad {what} identifier `{s}`")))
    }
}

pub fn parse_ontology(text: &str) -> Result<Ontology> {
    use OntologyErrorKind::*;
    let mut o = Ontology::default();
    // (line, concept) pairs checked against declarations once the whole file is read
    let mut refs: Vec<(usize, String)> = Vec::new();
    let mut rule_names = BTreeSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let (keyword, rest) = l.split_once(char::is_whitespace).unwrap_or((l, ""));
        let rest = rest.trim();
        match keyword {
            "concept" => {
                let c = ident(rest, line, "concept")?;
                if !o.concepts.insert(c.clone()) {
                    return Err(parse_err(line, Duplicate, format!("concept `{c}` declared twice")));
                }
            }
            "isa" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [child, parent] = parts[..] else {
                    return Err(parse_err(line, Malformed, "expected `isa <Child> <Parent>`"));
                };
                let (child, parent) = (ident(child, line, "child")?, ident(parent, line, "parent")?);
                if o.isa.iter().any(|(c, p)| *c == child && *p == parent) {
                    return Err(parse_err(line, Duplicate, format!("edge {child} -> {parent} repeated")));
                }
                if child == parent || o.ancestors_of(&parent).contains(&child) {
                    return Err(parse_err(line, Cycle, format!("isa {child} {parent} closes a cycle")));
                }
                o.parents.entry(child.clone()).or_default().push(parent.clone());
                refs.push((line, child.clone()));
                refs.push((line, parent.clone()));
                o.isa.push((child, parent));
            }
            "rule" => {
                let (name, clause) = rest
                    .split_once(':')
                    .ok_or_else(|| parse_err(line, Malformed, "expected `rule <Name>: A & B => C`"))?;
                let name = ident(name, line, "rule")?;
                let (body, head) = clause
                    .split_once("=>")
                    .ok_or_else(|| parse_err(line, Malformed, "rule is missing `=>`"))?;
                let body = body
                    .split('&')
                    .map(|b| ident(b, line, "rule body"))
                    .collect::<Result<Vec<_>>>()?;
                let head = ident(head, line, "rule head")?;
                if !rule_names.insert(name.clone()) {
                    return Err(parse_err(line, Duplicate, format!("rule `{name}` defined twice")));
                }
                refs.extend(body.iter().chain([&head]).map(|c| (line, c.clone())));
                o.rules.push(Rule { name, body, head });
            }
            "map" => {
                let (pred, concept) = rest
                    .split_once("->")
                    .ok_or_else(|| parse_err(line, Malformed, "mapping is missing `->`"))?;
                let parts: Vec<&str> = pred.split_whitespace().collect();
                let [field, op, value] = parts[..] else {
                    return Err(parse_err(line, Malformed, "expected `map <field> <op> <value> -> <Concept>`"));
                };
                let op = CmpOp::parse(op)
                    .ok_or_else(|| parse_err(line, Malformed, format!("unknown operator `{op}`")))?;
                let concept = ident(concept, line, "mapped concept")?;
                refs.push((line, concept.clone()));
                o.mappings.push(Mapping {
                    field: field.to_string(),
                    op,
                    value: value.to_string(),
                    concept,
                });
            }
            other => {
                return Err(parse_err(line, Malformed, format!("unknown directive `{other}`")));
            }
        }
    }
    if let Some((line, c)) = refs.iter().find(|(_, c)| !o.concepts.contains(c)) {
        return Err(parse_err(*line, UndeclaredConcept, format!("`{c}` is not a declared concept")));
    }
    Ok(o)
}

/// Closure under is-a and rules, plus the names of fired rules in firing order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inference {
    pub closure: FindingSet,
    pub trace: Vec<String>,
}

impl Ontology {
    /// Every strict ancestor of `concept` under is-a.
    pub fn ancestors_of(&self, concept: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![concept.to_string()];
        while let Some(c) = stack.pop() {
            for p in self.parents.get(&c).into_iter().flatten() {
                if seen.insert(p.clone()) {
                    stack.push(p.clone());
                }
            }
        }
        seen
    }

    fn insert_with_ancestors(&self, set: &mut FindingSet, concept: &str) {
        if set.insert(concept.to_string()) {
            set.extend(self.ancestors_of(concept));
        }
    }

    pub fn check_declared<'a>(&self, concepts: impl IntoIterator<Item = &'a String>) -> Result<()> {
        for c in concepts {
            if !self.concepts.contains(c) {
                return Err(Error::Ontology(format!("`{c}` is not a declared concept")));
            }
        }
        Ok(())
    }

    /// Least fixpoint of the findings under is-a and the rules. Each pass
    /// walks the rules in file order; a rule fires (and is traced) only when
    /// its body holds and its head is new.
    pub fn infer(&self, findings: &FindingSet) -> Result<Inference> {
        if let Some(c) = findings.iter().find(|c| !self.concepts.contains(*c)) {
            return Err(Error::Usage(format!("finding `{c}` is not a declared concept")));
        }
        let mut closure = FindingSet::new();
        for f in findings {
            self.insert_with_ancestors(&mut closure, f);
        }
        let mut trace = Vec::new();
        loop {
            let mut changed = false;
            for r in &self.rules {
                if !closure.contains(&r.head) && r.body.iter().all(|b| closure.contains(b)) {
                    self.insert_with_ancestors(&mut closure, &r.head);
                    trace.push(r.name.clone());
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        Ok(Inference { closure, trace })
    }

    /// Concepts whose mapping predicate holds for this case.
    pub fn annotate_case(&self, p_cnn: f64, rec: &SampleRecord) -> FindingSet {
        let p = p_cnn.to_string();
        self.mappings
            .iter()
            .filter(|m| {
                let actual = if m.field == "p_cnn" {
                    Some(p.clone())
                } else {
                    rec.field(&m.field)
                };
                m.holds(actual.as_deref())
            })
            .map(|m| m.concept.clone())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    PneumoniaDetected,
    FurtherInvestigation,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::PneumoniaDetected => "Pneumonia detected",
            Verdict::FurtherInvestigation => "Further investigation required",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub target: String,
    /// Detection requires `p_cnn` strictly above this.
    pub threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            target: "Pneumonia".into(),
            threshold: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnosis {
    pub verdict: Verdict,
    pub p_cnn: f64,
    pub inferred: FindingSet,
    pub trace: Vec<String>,
}

pub fn fuse_decision(o: &Ontology, p_cnn: f64, inference: Inference, cfg: &FusionConfig) -> Result<Diagnosis> {
    if !o.concepts.contains(&cfg.target) {
        return Err(Error::Ontology(format!("target `{}` is not a declared concept", cfg.target)));
    }
    let verdict = if p_cnn > cfg.threshold && inference.closure.contains(&cfg.target) {
        Verdict::PneumoniaDetected
    } else {
        Verdict::FurtherInvestigation
    };
    Ok(Diagnosis {
        verdict,
        p_cnn,
        inferred: inference.closure,
        trace: inference.trace,
    })
}

/// Annotate, infer and fuse for one case.
pub fn diagnose(o: &Ontology, p_cnn: f64, rec: &SampleRecord, cfg: &FusionConfig) -> Result<Diagnosis> {
    let findings = o.annotate_case(p_cnn, rec);
    let inference = o.infer(&findings)?;
    fuse_decision(o, p_cnn, inference, cfg)
}
