//! The `nqasm-1` native-gate dialect: parser, canonical serializer and symbol profile.
//!
//! ```text
//! qubits <N>                 # required first statement
//! <gate> <q> [<param>]       # rz <q> <radians>, sx <q>, id <q>, delay <q> <ns>
//! <gate> <q1> <q2>           # cz <q1> <q2>
//! measure <q>
//! barrier
//! reset <q>
//! ```
//!
//! Gate tokens are not checked against any gate list here. Whether a gate is
//! legal depends on the target device and is decided by admissibility.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{ErrorCode, ErrorEnvelope};

/// The only dialect identifier the parser accepts.
pub const DIALECT_NQASM1: &str = "nqasm-1";

/// Gates whose trailing argument is a real-valued parameter.
const PARAMETERIZED_GATES: [&str; 2] = ["rz", "delay"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unsupported dialect '{0}'")]
    UnsupportedDialect(String),
    #[error("line {line}: unexpected token '{token}': {reason}")]
    Syntax {
        line: usize,
        token: String,
        reason: String,
    },
}

impl ParseError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ParseError::UnsupportedDialect(_) => ErrorCode::UnsupportedDialect,
            ParseError::Syntax { .. } => ErrorCode::ParseError,
        }
    }

    pub fn to_envelope(&self) -> ErrorEnvelope {
        let env = ErrorEnvelope::new(self.code(), self.to_string());
        match self {
            ParseError::UnsupportedDialect(d) => env.with_detail(serde_json::json!({ "dialect": d })),
            ParseError::Syntax { line, token, .. } => {
                env.with_detail(serde_json::json!({ "line": line, "token": token }))
            }
        }
    }

    fn syntax(line: usize, token: &str, reason: impl Into<String>) -> Self {
        ParseError::Syntax {
            line,
            token: token.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InstructionKind {
    Gate,
    Measure,
    Barrier,
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub kind: InstructionKind,
    /// Present iff `kind == Gate`.
    pub gate_symbol: Option<String>,
    pub operands: Vec<usize>,
    /// Radians for `rz`, nanoseconds for `delay`.
    pub parameter: Option<f64>,
    /// 1-based source line the statement came from.
    pub line: usize,
}

impl Instruction {
    pub fn gate(symbol: &str, operands: Vec<usize>, parameter: Option<f64>, line: usize) -> Self {
        Self {
            kind: InstructionKind::Gate,
            gate_symbol: Some(symbol.to_string()),
            operands,
            parameter,
            line,
        }
    }

    pub fn symbol(&self) -> Option<&str> {
        self.gate_symbol.as_deref()
    }

    pub fn is_two_qubit_gate(&self) -> bool {
        self.kind == InstructionKind::Gate && self.operands.len() == 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub num_qubits: usize,
    pub instructions: Vec<Instruction>,
    /// Qubits named by `measure` statements, in statement order. Empty means
    /// every qubit is measured at the end.
    pub measured_qubits: Vec<usize>,
    /// Line of the `qubits` header.
    #[serde(default = "default_header_line")]
    pub header_line: usize,
}

fn default_header_line() -> usize {
    1
}

/// Gate symbols, referenced qubits and directed two-qubit pairs of a circuit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolProfile {
    pub gate_symbols: BTreeSet<String>,
    pub referenced_qubits: BTreeSet<usize>,
    pub two_qubit_pairs: BTreeSet<(usize, usize)>,
}

impl Circuit {
    /// Qubits read out at the end, deduplicated, in ascending order.
    pub fn readout_qubits(&self) -> Vec<usize> {
        if self.measured_qubits.is_empty() {
            (0..self.num_qubits).collect()
        } else {
            let set: BTreeSet<usize> = self.measured_qubits.iter().copied().collect();
            set.into_iter().collect()
        }
    }

    /// Canonical text form; `parse(serialize(c))` reproduces `c` up to line numbers.
    pub fn serialize(&self) -> String {
        let mut out = format!("qubits {}\n", self.num_qubits);
        for inst in &self.instructions {
            match inst.kind {
                InstructionKind::Gate => {
                    out.push_str(inst.symbol().unwrap_or_default());
                    for q in &inst.operands {
                        let _ = write!(out, " {q}");
                    }
                    if let Some(p) = inst.parameter {
                        let _ = write!(out, " {}", format_real(p));
                    }
                }
                InstructionKind::Measure => {
                    let _ = write!(out, "measure {}", inst.operands[0]);
                }
                InstructionKind::Reset => {
                    let _ = write!(out, "reset {}", inst.operands[0]);
                }
                InstructionKind::Barrier => out.push_str("barrier"),
            }
            out.push('\n');
        }
        out
    }
}

/// Shortest round-tripping decimal with a fractional part, so that a real
/// parameter never lexes back as a qubit index.
fn format_real(p: f64) -> String {
    let s = format!("{p:?}");
    if s.contains(['.', 'e', 'E']) || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

pub fn parse(source: &str, dialect: &str) -> Result<Circuit, ParseError> {
    if dialect != DIALECT_NQASM1 {
        return Err(ParseError::UnsupportedDialect(dialect.to_string()));
    }

    let mut num_qubits: Option<(usize, usize)> = None;
    let mut instructions = Vec::new();
    let mut measured_qubits = Vec::new();

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let text = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let Some((&head, args)) = tokens.split_first() else {
            continue;
        };

        let Some((n, _)) = num_qubits else {
            if head != "qubits" {
                return Err(ParseError::syntax(line, head, "first statement must be 'qubits <N>'"));
            }
            let [count] = args else {
                let tok = args.get(1).or(args.first()).copied().unwrap_or(head);
                return Err(ParseError::syntax(line, tok, "expected exactly one qubit count"));
            };
            let n = parse_index(count).filter(|n| *n > 0).ok_or_else(|| {
                ParseError::syntax(line, count, "qubit count must be a positive integer")
            })?;
            num_qubits = Some((n, line));
            continue;
        };

        match head {
            "qubits" => {
                return Err(ParseError::syntax(line, head, "duplicate 'qubits' declaration"));
            }
            "barrier" => {
                if let Some(tok) = args.first() {
                    return Err(ParseError::syntax(line, tok, "barrier takes no operands"));
                }
                instructions.push(Instruction {
                    kind: InstructionKind::Barrier,
                    gate_symbol: None,
                    operands: Vec::new(),
                    parameter: None,
                    line,
                });
            }
            "measure" | "reset" => {
                let q = single_operand(line, head, args, n)?;
                let kind = if head == "measure" {
                    measured_qubits.push(q);
                    InstructionKind::Measure
                } else {
                    InstructionKind::Reset
                };
                instructions.push(Instruction {
                    kind,
                    gate_symbol: None,
                    operands: vec![q],
                    parameter: None,
                    line,
                });
            }
            gate => {
                if !is_gate_token(gate) {
                    return Err(ParseError::syntax(line, gate, "not a gate identifier"));
                }
                instructions.push(parse_gate(line, gate, args, n)?);
            }
        }
    }

    let Some((num_qubits, header_line)) = num_qubits else {
        return Err(ParseError::syntax(1, "", "missing 'qubits <N>' declaration"));
    };
    Ok(Circuit {
        num_qubits,
        instructions,
        measured_qubits,
        header_line,
    })
}

fn is_gate_token(tok: &str) -> bool {
    let mut chars = tok.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn parse_index(tok: &str) -> Option<usize> {
    if tok.bytes().all(|b| b.is_ascii_digit()) {
        tok.parse().ok()
    } else {
        None
    }
}

fn parse_real(line: usize, tok: &str) -> Result<f64, ParseError> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(ParseError::syntax(line, tok, "expected a finite decimal number")),
    }
}

fn check_range(line: usize, tok: &str, n: usize) -> Result<usize, ParseError> {
    let q = parse_index(tok)
        .ok_or_else(|| ParseError::syntax(line, tok, "expected a qubit index"))?;
    if q >= n {
        return Err(ParseError::syntax(
            line,
            tok,
            format!("qubit index outside declared register of {n}"),
        ));
    }
    Ok(q)
}

fn single_operand(line: usize, head: &str, args: &[&str], n: usize) -> Result<usize, ParseError> {
    match args {
        [q] => check_range(line, q, n),
        [] => Err(ParseError::syntax(line, head, "missing qubit operand")),
        [_, extra, ..] => Err(ParseError::syntax(line, extra, "too many operands")),
    }
}

fn parse_gate(line: usize, gate: &str, args: &[&str], n: usize) -> Result<Instruction, ParseError> {
    let (qubit_args, parameter) = if PARAMETERIZED_GATES.contains(&gate) {
        let Some((last, rest)) = args.split_last() else {
            return Err(ParseError::syntax(line, gate, "missing operands"));
        };
        (rest, Some(parse_real(line, last)?))
    } else {
        match args.split_last() {
            // An unknown gate may carry a trailing real parameter.
            Some((last, rest)) if parse_index(last).is_none() && last.parse::<f64>().is_ok() => {
                (rest, Some(parse_real(line, last)?))
            }
            _ => (args, None),
        }
    };

    if qubit_args.is_empty() {
        return Err(ParseError::syntax(line, gate, "missing qubit operand"));
    }
    if qubit_args.len() > 2 {
        return Err(ParseError::syntax(line, qubit_args[2], "at most two qubit operands"));
    }
    if gate == "cz" && qubit_args.len() != 2 {
        return Err(ParseError::syntax(line, gate, "cz takes two qubit operands"));
    }
    if matches!(gate, "sx" | "id" | "x" | "rz" | "delay") && qubit_args.len() != 1 {
        return Err(ParseError::syntax(line, qubit_args[1], "one-qubit gate takes one operand"));
    }
    let operands = qubit_args
        .iter()
        .map(|tok| check_range(line, tok, n))
        .collect::<Result<Vec<_>, _>>()?;
    if operands.len() == 2 && operands[0] == operands[1] {
        return Err(ParseError::syntax(line, qubit_args[1], "two-qubit operands must differ"));
    }
    if gate == "delay" && parameter.is_some_and(|d| d < 0.0) {
        return Err(ParseError::syntax(line, args[args.len() - 1], "delay must be nonnegative"));
    }
    Ok(Instruction::gate(gate, operands, parameter, line))
}

/// Extracts gate symbols, referenced qubits and directed two-qubit pairs in one pass.
///
/// Referenced qubits include those read out by the implicit final measurement
/// when the circuit has no `measure` statements.
pub fn symbol_profile(c: &Circuit) -> SymbolProfile {
    let mut profile = SymbolProfile::default();
    for inst in &c.instructions {
        profile.referenced_qubits.extend(inst.operands.iter().copied());
        if inst.kind == InstructionKind::Gate {
            if let Some(sym) = inst.symbol() {
                if !profile.gate_symbols.contains(sym) {
                    profile.gate_symbols.insert(sym.to_string());
                }
            }
            if let [a, b] = inst.operands[..] {
                profile.two_qubit_pairs.insert((a, b));
            }
        }
    }
    if c.measured_qubits.is_empty() {
        profile.referenced_qubits.extend(0..c.num_qubits);
    }
    profile
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(src: &str) -> Circuit {
        parse(src, DIALECT_NQASM1).unwrap()
    }

    #[test]
    fn parses_the_basic_example() {
        let c = p("qubits 2\nsx 0\ncz 0 1\nmeasure 0\nmeasure 1");
        assert_eq!(c.num_qubits, 2);
        assert_eq!(c.instructions.len(), 4);
        assert_eq!(c.instructions[0].symbol(), Some("sx"));
        assert_eq!(c.instructions[1].operands, vec![0, 1]);
        assert_eq!(c.instructions[2].kind, InstructionKind::Measure);
        assert_eq!(c.measured_qubits, vec![0, 1]);
    }

    #[test]
    fn rz_carries_its_angle() {
        let c = p("qubits 1\nrz 0 1.5707963");
        assert_eq!(c.instructions.len(), 1);
        assert_eq!(c.instructions[0].parameter, Some(1.5707963));
        assert!(c.measured_qubits.is_empty());
        assert_eq!(c.readout_qubits(), vec![0]);
    }

    #[test]
    fn unknown_gate_tokens_are_kept() {
        let c = p("qubits 2\ncnot 0 1");
        assert_eq!(c.instructions[0].symbol(), Some("cnot"));
        assert!(c.instructions[0].is_two_qubit_gate());
        let c = p("qubits 1\nu1 0 0.25");
        assert_eq!(c.instructions[0].parameter, Some(0.25));
    }

    #[test]
    fn bad_qubit_count_reports_line_one() {
        let err = parse("qubits x", DIALECT_NQASM1).unwrap_err();
        assert_eq!(
            err,
            ParseError::Syntax {
                line: 1,
                token: "x".into(),
                reason: "qubit count must be a positive integer".into()
            }
        );
        assert_eq!(err.code(), ErrorCode::ParseError);
    }

    #[test]
    fn unknown_dialect_rejected_before_parsing() {
        let err = parse("not even a circuit", "openqasm3").unwrap_err();
        assert_eq!(err.code(), ErrorCode::UnsupportedDialect);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let c = p("# header\n\nqubits 3 # three\n  \nsx 2 # trailing\nbarrier\n");
        assert_eq!(c.num_qubits, 3);
        assert_eq!(c.header_line, 3);
        assert_eq!(c.instructions.len(), 2);
        assert_eq!(c.instructions[0].line, 5);
    }

    #[test]
    fn syntax_errors_carry_line_and_token() {
        let cases = [
            ("sx 0", 1, "sx"),
            ("qubits 2\nqubits 2", 2, "qubits"),
            ("qubits 2\ncz 0 0", 2, "0"),
            ("qubits 2\ncz 0 2", 2, "2"),
            ("qubits 2\nsx 0 1", 2, "1"),
            ("qubits 2\nrz 0 abc", 2, "abc"),
            ("qubits 2\nmeasure", 2, "measure"),
            ("qubits 2\nbarrier 0", 2, "0"),
            ("qubits 2\nCZ 0 1", 2, "CZ"),
            ("qubits 4\nfoo 0 1 2", 2, "2"),
            ("qubits 1\ndelay 0 -5", 2, "-5"),
            ("", 1, ""),
        ];
        for (src, line, token) in cases {
            match parse(src, DIALECT_NQASM1) {
                Err(ParseError::Syntax { line: l, token: t, .. }) => {
                    assert_eq!((l, t.as_str()), (line, token), "source {src:?}");
                }
                other => panic!("expected syntax error for {src:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn profile_of_simple_circuit() {
        let prof = symbol_profile(&p("qubits 2\nsx 0\ncz 0 1"));
        assert_eq!(prof.gate_symbols, ["sx", "cz"].iter().map(|s| s.to_string()).collect());
        assert_eq!(prof.referenced_qubits, [0, 1].into());
        assert_eq!(prof.two_qubit_pairs, [(0, 1)].into());
    }

    #[test]
    fn profile_of_barriers_and_measures() {
        let prof = symbol_profile(&p("qubits 4\nbarrier\nmeasure 1\nmeasure 3\nbarrier"));
        assert!(prof.gate_symbols.is_empty());
        assert_eq!(prof.referenced_qubits, [1, 3].into());
        assert!(prof.two_qubit_pairs.is_empty());
    }

    #[test]
    fn profile_keeps_direction() {
        let prof = symbol_profile(&p("qubits 2\ncz 1 0\ncz 0 1"));
        assert_eq!(prof.two_qubit_pairs, [(1, 0), (0, 1)].into());
    }

    #[test]
    fn serialize_is_canonical() {
        let c = p("qubits 2 # x\n\nrz 0 2\ncz 0 1\nbarrier\nreset 1\nmeasure 0\ndelay 1 35");
        assert_eq!(
            c.serialize(),
            "qubits 2\nrz 0 2.0\ncz 0 1\nbarrier\nreset 1\nmeasure 0\ndelay 1 35.0\n"
        );
    }
}
