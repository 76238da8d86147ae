//! Reader for the MATPOWER-style case subset.
//!
//! Recognised statements are `mpc.<field> = <value>;` where the value is a number,
//! a quoted string, a `[...]` matrix or a `{...}` cell array (skipped). `function`
//! headers and `%` comments are ignored. Columns used:
//!
//! * `bus`: `bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin`
//! * `gen`: `bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin`
//! * `branch`: `fbus tbus r x b rateA rateB rateC ratio angle status`
//! * `gencost`: `2 startup shutdown n c(n-1) ... c0` (polynomial, `n <= 3`)
//!
//! Optional extensions, one entry per `gen`/`branch` row:
//!
//! * `ramp`: ramp fraction of `Pmax` (default 0.1)
//! * `gen_outage`, `branch_outage`: 0/1 outage eligibility flags (default 1)
//!
//! Powers are converted to p.u. on `baseMVA`, angles to radians, and cost
//! coefficients to p.u. outputs.

use std::collections::HashMap;
use std::path::Path;

use num_complex::Complex64;

use super::{validate_system, Branch, Bus, BusKind, Generator, Load, PowerSystem};
use crate::error::{Error, Result};

pub const DEFAULT_RAMP: f64 = 0.1;

#[derive(Debug)]
struct Matrix {
    line: usize,
    rows: Vec<Vec<f64>>,
}

enum Value {
    Scalar(f64),
    Matrix(Matrix),
    Other,
}

fn syntax(line: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        message: message.into(),
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '\'' => in_quote = !in_quote,
            '%' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_row(text: &str, line: usize) -> Result<Vec<f64>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| syntax(line, format!("invalid number '{t}'")))
        })
        .collect()
}

fn parse_fields(text: &str) -> Result<HashMap<String, Value>> {
    let lines: Vec<&str> = text.lines().map(strip_comment).collect();
    let mut fields = HashMap::new();
    let mut i = 0;
    while i < lines.len() {
        let lineno = i + 1;
        let line = lines[i].trim();
        i += 1;
        if line.is_empty() || line.starts_with("function") || line == "end" || line == "return" {
            continue;
        }
        let Some((lhs, rhs)) = line.split_once('=') else {
            return Err(syntax(lineno, format!("unrecognised statement '{line}'")));
        };
        let name = lhs
            .trim()
            .strip_prefix("mpc.")
            .ok_or_else(|| syntax(lineno, format!("expected 'mpc.<field> =', found '{}'", lhs.trim())))?;
        if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
            return Err(syntax(lineno, format!("invalid field name '{name}'")));
        }
        let rhs = rhs.trim();
        let value = if let Some(rest) = rhs.strip_prefix('[') {
            let mut rows = Vec::new();
            let mut body = rest.to_string();
            let mut row_line = lineno;
            loop {
                if let Some(end) = body.find(']') {
                    let tail = body[end + 1..].trim();
                    if !(tail.is_empty() || tail == ";") {
                        return Err(syntax(row_line, format!("unexpected text after matrix: '{tail}'")));
                    }
                    push_rows(&body[..end], row_line, &mut rows)?;
                    break;
                }
                push_rows(&body, row_line, &mut rows)?;
                if i >= lines.len() {
                    return Err(syntax(lineno, format!("matrix '{name}' is not terminated")));
                }
                body = lines[i].to_string();
                i += 1;
                row_line = i;
            }
            if let Some(first) = rows.first() {
                let width = first.len();
                if rows.iter().any(|r| r.len() != width) {
                    return Err(syntax(lineno, format!("matrix '{name}' has rows of unequal length")));
                }
            }
            Value::Matrix(Matrix { line: lineno, rows })
        } else if rhs.starts_with('{') {
            let mut depth = rhs.matches('{').count() as i64 - rhs.matches('}').count() as i64;
            while depth > 0 {
                if i >= lines.len() {
                    return Err(syntax(lineno, format!("cell array '{name}' is not terminated")));
                }
                depth += lines[i].matches('{').count() as i64 - lines[i].matches('}').count() as i64;
                i += 1;
            }
            Value::Other
        } else if rhs.starts_with('\'') {
            Value::Other
        } else {
            let token = rhs.trim_end_matches(';').trim();
            let v = token
                .parse::<f64>()
                .map_err(|_| syntax(lineno, format!("invalid value '{token}'")))?;
            Value::Scalar(v)
        };
        fields.insert(name.to_string(), value);
    }
    Ok(fields)
}

fn push_rows(body: &str, line: usize, rows: &mut Vec<Vec<f64>>) -> Result<()> {
    for piece in body.split(';') {
        let row = parse_row(piece, line)?;
        if !row.is_empty() {
            rows.push(row);
        }
    }
    Ok(())
}

fn take_matrix<'a>(
    fields: &'a HashMap<String, Value>,
    name: &str,
    min_cols: usize,
    last_line: usize,
) -> Result<&'a Matrix> {
    match fields.get(name) {
        Some(Value::Matrix(m)) => {
            if let Some(r) = m.rows.first() {
                if r.len() < min_cols {
                    return Err(syntax(
                        m.line,
                        format!("'{name}' needs at least {min_cols} columns, found {}", r.len()),
                    ));
                }
            }
            Ok(m)
        }
        Some(_) => Err(syntax(last_line, format!("'{name}' must be a matrix"))),
        None => Err(syntax(last_line, format!("missing required section '{name}'"))),
    }
}

fn optional_column(
    fields: &HashMap<String, Value>,
    name: &str,
    len: usize,
) -> Result<Option<Vec<f64>>> {
    match fields.get(name) {
        None => Ok(None),
        Some(Value::Matrix(m)) => {
            let values: Vec<f64> = m.rows.iter().flatten().copied().collect();
            if values.len() != len {
                return Err(syntax(
                    m.line,
                    format!("'{name}' has {} entries, expected {len}", values.len()),
                ));
            }
            Ok(Some(values))
        }
        Some(_) => Err(syntax(0, format!("'{name}' must be a matrix"))),
    }
}

/// Parses and validates case text. Quantities are converted to per-unit on `baseMVA`.
pub fn parse_case(text: &str) -> Result<PowerSystem> {
    let last_line = text.lines().count().max(1);
    if text.trim().is_empty() {
        return Err(syntax(1, "empty case file"));
    }
    let fields = parse_fields(text)?;
    let base_mva = match fields.get("baseMVA") {
        Some(Value::Scalar(v)) => *v,
        _ => return Err(syntax(last_line, "missing scalar 'baseMVA'")),
    };
    if !(base_mva > 0.0) {
        return Err(Error::Semantic(vec![format!("baseMVA {base_mva} must be positive")]));
    }
    let bus_m = take_matrix(&fields, "bus", 13, last_line)?;
    let gen_m = take_matrix(&fields, "gen", 10, last_line)?;
    let branch_m = take_matrix(&fields, "branch", 11, last_line)?;
    let cost_m = take_matrix(&fields, "gencost", 4, last_line)?;

    let mut diags = Vec::new();
    let mut bus_index = HashMap::new();
    let mut buses = Vec::with_capacity(bus_m.rows.len());
    let mut loads = Vec::new();
    for (i, r) in bus_m.rows.iter().enumerate() {
        let id = r[0] as usize;
        if bus_index.insert(id, i).is_some() {
            diags.push(format!("duplicate bus id {id}"));
        }
        let kind = match r[1] as i64 {
            1 => BusKind::Load,
            2 => BusKind::Generator,
            3 => BusKind::Slack,
            4 => BusKind::Isolated,
            other => {
                diags.push(format!("bus {id}: unknown bus type {other}"));
                BusKind::Load
            }
        };
        if r[2] != 0.0 || r[3] != 0.0 {
            loads.push(Load {
                bus: i,
                p: r[2] / base_mva,
                q: r[3] / base_mva,
            });
        }
        buses.push(Bus {
            id,
            kind,
            v_min: r[12],
            v_max: r[11],
            shunt: Complex64::new(r[4] / base_mva, r[5] / base_mva),
            v_init: r[7],
            angle_init: r[8].to_radians(),
        });
    }

    let ramp = optional_column(&fields, "ramp", gen_m.rows.len())?;
    let gen_flags = optional_column(&fields, "gen_outage", gen_m.rows.len())?;
    let branch_flags = optional_column(&fields, "branch_outage", branch_m.rows.len())?;
    if cost_m.rows.len() < gen_m.rows.len() {
        diags.push(format!(
            "gencost has {} rows for {} generators",
            cost_m.rows.len(),
            gen_m.rows.len()
        ));
    }

    let mut generators = Vec::new();
    for (g, r) in gen_m.rows.iter().enumerate() {
        if r[7] <= 0.0 {
            continue;
        }
        let Some(&bus) = bus_index.get(&(r[0] as usize)) else {
            diags.push(format!("generator {} references nonexistent bus {}", g + 1, r[0]));
            continue;
        };
        let cost = match cost_m.rows.get(g) {
            Some(c) => match polynomial_cost(c, base_mva) {
                Ok(c) => c,
                Err(msg) => {
                    diags.push(format!("generator {}: {msg}", g + 1));
                    [0.0; 3]
                }
            },
            None => [0.0; 3],
        };
        generators.push(Generator {
            bus,
            p_min: r[9] / base_mva,
            p_max: r[8] / base_mva,
            q_min: r[4] / base_mva,
            q_max: r[3] / base_mva,
            cost,
            ramp: ramp.as_ref().map_or(DEFAULT_RAMP, |v| v[g]),
            p_init: r[1] / base_mva,
            v_set: r[5],
            outage_eligible: gen_flags.as_ref().map_or(true, |v| v[g] != 0.0),
        });
    }

    let mut branches = Vec::new();
    for (b, r) in branch_m.rows.iter().enumerate() {
        if r[10] <= 0.0 {
            continue;
        }
        let (Some(&from), Some(&to)) = (bus_index.get(&(r[0] as usize)), bus_index.get(&(r[1] as usize))) else {
            diags.push(format!("branch {} references a nonexistent bus", b + 1));
            continue;
        };
        let z = Complex64::new(r[2], r[3]);
        let admittance = if z.norm() > 0.0 { z.inv() } else { Complex64::new(0.0, 0.0) };
        branches.push(Branch {
            from,
            to,
            admittance,
            charging: r[4],
            tap: if r[8] == 0.0 { 1.0 } else { r[8] },
            shift: r[9].to_radians(),
            outage_eligible: branch_flags.as_ref().map_or(true, |v| v[b] != 0.0),
        });
    }

    let sys = PowerSystem::new(base_mva, buses, generators, branches, loads);
    diags.extend(validate_system(&sys));
    if diags.is_empty() {
        Ok(sys)
    } else {
        Err(Error::Semantic(diags))
    }
}

fn polynomial_cost(row: &[f64], base_mva: f64) -> std::result::Result<[f64; 3], String> {
    if row[0] as i64 != 2 {
        return Err(format!("only polynomial cost (model 2) is supported, found model {}", row[0]));
    }
    let n = row[3] as usize;
    if n > 3 {
        return Err(format!("cost polynomial of degree {} exceeds 2", n.saturating_sub(1)));
    }
    if row.len() < 4 + n {
        return Err("cost row is shorter than its declared coefficient count".into());
    }
    let mut c = [0.0; 3];
    for (k, &v) in row[4..4 + n].iter().enumerate() {
        c[3 - n + k] = v;
    }
    Ok([c[0] * base_mva * base_mva, c[1] * base_mva, c[2]])
}

pub fn parse_case_file(path: impl AsRef<Path>) -> Result<PowerSystem> {
    parse_case(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "function mpc = tiny
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0 0 0 0 1 1 0 0 1 1.1 0.9;
  2 1 50 10 0 0 1 1 0 0 1 1.1 0.9;
];
mpc.gen = [1 0 0 100 -100 1 100 1 200 0];
mpc.branch = [1 2 0.01 0.1 0.02 0 0 0 0 0 1];
mpc.gencost = [2 0 0 3 0.01 20 5];
";

    #[test]
    fn converts_to_per_unit() {
        let sys = parse_case(TINY).unwrap();
        assert_eq!(sys.n_bus(), 2);
        assert_eq!(sys.loads()[0].p, 0.5);
        let g = &sys.generators()[0];
        assert_eq!(g.p_max, 2.0);
        assert_eq!(g.cost, [0.01 * 1e4, 20.0 * 100.0, 5.0]);
        assert_eq!(g.ramp, DEFAULT_RAMP);
        assert_eq!(sys.n_outage(), 2);
    }

    #[test]
    fn empty_text_is_a_syntax_error() {
        assert!(matches!(parse_case(""), Err(Error::Syntax { .. })));
        assert!(matches!(parse_case("  \n% only a comment\n"), Err(Error::Syntax { .. })));
    }

    #[test]
    fn bad_token_reports_line() {
        let text = TINY.replace("2 1 50 10", "2 1 5x0 10");
        match parse_case(&text) {
            Err(Error::Syntax { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unterminated_matrix_is_rejected() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [\n 1 3 0 0 0 0 1 1 0 0 1 1.1 0.9;\n";
        assert!(matches!(parse_case(text), Err(Error::Syntax { line: 2, .. })));
    }

    #[test]
    fn generator_on_missing_bus_is_semantic() {
        let text = TINY.replace("mpc.gen = [1 0", "mpc.gen = [7 0");
        match parse_case(&text) {
            Err(Error::Semantic(d)) => assert!(d.iter().any(|m| m.contains("nonexistent bus 7"))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn optional_sections_are_honoured() {
        let text = format!("{TINY}mpc.ramp = [0.25];\nmpc.branch_outage = [0];\nmpc.bus_name = {{\n 'a';\n 'b';\n}};\n");
        let sys = parse_case(&text).unwrap();
        assert_eq!(sys.generators()[0].ramp, 0.25);
        assert_eq!(sys.n_outage(), 1);
    }
}
