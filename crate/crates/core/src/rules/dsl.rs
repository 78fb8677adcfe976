//! Line-oriented rule catalog language.
//!
//! ```text
//! predicate Solid_Red_Light : environment(kind=TrafficLight, signal=Red)
//! constraint C_STOP_OR_DECEL allow {Stop, Decelerate} severity 4 says "Only actions that stop or decelerate are allowed."
//! rule R_red_light: Solid_Red_Light => C_STOP_OR_DECEL because "Red light detected."
//! temporal T_persist (w=2.0): C_STOP_OR_DECEL@-1 & C_STOP_OR_DECEL@-2 => C_STOP_OR_DECEL
//! temporal T_count (w=1.5): count(C_PED_CAUTION >= 2 in last 4) => C_PED_CAUTION
//! ```
//!
//! `#` starts a comment outside string literals. `!` negates an offset atom.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use super::{CatalogError, Constraint, HornRule, RuleCatalog};
use crate::mln::{BodyAtom, TemporalRule};
use crate::predicates::{PredicateDef, Selector};
use crate::scene::{Action, ActionSet, EntityKind, Region, SignKind, SignalState};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    Str(String),
    Colon,
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    Eq,
    Amp,
    Arrow,
    At,
    Bang,
    Ge,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) | Tok::Number(s) => write!(f, "`{s}`"),
            Tok::Str(s) => write!(f, "string {s:?}"),
            Tok::Colon => f.write_str("`:`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::LBrace => f.write_str("`{`"),
            Tok::RBrace => f.write_str("`}`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Eq => f.write_str("`=`"),
            Tok::Amp => f.write_str("`&`"),
            Tok::Arrow => f.write_str("`=>`"),
            Tok::At => f.write_str("`@`"),
            Tok::Bang => f.write_str("`!`"),
            Tok::Ge => f.write_str("`>=`"),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    column: usize,
}

fn perr(line: usize, column: usize, message: impl Into<String>) -> CatalogError {
    CatalogError::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn lex(line_no: usize, line: &str) -> Result<Vec<Spanned>, CatalogError> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        let single = |tok| Spanned { tok, column };
        match c {
            '#' => break,
            c if c.is_whitespace() => i += 1,
            ':' => {
                out.push(single(Tok::Colon));
                i += 1;
            }
            '(' => {
                out.push(single(Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push(single(Tok::RParen));
                i += 1;
            }
            '{' => {
                out.push(single(Tok::LBrace));
                i += 1;
            }
            '}' => {
                out.push(single(Tok::RBrace));
                i += 1;
            }
            ',' => {
                out.push(single(Tok::Comma));
                i += 1;
            }
            '&' => {
                out.push(single(Tok::Amp));
                i += 1;
            }
            '@' => {
                out.push(single(Tok::At));
                i += 1;
            }
            '!' => {
                out.push(single(Tok::Bang));
                i += 1;
            }
            '=' if chars.get(i + 1) == Some(&'>') => {
                out.push(single(Tok::Arrow));
                i += 2;
            }
            '=' => {
                out.push(single(Tok::Eq));
                i += 1;
            }
            '>' if chars.get(i + 1) == Some(&'=') => {
                out.push(single(Tok::Ge));
                i += 2;
            }
            '"' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(perr(line_no, column, "unterminated string")),
                        Some('"') => {
                            i += 1;
                            break;
                        }
                        Some('\\') => {
                            match chars.get(i + 1) {
                                Some('"') => s.push('"'),
                                Some('\\') => s.push('\\'),
                                Some(other) => {
                                    return Err(perr(
                                        line_no,
                                        i + 1,
                                        format!("unknown escape `\\{other}`"),
                                    ))
                                }
                                None => return Err(perr(line_no, column, "unterminated string")),
                            }
                            i += 2;
                        }
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                out.push(Spanned {
                    tok: Tok::Str(s),
                    column,
                });
            }
            c if c.is_ascii_digit()
                || ((c == '-' || c == '+')
                    && chars
                        .get(i + 1)
                        .is_some_and(|n| n.is_ascii_digit() || *n == '.')) =>
            {
                let start = i;
                i += 1;
                while i < chars.len() {
                    let ch = chars[i];
                    let exp_sign = (ch == '-' || ch == '+') && matches!(chars[i - 1], 'e' | 'E');
                    if ch.is_ascii_digit() || ch == '.' || ch == 'e' || ch == 'E' || exp_sign {
                        i += 1;
                    } else {
                        break;
                    }
                }
                out.push(Spanned {
                    tok: Tok::Number(chars[start..i].iter().collect()),
                    column,
                });
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Spanned {
                    tok: Tok::Ident(chars[start..i].iter().collect()),
                    column,
                });
            }
            other => {
                return Err(perr(
                    line_no,
                    column,
                    format!("unexpected character `{other}`"),
                ))
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    toks: &'a [Spanned],
    pos: usize,
    line: usize,
    line_len: usize,
}

impl<'a> Cursor<'a> {
    fn column(&self) -> usize {
        self.toks
            .get(self.pos)
            .map_or(self.line_len + 1, |t| t.column)
    }

    fn error(&self, message: impl Into<String>) -> CatalogError {
        perr(self.line, self.column(), message)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn next(&mut self, what: &str) -> Result<Tok, CatalogError> {
        match self.toks.get(self.pos) {
            Some(t) => {
                self.pos += 1;
                Ok(t.tok.clone())
            }
            None => Err(self.error(format!("expected {what}, found end of line"))),
        }
    }

    fn expect(&mut self, want: Tok) -> Result<(), CatalogError> {
        let column = self.column();
        let got = self.next(&want.to_string())?;
        if got == want {
            Ok(())
        } else {
            Err(perr(
                self.line,
                column,
                format!("expected {want}, found {got}"),
            ))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, CatalogError> {
        let column = self.column();
        match self.next(what)? {
            Tok::Ident(s) => Ok(s),
            other => Err(perr(
                self.line,
                column,
                format!("expected {what}, found {other}"),
            )),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), CatalogError> {
        let column = self.column();
        match self.next(&format!("`{kw}`"))? {
            Tok::Ident(s) if s == kw => Ok(()),
            other => Err(perr(
                self.line,
                column,
                format!("expected `{kw}`, found {other}"),
            )),
        }
    }

    fn string(&mut self, what: &str) -> Result<String, CatalogError> {
        let column = self.column();
        match self.next(what)? {
            Tok::Str(s) => Ok(s),
            other => Err(perr(
                self.line,
                column,
                format!("expected {what}, found {other}"),
            )),
        }
    }

    fn number<T: FromStr>(&mut self, what: &str) -> Result<T, CatalogError> {
        let column = self.column();
        match self.next(what)? {
            Tok::Number(s) => s
                .parse()
                .map_err(|_| perr(self.line, column, format!("invalid {what} `{s}`"))),
            other => Err(perr(
                self.line,
                column,
                format!("expected {what}, found {other}"),
            )),
        }
    }

    fn token_value<T: FromStr>(&mut self, what: &str) -> Result<T, CatalogError> {
        let column = self.column();
        let s = self.ident(what)?;
        s.parse()
            .map_err(|_| perr(self.line, column, format!("unknown {what} `{s}`")))
    }

    fn finish(&self) -> Result<(), CatalogError> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(self.error(format!("unexpected trailing {t}"))),
        }
    }
}

/// Parses and validates a catalog.
pub fn parse_catalog(text: &str) -> Result<RuleCatalog, CatalogError> {
    let mut predicates = Vec::new();
    let mut constraints = Vec::new();
    let mut horn_rules = Vec::new();
    let mut temporal_rules = Vec::new();
    let mut seen = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let toks = lex(line, raw)?;
        if toks.is_empty() {
            continue;
        }
        let mut cur = Cursor {
            toks: &toks,
            pos: 0,
            line,
            line_len: raw.chars().count(),
        };
        let keyword = cur.ident("a declaration keyword")?;
        let id = cur.ident("an identifier")?;
        if !seen.insert(id.clone()) {
            return Err(CatalogError::DuplicateId(id));
        }
        match keyword.as_str() {
            "predicate" => {
                cur.expect(Tok::Colon)?;
                let selector = parse_selector(&mut cur)?;
                predicates.push(PredicateDef::new(id, selector));
            }
            "constraint" => {
                cur.keyword("allow")?;
                cur.expect(Tok::LBrace)?;
                let mut allowed = ActionSet::EMPTY;
                if cur.peek() != Some(&Tok::RBrace) {
                    loop {
                        let a: Action = cur.token_value("action")?;
                        allowed.insert(a);
                        if cur.peek() == Some(&Tok::Comma) {
                            cur.pos += 1;
                        } else {
                            break;
                        }
                    }
                }
                cur.expect(Tok::RBrace)?;
                if allowed.is_empty() {
                    return Err(CatalogError::EmptyAllowedSet(id));
                }
                cur.keyword("severity")?;
                let severity: u8 = cur.number("severity")?;
                cur.keyword("says")?;
                let says = cur.string("verbalization text")?;
                constraints.push(Constraint {
                    id,
                    allowed,
                    severity,
                    says,
                });
            }
            "rule" => {
                cur.expect(Tok::Colon)?;
                let mut antecedent = vec![cur.ident("predicate name")?];
                while cur.peek() == Some(&Tok::Amp) {
                    cur.pos += 1;
                    antecedent.push(cur.ident("predicate name")?);
                }
                cur.expect(Tok::Arrow)?;
                let consequent = cur.ident("constraint id")?;
                let because = parse_because(&mut cur)?;
                horn_rules.push(HornRule {
                    id,
                    antecedent,
                    consequent,
                    because,
                });
            }
            "temporal" => {
                cur.expect(Tok::LParen)?;
                cur.keyword("w")?;
                cur.expect(Tok::Eq)?;
                let weight: f64 = cur.number("weight")?;
                cur.expect(Tok::RParen)?;
                cur.expect(Tok::Colon)?;
                let mut body = vec![parse_body_atom(&mut cur)?];
                while cur.peek() == Some(&Tok::Amp) {
                    cur.pos += 1;
                    body.push(parse_body_atom(&mut cur)?);
                }
                cur.expect(Tok::Arrow)?;
                let head = cur.ident("constraint id")?;
                let because = parse_because(&mut cur)?;
                temporal_rules.push(TemporalRule {
                    id,
                    weight,
                    head,
                    body,
                    because,
                });
            }
            other => {
                return Err(perr(line, 1, format!("unknown declaration `{other}`")));
            }
        }
        cur.finish()?;
    }
    RuleCatalog::new(predicates, constraints, horn_rules, temporal_rules)
}

fn parse_because(cur: &mut Cursor<'_>) -> Result<Option<String>, CatalogError> {
    if matches!(cur.peek(), Some(Tok::Ident(s)) if s == "because") {
        cur.pos += 1;
        Ok(Some(cur.string("cause text")?))
    } else {
        Ok(None)
    }
}

fn parse_body_atom(cur: &mut Cursor<'_>) -> Result<BodyAtom, CatalogError> {
    if matches!(cur.peek(), Some(Tok::Ident(s)) if s == "count")
        && cur.toks.get(cur.pos + 1).map(|t| &t.tok) == Some(&Tok::LParen)
    {
        cur.pos += 2;
        let constraint = cur.ident("constraint id")?;
        cur.expect(Tok::Ge)?;
        let min: usize = cur.number("count threshold")?;
        cur.keyword("in")?;
        cur.keyword("last")?;
        let last: usize = cur.number("window span")?;
        cur.expect(Tok::RParen)?;
        return Ok(BodyAtom::CountAtLeast {
            constraint,
            min,
            last,
        });
    }
    let positive = if cur.peek() == Some(&Tok::Bang) {
        cur.pos += 1;
        false
    } else {
        true
    };
    let constraint = cur.ident("constraint id")?;
    cur.expect(Tok::At)?;
    let column = cur.column();
    let offset: i64 = cur.number("offset")?;
    if offset >= 0 {
        return Err(perr(
            cur.line,
            column,
            format!("offset must be negative, found {offset}"),
        ));
    }
    Ok(BodyAtom::AtOffset {
        offset: offset.unsigned_abs() as usize,
        constraint,
        positive,
    })
}

fn parse_selector(cur: &mut Cursor<'_>) -> Result<Selector, CatalogError> {
    let category_column = cur.column();
    let category = cur.ident("predicate category")?;
    cur.expect(Tok::LParen)?;
    let mut args: Vec<(String, String, usize)> = Vec::new();
    if cur.peek() != Some(&Tok::RParen) {
        loop {
            let column = cur.column();
            let key = cur.ident("argument name")?;
            cur.expect(Tok::Eq)?;
            let value = cur.ident("argument value")?;
            if args.iter().any(|(k, _, _)| *k == key) {
                return Err(perr(cur.line, column, format!("repeated argument `{key}`")));
            }
            args.push((key, value, column));
            if cur.peek() == Some(&Tok::Comma) {
                cur.pos += 1;
            } else {
                break;
            }
        }
    }
    cur.expect(Tok::RParen)?;

    let line = cur.line;
    let allowed: &[&str] = match category.as_str() {
        "action" => &["action"],
        "environment" => &["kind", "signal", "sign", "region"],
        "target_exists" => &["region", "kind"],
        "target_motion" => &["region", "kind", "trend"],
        other => {
            return Err(perr(
                line,
                category_column,
                format!("unknown predicate category `{other}`"),
            ))
        }
    };
    if let Some((k, _, col)) = args.iter().find(|(k, _, _)| !allowed.contains(&k.as_str())) {
        return Err(perr(
            line,
            *col,
            format!("`{category}` takes no argument `{k}`"),
        ));
    }
    fn get<T: FromStr>(
        args: &[(String, String, usize)],
        key: &str,
        line: usize,
    ) -> Result<Option<T>, CatalogError> {
        match args.iter().find(|(k, _, _)| k == key) {
            None => Ok(None),
            Some((_, v, col)) => v
                .parse()
                .map(Some)
                .map_err(|_| perr(line, *col, format!("invalid {key} `{v}`"))),
        }
    }
    let require = |name: &str| {
        perr(
            line,
            category_column,
            format!("`{category}` requires `{name}`"),
        )
    };

    Ok(match category.as_str() {
        "action" => Selector::Action(
            get::<Action>(&args, "action", line)?.ok_or_else(|| require("action"))?,
        ),
        "environment" => Selector::Environment {
            kind: get::<EntityKind>(&args, "kind", line)?.ok_or_else(|| require("kind"))?,
            signal: get::<SignalState>(&args, "signal", line)?,
            sign: get::<SignKind>(&args, "sign", line)?,
            region: get::<Region>(&args, "region", line)?,
        },
        "target_exists" => Selector::TargetExists {
            region: get(&args, "region", line)?.ok_or_else(|| require("region"))?,
            kind: get(&args, "kind", line)?.ok_or_else(|| require("kind"))?,
        },
        _ => Selector::TargetMotion {
            region: get(&args, "region", line)?.ok_or_else(|| require("region"))?,
            kind: get(&args, "kind", line)?.ok_or_else(|| require("kind"))?,
            trend: get(&args, "trend", line)?.ok_or_else(|| require("trend"))?,
        },
    })
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Action(a) => write!(f, "action(action={a})"),
            Selector::Environment {
                kind,
                signal,
                sign,
                region,
            } => {
                write!(f, "environment(kind={kind}")?;
                if let Some(s) = signal {
                    write!(f, ", signal={s}")?;
                }
                if let Some(s) = sign {
                    write!(f, ", sign={s}")?;
                }
                if let Some(r) = region {
                    write!(f, ", region={r}")?;
                }
                f.write_str(")")
            }
            Selector::TargetExists { region, kind } => {
                write!(f, "target_exists(region={region}, kind={kind})")
            }
            Selector::TargetMotion {
                region,
                kind,
                trend,
            } => write!(
                f,
                "target_motion(region={region}, kind={kind}, trend={trend})"
            ),
        }
    }
}

impl fmt::Display for BodyAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BodyAtom::AtOffset {
                offset,
                constraint,
                positive,
            } => {
                if !positive {
                    f.write_str("!")?;
                }
                write!(f, "{constraint}@-{offset}")
            }
            BodyAtom::CountAtLeast {
                constraint,
                min,
                last,
            } => write!(f, "count({constraint} >= {min} in last {last})"),
        }
    }
}

/// Renders the catalog back into the rule language; `parse_catalog` on the
/// output yields an equal catalog.
impl fmt::Display for RuleCatalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.predicates() {
            writeln!(f, "predicate {} : {}", p.name, p.selector)?;
        }
        for c in self.constraints() {
            write!(f, "constraint {} allow {{", c.id)?;
            for (i, a) in c.allowed.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                f.write_str(a.as_str())?;
            }
            writeln!(f, "}} severity {} says {}", c.severity, quote(&c.says))?;
        }
        for r in self.horn_rules() {
            write!(
                f,
                "rule {}: {} => {}",
                r.id,
                r.antecedent.join(" & "),
                r.consequent
            )?;
            if let Some(b) = &r.because {
                write!(f, " because {}", quote(b))?;
            }
            writeln!(f)?;
        }
        for r in self.temporal_rules() {
            // `{:?}` keeps enough digits for an exact round trip.
            write!(f, "temporal {} (w={:?}): ", r.id, r.weight)?;
            for (i, atom) in r.body.iter().enumerate() {
                if i > 0 {
                    f.write_str(" & ")?;
                }
                write!(f, "{atom}")?;
            }
            write!(f, " => {}", r.head)?;
            if let Some(b) = &r.because {
                write!(f, " because {}", quote(b))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
