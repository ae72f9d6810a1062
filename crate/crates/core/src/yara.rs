//! Structural parser for YARA rule sources.
//!
//! Captures the rule header, tags, meta entries, string definitions and the
//! raw condition text. Conditions are never evaluated. A broken rule is
//! reported on its own and parsing resumes at the next rule header.
//!
//! Text, meta and regex payloads are kept exactly as written (escapes
//! included) so [`YaraRule::to_source`] reproduces an equivalent rule.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::chat::{ChatError, ChatMessage, ChatModel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum MetaValue {
    /// String contents between the quotes, escapes preserved.
    Text(String),
    Int(i64),
    Bool(bool),
}

impl MetaValue {
    pub fn as_display(&self) -> String {
        match self {
            MetaValue::Text(s) => s.clone(),
            MetaValue::Int(i) => i.to_string(),
            MetaValue::Bool(b) => b.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StringKind {
    Text,
    Hex,
    Regex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct YaraString {
    /// `$name`, or `$` for anonymous strings.
    pub name: String,
    pub kind: StringKind,
    /// Text: contents between quotes. Hex: tokens between braces, single
    /// spaced. Regex: contents between slashes.
    pub pattern: String,
    /// Regex flags written after the closing slash (`i`, `s`).
    pub flags: String,
    /// Modifiers such as `nocase`, `wide`, `xor(0x01-0xff)`, in source order.
    pub modifiers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct YaraRule {
    pub identifier: String,
    pub private: bool,
    pub global: bool,
    pub tags: Vec<String>,
    /// Meta entries in source order; keys may repeat.
    pub meta: Vec<(String, MetaValue)>,
    pub strings: Vec<YaraString>,
    pub condition: String,
}

impl YaraRule {
    /// First meta value stored under `key`.
    pub fn meta_value(&self, key: &str) -> Option<&MetaValue> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    fn meta_text(&self, key: &str) -> Option<String> {
        self.meta_value(key).map(MetaValue::as_display).filter(|s| !s.trim().is_empty())
    }

    /// Renders the rule back to YARA source.
    pub fn to_source(&self) -> String {
        let mut out = String::new();
        if self.private {
            out.push_str("private ");
        }
        if self.global {
            out.push_str("global ");
        }
        out.push_str("rule ");
        out.push_str(&self.identifier);
        if !self.tags.is_empty() {
            out.push_str(" : ");
            out.push_str(&self.tags.join(" "));
        }
        out.push_str("\n{\n");
        if !self.meta.is_empty() {
            out.push_str("    meta:\n");
            for (k, v) in &self.meta {
                let _ = match v {
                    MetaValue::Text(s) => writeln!(out, "        {k} = \"{s}\""),
                    MetaValue::Int(i) => writeln!(out, "        {k} = {i}"),
                    MetaValue::Bool(b) => writeln!(out, "        {k} = {b}"),
                };
            }
        }
        if !self.strings.is_empty() {
            out.push_str("    strings:\n");
            for s in &self.strings {
                let _ = match s.kind {
                    StringKind::Text => write!(out, "        {} = \"{}\"", s.name, s.pattern),
                    StringKind::Hex => write!(out, "        {} = {{ {} }}", s.name, s.pattern),
                    StringKind::Regex => write!(out, "        {} = /{}/{}", s.name, s.pattern, s.flags),
                };
                for m in &s.modifiers {
                    out.push(' ');
                    out.push_str(m);
                }
                out.push('\n');
            }
        }
        out.push_str("    condition:\n        ");
        out.push_str(&self.condition);
        out.push_str("\n}\n");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("rule {} at line {line}: {reason}", rule.as_deref().unwrap_or("<unnamed>"))]
pub struct RuleSyntaxError {
    /// Byte span from the rule start to the point of failure.
    pub span: Range<usize>,
    /// One-based line of the failure.
    pub line: usize,
    pub rule: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum YaraError {
    #[error("no rule could be recovered ({} syntax errors)", errors.len())]
    TotalParseFailure { errors: Vec<RuleSyntaxError> },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedRuleset {
    pub rules: Vec<YaraRule>,
    pub errors: Vec<RuleSyntaxError>,
}

/// Parses every rule in `source`. Fails only when at least one rule was
/// attempted and none survived.
pub fn parse_yara(source: &str) -> Result<ParsedRuleset, YaraError> {
    let mut p = Parser { src: source, pos: 0 };
    let mut out = ParsedRuleset::default();
    loop {
        p.skip_trivia();
        if p.eof() {
            break;
        }
        let start = p.pos;
        if p.peek_keyword("import") || p.peek_keyword("include") {
            let kw_len = if p.peek_keyword("import") { 6 } else { 7 };
            p.pos += kw_len;
            p.skip_trivia();
            if p.text_literal().is_err() {
                p.pos = start;
                let (line, reason) = (p.line_at(start), "expected a quoted module name".to_string());
                out.errors.push(RuleSyntaxError { span: start..p.pos, line, rule: None, reason });
                p.resync(start + 1);
            }
            continue;
        }
        let mut name = None;
        match p.rule(&mut name) {
            Ok(rule) => out.rules.push(rule),
            Err(reason) => {
                let at = p.pos;
                out.errors.push(RuleSyntaxError { span: start..at, line: p.line_at(at), rule: name, reason });
                p.resync(start + 1);
            }
        }
    }
    if out.rules.is_empty() && !out.errors.is_empty() {
        return Err(YaraError::TotalParseFailure { errors: out.errors });
    }
    Ok(out)
}

/// Serializes a rule list as one source document.
pub fn to_source(rules: &[YaraRule]) -> String {
    let parts: Vec<String> = rules.iter().map(YaraRule::to_source).collect();
    parts.join("\n")
}

type PResult<T> = Result<T, String>;

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

impl<'a> Parser<'a> {
    fn eof(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn line_at(&self, at: usize) -> usize {
        self.src[..at.min(self.src.len())].bytes().filter(|b| *b == b'\n').count() + 1
    }

    fn skip_trivia(&mut self) {
        loop {
            let r = self.rest();
            let trimmed = r.trim_start();
            self.pos += r.len() - trimmed.len();
            if trimmed.starts_with("//") {
                self.pos += trimmed.find('\n').unwrap_or(trimmed.len());
            } else if trimmed.starts_with("/*") {
                self.pos += trimmed[2..].find("*/").map_or(trimmed.len(), |i| i + 4);
            } else {
                break;
            }
        }
    }

    fn peek_keyword(&self, kw: &str) -> bool {
        let r = self.rest();
        r.starts_with(kw) && !r[kw.len()..].chars().next().is_some_and(is_ident_char)
    }

    fn expect_char(&mut self, c: char) -> PResult<()> {
        self.skip_trivia();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            Err(format!("expected '{c}'{}", self.found()))
        }
    }

    fn found(&self) -> String {
        match self.peek() {
            Some(c) => format!(", found '{c}'"),
            None => ", found end of input".to_string(),
        }
    }

    fn ident(&mut self) -> PResult<&'a str> {
        self.skip_trivia();
        let r = self.rest();
        match r.chars().next() {
            Some(c) if is_ident_start(c) => {}
            _ => return Err(format!("expected identifier{}", self.found())),
        }
        let len = r.find(|c: char| !is_ident_char(c)).unwrap_or(r.len());
        self.pos += len;
        Ok(&r[..len])
    }

    /// Skips ahead to the next line that opens a rule or import.
    fn resync(&mut self, from: usize) {
        let mut at = from.min(self.src.len());
        while at < self.src.len() {
            let Some(nl) = self.src[at..].find('\n') else {
                self.pos = self.src.len();
                return;
            };
            at += nl + 1;
            let line = self.src[at..].trim_start_matches([' ', '\t']);
            let indent = self.src.len() - at - line.len();
            let probe = Parser { src: self.src, pos: at + indent };
            if ["rule", "private", "global", "import", "include"].iter().any(|k| probe.peek_keyword(k)) {
                self.pos = at + indent;
                return;
            }
        }
        self.pos = self.src.len();
    }

    fn rule(&mut self, name: &mut Option<String>) -> PResult<YaraRule> {
        let (mut private, mut global) = (false, false);
        loop {
            self.skip_trivia();
            if self.peek_keyword("private") {
                private = true;
                self.pos += 7;
            } else if self.peek_keyword("global") {
                global = true;
                self.pos += 6;
            } else {
                break;
            }
        }
        if !self.peek_keyword("rule") {
            return Err(format!("expected 'rule'{}", self.found()));
        }
        self.pos += 4;
        let identifier = self.ident()?.to_string();
        *name = Some(identifier.clone());
        if identifier.len() > 128 {
            return Err("identifier longer than 128 characters".into());
        }

        let mut tags = Vec::new();
        self.skip_trivia();
        if self.peek() == Some(':') {
            self.pos += 1;
            loop {
                self.skip_trivia();
                if self.peek() == Some('{') {
                    break;
                }
                tags.push(self.ident()?.to_string());
            }
            if tags.is_empty() {
                return Err("expected at least one tag after ':'".into());
            }
        }
        self.expect_char('{')?;

        let mut meta = Vec::new();
        let mut strings = Vec::new();
        self.skip_trivia();
        if self.section("meta") {
            meta = self.meta_entries()?;
        }
        self.skip_trivia();
        if self.section("strings") {
            strings = self.string_entries()?;
        }
        self.skip_trivia();
        if !self.section("condition") {
            return Err(format!("expected 'condition:' section{}", self.found()));
        }
        let condition = self.condition()?;
        self.expect_char('}')?;

        Ok(YaraRule { identifier, private, global, tags, meta, strings, condition })
    }

    /// Consumes `<name>:` if present.
    fn section(&mut self, name: &str) -> bool {
        if !self.peek_keyword(name) {
            return false;
        }
        let save = self.pos;
        self.pos += name.len();
        self.skip_trivia();
        if self.peek() == Some(':') {
            self.pos += 1;
            true
        } else {
            self.pos = save;
            false
        }
    }

    fn at_section_start(&mut self) -> bool {
        let save = self.pos;
        let hit = ["strings", "condition"].iter().any(|s| self.section(s));
        self.pos = save;
        hit
    }

    fn meta_entries(&mut self) -> PResult<Vec<(String, MetaValue)>> {
        let mut out = Vec::new();
        loop {
            self.skip_trivia();
            if self.at_section_start() {
                return Ok(out);
            }
            let key = self.ident()?.to_string();
            self.expect_char('=')?;
            self.skip_trivia();
            let value = match self.peek() {
                Some('"') => MetaValue::Text(self.text_literal()?.to_string()),
                Some(c) if c == '-' || c.is_ascii_digit() => MetaValue::Int(self.integer()?),
                _ if self.peek_keyword("true") => {
                    self.pos += 4;
                    MetaValue::Bool(true)
                }
                _ if self.peek_keyword("false") => {
                    self.pos += 5;
                    MetaValue::Bool(false)
                }
                _ => return Err(format!("invalid meta value for '{key}'{}", self.found())),
            };
            out.push((key, value));
        }
    }

    fn integer(&mut self) -> PResult<i64> {
        let r = self.rest();
        let neg = r.starts_with('-');
        let body = if neg { &r[1..] } else { r };
        let (digits, radix, prefix) = if body.starts_with("0x") || body.starts_with("0X") {
            let d = &body[2..];
            (&d[..d.find(|c: char| !c.is_ascii_hexdigit()).unwrap_or(d.len())], 16, 2)
        } else {
            (&body[..body.find(|c: char| !c.is_ascii_digit()).unwrap_or(body.len())], 10, 0)
        };
        if digits.is_empty() {
            return Err("expected integer".into());
        }
        let v = i64::from_str_radix(digits, radix).map_err(|e| format!("bad integer: {e}"))?;
        self.pos += neg as usize + prefix + digits.len();
        if self.peek().is_some_and(is_ident_char) {
            return Err(format!("unexpected character after integer{}", self.found()));
        }
        Ok(if neg { -v } else { v })
    }

    /// A double-quoted literal; returns the raw contents.
    fn text_literal(&mut self) -> PResult<&'a str> {
        let r = self.rest();
        if !r.starts_with('"') {
            return Err(format!("expected '\"'{}", self.found()));
        }
        let mut escaped = false;
        for (i, c) in r.char_indices().skip(1) {
            match c {
                '\n' => return Err("unterminated string literal".into()),
                '\\' if !escaped => escaped = true,
                '"' if !escaped => {
                    self.pos += i + 1;
                    return Ok(&r[1..i]);
                }
                _ => escaped = false,
            }
        }
        Err("unterminated string literal".into())
    }

    fn string_entries(&mut self) -> PResult<Vec<YaraString>> {
        let mut out: Vec<YaraString> = Vec::new();
        loop {
            self.skip_trivia();
            if self.at_section_start() {
                break;
            }
            if self.peek() != Some('$') {
                return Err(format!("expected string identifier{}", self.found()));
            }
            let r = self.rest();
            let len = 1 + r[1..].find(|c: char| !is_ident_char(c)).unwrap_or(r.len() - 1);
            let name = r[..len].to_string();
            self.pos += len;
            if name != "$" && out.iter().any(|s| s.name == name) {
                return Err(format!("duplicate string identifier {name}"));
            }
            self.expect_char('=')?;
            self.skip_trivia();
            let (kind, pattern, flags) = match self.peek() {
                Some('"') => (StringKind::Text, self.text_literal()?.to_string(), String::new()),
                Some('{') => (StringKind::Hex, self.hex_body()?, String::new()),
                Some('/') => {
                    let (p, f) = self.regex_body()?;
                    (StringKind::Regex, p, f)
                }
                _ => return Err(format!("expected text, hex or regex pattern for {name}{}", self.found())),
            };
            let modifiers = self.modifiers()?;
            out.push(YaraString { name, kind, pattern, flags, modifiers });
        }
        if out.is_empty() {
            return Err("empty strings section".into());
        }
        Ok(out)
    }

    fn hex_body(&mut self) -> PResult<String> {
        self.pos += 1;
        let r = self.rest();
        let end = r.find('}').ok_or("unterminated hex string")?;
        let mut body = String::new();
        // comments are allowed inside hex strings
        let mut inner = Parser { src: &r[..end], pos: 0 };
        loop {
            inner.skip_trivia();
            let Some(c) = inner.peek() else { break };
            let ok = c.is_ascii_hexdigit() || matches!(c, '?' | '~' | '[' | ']' | '-' | '(' | ')' | '|');
            if !ok {
                return Err(format!("invalid character '{c}' in hex string"));
            }
            let tok_len = inner.rest().find(|c: char| c.is_whitespace() || c == '/').unwrap_or(inner.rest().len());
            if !body.is_empty() {
                body.push(' ');
            }
            let tok = &inner.rest()[..tok_len];
            if let Some(bad) = tok.chars().find(|c| !(c.is_ascii_hexdigit() || "?~[]-()|".contains(*c))) {
                return Err(format!("invalid character '{bad}' in hex string"));
            }
            body.push_str(tok);
            inner.pos += tok_len;
        }
        if body.is_empty() {
            return Err("empty hex string".into());
        }
        self.pos += end + 1;
        Ok(body)
    }

    fn regex_body(&mut self) -> PResult<(String, String)> {
        let r = self.rest();
        let mut escaped = false;
        for (i, c) in r.char_indices().skip(1) {
            match c {
                '\n' => return Err("unterminated regular expression".into()),
                '\\' if !escaped => escaped = true,
                '/' if !escaped => {
                    if i == 1 {
                        return Err("empty regular expression".into());
                    }
                    let pattern = r[1..i].to_string();
                    let after = &r[i + 1..];
                    let flen = after.find(|c: char| c != 'i' && c != 's').unwrap_or(after.len());
                    self.pos += i + 1 + flen;
                    return Ok((pattern, after[..flen].to_string()));
                }
                _ => escaped = false,
            }
        }
        Err("unterminated regular expression".into())
    }

    fn modifiers(&mut self) -> PResult<Vec<String>> {
        let mut out = Vec::new();
        loop {
            self.skip_trivia();
            if !self.peek().is_some_and(is_ident_start) || self.at_section_start() {
                return Ok(out);
            }
            let start = self.pos;
            self.ident()?;
            if self.peek() == Some('(') {
                let r = self.rest();
                let close = r.find(')').ok_or("unterminated modifier arguments")?;
                self.pos += close + 1;
            }
            out.push(self.src[start..self.pos].to_string());
        }
    }

    /// Raw condition text up to the rule's closing brace.
    fn condition(&mut self) -> PResult<String> {
        let r = self.rest();
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (i, c) in r.char_indices() {
            if in_str {
                match c {
                    '\\' if !escaped => escaped = true,
                    '"' if !escaped => in_str = false,
                    _ => escaped = false,
                }
                continue;
            }
            match c {
                '"' => in_str = true,
                '{' => depth += 1,
                '}' if depth > 0 => depth -= 1,
                '}' => {
                    let cond = r[..i].trim();
                    if cond.is_empty() {
                        return Err("empty condition".into());
                    }
                    self.pos += i;
                    return Ok(cond.to_string());
                }
                _ => {}
            }
        }
        self.pos = self.src.len();
        Err("missing closing '}' for rule".into())
    }
}

/// Deterministic rule description used when no LLM is configured.
pub fn template_description(rule: &YaraRule) -> String {
    let what = rule.meta_text("description").unwrap_or_else(|| "patterns".to_string());
    let os = rule.meta_text("os").unwrap_or_else(|| "any OS".to_string());
    format!(
        "{}: detects {} targeting {}; matches {} string pattern(s).",
        rule.identifier,
        what,
        os,
        rule.strings.len()
    )
}

const DESCRIBE_INSTRUCTION: &str = "You are a malware analyst. Translate the following YARA rule into a short descriptive text: state what behaviour or artefact it detects, which platforms it targets and which patterns it matches. Answer with the description only.";

/// Description of a rule for the knowledge base: the model's translation
/// when one is supplied, the template otherwise.
pub fn describe_rule(rule: &YaraRule, llm: Option<&dyn ChatModel>) -> Result<String, ChatError> {
    match llm {
        None => Ok(template_description(rule)),
        Some(model) => {
            let messages = [ChatMessage::developer(DESCRIBE_INSTRUCTION), ChatMessage::user(rule.to_source())];
            model.chat(&messages).map(|s| s.trim().to_string())
        }
    }
}
