//! The sixteen behavioral feature codes, per-file feature vectors and the
//! signature manifest that maps Python modules and literals onto codes.
//!
//! The syntax-tree walk itself lives in the std crate; this module owns the
//! taxonomy and every decision that does not need a parser.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::text::contains_ignore_case;

/// One behavioral indicator. Declaration order is the canonical taxonomy
/// order and is used to break ties between features first seen at the same
/// source offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureCode {
    R1,
    R2,
    R3,
    R4,
    R5,
    T1,
    T2,
    T3,
    E1,
    E2,
    E3,
    E4,
    P1,
    P2,
    P3,
    P4,
}

impl FeatureCode {
    pub const ALL: [FeatureCode; 16] = [
        FeatureCode::R1,
        FeatureCode::R2,
        FeatureCode::R3,
        FeatureCode::R4,
        FeatureCode::R5,
        FeatureCode::T1,
        FeatureCode::T2,
        FeatureCode::T3,
        FeatureCode::E1,
        FeatureCode::E2,
        FeatureCode::E3,
        FeatureCode::E4,
        FeatureCode::P1,
        FeatureCode::P2,
        FeatureCode::P3,
        FeatureCode::P4,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureCode::R1 => "R1",
            FeatureCode::R2 => "R2",
            FeatureCode::R3 => "R3",
            FeatureCode::R4 => "R4",
            FeatureCode::R5 => "R5",
            FeatureCode::T1 => "T1",
            FeatureCode::T2 => "T2",
            FeatureCode::T3 => "T3",
            FeatureCode::E1 => "E1",
            FeatureCode::E2 => "E2",
            FeatureCode::E3 => "E3",
            FeatureCode::E4 => "E4",
            FeatureCode::P1 => "P1",
            FeatureCode::P2 => "P2",
            FeatureCode::P3 => "P3",
            FeatureCode::P4 => "P4",
        }
    }

    /// Descriptive label used in textual descriptions.
    pub fn label(self) -> &'static str {
        match self {
            FeatureCode::R1 => "import operating system module",
            FeatureCode::R2 => "use operating system module call",
            FeatureCode::R3 => "import file system module",
            FeatureCode::R4 => "use file system module file",
            FeatureCode::R5 => "read sensitive information",
            FeatureCode::T1 => "import network module",
            FeatureCode::T2 => "use network module call",
            FeatureCode::T3 => "use URL",
            FeatureCode::E1 => "import encoding module",
            FeatureCode::E2 => "use encoding module call",
            FeatureCode::E3 => "use base64 string",
            FeatureCode::E4 => "use long string",
            FeatureCode::P1 => "import process module",
            FeatureCode::P2 => "use process module call",
            FeatureCode::P3 => "use bash script",
            FeatureCode::P4 => "evaluate code at run-time",
        }
    }

    pub fn from_label(label: &str) -> Option<FeatureCode> {
        FeatureCode::ALL.into_iter().find(|c| c.label() == label)
    }

    /// The "use ... module call" code paired with an import code.
    pub fn call_code(self) -> Option<FeatureCode> {
        match self {
            FeatureCode::R1 => Some(FeatureCode::R2),
            FeatureCode::R3 => Some(FeatureCode::R4),
            FeatureCode::T1 => Some(FeatureCode::T2),
            FeatureCode::E1 => Some(FeatureCode::E2),
            FeatureCode::P1 => Some(FeatureCode::P2),
            _ => None,
        }
    }
}

impl fmt::Display for FeatureCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureCode {
    type Err = UnknownFeatureCode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureCode::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| UnknownFeatureCode(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown feature code {0:?}")]
pub struct UnknownFeatureCode(pub String);

/// Boolean flags for all sixteen codes plus the byte offset at which each set
/// flag was first triggered. An offset exists iff its flag is set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "BTreeMap<FeatureCode, usize>", from = "BTreeMap<FeatureCode, usize>")]
pub struct FeatureVector {
    first_offsets: [Option<usize>; 16],
}

impl FeatureVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks `code` as triggered at `offset`, keeping the earliest offset.
    pub fn record(&mut self, code: FeatureCode, offset: usize) {
        let slot = &mut self.first_offsets[code.index()];
        *slot = Some(slot.map_or(offset, |prev| prev.min(offset)));
    }

    pub fn is_set(&self, code: FeatureCode) -> bool {
        self.first_offsets[code.index()].is_some()
    }

    pub fn first_offset(&self, code: FeatureCode) -> Option<usize> {
        self.first_offsets[code.index()]
    }

    pub fn flags(&self) -> [bool; 16] {
        self.first_offsets.map(|o| o.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.first_offsets.iter().all(Option::is_none)
    }

    pub fn count(&self) -> usize {
        self.first_offsets.iter().filter(|o| o.is_some()).count()
    }

    /// Set codes in taxonomy order.
    pub fn codes(&self) -> Vec<FeatureCode> {
        FeatureCode::ALL.into_iter().filter(|c| self.is_set(*c)).collect()
    }

    /// Set codes ordered by first occurrence; ties broken by taxonomy order.
    pub fn codes_by_occurrence(&self) -> Vec<FeatureCode> {
        let mut v: Vec<(usize, FeatureCode)> = FeatureCode::ALL
            .into_iter()
            .filter_map(|c| self.first_offset(c).map(|o| (o, c)))
            .collect();
        v.sort();
        v.into_iter().map(|(_, c)| c).collect()
    }

    /// Union of two vectors, keeping the earlier offset per code.
    pub fn merge(&mut self, other: &FeatureVector) {
        for code in FeatureCode::ALL {
            if let Some(o) = other.first_offset(code) {
                self.record(code, o);
            }
        }
    }
}

impl From<FeatureVector> for BTreeMap<FeatureCode, usize> {
    fn from(fv: FeatureVector) -> Self {
        FeatureCode::ALL
            .into_iter()
            .filter_map(|c| fv.first_offset(c).map(|o| (c, o)))
            .collect()
    }
}

impl From<BTreeMap<FeatureCode, usize>> for FeatureVector {
    fn from(map: BTreeMap<FeatureCode, usize>) -> Self {
        let mut fv = FeatureVector::new();
        for (c, o) in map {
            fv.record(c, o);
        }
        fv
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest set `{0}` is empty")]
    EmptySet(&'static str),
    #[error("manifest threshold `{0}` must be positive")]
    NonPositive(&'static str),
}

/// Module and literal signatures behind the sixteen features. Every field is
/// replaceable through a manifest file; [`SignatureManifest::default`] is the
/// shipped configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureManifest {
    /// R1 / R2
    pub os_modules: BTreeSet<String>,
    /// R3 / R4
    pub filesystem_modules: BTreeSet<String>,
    /// T1 / T2
    pub network_modules: BTreeSet<String>,
    /// E1 / E2
    pub encoding_modules: BTreeSet<String>,
    /// P1 / P2
    pub process_modules: BTreeSet<String>,
    /// Builtins that open files (R4).
    pub file_builtins: BTreeSet<String>,
    /// Builtins that evaluate code (P4).
    pub eval_builtins: BTreeSet<String>,
    /// Attributes of os-category modules that expose the environment (R5).
    pub environment_attributes: BTreeSet<String>,
    /// Modules whose calls read credentials (R5).
    pub credential_modules: BTreeSet<String>,
    /// Functions of os-category modules that run shell commands; together
    /// with process-module calls they are the command calls checked for P3.
    pub os_command_functions: BTreeSet<String>,
    /// Substrings of string literals that reveal sensitive paths (R5).
    pub sensitive_patterns: Vec<String>,
    /// URL schemes matched case-insensitively as `<scheme>://` (T3).
    pub url_schemes: Vec<String>,
    /// Argument substrings that mark a command call as a shell invocation (P3).
    pub shell_arguments: Vec<String>,
    /// Literal substrings that mark an embedded shell script (P3).
    pub shell_script_markers: Vec<String>,
    /// Minimum length of a base64 literal (E3).
    pub base64_min_len: usize,
    /// Minimum length, in characters, of a long string literal (E4).
    pub long_string_threshold: usize,
}

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| (*s).to_string()).collect()
}

fn list(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| (*s).to_string()).collect()
}

impl Default for SignatureManifest {
    fn default() -> Self {
        Self {
            os_modules: set(&["os", "sys", "platform", "ctypes", "winreg"]),
            filesystem_modules: set(&["shutil", "pathlib", "glob", "tempfile", "io"]),
            network_modules: set(&["socket", "urllib", "http", "requests", "ftplib", "smtplib"]),
            encoding_modules: set(&["base64", "codecs", "binascii", "zlib", "marshal"]),
            process_modules: set(&["subprocess", "multiprocessing"]),
            file_builtins: set(&["open"]),
            eval_builtins: set(&["eval", "exec", "compile", "__import__"]),
            environment_attributes: set(&["environ", "environb", "getenv", "getenvb"]),
            credential_modules: set(&["getpass"]),
            os_command_functions: set(&[
                "system", "popen", "execl", "execle", "execlp", "execlpe", "execv", "execve",
                "execvp", "execvpe", "spawnl", "spawnle", "spawnlp", "spawnlpe", "spawnv",
                "spawnve", "spawnvp", "spawnvpe", "posix_spawn", "posix_spawnp",
            ]),
            sensitive_patterns: list(&[
                "/etc/passwd",
                "/etc/shadow",
                ".ssh",
                "id_rsa",
                "Login Data",
                "Local State",
                "User Data",
                "Mozilla/Firefox",
                "Local Storage/leveldb",
            ]),
            url_schemes: list(&["http", "https", "ftp"]),
            shell_arguments: list(&["bash", "sh -c"]),
            shell_script_markers: list(&["#!/bin/bash", "#!/bin/sh", "#!/usr/bin/env bash", "/bin/bash -c", "/bin/sh -c"]),
            base64_min_len: 16,
            long_string_threshold: 100,
        }
    }
}

impl SignatureManifest {
    pub fn validate(&self) -> Result<(), ManifestError> {
        let sets: [(&'static str, bool); 14] = [
            ("os_modules", self.os_modules.is_empty()),
            ("filesystem_modules", self.filesystem_modules.is_empty()),
            ("network_modules", self.network_modules.is_empty()),
            ("encoding_modules", self.encoding_modules.is_empty()),
            ("process_modules", self.process_modules.is_empty()),
            ("file_builtins", self.file_builtins.is_empty()),
            ("eval_builtins", self.eval_builtins.is_empty()),
            ("environment_attributes", self.environment_attributes.is_empty()),
            ("credential_modules", self.credential_modules.is_empty()),
            ("os_command_functions", self.os_command_functions.is_empty()),
            ("sensitive_patterns", self.sensitive_patterns.is_empty()),
            ("url_schemes", self.url_schemes.is_empty()),
            ("shell_arguments", self.shell_arguments.is_empty()),
            ("shell_script_markers", self.shell_script_markers.is_empty()),
        ];
        if let Some((name, _)) = sets.iter().find(|(_, empty)| *empty) {
            return Err(ManifestError::EmptySet(name));
        }
        if self.base64_min_len == 0 {
            return Err(ManifestError::NonPositive("base64_min_len"));
        }
        if self.long_string_threshold == 0 {
            return Err(ManifestError::NonPositive("long_string_threshold"));
        }
        Ok(())
    }

    /// Import-category code of a dotted module name, judged by its top-level
    /// component. Categories are checked in taxonomy order.
    pub fn classify_module(&self, name: &str) -> Option<FeatureCode> {
        let top = name.split('.').next().unwrap_or(name);
        if top.is_empty() {
            return None;
        }
        [
            (&self.os_modules, FeatureCode::R1),
            (&self.filesystem_modules, FeatureCode::R3),
            (&self.network_modules, FeatureCode::T1),
            (&self.encoding_modules, FeatureCode::E1),
            (&self.process_modules, FeatureCode::P1),
        ]
        .into_iter()
        .find(|(set, _)| set.contains(top))
        .map(|(_, code)| code)
    }

    pub fn is_url(&self, literal: &str) -> bool {
        self.url_schemes.iter().any(|scheme| {
            let mut pat = String::with_capacity(scheme.len() + 3);
            pat.push_str(scheme);
            pat.push_str("://");
            contains_ignore_case(literal, &pat)
        })
    }

    pub fn is_base64(&self, literal: &str) -> bool {
        literal.len() >= self.base64_min_len
            && literal.len() % 4 == 0
            && literal
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'+' || b == b'/' || b == b'=')
            && base64::engine::general_purpose::STANDARD.decode(literal).is_ok()
    }

    pub fn is_long(&self, literal: &str) -> bool {
        literal.chars().count() >= self.long_string_threshold
    }

    pub fn is_sensitive(&self, literal: &str) -> bool {
        self.sensitive_patterns.iter().any(|p| contains_ignore_case(literal, p))
    }

    pub fn is_shell_script(&self, literal: &str) -> bool {
        self.shell_script_markers.iter().any(|m| literal.contains(m.as_str()))
    }

    pub fn is_shell_argument(&self, literal: &str) -> bool {
        self.shell_arguments.iter().any(|m| literal.contains(m.as_str()))
    }

    /// Codes triggered by a string literal on its own.
    pub fn literal_codes(&self, literal: &str) -> Vec<FeatureCode> {
        let mut out = Vec::new();
        if self.is_sensitive(literal) {
            out.push(FeatureCode::R5);
        }
        if self.is_url(literal) {
            out.push(FeatureCode::T3);
        }
        if self.is_base64(literal) {
            out.push(FeatureCode::E3);
        }
        if self.is_long(literal) {
            out.push(FeatureCode::E4);
        }
        if self.is_shell_script(literal) {
            out.push(FeatureCode::P3);
        }
        out
    }
}
