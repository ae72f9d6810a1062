//! Textual descriptions of feature vectors:
//! `start entry <package>/<path>, <label>, ..., end of entry.`

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::features::{FeatureCode, FeatureVector};
use crate::label::Label;

const PREFIX: &str = "start entry ";
const SUFFIX: &str = ", end of entry.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextualDescription {
    pub entry_id: String,
    /// Triggered codes in first-occurrence order.
    pub features: Vec<FeatureCode>,
    pub rendered: String,
}

impl TextualDescription {
    pub fn labels(&self) -> Vec<&'static str> {
        self.features.iter().map(|c| c.label()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DescriptionError {
    #[error("description must start with \"start entry \"")]
    MissingStart,
    #[error("description must end with \", end of entry.\"")]
    MissingEnd,
    #[error("empty entry id")]
    EmptyEntry,
}

pub fn entry_id(package_name: &str, rel_path: &str) -> String {
    let mut id = String::with_capacity(package_name.len() + rel_path.len() + 1);
    id.push_str(package_name);
    id.push('/');
    id.push_str(rel_path);
    id
}

/// Renders one file's features. Labels follow first occurrence in the source.
pub fn render_description(package_name: &str, rel_path: &str, fv: &FeatureVector) -> TextualDescription {
    let entry_id = entry_id(package_name, rel_path);
    let features = fv.codes_by_occurrence();
    let mut rendered = String::from(PREFIX);
    rendered.push_str(&entry_id);
    for code in &features {
        rendered.push_str(", ");
        rendered.push_str(code.label());
    }
    rendered.push_str(SUFFIX);
    TextualDescription { entry_id, features, rendered }
}

/// Inverse of [`render_description`]. Labels are peeled off from the right,
/// so an entry id only needs to avoid ending in `, <label>`.
pub fn parse_description(rendered: &str) -> Result<TextualDescription, DescriptionError> {
    let body = rendered.strip_prefix(PREFIX).ok_or(DescriptionError::MissingStart)?;
    let mut rest = body.strip_suffix(SUFFIX).ok_or(DescriptionError::MissingEnd)?;
    let mut features = Vec::new();
    'peel: loop {
        for code in FeatureCode::ALL {
            let label = code.label();
            if let Some(head) = rest.strip_suffix(label).and_then(|h| h.strip_suffix(", ")) {
                features.push(code);
                rest = head;
                continue 'peel;
            }
        }
        break;
    }
    if rest.is_empty() {
        return Err(DescriptionError::EmptyEntry);
    }
    features.reverse();
    Ok(TextualDescription { entry_id: rest.to_string(), features, rendered: rendered.to_string() })
}

/// Package-level text: file descriptions joined by a single space.
pub fn package_description<'a, I>(descriptions: I) -> String
where
    I: IntoIterator<Item = &'a TextualDescription>,
{
    let parts: Vec<&str> = descriptions.into_iter().map(|d| d.rendered.as_str()).collect();
    parts.join(" ")
}

/// Whether fine-tuning rows describe single files or whole packages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    File,
    #[default]
    Package,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DatasetRow {
    pub description: String,
    pub label: Label,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(entries: &[(FeatureCode, usize)]) -> FeatureVector {
        let mut fv = FeatureVector::new();
        for (c, o) in entries {
            fv.record(*c, *o);
        }
        fv
    }

    #[test]
    fn reference_sentence() {
        let d = render_description(
            "selfedgamestudy-5.59",
            "setup.py",
            &fv(&[(FeatureCode::P1, 0), (FeatureCode::R1, 18), (FeatureCode::P2, 40)]),
        );
        assert_eq!(
            d.rendered,
            "start entry selfedgamestudy-5.59/setup.py, import process module, import operating system module, use process module call, end of entry."
        );
    }

    #[test]
    fn empty_vector() {
        let d = render_description("pkg", "mod.py", &FeatureVector::new());
        assert_eq!(d.rendered, "start entry pkg/mod.py, end of entry.");
        assert!(d.features.is_empty());
    }

    #[test]
    fn offsets_decide_order() {
        let d = render_description("p", "a.py", &fv(&[(FeatureCode::R1, 5), (FeatureCode::P4, 2)]));
        assert_eq!(
            d.rendered,
            "start entry p/a.py, evaluate code at run-time, import operating system module, end of entry."
        );
        assert_eq!(d.labels(), ["evaluate code at run-time", "import operating system module"]);
    }

    #[test]
    fn parse_inverts_render() {
        let d = render_description(
            "x-1.0",
            "pkg/a, b.py",
            &fv(&[(FeatureCode::T3, 3), (FeatureCode::E4, 9), (FeatureCode::R5, 1)]),
        );
        let p = parse_description(&d.rendered).unwrap();
        assert_eq!(p, d);
    }

    #[test]
    fn parse_rejects_malformed() {
        assert_eq!(parse_description("entry p/a.py, end of entry."), Err(DescriptionError::MissingStart));
        assert_eq!(parse_description("start entry p/a.py"), Err(DescriptionError::MissingEnd));
        assert_eq!(
            parse_description("start entry , use URL, end of entry."),
            Err(DescriptionError::EmptyEntry)
        );
    }

    #[test]
    fn package_level_join() {
        let a = render_description("p", "a.py", &FeatureVector::new());
        let b = render_description("p", "b.py", &fv(&[(FeatureCode::P4, 0)]));
        assert_eq!(
            package_description([&a, &b]),
            "start entry p/a.py, end of entry. start entry p/b.py, evaluate code at run-time, end of entry."
        );
    }
}
