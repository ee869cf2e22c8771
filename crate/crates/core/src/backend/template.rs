use std::collections::BTreeMap;
use std::path::Path;

use crate::domain::{Exemplar, LabelSpace};
use crate::error::{CalibError, Result};

/// Block-structured prompt: each exemplar renders as
/// `input_prefix + text + separator + output_prefix + label_gap + verbalizer`,
/// blocks are joined by `block_separator`, and the query's block stops after
/// `output_prefix`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub input_prefix: String,
    pub separator: String,
    pub output_prefix: String,
    pub label_gap: String,
    pub block_separator: String,
    pub label_space: LabelSpace,
}

const BUILTIN: &[(&str, &str, &str)] = &[
    ("sst2", "sentence: <x>\\nsentiment: <y>", "negative, positive"),
    (
        "sst5",
        "sentence: <x>\\nsentiment: <y>",
        "terrible, bad, neutral, good, great",
    ),
    ("rotten_tomatoes", "review: <x>\\nsentiment: <y>", "negative, positive"),
    (
        "financial_phrasebank",
        "sentence: <x>\\nsentiment: <y>",
        "negative, neutral, positive",
    ),
    ("subj", "review: <x>\\ntype: <y>", "objective, subjective"),
    (
        "trec",
        "question: <x>\\ntarget: <y>",
        "abbreviation, entity, description, person, location, number",
    ),
    (
        "agnews",
        "news: <x>\\ntopic: <y>",
        "world, sports, business, technology",
    ),
    (
        "tweet_eval_emotion",
        "tweet: <x>\\nemotion: <y>",
        "anger, joy, optimism, sadness",
    ),
    ("tweet_eval_hate", "tweet: <x>\\nhate speech: <y>", "non-hate, hate"),
];

impl PromptTemplate {
    /// Parses a pattern such as `sentence: <x>\nsentiment: <y>`. The pattern
    /// must contain `<x>` once and end with `<y>`. A literal backslash-n in the
    /// pattern is read as a newline.
    pub fn from_pattern(pattern: &str, label_space: LabelSpace) -> Result<Self> {
        let pattern = pattern.replace("\\n", "\n");
        let (input_prefix, rest) = pattern.split_once("<x>").ok_or_else(|| {
            CalibError::InvalidArgument(format!("template {pattern:?} lacks <x>"))
        })?;
        let mid = rest.strip_suffix("<y>").ok_or_else(|| {
            CalibError::InvalidArgument(format!("template {pattern:?} must end with <y>"))
        })?;
        if mid.contains("<x>") || mid.contains("<y>") {
            return Err(CalibError::InvalidArgument(format!(
                "template {pattern:?} repeats a slot"
            )));
        }
        let split = mid.rfind('\n').map_or(0, |p| p + 1);
        let (separator, tail) = mid.split_at(split);
        let output_prefix = tail.trim_end();
        Ok(Self {
            input_prefix: input_prefix.to_string(),
            separator: separator.to_string(),
            output_prefix: output_prefix.to_string(),
            label_gap: tail[output_prefix.len()..].to_string(),
            block_separator: "\n\n".to_string(),
            label_space,
        })
    }

    /// One of the nine built-in benchmark templates, by lowercase name.
    pub fn builtin(name: &str) -> Option<Self> {
        let (_, pattern, labels) = BUILTIN
            .iter()
            .find(|(n, _, _)| n.eq_ignore_ascii_case(name))?;
        let labels = LabelSpace::new(labels.split(',').map(str::trim)).ok()?;
        Self::from_pattern(pattern, labels).ok()
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _, _)| *n)
    }

    fn block(&self, text: &str, out: &mut String) {
        out.push_str(&self.input_prefix);
        out.push_str(text);
        out.push_str(&self.separator);
        out.push_str(&self.output_prefix);
    }

    pub fn render(&self, context: &[&Exemplar], query: &str) -> Result<String> {
        let mut out = String::new();
        for e in context {
            let label = self.label_space.verbalizer(e.label).ok_or(CalibError::ClassOutOfRange {
                label: e.label,
                n: self.label_space.len(),
            })?;
            self.block(&e.text, &mut out);
            out.push_str(&self.label_gap);
            out.push_str(label);
            out.push_str(&self.block_separator);
        }
        self.block(query, &mut out);
        Ok(out)
    }

    /// The continuation scored for `class`: gap followed by the verbalizer.
    pub fn continuation(&self, class: usize) -> Option<String> {
        self.label_space
            .verbalizer(class)
            .map(|v| format!("{}{}", self.label_gap, v))
    }
}

/// Parses the template table format: one `name | pattern | label, label, ...`
/// row per line; blank lines and `#` comments are skipped.
pub fn parse_template_file(source: &str, path: &str) -> Result<BTreeMap<String, PromptTemplate>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('|').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(CalibError::parse(
                path,
                lineno + 1,
                "expected `name | pattern | labels`",
            ));
        }
        let labels = LabelSpace::new(cols[2].split(',').map(str::trim))
            .map_err(|e| CalibError::parse(path, lineno + 1, e.to_string()))?;
        let template = PromptTemplate::from_pattern(cols[1], labels)
            .map_err(|e| CalibError::parse(path, lineno + 1, e.to_string()))?;
        if out.insert(cols[0].to_string(), template).is_some() {
            return Err(CalibError::parse(
                path,
                lineno + 1,
                format!("duplicate template {:?}", cols[0]),
            ));
        }
    }
    Ok(out)
}

pub fn load_template_file(path: impl AsRef<Path>) -> Result<BTreeMap<String, PromptTemplate>> {
    let path = path.as_ref();
    let source = std::fs::read_to_string(path)?;
    parse_template_file(&source, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sst2() -> PromptTemplate {
        PromptTemplate::builtin("sst2").unwrap()
    }

    #[test]
    fn empty_context_renders_query_block() {
        assert_eq!(
            sst2().render(&[], "good movie").unwrap(),
            "sentence: good movie\nsentiment:"
        );
    }

    #[test]
    fn exemplar_blocks_precede_query() {
        let bad = Exemplar::new("0", "bad", 0);
        assert_eq!(
            sst2().render(&[&bad], "fine").unwrap(),
            "sentence: bad\nsentiment: negative\n\nsentence: fine\nsentiment:"
        );
    }

    #[test]
    fn order_matters() {
        let a = Exemplar::new("0", "bad", 0);
        let b = Exemplar::new("1", "great", 1);
        let t = sst2();
        assert_ne!(
            t.render(&[&a, &b], "ok").unwrap(),
            t.render(&[&b, &a], "ok").unwrap()
        );
    }

    #[test]
    fn every_builtin_parses() {
        for name in PromptTemplate::builtin_names() {
            assert!(PromptTemplate::builtin(name).is_some(), "{name}");
        }
        let hate = PromptTemplate::builtin("tweet_eval_hate").unwrap();
        assert_eq!(hate.output_prefix, "hate speech:");
        assert_eq!(hate.continuation(0).unwrap(), " non-hate");
        assert_eq!(PromptTemplate::builtin("trec").unwrap().label_space.len(), 6);
    }

    #[test]
    fn template_file_round_trip() {
        let src = "# dataset | template | labels\nSST2 | sentence: <x>\\nsentiment: <y> | negative, positive\n\nSubj | review: <x>\\ntype: <y> | objective, subjective\n";
        let table = parse_template_file(src, "t.txt").unwrap();
        assert_eq!(table["SST2"], sst2());
        assert_eq!(table["Subj"].output_prefix, "type:");
    }

    #[test]
    fn template_file_errors_name_the_line() {
        let err = parse_template_file("a | <x> <y>\n", "t.txt").unwrap_err();
        assert!(err.to_string().contains("t.txt:1"), "{err}");
        let err = parse_template_file("\na | no slots | x, y\n", "t.txt").unwrap_err();
        assert!(err.to_string().contains("t.txt:2"), "{err}");
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let e = Exemplar::new("0", "x", 7);
        assert!(sst2().render(&[&e], "q").is_err());
    }
}
