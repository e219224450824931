//! Simplified-inside BIO (sBIO) tags and the sentinel string formats.
//!
//! In sBIO a span start carries its bare label, every continuation token
//! carries the shared tag `I` and tokens outside spans carry `O`. The full
//! tag inventory of a task is therefore the label set plus `I` and `O`,
//! in that canonical index order.
//!
//! The encoder input interleaves tokens with sentinel strings
//! (`<extra_id_0> play <extra_id_1> wow ...`); the target echoes the
//! sentinels with the tags between them and, in the primed variant, one
//! trailing sentinel that closes the last tag.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

pub const INSIDE: &str = "I";
pub const OUTSIDE: &str = "O";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SbioTag {
    Label(String),
    Inside,
    Outside,
}

impl SbioTag {
    pub fn label(label: impl Into<String>) -> Self {
        SbioTag::Label(label.into())
    }

    pub fn as_str(&self) -> &str {
        match self {
            SbioTag::Label(l) => l,
            SbioTag::Inside => INSIDE,
            SbioTag::Outside => OUTSIDE,
        }
    }

    /// Reads a raw tag string: `I`, `O`, or anything else as a label.
    pub fn from_raw(s: &str) -> Self {
        match s {
            INSIDE => SbioTag::Inside,
            OUTSIDE => SbioTag::Outside,
            other => SbioTag::Label(other.to_string()),
        }
    }
}

impl fmt::Display for SbioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The label set `T` together with the canonical index order of `T ∪ {I, O}`.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TagSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl TagSet {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = TagSet::default();
        for label in labels {
            let label = label.into();
            if set.index.contains_key(&label) {
                return Err(Error::Validation(format!("duplicate label {label:?}")));
            }
            set.push(label)?;
        }
        Ok(set)
    }

    /// Collects labels in order of first appearance.
    pub fn from_tags<'a, I>(tags: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a SbioTag>,
    {
        let mut set = TagSet::default();
        for tag in tags {
            if let SbioTag::Label(l) = tag {
                if !set.index.contains_key(l) {
                    set.push(l.clone())?;
                }
            }
        }
        Ok(set)
    }

    fn push(&mut self, label: String) -> Result<()> {
        if label == INSIDE || label == OUTSIDE {
            return Err(Error::Validation(format!(
                "label {label:?} collides with a reserved sBIO tag"
            )));
        }
        if label.is_empty() || label.chars().any(char::is_whitespace) {
            return Err(Error::Validation(format!(
                "label {label:?} must be non-empty and free of whitespace"
            )));
        }
        self.index.insert(label.clone(), self.labels.len());
        self.labels.push(label);
        Ok(())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// `|T|`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `|T| + 2`.
    pub fn full_len(&self) -> usize {
        self.labels.len() + 2
    }

    pub fn inside_index(&self) -> usize {
        self.labels.len()
    }

    pub fn outside_index(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn contains_label(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    pub fn index_of(&self, tag: &SbioTag) -> Option<usize> {
        match tag {
            SbioTag::Label(l) => self.index.get(l).copied(),
            SbioTag::Inside => Some(self.inside_index()),
            SbioTag::Outside => Some(self.outside_index()),
        }
    }

    pub fn index_of_str(&self, s: &str) -> Option<usize> {
        match s {
            INSIDE => Some(self.inside_index()),
            OUTSIDE => Some(self.outside_index()),
            other => self.index.get(other).copied(),
        }
    }

    pub fn tag_at(&self, index: usize) -> SbioTag {
        match index {
            i if i < self.labels.len() => SbioTag::Label(self.labels[i].clone()),
            i if i == self.inside_index() => SbioTag::Inside,
            i if i == self.outside_index() => SbioTag::Outside,
            _ => panic!("tag index {index} out of range for |T̄| = {}", self.full_len()),
        }
    }

    /// Tag strings of the full set in canonical order.
    pub fn tag_strings(&self) -> Vec<String> {
        let mut out = self.labels.clone();
        out.push(INSIDE.to_string());
        out.push(OUTSIDE.to_string());
        out
    }

    pub fn indices_of(&self, tags: &[SbioTag]) -> Result<Vec<usize>> {
        tags.iter()
            .map(|t| {
                self.index_of(t)
                    .ok_or_else(|| Error::Validation(format!("tag {t} is not in the tag set")))
            })
            .collect()
    }
}

/// Labelled span over token indices, both ends inclusive.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(label: impl Into<String>, start: usize, end: usize) -> Self {
        Span {
            label: label.into(),
            start,
            end,
        }
    }
}

/// Checks the two structural rules: no leading `I`, no `I` right after `O`.
pub fn validate_sbio(tags: &[SbioTag]) -> Result<()> {
    let mut prev: Option<&SbioTag> = None;
    for (i, tag) in tags.iter().enumerate() {
        if *tag == SbioTag::Inside && matches!(prev, None | Some(SbioTag::Outside)) {
            return Err(Error::Validation(format!(
                "inside tag at position {i} does not continue a span"
            )));
        }
        prev = Some(tag);
    }
    Ok(())
}

pub fn is_valid_sbio(tags: &[SbioTag]) -> bool {
    validate_sbio(tags).is_ok()
}

pub fn spans_to_sbio(token_count: usize, spans: &[Span]) -> Result<Vec<SbioTag>> {
    let mut tags = vec![SbioTag::Outside; token_count];
    let mut covered = vec![false; token_count];
    for span in spans {
        if span.start > span.end || span.end >= token_count {
            return Err(Error::Validation(format!(
                "span {}[{},{}] out of range for {} tokens",
                span.label, span.start, span.end, token_count
            )));
        }
        if span.label == INSIDE || span.label == OUTSIDE {
            return Err(Error::Validation(format!(
                "span label {:?} is reserved",
                span.label
            )));
        }
        for i in span.start..=span.end {
            if covered[i] {
                return Err(Error::Validation(format!(
                    "span {}[{},{}] overlaps another span at token {i}",
                    span.label, span.start, span.end
                )));
            }
            covered[i] = true;
            tags[i] = if i == span.start {
                SbioTag::Label(span.label.clone())
            } else {
                SbioTag::Inside
            };
        }
    }
    Ok(tags)
}

pub fn sbio_to_spans(tags: &[SbioTag]) -> Result<Vec<Span>> {
    validate_sbio(tags)?;
    let mut spans: Vec<Span> = Vec::new();
    let mut open = false;
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            SbioTag::Label(l) => {
                spans.push(Span::new(l.clone(), i, i));
                open = true;
            }
            SbioTag::Inside => {
                debug_assert!(open);
                if let Some(last) = spans.last_mut() {
                    last.end = i;
                }
            }
            SbioTag::Outside => open = false,
        }
    }
    Ok(spans)
}

/// Converts `B-X`/`I-X`/`O` strings into sBIO.
pub fn bio_to_sbio<S: AsRef<str>>(bio: &[S]) -> Result<Vec<SbioTag>> {
    let mut out = Vec::with_capacity(bio.len());
    let mut current: Option<&str> = None;
    for (i, tag) in bio.iter().enumerate() {
        let tag = tag.as_ref();
        if tag == OUTSIDE {
            out.push(SbioTag::Outside);
            current = None;
        } else if let Some(label) = tag.strip_prefix("B-") {
            if label.is_empty() {
                return Err(Error::Validation(format!("empty label in {tag:?} at {i}")));
            }
            out.push(SbioTag::Label(label.to_string()));
            current = Some(label);
        } else if let Some(label) = tag.strip_prefix("I-") {
            if current != Some(label) {
                return Err(Error::Validation(format!(
                    "ragged BIO: {tag:?} at position {i} does not continue a {label} span"
                )));
            }
            out.push(SbioTag::Inside);
        } else {
            return Err(Error::Validation(format!(
                "unrecognised BIO tag {tag:?} at position {i}"
            )));
        }
    }
    Ok(out)
}

pub fn sbio_to_bio(tags: &[SbioTag]) -> Result<Vec<String>> {
    validate_sbio(tags)?;
    let mut current = "";
    Ok(tags
        .iter()
        .map(|t| match t {
            SbioTag::Label(l) => {
                current = l;
                format!("B-{l}")
            }
            SbioTag::Inside => format!("I-{current}"),
            SbioTag::Outside => OUTSIDE.to_string(),
        })
        .collect())
}

/// Mask over the full tag set of the tags allowed after `prefix`.
pub fn valid_next_tags(prefix: &[SbioTag], tag_set: &TagSet) -> Vec<bool> {
    let inside_ok = matches!(prefix.last(), Some(SbioTag::Label(_)) | Some(SbioTag::Inside));
    let mut mask = vec![true; tag_set.full_len()];
    mask[tag_set.inside_index()] = inside_ok;
    mask
}

/// Same as [`valid_next_tags`] over tag indices.
pub fn valid_next_indices(prefix: &[usize], tag_set: &TagSet) -> Vec<bool> {
    let inside_ok = matches!(prefix.last(), Some(&t) if t != tag_set.outside_index());
    let mut mask = vec![true; tag_set.full_len()];
    mask[tag_set.inside_index()] = inside_ok;
    mask
}

impl TryFrom<Vec<String>> for TagSet {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        TagSet::new(labels)
    }
}

impl From<TagSet> for Vec<String> {
    fn from(t: TagSet) -> Self {
        t.labels
    }
}

/// Maps a sentinel index to its string, e.g. `<extra_id_{k}>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentinelScheme {
    prefix: String,
    suffix: String,
}

impl Default for SentinelScheme {
    fn default() -> Self {
        SentinelScheme::new("<extra_id_{k}>").expect("default pattern is valid")
    }
}

impl SentinelScheme {
    /// `pattern` must contain exactly one `{k}` placeholder and no whitespace.
    pub fn new(pattern: &str) -> Result<Self> {
        let mut parts = pattern.split("{k}");
        let (prefix, suffix) = match (parts.next(), parts.next(), parts.next()) {
            (Some(p), Some(s), None) => (p, s),
            _ => {
                return Err(Error::Config(format!(
                    "sentinel pattern {pattern:?} needs exactly one {{k}} placeholder"
                )))
            }
        };
        if pattern.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!(
                "sentinel pattern {pattern:?} contains whitespace"
            )));
        }
        if prefix.is_empty() && suffix.is_empty() {
            return Err(Error::Config("sentinel pattern is a bare number".into()));
        }
        Ok(SentinelScheme {
            prefix: prefix.to_string(),
            suffix: suffix.to_string(),
        })
    }

    pub fn pattern(&self) -> String {
        format!("{}{{k}}{}", self.prefix, self.suffix)
    }

    pub fn sentinel(&self, k: usize) -> String {
        format!("{}{}{}", self.prefix, k, self.suffix)
    }

    /// Index of `s` if it is a sentinel string under this scheme.
    pub fn index_of(&self, s: &str) -> Option<usize> {
        let digits = s.strip_prefix(&self.prefix)?.strip_suffix(&self.suffix)?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        // Reject non-canonical forms such as leading zeros.
        let k: usize = digits.parse().ok()?;
        (k.to_string() == digits).then_some(k)
    }

    pub fn is_sentinel(&self, s: &str) -> bool {
        self.index_of(s).is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// `s_0 x_1 s_1 … x_L`
    Sent,
    /// `s_0 x_1 s_1 … x_L s_L`
    SentPrime,
}

pub fn encode_input<S: AsRef<str>>(
    tokens: &[S],
    scheme: &SentinelScheme,
    variant: Variant,
) -> Result<String> {
    if tokens.is_empty() {
        return Err(Error::Validation("cannot encode an empty token sequence".into()));
    }
    let mut out = scheme.sentinel(0);
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        if scheme.is_sentinel(tok) {
            return Err(Error::Validation(format!(
                "token {tok:?} at position {i} collides with a sentinel string"
            )));
        }
        if tok.is_empty() || tok.chars().any(char::is_whitespace) {
            return Err(Error::Validation(format!(
                "token {tok:?} at position {i} is empty or contains whitespace"
            )));
        }
        if i > 0 {
            out.push(' ');
            out.push_str(&scheme.sentinel(i));
        }
        out.push(' ');
        out.push_str(tok);
    }
    if variant == Variant::SentPrime {
        out.push(' ');
        out.push_str(&scheme.sentinel(tokens.len()));
    }
    Ok(out)
}

/// `s_0 t_1 s_1 … t_L s_L`
pub fn encode_target(tags: &[SbioTag], scheme: &SentinelScheme) -> Result<String> {
    validate_sbio(tags)?;
    Ok(encode_target_unchecked(tags.iter().map(SbioTag::as_str), scheme))
}

pub(crate) fn encode_target_unchecked<'a, I>(tags: I, scheme: &SentinelScheme) -> String
where
    I: IntoIterator<Item = &'a str>,
{
    let mut out = scheme.sentinel(0);
    for (i, tag) in tags.into_iter().enumerate() {
        out.push(' ');
        out.push_str(tag);
        out.push(' ');
        out.push_str(&scheme.sentinel(i + 1));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum OutputParseError {
    #[error("expected {expected} whitespace-separated pieces, found {found}")]
    WrongCount { expected: usize, found: usize },
    #[error("piece {position}: expected sentinel {expected:?}, found {found:?}")]
    WrongSentinel {
        position: usize,
        expected: String,
        found: String,
    },
    #[error("piece {position}: unknown tag {tag:?}")]
    UnknownTag { position: usize, tag: String },
}

/// Parses a primed-format target back into `L` tags. Total on arbitrary strings.
///
/// Only the format is checked here; sBIO well-formedness is a separate
/// question answered by [`validate_sbio`].
pub fn parse_output(
    output: &str,
    token_count: usize,
    tag_set: &TagSet,
    scheme: &SentinelScheme,
) -> std::result::Result<Vec<SbioTag>, OutputParseError> {
    let pieces: Vec<&str> = output.split_whitespace().collect();
    let expected = 2 * token_count + 1;
    if pieces.len() != expected {
        return Err(OutputParseError::WrongCount {
            expected,
            found: pieces.len(),
        });
    }
    let mut tags = Vec::with_capacity(token_count);
    for (position, piece) in pieces.iter().enumerate() {
        if position % 2 == 0 {
            let k = position / 2;
            if scheme.index_of(piece) != Some(k) {
                return Err(OutputParseError::WrongSentinel {
                    position,
                    expected: scheme.sentinel(k),
                    found: piece.to_string(),
                });
            }
        } else {
            match tag_set.index_of_str(piece) {
                Some(idx) => tags.push(tag_set.tag_at(idx)),
                None => {
                    return Err(OutputParseError::UnknownTag {
                        position,
                        tag: piece.to_string(),
                    })
                }
            }
        }
    }
    Ok(tags)
}

/// Encoder input and decoder target strings for one example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormattedPair {
    pub input: String,
    pub target: String,
}

impl FormattedPair {
    /// Builds the primed pair from tokens and their gold tags.
    pub fn new<S: AsRef<str>>(
        tokens: &[S],
        tags: &[SbioTag],
        scheme: &SentinelScheme,
    ) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(Error::Validation(format!(
                "{} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        Ok(FormattedPair {
            input: encode_input(tokens, scheme, Variant::SentPrime)?,
            target: encode_target(tags, scheme)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(raw: &[&str]) -> Vec<SbioTag> {
        raw.iter().map(|s| SbioTag::from_raw(s)).collect()
    }

    fn track_artist() -> TagSet {
        TagSet::new(["TRACK", "ARTIST"]).unwrap()
    }

    #[test]
    fn spans_to_sbio_table_example() {
        let spans = [Span::new("TRACK", 1, 1), Span::new("ARTIST", 3, 4)];
        assert_eq!(
            spans_to_sbio(5, &spans).unwrap(),
            tags(&["O", "TRACK", "O", "ARTIST", "I"])
        );
        assert_eq!(spans_to_sbio(3, &[]).unwrap(), tags(&["O", "O", "O"]));
        assert_eq!(
            spans_to_sbio(2, &[Span::new("t", 0, 1)]).unwrap(),
            tags(&["t", "I"])
        );
    }

    #[test]
    fn spans_to_sbio_rejects_bad_spans() {
        assert!(spans_to_sbio(2, &[Span::new("A", 1, 2)]).is_err());
        assert!(spans_to_sbio(4, &[Span::new("A", 0, 1), Span::new("B", 1, 2)]).is_err());
        assert!(spans_to_sbio(4, &[Span::new("A", 2, 1)]).is_err());
    }

    #[test]
    fn sbio_to_spans_cases() {
        assert_eq!(
            sbio_to_spans(&tags(&["O", "TRACK", "O", "ARTIST", "I"])).unwrap(),
            vec![Span::new("TRACK", 1, 1), Span::new("ARTIST", 3, 4)]
        );
        assert!(sbio_to_spans(&tags(&["O", "O"])).unwrap().is_empty());
        assert!(sbio_to_spans(&tags(&["I", "O"])).is_err());
        assert!(sbio_to_spans(&tags(&["A", "O", "I"])).is_err());
        // adjacent spans of the same label stay separate
        assert_eq!(
            sbio_to_spans(&tags(&["A", "A", "I"])).unwrap(),
            vec![Span::new("A", 0, 0), Span::new("A", 1, 2)]
        );
    }

    #[test]
    fn bio_conversion() {
        let bio = ["O", "B-TRACK", "O", "B-ARTIST", "I-ARTIST"];
        let sbio = bio_to_sbio(&bio).unwrap();
        assert_eq!(sbio, tags(&["O", "TRACK", "O", "ARTIST", "I"]));
        assert_eq!(sbio_to_bio(&sbio).unwrap(), bio);
        assert_eq!(bio_to_sbio(&["O", "O"]).unwrap(), tags(&["O", "O"]));
        assert!(bio_to_sbio(&["B-TRACK", "I-ARTIST"]).is_err());
        assert!(bio_to_sbio(&["I-ARTIST"]).is_err());
        assert!(bio_to_sbio(&["O", "I-ARTIST"]).is_err());
    }

    #[test]
    fn next_tag_mask() {
        let ts = track_artist();
        let m = valid_next_tags(&[], &ts);
        assert!(!m[ts.inside_index()]);
        assert_eq!(m.iter().filter(|&&b| b).count(), ts.len() + 1);
        assert!(!valid_next_tags(&tags(&["O"]), &ts)[ts.inside_index()]);
        assert!(valid_next_tags(&tags(&["TRACK"]), &ts).iter().all(|&b| b));
        assert!(valid_next_tags(&tags(&["TRACK", "I"]), &ts).iter().all(|&b| b));
    }

    #[test]
    fn encode_table_example() {
        let scheme = SentinelScheme::default();
        let tokens = ["play", "wow", "by", "jon", "theodore"];
        assert_eq!(
            encode_input(&tokens, &scheme, Variant::SentPrime).unwrap(),
            "<extra_id_0> play <extra_id_1> wow <extra_id_2> by <extra_id_3> jon <extra_id_4> theodore <extra_id_5>"
        );
        assert_eq!(encode_input(&["a"], &scheme, Variant::Sent).unwrap(), "<extra_id_0> a");
        assert_eq!(
            encode_input(&["a"], &scheme, Variant::SentPrime).unwrap(),
            "<extra_id_0> a <extra_id_1>"
        );
        let target = encode_target(&tags(&["O", "TRACK", "O", "ARTIST", "I"]), &scheme).unwrap();
        assert_eq!(
            target,
            "<extra_id_0> O <extra_id_1> TRACK <extra_id_2> O <extra_id_3> ARTIST <extra_id_4> I <extra_id_5>"
        );
        assert_eq!(
            parse_output(&target, 5, &track_artist(), &scheme).unwrap(),
            tags(&["O", "TRACK", "O", "ARTIST", "I"])
        );
    }

    #[test]
    fn encode_rejects_sentinel_tokens() {
        let scheme = SentinelScheme::default();
        assert!(encode_input(&["a", "<extra_id_3>"], &scheme, Variant::Sent).is_err());
        assert!(encode_input::<&str>(&[], &scheme, Variant::Sent).is_err());
        // not a canonical sentinel, so an ordinary token
        assert!(encode_input(&["<extra_id_03>"], &scheme, Variant::Sent).is_ok());
    }

    #[test]
    fn parse_errors() {
        let scheme = SentinelScheme::default();
        let ts = track_artist();
        assert_eq!(
            parse_output("<extra_id_0> BANANA <extra_id_1>", 1, &ts, &scheme),
            Err(OutputParseError::UnknownTag {
                position: 1,
                tag: "BANANA".into()
            })
        );
        assert!(matches!(
            parse_output("<extra_id_0> O <extra_id_2>", 1, &ts, &scheme),
            Err(OutputParseError::WrongSentinel { position: 2, .. })
        ));
        assert!(matches!(
            parse_output("<extra_id_0> O", 1, &ts, &scheme),
            Err(OutputParseError::WrongCount { expected: 3, found: 2 })
        ));
        assert!(parse_output("", 0, &ts, &scheme).is_err());
        // repeated spaces are tolerated
        assert_eq!(
            parse_output("<extra_id_0>   O  <extra_id_1>", 1, &ts, &scheme).unwrap(),
            tags(&["O"])
        );
    }

    #[test]
    fn tag_set_rules() {
        assert!(TagSet::new(["I"]).is_err());
        assert!(TagSet::new(["O"]).is_err());
        assert!(TagSet::new(["A", "A"]).is_err());
        assert!(TagSet::new(["has space"]).is_err());
        let ts = TagSet::new(["B", "A"]).unwrap();
        assert_eq!(ts.tag_strings(), ["B", "A", "I", "O"]);
        assert_eq!(ts.index_of(&SbioTag::Outside), Some(3));
        assert_eq!(ts.tag_at(1), SbioTag::label("A"));
    }

    #[test]
    fn custom_sentinel_pattern() {
        let scheme = SentinelScheme::new("[S{k}]").unwrap();
        assert_eq!(scheme.sentinel(4), "[S4]");
        assert_eq!(scheme.index_of("[S12]"), Some(12));
        assert_eq!(scheme.index_of("[S]"), None);
        assert!(SentinelScheme::new("nope").is_err());
        assert!(SentinelScheme::new("{k}{k}").is_err());
    }
}
