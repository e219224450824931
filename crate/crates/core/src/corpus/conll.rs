use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{DatasetSplit, Sentence, SplitName};
use crate::error::{Error, Result};
use crate::sbio::{bio_to_sbio, sbio_to_bio, validate_sbio, SbioTag};

/// Reads a two-column CoNLL file. Sentence ids are `<filename>:<index>`.
///
/// If any tag carries a `B-` or `I-` prefix the file is read as BIO and
/// converted, otherwise tags are taken as sBIO strings.
pub fn load_conll(path: impl AsRef<Path>, name: SplitName) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    read_conll(BufReader::new(file), path, name)
}

pub fn read_conll<R: BufRead>(reader: R, path: &Path, name: SplitName) -> Result<DatasetSplit> {
    let stem = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());

    let mut raw: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {
                if !tokens.is_empty() {
                    raw.push((std::mem::take(&mut tokens), std::mem::take(&mut tags)));
                }
            }
            [tok, tag] => {
                tokens.push(tok.to_string());
                tags.push(tag.to_string());
            }
            _ => {
                return Err(Error::Parse {
                    path: PathBuf::from(path),
                    line: lineno + 1,
                    message: format!("expected `token tag`, found {} fields", fields.len()),
                })
            }
        }
    }
    if !tokens.is_empty() {
        raw.push((tokens, tags));
    }

    let is_bio = raw
        .iter()
        .flat_map(|(_, t)| t)
        .any(|t| t.starts_with("B-") || t.starts_with("I-"));

    let mut sentences = Vec::with_capacity(raw.len());
    for (index, (tokens, tags)) in raw.into_iter().enumerate() {
        let id = format!("{stem}:{index}");
        let sbio = if is_bio {
            bio_to_sbio(&tags).map_err(|e| Error::Validation(format!("sentence {id}: {e}")))?
        } else {
            let t: Vec<SbioTag> = tags.iter().map(|s| SbioTag::from_raw(s)).collect();
            validate_sbio(&t).map_err(|e| Error::Validation(format!("sentence {id}: {e}")))?;
            t
        };
        sentences.push(Sentence::new(id, tokens, Some(sbio))?);
    }
    DatasetSplit::new(name, sentences)
}

/// Writes tags in BIO form, which reads back unambiguously.
pub fn write_conll<W: Write>(split: &DatasetSplit, mut w: W) -> Result<()> {
    for (i, s) in split.sentences.iter().enumerate() {
        if i > 0 {
            writeln!(w)?;
        }
        let tags = sbio_to_bio(s.require_tags()?)?;
        for (tok, tag) in s.tokens.iter().zip(&tags) {
            writeln!(w, "{tok}\t{tag}")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_conll(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    write_conll(split, BufWriter::new(file))
}

/// Raw text, one sentence per line, whitespace-pretokenized, without tags.
pub fn load_tokens(path: impl AsRef<Path>, name: SplitName) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let stem = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io_at(path, e))?);
    let mut sentences = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        sentences.push(Sentence::from_text(format!("{stem}:{}", sentences.len()), &line)?);
    }
    DatasetSplit::new(name, sentences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn read(text: &str) -> Result<DatasetSplit> {
        read_conll(text.as_bytes(), Path::new("train.txt"), SplitName::Train)
    }

    #[test]
    fn two_sentences() {
        let split = read("play\tO\nwow\tB-TRACK\n\nhi O\n").unwrap();
        assert_eq!(split.len(), 2);
        assert_eq!(split.sentences[0].id, "train.txt:0");
        assert_eq!(
            split.sentences[0].gold_tags.as_deref().unwrap(),
            &[SbioTag::Outside, SbioTag::label("TRACK")]
        );
        assert_eq!(split.sentences[1].tokens, ["hi"]);
    }

    #[test]
    fn sbio_files_are_read_verbatim() {
        let split = read("jon ARTIST\ntheodore I\n").unwrap();
        assert_eq!(
            split.sentences[0].gold_tags.as_deref().unwrap(),
            &[SbioTag::label("ARTIST"), SbioTag::Inside]
        );
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match read("a O\nb c d\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_bio_names_the_sentence() {
        match read("x O\n\nwow B-TRACK\ntheodore I-ARTIST\n") {
            Err(Error::Validation(msg)) => assert!(msg.contains("train.txt:1"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn blank_line_runs_and_missing_trailing_newline() {
        let split = read("\n\na O\n\n\n\nb O").unwrap();
        assert_eq!(split.len(), 2);
    }

    proptest! {
        #[test]
        fn save_then_load_is_identity(
            sents in prop::collection::vec(
                prop::collection::vec((0usize..5, 0usize..4), 1..8), 0..10)
        ) {
            let labels = ["A", "B", "C"];
            let mut sentences = Vec::new();
            for (i, s) in sents.iter().enumerate() {
                let tokens: Vec<String> = s.iter().map(|(w, _)| format!("w{w}")).collect();
                let mut tags = Vec::new();
                for (j, &(_, t)) in s.iter().enumerate() {
                    let tag = match t {
                        3 if j > 0 && tags.last() != Some(&SbioTag::Outside) => SbioTag::Inside,
                        0..=2 => SbioTag::label(labels[t]),
                        _ => SbioTag::Outside,
                    };
                    tags.push(tag);
                }
                sentences.push(Sentence::new(format!("x.conll:{i}"), tokens, Some(tags)).unwrap());
            }
            let split = DatasetSplit::new(SplitName::Dev, sentences).unwrap();
            let mut buf = Vec::new();
            write_conll(&split, &mut buf).unwrap();
            let back = read_conll(&buf[..], Path::new("x.conll"), SplitName::Dev).unwrap();
            prop_assert_eq!(back, split);
        }
    }
}
