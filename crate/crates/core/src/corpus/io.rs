//! JSONL persistence for corpora and trace cohorts.
//!
//! Line 1 is a header record carrying the schema version and expected
//! counts; the body records follow in a fixed order. Loads are strict:
//! wrong version, truncation, trailing garbage and invariant violations all
//! fail with the offending line number where one exists.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Corpus, KnowledgeConcept, Question, StudentTrace};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum CorpusRecord {
    Header {
        schema_version: u32,
        num_kcs: u32,
        num_questions: u32,
        num_original: u32,
        vocab_size: u32,
        seed: u64,
    },
    Kc(KnowledgeConcept),
    Question(Question),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum TraceRecord {
    Header {
        schema_version: u32,
        num_students: u32,
        num_kcs: u32,
        seed: u64,
    },
    Trace(StudentTrace),
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        for rec in records {
            let line = serde_json::to_string(&rec)
                .map_err(|e| Error::data(format!("serialize failed: {e}")))?;
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_line<'a, T: Deserialize<'a>>(line: &'a str, lineno: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: lineno,
        msg: e.to_string(),
    })
}

struct LineReader {
    inner: std::io::Lines<BufReader<File>>,
    lineno: usize,
}

impl LineReader {
    fn open(path: &Path) -> Result<Self> {
        Ok(LineReader {
            inner: BufReader::new(File::open(path)?).lines(),
            lineno: 0,
        })
    }

    /// Next non-empty line, or None at EOF.
    fn next_line(&mut self) -> Result<Option<(usize, String)>> {
        loop {
            match self.inner.next() {
                None => return Ok(None),
                Some(line) => {
                    self.lineno += 1;
                    let line = line?;
                    if !line.trim().is_empty() {
                        return Ok(Some((self.lineno, line)));
                    }
                }
            }
        }
    }

    fn require_line(&mut self, what: &str) -> Result<(usize, String)> {
        self.next_line()?.ok_or(Error::Parse {
            line: self.lineno + 1,
            msg: format!("file truncated, expected {what}"),
        })
    }
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    corpus.validate()?;
    let header = CorpusRecord::Header {
        schema_version: SCHEMA_VERSION,
        num_kcs: corpus.kcs.len() as u32,
        num_questions: corpus.questions.len() as u32,
        num_original: corpus.num_original,
        vocab_size: corpus.vocab_size,
        seed: corpus.seed,
    };
    let records = std::iter::once(header)
        .chain(corpus.kcs.iter().cloned().map(CorpusRecord::Kc))
        .chain(corpus.questions.iter().cloned().map(CorpusRecord::Question));
    write_jsonl(path.as_ref(), records)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let mut reader = LineReader::open(path.as_ref())?;
    let (lineno, line) = reader.require_line("header")?;
    let header: CorpusRecord = parse_line(&line, lineno)?;
    let (num_kcs, num_questions, num_original, vocab_size, seed) = match header {
        CorpusRecord::Header {
            schema_version,
            num_kcs,
            num_questions,
            num_original,
            vocab_size,
            seed,
        } => {
            if schema_version != SCHEMA_VERSION {
                return Err(Error::Version {
                    found: schema_version,
                    expected: SCHEMA_VERSION,
                });
            }
            (num_kcs, num_questions, num_original, vocab_size, seed)
        }
        _ => {
            return Err(Error::Parse {
                line: lineno,
                msg: "expected header record first".to_string(),
            })
        }
    };
    let mut kcs = Vec::with_capacity(num_kcs as usize);
    for _ in 0..num_kcs {
        let (lineno, line) = reader.require_line("kc record")?;
        match parse_line(&line, lineno)? {
            CorpusRecord::Kc(kc) => kcs.push(kc),
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "expected kc record".to_string(),
                })
            }
        }
    }
    let mut questions = Vec::with_capacity(num_questions as usize);
    for _ in 0..num_questions {
        let (lineno, line) = reader.require_line("question record")?;
        match parse_line(&line, lineno)? {
            CorpusRecord::Question(q) => questions.push(q),
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "expected question record".to_string(),
                })
            }
        }
    }
    if let Some((lineno, _)) = reader.next_line()? {
        return Err(Error::Parse {
            line: lineno,
            msg: "trailing data after final record".to_string(),
        });
    }
    let corpus = Corpus {
        kcs,
        questions,
        vocab_size,
        seed,
        num_original,
    };
    corpus.validate()?;
    Ok(corpus)
}

pub fn save_traces(path: impl AsRef<Path>, traces: &[StudentTrace], num_kcs: u32, seed: u64) -> Result<()> {
    let header = TraceRecord::Header {
        schema_version: SCHEMA_VERSION,
        num_students: traces.len() as u32,
        num_kcs,
        seed,
    };
    let records = std::iter::once(header).chain(traces.iter().cloned().map(TraceRecord::Trace));
    write_jsonl(path.as_ref(), records)
}

pub fn load_traces(path: impl AsRef<Path>) -> Result<Vec<StudentTrace>> {
    let mut reader = LineReader::open(path.as_ref())?;
    let (lineno, line) = reader.require_line("header")?;
    let num_students = match parse_line(&line, lineno)? {
        TraceRecord::Header {
            schema_version,
            num_students,
            ..
        } => {
            if schema_version != SCHEMA_VERSION {
                return Err(Error::Version {
                    found: schema_version,
                    expected: SCHEMA_VERSION,
                });
            }
            num_students
        }
        _ => {
            return Err(Error::Parse {
                line: lineno,
                msg: "expected header record first".to_string(),
            })
        }
    };
    let mut traces = Vec::with_capacity(num_students as usize);
    for _ in 0..num_students {
        let (lineno, line) = reader.require_line("trace record")?;
        match parse_line(&line, lineno)? {
            TraceRecord::Trace(t) => traces.push(t),
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "expected trace record".to_string(),
                })
            }
        }
    }
    if let Some((lineno, _)) = reader.next_line()? {
        return Err(Error::Parse {
            line: lineno,
            msg: "trailing data after final record".to_string(),
        });
    }
    Ok(traces)
}
