//! Dataset directory I/O.
//!
//! A QE split is a directory of UTF-8, LF, one-sentence-per-line files:
//! `src.txt`, `mt.txt`, `pe.txt` (optional), `hter.txt` (one decimal per
//! line, four fractional digits), `word_tags.txt` and `gap_tags.txt`
//! (space-separated OK/BAD). Line counts are validated across files, tag
//! counts against token counts, and CRLF input is normalized on read.

use super::{CorpusError, ParallelPair, QeDataset, QESample, Tag, Vocabulary};
use std::fs;
use std::path::Path;

const SRC: &str = "src.txt";
const MT: &str = "mt.txt";
const PE: &str = "pe.txt";
const HTER: &str = "hter.txt";
const WORD_TAGS: &str = "word_tags.txt";
const GAP_TAGS: &str = "gap_tags.txt";

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<(), CorpusError> {
    let mut out = String::new();
    for line in lines {
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path)?;
    let mut lines: Vec<String> = text
        .split('\n')
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect();
    // The writer always ends the file with a newline.
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    Ok(lines)
}

pub fn save_qe_split(dir: &Path, samples: &[QESample]) -> Result<(), CorpusError> {
    fs::create_dir_all(dir)?;
    write_lines(&dir.join(SRC), samples.iter().map(|s| s.source.join(" ")))?;
    write_lines(&dir.join(MT), samples.iter().map(|s| s.mt.join(" ")))?;
    if samples.iter().all(|s| s.pe.is_some()) && !samples.is_empty() {
        write_lines(
            &dir.join(PE),
            samples.iter().map(|s| s.pe.as_ref().unwrap().join(" ")),
        )?;
    }
    write_lines(&dir.join(HTER), samples.iter().map(|s| format!("{:.4}", s.hter)))?;
    let tag_line = |tags: &[Tag]| {
        tags.iter()
            .map(|t| t.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };
    write_lines(
        &dir.join(WORD_TAGS),
        samples.iter().map(|s| tag_line(&s.word_tags)),
    )?;
    write_lines(
        &dir.join(GAP_TAGS),
        samples.iter().map(|s| tag_line(&s.gap_tags)),
    )?;
    Ok(())
}

fn parse_tags(file: &str, line_no: usize, line: &str) -> Result<Vec<Tag>, CorpusError> {
    line.split_whitespace()
        .map(|t| {
            Tag::parse(t).ok_or_else(|| CorpusError::Malformed {
                file: file.to_string(),
                line: line_no,
                msg: format!("unknown tag `{t}` (expected OK or BAD)"),
            })
        })
        .collect()
}

fn ensure_counts(
    dir: &Path,
    name_a: &str,
    a: usize,
    name_b: &str,
    b: usize,
) -> Result<(), CorpusError> {
    if a != b {
        return Err(CorpusError::LineCount {
            file_a: dir.join(name_a).display().to_string(),
            count_a: a,
            file_b: dir.join(name_b).display().to_string(),
            count_b: b,
        });
    }
    Ok(())
}

pub fn load_qe_split(dir: &Path) -> Result<Vec<QESample>, CorpusError> {
    let src = read_lines(&dir.join(SRC))?;
    let mt = read_lines(&dir.join(MT))?;
    let hter = read_lines(&dir.join(HTER))?;
    let word_tags = read_lines(&dir.join(WORD_TAGS))?;
    let gap_tags = read_lines(&dir.join(GAP_TAGS))?;
    let pe_path = dir.join(PE);
    let pe = if pe_path.exists() {
        Some(read_lines(&pe_path)?)
    } else {
        None
    };
    ensure_counts(dir, SRC, src.len(), MT, mt.len())?;
    ensure_counts(dir, SRC, src.len(), HTER, hter.len())?;
    ensure_counts(dir, SRC, src.len(), WORD_TAGS, word_tags.len())?;
    ensure_counts(dir, SRC, src.len(), GAP_TAGS, gap_tags.len())?;
    if let Some(pe) = &pe {
        ensure_counts(dir, SRC, src.len(), PE, pe.len())?;
    }

    let words = |line: &str| -> Vec<String> {
        line.split_whitespace().map(str::to_string).collect()
    };
    let mut samples = Vec::with_capacity(src.len());
    for i in 0..src.len() {
        let line_no = i + 1;
        let malformed = |file: &str, msg: String| CorpusError::Malformed {
            file: file.to_string(),
            line: line_no,
            msg,
        };
        let source = words(&src[i]);
        let mt_words = words(&mt[i]);
        if source.is_empty() {
            return Err(malformed(SRC, "empty sentence".into()));
        }
        if mt_words.is_empty() {
            return Err(malformed(MT, "empty sentence".into()));
        }
        let wt = parse_tags(WORD_TAGS, line_no, &word_tags[i])?;
        let gt = parse_tags(GAP_TAGS, line_no, &gap_tags[i])?;
        if wt.len() != mt_words.len() {
            return Err(malformed(
                WORD_TAGS,
                format!("{} tags for {} mt tokens", wt.len(), mt_words.len()),
            ));
        }
        if gt.len() != mt_words.len() + 1 {
            return Err(malformed(
                GAP_TAGS,
                format!(
                    "{} gap tags for {} mt tokens (need {})",
                    gt.len(),
                    mt_words.len(),
                    mt_words.len() + 1
                ),
            ));
        }
        let h: f64 = hter[i]
            .trim()
            .parse()
            .map_err(|e| malformed(HTER, format!("bad decimal: {e}")))?;
        if !(0.0..=1.0).contains(&h) {
            return Err(malformed(HTER, format!("hter {h} outside [0,1]")));
        }
        samples.push(QESample {
            source,
            mt: mt_words,
            pe: pe.as_ref().map(|p| words(&p[i])),
            word_tags: wt,
            gap_tags: gt,
            hter: h,
        });
    }
    Ok(samples)
}

pub fn save_qe_dataset(root: &Path, dataset: &QeDataset) -> Result<(), CorpusError> {
    save_qe_split(&root.join("train"), &dataset.train)?;
    save_qe_split(&root.join("dev"), &dataset.dev)?;
    save_qe_split(&root.join("test"), &dataset.test)?;
    Ok(())
}

pub fn load_qe_dataset(root: &Path) -> Result<QeDataset, CorpusError> {
    Ok(QeDataset {
        train: load_qe_split(&root.join("train"))?,
        dev: load_qe_split(&root.join("dev"))?,
        test: load_qe_split(&root.join("test"))?,
    })
}

/// Parallel corpus: `parallel.src` / `parallel.tgt`, plus optional
/// `styles.txt` (one latent style id per line) and `flags.txt`
/// (1 = pair was synthetically corrupted, 0 = clean) when ground truth is
/// known.
pub fn save_parallel(
    dir: &Path,
    pairs: &[ParallelPair],
    vocab: &Vocabulary,
    corrupted_flags: Option<&[bool]>,
) -> Result<(), CorpusError> {
    fs::create_dir_all(dir)?;
    write_lines(
        &dir.join("parallel.src"),
        pairs.iter().map(|p| vocab.decode(&p.source).join(" ")),
    )?;
    write_lines(
        &dir.join("parallel.tgt"),
        pairs.iter().map(|p| vocab.decode(&p.target).join(" ")),
    )?;
    if pairs.iter().all(|p| p.style_id.is_some()) {
        write_lines(
            &dir.join("styles.txt"),
            pairs.iter().map(|p| p.style_id.unwrap().to_string()),
        )?;
    }
    if let Some(flags) = corrupted_flags {
        ensure_counts(dir, "parallel.src", pairs.len(), "flags.txt", flags.len())?;
        write_lines(
            &dir.join("flags.txt"),
            flags.iter().map(|f| if *f { "1" } else { "0" }.to_string()),
        )?;
    }
    Ok(())
}

#[allow(clippy::type_complexity)]
pub fn load_parallel(
    dir: &Path,
    vocab: &Vocabulary,
) -> Result<(Vec<ParallelPair>, Option<Vec<bool>>), CorpusError> {
    let src = read_lines(&dir.join("parallel.src"))?;
    let tgt = read_lines(&dir.join("parallel.tgt"))?;
    ensure_counts(dir, "parallel.src", src.len(), "parallel.tgt", tgt.len())?;
    let styles_path = dir.join("styles.txt");
    let styles = if styles_path.exists() {
        let lines = read_lines(&styles_path)?;
        ensure_counts(dir, "parallel.src", src.len(), "styles.txt", lines.len())?;
        Some(
            lines
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    l.trim().parse::<usize>().map_err(|e| CorpusError::Malformed {
                        file: "styles.txt".into(),
                        line: i + 1,
                        msg: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };
    let encode = |line: &str, file: &str, line_no: usize| -> Result<Vec<u32>, CorpusError> {
        let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            return Err(CorpusError::Malformed {
                file: file.to_string(),
                line: line_no,
                msg: "empty sentence".into(),
            });
        }
        Ok(vocab.encode_words(&words).0)
    };
    let mut pairs = Vec::with_capacity(src.len());
    for i in 0..src.len() {
        pairs.push(ParallelPair {
            source: encode(&src[i], "parallel.src", i + 1)?,
            target: encode(&tgt[i], "parallel.tgt", i + 1)?,
            style_id: styles.as_ref().map(|s| s[i]),
        });
    }
    let flags_path = dir.join("flags.txt");
    let flags = if flags_path.exists() {
        let lines = read_lines(&flags_path)?;
        ensure_counts(dir, "parallel.src", src.len(), "flags.txt", lines.len())?;
        Some(lines.iter().map(|l| l.trim() == "1").collect())
    } else {
        None
    };
    Ok((pairs, flags))
}
