use std::path::Path;

use crate::error::{Error, Result};

/// Frame-level phoneme labels for one utterance, total over `[0, T)`.
///
/// Phoneme ids index a set of size `n_phonemes`; symbols render as `p<id>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentTrack {
    n_phonemes: usize,
    frame_tags: Vec<usize>,
}

/// Maximal run of identical frame tags: `[start, end)` labeled `phoneme`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub phoneme: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

impl AlignmentTrack {
    pub fn new(n_phonemes: usize, frame_tags: Vec<usize>) -> Result<AlignmentTrack> {
        if frame_tags.is_empty() {
            return Err(Error::InvalidInput("alignment must cover at least one frame".into()));
        }
        if let Some(&bad) = frame_tags.iter().find(|&&t| t >= n_phonemes) {
            return Err(Error::InvalidInput(format!(
                "frame tag {bad} out of range for phoneme set of size {n_phonemes}"
            )));
        }
        Ok(AlignmentTrack { n_phonemes, frame_tags })
    }

    pub fn t_len(&self) -> usize {
        self.frame_tags.len()
    }

    pub fn n_phonemes(&self) -> usize {
        self.n_phonemes
    }

    pub fn frame_tags(&self) -> &[usize] {
        &self.frame_tags
    }

    /// Run-length encode the frame tags into contiguous segments.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.frame_tags.len() {
            if i == self.frame_tags.len() || self.frame_tags[i] != self.frame_tags[start] {
                out.push(Segment {
                    phoneme: self.frame_tags[start],
                    start,
                    end: i,
                });
                start = i;
            }
        }
        out
    }
}

/// Write the alignment text format: a `#phoneme_set p<N>` header naming the
/// set by its size, then one `<frame_index> p<id>` line per frame.
pub fn save_alignment(path: &Path, track: &AlignmentTrack) -> Result<()> {
    let mut text = format!("#phoneme_set p{}\n", track.n_phonemes());
    for (i, tag) in track.frame_tags().iter().enumerate() {
        text.push_str(&format!("{i} p{tag}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing alignment {}", path.display()), e))
}

pub fn load_alignment(path: &Path) -> Result<AlignmentTrack> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading alignment {}", path.display()), e))?;
    parse_alignment(&text, &path.display().to_string())
}

fn parse_alignment(text: &str, origin: &str) -> Result<AlignmentTrack> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(origin, 1, "empty alignment file"))?;
    let n_phonemes = header
        .strip_prefix("#phoneme_set p")
        .and_then(|s| s.trim().parse::<usize>().ok())
        .ok_or_else(|| Error::format(origin, 1, "expected header `#phoneme_set p<N>`"))?;

    let mut frame_tags = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let frame: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(origin, lineno, "expected `<frame_index> <phoneme_symbol>`"))?;
        let symbol = parts
            .next()
            .ok_or_else(|| Error::format(origin, lineno, "missing phoneme symbol"))?;
        if parts.next().is_some() {
            return Err(Error::format(origin, lineno, "trailing tokens after phoneme symbol"));
        }
        if frame != frame_tags.len() {
            return Err(Error::format(
                origin,
                lineno,
                format!("frames must be contiguous from 0; expected {}, got {frame}", frame_tags.len()),
            ));
        }
        let tag: usize = symbol
            .strip_prefix('p')
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(origin, lineno, format!("unparseable phoneme symbol `{symbol}`")))?;
        if tag >= n_phonemes {
            return Err(Error::format(
                origin,
                lineno,
                format!("phoneme p{tag} outside declared set of size {n_phonemes}"),
            ));
        }
        frame_tags.push(tag);
    }
    if frame_tags.is_empty() {
        return Err(Error::format(origin, 1, "alignment lists no frames"));
    }
    AlignmentTrack::new(n_phonemes, frame_tags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_length_segments() {
        let track = AlignmentTrack::new(3, vec![0, 0, 1]).unwrap();
        assert_eq!(
            track.segments(),
            vec![
                Segment { phoneme: 0, start: 0, end: 2 },
                Segment { phoneme: 1, start: 2, end: 3 },
            ]
        );
        let single = AlignmentTrack::new(3, vec![2]).unwrap();
        assert_eq!(single.segments(), vec![Segment { phoneme: 2, start: 0, end: 1 }]);
        // A phoneme returning later starts a fresh segment.
        let aba = AlignmentTrack::new(3, vec![0, 1, 0]).unwrap();
        let segs = aba.segments();
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[1].len(), 1);
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.align");
        let track = AlignmentTrack::new(5, vec![4, 4, 0, 1, 1, 1]).unwrap();
        save_alignment(&path, &track).unwrap();
        assert_eq!(load_alignment(&path).unwrap(), track);
        // Saving the reloaded track reproduces the bytes.
        let path2 = dir.path().join("v.align");
        save_alignment(&path2, &load_alignment(&path).unwrap()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn gaps_and_unknown_phonemes_are_format_errors_with_line_numbers() {
        let gap = "#phoneme_set p3\n0 p1\n2 p1\n";
        let err = parse_alignment(gap, "test").unwrap_err();
        match err {
            Error::Format { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }

        let unknown = "#phoneme_set p3\n0 p1\n1 p7\n";
        let err = parse_alignment(unknown, "test").unwrap_err();
        match err {
            Error::Format { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("p7"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let bad_symbol = "#phoneme_set p3\n0 x1\n";
        assert!(matches!(parse_alignment(bad_symbol, "test"), Err(Error::Format { line: 2, .. })));
    }

    #[test]
    fn out_of_range_tags_rejected_at_construction() {
        assert!(AlignmentTrack::new(2, vec![0, 2]).is_err());
        assert!(AlignmentTrack::new(2, vec![]).is_err());
    }
}
