use rand::seq::SliceRandom;
use rand::Rng;

use super::align::AlignmentTrack;
use super::mel::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nnprim::Tensor;

/// Rebuild the mel (and its frame tags) with the phoneme segments laid out in
/// the order given by `perm`: output position i holds segment `perm[i]`.
pub fn permute_segments(
    mel: &MelSpectrogram,
    align: &AlignmentTrack,
    perm: &[usize],
) -> Result<(MelSpectrogram, Vec<usize>)> {
    if mel.t_len() != align.t_len() {
        return Err(Error::InvalidInput(format!(
            "mel has {} frames but alignment covers {}",
            mel.t_len(),
            align.t_len()
        )));
    }
    let segments = align.segments();
    let mut seen = vec![false; segments.len()];
    let valid = perm.len() == segments.len()
        && perm.iter().all(|&i| i < segments.len() && !std::mem::replace(&mut seen[i], true));
    if !valid {
        return Err(Error::InvalidInput(format!(
            "expected a permutation of {} segments",
            segments.len()
        )));
    }
    let n_mels = mel.n_mels();
    let mut frames = Vec::with_capacity(mel.frames.numel());
    let mut tags = Vec::with_capacity(mel.t_len());
    for &s in perm {
        let seg = segments[s];
        for t in seg.start..seg.end {
            frames.extend_from_slice(mel.frames.row(t));
            tags.push(seg.phoneme);
        }
    }
    let frames = Tensor::from_vec(&[mel.t_len(), n_mels], frames)?;
    Ok((MelSpectrogram::new(frames), tags))
}

/// Training-time augmentation: concatenate the utterance's phoneme segments
/// in a uniformly random order. Returns the rearranged mel together with the
/// identically permuted frame tags; the caller keeps the original mel as the
/// reconstruction target.
pub fn shuffle_by_phoneme<R: Rng>(
    mel: &MelSpectrogram,
    align: &AlignmentTrack,
    rng: &mut R,
) -> Result<(MelSpectrogram, Vec<usize>)> {
    let n = align.segments().len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    permute_segments(mel, align, &perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mel_of_rows(rows: &[Vec<f64>]) -> MelSpectrogram {
        MelSpectrogram::new(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn identity_permutation_is_a_fixpoint() {
        let mel = mel_of_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let align = AlignmentTrack::new(4, vec![2, 2, 3]).unwrap();
        let (out, tags) = permute_segments(&mel, &align, &[0, 1]).unwrap();
        assert_eq!(out, mel);
        assert_eq!(tags, vec![2, 2, 3]);
    }

    #[test]
    fn single_segment_is_unchanged_for_any_seed() {
        let mel = mel_of_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let align = AlignmentTrack::new(1, vec![0, 0, 0]).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, tags) = shuffle_by_phoneme(&mel, &align, &mut rng).unwrap();
            assert_eq!(out, mel);
            assert_eq!(tags, vec![0, 0, 0]);
        }
    }

    #[test]
    fn explicit_swap_moves_whole_segments() {
        // Segments: phoneme 0 over frames [0,2), phoneme 1 over [2,5).
        let mel = mel_of_rows(&[
            vec![10.0],
            vec![11.0],
            vec![20.0],
            vec![21.0],
            vec![22.0],
        ]);
        let align = AlignmentTrack::new(2, vec![0, 0, 1, 1, 1]).unwrap();
        let (out, tags) = permute_segments(&mel, &align, &[1, 0]).unwrap();
        assert_eq!(out.frames.data(), &[20.0, 21.0, 22.0, 10.0, 11.0]);
        assert_eq!(tags, vec![1, 1, 1, 0, 0]);
    }

    #[test]
    fn frame_and_tag_multisets_are_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..100 {
            // Random alignment of 1..=6 segments with distinct neighbors.
            let n_segments = 1 + (case % 6);
            let mut tags = Vec::new();
            let mut prev = usize::MAX;
            for _ in 0..n_segments {
                let mut p = rng.random_range(0..5usize);
                if p == prev {
                    p = (p + 1) % 5;
                }
                let len = rng.random_range(1..4usize);
                tags.extend(std::iter::repeat_n(p, len));
                prev = p;
            }
            let align = AlignmentTrack::new(5, tags.clone()).unwrap();
            let mel = MelSpectrogram::new(Tensor::randn(&[tags.len(), 3], &mut rng));
            let (out, out_tags) = shuffle_by_phoneme(&mel, &align, &mut rng).unwrap();

            let sorted_rows = |m: &MelSpectrogram| {
                let mut rows: Vec<Vec<f64>> =
                    (0..m.t_len()).map(|t| m.frames.row(t).to_vec()).collect();
                rows.sort_by(|a, b| {
                    a.iter()
                        .map(|v| v.to_bits())
                        .cmp(b.iter().map(|v| v.to_bits()))
                });
                rows
            };
            assert_eq!(sorted_rows(&out), sorted_rows(&mel), "case {case}");
            let mut a = tags.clone();
            let mut b = out_tags.clone();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b, "case {case}");
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let mut rng_a = ChaCha8Rng::seed_from_u64(7);
        let mut rng_b = ChaCha8Rng::seed_from_u64(7);
        let mel = mel_of_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        let align = AlignmentTrack::new(4, vec![0, 1, 2, 3]).unwrap();
        let a = shuffle_by_phoneme(&mel, &align, &mut rng_a).unwrap();
        let b = shuffle_by_phoneme(&mel, &align, &mut rng_b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mel = mel_of_rows(&[vec![1.0], vec![2.0]]);
        let align = AlignmentTrack::new(2, vec![0, 0, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(shuffle_by_phoneme(&mel, &align, &mut rng).is_err());
        assert!(permute_segments(&mel, &align, &[0, 1]).is_err());
    }
}
