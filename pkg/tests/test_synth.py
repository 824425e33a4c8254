"""Synthetic corpus generator: shape, determinism, severity encoding."""

import filecmp

import numpy as np
import pytest

from sevkit import synth
from sevkit.corpus import load_manifest
from sevkit.model.ctc import min_alignment_frames
from sevkit.synth import SynthError, frame_energy_variance, generate_corpus, make_speakers


def test_fifty_speakers_give_five_hundred_utterances(tmp_path):
    manifest, roster = generate_corpus(tmp_path, seed=0, size=50)
    roster_records, utterances = load_manifest(manifest)
    assert len(roster_records) == 50
    assert len(utterances) == 500
    per_speaker = {}
    for utt in utterances:
        per_speaker.setdefault(utt.speaker_id, []).append((utt.text_id, utt.repetition))
    for pairs in per_speaker.values():
        assert sorted(pairs) == [(t, r) for t in range(1, 6) for r in (1, 2)]


def test_same_seed_byte_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_corpus(a, seed=3, size=25)
    generate_corpus(b, seed=3, size=25)
    assert (a / "manifest.tsv").read_bytes() == (b / "manifest.tsv").read_bytes()
    assert (a / "roster.tsv").read_bytes() == (b / "roster.tsv").read_bytes()
    match, mismatch, errors = filecmp.cmpfiles(
        a / "wavs", b / "wavs", [p.name for p in (a / "wavs").iterdir()], shallow=False
    )
    assert not mismatch and not errors


def test_different_seed_differs(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_corpus(a, seed=3, size=25)
    generate_corpus(b, seed=4, size=25)
    assert (a / "roster.tsv").read_bytes() == (b / "roster.tsv").read_bytes()  # roster layout fixed
    wav = next((a / "wavs").iterdir()).name
    assert (a / "wavs" / wav).read_bytes() != (b / "wavs" / wav).read_bytes()


def test_infeasible_size_rejected(tmp_path):
    with pytest.raises(SynthError, match="at least"):
        generate_corpus(tmp_path, seed=0, size=10)


def test_severity_classes_balanced():
    profiles = make_speakers(0, 50)
    counts = np.bincount([p.record.severity for p in profiles], minlength=5)
    assert np.all(counts == 10)
    genders = {p.record.gender for p in profiles}
    assert genders == {"M", "F"}


def test_energy_variance_monotone_with_severity():
    """Generator self-check: the declared statistic (mean per-utterance
    frame-energy variance) increases strictly with the severity label."""
    for seed in (0, 1):
        profiles = make_speakers(seed, 25)
        stats = {s: [] for s in range(5)}
        for idx, profile in enumerate(profiles):
            for text_id in (1, 3, 5):
                audio = synth.render_utterance(profile, text_id, 1, seed, idx)
                stats[profile.record.severity].append(frame_energy_variance(audio))
        means = [np.mean(stats[s]) for s in range(5)]
        assert all(means[i] < means[i + 1] for i in range(4)), means


def test_all_utterances_ctc_alignable(tmp_path):
    manifest, _ = generate_corpus(tmp_path, seed=1, size=25)
    _, utterances = load_manifest(manifest)
    for utt in utterances:
        frames = -(-utt.audio.samples.size // 320)
        assert frames >= min_alignment_frames(utt.transcript)


def test_samples_in_range(tmp_path):
    generate_corpus(tmp_path, seed=2, size=25)
    _, utterances = load_manifest(tmp_path / "manifest.tsv")
    for utt in utterances[:20]:
        assert np.max(np.abs(utt.audio.samples)) <= 1.0
