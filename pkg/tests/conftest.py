"""Shared fixtures: small corpora on disk and cached synthetic data."""

import numpy as np
import pytest

from sevkit import synth
from sevkit.corpus import RawAudio, load_manifest, make_split, partition_utterances
from sevkit.trainer import examples_from_corpus


def write_tiny_corpus(root, num_speakers=4, texts=(1, 2), sample_rate=16000):
    """Hand-rolled miniature corpus: tone audio, short transcripts."""
    wav_dir = root / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    from sevkit.corpus import save_wav

    with open(root / "roster.tsv", "w") as fh:
        fh.write("speaker_id\tgender\tseverity\n")
        for i in range(num_speakers):
            fh.write(f"SPK{i:02d}\t{'M' if i % 2 == 0 else 'F'}\t{i % 5}\n")

    rng = np.random.default_rng(7)
    with open(root / "manifest.tsv", "w") as fh:
        fh.write("utterance_id\tspeaker_id\taudio_path\ttranscript\ttext_id\trepetition\n")
        for i in range(num_speakers):
            for text_id in texts:
                utt = f"SPK{i:02d}_t{text_id}_r1"
                t = np.arange(int(0.4 * sample_rate)) / sample_rate
                wave = 0.4 * np.sin(2 * np.pi * (150 + 60 * text_id + 10 * i) * t)
                wave += rng.normal(0, 0.01, wave.size)
                save_wav(wav_dir / f"{utt}.wav", RawAudio(np.clip(wave, -1, 1), sample_rate))
                fh.write(f"{utt}\tSPK{i:02d}\twavs/{utt}.wav\t1 2\t{text_id}\t1\n")
    return root / "manifest.tsv", root / "roster.tsv"


@pytest.fixture(scope="session")
def micro_corpus(tmp_path_factory):
    """40-speaker synthetic corpus shared by trainer-level tests."""
    root = tmp_path_factory.mktemp("micro_corpus")
    synth.generate_corpus(root, seed=11, size=40)
    roster, utterances = load_manifest(root / "manifest.tsv")
    assignment = make_split(roster, seed=11)
    parts = partition_utterances(utterances, assignment)
    examples = {k: examples_from_corpus(roster, v) for k, v in parts.items()}
    return {
        "root": root,
        "roster": roster,
        "utterances": utterances,
        "assignment": assignment,
        "parts": parts,
        "examples": examples,
    }
