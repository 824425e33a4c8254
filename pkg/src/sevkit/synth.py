"""Synthetic desk-scale speech corpus with severity-graded distortions.

Each utterance renders one of five fixed token sequences as a chain of
two-formant tone segments (per-speaker pitch and rate).  The severity
label is encoded by monotone distortions: additive noise level, spectral
tilt (one-pole lowpass), tempo jitter, and amplitude tremor all increase
with severity, so the label is learnable from the audio alone.  The
whole corpus is a deterministic function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import GENDERS, RawAudio, SpeakerRecord, save_wav

SAMPLE_RATE = 16000
NUM_TEXTS = 5
REPETITIONS = (1, 2)
MIN_SPEAKERS = 25

# token -> (low formant Hz, high formant Hz); token 0 is the CTC blank
TOKEN_FORMANTS = {
    1: (300.0, 2200.0),
    2: (400.0, 1800.0),
    3: (550.0, 1400.0),
    4: (650.0, 1000.0),
    5: (350.0, 2600.0),
    6: (500.0, 2000.0),
    7: (700.0, 1600.0),
    8: (450.0, 1200.0),
}
VOCABULARY = tuple(sorted(TOKEN_FORMANTS))

TEXTS = {
    1: (1, 3, 5, 2),
    2: (4, 2, 6, 1, 7),
    3: (8, 5, 3, 6, 2, 4),
    4: (2, 7, 1, 4, 6),
    5: (5, 1, 8, 3, 7, 2, 6),
}

# distortion strengths indexed by severity 0 (healthy) .. 4 (severe)
NOISE_STD = (0.002, 0.015, 0.045, 0.095, 0.160)
TILT_COEF = (0.00, 0.22, 0.45, 0.65, 0.85)
TEMPO_JITTER = (0.02, 0.07, 0.12, 0.18, 0.25)
TREMOR_DEPTH = (0.00, 0.18, 0.36, 0.54, 0.72)

SEGMENT_SECONDS = 0.105
GAP_SECONDS = 0.035
BASE_AMPLITUDE = 0.30


class SynthError(Exception):
    """Infeasible generation request."""


@dataclass(frozen=True)
class SpeakerProfile:
    record: SpeakerRecord
    pitch: float
    rate: float
    tremor_freq: float


def _speaker_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x51EA, index]))


def _utterance_rng(seed: int, index: int, text_id: int, repetition: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x0077, index, text_id, repetition]))


def make_speakers(seed: int, size: int) -> list[SpeakerProfile]:
    """Speaker roster with balanced severity classes and alternating gender."""
    if size < MIN_SPEAKERS:
        raise SynthError(f"need at least {MIN_SPEAKERS} speakers (5 per severity class), got {size}")
    profiles = []
    for idx in range(size):
        severity = idx % 5
        gender = GENDERS[(idx // 5) % 2]
        rng = _speaker_rng(seed, idx)
        pitch = rng.normal(115.0, 8.0) if gender == "M" else rng.normal(205.0, 12.0)
        record = SpeakerRecord(f"SYN{idx:03d}", gender, severity)
        profiles.append(
            SpeakerProfile(
                record=record,
                pitch=float(np.clip(pitch, 80.0, 260.0)),
                rate=float(rng.uniform(0.92, 1.12)),
                tremor_freq=float(rng.uniform(4.0, 7.0)),
            )
        )
    return profiles


def _tone_segment(f_low: float, f_high: float, pitch: float, num: int) -> np.ndarray:
    t = np.arange(num) / SAMPLE_RATE
    wave = (
        np.sin(2 * np.pi * f_low * t)
        + 0.7 * np.sin(2 * np.pi * f_high * t)
        + 0.5 * np.sin(2 * np.pi * pitch * t)
    )
    ramp = min(num // 6, 160)
    env = np.ones(num)
    if ramp > 0:
        env[:ramp] = np.linspace(0.0, 1.0, ramp)
        env[-ramp:] = np.linspace(1.0, 0.0, ramp)
    return wave * env / 2.2


def render_utterance(profile: SpeakerProfile, text_id: int, repetition: int, seed: int, index: int) -> RawAudio:
    """Render one utterance with the speaker's severity distortions."""
    severity = profile.record.severity
    rng = _utterance_rng(seed, index, text_id, repetition)
    tokens = TEXTS[text_id]
    jitter = TEMPO_JITTER[severity]

    pieces = [np.zeros(int(GAP_SECONDS * SAMPLE_RATE))]
    for token in tokens:
        dur = SEGMENT_SECONDS * profile.rate * (1.0 + jitter * rng.uniform(-1.0, 1.0))
        num = max(int(dur * SAMPLE_RATE), 320)
        f_low, f_high = TOKEN_FORMANTS[token]
        pieces.append(_tone_segment(f_low, f_high, profile.pitch, num))
        gap = GAP_SECONDS * (1.0 + jitter * rng.uniform(-1.0, 1.0))
        pieces.append(np.zeros(max(int(gap * SAMPLE_RATE), 80)))
    signal = np.concatenate(pieces)

    tilt = TILT_COEF[severity]
    if tilt > 0.0:
        from scipy.signal import lfilter

        # one-pole lowpass changes the spectral shape; restore the RMS so
        # tilt does not double as a loudness cue
        rms_before = np.sqrt(np.mean(signal**2))
        signal = lfilter([1.0 - tilt], [1.0, -tilt], signal)
        rms_after = np.sqrt(np.mean(signal**2))
        if rms_after > 0:
            signal *= rms_before / rms_after

    t = np.arange(signal.size) / SAMPLE_RATE
    tremor = 1.0 + TREMOR_DEPTH[severity] * np.sin(2 * np.pi * profile.tremor_freq * t + rng.uniform(0, 2 * np.pi))
    signal = BASE_AMPLITUDE * signal * tremor

    signal = signal + rng.normal(0.0, NOISE_STD[severity], signal.size)
    return RawAudio(np.clip(signal, -1.0, 1.0), SAMPLE_RATE)


def generate_corpus(out_dir, seed: int, size: int) -> tuple[Path, Path]:
    """Write roster.tsv, manifest.tsv, and wavs/ under out_dir.

    Every speaker records each of the five texts twice.  Returns the
    (manifest, roster) paths.
    """
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    profiles = make_speakers(seed, size)

    roster_path = out_dir / "roster.tsv"
    with open(roster_path, "w") as fh:
        fh.write("speaker_id\tgender\tseverity\n")
        for p in profiles:
            fh.write(f"{p.record.speaker_id}\t{p.record.gender}\t{p.record.severity}\n")

    manifest_path = out_dir / "manifest.tsv"
    with open(manifest_path, "w") as fh:
        fh.write("utterance_id\tspeaker_id\taudio_path\ttranscript\ttext_id\trepetition\n")
        for idx, profile in enumerate(profiles):
            for text_id in range(1, NUM_TEXTS + 1):
                for rep in REPETITIONS:
                    utt_id = f"{profile.record.speaker_id}_t{text_id}_r{rep}"
                    audio = render_utterance(profile, text_id, rep, seed, idx)
                    rel = f"wavs/{utt_id}.wav"
                    save_wav(out_dir / rel, audio)
                    transcript = " ".join(str(tok) for tok in TEXTS[text_id])
                    fh.write(f"{utt_id}\t{profile.record.speaker_id}\t{rel}\t{transcript}\t{text_id}\t{rep}\n")
    return manifest_path, roster_path


def frame_energy_variance(audio: RawAudio, frame: float = 0.025, hop: float = 0.010) -> float:
    """Variance of per-frame energy; the generator's severity self-check
    statistic (increases with the distortion strengths)."""
    n = int(frame * audio.sample_rate)
    h = int(hop * audio.sample_rate)
    if audio.samples.size < n:
        return 0.0
    count = (audio.samples.size - n) // h + 1
    idx = np.arange(n)[None, :] + h * np.arange(count)[:, None]
    energies = np.mean(audio.samples[idx] ** 2, axis=1)
    return float(np.var(energies))
