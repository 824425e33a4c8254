"""Hand-crafted baseline features: framewise acoustic descriptors with
statistical functionals, plus transcript-based linguistic features.

The acoustic set covers the frequency / energy / spectral / temporal
descriptor families (20 framewise descriptors, 5 functionals each, plus
a voicing validity flag).  It is a documented subset, not a
parameter-for-parameter clone of any external toolkit.

Conventions (fixed across the package):
  frame 25 ms / hop 10 ms, pre-emphasis 0.97 for spectral descriptors,
  voicing = normalized autocorrelation peak >= 0.3 in the 60-400 Hz band,
  population (not sample) variance, pauses = frame log-energy below the
  median voiced log-energy minus 20 dB for at least 150 ms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .corpus import RawAudio

FRAME_LENGTH = 0.025
HOP_LENGTH = 0.010
PRE_EMPHASIS = 0.97
VOICING_THRESHOLD = 0.3
F0_MIN = 60.0
F0_MAX = 400.0
NUM_CEPSTRA = 13
PAUSE_GATE_DB = 20.0
MIN_PAUSE_SECONDS = 0.150
LOG_ENERGY_FLOOR = 1e-10

VOICED_DESCRIPTORS = ("f0", "jitter", "shimmer")
FUNCTIONAL_NAMES = ("mean", "std", "p20", "p50", "p80")

LINGUISTIC_NAMES = (
    "speaking_rate",
    "articulation_rate",
    "pause_ratio",
    "pause_count",
    "pitch_mean",
    "pitch_range",
    "pitch_std",
    "utterance_duration",
    "rhythm_variability",
    "speech_validity",
)


class FeatureError(Exception):
    """Invalid input to a feature extraction operation."""


@dataclass(frozen=True)
class LLDMatrix:
    """Framewise low-level descriptors: frames x descriptors."""

    values: np.ndarray
    descriptor_names: tuple[str, ...]
    frame_length: float
    hop_length: float
    voiced_mask: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.descriptor_names):
            raise FeatureError("descriptor_names length must equal column count")
        if self.voiced_mask.shape != (self.values.shape[0],):
            raise FeatureError("voiced_mask must have one entry per frame")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class FeatureVector:
    """Fixed-length named feature values; never carries NaN/Inf."""

    values: np.ndarray
    names: tuple[str, ...]
    set_id: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.shape != (len(self.names),):
            raise FeatureError("values length must equal names length")
        if self.set_id not in ("acoustic", "linguistic", "combined"):
            raise FeatureError(f"unknown set_id {self.set_id!r}")
        if not np.all(np.isfinite(values)):
            raise FeatureError("feature values must be finite")


def _frame_array(samples: np.ndarray, sample_rate: int, frame_length: float, hop_length: float) -> np.ndarray:
    if not (frame_length >= hop_length > 0):
        raise FeatureError("need frame_length >= hop_length > 0")
    frame_n = int(round(frame_length * sample_rate))
    hop_n = int(round(hop_length * sample_rate))
    if samples.size < frame_n:
        raise FeatureError(f"audio ({samples.size} samples) shorter than one frame ({frame_n} samples)")
    num_frames = (samples.size - frame_n) // hop_n + 1
    idx = np.arange(frame_n)[None, :] + hop_n * np.arange(num_frames)[:, None]
    return samples[idx]


def frame_signal(audio: RawAudio, frame_length: float = FRAME_LENGTH, hop_length: float = HOP_LENGTH) -> np.ndarray:
    """Slice audio into overlapping frames; the last partial frame is dropped.

    Returns an array of shape (num_frames, frame_samples) where
    num_frames = floor((L - frame_samples) / hop_samples) + 1.
    """
    return _frame_array(audio.samples, audio.sample_rate, frame_length, hop_length)


def _autocorr_f0(frame: np.ndarray, sample_rate: int) -> tuple[float, bool]:
    """Normalized-autocorrelation pitch for one frame.

    Searches lags covering 60-400 Hz; refines the peak with parabolic
    interpolation.  Returns (f0_hz, voiced); unvoiced frames get f0 = 0.
    """
    n = frame.size
    frame = frame - frame.mean()
    energy = float(np.dot(frame, frame))
    if energy <= 0.0:
        return 0.0, False
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(frame, nfft)
    ac = np.fft.irfft(spec * np.conj(spec), nfft)[:n]
    ac = ac / ac[0]
    lag_min = int(np.floor(sample_rate / F0_MAX))
    lag_max = int(np.ceil(sample_rate / F0_MIN))
    lag_max = min(lag_max, n - 1)
    if lag_max <= lag_min:
        return 0.0, False
    band = ac[lag_min : lag_max + 1]
    k = int(np.argmax(band))
    peak = band[k]
    if peak < VOICING_THRESHOLD:
        return 0.0, False
    lag = lag_min + k
    # parabolic refinement around the integer-lag peak
    if 0 < lag < n - 1:
        a, b, c = ac[lag - 1], ac[lag], ac[lag + 1]
        denom = a - 2 * b + c
        if abs(denom) > 1e-12:
            lag = lag + 0.5 * (a - c) / denom
    return float(sample_rate / lag), True


def extract_llds(audio: RawAudio) -> LLDMatrix:
    """Compute per-frame descriptors for one utterance.

    Columns: f0, log_energy, jitter, shimmer, spectral_centroid,
    spectral_flux, zcr, cep_00..cep_12.  F0/jitter/shimmer are defined on
    voiced frames (voiced_mask marks them); spectral descriptors are
    computed on the pre-emphasized signal.
    """
    frames = frame_signal(audio)
    emphasized = np.concatenate(([audio.samples[0]], audio.samples[1:] - PRE_EMPHASIS * audio.samples[:-1]))
    frames_pre = _frame_array(emphasized, audio.sample_rate, FRAME_LENGTH, HOP_LENGTH)
    num_frames = frames.shape[0]

    f0 = np.zeros(num_frames)
    voiced = np.zeros(num_frames, dtype=bool)
    for t in range(num_frames):
        f0[t], voiced[t] = _autocorr_f0(frames[t], audio.sample_rate)

    energy = np.mean(frames**2, axis=1)
    log_energy = np.log(np.maximum(energy, LOG_ENERGY_FLOOR))

    jitter = np.zeros(num_frames)
    both = voiced[1:] & voiced[:-1]
    jitter[1:][both] = np.abs(np.diff(f0))[both]

    peaks = np.max(np.abs(frames), axis=1)
    shimmer = np.zeros(num_frames)
    shimmer[1:] = np.abs(np.diff(peaks))

    window = np.hanning(frames_pre.shape[1])
    mag = np.abs(np.fft.rfft(frames_pre * window, axis=1))
    freqs = np.fft.rfftfreq(frames_pre.shape[1], d=1.0 / audio.sample_rate)
    mag_sum = np.sum(mag, axis=1)
    centroid = np.where(mag_sum > 0, mag @ freqs / np.maximum(mag_sum, 1e-20), 0.0)
    flux = np.zeros(num_frames)
    flux[1:] = np.sum(np.diff(mag, axis=0) ** 2, axis=1)

    signs = np.sign(frames)
    signs[signs == 0] = 1
    zcr = np.mean(np.abs(np.diff(signs, axis=1)) > 0, axis=1)

    log_mag = np.log(np.maximum(mag, 1e-10))
    cepstra = dct(log_mag, type=2, axis=1, norm="ortho")[:, :NUM_CEPSTRA]

    names = ["f0", "log_energy", "jitter", "shimmer", "spectral_centroid", "spectral_flux", "zcr"]
    names += [f"cep_{i:02d}" for i in range(NUM_CEPSTRA)]
    values = np.column_stack(
        [f0, log_energy, jitter, shimmer, centroid, flux, zcr, cepstra]
    )
    return LLDMatrix(
        values=values,
        descriptor_names=tuple(names),
        frame_length=FRAME_LENGTH,
        hop_length=HOP_LENGTH,
        voiced_mask=voiced,
    )


def _functionals(column: np.ndarray) -> np.ndarray:
    return np.array(
        [
            np.mean(column),
            np.std(column),  # population convention
            np.percentile(column, 20),
            np.percentile(column, 50),
            np.percentile(column, 80),
        ]
    )


def apply_functionals(lld: LLDMatrix) -> FeatureVector:
    """Summarize each descriptor with mean/std/p20/p50/p80 over frames.

    Voiced-only descriptors (f0, jitter, shimmer) are summarized over
    voiced frames; with no voiced frames their functionals are 0 and the
    trailing voiced_validity feature is 0.
    """
    if lld.num_frames < 1:
        raise FeatureError("need at least one frame")
    voiced_any = bool(np.any(lld.voiced_mask))
    values = []
    names = []
    for j, desc in enumerate(lld.descriptor_names):
        column = lld.values[:, j]
        if desc in VOICED_DESCRIPTORS:
            stats = _functionals(column[lld.voiced_mask]) if voiced_any else np.zeros(5)
        else:
            stats = _functionals(column)
        values.append(stats)
        names.extend(f"{desc}_{f}" for f in FUNCTIONAL_NAMES)
    values.append([1.0 if voiced_any else 0.0])
    names.append("voiced_validity")
    flat = np.concatenate(values)
    flat[~np.isfinite(flat)] = 0.0
    return FeatureVector(values=flat, names=tuple(names), set_id="acoustic")


def extract_acoustic(audio: RawAudio) -> FeatureVector:
    """Full acoustic pipeline: framewise descriptors then functionals."""
    return apply_functionals(extract_llds(audio))


def _pause_segments(log_energy: np.ndarray, voiced: np.ndarray, hop: float):
    """Split frames into speech/pause runs with the energy gate.

    Returns (pause_mask, speech_segments, pause_segments) where segments
    are lists of frame counts per maximal run.  Below-gate runs shorter
    than the minimum pause duration count as speech.
    """
    if np.any(voiced):
        gate = np.median(log_energy[voiced]) - PAUSE_GATE_DB * np.log(10.0) / 10.0
        below = log_energy < gate
    else:
        below = np.ones_like(log_energy, dtype=bool)
    min_frames = max(1, int(round(MIN_PAUSE_SECONDS / hop)))

    pause_mask = np.zeros_like(below)
    n = below.size
    i = 0
    while i < n:
        j = i
        while j < n and below[j] == below[i]:
            j += 1
        if below[i] and (j - i) >= min_frames:
            pause_mask[i:j] = True
        i = j

    speech_runs, pause_runs = [], []
    i = 0
    while i < n:
        j = i
        while j < n and pause_mask[j] == pause_mask[i]:
            j += 1
        (pause_runs if pause_mask[i] else speech_runs).append(j - i)
        i = j
    return pause_mask, speech_runs, pause_runs


def extract_linguistic(audio: RawAudio, transcript) -> FeatureVector:
    """Transcript-normalized rate, pause, and pitch features.

    speaking_rate is tokens per second of total duration; articulation
    rate divides by speech (non-pause) duration only.  Degenerate inputs
    (all-pause audio) produce zeros with speech_validity = 0.
    """
    transcript = tuple(transcript)
    if len(transcript) == 0:
        raise FeatureError("transcript must be non-empty")
    lld = extract_llds(audio)
    log_energy = lld.values[:, list(lld.descriptor_names).index("log_energy")]
    f0 = lld.values[:, list(lld.descriptor_names).index("f0")]
    voiced = lld.voiced_mask
    duration = audio.duration

    pause_mask, speech_runs, pause_runs = _pause_segments(log_energy, voiced, lld.hop_length)
    pause_duration = float(np.sum(pause_mask)) * lld.hop_length
    pause_ratio = min(1.0, pause_duration / duration) if duration > 0 else 1.0
    if not np.any(voiced):
        pause_ratio = 1.0
    speech_duration = max(0.0, duration - pause_duration)

    speaking_rate = len(transcript) / duration
    valid = np.any(voiced) and speech_duration > 0
    articulation_rate = len(transcript) / speech_duration if valid else 0.0

    if np.any(voiced):
        pitch = f0[voiced]
        pitch_mean = float(np.mean(pitch))
        pitch_range = float(np.max(pitch) - np.min(pitch))
        pitch_std = float(np.std(pitch))
    else:
        pitch_mean = pitch_range = pitch_std = 0.0

    speech_seg_durations = np.array(speech_runs, dtype=np.float64) * lld.hop_length
    rhythm = float(np.std(speech_seg_durations)) if speech_seg_durations.size > 0 and valid else 0.0

    values = np.array(
        [
            speaking_rate,
            articulation_rate,
            pause_ratio,
            float(len(pause_runs)),
            pitch_mean,
            pitch_range,
            pitch_std,
            duration,
            rhythm,
            1.0 if valid else 0.0,
        ]
    )
    values[~np.isfinite(values)] = 0.0
    return FeatureVector(values=values, names=LINGUISTIC_NAMES, set_id="linguistic")


def combine_features(a: FeatureVector, b: FeatureVector) -> FeatureVector:
    """Concatenate two feature vectors (a then b) into the combined set."""
    duplicates = set(a.names) & set(b.names)
    if duplicates:
        raise FeatureError(f"duplicate feature names: {sorted(duplicates)}")
    return FeatureVector(
        values=np.concatenate([a.values, b.values]),
        names=a.names + b.names,
        set_id="combined",
    )


def extract_feature_set(audio: RawAudio, transcript, set_id: str) -> FeatureVector:
    """Dispatch to acoustic / linguistic / combined extraction."""
    if set_id == "acoustic":
        return extract_acoustic(audio)
    if set_id == "linguistic":
        return extract_linguistic(audio, transcript)
    if set_id == "combined":
        return combine_features(extract_acoustic(audio), extract_linguistic(audio, transcript))
    raise FeatureError(f"unknown feature set {set_id!r}")


def write_feature_table(path, rows: list[tuple[str, FeatureVector]]) -> None:
    """Dump features, one line per utterance; the header carries names."""
    if not rows:
        raise FeatureError("no feature rows to write")
    names = rows[0][1].names
    set_id = rows[0][1].set_id
    with open(path, "w") as fh:
        fh.write("utterance_id\tset_id\t" + "\t".join(names) + "\n")
        for utt_id, vec in rows:
            if vec.names != names:
                raise FeatureError(f"inconsistent feature names for {utt_id!r}")
            vals = "\t".join(f"{v:.12g}" for v in vec.values)
            fh.write(f"{utt_id}\t{set_id}\t{vals}\n")


def read_feature_table(path) -> list[tuple[str, FeatureVector]]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:2] != ["utterance_id", "set_id"]:
            raise FeatureError(f"{path}: bad feature table header")
        names = tuple(header[2:])
        rows = []
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            values = np.array([float(x) for x in parts[2:]])
            rows.append((parts[0], FeatureVector(values=values, names=names, set_id=parts[1])))
    return rows
