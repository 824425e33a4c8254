"""Corpus ingestion, validation, and speaker-independent stratified splits.

A corpus on disk is a roster file (one speaker per line) plus a manifest
file (one utterance per line) with audio referenced by relative path.
Splitting partitions *speakers* into train/valid/test so that no speaker
crosses partitions; utterances inherit their speaker's partition.
Partition counts are stratified per (severity, gender) cell, either from
an explicit plan file or by largest-remainder allocation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.io import wavfile

GENDERS = ("M", "F")
PARTITIONS = ("train", "valid", "test")
DEFAULT_RATIOS = (0.6, 0.2, 0.2)

ROSTER_FIELDS = ("speaker_id", "gender", "severity")
MANIFEST_FIELDS = (
    "utterance_id",
    "speaker_id",
    "audio_path",
    "transcript",
    "text_id",
    "repetition",
)


class CorpusError(Exception):
    """Malformed or inconsistent corpus input."""


class ManifestParseError(CorpusError):
    """A manifest/roster line could not be parsed; carries the line number."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class SpeakerRecord:
    """One speaker: id, gender in {M, F}, severity level in 0..4."""

    speaker_id: str
    gender: str
    severity: int

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise CorpusError(f"speaker {self.speaker_id}: gender must be M or F, got {self.gender!r}")
        if self.severity not in (0, 1, 2, 3, 4):
            raise CorpusError(f"speaker {self.speaker_id}: severity must be in 0..4, got {self.severity!r}")


@dataclass(frozen=True)
class RawAudio:
    """Audio samples in [-1, 1] with a positive integer sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size < 1:
            raise CorpusError("audio must be a non-empty 1-D sample sequence")
        if self.sample_rate <= 0:
            raise CorpusError(f"sample rate must be positive, got {self.sample_rate}")
        if np.max(np.abs(samples)) > 1.0 + 1e-12:
            raise CorpusError("audio samples must lie in [-1, 1]")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Utterance:
    """One recorded utterance; audio is loaded lazily from audio_path."""

    utterance_id: str
    speaker_id: str
    audio_path: Path
    transcript: tuple[int, ...]
    text_id: int
    repetition: int
    _audio: RawAudio | None = field(default=None, repr=False)

    @property
    def audio(self) -> RawAudio:
        if self._audio is None:
            self._audio = load_wav(self.audio_path)
        return self._audio


@dataclass(frozen=True)
class SplitPlan:
    """Per (severity, gender) cell: (n_train, n_valid, n_test)."""

    cells: dict[tuple[int, str], tuple[int, int, int]]

    def counts(self, severity: int, gender: str) -> tuple[int, int, int]:
        return self.cells.get((severity, gender), (0, 0, 0))


@dataclass(frozen=True)
class SplitAssignment:
    """Mapping speaker_id -> partition, covering a roster exactly once."""

    partitions: dict[str, str]

    def speakers(self, partition: str) -> list[str]:
        return sorted(s for s, p in self.partitions.items() if p == partition)


@dataclass
class SplitReport:
    """Outcome of validating a split against a roster and utterance list."""

    violations: list[str]
    cell_counts: dict[tuple[int, str], dict[str, int]]
    utterance_counts: dict[str, int]

    @property
    def ok(self) -> bool:
        return not self.violations


def load_wav(path) -> RawAudio:
    """Read a PCM wav file into a RawAudio with samples scaled to [-1, 1]."""
    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if data.ndim > 1:
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = np.clip(data.astype(np.float64), -1.0, 1.0)
    return RawAudio(samples=samples, sample_rate=int(rate))


def save_wav(path, audio: RawAudio) -> None:
    """Write RawAudio as 16-bit PCM (deterministic bytes for fixed input)."""
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, audio.sample_rate, pcm)


def _read_delimited(path, expected_fields) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"file not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None:
            raise ManifestParseError(path, 1, "empty file, expected a header line")
        if tuple(header) != tuple(expected_fields):
            raise ManifestParseError(
                path, 1, f"bad header {header!r}, expected {list(expected_fields)!r}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(expected_fields):
                raise ManifestParseError(
                    path, line_no, f"expected {len(expected_fields)} fields, got {len(row)}"
                )
            rows.append({"_line": str(line_no), **dict(zip(expected_fields, row))})
    return rows


def load_roster(path) -> list[SpeakerRecord]:
    """Parse a roster file (speaker_id, gender, severity per line)."""
    path = Path(path)
    roster = []
    seen = set()
    for row in _read_delimited(path, ROSTER_FIELDS):
        line_no = int(row["_line"])
        try:
            severity = int(row["severity"])
        except ValueError:
            raise ManifestParseError(path, line_no, f"severity is not an integer: {row['severity']!r}")
        if row["speaker_id"] in seen:
            raise ManifestParseError(path, line_no, f"duplicate speaker_id {row['speaker_id']!r}")
        seen.add(row["speaker_id"])
        try:
            roster.append(SpeakerRecord(row["speaker_id"], row["gender"], severity))
        except CorpusError as exc:
            raise ManifestParseError(path, line_no, str(exc))
    return roster


def load_manifest(path, roster_path=None, eager: bool = False):
    """Load a manifest (and its roster) into (roster, utterances).

    Audio paths are resolved relative to the manifest's directory.  With
    eager=True every audio file is read immediately; otherwise audio is
    loaded on first access.  Every utterance must reference a roster
    speaker, otherwise a CorpusError is raised.
    """
    path = Path(path)
    if roster_path is None:
        roster_path = path.parent / "roster.tsv"
    roster = load_roster(roster_path)
    speaker_ids = {s.speaker_id for s in roster}

    utterances = []
    base = path.parent
    for row in _read_delimited(path, MANIFEST_FIELDS):
        line_no = int(row["_line"])
        try:
            transcript = tuple(int(tok) for tok in row["transcript"].split())
            text_id = int(row["text_id"])
            repetition = int(row["repetition"])
        except ValueError as exc:
            raise ManifestParseError(path, line_no, f"malformed numeric field: {exc}")
        if row["speaker_id"] not in speaker_ids:
            raise CorpusError(
                f"{path}:{line_no}: utterance {row['utterance_id']!r} references "
                f"unknown speaker {row['speaker_id']!r}"
            )
        utt = Utterance(
            utterance_id=row["utterance_id"],
            speaker_id=row["speaker_id"],
            audio_path=base / row["audio_path"],
            transcript=transcript,
            text_id=text_id,
            repetition=repetition,
        )
        if eager:
            utt._audio = load_wav(utt.audio_path)
        utterances.append(utt)
    return roster, utterances


def load_split_plan(path) -> SplitPlan:
    """Parse a split-plan file (severity, gender, n_train, n_valid, n_test)."""
    path = Path(path)
    fields = ("severity", "gender", "n_train", "n_valid", "n_test")
    cells = {}
    for row in _read_delimited(path, fields):
        line_no = int(row["_line"])
        try:
            key = (int(row["severity"]), row["gender"])
            counts = (int(row["n_train"]), int(row["n_valid"]), int(row["n_test"]))
        except ValueError as exc:
            raise ManifestParseError(path, line_no, f"malformed numeric field: {exc}")
        if key[1] not in GENDERS:
            raise ManifestParseError(path, line_no, f"gender must be M or F, got {key[1]!r}")
        if any(c < 0 for c in counts):
            raise ManifestParseError(path, line_no, "plan counts must be >= 0")
        if key in cells:
            raise ManifestParseError(path, line_no, f"duplicate plan cell {key}")
        cells[key] = counts
    return SplitPlan(cells=cells)


def reference_split_plan() -> SplitPlan:
    """The shipped 80-speaker reference plan (10 healthy + 70 dysarthric)."""
    with resources.as_file(resources.files("sevkit.data") / "reference_split_plan.tsv") as p:
        return load_split_plan(p)


def reference_roster() -> list[SpeakerRecord]:
    """A roster whose (severity, gender) cell sizes match the reference plan."""
    plan = reference_split_plan()
    roster = []
    idx = 1
    for (severity, gender) in sorted(plan.cells):
        n = sum(plan.cells[(severity, gender)])
        for _ in range(n):
            roster.append(SpeakerRecord(f"SPK{idx:03d}", gender, severity))
            idx += 1
    return roster


def allocate_largest_remainder(n: int, ratios=DEFAULT_RATIOS) -> tuple[int, int, int]:
    """Split n items into (train, valid, test) counts by largest remainder.

    Remainder units go to partitions with the largest fractional quota;
    ties are broken in the order test, valid, train so the largest
    partition is topped up last.
    """
    quotas = [n * r for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    leftover = n - sum(counts)
    # tie-break priority: test first, then valid, then train
    order = sorted(range(3), key=lambda i: (-remainders[i], -i))
    for i in range(leftover):
        counts[order[i % 3]] += 1
    return tuple(counts)


def _cell_rng(seed: int, severity: int, gender: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, severity, GENDERS.index(gender)]))


def make_split(
    roster: list[SpeakerRecord],
    ratios=DEFAULT_RATIOS,
    seed: int = 0,
    plan: SplitPlan | None = None,
) -> SplitAssignment:
    """Partition speakers per (severity, gender) cell into train/valid/test.

    With a plan, cell counts must match the roster exactly; without one,
    counts follow largest-remainder allocation of the ratios.  Speaker
    choice within a cell is seed-controlled and deterministic.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"ratios must sum to 1, got {ratios}")
    cells: dict[tuple[int, str], list[str]] = {}
    for rec in roster:
        cells.setdefault((rec.severity, rec.gender), []).append(rec.speaker_id)

    if plan is not None:
        plan_keys = {k for k, v in plan.cells.items() if sum(v) > 0}
        missing = plan_keys - set(cells)
        if missing:
            sev, gen = sorted(missing)[0]
            raise CorpusError(f"plan expects speakers in cell (severity={sev}, gender={gen}) but roster has none")

    partitions: dict[str, str] = {}
    for (severity, gender), speakers in sorted(cells.items()):
        n = len(speakers)
        if plan is not None:
            counts = plan.counts(severity, gender)
            if sum(counts) != n:
                raise CorpusError(
                    f"plan mismatch in cell (severity={severity}, gender={gender}): "
                    f"plan totals {sum(counts)}, roster has {n}"
                )
        else:
            counts = allocate_largest_remainder(n, ratios)
        ordered = sorted(speakers)
        rng = _cell_rng(seed, severity, gender)
        rng.shuffle(ordered)
        bounds = np.cumsum((0,) + counts)
        for part, lo, hi in zip(PARTITIONS, bounds[:-1], bounds[1:]):
            for spk in ordered[lo:hi]:
                partitions[spk] = part
    return SplitAssignment(partitions=partitions)


def validate_split(
    assignment,
    roster: list[SpeakerRecord],
    utterances: list[Utterance],
) -> SplitReport:
    """Check a split for speaker overlap and report per-cell/partition counts.

    Accepts either a SplitAssignment or raw (speaker_id, partition) pairs
    as read back from a split file, so duplicated or dangling rows are
    reportable rather than unrepresentable.  Never raises; all problems
    land in the report's violations list.
    """
    if isinstance(assignment, SplitAssignment):
        pairs = list(assignment.partitions.items())
    else:
        pairs = list(assignment)

    by_speaker: dict[str, set[str]] = {}
    violations = []
    for spk, part in pairs:
        if part not in PARTITIONS:
            violations.append(f"speaker {spk!r}: unknown partition {part!r}")
            continue
        by_speaker.setdefault(spk, set()).add(part)

    roster_ids = {r.speaker_id: r for r in roster}
    for spk, parts in sorted(by_speaker.items()):
        if len(parts) > 1:
            violations.append(f"speaker {spk!r} appears in multiple partitions: {sorted(parts)}")
        if spk not in roster_ids:
            violations.append(f"speaker {spk!r} not in roster")
    for spk in sorted(roster_ids):
        if spk not in by_speaker:
            violations.append(f"roster speaker {spk!r} missing from assignment")

    cell_counts: dict[tuple[int, str], dict[str, int]] = {}
    for spk, parts in by_speaker.items():
        rec = roster_ids.get(spk)
        if rec is None or len(parts) != 1:
            continue
        cell = cell_counts.setdefault((rec.severity, rec.gender), {p: 0 for p in PARTITIONS})
        cell[next(iter(parts))] += 1

    speaker_part = {s: next(iter(p)) for s, p in by_speaker.items() if len(p) == 1}
    utterance_counts = {p: 0 for p in PARTITIONS}
    for utt in utterances:
        part = speaker_part.get(utt.speaker_id)
        if part is None:
            violations.append(f"utterance {utt.utterance_id!r}: speaker {utt.speaker_id!r} has no unique partition")
        else:
            utterance_counts[part] += 1
    return SplitReport(violations=violations, cell_counts=cell_counts, utterance_counts=utterance_counts)


def write_split(path, assignment: SplitAssignment) -> None:
    """Write one (speaker_id, partition) line per speaker."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["speaker_id", "partition"])
        for spk in sorted(assignment.partitions):
            writer.writerow([spk, assignment.partitions[spk]])


def read_split(path) -> SplitAssignment:
    rows = _read_delimited(path, ("speaker_id", "partition"))
    partitions = {}
    for row in rows:
        if row["partition"] not in PARTITIONS:
            raise ManifestParseError(path, int(row["_line"]), f"unknown partition {row['partition']!r}")
        partitions[row["speaker_id"]] = row["partition"]
    return SplitAssignment(partitions=partitions)


def partition_utterances(
    utterances: list[Utterance], assignment: SplitAssignment
) -> dict[str, list[Utterance]]:
    """Group utterances by their speaker's partition."""
    out: dict[str, list[Utterance]] = {p: [] for p in PARTITIONS}
    for utt in utterances:
        part = assignment.partitions.get(utt.speaker_id)
        if part is None:
            raise CorpusError(f"utterance {utt.utterance_id!r}: speaker {utt.speaker_id!r} not in split")
        out[part].append(utt)
    return out
