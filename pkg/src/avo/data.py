"""Core sequence types, corpus containers, and their on-disk formats.

Unit sequences live in plain text (one integer per line under a one-line
header) so they stay human-inspectable; feature matrices use the binary
"DSUF" layout (little-endian, row-major float32) so round trips are
bit-exact and checksums are portable. All types are immutable after
construction and safe to share across threads for reading.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

FEATURE_MAGIC = b"DSUF"
FEATURE_VERSION = 1

_FEATURE_HEADER = struct.Struct("<4sIII")
_UNIT_HEADER_RE = re.compile(r"^#K=(\d+) rate=([0-9eE+.-]+)$")

CORPUS_INDEX_NAME = "corpus.json"


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhonemeSequence:
    """Integer-coded phoneme ids drawn from a vocabulary of size ``vocab_size``."""

    ids: tuple[int, ...]
    vocab_size: int

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if self.vocab_size < 1:
            raise ValidationError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if len(ids) < 1:
            raise ValidationError("empty phoneme sequence")
        for i in ids:
            if not 0 <= i < self.vocab_size:
                raise ValidationError(f"phoneme id {i} outside [0, {self.vocab_size})")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True, eq=False)
class VideoFeatureSequence:
    """Real-valued feature frames at the video rate, one row per frame."""

    frames: np.ndarray
    frame_rate_hz: float = 25.0

    def __post_init__(self):
        frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValidationError(f"frames must be a nonempty 2-D matrix, got shape {frames.shape}")
        if not np.isfinite(frames).all():
            raise ValidationError("video features contain non-finite values")
        if not self.frame_rate_hz > 0:
            raise ValidationError(f"frame_rate_hz must be positive, got {self.frame_rate_hz}")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "frame_rate_hz", float(self.frame_rate_hz))

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class UnitSequence:
    """Discrete speech unit ids in ``[0, codebook_size)``."""

    units: tuple[int, ...]
    codebook_size: int
    unit_rate_hz: float = 50.0

    def __post_init__(self):
        units = tuple(int(u) for u in self.units)
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "unit_rate_hz", float(self.unit_rate_hz))
        if self.codebook_size < 1:
            raise ValidationError(f"codebook_size must be >= 1, got {self.codebook_size}")
        if len(units) < 1:
            raise ValidationError("empty unit sequence")
        if not self.unit_rate_hz > 0:
            raise ValidationError(f"unit_rate_hz must be positive, got {self.unit_rate_hz}")
        for u in units:
            if not 0 <= u < self.codebook_size:
                raise ValidationError(f"unit {u} outside [0, {self.codebook_size})")

    def __len__(self) -> int:
        return len(self.units)


@dataclass(frozen=True, eq=False)
class Utterance:
    """One aligned (phonemes, video, units) triple.

    ``units`` is optional at inference time. ``gt_alignment`` maps each video
    frame to the phoneme index it belongs to and only exists for synthetic
    corpora with known ground truth.
    """

    id: str
    phonemes: PhonemeSequence
    video: VideoFeatureSequence
    units: UnitSequence | None = None
    gt_alignment: tuple[int, ...] | None = None

    def __post_init__(self):
        num_frames = len(self.video)
        if self.units is not None and len(self.units) % num_frames != 0:
            raise ValidationError(
                f"utterance {self.id!r}: unit length {len(self.units)} is not a "
                f"multiple of the video length {num_frames}"
            )
        if self.gt_alignment is not None:
            align = tuple(int(a) for a in self.gt_alignment)
            object.__setattr__(self, "gt_alignment", align)
            if len(align) != num_frames:
                raise ValidationError(
                    f"utterance {self.id!r}: alignment length {len(align)} != video length {num_frames}"
                )
            for prev, cur in zip(align, align[1:]):
                if cur < prev:
                    raise ValidationError(f"utterance {self.id!r}: alignment is not monotone")
            for a in align:
                if not 0 <= a < len(self.phonemes):
                    raise ValidationError(f"utterance {self.id!r}: alignment index {a} out of range")

    @property
    def units_per_frame(self) -> int:
        """Audio-video length ratio recomputed from the stored lengths."""
        if self.units is None:
            raise ValidationError(f"utterance {self.id!r} has no units")
        return len(self.units) // len(self.video)


@dataclass(frozen=True)
class CorpusMetadata:
    vocab_size: int
    codebook_size: int
    feature_dim: int
    frame_rate_hz: float = 25.0
    unit_rate_hz: float = 50.0
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "codebook_size": self.codebook_size,
            "feature_dim": self.feature_dim,
            "frame_rate_hz": self.frame_rate_hz,
            "unit_rate_hz": self.unit_rate_hz,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusMetadata":
        try:
            return cls(
                vocab_size=int(d["vocab_size"]),
                codebook_size=int(d["codebook_size"]),
                feature_dim=int(d["feature_dim"]),
                frame_rate_hz=float(d["frame_rate_hz"]),
                unit_rate_hz=float(d["unit_rate_hz"]),
                seed=int(d["seed"]),
            )
        except KeyError as exc:
            raise FormatError(f"corpus metadata is missing key {exc}") from exc


@dataclass(frozen=True, eq=False)
class Corpus:
    """A list of utterances sharing one metadata block."""

    utterances: tuple[Utterance, ...]
    metadata: CorpusMetadata

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        meta = self.metadata
        for utt in self.utterances:
            if utt.phonemes.vocab_size != meta.vocab_size:
                raise ValidationError(f"utterance {utt.id!r}: vocab_size differs from corpus metadata")
            if utt.video.feature_dim != meta.feature_dim:
                raise ValidationError(f"utterance {utt.id!r}: feature_dim differs from corpus metadata")
            if utt.video.frame_rate_hz != meta.frame_rate_hz:
                raise ValidationError(f"utterance {utt.id!r}: frame_rate_hz differs from corpus metadata")
            if utt.units is not None:
                if utt.units.codebook_size != meta.codebook_size:
                    raise ValidationError(f"utterance {utt.id!r}: codebook_size differs from corpus metadata")
                if utt.units.unit_rate_hz != meta.unit_rate_hz:
                    raise ValidationError(f"utterance {utt.id!r}: unit_rate_hz differs from corpus metadata")

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def units_per_frame(self) -> int:
        """The corpus-constant audio-video length ratio.

        Raises if utterances disagree or none carries units.
        """
        ratios = {u.units_per_frame for u in self.utterances if u.units is not None}
        if not ratios:
            raise ValidationError("corpus has no utterance with units")
        if len(ratios) > 1:
            raise ValidationError(f"units-per-frame ratio differs across utterances: {sorted(ratios)}")
        return ratios.pop()


def split_corpus(corpus: Corpus, split: str, test_fraction: float = 0.1) -> tuple[Utterance, ...]:
    """Deterministic utterance split: the test slice is the trailing fraction.

    ``split`` is one of "all", "train", "test". A nonempty corpus always has
    at least one test utterance.
    """
    if split not in ("all", "train", "test"):
        raise ValidationError(f"unknown split {split!r} (expected all/train/test)")
    utts = corpus.utterances
    if split == "all" or not utts:
        return utts
    num_test = max(1, int(len(utts) * test_fraction))
    return utts[-num_test:] if split == "test" else utts[:-num_test]


# ---------------------------------------------------------------------------
# unit files (text)
# ---------------------------------------------------------------------------


def write_units(seq: UnitSequence, path) -> None:
    """Write a unit sequence: header line ``#K=<K> rate=<hz>``, one id per line."""
    lines = [f"#K={seq.codebook_size} rate={seq.unit_rate_hz!r}"]
    lines.extend(str(u) for u in seq.units)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_units(path) -> UnitSequence:
    """Parse a unit file written by :func:`write_units`."""
    text = Path(path).read_text(encoding="ascii")
    lines = text.splitlines()
    if not lines:
        raise FormatError(f"{path}: empty unit file")
    header = _UNIT_HEADER_RE.match(lines[0])
    if header is None:
        raise FormatError(f"{path}: missing or malformed header line {lines[0]!r}")
    codebook_size = int(header.group(1))
    rate = float(header.group(2))
    units = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            units.append(int(line))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed unit line {line!r}") from None
        if not 0 <= units[-1] < codebook_size:
            raise FormatError(f"{path}:{lineno}: unit {units[-1]} outside [0, {codebook_size})")
    return UnitSequence(units=tuple(units), codebook_size=codebook_size, unit_rate_hz=rate)


# ---------------------------------------------------------------------------
# feature matrices (binary DSUF)
# ---------------------------------------------------------------------------


def write_features(matrix, path) -> None:
    """Write a 2-D real matrix in the DSUF format (float32, little-endian, row-major)."""
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.ndim != 2:
        raise ValidationError(f"feature matrix must be 2-D, got shape {mat.shape}")
    if not np.isfinite(mat).all():
        raise ValidationError("feature matrix contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())


def read_features(path) -> np.ndarray:
    """Read a DSUF matrix, validating magic, version, and payload size."""
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, rows, cols = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    payload = data[_FEATURE_HEADER.size:]
    if len(payload) != rows * cols * 4:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {rows * cols * 4} for {rows}x{cols}"
        )
    mat = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return mat.astype(np.float32)  # native-order writable copy


# ---------------------------------------------------------------------------
# phoneme / alignment files (text, space-separated integers)
# ---------------------------------------------------------------------------


def write_phonemes(seq: PhonemeSequence, path) -> None:
    Path(path).write_text(" ".join(str(i) for i in seq.ids) + "\n", encoding="ascii")


def read_phonemes(path, vocab_size: int) -> PhonemeSequence:
    tokens = Path(path).read_text(encoding="ascii").split()
    try:
        ids = tuple(int(t) for t in tokens)
        return PhonemeSequence(ids=ids, vocab_size=vocab_size)
    except (ValueError, ValidationError) as exc:
        raise FormatError(f"{path}: malformed phoneme file: {exc}") from None


def write_alignment(alignment, path) -> None:
    Path(path).write_text(" ".join(str(int(a)) for a in alignment) + "\n", encoding="ascii")


def read_alignment(path) -> tuple[int, ...]:
    tokens = Path(path).read_text(encoding="ascii").split()
    try:
        return tuple(int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed alignment file: {exc}") from None


# ---------------------------------------------------------------------------
# corpus directory
# ---------------------------------------------------------------------------


def save_corpus(corpus: Corpus, directory) -> Path:
    """Write a corpus directory: ``corpus.json`` plus per-utterance files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {
        "metadata": corpus.metadata.to_dict(),
        "utterances": [u.id for u in corpus.utterances],
    }
    (directory / CORPUS_INDEX_NAME).write_text(
        json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="ascii"
    )
    for utt in corpus.utterances:
        write_phonemes(utt.phonemes, directory / f"{utt.id}.phon")
        write_features(utt.video.frames, directory / f"{utt.id}.feat")
        if utt.units is not None:
            write_units(utt.units, directory / f"{utt.id}.units")
        if utt.gt_alignment is not None:
            write_alignment(utt.gt_alignment, directory / f"{utt.id}.align")
    return directory


def load_corpus(directory) -> Corpus:
    """Load a corpus directory written by :func:`save_corpus`."""
    directory = Path(directory)
    index_path = directory / CORPUS_INDEX_NAME
    if not index_path.is_file():
        raise FormatError(f"{directory}: missing {CORPUS_INDEX_NAME}")
    try:
        index = json.loads(index_path.read_text(encoding="ascii"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{index_path}: invalid JSON: {exc}") from None
    if not isinstance(index, dict):
        raise FormatError(f"{index_path}: expected a JSON object")
    meta = CorpusMetadata.from_dict(index.get("metadata", {}))
    utterances = []
    for utt_id in index.get("utterances", []):
        phonemes = read_phonemes(directory / f"{utt_id}.phon", meta.vocab_size)
        frames = read_features(directory / f"{utt_id}.feat")
        video = VideoFeatureSequence(frames=frames, frame_rate_hz=meta.frame_rate_hz)
        units_path = directory / f"{utt_id}.units"
        units = read_units(units_path) if units_path.is_file() else None
        align_path = directory / f"{utt_id}.align"
        alignment = read_alignment(align_path) if align_path.is_file() else None
        utterances.append(
            Utterance(id=utt_id, phonemes=phonemes, video=video, units=units, gt_alignment=alignment)
        )
    return Corpus(utterances=tuple(utterances), metadata=meta)
