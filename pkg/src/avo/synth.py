"""Synthetic corpora with known phoneme/video/unit correspondences.

Each phoneme owns a prototype feature vector and a cyclic base pattern of
units, both drawn once per corpus. An utterance samples a phoneme string
and per-phoneme durations; video frames carry the owning phoneme's
prototype plus Gaussian noise, and units cycle the owning phoneme's base
pattern at a fixed number of units per video frame. With zero noise and
zero corruption the units are an exact function of (phoneme, position), so
perfect prediction is attainable and the true alignment is known.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (
    Corpus,
    CorpusMetadata,
    PhonemeSequence,
    UnitSequence,
    Utterance,
    VideoFeatureSequence,
)
from .errors import ValidationError

_BASE_PATTERN_LEN = 4


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic corpus."""

    num_utterances: int
    vocab_size: int = 40
    codebook_size: int = 100
    feature_dim: int = 32
    units_per_frame: int = 2
    min_phonemes: int = 4
    max_phonemes: int = 10
    min_duration: int = 2
    max_duration: int = 6
    feature_noise_std: float = 0.1
    unit_corruption_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_utterances < 0:
            raise ValidationError(f"num_utterances must be >= 0, got {self.num_utterances}")
        if self.vocab_size < 1 or self.codebook_size < 1 or self.feature_dim < 1:
            raise ValidationError("vocab_size, codebook_size and feature_dim must be >= 1")
        if self.units_per_frame < 1:
            raise ValidationError(f"units_per_frame must be >= 1, got {self.units_per_frame}")
        if not 1 <= self.min_phonemes <= self.max_phonemes:
            raise ValidationError(f"bad phoneme count range [{self.min_phonemes}, {self.max_phonemes}]")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ValidationError(f"bad duration range [{self.min_duration}, {self.max_duration}]")
        if self.feature_noise_std < 0:
            raise ValidationError(f"feature_noise_std must be >= 0, got {self.feature_noise_std}")
        if not 0 <= self.unit_corruption_prob < 1:
            raise ValidationError(f"unit_corruption_prob must be in [0, 1), got {self.unit_corruption_prob}")

    def to_dict(self) -> dict:
        return {
            "num_utterances": self.num_utterances,
            "vocab_size": self.vocab_size,
            "codebook_size": self.codebook_size,
            "feature_dim": self.feature_dim,
            "units_per_frame": self.units_per_frame,
            "min_phonemes": self.min_phonemes,
            "max_phonemes": self.max_phonemes,
            "min_duration": self.min_duration,
            "max_duration": self.max_duration,
            "feature_noise_std": self.feature_noise_std,
            "unit_corruption_prob": self.unit_corruption_prob,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ValidationError(f"unknown synth spec fields: {sorted(unknown)}")
        if "num_utterances" not in payload:
            raise ValidationError("synth spec requires num_utterances")
        return cls(**payload)


@dataclass(frozen=True, eq=False)
class _CorpusTables:
    """Per-phoneme prototypes and unit base patterns, shared by all utterances."""

    prototypes: np.ndarray  # (vocab_size, feature_dim) float32
    base_patterns: np.ndarray  # (vocab_size, _BASE_PATTERN_LEN) int64


def _make_tables(spec: SynthSpec, rng: np.random.Generator) -> _CorpusTables:
    prototypes = rng.standard_normal((spec.vocab_size, spec.feature_dim)).astype(np.float32)
    base_patterns = rng.integers(0, spec.codebook_size,
                                 size=(spec.vocab_size, _BASE_PATTERN_LEN), dtype=np.int64)
    return _CorpusTables(prototypes=prototypes, base_patterns=base_patterns)


def make_utterance(spec: SynthSpec, tables: _CorpusTables,
                   rng: np.random.Generator, utt_id: str) -> Utterance:
    """Sample one utterance: phoneme string, noisy prototype frames, cyclic units."""
    num_phonemes = int(rng.integers(spec.min_phonemes, spec.max_phonemes + 1))
    phoneme_ids = rng.integers(0, spec.vocab_size, size=num_phonemes, dtype=np.int64)
    durations = rng.integers(spec.min_duration, spec.max_duration + 1,
                             size=num_phonemes, dtype=np.int64)

    alignment = np.repeat(np.arange(num_phonemes), durations)
    num_frames = int(durations.sum())

    frames = tables.prototypes[phoneme_ids[alignment]].astype(np.float64)
    if spec.feature_noise_std > 0:
        frames = frames + spec.feature_noise_std * rng.standard_normal(frames.shape)

    n = spec.units_per_frame
    units = np.empty(num_frames * n, dtype=np.int64)
    offset_in_phoneme = np.concatenate([np.arange(d) for d in durations])
    for t in range(num_frames):
        pattern = tables.base_patterns[phoneme_ids[alignment[t]]]
        for j in range(n):
            units[t * n + j] = pattern[(offset_in_phoneme[t] * n + j) % _BASE_PATTERN_LEN]
    if spec.unit_corruption_prob > 0:
        corrupt = rng.random(len(units)) < spec.unit_corruption_prob
        units[corrupt] = rng.integers(0, spec.codebook_size, size=int(corrupt.sum()))

    return Utterance(
        id=utt_id,
        phonemes=PhonemeSequence(ids=tuple(int(p) for p in phoneme_ids),
                                 vocab_size=spec.vocab_size),
        video=VideoFeatureSequence(frames=frames.astype(np.float32)),
        units=UnitSequence(units=tuple(int(u) for u in units),
                           codebook_size=spec.codebook_size),
        gt_alignment=tuple(int(a) for a in alignment),
    )


def make_corpus(spec: SynthSpec) -> Corpus:
    """Generate the full corpus.

    Seeding is hierarchical: one child seed builds the shared tables, then
    one per utterance, so corpora are reproducible and utterances could be
    generated in parallel without changing the result.
    """
    children = np.random.SeedSequence(spec.seed).spawn(spec.num_utterances + 1)
    tables = _make_tables(spec, np.random.Generator(np.random.PCG64(children[0])))
    width = max(4, len(str(max(spec.num_utterances - 1, 0))))
    utterances = tuple(
        make_utterance(spec, tables,
                       np.random.Generator(np.random.PCG64(children[i + 1])),
                       utt_id=f"utt{i:0{width}d}")
        for i in range(spec.num_utterances)
    )
    metadata = CorpusMetadata(
        vocab_size=spec.vocab_size,
        codebook_size=spec.codebook_size,
        feature_dim=spec.feature_dim,
        seed=spec.seed,
    )
    return Corpus(utterances=utterances, metadata=metadata)
