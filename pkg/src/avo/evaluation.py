"""Objective metrics that need no external pretrained models.

Frame-level unit accuracy, DTW-based frame disturbance (RMS deviation of
the warping path from the diagonal, in frames), and attention diagonality.
Speech-level metrics that require pretrained scoring networks are out of
scope; the evaluation report reserves fields for values computed elsewhere
so complete tables can still be assembled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import UnitSequence, Utterance
from .errors import ValidationError
from .inference import infer_units
from .model import AvoModel, load_checkpoint
from .tokenizer import Codebook, centroid_lookup
from .training import DEFAULT_DIAG_BANDWIDTH, diag_loss


def unit_accuracy(predicted: UnitSequence, reference: UnitSequence) -> float:
    """Fraction of frames whose predicted unit matches the reference."""
    if len(predicted) != len(reference):
        raise ValidationError(
            f"length mismatch: predicted {len(predicted)} vs reference {len(reference)} frames"
        )
    matches = sum(p == r for p, r in zip(predicted.units, reference.units))
    return matches / len(reference)


@dataclass(frozen=True)
class DtwPath:
    """Monotone warping path from (0, 0) to (T_a-1, T_b-1)."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(i), int(j)) for i, j in self.pairs))
        if not self.pairs:
            raise ValidationError("warping path is empty")
        if self.pairs[0] != (0, 0):
            raise ValidationError(f"warping path must start at (0, 0), got {self.pairs[0]}")
        for (i0, j0), (i1, j1) in zip(self.pairs, self.pairs[1:]):
            if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
                raise ValidationError(f"illegal path step from ({i0}, {j0}) to ({i1}, {j1})")


def _as_frames(sequence) -> np.ndarray:
    frames = np.asarray(sequence, dtype=np.float64)
    if frames.ndim == 1:
        frames = frames[:, None]
    if frames.ndim != 2 or len(frames) == 0:
        raise ValidationError(f"expected a nonempty sequence of vectors, got shape {frames.shape}")
    return frames


def _squared_euclidean(a: np.ndarray, b: np.ndarray) -> float:
    return float(((a - b) ** 2).sum())


def dtw(a, b, dist=_squared_euclidean) -> tuple[float, DtwPath]:
    """Dynamic time warping with steps (1,0), (0,1), (1,1).

    Returns the accumulated cost (including the (0,0) cell) and one optimal
    path; backtracking ties prefer the diagonal step, then advancing ``a``.
    """
    xa, xb = _as_frames(a), _as_frames(b)
    len_a, len_b = len(xa), len(xb)
    local = np.empty((len_a, len_b))
    for i in range(len_a):
        for j in range(len_b):
            local[i, j] = dist(xa[i], xb[j])

    acc = np.full((len_a, len_b), np.inf)
    acc[0, 0] = local[0, 0]
    for i in range(len_a):
        for j in range(len_b):
            if i == j == 0:
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            acc[i, j] = local[i, j] + best

    pairs = [(len_a - 1, len_b - 1)]
    i, j = len_a - 1, len_b - 1
    while (i, j) != (0, 0):
        candidates = []
        if i > 0 and j > 0:
            candidates.append((acc[i - 1, j - 1], (i - 1, j - 1)))
        if i > 0:
            candidates.append((acc[i - 1, j], (i - 1, j)))
        if j > 0:
            candidates.append((acc[i, j - 1], (i, j - 1)))
        best = min(c[0] for c in candidates)
        i, j = next(cell for cost, cell in candidates if cost == best)
        pairs.append((i, j))
    pairs.reverse()
    return float(acc[len_a - 1, len_b - 1]), DtwPath(pairs=tuple(pairs))


def frame_disturbance(generated, reference) -> float:
    """RMS deviation of the DTW path from the diagonal, in frames."""
    _, path = dtw(generated, reference)
    offsets = np.array([i - j for i, j in path.pairs], dtype=np.float64)
    return float(np.sqrt((offsets**2).mean()))


def diagonality_score(attention, bandwidth: float = DEFAULT_DIAG_BANDWIDTH) -> float:
    """How concentrated attention is on the time-normalized diagonal, in (0, 1].

    Exactly the complement of the training penalty at the same bandwidth:
    score = 1 - diag_loss(A, g). Rows must be stochastic within 1e-4.
    """
    matrix = attention.detach().cpu().numpy() if isinstance(attention, torch.Tensor) else np.asarray(attention)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ValidationError(f"attention must be a nonempty 2-D matrix, got shape {matrix.shape}")
    if matrix.min() < -1e-7:
        raise ValidationError("attention has negative entries")
    row_sums = matrix.sum(axis=1)
    if np.abs(row_sums - 1).max() > 1e-4:
        raise ValidationError("attention rows do not sum to 1 within 1e-4")
    return 1.0 - float(diag_loss(torch.from_numpy(matrix), bandwidth))


def _unit_feature_rows(units: UnitSequence, codebook: Codebook | None) -> np.ndarray:
    """Feature sequence for FD: centroid rows, or one-hot rows without a codebook."""
    if codebook is not None:
        return centroid_lookup(codebook, units)
    return np.eye(units.codebook_size, dtype=np.float64)[list(units.units)]


def evaluate(model_or_checkpoint, utterances, codebook: Codebook | None = None,
             bandwidth: float = DEFAULT_DIAG_BANDWIDTH) -> dict:
    """Aggregate metrics for a list of utterances with ground-truth units.

    Frame disturbance compares generated and reference units mapped to
    feature rows (codebook centroids when available). The "external" block
    holds placeholders for metrics that need pretrained scoring models and
    are therefore never computed here.
    """
    utterances = tuple(utterances)
    if not utterances:
        raise ValidationError("no utterances to evaluate")
    if isinstance(model_or_checkpoint, AvoModel):
        model = model_or_checkpoint
    else:
        model, _, _ = load_checkpoint(model_or_checkpoint)

    per_utterance = []
    for utt in utterances:
        if utt.units is None:
            raise ValidationError(f"utterance {utt.id!r} has no ground-truth units")
        predicted, trace = infer_units(model, utt.phonemes, utt.video,
                                       utt.units_per_frame,
                                       unit_rate_hz=utt.units.unit_rate_hz)
        per_utterance.append({
            "id": utt.id,
            "unit_accuracy": unit_accuracy(predicted, utt.units),
            "frame_disturbance": frame_disturbance(
                _unit_feature_rows(predicted, codebook),
                _unit_feature_rows(utt.units, codebook)),
            "diagonality_score": diagonality_score(trace.attention[0], bandwidth),
        })

    metric_names = ("unit_accuracy", "frame_disturbance", "diagonality_score")
    return {
        "num_utterances": len(per_utterance),
        "per_utterance": per_utterance,
        "aggregate": {name: float(np.mean([u[name] for u in per_utterance]))
                      for name in metric_names},
        "external": {"lse_c": None, "lse_d": None, "wer": None},
    }
