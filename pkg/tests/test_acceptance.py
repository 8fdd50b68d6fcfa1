"""Acceptance gate: one test per shipped guarantee, at the stated tolerance.

These are end-to-end checks, deliberately heavier than the unit tests. The
shared fixtures train real models, so the module takes a couple of minutes.
Criterion 4 is split: 4a covers the trained-model bounds, 4b the untrained
bound. 4b is expected to fail and is kept failing on purpose: at bandwidth
0.2 even perfectly uniform attention rows score well above 0.3 on these
sequence lengths, so the bound is structurally out of reach; the assertion
message carries the measured numbers.
"""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from avo.data import read_features, write_features, write_units, UnitSequence
from avo.evaluation import diagonality_score, dtw, evaluate, frame_disturbance
from avo.model import ModelConfig, build_model
from avo.synth import SynthSpec, make_corpus
from avo.tokenizer import centroid_lookup, encode_units, fit_kmeans
from avo.training import (
    TrainConfig,
    collate,
    cross_entropy_loss,
    diag_loss,
    diag_weight_matrix,
    grad_check,
    train,
)

TINY = ModelConfig(vocab_size=10, codebook_size=7, feature_dim=5, hidden_dim=8,
                   attention_heads=1)

ALIGN_MODEL = ModelConfig(vocab_size=40, codebook_size=100, feature_dim=32,
                          hidden_dim=64)


def _attention_stats(model, utterances):
    """Mean diagonality and pooled argmax monotonicity over utterances."""
    scores, monotone_flags = [], []
    with torch.no_grad():
        for utt in utterances:
            batch = collate([utt])
            trace = model(batch.phoneme_ids, batch.features, batch.units_per_frame)
            attention = trace.attention[0]
            scores.append(diagonality_score(attention))
            peaks = attention.argmax(dim=1).numpy()
            monotone_flags.extend(np.diff(peaks) >= 0)
    return float(np.mean(scores)), float(np.mean(monotone_flags))


@pytest.fixture(scope="module")
def heldout_corpus():
    spec = SynthSpec(num_utterances=256, vocab_size=40, codebook_size=100,
                     feature_dim=32, feature_noise_std=0.1,
                     unit_corruption_prob=0.05, seed=11)
    corpus = make_corpus(spec)
    cut = len(corpus.utterances) - max(1, int(len(corpus.utterances) * 0.1))
    return corpus.utterances[:cut], corpus.utterances[cut:]


@pytest.fixture(scope="module")
def ablation_runs(heldout_corpus, tmp_path_factory):
    """Paired 400-step runs differing only in the diagonal-penalty weight."""
    train_utts, _ = heldout_corpus
    out = tmp_path_factory.mktemp("ablation")
    models = {}
    for weight in (1.0, 0.0):
        config = TrainConfig(max_steps=400, batch_size=8, seed=0,
                             diag_weight=weight)
        models[weight], _ = train(train_utts, ALIGN_MODEL, config,
                                  out / f"weight_{weight:g}")
    return models


def test_criterion_01_external_metrics_reserved_not_fabricated():
    """Sync-confidence, sync-distance, and word error rate need external
    pretrained scoring stacks; the report must reserve their fields as null
    rather than invent numbers."""
    corpus = make_corpus(SynthSpec(num_utterances=2, vocab_size=10,
                                   codebook_size=7, feature_dim=5, seed=0))
    model = build_model(TINY, seed=0)
    report = evaluate(model, corpus.utterances)
    assert report["external"] == {"lse_c": None, "lse_d": None, "wer": None}
    computed = set(report["aggregate"])
    assert computed == {"unit_accuracy", "frame_disturbance", "diagonality_score"}


def test_criterion_02_gradient_check():
    start = time.monotonic()
    report = grad_check(TINY, tolerance=1e-4, epsilon=1e-5, seed=0,
                        num_phonemes=3, num_video_frames=4, units_per_frame=2)
    elapsed = time.monotonic() - start
    assert report["max_rel_err"] < 1e-4, report["failed_tensors"]
    assert report["passed"]
    assert len(report["tensors"]) == sum(1 for _ in build_model(TINY).parameters())
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f} s"


def test_criterion_03_synthetic_overfit(tmp_path):
    spec = SynthSpec(num_utterances=16, vocab_size=10, codebook_size=20,
                     feature_dim=16, feature_noise_std=0.0,
                     unit_corruption_prob=0.0, seed=0)
    corpus = make_corpus(spec)
    model_config = ModelConfig(vocab_size=10, codebook_size=20, feature_dim=16,
                               hidden_dim=64)
    config = TrainConfig(max_steps=600, batch_size=8, seed=0)
    assert config.max_steps <= 3000
    start = time.monotonic()
    _, summary = train(corpus.utterances, model_config, config, tmp_path / "run",
                       eval_utterances=corpus.utterances)
    elapsed = time.monotonic() - start
    assert summary["acc"] >= 0.99, f"train accuracy {summary['acc']:.4f}"
    assert elapsed < 600.0, f"overfit run took {elapsed:.1f} s"


def test_criterion_04a_alignment_emerges_after_training(heldout_corpus, ablation_runs):
    _, heldout = heldout_corpus
    score, monotone = _attention_stats(ablation_runs[1.0], heldout)
    assert score >= 0.7, f"held-out diagonality {score:.4f}"
    assert monotone >= 0.9, f"monotone argmax fraction {monotone:.4f}"


def test_criterion_04b_untrained_model_below_point_three(heldout_corpus):
    _, heldout = heldout_corpus
    score, _ = _attention_stats(build_model(ALIGN_MODEL, seed=0), heldout)
    uniform_scores = []
    for utt in heldout:
        t_v, t_p = len(utt.video), len(utt.phonemes.ids)
        weights = diag_weight_matrix(t_v, t_p, 0.2)
        uniform_scores.append(1.0 - float(weights.mean()))
    uniform = float(np.mean(uniform_scores))
    assert score < 0.3, (
        f"untrained diagonality is {score:.4f}, not below 0.3: at bandwidth "
        f"0.2 even uniform attention rows score {uniform:.4f} on these "
        f"sequence lengths, so the bound is structurally unreachable"
    )


def test_criterion_05_diagonal_penalty_ablation(heldout_corpus, ablation_runs):
    _, heldout = heldout_corpus
    with_penalty, _ = _attention_stats(ablation_runs[1.0], heldout)
    without_penalty, _ = _attention_stats(ablation_runs[0.0], heldout)
    assert with_penalty > without_penalty, (
        f"penalized {with_penalty:.4f} vs unpenalized {without_penalty:.4f}")


def test_criterion_06_loss_anchors():
    for k in (4, 100):
        loss = cross_entropy_loss(torch.zeros((1, 3, k), dtype=torch.float64),
                                  torch.zeros((1, 3), dtype=torch.long))
        assert abs(float(loss) - math.log(k)) < 1e-6

    anti_diagonal = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    expected = 1.0 - math.exp(-3.125)
    assert abs(float(diag_loss(anti_diagonal)) - expected) < 1e-9

    rng = np.random.Generator(np.random.PCG64(0))
    for _ in range(100):
        shape = (int(rng.integers(2, 16)), int(rng.integers(2, 16)))
        rows = rng.random(shape)
        rows /= rows.sum(axis=1, keepdims=True)
        score = diagonality_score(rows)
        penalty = float(diag_loss(torch.from_numpy(rows)))
        assert abs(score + penalty - 1.0) <= 1e-9


def _enumerate_path_costs(local):
    """Cost of every monotone path, accumulated origin-first like the DP."""
    len_a, len_b = local.shape
    end = (len_a - 1, len_b - 1)
    best = math.inf
    stack = [((0, 0), local[0, 0])]
    while stack:
        (i, j), cost = stack.pop()
        if (i, j) == end:
            best = min(best, cost)
            continue
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            ni, nj = i + di, j + dj
            if ni < len_a and nj < len_b:
                stack.append(((ni, nj), local[ni, nj] + cost))
    return best


def test_criterion_07_dtw_matches_exhaustive_enumeration():
    rng = np.random.Generator(np.random.PCG64(7))
    for _ in range(200):
        len_a = int(rng.integers(1, 7))
        len_b = int(rng.integers(1, 30 // len_a + 1))
        a = rng.standard_normal((len_a, 2))
        b = rng.standard_normal((len_b, 2))
        cost, _ = dtw(a, b)
        local = np.array([[((a[i] - b[j]) ** 2).sum() for j in range(len_b)]
                          for i in range(len_a)])
        assert cost == _enumerate_path_costs(local)

    for _ in range(50):
        x = rng.standard_normal((int(rng.integers(1, 40)), 3))
        assert frame_disturbance(x, x) == 0.0


def test_criterion_08_tokenizer_properties():
    rng = np.random.Generator(np.random.PCG64(8))
    for trial in range(100):
        points = rng.standard_normal((60, 4))
        codebook = fit_kmeans(points, 5, seed=trial, max_iters=25)
        distortions = np.asarray(codebook.fit_distortions)
        assert (np.diff(distortions) <= distortions[:-1] * 1e-12 + 1e-15).all()

    centroids = rng.standard_normal((12, 6)).astype(np.float32)
    from avo.tokenizer import Codebook
    codebook = Codebook(centroids=centroids, seed=0)
    for _ in range(100):
        ids = tuple(int(i) for i in rng.integers(0, 12, size=int(rng.integers(1, 30))))
        units = UnitSequence(units=ids, codebook_size=12)
        assert encode_units(codebook, centroid_lookup(codebook, units)).units == ids

    means = np.array([[-3.0, 0.0], [3.0, 0.0]])
    blobs = np.concatenate([
        means[0] + 0.05 * rng.standard_normal((200, 2)),
        means[1] + 0.05 * rng.standard_normal((200, 2)),
    ])
    recovered = np.asarray(fit_kmeans(blobs, 2, seed=0).centroids, dtype=np.float64)
    recovered = recovered[np.argsort(recovered[:, 0])]
    assert np.abs(recovered - means).max() < 0.1


def test_criterion_09_shape_and_format_contracts(tmp_path):
    rng = np.random.Generator(np.random.PCG64(9))
    model = build_model(ModelConfig(vocab_size=12, codebook_size=9, feature_dim=6,
                                    hidden_dim=16), seed=0)
    for _ in range(25):
        t_p = int(rng.integers(1, 33))
        t_v = int(rng.integers(1, 65))
        n = int(rng.choice([1, 2, 4]))
        ids = torch.from_numpy(rng.integers(0, 12, size=(1, t_p)))
        feats = torch.from_numpy(rng.standard_normal((1, t_v, 6)).astype(np.float32))
        with torch.no_grad():
            trace = model(ids, feats, n)
        assert trace.upsampled.shape[1] == n * t_v
        assert trace.logits.shape[1] == n * t_v
        row_sums = trace.attention.sum(-1)
        assert (row_sums - 1.0).abs().max() <= 1e-6

    for trial in range(25):
        rows, cols = int(rng.integers(1, 40)), int(rng.integers(1, 20))
        matrix = rng.standard_normal((rows, cols)).astype(np.float32)
        matrix[0, 0] = -0.0
        if rows > 1:
            matrix[1, 0] = np.float32(1e-42)  # denormal survives bitwise
        path = tmp_path / f"m{trial}.dsuf"
        write_features(matrix, path)
        assert read_features(path).tobytes() == matrix.tobytes()

        k = int(rng.integers(2, 200))
        ids = tuple(int(i) for i in rng.integers(0, k, size=int(rng.integers(1, 50))))
        units = UnitSequence(units=ids, codebook_size=k)
        unit_path = tmp_path / f"u{trial}.units"
        write_units(units, unit_path)
        from avo.data import read_units
        assert read_units(unit_path) == units


def test_criterion_10_cli_smoke(tmp_path):
    corpus_dir = tmp_path / "corpus"
    codebook_path = tmp_path / "codebook.dsuf"
    run_dir = tmp_path / "run"
    report_path = tmp_path / "report.json"

    def run(*argv):
        result = subprocess.run([sys.executable, "-m", "avo", *argv],
                                capture_output=True, text=True, timeout=120)
        assert result.returncode == 0, result.stderr
        return result

    start = time.monotonic()
    run("datagen", "--out", str(corpus_dir), "--num-utterances", "12",
        "--vocab-size", "10", "--codebook-size", "16", "--feature-dim", "8",
        "--seed", "0")
    run("tokenize", "--fit", "--corpus", str(corpus_dir), "--clusters", "16",
        "--seed", "0", "--out", str(codebook_path))
    run("train", "--corpus", str(corpus_dir), "--out", str(run_dir),
        "--max-steps", "50", "--hidden-dim", "16", "--seed", "0")

    from avo.data import load_corpus
    utt = load_corpus(corpus_dir).utterances[0]
    phonemes_path = tmp_path / "utt.phonemes"
    phonemes_path.write_text("\n".join(str(i) for i in utt.phonemes.ids) + "\n")
    video_path = tmp_path / "utt.dsuf"
    write_features(utt.video.frames, video_path)
    units_path = tmp_path / "pred.units"
    run("infer", "--ckpt", str(run_dir / "final"),
        "--phonemes", str(phonemes_path), "--video", str(video_path),
        "--n", "2", "--out", str(units_path))

    run("eval", "--ckpt", str(run_dir / "final"), "--corpus", str(corpus_dir),
        "--split", "test", "--codebook", str(codebook_path),
        "--out", str(report_path))
    elapsed = time.monotonic() - start

    report = json.loads(report_path.read_text())
    assert report["num_utterances"] >= 1
    for row in report["per_utterance"]:
        assert 0.0 <= row["unit_accuracy"] <= 1.0
        assert np.isfinite(row["frame_disturbance"])
    assert elapsed < 120.0, f"smoke pipeline took {elapsed:.1f} s"
