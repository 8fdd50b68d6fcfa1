"""Losses, optimizer loop, checkpointing, and the gradient-check harness.

The training criterion is a per-frame unit classification loss plus a
weighted penalty on attention mass far from the time-normalized diagonal.
Runs are bitwise reproducible: utterance order and dropout masks are
derived statelessly from (seed, step), and the optimizer keeps explicit
float32 state that round-trips through checkpoints exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import UnitSequence, Utterance
from .errors import NumericError, ValidationError
from .model import AvoModel, ForwardTrace, ModelConfig, build_model, load_checkpoint, save_checkpoint

DEFAULT_DIAG_BANDWIDTH = 0.2
METRICS_LOG_NAME = "metrics.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters."""

    max_steps: int
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    diag_bandwidth: float = DEFAULT_DIAG_BANDWIDTH
    diag_weight: float = 1.0
    grad_clip_norm: float = 1.0
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValidationError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise ValidationError(f"seed must be >= 0, got {self.seed}")
        if self.diag_bandwidth <= 0:
            raise ValidationError(f"diag_bandwidth must be > 0, got {self.diag_bandwidth}")
        if self.diag_weight < 0:
            raise ValidationError(f"diag_weight must be >= 0, got {self.diag_weight}")
        if self.grad_clip_norm <= 0:
            raise ValidationError(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")
        if self.checkpoint_every < 0:
            raise ValidationError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown train config fields: {sorted(unknown)}")
        if "max_steps" not in payload:
            raise ValidationError("train config requires max_steps")
        return cls(**payload)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy_loss(logits: torch.Tensor, targets, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood of the target units over unpadded frames.

    ``logits`` is (..., frames, K); ``targets`` is a matching integer tensor
    or a UnitSequence. Stabilized via log-sum-exp; padded frames (pad_mask
    True) are excluded from both the sum and the denominator.
    """
    if isinstance(targets, UnitSequence):
        targets = torch.tensor(targets.units, dtype=torch.long, device=logits.device)
    if targets.shape != logits.shape[:-1]:
        raise ValidationError(f"targets shape {tuple(targets.shape)} does not match logits {tuple(logits.shape)}")
    if pad_mask is None:
        pad_mask = torch.zeros_like(targets, dtype=torch.bool)
    valid = ~pad_mask
    count = int(valid.sum())
    if count == 0:
        raise ValidationError("cross_entropy_loss: every frame is masked out")
    checked = targets[valid]
    if checked.numel() and (checked.min() < 0 or checked.max() >= logits.shape[-1]):
        raise ValidationError(f"target unit outside [0, {logits.shape[-1]})")
    log_probs = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    picked = log_probs.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    return -(picked * valid).sum() / count


def diag_weight_matrix(num_video_frames: int, num_text_positions: int,
                       bandwidth: float = DEFAULT_DIAG_BANDWIDTH) -> np.ndarray:
    """Penalty weights: 0 on the time-normalized diagonal, rising toward 1.

    W[t, s] = 1 - exp(-(s/T_p - t/T_v)^2 / (2 g^2)), computed in float64.
    """
    if bandwidth <= 0:
        raise ValidationError(f"bandwidth must be > 0, got {bandwidth}")
    if num_video_frames < 1 or num_text_positions < 1:
        raise ValidationError("weight matrix needs at least one row and column")
    t = np.arange(num_video_frames, dtype=np.float64)[:, None] / num_video_frames
    s = np.arange(num_text_positions, dtype=np.float64)[None, :] / num_text_positions
    return 1.0 - np.exp(-((s - t) ** 2) / (2.0 * bandwidth**2))


def diag_loss(attention: torch.Tensor, bandwidth: float = DEFAULT_DIAG_BANDWIDTH,
              video_lengths=None, text_lengths=None) -> torch.Tensor:
    """Attention mass falling off the diagonal band, averaged per video frame.

    Accepts a single (T_v, T_p) matrix, or a padded batch (B, T_v, T_p) with
    per-item true lengths; batch items are averaged. The result lies in
    [0, 1) for row-stochastic attention.
    """
    if attention.dim() == 2:
        attention = attention.unsqueeze(0)
        video_lengths = [attention.shape[1]]
        text_lengths = [attention.shape[2]]
    elif video_lengths is None or text_lengths is None:
        raise ValidationError("batched diag_loss needs video_lengths and text_lengths")
    per_item = []
    for b in range(attention.shape[0]):
        t_v, t_p = int(video_lengths[b]), int(text_lengths[b])
        weights = torch.from_numpy(diag_weight_matrix(t_v, t_p, bandwidth)).to(attention.dtype)
        per_item.append((attention[b, :t_v, :t_p] * weights).sum() / t_v)
    return torch.stack(per_item).mean()


def total_loss(trace: ForwardTrace, targets: torch.Tensor,
               config: TrainConfig) -> tuple[torch.Tensor, dict]:
    """Prediction loss plus weighted diagonal penalty; components for logging."""
    l_pred = cross_entropy_loss(trace.logits, targets, trace.unit_pad_mask)
    l_diag = diag_loss(
        trace.attention,
        config.diag_bandwidth,
        video_lengths=(~trace.video_pad_mask).sum(-1),
        text_lengths=(~trace.text_pad_mask).sum(-1),
    )
    loss = l_pred + config.diag_weight * l_diag
    return loss, {"l_pred": float(l_pred.detach()), "l_diag": float(l_diag.detach())}


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Batch:
    """Right-padded tensors for a handful of utterances."""

    phoneme_ids: torch.Tensor  # (B, T_p) long
    text_pad_mask: torch.Tensor  # (B, T_p) bool
    features: torch.Tensor  # (B, T_v, d_v) float32
    video_pad_mask: torch.Tensor  # (B, T_v) bool
    targets: torch.Tensor  # (B, n*T_v) long, zeros at padding
    unit_pad_mask: torch.Tensor  # (B, n*T_v) bool
    units_per_frame: int


def collate(utterances: list[Utterance] | tuple[Utterance, ...]) -> Batch:
    """Stack utterances with right padding; all must carry units and share
    the same units-per-frame ratio."""
    if not utterances:
        raise ValidationError("cannot collate an empty batch")
    ratios = set()
    for utt in utterances:
        if utt.units is None:
            raise ValidationError(f"utterance {utt.id!r} has no units to train on")
        ratios.add(utt.units_per_frame)
    if len(ratios) != 1:
        raise ValidationError(f"units-per-frame ratio differs within batch: {sorted(ratios)}")
    n = ratios.pop()

    max_p = max(len(u.phonemes) for u in utterances)
    max_v = max(len(u.video) for u in utterances)
    batch = len(utterances)
    phoneme_ids = torch.zeros((batch, max_p), dtype=torch.long)
    text_pad = torch.ones((batch, max_p), dtype=torch.bool)
    features = torch.zeros((batch, max_v, utterances[0].video.feature_dim))
    video_pad = torch.ones((batch, max_v), dtype=torch.bool)
    targets = torch.zeros((batch, max_v * n), dtype=torch.long)
    for i, utt in enumerate(utterances):
        t_p, t_v = len(utt.phonemes), len(utt.video)
        phoneme_ids[i, :t_p] = torch.tensor(utt.phonemes.ids, dtype=torch.long)
        text_pad[i, :t_p] = False
        features[i, :t_v] = torch.from_numpy(utt.video.frames.copy())
        video_pad[i, :t_v] = False
        targets[i, : t_v * n] = torch.tensor(utt.units.units, dtype=torch.long)
    return Batch(
        phoneme_ids=phoneme_ids,
        text_pad_mask=text_pad,
        features=features,
        video_pad_mask=video_pad,
        targets=targets,
        unit_pad_mask=video_pad.repeat_interleave(n, dim=-1),
        units_per_frame=n,
    )


def _batch_indices(num_utterances: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Utterance indices for one global step.

    Epoch order is a seeded permutation derived from (seed, epoch) alone, so
    any step's batch can be reconstructed without replaying earlier steps.
    """
    per_epoch = math.ceil(num_utterances / batch_size)
    epoch, slot = divmod(step, per_epoch)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))
    order = rng.permutation(num_utterances)
    return order[slot * batch_size : (slot + 1) * batch_size]


def _step_seed(seed: int, step: int) -> int:
    """Dropout seed for one step, independent of the init stream."""
    return int(np.random.SeedSequence([seed, 1, step]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction and explicit float32 moment tensors.

    Hand-rolled (rather than torch.optim) so the moments serialize into the
    checkpoint format and a resumed run continues bitwise-identically.
    """

    def __init__(self, named_params, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.named_params = [(name, p) for name, p in named_params]
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.steps_taken = 0
        self.first_moment = {name: torch.zeros_like(p) for name, p in self.named_params}
        self.second_moment = {name: torch.zeros_like(p) for name, p in self.named_params}

    @torch.no_grad()
    def step(self):
        self.steps_taken += 1
        correction1 = 1 - self.beta1**self.steps_taken
        correction2 = 1 - self.beta2**self.steps_taken
        for name, param in self.named_params:
            if param.grad is None:
                continue
            m = self.first_moment[name]
            v = self.second_moment[name]
            m.mul_(self.beta1).add_(param.grad, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(param.grad, param.grad, value=1 - self.beta2)
            param.addcdiv_(m / correction1, (v / correction2).sqrt_().add_(self.eps),
                           value=-self.learning_rate)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self.named_params:
            out[f"adam_m.{name}"] = self.first_moment[name].numpy().copy()
            out[f"adam_v.{name}"] = self.second_moment[name].numpy().copy()
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], steps_taken: int):
        for name, _ in self.named_params:
            for prefix, store in (("adam_m", self.first_moment), ("adam_v", self.second_moment)):
                key = f"{prefix}.{name}"
                if key not in tensors:
                    raise ValidationError(f"checkpoint is missing optimizer tensor {key}")
                store[name].copy_(torch.from_numpy(np.asarray(tensors[key])))
        self.steps_taken = steps_taken


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def train_step(model: AvoModel, optimizer: Adam, batch: Batch,
               config: TrainConfig) -> dict:
    """One gradient step; returns {loss, l_pred, l_diag, grad_norm}."""
    model.train()
    trace = model(batch.phoneme_ids, batch.features, batch.units_per_frame,
                  batch.text_pad_mask, batch.video_pad_mask)
    loss, parts = total_loss(trace, batch.targets, config)
    if not torch.isfinite(loss):
        raise NumericError("non-finite total loss")
    model.zero_grad(set_to_none=True)
    loss.backward()
    for name, param in model.named_parameters():
        if param.grad is not None and not torch.isfinite(param.grad).all():
            raise NumericError(f"non-finite gradient in {name}")
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
    optimizer.step()
    model.eval()
    return {"loss": float(loss.detach()), "l_pred": parts["l_pred"],
            "l_diag": parts["l_diag"], "grad_norm": float(grad_norm)}


@torch.no_grad()
def _eval_metrics(model: AvoModel, utterances) -> tuple[float | None, float | None]:
    """(unit accuracy, mean diagonality) over utterances, or Nones if empty."""
    if not utterances:
        return None, None
    model.eval()
    correct = total = 0
    diag_scores = []
    for utt in utterances:
        batch = collate([utt])
        trace = model(batch.phoneme_ids, batch.features, batch.units_per_frame,
                      batch.text_pad_mask, batch.video_pad_mask)
        predicted = trace.logits[0].argmax(dim=-1)
        correct += int((predicted == batch.targets[0]).sum())
        total += batch.targets.shape[1]
        # complement of the off-band mass at the fixed evaluation bandwidth
        diag_scores.append(1.0 - float(diag_loss(trace.attention[0], DEFAULT_DIAG_BANDWIDTH)))
    return correct / total, float(np.mean(diag_scores))


def train(utterances, model_config: ModelConfig, config: TrainConfig, out_dir,
          eval_utterances=(), resume_from=None) -> tuple[AvoModel, dict]:
    """Run the optimization loop and leave a final checkpoint in ``out_dir``.

    Writes one JSON metrics line per step to metrics.jsonl; accuracy and
    diagonality over ``eval_utterances`` are filled in at checkpoint steps
    and at the end, null elsewhere. ``resume_from`` continues a saved run up
    to the same absolute ``max_steps``; thanks to stateless seeding the
    resumed metrics match an uninterrupted run bitwise.
    """
    utterances = tuple(utterances)
    if not utterances:
        raise ValidationError("cannot train on an empty utterance list")
    for utt in utterances:
        if utt.units is None:
            raise ValidationError(f"utterance {utt.id!r} has no units to train on")
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        model, manifest, extras = load_checkpoint(resume_from)
        if ModelConfig.from_dict(manifest["model_config"]) != model_config:
            raise ValidationError("resume checkpoint was trained with a different model config")
        start_step = int(manifest["step"])
        optimizer = Adam(model.named_parameters(), config.learning_rate)
        optimizer.load_state_tensors(extras, steps_taken=start_step)
    else:
        model = build_model(model_config, seed=config.seed)
        start_step = 0
        optimizer = Adam(model.named_parameters(), config.learning_rate)

    metrics_path = out_dir / METRICS_LOG_NAME
    last = {"loss": None}
    with metrics_path.open("w", encoding="ascii") as log:
        for step in range(start_step, config.max_steps):
            torch.manual_seed(_step_seed(config.seed, step))
            indices = _batch_indices(len(utterances), config.batch_size, config.seed, step)
            batch = collate([utterances[i] for i in indices])
            last = train_step(model, optimizer, batch, config)
            done = step + 1
            at_checkpoint = config.checkpoint_every and done % config.checkpoint_every == 0
            accuracy = diag = None
            if at_checkpoint or done == config.max_steps:
                accuracy, diag = _eval_metrics(model, eval_utterances)
            if at_checkpoint:
                save_checkpoint(out_dir / f"ckpt_step{done:06d}", model,
                                step=done, seed=config.seed, loss=last["loss"],
                                extra_tensors=optimizer.state_tensors())
            record = {"step": done, "loss": last["loss"], "l_pred": last["l_pred"],
                      "l_diag": last["l_diag"], "grad_norm": last["grad_norm"],
                      "acc": accuracy, "diag_score": diag}
            log.write(json.dumps(record) + "\n")

    save_checkpoint(out_dir / "final", model, step=config.max_steps,
                    seed=config.seed, loss=last["loss"],
                    extra_tensors=optimizer.state_tensors())
    accuracy, diag = _eval_metrics(model, eval_utterances)
    summary = {"steps": config.max_steps, "loss": last["loss"],
               "acc": accuracy, "diag_score": diag}
    return model, summary


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


def grad_check(model_config: ModelConfig, tolerance: float = 1e-4, *,
               epsilon: float = 1e-5, seed: int = 0,
               num_phonemes: int = 3, num_video_frames: int = 4,
               units_per_frame: int = 2, samples_per_tensor: int = 20,
               tensor_names=None, corrupt_tensor: str | None = None) -> dict:
    """Compare analytic gradients against central finite differences.

    Runs the full loss in float64 on random small inputs and samples at
    least ``samples_per_tensor`` coordinates per weight tensor. Relative
    error uses a small-magnitude guard so that comparisons near zero do not
    blow up. ``corrupt_tensor`` scales one tensor's analytic gradient by
    1.1, which must surface as a failure naming that tensor.
    """
    torch.set_num_threads(1)
    rng = np.random.Generator(np.random.PCG64(seed))
    model = build_model(model_config, seed=seed).double()
    model.eval()

    phoneme_ids = torch.from_numpy(
        rng.integers(0, model_config.vocab_size, size=(1, num_phonemes)))
    features = torch.from_numpy(
        rng.standard_normal((1, num_video_frames, model_config.feature_dim)))
    targets = torch.from_numpy(
        rng.integers(0, model_config.codebook_size,
                     size=(1, num_video_frames * units_per_frame)))
    loss_config = TrainConfig(max_steps=1)

    def eval_loss() -> torch.Tensor:
        trace = model(phoneme_ids, features, units_per_frame)
        loss, _ = total_loss(trace, targets, loss_config)
        return loss

    loss = eval_loss()
    model.zero_grad(set_to_none=True)
    loss.backward()

    guard = 1e-4
    report: dict = {"tolerance": tolerance, "epsilon": epsilon,
                    "loss": float(loss.detach()), "tensors": {}, "failed_tensors": []}
    for name, param in model.named_parameters():
        if tensor_names is not None and name not in tensor_names:
            continue
        analytic = param.grad.detach().clone().reshape(-1)
        if corrupt_tensor == name:
            analytic = analytic * 1.1
        flat = param.data.reshape(-1)
        count = min(samples_per_tensor, flat.numel())
        picked = rng.choice(flat.numel(), size=count, replace=False)
        max_rel = 0.0
        abs_errs = []
        with torch.no_grad():
            for idx in picked:
                original = flat[idx].item()
                flat[idx] = original + epsilon
                plus = float(eval_loss())
                flat[idx] = original - epsilon
                minus = float(eval_loss())
                flat[idx] = original
                fd = (plus - minus) / (2 * epsilon)
                a = float(analytic[idx])
                abs_errs.append(abs(a - fd))
                max_rel = max(max_rel, abs(a - fd) / max(abs(a), abs(fd), guard))
        report["tensors"][name] = {
            "max_rel_err": max_rel,
            "mean_abs_err": float(np.mean(abs_errs)),
            "checked": int(count),
        }
        if max_rel >= tolerance:
            report["failed_tensors"].append(name)
    report["max_rel_err"] = max((t["max_rel_err"] for t in report["tensors"].values()), default=0.0)
    report["passed"] = not report["failed_tensors"]
    return report
