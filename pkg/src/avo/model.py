"""Forward model: encode phonemes and video features, align them with
cross-modal attention, upsample to the unit rate, and emit per-frame unit
logits.

All operations are batched with right-padding; ``pad_mask`` tensors are
boolean with True marking padded positions. With dropout disabled the
forward pass is a pure function of the parameters and inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import UnitSequence, read_features, write_features
from .errors import FormatError, NumericError, ValidationError

CHECKPOINT_MANIFEST_NAME = "checkpoint.json"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``conv_filter_size`` defaults to ``4 * hidden_dim`` when left as None.
    """

    vocab_size: int
    codebook_size: int
    feature_dim: int
    hidden_dim: int = 64
    text_fft_blocks: int = 4
    video_fft_blocks: int = 2
    predictor_fft_blocks: int = 1
    attention_heads: int = 2
    conv_filter_size: int | None = None
    conv_kernel_sizes: tuple[int, int] = (9, 1)
    dropout: float = 0.1
    max_seq_len: int = 1000

    def __post_init__(self):
        if self.conv_filter_size is None:
            object.__setattr__(self, "conv_filter_size", 4 * self.hidden_dim)
        counts = (self.vocab_size, self.codebook_size, self.feature_dim, self.hidden_dim,
                  self.text_fft_blocks, self.video_fft_blocks, self.predictor_fft_blocks,
                  self.attention_heads, self.conv_filter_size, self.max_seq_len)
        if any(c < 1 for c in counts):
            raise ValidationError("all model dimensions and block counts must be >= 1")
        if self.hidden_dim % self.attention_heads != 0:
            raise ValidationError(
                f"hidden_dim {self.hidden_dim} not divisible by attention_heads {self.attention_heads}"
            )
        if not 0 <= self.dropout < 1:
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")
        if len(self.conv_kernel_sizes) != 2 or any(k < 1 for k in self.conv_kernel_sizes):
            raise ValidationError(f"conv_kernel_sizes must be two positive ints, got {self.conv_kernel_sizes}")
        object.__setattr__(self, "conv_kernel_sizes", tuple(self.conv_kernel_sizes))

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "codebook_size": self.codebook_size,
            "feature_dim": self.feature_dim,
            "hidden_dim": self.hidden_dim,
            "text_fft_blocks": self.text_fft_blocks,
            "video_fft_blocks": self.video_fft_blocks,
            "predictor_fft_blocks": self.predictor_fft_blocks,
            "attention_heads": self.attention_heads,
            "conv_filter_size": self.conv_filter_size,
            "conv_kernel_sizes": list(self.conv_kernel_sizes),
            "dropout": self.dropout,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise ValidationError(f"unknown model config fields: {sorted(unknown)}")
        for key in ("vocab_size", "codebook_size", "feature_dim"):
            if key not in payload:
                raise ValidationError(f"model config requires {key}")
        payload = dict(payload)
        if "conv_kernel_sizes" in payload:
            payload["conv_kernel_sizes"] = tuple(payload["conv_kernel_sizes"])
        return cls(**payload)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos positional table of shape (length, dim)."""
    position = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, dim, 2, dtype=np.float64) * (-math.log(10000.0) / dim))
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div[: dim // 2])
    return table.astype(np.float32)


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product self-attention with key padding masks."""

    def __init__(self, hidden_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_dim // num_heads
        self.query = nn.Linear(hidden_dim, hidden_dim)
        self.key = nn.Linear(hidden_dim, hidden_dim)
        self.value = nn.Linear(hidden_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim, hidden_dim)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape

        def split(t):
            return t.view(batch, length, self.num_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        key_mask = pad_mask[:, None, None, :]
        scores = scores.masked_fill(key_mask, -torch.inf)
        weights = torch.softmax(scores, dim=-1).masked_fill(key_mask, 0.0)
        context = (weights @ v).transpose(1, 2).reshape(batch, length, -1)
        return self.out(context)


class ConvFeedForward(nn.Module):
    """Two 1-D convolutions over time with a ReLU between them."""

    def __init__(self, hidden_dim: int, filter_size: int, kernel_sizes: tuple[int, int]):
        super().__init__()
        k1, k2 = kernel_sizes
        self.conv1 = nn.Conv1d(hidden_dim, filter_size, k1, padding=k1 // 2)
        self.conv2 = nn.Conv1d(filter_size, hidden_dim, k2, padding=k2 // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x.transpose(1, 2)
        y = self.conv2(torch.relu(self.conv1(y)))
        return y.transpose(1, 2)


class FFTBlock(nn.Module):
    """Self-attention sublayer plus convolutional feed-forward sublayer.

    Both sublayers end with residual + layer norm; padded positions are
    excluded from attention keys and zeroed after each sublayer so padding
    never leaks into real frames through the convolutions.
    """

    def __init__(self, name: str, hidden_dim: int, num_heads: int,
                 filter_size: int, kernel_sizes: tuple[int, int], dropout: float):
        super().__init__()
        self.name = name
        self.attention = SelfAttention(hidden_dim, num_heads)
        self.feed_forward = ConvFeedForward(hidden_dim, filter_size, kernel_sizes)
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.norm2 = nn.LayerNorm(hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.dropout(self.attention(x, pad_mask)))
        x = x.masked_fill(pad_mask.unsqueeze(-1), 0)
        x = self.norm2(x + self.dropout(self.feed_forward(x)))
        x = x.masked_fill(pad_mask.unsqueeze(-1), 0)
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite activations in block {self.name}")
        return x


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Everything the forward pass produced, for losses and diagnostics."""

    text_hidden: torch.Tensor  # (B, T_p, d)
    video_hidden: torch.Tensor  # (B, T_v, d)
    attention: torch.Tensor  # (B, T_v, T_p), rows of real frames sum to 1
    context: torch.Tensor  # (B, T_v, d)
    upsampled: torch.Tensor  # (B, n*T_v, d)
    logits: torch.Tensor  # (B, n*T_v, K)
    text_pad_mask: torch.Tensor  # (B, T_p) bool, True = padded
    video_pad_mask: torch.Tensor  # (B, T_v) bool
    unit_pad_mask: torch.Tensor  # (B, n*T_v) bool


def align(text_hidden: torch.Tensor, video_hidden: torch.Tensor,
          text_pad_mask: torch.Tensor | None = None,
          video_pad_mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-head cross-modal attention with a residual connection.

    Video frames are the queries, text positions the keys and values:
    ``A = softmax(video @ text.T / sqrt(d))`` row-wise, ``C = A @ text + video``.
    Padded text positions get zero weight; padded video rows are zeroed in
    both outputs.
    """
    if text_hidden.shape[-1] != video_hidden.shape[-1]:
        raise ValidationError(
            f"hidden dims differ: text {text_hidden.shape[-1]}, video {video_hidden.shape[-1]}"
        )
    scores = video_hidden @ text_hidden.transpose(-2, -1) / math.sqrt(text_hidden.shape[-1])
    if text_pad_mask is not None:
        key_mask = text_pad_mask[..., None, :]
        scores = scores.masked_fill(key_mask, -torch.inf)
        attention = torch.softmax(scores, dim=-1).masked_fill(key_mask, 0.0)
    else:
        attention = torch.softmax(scores, dim=-1)
    if video_pad_mask is not None:
        attention = attention.masked_fill(video_pad_mask[..., None], 0.0)
    context = attention @ text_hidden + video_hidden
    if video_pad_mask is not None:
        context = context.masked_fill(video_pad_mask[..., None], 0.0)
    return attention, context


def upsample(context: torch.Tensor, units_per_frame: int) -> torch.Tensor:
    """Duplicate each time step ``units_per_frame`` times along dim -2."""
    if units_per_frame < 1:
        raise ValidationError(f"units_per_frame must be >= 1, got {units_per_frame}")
    return context.repeat_interleave(units_per_frame, dim=-2)


class AvoModel(nn.Module):
    """Text encoder, video encoder, aligner, upsampler, unit predictor."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.embedding = nn.Embedding(config.vocab_size, d)
        self.video_proj = nn.Linear(config.feature_dim, d)
        self.classifier = nn.Linear(d, config.codebook_size)
        self.register_buffer(
            "positions",
            torch.from_numpy(sinusoidal_positions(config.max_seq_len, d)),
            persistent=False,
        )

        def blocks(prefix, count):
            return nn.ModuleList(
                FFTBlock(f"{prefix}_{i}", d, config.attention_heads,
                         config.conv_filter_size, config.conv_kernel_sizes, config.dropout)
                for i in range(count)
            )

        self.text_blocks = blocks("text", config.text_fft_blocks)
        self.video_blocks = blocks("video", config.video_fft_blocks)
        self.predictor_blocks = blocks("predictor", config.predictor_fft_blocks)

    def _add_positions(self, x: torch.Tensor) -> torch.Tensor:
        length = x.shape[-2]
        if length > self.config.max_seq_len:
            raise ValidationError(f"sequence length {length} exceeds max_seq_len {self.config.max_seq_len}")
        return x + self.positions[:length]

    def encode_text(self, phoneme_ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        if phoneme_ids.min() < 0 or phoneme_ids.max() >= self.config.vocab_size:
            raise ValidationError(f"phoneme id outside [0, {self.config.vocab_size})")
        x = self._add_positions(self.embedding(phoneme_ids))
        x = x.masked_fill(pad_mask.unsqueeze(-1), 0)
        for block in self.text_blocks:
            x = block(x, pad_mask)
        return x

    def encode_video(self, features: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.config.feature_dim:
            raise ValidationError(
                f"video feature dim {features.shape[-1]} does not match config {self.config.feature_dim}"
            )
        x = self._add_positions(self.video_proj(features))
        x = x.masked_fill(pad_mask.unsqueeze(-1), 0)
        for block in self.video_blocks:
            x = block(x, pad_mask)
        return x

    def predict_units(self, upsampled: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        x = upsampled
        for block in self.predictor_blocks:
            x = block(x, pad_mask)
        logits = self.classifier(x)
        if not torch.isfinite(logits).all():
            raise NumericError("non-finite activations in classifier")
        return logits

    def forward(self, phoneme_ids: torch.Tensor, features: torch.Tensor,
                units_per_frame: int,
                text_pad_mask: torch.Tensor | None = None,
                video_pad_mask: torch.Tensor | None = None) -> ForwardTrace:
        if text_pad_mask is None:
            text_pad_mask = torch.zeros(phoneme_ids.shape, dtype=torch.bool,
                                        device=phoneme_ids.device)
        if video_pad_mask is None:
            video_pad_mask = torch.zeros(features.shape[:-1], dtype=torch.bool,
                                         device=features.device)
        text_hidden = self.encode_text(phoneme_ids, text_pad_mask)
        video_hidden = self.encode_video(features, video_pad_mask)
        attention, context = align(text_hidden, video_hidden, text_pad_mask, video_pad_mask)
        upsampled = upsample(context, units_per_frame)
        unit_pad_mask = video_pad_mask.repeat_interleave(units_per_frame, dim=-1)
        logits = self.predict_units(upsampled, unit_pad_mask)
        return ForwardTrace(
            text_hidden=text_hidden,
            video_hidden=video_hidden,
            attention=attention,
            context=context,
            upsampled=upsampled,
            logits=logits,
            text_pad_mask=text_pad_mask,
            video_pad_mask=video_pad_mask,
            unit_pad_mask=unit_pad_mask,
        )


def build_model(config: ModelConfig, seed: int = 0) -> AvoModel:
    """Construct a model with seed-determined initial weights, in eval mode."""
    torch.manual_seed(seed)
    model = AvoModel(config)
    model.eval()
    return model


def decode_units(logits, unit_rate_hz: float = 50.0) -> UnitSequence:
    """Per-frame argmax over a (T_z, K) logits matrix; ties go to the
    smallest unit index."""
    matrix = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise ValidationError(f"logits must be a nonempty (frames, units) matrix, got shape {matrix.shape}")
    if not np.isfinite(matrix).all():
        raise ValidationError("logits contain non-finite values")
    ids = np.argmax(matrix, axis=1)
    return UnitSequence(units=tuple(int(u) for u in ids),
                        codebook_size=matrix.shape[1],
                        unit_rate_hz=unit_rate_hz)


# ---------------------------------------------------------------------------
# checkpoints: one DSUF file per tensor plus a JSON manifest
# ---------------------------------------------------------------------------


def _as_matrix(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    return arr.reshape(arr.shape[0], -1)


def save_checkpoint(directory, model: AvoModel, *, step: int = 0, seed: int = 0,
                    loss: float | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    """Write all parameters (and optional optimizer tensors) bitwise-exactly."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "model_config": model.config.to_dict(),
        "step": step,
        "seed": seed,
        "loss": loss,
        "tensors": {},
        "extra_tensors": {},
    }
    for i, (name, param) in enumerate(model.named_parameters()):
        arr = param.detach().cpu().numpy().astype(np.float32)
        filename = f"param{i:03d}.dsuf"
        write_features(_as_matrix(arr), directory / filename)
        manifest["tensors"][name] = {"file": filename, "shape": list(arr.shape)}
    for i, (name, arr) in enumerate(sorted((extra_tensors or {}).items())):
        arr = np.asarray(arr, dtype=np.float32)
        filename = f"extra{i:03d}.dsuf"
        write_features(_as_matrix(arr), directory / filename)
        manifest["extra_tensors"][name] = {"file": filename, "shape": list(arr.shape)}
    (directory / CHECKPOINT_MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="ascii")


def load_checkpoint(directory) -> tuple[AvoModel, dict, dict[str, np.ndarray]]:
    """Rebuild the model from a checkpoint directory.

    Returns (model, manifest, extra_tensors). Parameters are restored
    bitwise, so a reloaded model reproduces the saved one exactly.
    """
    directory = Path(directory)
    manifest_path = directory / CHECKPOINT_MANIFEST_NAME
    if not manifest_path.is_file():
        raise FormatError(f"{manifest_path}: missing checkpoint manifest")
    manifest = json.loads(manifest_path.read_text(encoding="ascii"))
    config = ModelConfig.from_dict(manifest["model_config"])
    model = build_model(config, seed=int(manifest.get("seed", 0)))
    params = dict(model.named_parameters())
    if set(params) != set(manifest["tensors"]):
        raise FormatError(f"{manifest_path}: tensor names do not match the model architecture")
    with torch.no_grad():
        for name, entry in manifest["tensors"].items():
            arr = read_features(directory / entry["file"]).reshape(entry["shape"])
            if list(params[name].shape) != list(entry["shape"]):
                raise FormatError(f"{manifest_path}: shape mismatch for tensor {name}")
            params[name].copy_(torch.from_numpy(arr))
    extras = {
        name: read_features(directory / entry["file"]).reshape(entry["shape"])
        for name, entry in manifest.get("extra_tensors", {}).items()
    }
    return model, manifest, extras
