"""End-to-end generation: (phonemes, video) -> units -> optional audio.

Real neural vocoders are integration points, not code here: any external
program following the ``<cmd> <units_path> <wav_path>`` protocol can be
plugged in. For tests and demos two oracle backends are provided, one
returning codebook centroid features (an exact quantizer fixed point) and
one rendering each unit as a short crossfaded sinusoid.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
import wave
from pathlib import Path
from typing import Protocol

import numpy as np
import torch

from .data import PhonemeSequence, UnitSequence, VideoFeatureSequence, write_units
from .errors import ValidationError
from .model import AvoModel, ForwardTrace, decode_units, load_checkpoint
from .tokenizer import Codebook, centroid_lookup

SAMPLE_RATE_HZ = 16000
FRAME_SECONDS = 0.020
CROSSFADE_SECONDS = 0.002
SINE_BASE_HZ = 100.0
SINE_STEP_HZ = 8.0
SINE_AMPLITUDE = 0.5


class Vocoder(Protocol):
    produces_waveform: bool

    def synthesize(self, units: UnitSequence): ...


def infer_units(model_or_checkpoint, phonemes: PhonemeSequence,
                video: VideoFeatureSequence, units_per_frame: int,
                unit_rate_hz: float = 50.0) -> tuple[UnitSequence, ForwardTrace]:
    """Run the forward pass on one utterance and decode per-frame units.

    ``model_or_checkpoint`` is an AvoModel or a checkpoint directory. The
    trace is returned alongside the units so callers can export the
    attention matrix for alignment diagnostics.
    """
    if isinstance(model_or_checkpoint, AvoModel):
        model = model_or_checkpoint
    else:
        model, _, _ = load_checkpoint(model_or_checkpoint)
    model.eval()
    phoneme_ids = torch.tensor(phonemes.ids, dtype=torch.long).unsqueeze(0)
    features = torch.from_numpy(video.frames.copy()).unsqueeze(0)
    with torch.no_grad():
        trace = model(phoneme_ids, features, units_per_frame)
    units = decode_units(trace.logits[0], unit_rate_hz=unit_rate_hz)
    return units, trace


class OracleVocoder:
    """Deterministic stand-in for a pretrained unit vocoder.

    mode "features" inverts the tokenizer (each unit becomes its centroid
    vector); mode "sine" renders unit k as a sinusoid of 100 + 8k Hz for
    20 ms, with 2 ms linear crossfades at unit boundaries. No perceptual
    claim is made for the sine rendering; it is audible and reproducible.
    """

    def __init__(self, codebook: Codebook, mode: str = "features"):
        if mode not in ("features", "sine"):
            raise ValidationError(f"unknown oracle vocoder mode {mode!r}")
        self.codebook = codebook
        self.mode = mode
        self.produces_waveform = mode == "sine"

    def synthesize(self, units: UnitSequence) -> np.ndarray:
        if units.codebook_size != self.codebook.num_units:
            raise ValidationError(
                f"units use K={units.codebook_size} but codebook has K={self.codebook.num_units}"
            )
        if self.mode == "features":
            return centroid_lookup(self.codebook, units)
        return _render_sines(np.asarray(units.units), SAMPLE_RATE_HZ)


def _render_sines(unit_ids: np.ndarray, sample_rate: int) -> np.ndarray:
    """Concatenated per-unit sinusoids on one global time axis.

    Sharing the time axis keeps equal neighboring units phase-continuous,
    so their crossfade degenerates to an unbroken tone.
    """
    frame_len = int(round(sample_rate * FRAME_SECONDS))
    fade_len = int(round(sample_rate * CROSSFADE_SECONDS))
    freqs = SINE_BASE_HZ + SINE_STEP_HZ * unit_ids
    t = np.arange(len(unit_ids) * frame_len, dtype=np.float64) / sample_rate
    out = np.empty_like(t)
    for i, freq in enumerate(freqs):
        seg = slice(i * frame_len, (i + 1) * frame_len)
        out[seg] = SINE_AMPLITUDE * np.sin(2 * np.pi * freq * t[seg])
    ramp = np.arange(fade_len, dtype=np.float64) / fade_len
    for i in range(1, len(unit_ids)):
        seg = slice(i * frame_len, i * frame_len + fade_len)
        tail = SINE_AMPLITUDE * np.sin(2 * np.pi * freqs[i - 1] * t[seg])
        out[seg] = (1 - ramp) * tail + ramp * out[seg]
    return out


class ExternalCommandVocoder:
    """Adapter for the `<cmd> <units_path> <wav_path>` vocoder protocol."""

    produces_waveform = True

    def __init__(self, command):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValidationError("external vocoder command is empty")

    def synthesize(self, units: UnitSequence) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="avo_vocoder_") as tmp:
            units_path = Path(tmp) / "in.units"
            wav_path = Path(tmp) / "out.wav"
            write_units(units, units_path)
            result = subprocess.run([*self.command, str(units_path), str(wav_path)],
                                    capture_output=True, text=True)
            if result.returncode != 0:
                raise ValidationError(
                    f"vocoder command failed with code {result.returncode}: {result.stderr.strip()}"
                )
            waveform, _ = read_wav(wav_path)
        return waveform


def synthesize(vocoder: Vocoder, units: UnitSequence):
    """Dispatch to the vocoder; waveform (1-D) or feature matrix (2-D)."""
    return vocoder.synthesize(units)


def write_wav(waveform: np.ndarray, path, sample_rate: int = SAMPLE_RATE_HZ) -> None:
    """16-bit PCM mono WAV; samples clipped to [-1, 1] before quantization."""
    samples = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    pcm = (samples * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as handle:
        handle.setnchannels(1)
        handle.setsampwidth(2)
        handle.setframerate(sample_rate)
        handle.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as handle:
        if handle.getnchannels() != 1 or handle.getsampwidth() != 2:
            raise ValidationError(f"{path}: expected 16-bit mono WAV")
        rate = handle.getframerate()
        pcm = np.frombuffer(handle.readframes(handle.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767.0, rate
