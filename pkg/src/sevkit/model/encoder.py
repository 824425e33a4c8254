"""Encoders mapping raw audio to a latent sequence H of shape (T, F).

Two kinds ship: a small trainable encoder (strided 1-D convolutions into
two self-attention blocks) whose time resolution mimics a 320-samples-
per-step speech encoder, and a subprocess adapter that sends the audio
across a process boundary and reads the latent matrix back, so any
pretrained model can be bolted on without linking its runtime.
"""

from __future__ import annotations

import struct
import subprocess
from dataclasses import dataclass, field

import numpy as np

from ..corpus import RawAudio
from .layers import Conv1d, LayerNorm, TransformerBlock, gelu, gelu_grad, sinusoidal_positions

LATENT_MAGIC = b"SVLM"
AUDIO_MAGIC = b"SVAU"
WIRE_VERSION = 1


class EncoderError(Exception):
    """Invalid encoder configuration or input."""


@dataclass(frozen=True)
class LatentSequence:
    """Latent vectors H (T x F) with a validity boundary for padded rows."""

    H: np.ndarray
    valid_length: int

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.float64)
        object.__setattr__(self, "H", H)
        if H.ndim != 2 or H.shape[0] < 1 or H.shape[1] < 1:
            raise EncoderError("latent matrix must be (T >= 1, F >= 1)")
        if not np.all(np.isfinite(H)):
            raise EncoderError("latent matrix must be finite")
        if not (1 <= self.valid_length <= H.shape[0]):
            raise EncoderError(f"valid_length {self.valid_length} out of range for T={H.shape[0]}")


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder selection and shape: kind, feature dim, downsampling, seed."""

    kind: str = "toy"
    feature_dim: int = 64
    downsampling: int = 320
    seed: int = 0
    num_blocks: int = 2
    num_heads: int = 4
    adapter_command: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.kind not in ("toy", "external-adapter"):
            raise EncoderError(f"unknown encoder kind {self.kind!r}")
        if self.feature_dim < 1:
            raise EncoderError("feature_dim must be positive")
        if self.kind == "toy" and self.feature_dim % self.num_heads:
            raise EncoderError("toy encoder feature_dim must be a multiple of num_heads")
        if self.downsampling < 1:
            raise EncoderError("downsampling must be >= 1")


def _stride_plan(downsampling: int) -> list[int]:
    """Factor the downsampling into conv strides, largest factors first."""
    strides = []
    n = downsampling
    while n > 1:
        for f in range(8, 1, -1):
            if n % f == 0:
                strides.append(f)
                n //= f
                break
        else:
            strides.append(n)  # prime factor above 8
            n = 1
    return strides or [1]


class ToyEncoder:
    """Small trainable encoder: conv downsampler plus attention blocks.

    Output length is exactly ceil(L / downsampling) for input length L.
    All parameters are trainable; forward caches activations so that
    backward(dH) accumulates every parameter gradient.
    """

    def __init__(self, config: EncoderConfig):
        if config.kind != "toy":
            raise EncoderError("ToyEncoder requires kind='toy'")
        self.config = config
        dim = config.feature_dim
        strides = _stride_plan(config.downsampling)
        channels = [1] + [max(8, dim // 2)] * (len(strides) - 1) + [dim]
        self.convs = []
        for i, stride in enumerate(strides):
            kernel = max(3, 2 * stride)
            self.convs.append(
                Conv1d(f"encoder.conv{i}", channels[i], channels[i + 1], kernel, stride, config.seed)
            )
        self.blocks = [
            TransformerBlock(f"encoder.block{i}", dim, config.num_heads, config.seed)
            for i in range(config.num_blocks)
        ]
        self.final_norm = LayerNorm("encoder.final_norm", dim)
        self._layers = self.convs + self.blocks + [self.final_norm]

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self._layers:
            out.update(layer.parameters())
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self._layers:
            out.update(layer.gradients())
        return out

    def zero_grad(self):
        for layer in self._layers:
            layer.zero_grad()

    def set_parameter(self, key: str, value):
        for layer in self._layers:
            if key.startswith(layer.name + "."):
                layer.set_parameter(key, value)
                return
        raise KeyError(key)

    def forward(self, audio: RawAudio) -> LatentSequence:
        samples = audio.samples
        if samples.size < self.config.downsampling:
            raise EncoderError(
                f"audio of {samples.size} samples is shorter than one "
                f"downsampling window ({self.config.downsampling})"
            )
        x = samples[:, None]
        self._conv_pre_acts = []
        for conv in self.convs:
            z = conv.forward(x)
            self._conv_pre_acts.append(z)
            x = gelu(z)
        x = x + sinusoidal_positions(x.shape[0], x.shape[1])
        for block in self.blocks:
            x = block.forward(x)
        x = self.final_norm.forward(x)
        return LatentSequence(H=x, valid_length=x.shape[0])

    def backward(self, dH: np.ndarray) -> None:
        dx = self.final_norm.backward(dH)
        for block in reversed(self.blocks):
            dx = block.backward(dx)
        for conv, pre_act in zip(reversed(self.convs), reversed(self._conv_pre_acts)):
            dx = conv.backward(dx * gelu_grad(pre_act))


def write_latent_matrix(stream, H: np.ndarray) -> None:
    """Latent exchange format: magic, version, (T, F) header, row-major
    little-endian float64 payload."""
    H = np.ascontiguousarray(H, dtype="<f8")
    stream.write(LATENT_MAGIC)
    stream.write(struct.pack("<IQQ", WIRE_VERSION, H.shape[0], H.shape[1]))
    stream.write(H.tobytes())


def read_latent_matrix(stream) -> np.ndarray:
    magic = stream.read(4)
    if magic != LATENT_MAGIC:
        raise EncoderError(f"bad latent-matrix magic {magic!r}")
    version, t, f = struct.unpack("<IQQ", stream.read(20))
    if version != WIRE_VERSION:
        raise EncoderError(f"unsupported latent-matrix version {version}")
    payload = stream.read(8 * t * f)
    if len(payload) != 8 * t * f:
        raise EncoderError("truncated latent-matrix payload")
    return np.frombuffer(payload, dtype="<f8").reshape(t, f).copy()


def write_audio_message(stream, audio: RawAudio) -> None:
    """Audio half of the adapter exchange: length + rate header, float64 samples."""
    samples = np.ascontiguousarray(audio.samples, dtype="<f8")
    stream.write(AUDIO_MAGIC)
    stream.write(struct.pack("<IQQ", WIRE_VERSION, samples.size, audio.sample_rate))
    stream.write(samples.tobytes())


def read_audio_message(stream) -> RawAudio:
    magic = stream.read(4)
    if magic != AUDIO_MAGIC:
        raise EncoderError(f"bad audio-message magic {magic!r}")
    version, length, rate = struct.unpack("<IQQ", stream.read(20))
    if version != WIRE_VERSION:
        raise EncoderError(f"unsupported audio-message version {version}")
    payload = stream.read(8 * length)
    samples = np.frombuffer(payload, dtype="<f8").copy()
    return RawAudio(samples=samples, sample_rate=int(rate))


class SubprocessEncoderAdapter:
    """Runs an external command per utterance: audio goes to its stdin in
    the audio message format, the latent matrix is read from its stdout."""

    def __init__(self, config: EncoderConfig):
        if config.kind != "external-adapter":
            raise EncoderError("SubprocessEncoderAdapter requires kind='external-adapter'")
        if not config.adapter_command:
            raise EncoderError("external-adapter config needs adapter_command")
        self.config = config

    def parameters(self):
        return {}

    def forward(self, audio: RawAudio) -> LatentSequence:
        import io

        buf = io.BytesIO()
        write_audio_message(buf, audio)
        result = subprocess.run(
            list(self.config.adapter_command),
            input=buf.getvalue(),
            stdout=subprocess.PIPE,
            check=True,
        )
        H = read_latent_matrix(io.BytesIO(result.stdout))
        if H.shape[1] != self.config.feature_dim:
            raise EncoderError(
                f"adapter returned F={H.shape[1]}, config expects {self.config.feature_dim}"
            )
        return LatentSequence(H=H, valid_length=H.shape[0])


def build_encoder(config: EncoderConfig):
    if config.kind == "toy":
        return ToyEncoder(config)
    return SubprocessEncoderAdapter(config)


def encode(audio: RawAudio, encoder_or_config) -> LatentSequence:
    """Map audio to its latent sequence; accepts a config or a built encoder."""
    if isinstance(encoder_or_config, EncoderConfig):
        encoder = build_encoder(encoder_or_config)
    else:
        encoder = encoder_or_config
    return encoder.forward(audio)
