"""WAV decoding and encoding, downmixing, resampling, and segmentation.

Everything downstream of this module sees mono clips at the working rate
of 10 kHz, which puts the Nyquist frequency at exactly 5 kHz so the full
spectrogram band is usable without cropping.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

WORKING_RATE_HZ = 10_000

# 16-bit PCM normalization divisor. Asymmetric (+32767 maps to ~0.99997) but
# losslessly round-trippable: encode uses round(x * 32768) clamped to int16.
PCM16_SCALE = 32768.0

_FMT_PCM = 0x0001
_FMT_IEEE_FLOAT = 0x0003
_FMT_EXTENSIBLE = 0xFFFE


class WavDecodeError(ValueError):
    """The byte stream is not a well-formed RIFF/WAVE container."""


class UnsupportedWavError(WavDecodeError):
    """Well-formed WAVE file, but an encoding this decoder does not handle."""


@dataclass(frozen=True)
class AudioClip:
    """Mono audio: float samples in [-1, 1] plus their sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1:
            raise ValueError(f"AudioClip is mono; got sample shape {samples.shape}")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))
        if samples.size and float(np.abs(samples).max()) > 1.0:
            raise ValueError("samples must lie in [-1, 1]")

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def __len__(self) -> int:
        return len(self.samples)


def _read_chunks(data: bytes) -> dict[bytes, bytes]:
    """Split a RIFF body into chunks, keeping the first of each id."""
    if len(data) < 12:
        raise WavDecodeError("file too short for a RIFF header")
    if data[0:4] != b"RIFF":
        raise WavDecodeError("missing 'RIFF' chunk id at offset 0")
    if data[8:12] != b"WAVE":
        raise WavDecodeError("RIFF form type is not 'WAVE'")
    chunks: dict[bytes, bytes] = {}
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavDecodeError(
                f"chunk {cid!r} declares {size} bytes but only {len(body)} remain"
            )
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    return chunks


def decode_wav(data: bytes) -> AudioClip:
    """Decode RIFF/WAVE bytes (PCM16 or IEEE float32) into a mono clip.

    Multi-channel input is downmixed by an arithmetic mean over channels.
    16-bit PCM samples are scaled by 1/32768; float samples are clamped
    to [-1, 1].
    """
    chunks = _read_chunks(data)
    if b"fmt " not in chunks:
        raise WavDecodeError("missing required chunk 'fmt '")
    if b"data" not in chunks:
        raise WavDecodeError("missing required chunk 'data'")

    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise WavDecodeError(f"chunk 'fmt ' too short ({len(fmt)} bytes)")
    audio_format, channels, rate, _byte_rate, _block_align, bits = struct.unpack_from(
        "<HHIIHH", fmt, 0
    )
    if audio_format == _FMT_EXTENSIBLE:
        # The effective format is the first two bytes of the SubFormat GUID.
        if len(fmt) < 26:
            raise WavDecodeError("extensible 'fmt ' chunk lacks a SubFormat field")
        (audio_format,) = struct.unpack_from("<H", fmt, 24)
    if channels < 1:
        raise WavDecodeError("channel count must be at least 1")
    if rate <= 0:
        raise WavDecodeError(f"invalid sample rate {rate}")

    if audio_format == _FMT_PCM:
        if bits != 16:
            raise UnsupportedWavError(f"PCM with {bits} bits per sample (only 16 supported)")
        dtype, width = "<i2", 2
    elif audio_format == _FMT_IEEE_FLOAT:
        if bits != 32:
            raise UnsupportedWavError(f"IEEE float with {bits} bits (only 32 supported)")
        dtype, width = "<f4", 4
    else:
        raise UnsupportedWavError(f"compressed or unknown audio format tag 0x{audio_format:04x}")

    body = chunks[b"data"]
    frame_size = width * channels
    if len(body) % frame_size:
        raise WavDecodeError(
            f"chunk 'data' size {len(body)} is not a multiple of the {frame_size}-byte frame"
        )
    raw = np.frombuffer(body, dtype=dtype).astype(np.float64)
    if channels > 1:
        raw = raw.reshape(-1, channels).mean(axis=1)
    if audio_format == _FMT_PCM:
        samples = raw / PCM16_SCALE
    else:
        samples = np.clip(raw, -1.0, 1.0)
    return AudioClip(samples, rate)


def encode_wav(clip: AudioClip) -> bytes:
    """Encode a clip as mono 16-bit PCM WAVE bytes.

    Quantization is round(x * 32768) clamped to the int16 range, so a clip
    that has already been through one encode/decode cycle round-trips
    bit-exactly.
    """
    q = np.clip(np.rint(clip.samples * PCM16_SCALE), -32768, 32767).astype("<i2")
    body = q.tobytes()
    rate = clip.sample_rate_hz
    header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, _FMT_PCM, 1, rate, rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(body))
    return header + body


def read_wav(path) -> AudioClip:
    return decode_wav(Path(path).read_bytes())


def write_wav(path, clip: AudioClip) -> None:
    Path(path).write_bytes(encode_wav(clip))


def resample(clip: AudioClip, target_rate_hz: int) -> AudioClip:
    """Band-limited polyphase resampling to ``target_rate_hz``.

    Duration is preserved to within one output sample. Filter ringing can
    overshoot full scale slightly, so the output is clamped to [-1, 1].
    """
    if target_rate_hz <= 0:
        raise ValueError(f"target_rate_hz must be positive, got {target_rate_hz}")
    if target_rate_hz == clip.sample_rate_hz:
        return clip
    g = math.gcd(clip.sample_rate_hz, target_rate_hz)
    up, down = target_rate_hz // g, clip.sample_rate_hz // g
    out = resample_poly(clip.samples, up, down)
    return AudioClip(np.clip(out, -1.0, 1.0), target_rate_hz)


def segment(clip: AudioClip, segment_seconds: float = 10.0) -> list[AudioClip]:
    """Cut a clip into nonoverlapping fixed-length segments, in order.

    Returns floor(duration / segment_seconds) segments; the trailing
    remainder is discarded and no padding is ever inserted.
    """
    if segment_seconds <= 0:
        raise ValueError(f"segment_seconds must be positive, got {segment_seconds}")
    n = int(round(segment_seconds * clip.sample_rate_hz))
    if n < 1:
        raise ValueError("segment length is shorter than one sample")
    count = len(clip.samples) // n
    return [
        AudioClip(clip.samples[i * n : (i + 1) * n], clip.sample_rate_hz)
        for i in range(count)
    ]
