"""Short-time Fourier transform and 8-bit grayscale spectrogram images.

A 10 s segment at the 10 kHz working rate renders to a 129 (frequency) by
500 (time) grid: 256-point Hann-windowed FFT frames give 129 bins, and a
hop of 200 samples gives 50 columns per second.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

FREQ_BINS = 129


class SpectrogramError(ValueError):
    """Input that cannot be rendered or read back as a spectrogram."""


@dataclass(frozen=True)
class SpectrogramConfig:
    """STFT framing and intensity-mapping parameters.

    The dB floor/ceiling of the grayscale mapping are exposed here: the
    mapping from linear magnitude to 8-bit intensity is a documented choice,
    not a law of nature.
    """

    window_size: int = 256
    pixels_per_second: int = 50
    db_floor: float = -80.0
    db_ceiling: float = 0.0
    magnitude_eps: float = 1e-10

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be at least 2")
        if self.pixels_per_second < 1:
            raise ValueError("pixels_per_second must be at least 1")
        if self.db_ceiling <= self.db_floor:
            raise ValueError("db_ceiling must exceed db_floor")

    @property
    def bins(self) -> int:
        return self.window_size // 2 + 1

    def hop(self, sample_rate_hz: int) -> int:
        if sample_rate_hz % self.pixels_per_second:
            raise SpectrogramError(
                f"sample rate {sample_rate_hz} is not divisible by "
                f"{self.pixels_per_second} px/s"
            )
        return sample_rate_hz // self.pixels_per_second


DEFAULT_CONFIG = SpectrogramConfig()


@dataclass(frozen=True)
class StftFrames:
    """Complex STFT frames, one row per hop position."""

    frames: np.ndarray  # [T, bins] complex
    window_size: int
    hop: int

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != self.window_size // 2 + 1:
            raise ValueError(
                f"expected [T, {self.window_size // 2 + 1}] frames, got {self.frames.shape}"
            )

    @property
    def magnitudes(self) -> np.ndarray:
        return np.abs(self.frames)


@dataclass(frozen=True)
class Spectrogram:
    """8-bit intensity grid, frequency rows (low frequencies at row 0) by time columns."""

    intensities: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.intensities)
        if arr.ndim != 2 or arr.shape[0] != FREQ_BINS:
            raise SpectrogramError(
                f"expected {FREQ_BINS} frequency rows, got shape {arr.shape}"
            )
        if arr.dtype != np.uint8:
            raise SpectrogramError(f"intensities must be uint8, got {arr.dtype}")
        object.__setattr__(self, "intensities", arr)

    @property
    def width(self) -> int:
        return self.intensities.shape[1]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window w[k] = 0.5 * (1 - cos(2 pi k / n))."""
    if n < 2:
        raise ValueError(f"window length must be at least 2, got {n}")
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def stft(clip, config: SpectrogramConfig = DEFAULT_CONFIG) -> StftFrames:
    """Centered Hann-windowed STFT of a clip at the working rate.

    Framing is centered: the signal is reflect-padded by window_size/2 on
    each side and frame t is the window starting at t * hop in the padded
    signal, so a clip of n samples yields exactly floor(n / hop) frames.
    """
    x = np.asarray(clip.samples, dtype=np.float64)
    hop = config.hop(clip.sample_rate_hz)
    n_frames = len(x) // hop
    half = config.window_size // 2
    if n_frames < 1 or len(x) <= half:
        raise SpectrogramError(
            f"clip of {len(x)} samples is too short for one {config.window_size}-sample window"
        )
    padded = np.pad(x, half, mode="reflect")
    starts = np.arange(n_frames) * hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, config.window_size)[starts]
    windowed = frames * hann_window(config.window_size)
    return StftFrames(np.fft.rfft(windowed, axis=1), config.window_size, hop)


def magnitude_to_grayscale(
    frames: StftFrames, config: SpectrogramConfig = DEFAULT_CONFIG
) -> Spectrogram:
    """Map STFT magnitudes onto the 8-bit grayscale range.

    Magnitudes are normalized by the window gain (sum(w)/2, the response of
    a full-scale bin-centered sine), converted to dB, and linearly mapped so
    db_floor -> 0 and db_ceiling -> 255. The mapping is monotone in |X|.
    """
    full_scale = hann_window(frames.window_size).sum() / 2.0
    mag = frames.magnitudes / full_scale
    db = 20.0 * np.log10(mag + config.magnitude_eps)
    span = config.db_ceiling - config.db_floor
    level = np.rint(255.0 * (db - config.db_floor) / span)
    grid = np.clip(level, 0, 255).astype(np.uint8)
    return Spectrogram(grid.T)  # [freq rows, time columns], row 0 = bin 0


def render_segment(clip, config: SpectrogramConfig = DEFAULT_CONFIG) -> Spectrogram:
    """stft + grayscale mapping for one working-rate segment."""
    return magnitude_to_grayscale(stft(clip, config), config)


def write_png(spec: Spectrogram, path) -> None:
    """Write as an 8-bit single-channel PNG, no alpha, no interlacing.

    Grid row 0 (the lowest frequency bin) is the top image row; the reader
    inverts nothing, so write/read round-trips bit-exactly.
    """
    Image.fromarray(spec.intensities, mode="L").save(Path(path), format="PNG")


def read_png(path) -> Spectrogram:
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise SpectrogramError(f"{path}: not a PNG file (format {img.format})")
            if img.mode != "L":
                raise SpectrogramError(
                    f"{path}: expected 8-bit grayscale, got mode {img.mode!r}"
                )
            arr = np.asarray(img, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise SpectrogramError(f"{path}: cannot decode image ({exc})") from exc
    if arr.ndim != 2 or arr.shape[0] != FREQ_BINS:
        raise SpectrogramError(
            f"{path}: expected {FREQ_BINS} rows, got image shape {arr.shape}"
        )
    return Spectrogram(arr)
