"""Audio-domain noise augmentation: white noise, crackle bursts, background music.

Noise is mixed into the waveform before spectrogram rendering. All three
corruptions target a signal-to-noise ratio measured over the whole clip,
are deterministic under a fixed seed, and hard-clip the result to [-1, 1]
(mimicking recording saturation rather than renormalizing).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .audio_io import AudioClip

NOISE_KINDS = ("white", "crackle", "music")

# The source material gives no SNR levels; these defaults are choices.
DEFAULT_WHITE_SNR_DB = 10.0
DEFAULT_CRACKLE_SNR_DB = 10.0
DEFAULT_CRACKLE_RATE_HZ = 2.0
DEFAULT_MUSIC_SNR_DB = 6.0


@dataclass(frozen=True)
class NoiseSpec:
    """One noise condition for evaluation or training-time corruption."""

    kind: str
    snr_db: float = 10.0
    crackle_rate_hz: float = DEFAULT_CRACKLE_RATE_HZ
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError(f"snr_db must be finite or +inf, got {self.snr_db}")
        if self.kind == "crackle" and self.crackle_rate_hz <= 0:
            raise ValueError(f"crackle_rate_hz must be positive, got {self.crackle_rate_hz}")


def signal_power(samples: np.ndarray) -> float:
    return float(np.mean(np.square(samples))) if len(samples) else 0.0


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    """SNR of the additive difference between two aligned sample buffers."""
    return 10.0 * math.log10(signal_power(clean) / signal_power(noisy - clean))


def _require_nonsilent(clip: AudioClip, what: str) -> float:
    power = signal_power(clip.samples)
    if power <= 0.0:
        raise ValueError(f"{what} is silent; SNR targeting is undefined")
    return power


def _mix(clip: AudioClip, noise: np.ndarray, snr_db: float) -> AudioClip:
    """Scale a noise track to the target SNR, add, and hard-clip."""
    p_signal = _require_nonsilent(clip, "input clip")
    p_noise = signal_power(noise)
    if p_noise <= 0.0:
        raise ValueError("noise track is silent; cannot scale to a finite SNR")
    gain = math.sqrt(p_signal / (10.0 ** (snr_db / 10.0)) / p_noise)
    return AudioClip(np.clip(clip.samples + gain * noise, -1.0, 1.0), clip.sample_rate_hz)


def add_white_noise(clip: AudioClip, snr_db: float, seed: int) -> AudioClip:
    """Add zero-mean Gaussian noise at the requested SNR."""
    if snr_db == math.inf:
        return clip
    rng = np.random.default_rng(seed)
    return _mix(clip, rng.standard_normal(len(clip.samples)), snr_db)


def crackle_track(n: int, sample_rate_hz: int, rate_hz: float, seed: int) -> np.ndarray:
    """Noise-only crackle: heavy-tailed bursts at period 1/rate with +-10% jitter.

    Bursts are 5-20 ms of Student-t noise under a Hann envelope, centered at
    (k + 0.5) / rate with jitter of up to 10% of the period, one per full
    period inside the clip.
    """
    rng = np.random.default_rng(seed)
    period = sample_rate_hz / rate_hz
    count = int(n / period)
    track = np.zeros(n)
    for k in range(count):
        center = (k + 0.5) * period + rng.uniform(-0.1, 0.1) * period
        length = int(rng.uniform(0.005, 0.020) * sample_rate_hz)
        burst = rng.standard_t(df=3, size=length)
        burst *= 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(length) / length))
        start = int(round(center - length / 2))
        lo, hi = max(start, 0), min(start + length, n)
        track[lo:hi] += burst[lo - start : hi - start]
    return track


def add_crackle(clip: AudioClip, rate_hz: float, snr_db: float, seed: int) -> AudioClip:
    """Add periodic impulsive bursts (analog-telephony style crackle)."""
    if rate_hz <= 0:
        raise ValueError(f"rate_hz must be positive, got {rate_hz}")
    if snr_db == math.inf:
        return clip
    track = crackle_track(len(clip.samples), clip.sample_rate_hz, rate_hz, seed)
    return _mix(clip, track, snr_db)


def mix_background(clip: AudioClip, music: AudioClip, snr_db: float) -> AudioClip:
    """Mix a music bed under the clip at the requested speech-to-music ratio.

    Music shorter than the clip is looped seamlessly; longer music is
    truncated. Output length always equals the clip length.
    """
    if snr_db == math.inf:
        return clip
    if music.sample_rate_hz != clip.sample_rate_hz:
        raise ValueError(
            f"music rate {music.sample_rate_hz} != clip rate {clip.sample_rate_hz}"
        )
    if len(music.samples) == 0:
        raise ValueError("music clip is empty")
    bed = np.resize(music.samples, len(clip.samples))
    return _mix(clip, bed, snr_db)


def synthetic_music(
    seconds: float, sample_rate_hz: int = 10_000, seed: int = 0
) -> AudioClip:
    """A deterministic music-like bed: a pentatonic arpeggio over a bass line.

    Stands in for real background-music recordings when none are supplied.
    """
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    scale = 220.0 * 2.0 ** (np.array([0, 2, 4, 7, 9, 12]) / 12.0)
    note_len = int(0.25 * sample_rate_hz)
    melody = np.zeros(n)
    degree = rng.integers(len(scale))
    for start in range(0, n, note_len):
        degree = int(np.clip(degree + rng.integers(-2, 3), 0, len(scale) - 1))
        f0 = scale[degree]
        seg = t[start : start + note_len]
        tone = np.zeros(len(seg))
        for harmonic, amp in ((1, 1.0), (2, 0.5), (3, 0.25)):
            tone += amp * np.sin(2.0 * np.pi * f0 * harmonic * seg)
        env = np.minimum(1.0, np.arange(len(seg)) / (0.02 * sample_rate_hz))
        env *= np.exp(-3.0 * np.arange(len(seg)) / note_len)
        melody[start : start + note_len] = tone * env
    bass = 0.4 * np.sin(2.0 * np.pi * 110.0 * t)
    music = melody + bass
    music *= 0.9 / np.max(np.abs(music))
    return AudioClip(music, sample_rate_hz)


def apply_noise(clip: AudioClip, spec: NoiseSpec, music: AudioClip | None = None) -> AudioClip:
    """Apply one noise condition to a clip."""
    if spec.kind == "white":
        return add_white_noise(clip, spec.snr_db, spec.seed)
    if spec.kind == "crackle":
        return add_crackle(clip, spec.crackle_rate_hz, spec.snr_db, spec.seed)
    if music is None:
        music = synthetic_music(clip.duration_seconds, clip.sample_rate_hz, spec.seed)
    return mix_background(clip, music, spec.snr_db)
