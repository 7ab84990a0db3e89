"""Corpus management: manifests, stratified splitting, spectrogram
preparation, batch iteration, and a synthetic pseudo-language generator.

Real multi-hundred-hour speech corpora are not available at desk scale, so
experiments run on generated "languages": each one is a Markov chain over
tone states, where a state emits a syllable of band-limited noise at one of
the language's formant centers. Class identity therefore lives both in
spectral content (which formants, how fast) and in temporal ordering (which
state follows which), giving the recurrent part of the classifier something
a purely convolutional readout cannot trivially recover.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import spectrogram as sg
from .audio_io import WORKING_RATE_HZ, AudioClip, read_wav, resample, segment

SPLIT_RATIOS = (0.70, 0.20, 0.10)
MIN_ENTRIES_PER_LABEL = 10


class ManifestError(ValueError):
    """Malformed manifest file or entry."""


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: str


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a line-oriented ``path<TAB>label`` manifest (UTF-8).

    Relative entry paths are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ManifestError(f"{path}:{lineno}: expected 'path<TAB>label', got {line!r}")
        raw, label = line.split("\t", 1)
        entry_path = Path(raw)
        if not entry_path.is_absolute():
            entry_path = base / entry_path
        entries.append(ManifestEntry(entry_path, label.strip()))
    return entries


def write_manifest(path, entries) -> None:
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for e in entries:
        p = Path(e.path).resolve()
        try:
            text = p.relative_to(base).as_posix()
        except ValueError:
            text = str(p)
        lines.append(f"{text}\t{e.label}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def labels_of(entries) -> list[str]:
    return sorted({e.label for e in entries})


# ---------------------------------------------------------------------------
# stratified split


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: int

    def all_entries(self) -> list:
        return [*self.train, *self.validation, *self.test]


def _largest_remainder(n: int, ratios=SPLIT_RATIOS) -> list[int]:
    """Integer shares of n by the given ratios; leftovers go to the largest
    fractional remainders, ties broken toward the earliest (train) bucket."""
    exact = [n * r for r in ratios]
    shares = [int(x) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: exact[i] - shares[i], reverse=True)
    for i in range(n - sum(shares)):
        shares[order[i]] += 1
    return shares


def split_manifest(entries, seed: int) -> DatasetSplit:
    """Per-label seeded shuffle, then a 70/20/10 cut.

    Splitting happens at the source-recording level, before segmentation,
    so no recording leaks segments across splits.
    """
    by_label: dict[str, list] = {}
    for e in entries:
        by_label.setdefault(e.label, []).append(e)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for label in sorted(by_label):
        group = by_label[label]
        if len(group) < MIN_ENTRIES_PER_LABEL:
            raise ValueError(
                f"label {label!r} has only {len(group)} entries; "
                f"need at least {MIN_ENTRIES_PER_LABEL} to split 70/20/10"
            )
        order = rng.permutation(len(group))
        shuffled = [group[i] for i in order]
        n_train, n_val, _ = _largest_remainder(len(group))
        train.extend(shuffled[:n_train])
        val.extend(shuffled[n_train : n_train + n_val])
        test.extend(shuffled[n_train + n_val :])
    return DatasetSplit(train, val, test, seed)


# ---------------------------------------------------------------------------
# synthetic pseudo-languages


@dataclass(frozen=True)
class SyntheticLanguageSpec:
    """Generative recipe for one pseudo-language.

    ``transition_matrix[i][j]`` is the probability that a syllable in tone
    state i is followed by one in state j; states map one-to-one onto
    ``formant_centers_hz``.
    """

    name: str
    formant_centers_hz: tuple
    syllable_rate_hz: float
    transition_matrix: tuple
    formant_bandwidth_hz: float = 120.0

    def __post_init__(self):
        centers = tuple(float(f) for f in self.formant_centers_hz)
        object.__setattr__(self, "formant_centers_hz", centers)
        matrix = tuple(tuple(float(p) for p in row) for row in self.transition_matrix)
        object.__setattr__(self, "transition_matrix", matrix)
        k = len(centers)
        if not 2 <= k <= 3:
            raise ValueError(f"{self.name}: need 2-3 formant centers, got {k}")
        if any(not 0 < f < 5000 for f in centers):
            raise ValueError(f"{self.name}: formant centers must lie in (0, 5000) Hz")
        if self.syllable_rate_hz <= 0:
            raise ValueError(f"{self.name}: syllable_rate_hz must be positive")
        if len(matrix) != k or any(len(row) != k for row in matrix):
            raise ValueError(f"{self.name}: transition matrix must be {k}x{k}")
        for i, row in enumerate(matrix):
            if any(p < 0 for p in row) or abs(sum(row) - 1.0) > 1e-9:
                raise ValueError(f"{self.name}: transition row {i} is not stochastic: {row}")

    @property
    def num_states(self) -> int:
        return len(self.formant_centers_hz)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "formant_centers_hz": list(self.formant_centers_hz),
            "syllable_rate_hz": self.syllable_rate_hz,
            "transition_matrix": [list(r) for r in self.transition_matrix],
            "formant_bandwidth_hz": self.formant_bandwidth_hz,
        }


def load_language_specs(path) -> list[SyntheticLanguageSpec]:
    """Read a JSON array of language spec objects."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ValueError(f"{path}: expected a JSON array of language specs")
    return [SyntheticLanguageSpec(**obj) for obj in raw]


def default_language_specs() -> list[SyntheticLanguageSpec]:
    """The packaged six languages: four base plus two extension."""
    with resources.files("lidkit.data").joinpath("default_languages.json").open(
        "r", encoding="utf-8"
    ) as fh:
        return [SyntheticLanguageSpec(**obj) for obj in json.load(fh)]


def _band_noise(rng, n: int, rate: int, center: float, bandwidth: float) -> np.ndarray:
    """Unit-RMS Gaussian noise spectrally shaped to a band around center."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    spec *= np.exp(-0.5 * ((freqs - center) / bandwidth) ** 2)
    shaped = np.fft.irfft(spec, n)
    rms = np.sqrt(np.mean(shaped**2))
    return shaped / rms if rms > 0 else shaped


def synth_clip(spec: SyntheticLanguageSpec, seconds: float, rng,
               sample_rate_hz: int = WORKING_RATE_HZ) -> AudioClip:
    """One clip: a seeded random walk over the spec's tone states.

    Syllable durations are jittered +-25% around 1/syllable_rate so state
    boundaries drift rather than falling on a fixed grid, and each syllable
    gets a raised-cosine onset/offset and its own loudness.
    """
    n = int(round(seconds * sample_rate_hz))
    matrix = np.asarray(spec.transition_matrix)
    base_len = sample_rate_hz / spec.syllable_rate_hz
    samples = np.zeros(n)
    state = int(rng.integers(spec.num_states))
    pos = 0
    while pos < n:
        length = int(round(base_len * rng.uniform(0.75, 1.25)))
        length = max(16, min(length, n - pos))
        syllable = _band_noise(rng, length, sample_rate_hz,
                               spec.formant_centers_hz[state], spec.formant_bandwidth_hz)
        ramp = max(2, int(0.15 * length))
        env = np.ones(length)
        fade = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
        env[:ramp] = fade
        env[-ramp:] = fade[::-1]
        samples[pos : pos + length] = syllable * env * rng.uniform(0.6, 1.0)
        state = int(rng.choice(spec.num_states, p=matrix[state]))
        pos += length
    rms = np.sqrt(np.mean(samples**2))
    peak = np.abs(samples).max()
    samples *= min(0.15 / rms, 0.95 / peak)
    return AudioClip(samples, sample_rate_hz)


def synth_corpus(specs, clips_per_language: int, clip_seconds: float, seed: int,
                 sample_rate_hz: int = WORKING_RATE_HZ) -> list[tuple[AudioClip, str]]:
    """Generate ``clips_per_language`` clips for every spec.

    Each clip is deterministic in (seed, language index, clip index) alone,
    so regenerating a corpus, or a larger one, reproduces earlier clips
    bit-exactly.
    """
    specs = list(specs)
    if len(specs) < 2:
        raise ValueError("need at least 2 language specs")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"duplicate language spec names: {dup}")
    recipes = {(s.formant_centers_hz, s.syllable_rate_hz, s.transition_matrix) for s in specs}
    if len(recipes) != len(specs):
        raise ValueError("language specs must have pairwise distinct parameters")

    corpus = []
    for lang_idx, spec in enumerate(specs):
        for clip_idx in range(clips_per_language):
            rng = np.random.default_rng([seed, lang_idx, clip_idx])
            corpus.append((synth_clip(spec, clip_seconds, rng, sample_rate_hz), spec.name))
    return corpus


# ---------------------------------------------------------------------------
# spectrogram preparation


@dataclass
class PrepareResult:
    entries: list = field(default_factory=list)
    errors: list = field(default_factory=list)  # (source path, message)


def _prepare_one(entry: ManifestEntry, out_dir: Path, segment_seconds: float,
                 config: sg.SpectrogramConfig):
    clip = resample(read_wav(entry.path), WORKING_RATE_HZ)
    label_dir = out_dir / entry.label
    label_dir.mkdir(parents=True, exist_ok=True)
    produced = []
    for idx, piece in enumerate(segment(clip, segment_seconds)):
        png_path = label_dir / f"{Path(entry.path).stem}_{idx}.png"
        sg.write_png(sg.render_segment(piece, config), png_path)
        produced.append(ManifestEntry(png_path, entry.label))
    return produced


def prepare_spectrograms(entries, out_dir, segment_seconds: float = 10.0,
                         config: sg.SpectrogramConfig = sg.DEFAULT_CONFIG,
                         workers: int = 1) -> PrepareResult:
    """Decode -> resample -> segment -> render -> PNG for every WAV entry.

    Undecodable or too-short sources are recorded in the error report and
    processing continues; producing nothing at all is an error. Output
    layout is ``out_dir/<label>/<source-stem>_<segment-index>.png``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = PrepareResult()

    def run(entry):
        try:
            return entry, _prepare_one(entry, out_dir, segment_seconds, config), None
        except Exception as exc:  # noqa: BLE001 - per-file isolation is the contract
            return entry, [], f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, entries))
    else:
        outcomes = [run(e) for e in entries]

    for entry, produced, error in outcomes:
        if error is not None:
            result.errors.append((str(entry.path), error))
        elif not produced:
            result.errors.append(
                (str(entry.path), f"shorter than one {segment_seconds:g} s segment; skipped")
            )
        result.entries.extend(produced)

    if not result.entries:
        raise RuntimeError(
            f"no spectrograms produced from {len(list(entries))} sources "
            f"(all failed or shorter than {segment_seconds:g} s)"
        )
    return result


# ---------------------------------------------------------------------------
# batching


def load_image(path) -> np.ndarray:
    """One PNG as a [129, W] uint8 array."""
    try:
        return sg.read_png(path).intensities
    except (OSError, sg.SpectrogramError) as exc:
        raise ManifestError(f"cannot read image {path}: {exc}") from exc


def epoch_order(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    """Seeded shuffle for one epoch; the effective seed is seed + epoch."""
    return np.random.default_rng(shuffle_seed + epoch).permutation(n)


def batch_iter(entries, batch_size: int, shuffle_seed: int, epoch: int = 0):
    """Yield (images, labels) batches over one epoch.

    Images come out as float32 [N, 1, 129, W] scaled to [0, 1]; labels are
    tuples of label strings. The final partial batch is yielded, not
    dropped.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be at least 1, got {batch_size}")
    entries = list(entries)
    order = epoch_order(len(entries), shuffle_seed, epoch)
    for start in range(0, len(entries), batch_size):
        chunk = [entries[i] for i in order[start : start + batch_size]]
        images = np.stack([load_image(e.path) for e in chunk])
        x = images.astype(np.float32)[:, None, :, :] / 255.0
        yield x, tuple(e.label for e in chunk)
