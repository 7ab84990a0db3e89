"""Command-line entry point for the full pipeline.

Subcommands: synth, prepare, augment, train, finetune, extend, evaluate,
predict, noise-eval. Every run merges defaults, an optional JSON config
file, LIDKIT_* environment overrides, and flags (highest precedence), and
echoes the effective configuration as ``run_config.json`` next to its
outputs so any run can be reproduced from that file alone.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from . import crnn as crnn_mod
from . import dataset as ds
from . import spectrogram as sg
from . import train_eval as te
from .audio_io import WORKING_RATE_HZ, read_wav, resample, write_wav


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 2."""


ENV_PREFIX = "LIDKIT_"

DEFAULTS: dict = {
    "seed": 0,
    "profile": "full",  # full = 10 s segments (500 px); desk = 2 s (100 px)
    "segment_seconds": None,  # None: derived from profile (or checkpoint width)
    "clip_seconds": None,  # synth clip length; None: derived from profile
    "clips_per_language": 50,
    "spec_file": None,
    "languages": None,  # comma list filtering the spec file
    "pixels_per_second": 50,
    "window_size": 256,
    "db_floor": -80.0,
    "db_ceiling": 0.0,
    "workers": 1,
    "noise": "white",
    "snr_db": None,  # None: per-kind default
    "crackle_rate_hz": 2.0,
    "music_file": None,
    "arch": "crnn",
    "epochs": 20,
    "batch_size": 16,
    "learning_rate": 0.001,
    "sgd_learning_rate": 0.01,
    "momentum": 0.9,
    "patience": 5,
    "freeze_conv": False,
    "lstm_units": 256,
    "fusion": "last_step",
    "relu_before_norm": True,
}

_PROFILE_SECONDS = {"full": 10.0, "desk": 2.0}


def _load_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config keys {unknown}; known keys: {sorted(DEFAULTS)}")
    return raw


def _env_overrides() -> dict:
    found = {}
    for key in DEFAULTS:
        raw = os.environ.get(ENV_PREFIX + key.upper())
        if raw is None:
            continue
        try:
            found[key] = json.loads(raw)
        except json.JSONDecodeError:
            found[key] = raw  # bare strings are allowed unquoted
    return found


def effective_config(args) -> dict:
    """defaults < config file < environment < explicit flags."""
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        merged.update(_load_config_file(args.config))
    merged.update(_env_overrides())
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if merged["profile"] not in _PROFILE_SECONDS:
        raise UsageError(f"profile must be one of {sorted(_PROFILE_SECONDS)}")
    if merged["segment_seconds"] is None:
        merged["segment_seconds"] = _PROFILE_SECONDS[merged["profile"]]
    if merged["clip_seconds"] is None:
        merged["clip_seconds"] = _PROFILE_SECONDS[merged["profile"]]
    return merged


def _write_run_config(out_dir: Path, command: str, cfg: dict) -> None:
    payload = {"command": command, **{k: cfg[k] for k in sorted(cfg)}}
    (out_dir / "run_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _spect_config(cfg) -> sg.SpectrogramConfig:
    return sg.SpectrogramConfig(
        window_size=cfg["window_size"],
        pixels_per_second=cfg["pixels_per_second"],
        db_floor=cfg["db_floor"],
        db_ceiling=cfg["db_ceiling"],
    )


def _read_manifest(path):
    try:
        return ds.read_manifest(path)
    except (FileNotFoundError, ds.ManifestError) as exc:
        raise UsageError(str(exc)) from exc


def _load_checkpoint(path):
    try:
        return crnn_mod.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {path}") from exc


def _language_specs(cfg):
    if cfg["spec_file"]:
        try:
            specs = ds.load_language_specs(cfg["spec_file"])
        except FileNotFoundError as exc:
            raise UsageError(f"spec file not found: {cfg['spec_file']}") from exc
        except (ValueError, TypeError) as exc:
            raise UsageError(f"invalid language spec: {exc}") from exc
    else:
        specs = ds.default_language_specs()
    if cfg["languages"]:
        wanted = [name.strip() for name in str(cfg["languages"]).split(",")]
        by_name = {s.name: s for s in specs}
        missing = [n for n in wanted if n not in by_name]
        if missing:
            raise UsageError(f"languages {missing} not in spec file {sorted(by_name)}")
        specs = [by_name[n] for n in wanted]
    return specs


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = effective_config(args)
    out = _out_dir(args)
    specs = _language_specs(cfg)
    corpus = ds.synth_corpus(specs, cfg["clips_per_language"], cfg["clip_seconds"], cfg["seed"])
    entries = []
    counters: dict[str, int] = {}
    for clip, label in corpus:
        idx = counters.get(label, 0)
        counters[label] = idx + 1
        label_dir = out / label
        label_dir.mkdir(parents=True, exist_ok=True)
        wav_path = label_dir / f"{label}_{idx:04d}.wav"
        write_wav(wav_path, clip)
        entries.append(ds.ManifestEntry(wav_path, label))
    ds.write_manifest(out / "manifest.tsv", entries)
    _write_run_config(out, "synth", cfg)
    print(f"wrote {len(entries)} clips for {len(specs)} languages under {out}")
    return 0


def cmd_prepare(args) -> int:
    cfg = effective_config(args)
    out = _out_dir(args)
    entries = _read_manifest(args.manifest)
    result = ds.prepare_spectrograms(
        entries, out, cfg["segment_seconds"], _spect_config(cfg), workers=cfg["workers"]
    )
    ds.write_manifest(out / "manifest.tsv", result.entries)
    (out / "errors.json").write_text(
        json.dumps([{"path": p, "error": e} for p, e in result.errors], indent=2) + "\n",
        encoding="utf-8",
    )
    _write_run_config(out, "prepare", cfg)
    print(f"wrote {len(result.entries)} spectrograms ({len(result.errors)} sources skipped)")
    return 0


def cmd_augment(args) -> int:
    cfg = effective_config(args)
    out = _out_dir(args)
    entries = _read_manifest(args.manifest)
    kind = cfg["noise"]
    if kind not in aug.NOISE_KINDS:
        raise UsageError(f"--noise must be one of {aug.NOISE_KINDS}")
    snr = cfg["snr_db"]
    if snr is None:
        snr = {"white": aug.DEFAULT_WHITE_SNR_DB, "crackle": aug.DEFAULT_CRACKLE_SNR_DB,
               "music": aug.DEFAULT_MUSIC_SNR_DB}[kind]
    music = None
    if cfg["music_file"]:
        music = resample(read_wav(cfg["music_file"]), WORKING_RATE_HZ)
    written = []
    for i, entry in enumerate(entries):
        clip = resample(read_wav(entry.path), WORKING_RATE_HZ)
        spec = aug.NoiseSpec(kind, snr, cfg["crackle_rate_hz"], cfg["seed"] + i)
        bed = music
        if kind == "music" and bed is None:
            bed = aug.synthetic_music(clip.duration_seconds, clip.sample_rate_hz, spec.seed)
        noisy = aug.apply_noise(clip, spec, bed)
        label_dir = out / entry.label
        label_dir.mkdir(parents=True, exist_ok=True)
        wav_path = label_dir / f"{Path(entry.path).stem}_{kind}.wav"
        write_wav(wav_path, noisy)
        written.append(ds.ManifestEntry(wav_path, entry.label))
    ds.write_manifest(out / "manifest.tsv", written)
    _write_run_config(out, "augment", cfg)
    print(f"wrote {len(written)} {kind}-corrupted clips at {snr:g} dB SNR")
    return 0


def _train_common(args, model, cfg, optimizer: str, lr_key: str) -> int:
    out = _out_dir(args)
    train_entries = _read_manifest(args.train)
    val_entries = _read_manifest(args.val)
    tc = te.TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        optimizer=optimizer,
        learning_rate=cfg[lr_key],
        momentum=cfg["momentum"],
        seed=cfg["seed"],
        patience=cfg["patience"],
        checkpoint_dir=out,
        freeze_conv=cfg["freeze_conv"],
    )
    history = te.train(model, train_entries, val_entries, tc)
    _write_run_config(out, "finetune" if optimizer == "sgd" else "train", cfg)
    best = max(h["val_accuracy"] for h in history)
    print(f"{len(history)} epochs; best validation accuracy {best:.4f}; "
          f"checkpoint at {out / 'checkpoint.bin'}")
    return 0


def cmd_train(args) -> int:
    cfg = effective_config(args)
    train_entries = _read_manifest(args.train)
    labels = ds.labels_of(train_entries + _read_manifest(args.val))
    first = ds.load_image(train_entries[0].path)
    model_config = crnn_mod.CrnnConfig(
        num_classes=len(labels),
        input_width=first.shape[1],
        lstm_units=cfg["lstm_units"],
        fusion=cfg["fusion"],
        relu_before_norm=cfg["relu_before_norm"],
    )
    if cfg["arch"] == "cnn":
        model = crnn_mod.build_cnn_baseline(model_config, cfg["seed"], labels)
    elif cfg["arch"] == "crnn":
        model = crnn_mod.build_crnn(model_config, cfg["seed"], labels)
    else:
        raise UsageError(f"--arch must be crnn or cnn, got {cfg['arch']!r}")
    return _train_common(args, model, cfg, "adam", "learning_rate")


def cmd_finetune(args) -> int:
    cfg = effective_config(args)
    model = _load_checkpoint(args.checkpoint)
    return _train_common(args, model, cfg, "sgd", "sgd_learning_rate")


def cmd_extend(args) -> int:
    cfg = effective_config(args)
    out = _out_dir(args)
    model = _load_checkpoint(args.checkpoint)
    new_labels = [s.strip() for s in args.labels.split(",")] if args.labels else None
    try:
        wider = crnn_mod.extend_head(model, args.classes, cfg["seed"], new_labels)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    crnn_mod.save_checkpoint(wider, out / "checkpoint.bin",
                             extra={"extended_from": str(args.checkpoint)})
    _write_run_config(out, "extend", cfg)
    print(f"extended head {model.config.num_classes} -> {args.classes} classes; "
          f"labels {list(wider.labels)}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = effective_config(args)
    out = _out_dir(args)
    model = _load_checkpoint(args.checkpoint)
    report = te.evaluate(model, _read_manifest(args.manifest))
    (out / "report.json").write_text(
        json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out / "confusion.csv").write_text(report.confusion_csv(), encoding="utf-8")
    _write_run_config(out, "evaluate", cfg)
    print(report.table())
    return 0


def cmd_predict(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    for path in args.images:
        image = ds.load_image(path)
        probs = model.predict_proba(image[None, :, :].astype(np.float32) / 255.0)[0]
        record = {
            "path": str(path),
            "label": model.labels[int(probs.argmax())],
            "probabilities": {l: round(float(p), 6) for l, p in zip(model.labels, probs)},
        }
        print(json.dumps(record, sort_keys=True))
    return 0


def cmd_noise_eval(args) -> int:
    cfg = effective_config(args)
    out = _out_dir(args)
    model = _load_checkpoint(args.checkpoint)
    entries = _read_manifest(args.manifest)
    # segment length follows the checkpoint's input width unless overridden
    seconds = cfg["segment_seconds"]
    if args.segment_seconds is None and getattr(args, "profile", None) is None:
        seconds = model.config.input_width / cfg["pixels_per_second"]
    specs = {
        "white": aug.NoiseSpec("white", cfg["snr_db"] if cfg["snr_db"] is not None
                               else aug.DEFAULT_WHITE_SNR_DB, seed=cfg["seed"]),
        "crackle": aug.NoiseSpec("crackle", aug.DEFAULT_CRACKLE_SNR_DB,
                                 cfg["crackle_rate_hz"], seed=cfg["seed"]),
        "music": aug.NoiseSpec("music", aug.DEFAULT_MUSIC_SNR_DB, seed=cfg["seed"]),
    }
    music = None
    if cfg["music_file"]:
        music = resample(read_wav(cfg["music_file"]), WORKING_RATE_HZ)
    rows = te.noise_sweep(model, entries, seconds, specs, _spect_config(cfg), music)
    (out / "noise_report.json").write_text(
        json.dumps({k: r.as_dict() for k, r in rows.items()}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    _write_run_config(out, "noise-eval", cfg)
    print(te.noise_table(rows))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p: argparse.ArgumentParser, *keys: str) -> None:
    flag_types = {
        "seed": int, "clips_per_language": int, "workers": int, "epochs": int,
        "batch_size": int, "patience": int, "lstm_units": int,
        "window_size": int, "pixels_per_second": int,
        "segment_seconds": float, "clip_seconds": float, "snr_db": float,
        "crackle_rate_hz": float, "learning_rate": float, "sgd_learning_rate": float,
        "momentum": float, "db_floor": float, "db_ceiling": float,
    }
    p.add_argument("--config", help="JSON config file merged under the flags")
    for key in keys:
        flag = "--" + key.replace("_", "-")
        if key in ("freeze_conv",):
            p.add_argument(flag, action="store_const", const=True, dest=key, default=None)
        elif key == "profile":
            p.add_argument(flag, choices=sorted(_PROFILE_SECONDS), default=None)
        else:
            p.add_argument(flag, type=flag_types.get(key, str), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidkit",
        description="Spoken language identification on spectrogram images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic pseudo-language corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", dest="clips_per_language", type=int, default=None)
    p.add_argument("--seconds", dest="clip_seconds", type=float, default=None)
    _add_config_flags(p, "seed", "spec_file", "languages", "profile")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="render a WAV manifest to spectrogram PNGs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, "segment_seconds", "profile", "workers", "pixels_per_second",
                      "window_size", "db_floor", "db_ceiling")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("augment", help="corrupt a WAV manifest with noise")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, "noise", "snr_db", "crackle_rate_hz", "music_file", "seed")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train a model on spectrogram manifests")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, "arch", "epochs", "batch_size", "learning_rate", "momentum",
                      "patience", "seed", "lstm_units", "fusion", "relu_before_norm")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training a checkpoint with SGD")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, "epochs", "batch_size", "sgd_learning_rate", "momentum",
                      "patience", "seed", "freeze_conv")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("extend", help="widen a checkpoint's class head")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--labels", help="comma-separated names for the new classes")
    p.add_argument("--out", required=True)
    _add_config_flags(p, "seed")
    p.set_defaults(func=cmd_extend)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a PNG manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify spectrogram PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("noise-eval", help="noise-robustness table for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="WAV-level test manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, "snr_db", "crackle_rate_hz", "music_file", "seed",
                      "segment_seconds", "pixels_per_second", "window_size",
                      "db_floor", "db_ceiling")
    p.set_defaults(func=cmd_noise_eval)

    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
