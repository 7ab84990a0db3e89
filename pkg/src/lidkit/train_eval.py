"""Training loop, SGD fine-tuning, and the evaluation metrics.

Training is Adam by default and plain/momentum SGD for fine-tuning. After
every epoch the validation accuracy is measured in inference mode and the
best-validation state is retained; evaluation reports accuracy, per-class
precision/recall/F1, macro-F1, and the confusion matrix (rows = true class,
columns = predicted).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import augment as aug
from . import crnn as crnn_mod
from . import dataset as ds
from . import spectrogram as sg
from .audio_io import WORKING_RATE_HZ, read_wav, resample, segment
from .autodiff import Adam, Sgd, Tape, softmax_cross_entropy, zero_grad


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9  # SGD only
    seed: int = 0
    patience: int | None = None  # epochs without val improvement tolerated; None = run all
    checkpoint_dir: Path | None = None
    freeze_conv: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.patience is not None and self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class EvalReport:
    labels: tuple
    confusion: np.ndarray  # [K, K] counts, rows = true, cols = predicted
    accuracy: float
    precision: tuple
    recall: tuple
    f1: tuple
    macro_f1: float
    total: int

    def per_class(self) -> dict:
        return {
            label: {
                "precision": self.precision[i],
                "recall": self.recall[i],
                "f1": self.f1[i],
                "support": int(self.confusion[i].sum()),
            }
            for i, label in enumerate(self.labels)
        }

    def as_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class": self.per_class(),
            "confusion": self.confusion.tolist(),
            "total": self.total,
        }

    def table(self) -> str:
        rows = [f"{'class':<12}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}"]
        for i, label in enumerate(self.labels):
            rows.append(
                f"{label:<12}{self.precision[i]:>10.4f}{self.recall[i]:>10.4f}"
                f"{self.f1[i]:>10.4f}{int(self.confusion[i].sum()):>9d}"
            )
        rows.append(f"accuracy {self.accuracy:.4f}   macro-F1 {self.macro_f1:.4f}   n={self.total}")
        return "\n".join(rows)

    def confusion_csv(self) -> str:
        lines = ["true\\predicted," + ",".join(self.labels)]
        for i, label in enumerate(self.labels):
            lines.append(label + "," + ",".join(str(int(v)) for v in self.confusion[i]))
        return "\n".join(lines) + "\n"


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def report_from_confusion(labels, cm: np.ndarray) -> EvalReport:
    """Derive all metrics from a confusion matrix.

    A class never predicted gets precision 0, a class absent from the truth
    gets recall 0, and F1 is 0 whenever precision + recall is 0.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(cm).astype(np.float64)
    col = cm.sum(axis=0).astype(np.float64)
    row = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, col, out=np.zeros_like(diag), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros_like(diag), where=row > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(diag), where=pr > 0)
    return EvalReport(
        labels=tuple(labels),
        confusion=cm,
        accuracy=float(diag.sum() / total),
        precision=tuple(precision.tolist()),
        recall=tuple(recall.tolist()),
        f1=tuple(f1.tolist()),
        macro_f1=float(f1.mean()),
        total=total,
    )


# ---------------------------------------------------------------------------
# data plumbing shared by train/evaluate


def _label_indices(model, labels) -> np.ndarray:
    index = {label: i for i, label in enumerate(model.labels)}
    unknown = sorted({l for l in labels if l not in index})
    if unknown:
        raise ValueError(f"labels {unknown} not in model classes {list(model.labels)}")
    return np.array([index[l] for l in labels], dtype=np.int64)


def _load_split(model, entries):
    images = np.stack([ds.load_image(e.path) for e in entries])
    y = _label_indices(model, [e.label for e in entries])
    return images, y


def _predict_all(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    preds = []
    for start in range(0, len(images), batch_size):
        x = images[start : start + batch_size].astype(np.float32)[:, None, :, :] / 255.0
        preds.append(model.predict(x))
    return np.concatenate(preds)


def evaluate_arrays(model, images: np.ndarray, y_true: np.ndarray) -> EvalReport:
    if len(images) == 0:
        raise ValueError("nothing to evaluate")
    y_pred = _predict_all(model, images)
    cm = confusion_matrix(y_true, y_pred, len(model.labels))
    return report_from_confusion(model.labels, cm)


def evaluate(model, entries) -> EvalReport:
    """Segment-level evaluation of a manifest of spectrogram PNGs."""
    entries = list(entries)
    if not entries:
        raise ValueError("empty evaluation manifest")
    images, y = _load_split(model, entries)
    return evaluate_arrays(model, images, y)


# ---------------------------------------------------------------------------
# training


def train(model, train_entries, val_entries, config: TrainConfig,
          on_epoch_end=None) -> list[dict]:
    """Train in place; returns per-epoch history.

    Each epoch runs seeded shuffled batches (epoch seed = config.seed +
    epoch), cross-entropy forward/backward, and an optimizer step per batch,
    then measures validation accuracy in inference mode. The best-validation
    parameter state is restored at the end, and saved to
    ``config.checkpoint_dir`` when set. Deterministic for a fixed seed and
    thread count.
    """
    train_entries, val_entries = list(train_entries), list(val_entries)
    if not train_entries or not val_entries:
        raise ValueError("train and validation manifests must be nonempty")
    images, y_all = _load_split(model, train_entries)
    val_images, val_y = _load_split(model, val_entries)

    if config.freeze_conv:
        trainable = [p for p in model.parameters() if not p.name.startswith(("conv", "bn"))]
    else:
        trainable = model.parameters()
    if config.optimizer == "adam":
        opt = Adam(trainable, lr=config.learning_rate)
    else:
        opt = Sgd(trainable, lr=config.learning_rate, momentum=config.momentum)

    history: list[dict] = []
    best = {"accuracy": -1.0, "epoch": -1, "state": None}
    stale = 0
    for epoch in range(config.epochs):
        order = ds.epoch_order(len(train_entries), config.seed, epoch)
        loss_sum = 0.0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            take = order[start : start + config.batch_size]
            x = images[take].astype(np.float32)[:, None, :, :] / 255.0
            y = y_all[take]
            with Tape() as tape:
                logits = model.forward(x, training=True)
                loss = softmax_cross_entropy(logits, y)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise RuntimeError(
                    f"non-finite loss {loss_value} at epoch {epoch}, batch {b}"
                )
            zero_grad(trainable)
            tape.backward(loss)
            opt.step()
            loss_sum += loss_value * len(take)

        val_report = evaluate_arrays(model, val_images, val_y)
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / len(train_entries),
            "val_accuracy": val_report.accuracy,
        }
        history.append(row)
        if val_report.accuracy > best["accuracy"]:
            best = {"accuracy": val_report.accuracy, "epoch": epoch,
                    "state": model.state_snapshot()}
            stale = 0
        else:
            stale += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, history)
        if config.patience is not None and stale > config.patience:
            break

    if best["state"] is not None:
        model.load_snapshot(best["state"])
    if config.checkpoint_dir is not None:
        out = Path(config.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        crnn_mod.save_checkpoint(
            model, out / "checkpoint.bin",
            extra={"best_epoch": best["epoch"], "best_val_accuracy": best["accuracy"]},
        )
        (out / "history.json").write_text(
            json.dumps(history, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return history


def fine_tune(model, train_entries, val_entries, config: TrainConfig,
              on_epoch_end=None) -> list[dict]:
    """SGD continuation of a previously trained model.

    ``config.freeze_conv`` pins the convolutional stack so only the
    recurrent part and the (possibly freshly widened) head move.
    """
    if config.optimizer != "sgd":
        raise ValueError("fine_tune uses stochastic gradient descent; set optimizer='sgd'")
    return train(model, train_entries, val_entries, config, on_epoch_end)


# ---------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class ArchitectureComparison:
    cnn_report: EvalReport
    crnn_report: EvalReport

    @property
    def accuracy_delta(self) -> float:
        return self.crnn_report.accuracy - self.cnn_report.accuracy


def compare_architectures(model_config, split: ds.DatasetSplit, config: TrainConfig,
                          seed: int = 0) -> ArchitectureComparison:
    """Train the CNN baseline and the CRNN under identical seeds and budgets.

    Both models share identical initial conv parameters and see identical
    batch orderings; they differ only after the feature map.
    """
    labels = ds.labels_of(split.all_entries())
    reports = {}
    for arch in ("cnn", "crnn"):
        if arch == "cnn":
            model = crnn_mod.build_cnn_baseline(model_config, seed, labels)
        else:
            model = crnn_mod.build_crnn(model_config, seed, labels)
        train(model, split.train, split.validation, config)
        reports[arch] = evaluate(model, split.test)
    return ArchitectureComparison(reports["cnn"], reports["crnn"])


NOISE_ROW_ORDER = ("no_noise", "white", "crackle", "music")


def render_wav_entries(entries, segment_seconds: float,
                       config: sg.SpectrogramConfig = sg.DEFAULT_CONFIG,
                       noise: aug.NoiseSpec | None = None,
                       music=None):
    """WAV manifest -> (images, labels), optionally corrupting the audio
    before spectrogram rendering. Noise seeds derive from the spec seed and
    the entry index, so the sweep is reproducible."""
    images, labels = [], []
    for i, entry in enumerate(entries):
        clip = resample(read_wav(entry.path), WORKING_RATE_HZ)
        if noise is not None:
            per_clip = dataclasses.replace(noise, seed=noise.seed + i)
            clip = aug.apply_noise(clip, per_clip, music)
        for piece in segment(clip, segment_seconds):
            images.append(sg.render_segment(piece, config).intensities)
            labels.append(entry.label)
    if not images:
        raise ValueError(f"no segments of {segment_seconds:g} s in the WAV manifest")
    return np.stack(images), labels


def noise_sweep(model, wav_entries, segment_seconds: float,
                specs: dict | None = None,
                config: sg.SpectrogramConfig = sg.DEFAULT_CONFIG,
                music=None) -> dict[str, EvalReport]:
    """Evaluate a clean-trained model under each noise condition.

    Returns one report per row, keyed and ordered as no_noise, white,
    crackle, music. ``specs`` may override the default noise parameters
    (keys white/crackle/music).
    """
    wav_entries = list(wav_entries)
    if specs is None:
        specs = {
            "white": aug.NoiseSpec("white", aug.DEFAULT_WHITE_SNR_DB),
            "crackle": aug.NoiseSpec("crackle", aug.DEFAULT_CRACKLE_SNR_DB),
            "music": aug.NoiseSpec("music", aug.DEFAULT_MUSIC_SNR_DB),
        }
    rows: dict[str, EvalReport] = {}
    for name in NOISE_ROW_ORDER:
        noise = None if name == "no_noise" else specs[name]
        images, labels = render_wav_entries(wav_entries, segment_seconds, config, noise, music)
        rows[name] = evaluate_arrays(model, images, _label_indices(model, labels))
    return rows


def noise_table(rows: dict[str, EvalReport]) -> str:
    display = {
        "no_noise": "No Noise",
        "white": "White Noise",
        "crackle": "Crackling Noise",
        "music": "Background Music",
    }
    lines = [f"{'Dataset':<18}{'Accuracy':>10}{'F1 Score':>10}"]
    for key in NOISE_ROW_ORDER:
        if key in rows:
            r = rows[key]
            lines.append(f"{display[key]:<18}{r.accuracy:>10.2f}{r.macro_f1:>10.2f}")
    return "\n".join(lines)
