"""The classifier: five conv blocks, width-axis slicing, BLSTM, softmax head.

Each conv block is conv(same padding, stride 1) -> ReLU -> BatchNorm ->
2x2 max pool, in that order. Five pools take a 129x500 input to a
256x4x15 feature map; the residual height is flattened into the channel
axis (channel-major) so each of the 15 width positions becomes one
1024-dim time step for the bidirectional LSTM. The two directions' final
outputs are concatenated to a 512-dim vector feeding the class head.

A CNN-only baseline shares the identical conv stack (and, under the same
seed, identical initial conv parameters) but flattens the feature map
straight into the head.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormStats, LstmParams, Parameter, Tensor

DEFAULT_CONV_BLOCKS = ((7, 16), (5, 32), (3, 64), (3, 128), (3, 256))

_CHECKPOINT_MAGIC = b"LIDCKPT1"


@dataclass(frozen=True)
class CrnnConfig:
    """Architecture hyperparameters.

    ``relu_before_norm`` keeps the documented block order (ReLU ahead of
    BatchNorm); flip it for the conventional order in ablations. ``fusion``
    selects how the BLSTM outputs collapse to one vector: the final step of
    each direction (default) or the per-direction sequence mean.
    """

    num_classes: int = 4
    input_height: int = 129
    input_width: int = 500
    conv_blocks: tuple = DEFAULT_CONV_BLOCKS
    lstm_units: int = 256
    head_only: bool = False
    relu_before_norm: bool = True
    fusion: str = "last_step"

    def __post_init__(self):
        object.__setattr__(
            self, "conv_blocks", tuple((int(k), int(f)) for k, f in self.conv_blocks)
        )
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.fusion not in ("last_step", "time_mean"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if min(self.pooled_shape()) < 1:
            raise ValueError(
                f"input {self.input_height}x{self.input_width} pools to zero "
                f"after {len(self.conv_blocks)} blocks"
            )

    def pooled_shape(self, width: int | None = None) -> tuple[int, int]:
        """(height, width) of the feature map after all pooling stages."""
        h, w = self.input_height, self.input_width if width is None else width
        for _ in self.conv_blocks:
            h, w = h // 2, w // 2
        return h, w

    @property
    def feature_channels(self) -> int:
        return self.conv_blocks[-1][1]

    @property
    def step_dim(self) -> int:
        """Dimension of one time-step vector: channels x residual height."""
        return self.feature_channels * self.pooled_shape()[0]

    @property
    def fused_dim(self) -> int:
        return 2 * self.lstm_units

    @property
    def flatten_dim(self) -> int:
        h, w = self.pooled_shape()
        return self.feature_channels * h * w


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _lstm_params(rng, name, input_dim, hidden):
    bound = 1.0 / np.sqrt(hidden)
    wx = rng.uniform(-bound, bound, size=(input_dim, 4 * hidden)).astype(np.float32)
    wh = rng.uniform(-bound, bound, size=(hidden, 4 * hidden)).astype(np.float32)
    b = np.zeros(4 * hidden, dtype=np.float32)
    b[hidden : 2 * hidden] = 1.0  # forget-gate bias
    return LstmParams(
        Parameter(wx, f"{name}.wx"), Parameter(wh, f"{name}.wh"), Parameter(b, f"{name}.b")
    )


def collapse_and_slice(featmap: Tensor, channels: int, height: int) -> Tensor:
    """[N, C, Hr, T] feature map -> [T, N, C*Hr] step sequence.

    Channel and height axes are flattened together channel-major (vector
    index = c * Hr + h), so each width position becomes one time step.
    """
    n = featmap.data.shape[0]
    t_len = featmap.data.shape[3]
    seq = ad.permute(featmap, (3, 0, 1, 2))
    return ad.reshape(seq, (t_len, n, channels * height))


class CrnnModel:
    """Instantiated parameter set plus the forward pass."""

    def __init__(self, config: CrnnConfig, labels=None):
        if labels is None:
            labels = tuple(f"class{i}" for i in range(config.num_classes))
        labels = tuple(labels)
        if len(labels) != config.num_classes:
            raise ValueError(
                f"{len(labels)} labels for {config.num_classes} classes: {labels}"
            )
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate labels: {labels}")
        self.config = config
        self.labels = labels
        self.params: dict[str, Parameter] = {}
        self.bn_stats: dict[str, BatchNormStats] = {}
        self.lstm_fwd = None
        self.lstm_bwd = None

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, config: CrnnConfig, seed: int = 0, labels=None) -> "CrnnModel":
        """Seeded initialization.

        Separate seed streams per component guarantee that a CRNN and a
        CNN-only baseline built from the same seed share identical initial
        conv-stack parameters.
        """
        model = cls(config, labels)
        conv_rng = np.random.default_rng([seed, 0])
        lstm_rng = np.random.default_rng([seed, 1])
        head_rng = np.random.default_rng([seed, 2])

        in_ch = 1
        for i, (k, filters) in enumerate(config.conv_blocks, start=1):
            fan_in = in_ch * k * k
            model._add(Parameter(_kaiming_uniform(conv_rng, (filters, in_ch, k, k), fan_in),
                                 f"conv{i}.w"))
            model._add(Parameter(np.zeros(filters, dtype=np.float32), f"conv{i}.b"))
            model._add(Parameter(np.ones(filters, dtype=np.float32), f"bn{i}.gamma"))
            model._add(Parameter(np.zeros(filters, dtype=np.float32), f"bn{i}.beta"))
            model.bn_stats[f"bn{i}"] = BatchNormStats(filters)
            in_ch = filters

        if not config.head_only:
            model.lstm_fwd = _lstm_params(lstm_rng, "lstm_fwd", config.step_dim, config.lstm_units)
            model.lstm_bwd = _lstm_params(lstm_rng, "lstm_bwd", config.step_dim, config.lstm_units)
            for p in model._lstm_param_list():
                model.params[p.name] = p

        head_in = config.flatten_dim if config.head_only else config.fused_dim
        model._add(Parameter(
            _kaiming_uniform(head_rng, (head_in, config.num_classes), head_in), "head.w"))
        model._add(Parameter(np.zeros(config.num_classes, dtype=np.float32), "head.b"))
        return model

    def _add(self, p: Parameter) -> None:
        self.params[p.name] = p

    def _lstm_param_list(self):
        out = []
        for block in (self.lstm_fwd, self.lstm_bwd):
            if block is not None:
                out.extend([block.wx, block.wh, block.b])
        return out

    # -- forward ------------------------------------------------------------

    def _conv_stack(self, x: Tensor, training: bool) -> Tensor:
        cfg = self.config
        for i in range(1, len(cfg.conv_blocks) + 1):
            x = ad.conv2d(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            gamma, beta = self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"]
            if cfg.relu_before_norm:
                x = ad.relu(x)
                x = ad.batchnorm2d(x, gamma, beta, self.bn_stats[f"bn{i}"], training)
            else:
                x = ad.batchnorm2d(x, gamma, beta, self.bn_stats[f"bn{i}"], training)
                x = ad.relu(x)
            x = ad.maxpool2x2(x)
        return x

    def forward(self, images: np.ndarray, training: bool = False,
                internals: dict | None = None) -> Tensor:
        """Image batch -> logits.

        ``images`` is [N, H, W] or [N, 1, H, W], float in [0, 1]. The CRNN
        head accepts any width the conv stack pools to at least one step;
        the CNN baseline is fixed to the configured width by its flatten.
        """
        cfg = self.config
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 3:
            x = x[:, None, :, :]
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != cfg.input_height:
            raise ad.ShapeError(
                f"expected [N,1,{cfg.input_height},W] images, got {x.shape}"
            )
        n, width = x.shape[0], x.shape[3]
        featmap = self._conv_stack(Tensor(x), training)
        res_h, t_len = cfg.pooled_shape(width)
        if internals is not None:
            internals["featmap_shape"] = featmap.data.shape[1:]

        if cfg.head_only:
            if width != cfg.input_width:
                raise ad.ShapeError(
                    f"CNN baseline head is fixed to width {cfg.input_width}, got {width}"
                )
            flat = ad.reshape(featmap, (n, cfg.flatten_dim))
            logits = ad.dense(flat, self.params["head.w"], self.params["head.b"])
            if internals is not None:
                internals["flat_dim"] = flat.data.shape[1]
            return logits

        if t_len < 1:
            raise ad.ShapeError(f"width {width} pools to zero time steps")
        seq = collapse_and_slice(featmap, cfg.feature_channels, res_h)
        fwd = ad.lstm_sequence(seq, self.lstm_fwd, "forward")
        bwd = ad.lstm_sequence(seq, self.lstm_bwd, "backward")
        if cfg.fusion == "last_step":
            # final processed step of each direction: T-1 forward, 0 backward
            parts = [ad.select_step(fwd, t_len - 1), ad.select_step(bwd, 0)]
        else:
            parts = [ad.time_mean(fwd), ad.time_mean(bwd)]
        fused = ad.concat(parts, axis=1)
        if internals is not None:
            internals["sequence_shape"] = seq.data.shape
            internals["fused_dim"] = fused.data.shape[1]
        return ad.dense(fused, self.params["head.w"], self.params["head.b"])

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        return ad.softmax(self.forward(images, training=False).data)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.predict_proba(images).argmax(axis=1)

    # -- parameter bookkeeping ----------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def conv_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if n.startswith(("conv", "bn"))]

    def head_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if n.startswith("head")]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_snapshot(self) -> dict:
        """Deep copy of everything training mutates (for best-epoch rollback)."""
        return {
            "params": {n: p.data.copy() for n, p in self.params.items()},
            "moments": {
                n: (None if p.m is None else (p.m.copy(), p.v.copy()))
                for n, p in self.params.items()
            },
            "bn": {n: s.copy() for n, s in self.bn_stats.items()},
        }

    def load_snapshot(self, snap: dict) -> None:
        for n, p in self.params.items():
            p.data = snap["params"][n].copy()
            stored = snap["moments"][n]
            if stored is None:
                p.m = p.v = None
            else:
                p.m, p.v = stored[0].copy(), stored[1].copy()
        for n in self.bn_stats:
            self.bn_stats[n] = snap["bn"][n].copy()


def build_crnn(config: CrnnConfig, seed: int = 0, labels=None) -> CrnnModel:
    if config.head_only:
        raise ValueError("config.head_only is set; use build_cnn_baseline")
    return CrnnModel.build(config, seed, labels)


def build_cnn_baseline(config: CrnnConfig, seed: int = 0, labels=None) -> CrnnModel:
    """The controlled comparison: same conv stack, flatten head, no recurrence."""
    cfg = dataclasses.replace(config, head_only=True)
    return CrnnModel.build(cfg, seed, labels)


def extend_head(model: CrnnModel, new_num_classes: int, seed: int,
                new_labels=None) -> CrnnModel:
    """Widen the class head, keeping every other parameter bit-exactly.

    The head is freshly initialized at the new width and its optimizer
    moments reset; conv/BLSTM parameters (and their moments) carry over.
    """
    old_k = model.config.num_classes
    if new_num_classes <= old_k:
        raise ValueError(f"new class count {new_num_classes} must exceed current {old_k}")
    if new_labels is None:
        new_labels = tuple(f"class{i}" for i in range(old_k, new_num_classes))
    new_labels = tuple(new_labels)
    if len(new_labels) != new_num_classes - old_k:
        raise ValueError(
            f"need {new_num_classes - old_k} new labels, got {len(new_labels)}"
        )

    cfg = dataclasses.replace(model.config, num_classes=new_num_classes)
    out = CrnnModel(cfg, model.labels + new_labels)
    head_rng = np.random.default_rng([seed, 2])
    for name, p in model.params.items():
        if name.startswith("head"):
            continue
        dup = Parameter(p.data.copy(), name)
        if p.m is not None:
            dup.m, dup.v = p.m.copy(), p.v.copy()
        out.params[name] = dup
    out.bn_stats = {n: s.copy() for n, s in model.bn_stats.items()}
    if not cfg.head_only:
        out.lstm_fwd = LstmParams(out.params["lstm_fwd.wx"], out.params["lstm_fwd.wh"],
                                  out.params["lstm_fwd.b"])
        out.lstm_bwd = LstmParams(out.params["lstm_bwd.wx"], out.params["lstm_bwd.wh"],
                                  out.params["lstm_bwd.b"])
    head_in = cfg.flatten_dim if cfg.head_only else cfg.fused_dim
    out._add(Parameter(_kaiming_uniform(head_rng, (head_in, new_num_classes), head_in), "head.w"))
    out._add(Parameter(np.zeros(new_num_classes, dtype=np.float32), "head.b"))
    return out


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: 8-byte magic, uint32 header length, UTF-8 JSON header, then the raw
# little-endian bytes of every array in header order. The header carries the
# config, labels, and an array table of (name, kind, dtype, shape). Writing
# is fully deterministic, so identical models produce identical files.


def save_checkpoint(model: CrnnModel, path, extra: dict | None = None) -> None:
    arrays: list[tuple[str, str, np.ndarray]] = []
    for name, p in model.params.items():
        arrays.append((name, "param", p.data))
        if p.m is not None:
            arrays.append((name, "adam_m", p.m))
            arrays.append((name, "adam_v", p.v))
    for name, stats in model.bn_stats.items():
        arrays.append((name, "running_mean", stats.mean))
        arrays.append((name, "running_var", stats.var))

    header = {
        "format": 1,
        "config": dataclasses.asdict(model.config),
        "labels": list(model.labels),
        "arrays": [
            {"name": n, "kind": k, "dtype": a.dtype.name, "shape": list(a.shape)}
            for n, k, a in arrays
        ],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, _, a in arrays:
            fh.write(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> CrnnModel:
    raw = Path(path).read_bytes()
    if raw[:8] != _CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:8]!r})")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    cfg_dict = dict(header["config"])
    cfg_dict["conv_blocks"] = tuple(tuple(b) for b in cfg_dict["conv_blocks"])
    config = CrnnConfig(**cfg_dict)

    model = CrnnModel(config, tuple(header["labels"]))
    pos = 12 + hlen
    loaded: dict[tuple[str, str], np.ndarray] = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = dtype.itemsize * count
        arr = np.frombuffer(raw[pos : pos + nbytes], dtype=dtype).reshape(entry["shape"])
        loaded[(entry["name"], entry["kind"])] = arr.astype(entry["dtype"])
        pos += nbytes

    for (name, kind), arr in loaded.items():
        if kind == "param":
            model.params[name] = Parameter(arr.copy(), name)
    for (name, kind), arr in loaded.items():
        if kind == "adam_m":
            model.params[name].m = arr.copy()
        elif kind == "adam_v":
            model.params[name].v = arr.copy()
        elif kind == "running_mean":
            model.bn_stats.setdefault(name, BatchNormStats(len(arr))).mean = arr.copy()
        elif kind == "running_var":
            model.bn_stats.setdefault(name, BatchNormStats(len(arr))).var = arr.copy()

    if not config.head_only:
        model.lstm_fwd = LstmParams(model.params["lstm_fwd.wx"], model.params["lstm_fwd.wh"],
                                    model.params["lstm_fwd.b"])
        model.lstm_bwd = LstmParams(model.params["lstm_bwd.wx"], model.params["lstm_bwd.wh"],
                                    model.params["lstm_bwd.b"])
    return model
