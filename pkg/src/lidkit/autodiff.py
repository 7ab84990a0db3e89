"""Dense-tensor reverse-mode autodiff with exactly the operator set the
classifier needs, plus Adam and SGD update rules.

Forward ops record a backward closure onto the active :class:`Tape` whenever
any input is tracked. ``Tape.backward`` replays the closures in exact reverse
execution order, accumulating (+=) gradients into the inputs. There is no
broadcasting engine and no general graph machinery; every operator has a
hand-written backward rule, which keeps the core small enough to audit and to
check against finite differences.

A model instance (parameters plus tape) is confined to one training thread;
running without a tape performs no recording and is safe for concurrent
readers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as _sigmoid


class ShapeError(ValueError):
    """Operands whose shapes cannot be combined by the requested op."""


class Tensor:
    """N-dimensional value with an optional gradient buffer.

    Floating-point data keeps its dtype (training runs in float32, gradient
    checks in float64); anything else is cast to float32.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.data.shape}, grad={self.grad is not None})"


class Parameter(Tensor):
    """Trainable tensor with a name and lazily allocated optimizer slots."""

    __slots__ = ("name", "m", "v", "velocity")

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = None  # Adam first moment
        self.v = None  # Adam second moment
        self.velocity = None  # SGD momentum

    def reset_optimizer_state(self) -> None:
        self.m = self.v = self.velocity = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


_TAPE_STACK: list["Tape"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed ops; backward replays them in reverse.

    Use as a context manager around the forward pass:

        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """

    def __init__(self):
        self._steps: list[tuple[Tensor, object]] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def record(self, out: Tensor, backward_fn) -> None:
        self._steps.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and propagate through the record.

        Grad buffers of intermediate outputs are cleared first, so repeated
        backward passes (with parameter grads zeroed in between) produce
        identical gradients.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        for out, _ in self._steps:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for _, fn in reversed(self._steps):
            fn()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _tracking(*tensors: Tensor):
    """The active tape, if any input wants gradients; else None."""
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        return tape
    return None


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Same-padded patch matrix [N*H*W, C*kh*kw] for stride-1 convolution."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)


def _conv_same(x: np.ndarray, w: np.ndarray):
    """Stride-1 same-padding cross-correlation. Returns (y, cols)."""
    n, _, h, wd = x.shape
    f, _, kh, kw = w.shape
    cols = _im2col(x, kh, kw)
    y = (cols @ w.reshape(f, -1).T).reshape(n, h, wd, f).transpose(0, 3, 1, 2)
    return y, cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """2-D cross-correlation plus bias, stride 1, "same" zero padding.

    x: [N, C, H, W], weight: [F, C, kh, kw] with odd kh/kw, bias: [F].
    Output spatial dims equal input dims.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv2d wants 4-d input and weight, got {x.data.shape} and {weight.data.shape}"
        )
    n, c, h, w = x.data.shape
    f, cw, kh, kw = weight.data.shape
    if cw != c:
        raise ShapeError(f"channel mismatch: input {x.data.shape} vs weight {weight.data.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"same padding needs odd kernel dims, got {kh}x{kw}")
    if bias.data.shape != (f,):
        raise ShapeError(f"bias shape {bias.data.shape} does not match {f} filters")

    y, cols = _conv_same(x.data, weight.data)
    y += bias.data[None, :, None, None]
    out = Tensor(y, requires_grad=False)

    tape = _tracking(x, weight, bias)
    if tape is not None:
        out.requires_grad = True

        def backward():
            if out.grad is None:
                return
            g2 = out.grad.transpose(0, 2, 3, 1).reshape(-1, f)
            if bias.requires_grad:
                _accumulate(bias, g2.sum(axis=0))
            if weight.requires_grad:
                _accumulate(weight, (cols.T @ g2).T.reshape(weight.data.shape))
            if x.requires_grad:
                w_swap = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                _accumulate(x, _conv_same(out.grad, w_swap)[0])

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise and normalization


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is taken as 0."""
    out = Tensor(np.maximum(x.data, 0), requires_grad=False)
    tape = _tracking(x)
    if tape is not None:
        out.requires_grad = True
        mask = x.data > 0

        def backward():
            if out.grad is not None:
                _accumulate(x, out.grad * mask)

        tape.record(out, backward)
    return out


class BatchNormStats:
    """Running per-channel mean/variance used at inference time."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BatchNormStats":
        dup = BatchNormStats(len(self.mean), self.mean.dtype)
        dup.mean = self.mean.copy()
        dup.var = self.var.copy()
        return dup


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: BatchNormStats,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over the (N, H, W) axes.

    Training mode normalizes with batch statistics (biased variance) and
    folds them into the running stats; inference mode uses the running stats
    and treats them as constants.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d wants [N,C,H,W], got {x.data.shape}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"gamma {gamma.data.shape} / beta {beta.data.shape} do not match {c} channels"
        )
    axes = (0, 2, 3)
    expand = (None, slice(None), None, None)

    if training:
        if n * h * w <= 1:
            raise ValueError("batchnorm in training mode needs more than one value per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean = (momentum * stats.mean + (1.0 - momentum) * mean).astype(stats.mean.dtype)
        stats.var = (momentum * stats.var + (1.0 - momentum) * var).astype(stats.var.dtype)
    else:
        mean = stats.mean.astype(x.data.dtype)
        var = stats.var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[expand]) * inv_std[expand]
    out = Tensor(gamma.data[expand] * xhat + beta.data[expand], requires_grad=False)

    tape = _tracking(x, gamma, beta)
    if tape is not None:
        out.requires_grad = True

        def backward():
            if out.grad is None:
                return
            g = out.grad
            if beta.requires_grad:
                _accumulate(beta, g.sum(axis=axes))
            if gamma.requires_grad:
                _accumulate(gamma, (g * xhat).sum(axis=axes))
            if x.requires_grad:
                dxhat = g * gamma.data[expand]
                if training:
                    # batch statistics depend on x
                    mu1 = dxhat.mean(axis=axes, keepdims=True)
                    mu2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
                    _accumulate(x, inv_std[expand] * (dxhat - mu1 - xhat * mu2))
                else:
                    _accumulate(x, dxhat * inv_std[expand])

        tape.record(out, backward)
    return out


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; trailing odd row/column dropped.

    The backward pass routes the gradient to the first occurrence of the
    maximum in row-major window order.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2 wants [N,C,H,W], got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2x2 needs H,W >= 2, got {x.data.shape}")
    h2, w2 = h // 2, w // 2
    win = (
        x.data[:, :, : h2 * 2, : w2 * 2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], requires_grad=False)

    tape = _tracking(x)
    if tape is not None:
        out.requires_grad = True

        def backward():
            if out.grad is None or not x.requires_grad:
                return
            dwin = np.zeros((n, c, h2, w2, 4), dtype=out.grad.dtype)
            np.put_along_axis(dwin, idx[..., None], out.grad[..., None], axis=-1)
            dx = np.zeros_like(x.data)
            dx[:, :, : h2 * 2, : w2 * 2] = (
                dwin.reshape(n, c, h2, w2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h2 * 2, w2 * 2)
            )
            _accumulate(x, dx)

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# recurrence


@dataclass
class LstmParams:
    """Weights of one LSTM direction; gate layout along the last axis is
    [input, forget, candidate, output]."""

    wx: Parameter  # [D, 4H]
    wh: Parameter  # [H, 4H]
    b: Parameter  # [4H]

    def __post_init__(self):
        hidden = self.wh.data.shape[0]
        if self.wh.data.shape != (hidden, 4 * hidden):
            raise ShapeError(f"wh must be [H, 4H], got {self.wh.data.shape}")
        if self.wx.data.shape[1] != 4 * hidden or self.b.data.shape != (4 * hidden,):
            raise ShapeError(
                f"inconsistent LSTM shapes: wx {self.wx.data.shape}, "
                f"wh {self.wh.data.shape}, b {self.b.data.shape}"
            )

    @property
    def hidden_size(self) -> int:
        return self.wh.data.shape[0]


def lstm_sequence(xs: Tensor, params: LstmParams, direction: str = "forward") -> Tensor:
    """Run an LSTM over a [T, N, D] sequence; initial h and c are zero.

    Returns all hidden states as [T, N, H] in the original time order.
    ``direction="backward"`` processes the sequence reversed, so its last
    processed step sits at output index 0. Backpropagation runs through the
    full sequence.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if xs.data.ndim != 3:
        raise ShapeError(f"lstm_sequence wants [T,N,D], got {xs.data.shape}")
    t_len, batch, dim = xs.data.shape
    if t_len == 0:
        raise ValueError("empty sequence (T = 0)")
    if params.wx.data.shape[0] != dim:
        raise ShapeError(f"input dim {dim} does not match wx {params.wx.data.shape}")

    hidden = params.hidden_size
    wx, wh, b = params.wx.data, params.wh.data, params.b.data
    dtype = xs.data.dtype
    order = range(t_len) if direction == "forward" else range(t_len - 1, -1, -1)

    h = np.zeros((batch, hidden), dtype=dtype)
    c = np.zeros((batch, hidden), dtype=dtype)
    ys = np.empty((t_len, batch, hidden), dtype=dtype)
    steps = []
    for t in order:
        x_t = xs.data[t]
        z = x_t @ wx + h @ wh + b
        gi = _sigmoid(z[:, :hidden])
        gf = _sigmoid(z[:, hidden : 2 * hidden])
        gg = np.tanh(z[:, 2 * hidden : 3 * hidden])
        go = _sigmoid(z[:, 3 * hidden :])
        c_prev, h_prev = c, h
        c = gf * c_prev + gi * gg
        tc = np.tanh(c)
        h = go * tc
        ys[t] = h
        steps.append((t, x_t, h_prev, c_prev, gi, gf, gg, go, tc))

    out = Tensor(ys, requires_grad=False)
    tape = _tracking(xs, params.wx, params.wh, params.b)
    if tape is not None:
        out.requires_grad = True

        def backward():
            if out.grad is None:
                return
            dwx = np.zeros_like(wx)
            dwh = np.zeros_like(wh)
            db = np.zeros_like(b)
            dxs = np.zeros_like(xs.data) if xs.requires_grad else None
            dh_next = np.zeros((batch, hidden), dtype=dtype)
            dc_next = np.zeros((batch, hidden), dtype=dtype)
            for t, x_t, h_prev, c_prev, gi, gf, gg, go, tc in reversed(steps):
                dh = out.grad[t] + dh_next
                dgo = dh * tc
                dc = dc_next + dh * go * (1.0 - tc * tc)
                dgi = dc * gg
                dgg = dc * gi
                dgf = dc * c_prev
                dc_next = dc * gf
                dz = np.concatenate(
                    [
                        dgi * gi * (1.0 - gi),
                        dgf * gf * (1.0 - gf),
                        dgg * (1.0 - gg * gg),
                        dgo * go * (1.0 - go),
                    ],
                    axis=1,
                )
                dwx += x_t.T @ dz
                dwh += h_prev.T @ dz
                db += dz.sum(axis=0)
                dh_next = dz @ wh.T
                if dxs is not None:
                    dxs[t] = dz @ wx.T
            if params.wx.requires_grad:
                _accumulate(params.wx, dwx)
            if params.wh.requires_grad:
                _accumulate(params.wh, dwh)
            if params.b.requires_grad:
                _accumulate(params.b, db)
            if dxs is not None:
                _accumulate(xs, dxs)

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# affine map and loss


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: [N, D] @ [D, K] + [K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(f"dense cannot combine x {x.data.shape} with weight {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(f"bias {bias.data.shape} does not match weight {weight.data.shape}")
    out = Tensor(x.data @ weight.data + bias.data, requires_grad=False)
    tape = _tracking(x, weight, bias)
    if tape is not None:
        out.requires_grad = True

        def backward():
            if out.grad is None:
                return
            if bias.requires_grad:
                _accumulate(bias, out.grad.sum(axis=0))
            if weight.requires_grad:
                _accumulate(weight, x.data.T @ out.grad)
            if x.requires_grad:
                _accumulate(x, out.grad @ weight.data.T)

        tape.record(out, backward)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true labels.

    Computed with max subtraction for stability; the gradient is
    (softmax - onehot) / N.
    """
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {bad} outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    losses = log_norm - z[np.arange(n), labels]
    out = Tensor(np.asarray(losses.mean(), dtype=logits.data.dtype), requires_grad=False)

    tape = _tracking(logits)
    if tape is not None:
        out.requires_grad = True

        def backward():
            if out.grad is None:
                return
            probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            probs[np.arange(n), labels] -= 1.0
            _accumulate(logits, probs * (out.grad / n))

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# layout ops used to wire the network together


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), requires_grad=False)
    tape = _tracking(x)
    if tape is not None:
        out.requires_grad = True

        def backward():
            if out.grad is not None:
                _accumulate(x, out.grad.reshape(x.data.shape))

        tape.record(out, backward)
    return out


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)), requires_grad=False)
    tape = _tracking(x)
    if tape is not None:
        out.requires_grad = True
        inverse = tuple(np.argsort(axes))

        def backward():
            if out.grad is not None:
                _accumulate(x, out.grad.transpose(inverse))

        tape.record(out, backward)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), requires_grad=False)
    tape = _tracking(*tensors)
    if tape is not None:
        out.requires_grad = True
        sizes = [t.data.shape[axis] for t in tensors]
        bounds = np.cumsum([0] + sizes)

        def backward():
            if out.grad is None:
                return
            for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
                if t.requires_grad:
                    index = [slice(None)] * out.grad.ndim
                    index[axis] = slice(lo, hi)
                    _accumulate(t, out.grad[tuple(index)])

        tape.record(out, backward)
    return out


def select_step(x: Tensor, t: int) -> Tensor:
    """Pick time step t from a [T, ...] tensor."""
    out = Tensor(x.data[t].copy(), requires_grad=False)
    tape = _tracking(x)
    if tape is not None:
        out.requires_grad = True

        def backward():
            if out.grad is None or not x.requires_grad:
                return
            g = np.zeros_like(x.data)
            g[t] = out.grad
            _accumulate(x, g)

        tape.record(out, backward)
    return out


def time_mean(x: Tensor) -> Tensor:
    """Mean over the leading (time) axis of a [T, ...] tensor."""
    out = Tensor(x.data.mean(axis=0), requires_grad=False)
    tape = _tracking(x)
    if tape is not None:
        out.requires_grad = True
        t_len = x.data.shape[0]

        def backward():
            if out.grad is None or not x.requires_grad:
                return
            _accumulate(x, np.broadcast_to(out.grad / t_len, x.data.shape).copy())

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# optimizers


def adam_step(
    params,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
) -> None:
    """One Adam update with bias correction; t is the 1-based step count."""
    if t < 1:
        raise ValueError(f"Adam bias correction needs step t >= 1, got {t}")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p in params:
        if p.grad is None:
            continue
        if p.m is None:
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)
        p.m *= beta1
        p.m += (1.0 - beta1) * p.grad
        p.v *= beta2
        p.v += (1.0 - beta2) * np.square(p.grad)
        p.data -= lr * (p.m / bc1) / (np.sqrt(p.v / bc2) + eps)


def sgd_step(params, lr: float, momentum: float = 0.0) -> None:
    """Plain SGD, optionally with classical momentum (v = mu*v + g)."""
    for p in params:
        if p.grad is None:
            continue
        if momentum:
            if p.velocity is None:
                p.velocity = np.zeros_like(p.data)
            p.velocity *= momentum
            p.velocity += p.grad
            p.data -= lr * p.velocity
        else:
            p.data -= lr * p.grad


class Adam:
    """Stateful wrapper around :func:`adam_step` counting its own steps."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    def step(self):
        self.t += 1
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps, self.t)

    def zero_grad(self):
        zero_grad(self.params)


class Sgd:
    """Stateful wrapper around :func:`sgd_step`."""

    def __init__(self, params, lr=1e-2, momentum=0.0):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum

    def step(self):
        sgd_step(self.params, self.lr, self.momentum)

    def zero_grad(self):
        zero_grad(self.params)
