"""Reverse-mode differentiable dense-tensor primitives.

Everything runs on numpy buffers: float32 by default, float64 end to end when
the inputs are float64 (used for high-precision gradient checks). Ops record
onto the innermost active Tape; with no active tape they are plain forward
computations and cost nothing extra.

Spatial ops accept either a single map ``[C, H, W]`` or a batch
``[B, C, H, W]``; the batched form exists so a minibatch of unrolled windows
can share one numpy call per layer.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError, TrainingError

DEFAULT_DTYPE = np.float32

# Clamp applied to predicted probabilities before any log.
BCE_CLAMP = 1e-7


class Tensor:
    """Dense n-d float array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out, backward):
        self.out = out
        self.backward = backward


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Append-only record of primitive applications.

    Ops executed while the tape is active append one node each, so the node
    list is already topologically ordered; ``backward`` walks it once in
    reverse, accumulating gradients additively into the input tensors.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted")
        return False

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.backward(g)


def _record(inputs, out: Tensor, backward) -> Tensor:
    if _TAPE_STACK and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE_STACK[-1].nodes.append(_Node(out, backward))
    return out


@contextmanager
def no_tape():
    """Run a block without recording, even inside an active tape."""
    saved = _TAPE_STACK[:]
    _TAPE_STACK.clear()
    try:
        yield
    finally:
        _TAPE_STACK.extend(saved)


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def assert_finite(arr: np.ndarray, context: str):
    if not np.isfinite(arr).all():
        raise TrainingError(f"non-finite values in {context}")


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _record((a, b), out, backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * x.data.dtype.type(c))

    def backward(g):
        _accum(x, g * x.data.dtype.type(c))

    return _record((x,), out, backward)


def tsum(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def backward(g):
        _accum(x, np.full_like(x.data, g.reshape(())))

    return _record((x,), out, backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _record((x,), out, backward)


def pad2d(x: Tensor, add_h: int, add_w: int) -> Tensor:
    """Zero-pad the bottom/right edges of the last two axes."""
    if add_h < 0 or add_w < 0:
        raise DimensionError(f"pad2d: negative padding ({add_h}, {add_w})")
    if add_h == 0 and add_w == 0:
        pads = None
    else:
        pads = [(0, 0)] * (x.data.ndim - 2) + [(0, add_h), (0, add_w)]
    out = Tensor(x.data if pads is None else np.pad(x.data, pads))
    h, w = x.data.shape[-2:]

    def backward(g):
        _accum(x, g[..., :h, :w])

    return _record((x,), out, backward)


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h x w`` window of the last two axes."""
    xh, xw = x.data.shape[-2:]
    if h > xh or w > xw or h < 1 or w < 1:
        raise DimensionError(f"crop2d: window ({h}, {w}) does not fit in {x.shape}")
    out = Tensor(x.data[..., :h, :w])

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., :h, :w] = g
        _accum(x, full)

    return _record((x,), out, backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1))
    h, w = x.data.shape[-2:]

    def backward(g):
        lead = g.shape[:-2]
        _accum(x, g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)))

    return _record((x,), out, backward)


def take0(x: Tensor, i: int) -> Tensor:
    """Select index ``i`` along the leading axis."""
    if not 0 <= i < x.data.shape[0]:
        raise DimensionError(f"take0: index {i} out of range for shape {x.shape}")
    out = Tensor(x.data[i])

    def backward(g):
        full = np.zeros_like(x.data)
        full[i] = g
        _accum(x, full)

    return _record((x,), out, backward)


def stack0(tensors: list[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not tensors:
        raise DimensionError("stack0: need at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise DimensionError(f"stack0: shapes {shape} and {t.shape} differ")
    out = Tensor(np.stack([t.data for t in tensors]))

    def backward(g):
        for i, t in enumerate(tensors):
            _accum(t, g[i])

    return _record(tuple(tensors), out, backward)


def bias_chw(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to a ``[..., C, H, W]`` map."""
    c = x.data.shape[-3] if x.data.ndim >= 3 else -1
    if b.data.ndim != 1 or b.shape[0] != c:
        raise DimensionError(f"bias_chw: bias {b.shape} does not match map {x.shape}")
    out = Tensor(x.data + b.data[:, None, None])

    def backward(g):
        _accum(x, g)
        axes = tuple(range(g.ndim - 3)) + (g.ndim - 2, g.ndim - 1)
        _accum(b, g.sum(axis=axes))

    return _record((x, b), out, backward)


# ---------------------------------------------------------------------------
# pointwise activations


def _sigmoid_fwd(a):
    e = np.exp(-np.abs(a))
    return np.where(a >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


_POINTWISE: dict[str, tuple[Callable, Callable]] = {
    # name -> (forward, backward from (x, y, g))
    "sigmoid": (_sigmoid_fwd, lambda x, y, g: g * y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y, g: g * (1.0 - y * y)),
    "relu": (lambda a: np.maximum(a, 0.0), lambda x, y, g: g * (x > 0.0)),
}


def pointwise(x: Tensor, fn: str) -> Tensor:
    if fn not in _POINTWISE:
        raise DomainError(f"pointwise: unknown function '{fn}'")
    fwd, bwd = _POINTWISE[fn]
    y = fwd(x.data)
    out = Tensor(y.astype(x.dtype, copy=False))
    xdata = x.data

    def backward(g):
        _accum(x, bwd(xdata, out.data, g))

    return _record((x,), out, backward)


def sigmoid(x: Tensor) -> Tensor:
    return pointwise(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return pointwise(x, "tanh")


def relu(x: Tensor) -> Tensor:
    return pointwise(x, "relu")


# ---------------------------------------------------------------------------
# linear / convolution


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: out[n, o] = sum_i x[n, i] * w[i, o] + b[o]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(
            f"linear: expected 2-d x, 2-d w, 1-d b, got {x.shape}, {w.shape}, {b.shape}"
        )
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(f"linear: x {x.shape} @ w {w.shape} + b {b.shape} do not conform")
    out = Tensor(x.data @ w.data + b.data)

    def backward(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        _accum(b, g.sum(axis=0))

    return _record((x, w, b), out, backward)


_CONV_IDX_CACHE: dict[tuple, np.ndarray] = {}


def _conv_index(nb, cin, hp, wp, kh, kw, stride, oh, ow):
    """Flat indices into a batch-flattened padded ``[nb, cin, hp, wp]``,
    shaped ``[cin*kh*kw, nb*oh*ow]`` to mirror the im2col column layout.
    Used by the strided backward scatter; cached per geometry."""
    key = (nb, cin, hp, wp, kh, kw, stride, oh, ow)
    idx = _CONV_IDX_CACHE.get(key)
    if idx is None:
        ci, khi, kwi = np.meshgrid(
            np.arange(cin), np.arange(kh), np.arange(kw), indexing="ij"
        )
        base = (ci * hp * wp + khi * wp + kwi).reshape(-1, 1)
        ohi, owi = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        shift = (stride * ohi * wp + stride * owi).reshape(-1)
        boffs = np.arange(nb) * (cin * hp * wp)
        idx = base + (boffs[:, None] + shift[None, :]).reshape(1, -1)
        _CONV_IDX_CACHE[key] = idx
    return idx


def _corr_raw(xb: np.ndarray, kernel: np.ndarray, stride: int, pad_h: int, pad_w: int):
    """Batched cross-correlation on raw arrays.

    Columns are built with a strided sliding-window copy (cheaper than a
    fancy-index gather) ordered [cin*kh*kw, nb*oh*ow], so one GEMM against
    the flattened kernel covers the whole batch. Returns
    (out [nb, cout, oh, ow], cols, padded dims); ``cols`` feeds the backward
    pass.
    """
    nb, cin, h, w = xb.shape
    cout, _, kh, kw = kernel.shape
    hp, wp = h + 2 * pad_h, w + 2 * pad_w
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if pad_h or pad_w:
        xp = np.zeros((nb, cin, hp, wp), dtype=xb.dtype)
        xp[:, :, pad_h : pad_h + h, pad_w : pad_w + w] = xb
    else:
        xp = xb
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(
        cin * kh * kw, nb * oh * ow
    )
    y = kernel.reshape(cout, -1) @ cols  # [cout, nb*oh*ow]
    # returned as a transposed view; the caller's next ufunc materializes it
    out = y.reshape(cout, nb, oh, ow).transpose(1, 0, 2, 3)
    return out, cols, hp, wp


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct cross-correlation (no kernel flip).

    ``x`` is ``[C_in, H, W]`` or ``[B, C_in, H, W]``; ``k`` is
    ``[C_out, C_in, Kh, Kw]`` with odd Kh, Kw. Output spatial size
    ``(H + 2*pad - Kh) / stride + 1`` must be integral.
    """
    if k.data.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be 4-d, got {k.shape}")
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise DimensionError(f"conv2d: input must be 3-d or 4-d, got {x.shape}")
    cout, cin, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if x.data.shape[-3] != cin:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {k.shape}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv2d: invalid stride={stride} pad={pad}")
    h, w = x.data.shape[-2:]
    hp, wp = h + 2 * pad, w + 2 * pad
    if (hp - kh) % stride != 0 or (wp - kw) % stride != 0 or hp < kh or wp < kw:
        raise ConfigurationError(
            f"conv2d: non-integral output size for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )

    xb = x.data if batched else x.data[None]
    nb = xb.shape[0]
    y, cols, hp, wp = _corr_raw(xb, k.data, stride, pad, pad)
    out = Tensor(y if batched else y[0])
    oh, ow = y.shape[-2:]

    def backward(g):
        gb = g if batched else g[None]
        g2 = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(cout, -1)
        _accum(k, (g2 @ cols.T).reshape(k.data.shape))
        if x.requires_grad:
            if stride == 1:
                # input gradient of a stride-1 correlation is itself a
                # correlation with the in/out-swapped, spatially flipped kernel
                kflip = np.ascontiguousarray(
                    k.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                )
                dxp, _, _, _ = _corr_raw(gb, kflip, 1, kh - 1, kw - 1)
                dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
            else:
                dcols = k.data.reshape(cout, -1).T @ g2
                idx = _conv_index(nb, cin, hp, wp, kh, kw, stride, oh, ow)
                dxp = np.zeros(nb * cin * hp * wp, dtype=x.data.dtype)
                np.add.at(dxp, idx.ravel(), dcols.ravel())
                dxp = dxp.reshape(nb, cin, hp, wp)
                dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
            _accum(x, dx if batched else dx[0])

    return _record((x, k), out, backward)


# ---------------------------------------------------------------------------
# recurrent cell

_GRU_KEYS = ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")


def gru_cell(x: Tensor, h: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """One gated-recurrent-unit step.

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    c = tanh(x Wh + (r*h) Uh + bh), out = (1-z)*h + z*c.

    ``params`` maps the keys wz/uz/bz/wr/ur/br/wh/uh/bh to tensors of shapes
    [I,S], [S,S] and [S]. Backward is fused (one tape node per step).
    """
    missing = [key for key in _GRU_KEYS if key not in params]
    if missing:
        raise DimensionError(f"gru_cell: missing gate parameters {missing}")
    wz, uz, bz = params["wz"], params["uz"], params["bz"]
    wr, ur, br = params["wr"], params["ur"], params["br"]
    wh, uh, bh = params["wh"], params["uh"], params["bh"]
    if x.data.ndim != 2 or h.data.ndim != 2 or x.shape[0] != h.shape[0]:
        raise DimensionError(f"gru_cell: x {x.shape} and h {h.shape} do not conform")
    i, s = x.shape[1], h.shape[1]
    for name, t, want in (
        ("wz", wz, (i, s)), ("uz", uz, (s, s)), ("bz", bz, (s,)),
        ("wr", wr, (i, s)), ("ur", ur, (s, s)), ("br", br, (s,)),
        ("wh", wh, (i, s)), ("uh", uh, (s, s)), ("bh", bh, (s,)),
    ):
        if t.shape != want:
            raise DimensionError(f"gru_cell: {name} has shape {t.shape}, expected {want}")

    xd, hd = x.data, h.data
    z = _sigmoid_fwd(xd @ wz.data + hd @ uz.data + bz.data)
    r = _sigmoid_fwd(xd @ wr.data + hd @ ur.data + br.data)
    rh = r * hd
    c = np.tanh(xd @ wh.data + rh @ uh.data + bh.data)
    out = Tensor(((1.0 - z) * hd + z * c).astype(x.dtype, copy=False))

    def backward(g):
        dz = g * (c - hd)
        dc = g * z
        dh = g * (1.0 - z)
        dac = dc * (1.0 - c * c)
        drh = dac @ uh.data.T
        dr = drh * hd
        dh = dh + drh * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        _accum(wh, xd.T @ dac)
        _accum(uh, rh.T @ dac)
        _accum(bh, dac.sum(axis=0))
        _accum(wz, xd.T @ daz)
        _accum(uz, hd.T @ daz)
        _accum(bz, daz.sum(axis=0))
        _accum(wr, xd.T @ dar)
        _accum(ur, hd.T @ dar)
        _accum(br, dar.sum(axis=0))
        if x.requires_grad:
            _accum(x, daz @ wz.data.T + dar @ wr.data.T + dac @ wh.data.T)
        if h.requires_grad:
            _accum(h, dh + daz @ uz.data.T + dar @ ur.data.T)

    return _record((x, h, wz, uz, bz, wr, ur, br, wh, uh, bh), out, backward)


# ---------------------------------------------------------------------------
# loss


def bce(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy; gradient is defined for ``pred`` only.

    Predictions are clamped to [BCE_CLAMP, 1 - BCE_CLAMP] before the logs.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"bce: pred {pred.shape} and target {target.shape} differ")
    t = target.data
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise DomainError(
            f"bce: target values outside [0, 1] (range {t.min()!r}..{t.max()!r})"
        )
    dt = pred.dtype
    lo = dt.type(BCE_CLAMP)
    hi = dt.type(1.0) - dt.type(BCE_CLAMP)
    p = np.clip(pred.data, lo, hi)
    n = max(p.size, 1)
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum() / n
    out = Tensor(np.asarray(loss, dtype=dt))

    def backward(g):
        inside = (pred.data > lo) & (pred.data < hi)
        dp = np.where(inside, (-t / p + (1.0 - t) / (1.0 - p)), 0.0)
        _accum(pred, (dp * (g.reshape(()) / n)).astype(dt, copy=False))

    return _record((pred,), out, backward)


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamSet:
    """Ordered name -> Tensor map; order defines checkpoint payload order."""

    def __init__(self, tensors: Mapping[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = dict(tensors or {})

    def add(self, name: str, tensor: Tensor):
        if name in self._tensors:
            raise ConfigurationError(f"duplicate parameter name '{name}'")
        self._tensors[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def slice(self, prefix: str) -> dict[str, Tensor]:
        """Tensors under ``prefix`` keyed by their suffix."""
        out = {}
        for name, t in self._tensors.items():
            if name.startswith(prefix):
                out[name[len(prefix):]] = t
        return out

    def subset(self, predicate) -> "ParamSet":
        return ParamSet({n: t for n, t in self._tensors.items() if predicate(n)})

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({n: t.astype(dtype) for n, t in self._tensors.items()})

    def copy(self) -> "ParamSet":
        return ParamSet(
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.items()}
        )


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: ParamSet):
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0


def adam_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamSet:
    """Bias-corrected Adam update applied in place; returns ``params``."""
    state.t += 1
    b1c = 1.0 - beta1 ** state.t
    b2c = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(
                f"adam_step: gradient for '{name}' has shape {g.shape}, expected {p.data.shape}"
            )
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / b1c
        vhat = v / b2c
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype, copy=False)
    return params


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` must be scalar-valued and deterministic. The relative error per
    coordinate uses denominator max(|analytic|, |numeric|, 1e-8). Pass a
    float64 ``x`` (and float64 parameters inside ``f``) with a smaller ``h``
    for high-precision checks.
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
        if y.data.size != 1:
            raise DomainError(f"grad_check: f must be scalar-valued, got shape {y.shape}")
        tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(flat[i])
        y1 = float(f(x).data)
        flat[i] = orig - h
        dn = float(flat[i])
        y0 = float(f(x).data)
        flat[i] = orig
        numeric = (y1 - y0) / (up - dn)
        a = float(aflat[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
