"""Minimal reverse-mode differentiation over NCHW numpy arrays.

Every operation accepts plain ``numpy`` arrays or :class:`Var` handles.  When
at least one argument is a ``Var`` the result is recorded on that variable's
:class:`Tape` and returned as a ``Var``; otherwise the plain array result is
returned.  Passing ``var.value`` instead of ``var`` is therefore how a value
is detached from the graph.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Var",
    "Tape",
    "as_grid",
    "add",
    "sub",
    "mul",
    "neg",
    "square",
    "reduce_sum",
    "grid_sum",
    "item_sums",
    "item_means",
    "stack",
    "matvec",
    "concat",
    "relu",
    "leaky_relu",
    "log_sigmoid",
    "conv2d",
    "maxpool2",
    "resize_bilinear",
    "block_sum_downsample",
    "grad_check",
    "grad_check_detailed",
    "GradCheckResult",
    "write_dmap",
    "read_dmap",
]


class Var:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return _getitem(self, key)

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"


class Tape:
    """Records operations in execution order and replays them backwards.

    Node indices grow monotonically, so iterating them in decreasing order is
    a reverse topological order of the graph.
    """

    def __init__(self):
        self._parents: list[tuple] = []
        self._vjps: list[Callable | None] = []
        self._values: list[np.ndarray] = []
        self._names: dict[str, int] = {}
        self.visits = 0

    def __len__(self):
        return len(self._vjps)

    def param(self, name: str, value) -> Var:
        if name in self._names:
            raise ValueError(f"parameter {name!r} already watched on this tape")
        var = self._new(np.asarray(value), (), None)
        self._names[name] = var.index
        return var

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {name: self.param(name, value) for name, value in params.items()}

    def _new(self, value, parents, vjp) -> Var:
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._values.append(value)
        return Var(value, self, len(self._vjps) - 1)

    def gradients(self, output: Var) -> dict[str, np.ndarray]:
        """Gradient of a scalar ``output`` with respect to every watched parameter."""
        if not isinstance(output, Var) or output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if output.value.size != 1:
            raise ValueError(f"gradients need a scalar output, got shape {output.value.shape}")
        grads: list = [None] * len(self._vjps)
        grads[output.index] = np.ones_like(output.value)
        self.visits = 0
        for i in range(output.index, -1, -1):
            g = grads[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            self.visits += 1
            for parent, pg in zip(self._parents[i], vjp(g)):
                if parent is None or pg is None:
                    continue
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg
            grads[i] = None
        out = {}
        for name, idx in self._names.items():
            g = grads[idx]
            out[name] = np.zeros_like(self._values[idx]) if g is None else g
        return out


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands were recorded on different tapes")
    return tape


def _val(x):
    return x.value if isinstance(x, Var) else x


def _record(value, inputs, vjp):
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    parents = tuple(x.index if isinstance(x, Var) else None for x in inputs)
    return tape._new(value, parents, vjp)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_grid(x, dtype=None) -> np.ndarray:
    """Validate and return a rank-4 (batch, channel, height, width) array."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ValueError(f"expected a rank-4 NCHW grid, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"grid dimensions must be >= 1, got {arr.shape}")
    return arr


# -- elementwise -------------------------------------------------------------


def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    sa, sb = np.shape(av), np.shape(bv)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    sa, sb = np.shape(av), np.shape(bv)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb))
    )


def neg(a):
    return _record(-_val(a), (a,), lambda g: (-g,))


def square(a):
    av = _val(a)
    return _record(av * av, (a,), lambda g: (2 * av * g,))


def _getitem(a, key):
    av = _val(a)

    def vjp(g):
        full = np.zeros_like(av)
        full[key] = g
        return (full,)

    return _record(av[key], (a,), vjp)


# -- reductions --------------------------------------------------------------


def reduce_sum(a, axis=None):
    av = _val(a)
    out = np.asarray(av.sum(axis=axis))
    shape = av.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), vjp)


def grid_sum(a):
    """Sum of every element; the gradient is all ones."""
    return reduce_sum(a)


def item_sums(a):
    """Per-batch-item totals of an NCHW grid, shape (N,)."""
    return reduce_sum(a, axis=(1, 2, 3))


def item_means(a):
    av = _val(a)
    count = av.shape[1] * av.shape[2] * av.shape[3]
    return mul(item_sums(a), 1.0 / count)


def stack(items):
    """Stack scalars (or equal-shape values) into a new leading axis."""
    items = list(items)
    vals = [np.asarray(_val(x)) for x in items]
    out = np.stack(vals)
    k = len(items)
    return _record(out, tuple(items), lambda g: tuple(g[i] for i in range(k)))


def matvec(mat: np.ndarray, vec):
    """Constant matrix times a (possibly recorded) vector."""
    vv = _val(vec)
    return _record(mat @ vv, (vec,), lambda g: (mat.T @ g,))


def concat(items, axis=0):
    items = list(items)
    vals = [_val(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    k = len(items)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(k))

    return _record(out, tuple(items), vjp)


# -- activations -------------------------------------------------------------


# When not None, piecewise ops append their active-branch pattern here so that
# grad_check can tell when a finite-difference probe crossed a kink.
_branch_log: list | None = None


def _note_branches(pattern: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.packbits(pattern.ravel()).tobytes() if pattern.dtype == bool else pattern.tobytes())


def relu(a):
    av = _val(a)
    mask = av > 0
    _note_branches(mask)
    # np.maximum (unlike a masked select) lets NaN through, so divergence stays visible
    return _record(np.maximum(av, 0).astype(av.dtype, copy=False), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float):
    av = _val(a)
    mask = av > 0
    _note_branches(mask)
    factor = np.where(mask, 1.0, slope).astype(av.dtype, copy=False)
    return _record(av * factor, (a,), lambda g: (g * factor,))


def log_sigmoid(a):
    """log(sigmoid(x)) without overflow for large |x|."""
    av = _val(a)
    out = -np.logaddexp(0, -av)
    # d/dx log sigmoid(x) = sigmoid(-x)
    slope = np.exp(-np.logaddexp(0, av))
    return _record(out, (a,), lambda g: (g * slope,))


# -- spatial -----------------------------------------------------------------


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1):
    """2-D cross-correlation of an NCHW input with an (out, in, k, k) kernel.

    Zero padding at the borders.  Output size per axis is
    ``(H + 2*padding - dilation*(k - 1) - 1) // stride + 1``.
    """
    xv, wv = _val(x), _val(weight)
    if xv.ndim != 4 or wv.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and weight, got {xv.shape} and {wv.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1, dilation >= 1, padding >= 0")
    n, c, h, w = xv.shape
    oc, ic, kh, kw = wv.shape
    if ic != c:
        raise ValueError(
            f"conv2d channel mismatch: input has {c} channels, weight expects {ic} (weight shape {wv.shape})"
        )
    span_h, span_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = (hp - span_h) // stride + 1, (wp - span_w) // stride + 1
    if hp < span_h or wp < span_w or ho < 1 or wo < 1:
        raise ValueError(f"conv2d input {h}x{w} too small for kernel span {span_h}x{span_w}")
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    win = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :ho, :wo]
    # (n, ho, wo, c, kh, kw) contiguous column buffer
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = wv.reshape(oc, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, oc).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + _val(bias).reshape(1, oc, 1, 1)
    out = np.ascontiguousarray(out)
    # flags, not the Vars themselves: closures must not point back at the tape
    need_x, need_w, need_b = (isinstance(v, Var) for v in (x, weight, bias))

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, oc)
        gw = (gmat.T @ cols).reshape(wv.shape) if need_w else None
        gb = g.sum(axis=(0, 2, 3)) if need_b else None
        gx = None
        if need_x:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, :, r0 : r0 + he : stride, c0 : c0 + we : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gw, gb)

    return _record(out, (x, weight, bias), vjp)


def maxpool2(a):
    """2x2 non-overlapping max pooling; ties route the gradient to the first
    element in row-major order."""
    av = _val(a)
    n, c, h, w = av.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = av.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )
    idx = blocks.argmax(axis=-1)[..., None]
    _note_branches(idx)
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _record(out, (a,), vjp)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def resize_bilinear(a, out_h: int, out_w: int):
    """Bilinear resize of the two trailing axes using half-pixel centres."""
    av = _val(a)
    if out_h < 1 or out_w < 1:
        raise ValueError("resize target must be at least 1x1")
    h, w = av.shape[-2:]
    dtype = av.dtype if np.issubdtype(av.dtype, np.floating) else np.float64
    ry = _interp_matrix(h, out_h, dtype)
    rx = _interp_matrix(w, out_w, dtype)
    out = ry @ av @ rx.T
    return _record(out, (a,), lambda g: (ry.T @ g @ rx,))


def block_sum_downsample(a, factor: int):
    """Sum each factor x factor block; preserves the grid total."""
    av = _val(a)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    *lead, h, w = av.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial dims {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        return _record(av.copy(), (a,), lambda g: (g,))
    out = av.reshape(*lead, h // factor, factor, w // factor, factor).sum(axis=(-3, -1))

    def vjp(g):
        return (np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1),)

    return _record(out, (a,), vjp)


# -- verification ------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckResult:
    max_error: float
    checked: int
    skipped: int  # probes whose +/- step changed a ReLU or maxpool branch


def _branches(fn, probe) -> tuple[float, list]:
    global _branch_log
    _branch_log = []
    try:
        value = float(_val(fn(probe)))
        return value, _branch_log
    finally:
        _branch_log = None


def grad_check(
    fn: Callable[[Mapping], object],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    skip_kinks: bool = False,
) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``fn`` maps a dict of parameters to a scalar.  It is called once with
    :class:`Var` handles and then repeatedly with perturbed float64 arrays.
    The error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    ``max_entries`` caps how many randomly chosen entries per parameter are
    perturbed; ``None`` checks all of them.  With ``skip_kinks`` a probe is
    left out when either perturbation flips a ReLU sign or a maxpool argmax,
    since the difference quotient is meaningless across a kink.
    """
    return grad_check_detailed(fn, params, step, max_entries, seed, skip_kinks).max_error


def grad_check_detailed(fn, params, step=1e-5, max_entries=None, seed=0, skip_kinks=False) -> GradCheckResult:
    """:func:`grad_check` plus the number of probes compared and skipped."""
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    out = fn(tape.watch(params))
    if not isinstance(out, Var):
        raise ValueError("grad_check needs a computation that depends on the parameters")
    if out.value.size != 1:
        raise ValueError(f"grad_check needs a scalar output, got shape {out.value.shape}")
    analytic = tape.gradients(out)
    base_pattern = _branches(fn, params)[1] if skip_kinks else None
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for name, base in params.items():
        flat_idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat_idx = np.sort(rng.choice(base.size, size=max_entries, replace=False))
        for k in flat_idx:
            idx = np.unravel_index(k, base.shape)
            probe = dict(params)
            plus, minus = base.copy(), base.copy()
            plus[idx] += step
            minus[idx] -= step
            probe[name] = plus
            f_plus, pat_plus = _branches(fn, probe)
            probe[name] = minus
            f_minus, pat_minus = _branches(fn, probe)
            if skip_kinks and (pat_plus != base_pattern or pat_minus != base_pattern):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * step)
            err = abs(analytic[name][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
            checked += 1
    return GradCheckResult(worst, checked, skipped)


# -- DMAP persistence --------------------------------------------------------

_DMAP_MAGIC = b"DMAP"


def write_dmap(path, grid) -> None:
    """Write a 2-D map (or a 1x1xHxW grid) as DMAP: magic, u32 H, u32 W, f32 LE row-major."""
    arr = np.asarray(grid)
    if arr.ndim == 4:
        if arr.shape[0] != 1 or arr.shape[1] != 1:
            raise ValueError(f"DMAP stores a single map, got grid {arr.shape}")
        arr = arr[0, 0]
    if arr.ndim != 2:
        raise ValueError(f"DMAP stores a 2-D map, got shape {arr.shape}")
    h, w = arr.shape
    payload = _DMAP_MAGIC + struct.pack("<II", h, w) + np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(payload)


def read_dmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _DMAP_MAGIC:
        raise ValueError(f"{path}: not a DMAP file (bad magic)")
    h, w = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {h}x{w} float32 values, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)
