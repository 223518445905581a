"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor is a numpy float64 array plus an optional gradient buffer.
Operations record their parents and a backward closure; GradTape linearizes
the graph reachable from a scalar loss into reverse topological order and
replays it once, accumulating gradients additively at fan-out points.

Only the ops the model needs are provided (no general broadcasting). All
forward math is done with max-subtraction / mean-centering tricks so finite
inputs can never produce non-finite outputs silently.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, EmptyKeySetError, NumericError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (evaluation paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A float64 array, optionally participating in the gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar for the common scalar/elementwise cases.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0)) if isinstance(other, Tensor) else add(self, -other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data) -> Tensor:
    """Constant (non-trainable) tensor."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Build an op output, recording the edge only when a parent needs grad."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class GradTape:
    """Reverse topological schedule of the graph reachable from a root."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.nodes = order  # parents strictly before consumers

    def run(self, root: Tensor) -> None:
        root.accumulate_grad(np.ones_like(root.data))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss.

    When params is given, parameters unreachable from the loss get an
    all-zero gradient buffer instead of None.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    GradTape(loss).run(loss)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """a + b for equal shapes, a scalar constant, or a trailing-axis bias."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _node(a.data + c, (a,), lambda g, a=a: a.accumulate_grad(g))
    if a.data.shape == b.data.shape:
        def bwd(g, a=a, b=b):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)
        return _node(a.data + b.data, (a, b), bwd)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        def bwd(g, a=a, b=b):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=0))
        return _node(a.data + b.data, (a, b), bwd)
    raise ContractError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a python scalar."""
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    if a.data.shape != b.data.shape:
        raise ContractError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _node(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g, a=a, c=c: a.accumulate_grad(g * c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ContractError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bwd)


def affine(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w + b as one node; x (n,din), w (din,dout), b (dout,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ContractError(f"affine: bad shapes x={x.data.shape} w={w.data.shape}")
    y = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ContractError(f"affine: bias shape {b.data.shape} vs dout {w.data.shape[1]}")
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g, x=x, w=w, b=b):
        if x.requires_grad:
            x.accumulate_grad(g @ w.data.T)
        if w.requires_grad:
            w.accumulate_grad(x.data.T @ g)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))

    return _node(y, parents, bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ContractError(f"transpose expects 2-D, got {x.data.shape}")
    return _node(x.data.T.copy(), (x,), lambda g, x=x: x.accumulate_grad(g.T))


def gather_rows(x: Tensor, indices) -> Tensor:
    """Rows of x at the given integer indices (embedding lookup / selection)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ContractError("gather_rows expects a 1-D index list")
    if x.data.ndim < 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0])):
        raise ContractError(
            f"gather_rows: index out of range for leading extent {x.data.shape[0]}"
        )

    def bwd(g, x=x, idx=idx):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x.accumulate_grad(gx)

    return _node(x.data[idx], (x,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Vertical stack of 2-D tensors sharing the trailing extent."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat_rows of zero tensors")
    counts = [p.data.shape[0] for p in parts]

    def bwd(g, parts=parts, counts=counts):
        ofs = 0
        for p, n in zip(parts, counts):
            if p.requires_grad:
                p.accumulate_grad(g[ofs:ofs + n])
            ofs += n

    return _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Horizontal stack of 2-D tensors sharing the leading extent."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat_cols of zero tensors")
    widths = [p.data.shape[1] for p in parts]

    def bwd(g, parts=parts, widths=widths):
        ofs = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p.accumulate_grad(g[:, ofs:ofs + w])
            ofs += w

    return _node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    y = x.data.reshape(shape)

    def bwd(g, x=x):
        x.accumulate_grad(g.reshape(x.data.shape))

    return _node(y.copy(), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g, x=x):
        x.accumulate_grad(np.full_like(x.data, float(g)))

    return _node(np.asarray(x.data.sum()), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g, x=x, n=n):
        x.accumulate_grad(np.full_like(x.data, float(g) / n))

    return _node(np.asarray(x.data.mean()), (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU."""
    xv = x.data
    phi = 0.5 * (1.0 + erf(xv / math.sqrt(2.0)))
    y = xv * phi

    def bwd(g, x=x, xv=xv, phi=phi):
        pdf = np.exp(-0.5 * xv * xv) / math.sqrt(2.0 * math.pi)
        x.accumulate_grad(g * (phi + xv * pdf))

    return _node(y, (x,), bwd)


# ---------------------------------------------------------------------------
# normalizers and attention
# ---------------------------------------------------------------------------


def _softmax_raw(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    m = scores.max(axis=axis, keepdims=True)
    w = np.exp(scores - m)
    return w / w.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis."""
    nd = x.data.ndim
    if not (-nd <= axis < nd):
        raise ContractError(f"softmax: axis {axis} invalid for shape {x.data.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax: non-finite input")
    y = _softmax_raw(x.data, axis)

    def bwd(g, x=x, y=y, axis=axis):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x.accumulate_grad(y * (g - dot))

    return _node(y, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization over the last axis with learned gain/bias."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ContractError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.data.shape}/{bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bwd(g, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv, d=d):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gl = g * gain.data
            m1 = gl.mean(axis=-1, keepdims=True)
            m2 = (gl * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gl - m1 - xhat * m2))

    return _node(y, (x, gain, bias), bwd)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int = 1,
    key_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Scaled dot-product attention over row sets, fused into one node.

    q (nq,d), k/v (nk,d). With n_heads > 1 the feature axis is split into
    contiguous head slices of width d/n_heads; each head attends
    independently and the slices are re-concatenated. key_mask is a boolean
    (nk,) array; masked keys receive zero weight.
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ContractError("attention expects 2-D q, k, v")
    nq, d = q.data.shape
    nk = k.data.shape[0]
    if k.data.shape[1] != d:
        raise ContractError(f"attention: q dim {d} vs k dim {k.data.shape[1]}")
    if v.data.shape[0] != nk:
        raise ContractError("attention: k and v must share row count")
    if nk == 0:
        raise EmptyKeySetError("attention over an empty key set")
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (nk,):
            raise ContractError(f"attention: key_mask shape {key_mask.shape} vs nk={nk}")
        if not key_mask.any():
            raise EmptyKeySetError("attention with all keys masked")
    if d % n_heads != 0 or v.data.shape[1] % n_heads != 0:
        raise ContractError(f"attention: {n_heads} heads do not divide dims {d}/{v.data.shape[1]}")
    dh = d // n_heads
    dv = v.data.shape[1] // n_heads
    inv_sqrt = 1.0 / math.sqrt(dh)

    out = np.empty((nq, v.data.shape[1]))
    weights: list[np.ndarray] = []
    for h in range(n_heads):
        qs, ks = h * dh, h * dh
        vs = h * dv
        scores = (q.data[:, qs:qs + dh] @ k.data[:, ks:ks + dh].T) * inv_sqrt
        if not np.isfinite(scores).all():
            raise NumericError("attention: non-finite scores")
        if key_mask is not None:
            scores = np.where(key_mask[None, :], scores, -np.inf)
        w = _softmax_raw(scores, axis=1)
        weights.append(w)
        out[:, vs:vs + dv] = w @ v.data[:, vs:vs + dv]

    def bwd(g, q=q, k=k, v=v, weights=weights, n_heads=n_heads, dh=dh, dv=dv,
            inv_sqrt=inv_sqrt):
        gq = np.zeros_like(q.data) if q.requires_grad else None
        gk = np.zeros_like(k.data) if k.requires_grad else None
        gv = np.zeros_like(v.data) if v.requires_grad else None
        for h in range(n_heads):
            qs = h * dh
            vs = h * dv
            w = weights[h]
            gh = g[:, vs:vs + dv]
            if gv is not None:
                gv[:, vs:vs + dv] = w.T @ gh
            gw = gh @ v.data[:, vs:vs + dv].T
            gs = w * (gw - (gw * w).sum(axis=1, keepdims=True))
            if gq is not None:
                gq[:, qs:qs + dh] = (gs @ k.data[:, qs:qs + dh]) * inv_sqrt
            if gk is not None:
                gk[:, qs:qs + dh] = (gs.T @ q.data[:, qs:qs + dh]) * inv_sqrt
        if gq is not None:
            q.accumulate_grad(gq)
        if gk is not None:
            k.accumulate_grad(gk)
        if gv is not None:
            v.accumulate_grad(gv)

    return _node(out, (q, k, v), bwd)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention: softmax(q k^T / sqrt(d)) v."""
    return attention(q, k, v, n_heads=1)


_clamp_events = 0


def clamp_event_count() -> int:
    """How many times a log-probability has been clamped at the 1e-30 floor."""
    return _clamp_events


_LOG_FLOOR = math.log(1e-30)
_PROB_FLOOR = 1e-30


def neg_log(p: Tensor) -> Tensor:
    """-log of a scalar probability, clamped at the 1e-30 floor (counted)."""
    global _clamp_events
    if p.data.size != 1:
        raise ContractError(f"neg_log expects a scalar, got shape {p.data.shape}")
    val = float(p.data.reshape(()))
    clamped = val < _PROB_FLOOR
    if clamped:
        _clamp_events += 1

    def bwd(g, p=p, val=val, clamped=clamped):
        d = 0.0 if clamped else -1.0 / val
        p.accumulate_grad(np.full_like(p.data, float(g) * d))

    return _node(np.asarray(-math.log(max(val, _PROB_FLOOR))), (p,), bwd)


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of targets under row-wise softmax(logits).

    The reported value clamps each log-probability at log(1e-30) and counts
    clamp events; the gradient is the exact softmax-minus-onehot either way.
    """
    global _clamp_events
    t = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2 or t.ndim != 1 or t.shape[0] != logits.data.shape[0]:
        raise ContractError(
            f"cross_entropy_logits: logits {logits.data.shape} vs targets {t.shape}"
        )
    n, c = logits.data.shape
    if t.size and (t.min() < 0 or t.max() >= c):
        raise ContractError("cross_entropy_logits: target index out of range")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), t] - lse
    clamped = logp < _LOG_FLOOR
    if clamped.any():
        _clamp_events += int(clamped.sum())
        logp = np.maximum(logp, _LOG_FLOOR)
    val = np.asarray(-logp.mean())
    probs = np.exp(z - lse[:, None])

    def bwd(g, logits=logits, probs=probs, t=t, n=n):
        gl = probs.copy()
        gl[np.arange(n), t] -= 1.0
        logits.accumulate_grad(gl * (float(g) / n))

    return _node(val, (logits,), bwd)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------


def _rel_err(a: float, cd: float) -> float:
    return abs(a - cd) / max(abs(a), abs(cd), 1e-8)


def finite_diff_check(
    f: Callable[[], float],
    params: Sequence[tuple[str, Tensor]],
    h: float = 1e-5,
    n_samples: int = 200,
    rng=None,
) -> dict:
    """Compare analytic gradients of f against central finite differences.

    f is a deterministic scalar function of the given named parameters.
    At least one coordinate per parameter is sampled and the count totals at
    least n_samples. Returns the max relative error
    |analytic - cd| / max(|analytic|, |cd|, 1e-8) plus per-parameter detail.

    Step size: each coordinate is measured at h, 10h, 100h, 1000h and the
    estimate with the smallest empirical error bound is kept, where the
    bound is the rung's own rounding floor (a few ulps of |f| over the
    step) plus its gap to the neighboring rung (a truncation estimate).
    Small steps drown nearly-flat coordinates in cancellation noise while
    large steps bend on curved ones; this selection never consults the
    analytic value, so the oracle stays independent.
    """
    params = list(params)
    if not params:
        raise ContractError("finite_diff_check with no parameters")
    for _, p in params:
        p.grad = None
    loss = f()
    if not isinstance(loss, Tensor):
        raise ContractError("finite_diff_check: f must return a Tensor")
    backward(loss, [p for _, p in params])
    analytic = {name: p.grad.copy() for name, p in params}

    def central(buf, i, step):
        orig = buf[i]
        buf[i] = orig + step
        fp = f().item()
        buf[i] = orig - step
        fm = f().item()
        buf[i] = orig
        return (fp - fm) / (2.0 * step)

    # rounding floor of one central difference: a few ulps of |f| per eval
    eps_f = 16.0 * np.finfo(np.float64).eps * max(1.0, abs(loss.item()))

    total = sum(p.data.size for _, p in params)
    per_param = max(1, math.ceil(n_samples / len(params)))
    worst = 0.0
    detail = {}
    checked = 0
    for name, p in params:
        m = min(p.data.size, per_param)
        if rng is not None:
            flat_idx = rng.choice(p.data.size, size=m, replace=False)
        else:
            flat_idx = np.linspace(0, p.data.size - 1, m).astype(np.intp)
        buf = p.data.reshape(-1)
        worst_here = 0.0
        for i in np.asarray(flat_idx, dtype=np.intp):
            a = analytic[name].reshape(-1)[i]
            steps = (h, 10.0 * h, 100.0 * h, 1000.0 * h)
            cds = [central(buf, i, s) for s in steps]
            gaps = [abs(cds[j] - cds[j + 1]) for j in range(len(cds) - 1)]
            gaps.append(gaps[-1])
            bounds = [eps_f / s + gap for s, gap in zip(steps, gaps)]
            cd = cds[int(np.argmin(bounds))]
            err = _rel_err(a, cd)
            worst_here = max(worst_here, err)
            checked += 1
        detail[name] = worst_here
        worst = max(worst, worst_here)
    return {
        "max_rel_error": worst,
        "per_param": detail,
        "coords_checked": checked,
        "total_coords": total,
        "h": h,
    }
