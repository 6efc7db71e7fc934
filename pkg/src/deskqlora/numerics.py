"""Dense FP64 tensors with a small reverse-mode autograd, BF16 emulation and a seeded RNG.

Every value is held as float64. Reduced precision is modelled by rounding the
values onto the reduced format's value set (see :func:`round_bf16`), never by
changing storage dtype, so finite-difference checks stay trustworthy.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, FrozenParameterError

PRECISIONS = ("fp64", "fp32", "bf16")

# bf16: 8 significand bits (7 stored), fp32 exponent range
_BF16_SIG_BITS = 8
_BF16_MIN_EXP = -125  # frexp exponent of the smallest normal, 2**-126 == 0.5 * 2**-125
_BF16_MAX = float.fromhex("0x1.fep127")


class Tensor:
    """An immutable FP64 array that optionally records the ops that produced it."""

    __slots__ = ("data", "precision", "requires_grad", "frozen", "name", "grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        *,
        precision: str = "fp64",
        requires_grad: bool = False,
        frozen: bool = False,
        name: str | None = None,
    ):
        if precision not in PRECISIONS:
            raise ValueError(f"unknown precision tag {precision!r}")
        arr = np.array(data, dtype=np.float64)
        # the tag is a value set: reduced-precision tensors hold only representable values
        if precision == "bf16":
            arr = bf16_round_array(arr)
        elif precision == "fp32":
            arr = arr.astype(np.float32).astype(np.float64)
        arr.flags.writeable = False
        if frozen and requires_grad:
            raise FrozenParameterError(f"tensor {name!r} cannot be both frozen and trainable")
        self.data = arr
        self.precision = precision
        self.requires_grad = requires_grad
        self.frozen = frozen
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
        if self.data.size != 1:
            raise DimensionError(f"backward needs a scalar output, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _tracks(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _tracks(p):
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(_tracks(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# registered operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product accumulated in FP64."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    a = as_tensor(a)
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    n_rows = table.shape[0]

    def backward(g):
        out = np.zeros((n_rows, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _result(table.data[idx], (table,), backward)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (a,), backward)


def rms_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise RMS normalisation without a learned gain."""
    a = as_tensor(a)
    x = a.data
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    y = x * inv

    def backward(g):
        return (inv * (g - y * (g * y).sum(axis=-1, keepdims=True) / d),)

    return _result(y, (a,), backward)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Causal multi-head attention over one sequence.

    ``q`` is (seq, n_heads*hd); ``k`` and ``v`` are (seq, n_kv*hd) with
    ``n_heads % n_kv == 0`` (grouped-query: each kv head serves a group of
    consecutive query heads). Returns (seq, n_heads*hd).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    seq, dq = q.shape
    if dq % n_heads:
        raise DimensionError(f"query width {dq} not divisible by {n_heads} heads")
    hd = dq // n_heads
    if k.shape != v.shape or k.shape[0] != seq or k.shape[1] % hd:
        raise DimensionError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    n_kv = k.shape[1] // hd
    if n_heads % n_kv:
        raise DimensionError(f"{n_heads} query heads cannot share {n_kv} kv heads")
    group = n_heads // n_kv

    qh = q.data.reshape(seq, n_heads, hd).transpose(1, 0, 2)
    kh = np.repeat(k.data.reshape(seq, n_kv, hd).transpose(1, 0, 2), group, axis=0)
    vh = np.repeat(v.data.reshape(seq, n_kv, hd).transpose(1, 0, 2), group, axis=0)
    inv_sqrt = 1.0 / np.sqrt(hd)
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * inv_sqrt
    future = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    p = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(p, vh).transpose(1, 0, 2).reshape(seq, dq)

    def backward(g):
        gh = g.reshape(seq, n_heads, hd).transpose(1, 0, 2)
        dp = np.matmul(gh, vh.transpose(0, 2, 1))
        dvh = np.matmul(p.transpose(0, 2, 1), gh)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * inv_sqrt
        dqh = np.matmul(ds, kh)
        dkh = np.matmul(ds.transpose(0, 2, 1), qh)
        dk = dkh.reshape(n_kv, group, seq, hd).sum(axis=1).transpose(1, 0, 2).reshape(seq, n_kv * hd)
        dv = dvh.reshape(n_kv, group, seq, hd).sum(axis=1).transpose(1, 0, 2).reshape(seq, n_kv * hd)
        return dqh.transpose(1, 0, 2).reshape(seq, dq), dk, dv

    return _result(out, (q, k, v), backward)


def cross_entropy(logits: Tensor, targets: Sequence[int], mask: Sequence[bool] | None = None) -> Tensor:
    """Mean token cross-entropy over the rows selected by ``mask`` (all rows by default)."""
    logits = as_tensor(logits)
    n, vocab = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (n,):
        raise DimensionError(f"targets shape {tgt.shape} does not match logits {logits.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise DimensionError(f"target id out of range for vocab {vocab}")
    sel = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(sel.sum())
    if count == 0:
        raise DimensionError("cross_entropy needs at least one selected row")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    rows = np.nonzero(sel)[0]
    loss = -logp[rows, tgt[rows]].sum() / count

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), tgt] -= 1.0
        d[~sel] = 0.0
        return (d * (float(g) / count),)

    return _result(np.array(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# gradients


def grad(f: Callable[[Mapping[str, Tensor]], Tensor], wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of scalar ``f(params)`` with respect to every tensor in ``wrt``.

    ``f`` receives fresh trainable copies of the tensors in ``wrt``. Frozen
    tensors cannot be differentiated.
    """
    leaves: dict[str, Tensor] = {}
    for name, t in wrt.items():
        t = as_tensor(t)
        if t.frozen:
            raise FrozenParameterError(f"gradient requested for frozen parameter {name!r}")
        leaves[name] = Tensor(t.data, precision=t.precision, requires_grad=True, name=name)
    out = f(leaves)
    out.backward()
    return {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)) for name, leaf in leaves.items()}


# ---------------------------------------------------------------------------
# BF16 emulation


def bf16_round_array(x: np.ndarray) -> np.ndarray:
    """Round FP64 values to the nearest BF16 value (ties to even), held in FP64.

    Rounds directly from FP64, so there is no double rounding through FP32.
    Values past the largest finite BF16 round to +-inf; NaN and inf pass through.
    """
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    finite = np.isfinite(x) & (x != 0)
    if not finite.any():
        return out
    xf = x[finite]
    _, e = np.frexp(xf)
    quantum_exp = np.maximum(e, _BF16_MIN_EXP) - _BF16_SIG_BITS
    r = np.ldexp(np.rint(np.ldexp(xf, -quantum_exp)), quantum_exp)
    r = np.where(np.abs(r) > _BF16_MAX, np.copysign(np.inf, r), r)
    out[finite] = r
    return out


def round_bf16(t: Tensor) -> Tensor:
    t = as_tensor(t)
    return Tensor(t.data, precision="bf16")


def round_fp32(t: Tensor) -> Tensor:
    t = as_tensor(t)
    return Tensor(t.data, precision="fp32")


def bf16_ulp(x) -> np.ndarray:
    """Spacing of the BF16 grid at ``|x|`` (the ulp of a BF16 value x)."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    _, e = np.frexp(np.where(x == 0, 1.0, x))
    e = np.where(x == 0, _BF16_MIN_EXP, np.maximum(e, _BF16_MIN_EXP))
    return np.ldexp(1.0, e - _BF16_SIG_BITS)


# ---------------------------------------------------------------------------
# RNG


class Rng:
    """Seeded generator; numpy's PCG64 bit generator keyed by a SeedSequence.

    ``derive(*keys)`` gives an independent child stream that depends only on
    ``(seed, *keys)``, used for per-example dropout so results do not depend on
    how examples are split across workers.
    """

    algorithm_id = "numpy-pcg64-seedsequence"

    def __init__(self, seed: int, keys: Sequence[int] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.keys])))

    def derive(self, *keys: int) -> "Rng":
        return Rng(self.seed, (*self.keys, *keys))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
