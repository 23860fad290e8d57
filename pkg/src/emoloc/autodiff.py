"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every differentiable computation is recorded on a :class:`Tape`. Tensors
created with :meth:`Tape.param` are leaves; tensors without a node id are
constants and never receive gradients. Ops whose inputs are all constants
are evaluated eagerly and return constants, which makes the same model code
usable for gradient-free inference.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, PreconditionError


class Tensor:
    __slots__ = ("value", "node", "tape")

    def __init__(self, value, node: int | None = None, tape: "Tape | None" = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def item(self) -> float:
        if self.value.size != 1:
            _not_scalar(self.shape)
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        kind = "const" if self.node is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {kind})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _not_scalar(shape):
    raise ContractError(f"expected a scalar tensor, got shape {shape}")


class Tape:
    """Ordered record of primitive ops (the computation record).

    Node ``i`` only references nodes ``< i``, so reversing the list is a valid
    topological order for the backward sweep.
    """

    def __init__(self) -> None:
        self.kinds: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.shapes: list[tuple[int, ...]] = []
        self.backward_fns: list[Callable | None] = []

    def __len__(self) -> int:
        return len(self.kinds)

    def _push(self, kind: str, value: np.ndarray, inputs: tuple[int, ...], fn) -> Tensor:
        node = len(self.kinds)
        self.kinds.append(kind)
        self.inputs.append(inputs)
        self.shapes.append(value.shape)
        self.backward_fns.append(fn)
        return Tensor(value, node, self)

    def param(self, value) -> Tensor:
        """Register a leaf. The value is copied (snapshot semantics)."""
        arr = np.array(value, dtype=np.float64, copy=True)
        return self._push("param", arr, (), None)

    def leaves(self) -> list[int]:
        return [i for i, fn in enumerate(self.backward_fns) if fn is None]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, value: np.ndarray, args: Sequence[Tensor], fn) -> Tensor:
    tape = None
    for a in args:
        if a.node is not None:
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError(f"{kind}: operands belong to different tapes")
    if tape is None:
        return Tensor(value)
    ids = tuple(-1 if a.node is None else a.node for a in args)
    return tape._push(kind, value, ids, fn)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Return d(loss)/d(leaf) for every leaf that the loss depends on."""
    if loss.value.size != 1:
        _not_scalar(loss.shape)
    if loss.node is None:
        raise ContractError("loss does not depend on any recorded parameter")
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    grads: list[np.ndarray | None] = [None] * (loss.node + 1)
    grads[loss.node] = np.ones(loss.shape)
    fns, inputs = tape.backward_fns, tape.inputs
    out: dict[int, np.ndarray] = {}
    for i in range(loss.node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        fn = fns[i]
        if fn is None:
            out[i] = g
            continue
        for j, gj in zip(inputs[i], fn(g)):
            if j < 0 or gj is None:
                continue
            prev = grads[j]
            grads[j] = gj if prev is None else prev + gj
    return out


def _check_same(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear maps


def affine(x, W, bias) -> Tensor:
    """``x @ W.T + bias`` for x[a, b], W[c, b], bias[c]."""
    x, W, bias = as_tensor(x), as_tensor(W), as_tensor(bias)
    if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"affine: x {x.shape} incompatible with W {W.shape}")
    if bias.shape != (W.shape[0],):
        raise DimensionError(f"affine: bias {bias.shape} incompatible with W {W.shape}")
    xv, Wv = x.value, W.value
    out = xv @ Wv.T + bias.value

    def fn(g):
        return g @ Wv, g.T @ xv, g.sum(axis=0)

    return _record("affine", out, (x, W, bias), fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def fn(g):
        return g @ bv.T, av.T @ g

    return _record("matmul", av @ bv, (a, b), fn)


def matmul_nt(a, b) -> Tensor:
    """``a @ b.T``: pairwise row dot products."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"matmul_nt: {a.shape} @ {b.shape}.T")
    av, bv = a.value, b.value

    def fn(g):
        return g @ bv, g.T @ av

    return _record("matmul_nt", av @ bv.T, (a, b), fn)


def conv1d_stride2(x, kernels, bias) -> Tensor:
    """Stride-2 temporal cross-correlation with symmetric zero padding.

    ``kernels`` is laid out (out_channel, tap, in_channel). With padding
    (k - 1) / 2 the output has exactly T / 2 rows.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.value.ndim != 2 or kernels.value.ndim != 3:
        raise DimensionError(f"conv1d_stride2: x {x.shape}, kernels {kernels.shape}")
    T, d_in = x.shape
    d_out, k, kd_in = kernels.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d_stride2: kernel width must be odd, got {k}")
    if T % 2:
        raise PreconditionError(f"conv1d_stride2: temporal length must be even, got {T}")
    if kd_in != d_in or bias.shape != (d_out,):
        raise DimensionError(
            f"conv1d_stride2: x {x.shape}, kernels {kernels.shape}, bias {bias.shape}"
        )
    pad = (k - 1) // 2
    T_out = T // 2
    xp = np.zeros((T + 2 * pad, d_in))
    xp[pad:pad + T] = x.value
    # cols[t, j, :] = xp[2t + j]
    cols = np.stack([xp[j:j + 2 * T_out:2] for j in range(k)], axis=1)
    cols2 = cols.reshape(T_out, k * d_in)
    Kv = kernels.value.reshape(d_out, k * d_in)
    out = cols2 @ Kv.T + bias.value

    def fn(g):
        gK = (g.T @ cols2).reshape(d_out, k, d_in)
        gcols = (g @ Kv).reshape(T_out, k, d_in)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j:j + 2 * T_out:2] += gcols[:, j]
        return gxp[pad:pad + T], gK, g.sum(axis=0)

    return _record("conv1d_stride2", out, (x, kernels, bias), fn)


# ---------------------------------------------------------------- normalizers


def softmax_rows(x, mask=None) -> Tensor:
    """Row-wise softmax. ``mask`` (bool, broadcastable) drops columns; dropped
    entries get probability exactly 0."""
    x = as_tensor(x)
    if x.value.ndim != 2:
        raise DimensionError(f"softmax_rows: expected a matrix, got {x.shape}")
    z = x.value
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record("softmax_rows", p, (x,), fn)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)
    return _record("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return _record("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    av, bv = a.value, b.value
    return _record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _record("scale", x.value * c, (x,), lambda g: (g * c,))


def add_scalar(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _record("add_scalar", x.value + c, (x,), lambda g: (g,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.value))
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.value > 0
    return _record("relu", np.where(on, x.value, 0.0), (x,), lambda g: (g * on,))


def log(x, eps: float = 0.0) -> Tensor:
    x = as_tensor(x)
    z = x.value + eps
    return _record("log", np.log(z), (x,), lambda g: (g / z,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _record("square", xv * xv, (x,), lambda g: (2.0 * g * xv,))


# ---------------------------------------------------------------- structure


def concat_last_dim(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_last_dim: {a.shape} vs {b.shape}")
    n = a.shape[-1]
    out = np.concatenate([a.value, b.value], axis=-1)
    return _record("concat", out, (a, b), lambda g: (g[..., :n], g[..., n:]))


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    rows = x.shape[0]
    if not 0 <= start <= stop <= rows:
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for {x.shape}")

    def fn(g):
        full = np.zeros(x.shape)
        full[start:stop] = g
        return (full,)

    return _record("slice_rows", x.value[start:stop], (x,), fn)


def column(x, j: int) -> Tensor:
    """Column ``j`` of a matrix, as a 1 x rows matrix."""
    x = as_tensor(x)
    if x.value.ndim != 2 or not 0 <= j < x.shape[1]:
        raise DimensionError(f"column: index {j} out of range for {x.shape}")

    def fn(g):
        full = np.zeros(x.shape)
        full[:, j] = g[0]
        return (full,)

    return _record("column", x.value[:, j][None, :], (x,), fn)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _record("sum_all", np.array(x.value.sum()), (x,), lambda g: (np.full(shape, g),))


def sq_euclidean(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _check_same("sq_euclidean", x, y)
    diff = x.value - y.value
    return _record(
        "sq_euclidean", np.array((diff * diff).sum()), (x, y),
        lambda g: (2.0 * g * diff, -2.0 * g * diff),
    )


def row_norms(x) -> Tensor:
    """Euclidean norm of each row, shape (rows,). Zero rows get gradient 0."""
    x = as_tensor(x)
    n = np.sqrt((x.value * x.value).sum(axis=1))
    safe = np.where(n > 0, n, 1.0)

    def fn(g):
        return ((g / safe)[:, None] * x.value * (n > 0)[:, None],)

    return _record("row_norms", n, (x,), fn)


def max_pool_rows(x) -> Tensor:
    """Column-wise max over rows, shape (1, cols). Ties route to the first row."""
    x = as_tensor(x)
    idx = np.argmax(x.value, axis=0)
    cols = np.arange(x.shape[1])

    def fn(g):
        full = np.zeros(x.shape)
        full[idx, cols] = g[0]
        return (full,)

    return _record("max_pool_rows", x.value[idx, cols][None, :], (x,), fn)


def cosine_rows(a, B) -> Tensor:
    """Cosine similarity between the single row of ``a`` and each row of ``B``,
    shape (1, rows). Pairs involving a zero vector score 0."""
    a, B = as_tensor(a), as_tensor(B)
    if a.value.ndim != 2 or a.shape[0] != 1 or B.value.ndim != 2 or a.shape[1] != B.shape[1]:
        raise DimensionError(f"cosine_rows: {a.shape} vs {B.shape}")
    av, Bv = a.value[0], B.value
    na = np.sqrt(av @ av)
    nb = np.sqrt((Bv * Bv).sum(axis=1))
    ok = (nb > 0) & (na > 0)
    denom = np.where(ok, na * nb, 1.0)
    dots = Bv @ av
    cos = np.where(ok, dots / denom, 0.0)

    def fn(g):
        gg = np.where(ok, g[0], 0.0)
        na_safe = na if na > 0 else 1.0
        nb_safe = np.where(nb > 0, nb, 1.0)
        # d cos / d a = B_r / (|a||B_r|) - cos_r a / |a|^2
        ga = (gg / denom) @ Bv - (gg * cos).sum() * av / (na_safe * na_safe)
        gB = (gg / denom)[:, None] * av[None, :] - (gg * cos / (nb_safe * nb_safe))[:, None] * Bv
        return ga[None, :], gB

    return _record("cosine_rows", cos[None, :], (a, B), fn)


# ---------------------------------------------------------------- verification


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a dict of tensors (same keys as ``params``) to a scalar tensor.
    Relative error per coordinate is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    tape = Tape()
    bound = {k: tape.param(v) for k, v in params.items()}
    loss = f(bound)
    if loss.node is None:
        ad = {k: np.zeros(np.shape(v)) for k, v in params.items()}
    else:
        grads = backward(tape, loss)
        ad = {k: grads.get(t.node, np.zeros(t.shape)) for k, t in bound.items()}

    def value_at(name: str, arr: np.ndarray) -> float:
        consts = {k: Tensor(arr if k == name else v) for k, v in params.items()}
        return f(consts).item()

    worst = 0.0
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        g_ad = ad[name].reshape(-1)
        for i in range(base.size):
            probe = base.copy().reshape(-1)
            probe[i] = base.reshape(-1)[i] + eps
            up = value_at(name, probe.reshape(base.shape))
            probe[i] = base.reshape(-1)[i] - eps
            down = value_at(name, probe.reshape(base.shape))
            g_fd = (up - down) / (2.0 * eps)
            err = abs(g_ad[i] - g_fd) / max(1e-8, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, err)
    return worst
