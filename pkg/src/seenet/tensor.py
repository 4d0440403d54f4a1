"""Minimal reverse-mode tensor engine.

Provides exactly the differentiable operations the self-erasing attention
graph needs: 2-D convolution, plain and mask-conditioned rectifiers, global
average pooling, a numerically stable multi-label BCE loss, elementwise
add/sum, and an SGD update. Tensors wrap dense float32 numpy arrays (float64
is used by the finite-difference oracle); gradients are accumulated on a
dynamic tape that is freed as soon as ``backward`` has consumed it.

Masks are plain integer arrays with values in {-1, 0, +1}. They are treated
as constants: no gradient ever flows into a mask.

Thread use: operations are pure functions, so disjoint graphs may run on
different threads, but a single graph (and a single backward pass) belongs
to one thread. Parameters accumulate gradients across backward calls until
an optimizer step clears them, which is what makes per-item graphs with a
summed reduction equivalent to one batched graph.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, DataIOError, GradCheckError

__all__ = [
    "Tensor",
    "conv2d",
    "relu",
    "c_relu",
    "c_relu_forward",
    "c_relu_backward",
    "global_avg_pool",
    "bce_multilabel_loss",
    "add",
    "tsum",
    "sgd_step",
    "SGD",
    "finite_diff_check",
    "record_kinks",
    "save_tensor",
    "load_tensor",
    "write_tensor",
    "read_tensor",
]


class Tensor:
    """A node in a dynamic reverse-mode graph.

    ``data`` is a dense numpy array (float32 by default), ``grad`` is either
    None or an array of the same shape. Leaf tensors created with
    ``requires_grad=True`` accumulate gradients across backward passes until
    an optimizer step clears them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def backward(self) -> None:
        """Run reverse-mode accumulation from a scalar output.

        The graph below this node is released afterwards; leaf gradients
        stay in place so several backward passes can accumulate.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward: output must be a scalar, got shape {self.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._backward = None
            node._parents = ()
            if not node.requires_grad:
                node.grad = None

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative post-order walk; parents land before their consumers.
    order: list[Tensor] = []
    visited = {id(root)}
    stack: list[tuple[Tensor, iter]] = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Rebinding (never in-place) so gradient arrays are safe to share.
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# kink recording (used by the finite-difference checker)
# ---------------------------------------------------------------------------

_KINK_LOG: list | None = None


@contextmanager
def record_kinks():
    """Collect the activation sign patterns and masks seen during a forward.

    The finite-difference checker compares these records across perturbed
    evaluations: a coordinate whose perturbation flips a rectifier sign or a
    threshold-derived mask sits next to a kink and is skipped.
    """
    global _KINK_LOG
    prev = _KINK_LOG
    _KINK_LOG = []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


def _log_kink(pattern: np.ndarray, mask: np.ndarray | None = None) -> None:
    if _KINK_LOG is not None:
        _KINK_LOG.append((pattern, None if mask is None else mask.copy()))


def _records_match(a: list, b: list) -> bool:
    if len(a) != len(b):
        return False
    for (pa, ma), (pb, mb) in zip(a, b):
        if not np.array_equal(pa, pb):
            return False
        if (ma is None) != (mb is None):
            return False
        if ma is not None and not np.array_equal(ma, mb):
            return False
    return True


# ---------------------------------------------------------------------------
# mask helpers
# ---------------------------------------------------------------------------

def _check_mask_values(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (-1, 0, 1)).all():
        bad = mask[~np.isin(mask, (-1, 0, 1))].ravel()[0]
        raise ContractError(f"mask values must lie in {{-1, 0, +1}}, found {bad!r}")
    return mask


def _broadcast_mask(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Align an [H,W] (or [N,H,W]) mask with a [C,H,W] (or [N,C,H,W]) tensor."""
    if x.ndim == 3:
        if mask.ndim != 2 or mask.shape != x.shape[1:]:
            raise ContractError(
                f"mask spatial shape {mask.shape} does not match input {x.shape[1:]}"
            )
        return mask[None, :, :]
    if x.ndim == 4:
        if mask.ndim == 2:
            if mask.shape != x.shape[2:]:
                raise ContractError(
                    f"mask spatial shape {mask.shape} does not match input {x.shape[2:]}"
                )
            return mask[None, None, :, :]
        if mask.ndim != 3 or mask.shape != (x.shape[0],) + x.shape[2:]:
            raise ContractError(
                f"per-sample mask shape {mask.shape} does not match input {x.shape}"
            )
        return mask[:, None, :, :]
    raise ContractError(f"expected a 3-D or 4-D activation tensor, got {x.shape}")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x`` [C_in,H,W] (or [N,C_in,H,W]) with ``weight``
    [C_out,C_in,k,k] plus ``bias`` [C_out].

    Output spatial size is floor((H + 2*pad - k)/stride) + 1; trailing rows
    or columns that do not fit a full stride are unused (and receive zero
    gradient). Raises ContractError when shapes are inconsistent or the
    output would be empty.
    """
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    xd = x.data
    batched = xd.ndim == 4
    if xd.ndim == 3:
        xd = xd[None]
    elif xd.ndim != 4:
        raise ContractError(f"conv2d: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    wd = weight.data
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise ContractError(f"conv2d: weight must be [C_out,C_in,k,k], got {weight.shape}")
    n, c_in, h, w = xd.shape
    c_out, wc_in, k, _ = wd.shape
    if wc_in != c_in:
        raise ContractError(
            f"conv2d: input has {c_in} channels but weight expects {wc_in}"
        )
    if bias.data.shape != (c_out,):
        raise ContractError(
            f"conv2d: bias shape {bias.shape} does not match {c_out} output channels"
        )
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    if h + 2 * pad < k or w + 2 * pad < k or h_out < 1 or w_out < 1:
        raise ContractError(
            f"conv2d: kernel {k} with pad {pad} does not fit input {h}x{w}"
        )

    if pad:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = xd
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # [N, H', W', C_in, k, k] -> one big [N*H'*W', C_in*k*k] matrix
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * h_out * w_out, c_in * k * k
    )
    w_mat = wd.reshape(c_out, -1)
    out2d = cols @ w_mat.T
    out2d += bias.data
    out = out2d.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out if batched else out[0])

    def backward_fn(grad_out: np.ndarray) -> None:
        g = grad_out if batched else grad_out[None]
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, c_out)
        if weight.requires_grad:
            _accumulate(weight, (g2d.T @ cols).reshape(wd.shape))
        if bias.requires_grad:
            _accumulate(bias, g2d.sum(axis=0))
        if x.requires_grad:
            gcols = g2d @ w_mat  # [N*H'*W', C_in*k*k]
            gcols = gcols.reshape(n, h_out, w_out, c_in, k, k).transpose(0, 3, 1, 2, 4, 5)
            gx = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gx[
                        :,
                        :,
                        ki : ki + stride * h_out : stride,
                        kj : kj + stride * w_out : stride,
                    ] += gcols[:, :, :, :, ki, kj]
            if pad:
                gx = gx[:, :, pad : pad + h, pad : pad + w]
            _accumulate(x, gx if batched else gx[0])

    return _make(out, (x, weight, bias), backward_fn)


def relu(x: Tensor) -> Tensor:
    """max(x, 0), elementwise."""
    xd = x.data
    _log_kink(xd > 0)
    out = np.maximum(xd, 0)

    def backward_fn(grad_out: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, grad_out * (xd > 0))

    return _make(out, (x,), backward_fn)


def _c_relu_data(xd: np.ndarray, bmask: np.ndarray) -> np.ndarray:
    return np.maximum(xd, 0) * bmask


def c_relu(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mask-conditioned rectifier: max(x, 0) * mask, mask in {-1, 0, +1}.

    A mask of +1 behaves like plain ReLU, 0 erases the location, and -1
    reverses the sign of the rectified activation. The mask covers the
    spatial extent and is broadcast over channels; it is a constant with
    respect to differentiation.
    """
    mask = _check_mask_values(mask)
    bmask = _broadcast_mask(x.data, mask)
    xd = x.data
    _log_kink(xd > 0, mask)
    out = _c_relu_data(xd, bmask)

    def backward_fn(grad_out: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, grad_out * bmask * (xd > 0))

    return _make(out, (x,), backward_fn)


def c_relu_forward(x: Tensor, mask: np.ndarray) -> Tensor:
    """Untaped forward rule of :func:`c_relu` (same semantics, no graph)."""
    mask = _check_mask_values(mask)
    bmask = _broadcast_mask(x.data, mask)
    return Tensor(_c_relu_data(x.data, bmask), dtype=x.data.dtype)


def c_relu_backward(grad_out: Tensor, x: Tensor, mask: np.ndarray) -> Tensor:
    """Gradient of :func:`c_relu` with respect to ``x``:
    grad_out * mask where x > 0, zero elsewhere. The mask gets no gradient."""
    mask = _check_mask_values(mask)
    bmask = _broadcast_mask(x.data, mask)
    if grad_out.data.shape != x.data.shape:
        raise ContractError(
            f"c_relu_backward: grad shape {grad_out.shape} != input shape {x.shape}"
        )
    return Tensor(grad_out.data * bmask * (x.data > 0), dtype=x.data.dtype)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial extent: [C,H,W] -> [C] (or [N,C,H,W] -> [N,C])."""
    xd = x.data
    if xd.ndim not in (3, 4):
        raise ContractError(f"global_avg_pool: expected [C,H,W] or [N,C,H,W], got {x.shape}")
    h, w = xd.shape[-2:]
    if h < 1 or w < 1:
        raise ContractError("global_avg_pool: empty spatial extent")
    out = xd.mean(axis=(-2, -1))

    def backward_fn(grad_out: np.ndarray) -> None:
        if x.requires_grad:
            g = np.broadcast_to(grad_out[..., None, None] / (h * w), xd.shape)
            _accumulate(x, np.ascontiguousarray(g))

    return _make(out, (x,), backward_fn)


def bce_multilabel_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over independent per-class logits.

    ``target`` entries must be exactly 0 or 1. Computed as
    max(z,0) - z*t + log1p(exp(-|z|)), which never overflows.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    z = logits.data
    if t.shape != z.shape:
        raise ContractError(f"bce: target shape {t.shape} != logits shape {z.shape}")
    if z.size == 0:
        raise ContractError("bce: empty logits")
    if not np.isin(t, (0.0, 1.0)).all():
        raise ContractError("bce: target values must be exactly 0 or 1")
    t = t.astype(z.dtype, copy=False)
    elems = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(elems.mean(), dtype=z.dtype)

    def backward_fn(grad_out: np.ndarray) -> None:
        if logits.requires_grad:
            _accumulate(logits, (expit(z) - t) * (grad_out / z.size))

    return _make(out, (logits,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ContractError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward_fn(grad_out: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, grad_out)
        if b.requires_grad:
            _accumulate(b, grad_out)

    return _make(out, (a, b), backward_fn)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    xd = x.data
    out = np.asarray(xd.sum(), dtype=xd.dtype)

    def backward_fn(grad_out: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(grad_out, xd.shape).copy())

    return _make(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(params: Sequence[Tensor], lr: float, weight_decay: float = 0.0) -> None:
    """p <- p - lr * (grad + weight_decay * p) for every parameter, then
    clear all gradients. Raises ContractError if any parameter lacks a grad."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError("sgd_step: parameter has no populated gradient")
    for p in params:
        p.data = p.data - lr * (p.grad + weight_decay * p.data)
        p.grad = None


class SGD:
    """SGD with optional momentum; momentum=0 reduces to :func:`sgd_step`."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity: list[np.ndarray | None] = [None] * len(self.params)

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ContractError("SGD.step: parameter has no populated gradient")
        for i, p in enumerate(self.params):
            g = p.grad + self.weight_decay * p.data
            if self.momentum:
                v = self._velocity[i]
                v = g if v is None else self.momentum * v + g
                self._velocity[i] = v
                g = v
            p.data = p.data - self.lr * g
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of a scalar function against central
    differences, coordinate by coordinate.

    Returns the max over checked coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Coordinates
    whose perturbation flips a rectifier sign pattern or a threshold-derived
    mask (i.e. sit within eps of a kink) are skipped. ``f`` must be
    deterministic and must read ``x.data`` fresh on every call; run the
    check in float64 for a sharp oracle. ``max_coords`` limits the check to
    a random coordinate subset (requires ``rng``).
    """
    if eps <= 0:
        raise ContractError(f"finite_diff_check: eps must be positive, got {eps}")
    if not x.requires_grad:
        raise ContractError("finite_diff_check: x must have requires_grad=True")
    base = x.data.copy()
    x.grad = None
    with record_kinks() as rec0:
        y = f(x)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ContractError("finite_diff_check: f must return a scalar Tensor")
    if not np.isfinite(y.data):
        raise GradCheckError(f"finite_diff_check: f(x) is non-finite ({float(y.data)})")
    y.backward()
    analytic = np.zeros_like(base) if x.grad is None else x.grad.copy()
    x.grad = None

    n = base.size
    if max_coords is not None and max_coords < n:
        if rng is None:
            raise ContractError("finite_diff_check: max_coords requires an rng")
        coords = rng.choice(n, size=max_coords, replace=False)
    else:
        coords = range(n)

    worst = 0.0
    for i in coords:
        x.data = base.copy()
        x.data.flat[i] += eps
        with record_kinks() as rec_p:
            yp = f(x)
        x.data = base.copy()
        x.data.flat[i] -= eps
        with record_kinks() as rec_m:
            ym = f(x)
        if not (np.isfinite(yp.data) and np.isfinite(ym.data)):
            raise GradCheckError("finite_diff_check: perturbed f(x) is non-finite")
        if not (_records_match(rec0, rec_p) and _records_match(rec0, rec_m)):
            continue  # perturbation crossed a kink
        numeric = (float(yp.data) - float(ym.data)) / (2 * eps)
        ana = float(analytic.flat[i])
        rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
        worst = max(worst, rel)
    x.data = base
    return worst


# ---------------------------------------------------------------------------
# binary tensor format: magic "SETN", u8 rank, u32 dims (LE), f32 payload
# ---------------------------------------------------------------------------

_MAGIC = b"SETN"


def write_tensor(fh, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise ContractError(f"tensor rank {arr.ndim} exceeds format limit")
    fh.write(_MAGIC)
    fh.write(struct.pack("<B", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise DataIOError(f"bad tensor magic {magic!r}, expected {_MAGIC!r}")
    rank = struct.unpack("<B", fh.read(1))[0]
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise DataIOError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_tensor(path, array: np.ndarray) -> None:
    try:
        with open(path, "wb") as fh:
            write_tensor(fh, array)
    except OSError as exc:
        raise DataIOError(f"cannot write tensor to {path}: {exc}") from exc


def load_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            return read_tensor(fh)
    except OSError as exc:
        raise DataIOError(f"cannot read tensor from {path}: {exc}") from exc
