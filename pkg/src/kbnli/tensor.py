"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (attention, encoders, classifiers) is built from the
small op set in this module. All data is 64-bit: the test harness leans on
finite-difference gradient checks at 1e-4/1e-5 relative tolerance, which
32-bit arithmetic cannot sustain.
"""

import numpy as np
from scipy.special import ndtr

# Additive surrogate for "dropped" attention entries. Large enough that
# exp() underflows to zero after max-subtraction, small enough to avoid
# inf - inf NaNs. Entries above the threshold count as kept.
MASK_FILL = -1e9
_KEEP_THRESHOLD = -1e8

_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    """N-dimensional float64 array with optional gradient tracking.

    Ops on tensors record a computation graph; calling ``backward()`` on a
    scalar result populates ``grad`` on every reachable tensor that has
    ``requires_grad`` set. Gradients accumulate additively when a tensor
    feeds multiple consumers.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Reverse sweep from a scalar loss.

        Visits the recorded graph in reverse topological order and
        accumulates gradients into every tensor marked ``requires_grad``.
        """
        if self.data.shape != ():
            raise ShapeError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _toposort(root):
    """Post-order over the recorded graph; parents precede their consumers."""
    order = []
    visited = set()
    stack = [(root, False)]
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
    return order


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    grad = _unbroadcast(grad, tensor.data.shape)
    tensor.grad = grad if tensor.grad is None else tensor.grad + grad


# -- elementwise and linear ops ---------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _from_op(data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _from_op(data, (a, b), backward)


def neg(a):
    def backward(g):
        _accumulate(a, -g)

    return _from_op(-a.data, (a,), backward)


def matmul(a, b):
    """Matrix product with numpy batch semantics on leading axes.

    Gradients: da = g @ b^T, db = a^T @ g, summed over broadcast axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.swapaxes(-1, -2))
        _accumulate(b, a.data.swapaxes(-1, -2) @ g)

    return _from_op(data, (a, b), backward)


def transpose_last(a):
    """Swap the last two axes."""
    def backward(g):
        _accumulate(a, g.swapaxes(-1, -2))

    return _from_op(a.data.swapaxes(-1, -2), (a,), backward)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, size in zip(tensors, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, start + size)
            _accumulate(t, g[tuple(index)])
            start += size

    return _from_op(data, tuple(tensors), backward)


def reduce_sum(a):
    """Sum of all entries, as a scalar tensor."""
    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _from_op(a.data.sum(), (a,), backward)


def tanh(a):
    y = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - y * y))

    return _from_op(y, (a,), backward)


def gelu(a):
    """Gaussian error linear unit, x * Phi(x) with the exact normal CDF.

    Phi is evaluated through the complementary error function (scipy ndtr),
    which keeps full precision deep in the tails: gelu(-10) comes out as
    -7.6e-23 rather than underflowing to -0.0.
    """
    cdf = ndtr(a.data)
    data = a.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        _accumulate(a, g * (cdf + a.data * pdf))

    return _from_op(data, (a,), backward)


# -- normalization, attention and loss kernels -------------------------------


def layer_norm(x, gain, shift, eps=1e-5):
    """Standardize the last axis to mean 0 / variance 1, then affine.

    ``gain`` and ``shift`` are (d,) vectors applied per feature.
    """
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    data = y * gain.data + shift.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * y).sum(axis=lead))
        _accumulate(shift, g.sum(axis=lead))
        dy = g * gain.data
        dx = inv * (
            dy
            - dy.mean(axis=-1, keepdims=True)
            - y * (dy * y).mean(axis=-1, keepdims=True)
        )
        _accumulate(x, dx)

    return _from_op(data, (x, gain, shift), backward)


def additive_mask(keep):
    """0/{-1e9} additive mask from a 0/1 keep indicator (plain array)."""
    keep = np.asarray(keep, dtype=np.float64)
    return np.where(keep > 0, 0.0, MASK_FILL)


def masked_softmax(logits, mask=None):
    """Softmax over the last axis with an optional additive drop mask.

    Mask entries are 0 (keep) or the -1e9 surrogate (drop). Dropped
    positions come out exactly 0; rows with every position dropped come out
    all-zero rather than NaN (such rows belong to padding and are discarded
    downstream).
    """
    logits = _as_tensor(logits)
    x = logits.data
    if mask is None:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=-1, keepdims=True)
    else:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        m = np.broadcast_to(m, x.shape)
        keep = m > _KEEP_THRESHOLD
        shifted = x + m
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        e = np.exp(shifted) * keep
        denom = e.sum(axis=-1, keepdims=True)
        p = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accumulate(logits, p * (g - dot))

    return _from_op(p, (logits,), backward)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer class labels.

    logits: (batch, classes); labels: (batch,) ints in [0, classes).
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy needs 2-d logits, got {logits.data.shape}")
    batch, n_classes = logits.data.shape
    if labels.shape != (batch,):
        raise ShapeError(
            f"labels shape {labels.shape} does not match batch size {batch}"
        )
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels out of range [0, {n_classes}): {labels}")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_z
    data = -log_p[np.arange(batch), labels].mean()

    def backward(g):
        grad = np.exp(log_p)
        grad[np.arange(batch), labels] -= 1.0
        _accumulate(logits, g * grad / batch)

    return _from_op(data, (logits,), backward)


# -- lookup, pooling and slicing ---------------------------------------------


def embedding(table, ids):
    """Row gather table[ids]; gradient scatter-adds into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise ValueError(
            f"ids out of range [0, {table.data.shape[0]}) in embedding lookup"
        )
    data = table.data[ids]

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        _accumulate(table, dt)

    return _from_op(data, (table,), backward)


def masked_max(x, keep):
    """Per-feature max over axis 1, restricted to keep==1 positions.

    x: (batch, length, d); keep: (batch, length). Each row must keep at
    least one position. Gradient routes to the (first) argmax position.
    """
    x = _as_tensor(x)
    keep = np.asarray(keep, dtype=np.float64)
    masked = np.where(keep[:, :, None] > 0, x.data, -1e30)
    idx = masked.argmax(axis=1)
    data = np.take_along_axis(masked, idx[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx[:, None, :], g[:, None, :], axis=1)
        _accumulate(x, dx)

    return _from_op(data, (x,), backward)


def masked_mean(x, keep):
    """Per-feature mean over axis 1, restricted to keep==1 positions."""
    x = _as_tensor(x)
    keep = np.asarray(keep, dtype=np.float64)
    counts = keep.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("masked_mean: a row keeps no positions")
    data = (x.data * keep[:, :, None]).sum(axis=1) / counts[:, None]

    def backward(g):
        dx = keep[:, :, None] * (g / counts[:, None])[:, None, :]
        _accumulate(x, dx)

    return _from_op(data, (x,), backward)


def take_position(x, pos):
    """Slice x[:, pos, :] out of a (batch, length, d) tensor."""
    x = _as_tensor(x)
    data = x.data[:, pos, :]

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, pos, :] = g
        _accumulate(x, dx)

    return _from_op(data, (x,), backward)


# -- gradient verification ----------------------------------------------------


def finite_diff_check(f, x, h=1e-5, max_samples=None, seed=0,
                      noise_floor=0.0):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of the tensor
    ``x`` (it may read ``x`` from a closure; the argument is the same
    object). Coordinates are all checked, or ``max_samples`` of them drawn
    with the given seed. Relative error uses the larger of the two gradient
    magnitudes, floored at 1e-8.

    Central differences on a loss of magnitude ~1 carry roughly
    eps/(2h) ~ 1e-11 of cancellation noise, so coordinates whose gradient
    is below ~1e-7 cannot be certified at any h. When ``noise_floor`` is
    positive, coordinates where both magnitudes fall under it are skipped;
    a wrong gradient at any measurable coordinate still registers.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x.grad = None
    out = f(x)
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    n = flat.size
    if max_samples is None or n <= max_samples:
        coords = np.arange(n)
    else:
        coords = np.random.default_rng(seed).choice(n, size=max_samples, replace=False)

    analytic_flat = analytic.reshape(-1)
    max_rel = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(x).data)
        flat[i] = orig - h
        f_minus = float(f(x).data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic_flat[i]
        if max(abs(a), abs(numeric)) < noise_floor:
            continue
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel
