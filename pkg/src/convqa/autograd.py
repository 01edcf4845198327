"""Dense tensors with reverse-mode automatic differentiation.

Everything the conv seq2seq model needs: a Tensor wrapping a numpy array,
the differentiable ops (conv1d, GLU, softmax, embedding lookup, dropout,
cross entropy, matmul and friends), topological backprop, the Adam
optimizer, and a finite-difference gradient checker.

Precision: float32 is the training default, float64 the verification mode
(gradient tolerances are meaningless at float32). Ops preserve the dtype of
their inputs.

Gradient contract: ``backward`` accumulates into ``.grad``; repeated calls
without ``zero_grad`` keep accumulating. The optimizer never touches grads —
the caller zeroes them between steps.

Forward ops never mutate their inputs; only grad buffers and leaf parameter
data (via Adam) are written in place, under a single-writer contract per
model graph.
"""

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the attempted op."""


class EmbeddingIndexError(IndexError):
    """A lookup id fell outside the embedding table; carries the id."""

    def __init__(self, token_id, vocab_size):
        super().__init__(f"id {token_id} out of range for table of {vocab_size} rows")
        self.token_id = token_id
        self.vocab_size = vocab_size


class MissingGradError(RuntimeError):
    """A registered parameter had no gradient at optimizer step time."""


class Tensor:
    """N-d array node in the computation graph.

    ``data`` is row-major float32/float64; ``grad`` stays None until a
    backward pass reaches this tensor (requires_grad only). Non-leaf tensors
    keep references to their parents and a closure that scatters the chain
    rule into them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op})"

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        out = Tensor(self.data, requires_grad=False)
        out._op = "detach"
        return out

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return mul(tensor_sum(self, axis=axis, keepdims=keepdims), 1.0 / float(n))


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out._op = op
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _as_array(x, dtype):
    if isinstance(x, Tensor):
        raise TypeError("expected a constant, got a Tensor")
    return np.asarray(x, dtype=dtype)


def add(a, b):
    if not isinstance(b, Tensor):
        c = _as_array(b, a.dtype)
        out = _make(a.data + c, (a,), None, "add_const")
        out._backward = lambda g: a._accumulate(_unbroadcast(g, a.shape))
        return out
    data = a.data + b.data

    def backward_fn(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward_fn, "add")


def mul(a, b):
    if not isinstance(b, Tensor):
        c = _as_array(b, a.dtype)
        out = _make(a.data * c, (a,), None, "mul_const")
        out._backward = lambda g: a._accumulate(_unbroadcast(g * c, a.shape))
        return out
    data = a.data * b.data

    def backward_fn(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward_fn, "mul")


def matmul(a, b):
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(data, (a, b), backward_fn, "matmul")


def reshape(a, shape):
    data = a.data.reshape(shape)

    def backward_fn(g):
        a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward_fn, "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        a._accumulate(g.transpose(inverse))

    return _make(data, (a,), backward_fn, "transpose")


def concat(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            t._accumulate(piece)

    return _make(data, tensors, backward_fn, "concat")


def tensor_sum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return _make(data, (a,), backward_fn, "sum")


def sigmoid(a):
    data = _stable_sigmoid(a.data)

    def backward_fn(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward_fn, "sigmoid")


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def conv1d(x, weight, bias=None, pad_left=0, pad_right=0):
    """1-d cross-correlation over [batch, channels, length].

    Zero-pads the length axis by (pad_left, pad_right) first; output length
    is len + pad_left + pad_right − k + 1. Symmetric (k−1)/2 padding keeps
    the length, pad_left=k−1 gives the causal variant.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d wants 3-d operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv1d channel mismatch: input {x.shape} has {x.shape[1]} channels, "
            f"kernel {weight.shape} expects {weight.shape[1]}"
        )
    k = weight.shape[2]
    if k < 1:
        raise ShapeError(f"kernel width must be >= 1, got {k}")
    padded_len = x.shape[2] + pad_left + pad_right
    if padded_len < k:
        raise ShapeError(f"padded length {padded_len} shorter than kernel width {k}")

    # np.pad keeps the input's memory order; the kernels want C layout
    xp = np.ascontiguousarray(np.pad(x.data, ((0, 0), (0, 0), (pad_left, pad_right))))
    w = np.ascontiguousarray(weight.data)
    data = kernels.conv1d_forward(xp, w)
    if bias is not None:
        data = data + bias.data[None, :, None]

    def backward_fn(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            gxp = kernels.conv1d_grad_input(g, w, padded_len)
            end = gxp.shape[2] - pad_right
            x._accumulate(gxp[:, :, pad_left:end])
        if weight.requires_grad:
            weight._accumulate(kernels.conv1d_grad_weight(g, xp, k))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, parents, backward_fn, "conv1d")


def glu(x, axis=1):
    """Gated linear unit: split channels into content a and gate b, a ⊙ σ(b)."""
    channels = x.shape[axis]
    if channels % 2 != 0:
        raise ShapeError(f"glu needs an even extent on axis {axis}, got {channels} in {x.shape}")
    half = channels // 2
    head = [slice(None)] * x.ndim
    tail = [slice(None)] * x.ndim
    head[axis] = slice(0, half)
    tail[axis] = slice(half, channels)
    head, tail = tuple(head), tuple(tail)
    a = x.data[head]
    gate = _stable_sigmoid(x.data[tail])
    data = a * gate

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[head] = g * gate
        gx[tail] = g * a * gate * (1.0 - gate)
        x._accumulate(gx)

    return _make(data, (x,), backward_fn, "glu")


def softmax(x, axis=-1):
    """Max-subtracted softmax along ``axis``; rows sum to 1 for finite input."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        x._accumulate(data * (g - inner))

    return _make(data, (x,), backward_fn, "softmax")


def embedding_lookup(table, ids):
    """Row gather [vocab, dim] × [batch, len] → [batch, len, dim].

    Gradient scatter-adds into the table, so repeated ids accumulate.
    """
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])].ravel()[0]
        raise EmbeddingIndexError(int(bad), table.shape[0])
    data = table.data[ids]

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(gt)

    return _make(data, (table,), backward_fn, "embedding")


def dropout(x, keep_prob, training, rng):
    """Inverted dropout: keep with probability keep_prob, scale kept by 1/keep_prob.

    Identity in evaluation mode and at keep_prob=1, so decoding is scale-free.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / x.dtype.type(keep_prob)
    out = _make(x.data * mask, (x,), None, "dropout")
    out._backward = lambda g: x._accumulate(g * mask)
    return out


def cross_entropy(logits, targets, ignore_index=None):
    """Mean negative log-softmax probability of the targets.

    Positions whose target equals ignore_index contribute nothing; if every
    position is ignored the loss is defined as 0 with zero gradient.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy wants [n, vocab] logits and [n] targets, got {logits.shape} and {targets.shape}")
    keep = np.ones(targets.shape[0], dtype=bool) if ignore_index is None else targets != ignore_index
    n_kept = int(keep.sum())

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp

    safe_targets = np.where(keep, targets, 0)
    picked = logp[np.arange(targets.shape[0]), safe_targets]
    if n_kept == 0:
        value = logits.dtype.type(0.0)
    else:
        value = -(picked * keep).sum() / n_kept

    def backward_fn(g):
        if n_kept == 0:
            logits._accumulate(np.zeros_like(logits.data))
            return
        probs = np.exp(logp)
        probs[np.arange(targets.shape[0]), safe_targets] -= 1.0
        probs[~keep] = 0.0
        logits._accumulate(g * probs / n_kept)

    return _make(np.asarray(value, dtype=logits.dtype), (logits,), backward_fn, "cross_entropy")


def backward(loss):
    """Reverse-topological backprop from a scalar loss.

    Populates .grad on every reachable requires_grad tensor, accumulating on
    top of whatever is already there.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    # interior grads are per-call scratch; only leaves accumulate across calls
    for node in order:
        if node._parents:
            node.grad = None
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


class Adam:
    """Bias-corrected Adam over named parameters.

    Holds first/second moments per parameter and the shared step counter;
    ``step`` raises MissingGradError (naming the parameter) when a registered
    parameter arrives without a gradient. Grads are read, never written.
    """

    def __init__(self, params, lr=2.5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradError(f"parameter {name!r} has no gradient")
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / correction1
            v_hat = v / correction2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def grad_check(fn, inputs, eps=1e-5):
    """Max relative error between autograd and central finite differences.

    ``fn`` maps the input tensors to a scalar Tensor and must be
    deterministic across calls (reseed any rng inside). Inputs must be
    float64 — the tolerance is meaningless at float32. Relative error uses
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")

    out = fn(*inputs)
    for t in inputs:
        t.zero_grad()
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn(*inputs).data)
            flat[i] = orig - eps
            f_minus = float(fn(*inputs).data)
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)
        af = a.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(af), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(af - numeric) / denom)))
    return worst
