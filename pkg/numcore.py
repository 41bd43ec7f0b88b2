"""
Dense float64 tensors with reverse-mode differentiation, first-order optimizers and seeded randomness

Every loss in this project is composed from the operators defined here:
matmul, add/sub/mul/div/neg, relu, exp, log, sqrt, softmax, log_softmax,
logsumexp, l2_normalize, cosine_sim, sum/mean, transpose, reshape, concat,
take_rows, pick, clip and minimum.
"""
import contextlib
import zlib
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

import config
from scalecomm_utils import DomainError, StructuralError

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Build tensors without recording parents (rollouts, EMA forward passes)"""
    previous = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = previous


class Tensor:
    """Value-semantic float64 array that optionally records how it was computed"""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._op = "leaf"
        self._backward = None

    @classmethod
    def _wrap(cls, data, parents, op, backward):
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        track = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._op = op
        out._backward = backward if track else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = None

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


def as_tensor(x):
    """Wrap numbers and arrays as constant tensors"""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _expand_reduced(grad, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(grad, shape)
    if not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


# ----------------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._wrap(
        a.data + b.data, (a, b), "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._wrap(
        a.data - b.data, (a, b), "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._wrap(
        a.data * b.data, (a, b), "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    return Tensor._wrap(
        a.data / b.data, (a, b), "div",
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a):
    a = as_tensor(a)
    return Tensor._wrap(-a.data, (a,), "neg", lambda g: (-g,))


def square(a):
    return mul(a, a)


def relu(a):
    a = as_tensor(a)
    active = a.data > 0
    return Tensor._wrap(a.data * active, (a,), "relu", lambda g: (g * active,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._wrap(out, (a,), "exp", lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return Tensor._wrap(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    safe = np.where(out > 0, out, np.inf)
    return Tensor._wrap(out, (a,), "sqrt", lambda g: (0.5 * g / safe,))


def clip(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._wrap(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * inside,))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return Tensor._wrap(
        np.minimum(a.data, b.data), (a, b), "minimum",
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


# ----------------------------------------------------------------------------
# Linear algebra and shape
# ----------------------------------------------------------------------------

def matmul(a, b):
    """a: (M, n) or (B, M, n); b: (n, p)"""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim not in (2, 3) or a.shape[-1] != b.shape[0]:
        raise StructuralError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        grad_a = g @ b.data.T
        grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return grad_a, grad_b

    return Tensor._wrap(a.data @ b.data, (a, b), "matmul", backward)


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise StructuralError("transpose expects a matrix")
    return Tensor._wrap(a.data.T, (a,), "transpose", lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor._wrap(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._wrap(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward)


def take_rows(a, index):
    """Rows a[index] along the first axis; repeated indices accumulate gradient"""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return Tensor._wrap(a.data[index], (a,), "take_rows", backward)


def pick(a, index):
    """a[i, index[i]] for a matrix a"""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])
    if index.shape != (a.shape[0],):
        raise StructuralError("pick needs one column index per row")

    def backward(g):
        grad = np.zeros_like(a.data)
        grad[rows, index] = g
        return (grad,)

    return Tensor._wrap(a.data[rows, index], (a,), "pick", backward)


# ----------------------------------------------------------------------------
# Reductions and normalizations
# ----------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    return Tensor._wrap(
        a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum",
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),),
    )


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise DomainError(f"non-finite {what}")


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    _check_finite(a.data, "logsumexp input")
    peak = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out = peak + np.log(total)
    weights = shifted / total
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) * weights,)

    return Tensor._wrap(out, (a,), "logsumexp", backward)


def softmax(a, temperature=1.0, axis=-1):
    a = as_tensor(a)
    if temperature <= 0:
        raise DomainError("softmax temperature must be positive")
    _check_finite(a.data, "logit")
    x = a.data / temperature
    shifted = np.exp(x - x.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) / temperature,)

    return Tensor._wrap(out, (a,), "softmax", backward)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    _check_finite(a.data, "logit")
    peak = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - peak
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._wrap(out, (a,), "log_softmax", backward)


def l2_normalize(a, axis=-1, eps=0.0):
    """
    Divide by the L2 norm along an axis

    With eps=0 a zero-norm slice raises DomainError; with eps>0 the norm is
    floored at eps.
    """
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if eps <= 0 and np.any(norm == 0):
        raise DomainError("cannot normalize a zero-norm vector")
    clamped = norm < eps if eps > 0 else np.zeros_like(norm, dtype=bool)
    denom = np.where(clamped, eps, norm)
    out = a.data / denom

    def backward(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(clamped, g / denom, (g - out * radial) / denom),)

    return Tensor._wrap(out, (a,), "l2_normalize", backward)


def cosine_sim(a, b):
    """a·b / (‖a‖‖b‖) for two equal-length vectors"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape or a.size < 1:
        raise StructuralError(f"cosine_sim needs equal-length vectors, got {a.shape} and {b.shape}")
    return tsum(l2_normalize(a) * l2_normalize(b))


def cosine_sim_matrix(a, b, eps=0.0):
    """Pairwise cosine similarities between rows of a (n, d) and rows of b (m, d)"""
    return matmul(l2_normalize(a, eps=eps), transpose(l2_normalize(b, eps=eps)))


# ----------------------------------------------------------------------------
# Reverse pass
# ----------------------------------------------------------------------------

class ComputeGraph:
    """Nodes reachable from a scalar loss, in topological order (inputs first)"""

    def __init__(self, nodes: List[Tensor]):
        self.order = nodes

    @classmethod
    def trace(cls, loss: Tensor):
        order = []
        state: Dict[int, int] = {}
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            key = id(node)
            if expanded:
                state[key] = 2
                order.append(node)
                continue
            seen = state.get(key, 0)
            if seen == 2:
                continue
            if seen == 1:
                raise StructuralError("cycle detected in compute graph")
            state[key] = 1
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and state.get(id(parent), 0) != 2:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.order)


def backward(loss: Tensor, graph: Optional[ComputeGraph] = None, params: Optional[Sequence[Tensor]] = None):
    """
    Accumulate d(loss)/d(node) into .grad of every node that requires grad

    Args:
        loss: Scalar tensor
        graph: Pre-traced graph (traced from loss when omitted)
        params: Parameters whose grad is set to zeros when the loss does not depend on them

    Returns:
        The traced ComputeGraph
    """
    if loss.data.size != 1:
        raise StructuralError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = ComputeGraph.trace(loss) if loss.requires_grad else ComputeGraph([])
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
    for p in params or ():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        elif not np.all(np.isfinite(p.grad)):
            raise DomainError(f"non-finite gradient in parameter {p.name or '?'}")
    return graph


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h=1e-5):
    """
    Compare analytic gradients against central finite differences

    Args:
        fn: Zero-argument function rebuilding the scalar loss from params
        params: Tensors to check
        h: Finite-difference step

    Returns:
        Largest per-tensor relative error ‖g_analytic - g_numeric‖ / (‖g_analytic‖ + ‖g_numeric‖)
    """
    for p in params:
        p.zero_grad()
    backward(fn(), params=params)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = fn().item()
            flat[i] = original - h
            minus = fn().item()
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2 * h)
        scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
        if scale > 1e-12:
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


# ----------------------------------------------------------------------------
# Optimizers
# ----------------------------------------------------------------------------

class Optimizer:
    """Shared bookkeeping for first-order optimizers"""

    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr <= 0:
            raise DomainError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if len(grads) != len(self.params):
            raise StructuralError("one gradient per parameter required")
        for p, g in zip(self.params, grads):
            if np.shape(g) != p.shape:
                raise StructuralError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        self.step_count += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = np.asarray(g, dtype=np.float64)
            if not np.any(g):
                continue
            self._update(i, p, g)

    def _update(self, i, p, g):
        raise NotImplementedError


class SGD(Optimizer):
    """Plain gradient descent"""

    def _update(self, i, p, g):
        p.data -= self.lr * g


class Adam(Optimizer):
    """Adam with per-parameter moments; parameters with an all-zero gradient are skipped"""

    def __init__(self, params, lr, beta1=config.ADAM_BETA1, beta2=config.ADAM_BETA2, eps=config.ADAM_EPS):
        super().__init__(params, lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = [0] * len(self.params)

    def _update(self, i, p, g):
        self.t[i] += 1
        self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
        self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
        m_hat = self.m[i] / (1 - self.beta1 ** self.t[i])
        v_hat = self.v[i] / (1 - self.beta2 ** self.t[i])
        p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimizer_step(params: Sequence[Tensor], grads, optimizer: Optimizer):
    """Apply one optimizer step to params (which must be the optimizer's own parameters)"""
    if len(params) != len(optimizer.params) or any(a is not b for a, b in zip(params, optimizer.params)):
        raise StructuralError("params do not match the optimizer's parameter list")
    optimizer.step(grads)
    return params


# ----------------------------------------------------------------------------
# Seeded randomness
# ----------------------------------------------------------------------------

class Rng:
    """Seeded random stream; child streams are derived deterministically from names"""

    def __init__(self, seed):
        self.seed = int(seed) % (2 ** 64)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys):
        words = [self.seed % (2 ** 32), self.seed // (2 ** 32)]
        for key in keys:
            words.append(zlib.crc32(str(key).encode("utf-8")))
        state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
        return Rng(int(state[0]) | (int(state[1]) << 32))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, n, p=None):
        return int(self.generator.choice(n, p=p))


def he_uniform(rng: Rng, fan_in, fan_out, name=None):
    """Scaled uniform fan-in initialization as a trainable tensor"""
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros(*shape, name=None, requires_grad=True):
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)
