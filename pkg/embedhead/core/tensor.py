# Dense tensors with reverse-mode automatic differentiation

import math
import logging

import numpy as np

from embedhead.core.common import TensorError


logger = logging.getLogger('embedhead')

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

_debug = False

def set_debug(flag):
    '''
    In debug mode every op checks its output for NaN/Inf
    '''
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ('data', 'requires_grad', 'grad', 'name', '_parents', '_backward')

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        data = np.asarray(data, dtype=np.float64)
        self.data = data if data.flags.c_contiguous else data.copy()
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad and not _parents else None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        return '<Tensor %s%s%s>' % (self.name + ' ' if self.name else '', list(self.shape), ' grad' if self.requires_grad else '')

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise TensorError('item() needs a single-element tensor, got shape %s' % list(self.shape))
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)

def _make(data, parents, backward, opname):
    if _debug and not np.all(np.isfinite(data)):
        raise TensorError('Non-finite value produced by %s' % opname)
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked:
        return Tensor(data)
    return Tensor(data, requires_grad=True, name=opname, _parents=parents, _backward=backward)

def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64)
    else:
        tensor.grad = tensor.grad + grad

def _unbroadcast(grad, shape):
    '''
    Sums grad over the axes along which an operand of the given shape was broadcast
    '''
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad

def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise TensorError('%s: shapes %s and %s do not conform' % (opname, list(a.shape), list(b.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise TensorError('matmul: shapes %s and %s do not conform' % (list(a.shape), list(b.shape)))
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            _accumulate(b, a2.T @ g.reshape(-1, b.shape[1]))
    return _make(out, (a, b), backward, 'matmul')

def bmm(a, b):
    '''
    Batched product over identical leading axes: (..., n, k) @ (..., k, m)
    '''
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise TensorError('bmm: shapes %s and %s do not conform' % (list(a.shape), list(b.shape)))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)
    return _make(a.data @ b.data, (a, b), backward, 'bmm')

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'add')

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), backward, 'add')

def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'sub')

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))
    return _make(a.data - b.data, (a, b), backward, 'sub')

def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'mul')

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), backward, 'mul')

def scale(a, c):
    a, c = as_tensor(a), float(c)

    def backward(g):
        _accumulate(a, g * c)
    return _make(a.data * c, (a,), backward, 'scale')

def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)
    return _make(a.data * mask, (a,), backward, 'relu')

def gelu(a):
    '''
    Tanh approximation 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    '''
    a = as_tensor(a)
    x = a.data
    t = np.tanh(GELU_C * (x + GELU_A * x**3))

    def backward(g):
        dt = (1 - t**2) * GELU_C * (1 + 3 * GELU_A * x**2)
        _accumulate(a, g * (0.5 * (1 + t) + 0.5 * x * dt))
    return _make(0.5 * x * (1 + t), (a,), backward, 'gelu')

def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)
    return _make(out, (a,), backward, 'exp')

def power(a, exponent):
    a, e = as_tensor(a), float(exponent)
    if e == 0:
        return _make(np.ones_like(a.data), (a,), lambda g: _accumulate(a, np.zeros_like(g)), 'power')

    def backward(g):
        _accumulate(a, g * e * a.data**(e - 1))
    return _make(a.data**e, (a,), backward, 'power')

def softplus(a):
    a = as_tensor(a)

    def backward(g):
        sig = np.exp(-np.logaddexp(0.0, -a.data))
        _accumulate(a, g * sig)
    return _make(np.logaddexp(0.0, a.data), (a,), backward, 'softplus')

def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)

def softmax(a):
    a = as_tensor(a)
    s = _softmax(a.data)

    def backward(g):
        _accumulate(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))
    return _make(s, (a,), backward, 'softmax')

def log_softmax(a):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        _accumulate(a, g - np.exp(out) * g.sum(axis=-1, keepdims=True))
    return _make(out, (a,), backward, 'log_softmax')

def layer_norm(a, gain, bias, eps=1e-5):
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise TensorError('layer_norm: input %s, gain %s and bias %s do not conform' % (list(a.shape), list(gain.shape), list(bias.shape)))
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        if a.requires_grad:
            gx = g * gain.data
            _accumulate(a, inv_std * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
        _accumulate(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        _accumulate(bias, g.reshape(-1, n).sum(axis=0))
    return _make(xhat * gain.data + bias.data, (a, gain, bias), backward, 'layer_norm')

def concat(tensors):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise TensorError('concat: nothing to concatenate')
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise TensorError('concat: shapes %s and %s do not conform' % (list(tensors[0].shape), list(t.shape)))
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            _accumulate(t, g[..., lo:hi])
    return _make(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), backward, 'concat')

def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, 'reduce_sum')

def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis, keepdims), 1.0 / count)

def reshape(a, shape):
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))
    return _make(a.data.reshape(shape), (a,), backward, 'reshape')

def transpose(a, axes=None):
    a = as_tensor(a)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))
    return _make(np.transpose(a.data, axes), (a,), backward, 'transpose')

def pick(a, indices):
    '''
    Row-wise selection out[i] = a[i, indices[i]] from a 2-D tensor
    '''
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2 or indices.shape != (a.shape[0],):
        raise TensorError('pick: tensor %s and indices %s do not conform' % (list(a.shape), list(indices.shape)))
    if len(indices) and (indices.min() < 0 or indices.max() >= a.shape[1]):
        raise TensorError('pick: index outside [0, %s)' % a.shape[1])
    rows = np.arange(a.shape[0])

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, indices] = g
        _accumulate(a, full)
    return _make(a.data[rows, indices], (a,), backward, 'pick')

def dropout(a, rate, train, rng):
    a = as_tensor(a)
    if not 0 <= rate < 1:
        raise TensorError('dropout rate %s outside [0, 1)' % rate)
    if not train or rate == 0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def backward(g):
        _accumulate(a, g * mask)
    return _make(a.data * mask, (a,), backward, 'dropout')


def backward(root):
    '''
    Populates .grad of every tracked tensor reachable from the scalar root
    '''
    if root.data.size != 1:
        raise TensorError('backward needs a scalar root, got shape %s' % list(root.shape))
    if not root.requires_grad:
        raise TensorError('backward root is not attached to any tracked tensor')

    order, visited = [], set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    for node in order:
        if node._parents:
            node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def finite_diff_check(function, params, eps=1e-4, max_coords=None, seed=0):
    '''
    Central differences against the analytic gradient
    @returns max over coordinates of |a - n| / max(1e-8, |a| + |n|)
    '''
    for p in params:
        p.zero_grad()
    backward(function())
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = function().item()
            flat[i] = orig - eps
            f_minus = function().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = grad.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
    return worst
