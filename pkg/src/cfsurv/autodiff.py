"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Just enough machinery for recurrent cells, dense layers, kernel evaluations
and weighted log-likelihoods: no GPU, no graph compilation, no higher-order
derivatives. Gradients accumulate until explicitly zeroed.
"""

import numpy as np

LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class Node:
    """A value in the computation graph with a gradient slot.

    ``parents`` holds the input nodes; ``_backward`` is a closure that maps
    the gradient at this node onto gradient contributions for each parent.
    Leaf nodes (parameters, constants) have no parents.
    """

    __slots__ = ("value", "grad", "parents", "_backward", "name")

    def __init__(self, value, parents=(), backward=None, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Node({self.name or 'op'}, shape={self.value.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, as_node(other))

    def __radd__(self, other):
        return add(as_node(other), self)

    def __sub__(self, other):
        return sub(self, as_node(other))

    def __rsub__(self, other):
        return sub(as_node(other), self)

    def __mul__(self, other):
        return mul(self, as_node(other))

    def __rmul__(self, other):
        return mul(as_node(other), self)

    def __matmul__(self, other):
        return matmul(self, as_node(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return take(self, key)


def as_node(x):
    if isinstance(x, Node):
        return x
    return Node(x, name="const")


def constant(x, name="const"):
    return Node(x, name=name)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_elementwise(opname, a, b):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.value.shape} and {b.value.shape} do not broadcast"
        )


def add(a, b):
    a, b = as_node(a), as_node(b)
    _check_elementwise("add", a, b)
    out = Node(a.value + b.value, (a, b), name="add")

    def backward(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

    out._backward = backward
    return out


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _check_elementwise("sub", a, b)
    out = Node(a.value - b.value, (a, b), name="sub")

    def backward(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))

    out._backward = backward
    return out


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _check_elementwise("mul", a, b)
    out = Node(a.value * b.value, (a, b), name="mul")

    def backward(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    out._backward = backward
    return out


def div(a, b):
    """Elementwise a / b with the denominator clamped away from zero."""
    a, b = as_node(a), as_node(b)
    _check_elementwise("div", a, b)
    denom = np.where(np.abs(b.value) < LOG_CLAMP, LOG_CLAMP, b.value)
    out = Node(a.value / denom, (a, b), name="div")

    def backward(g):
        return (
            _unbroadcast(g / denom, a.value.shape),
            _unbroadcast(-g * a.value / denom**2, b.value.shape),
        )

    out._backward = backward
    return out


def scale(a, c):
    a = as_node(a)
    c = float(c)
    out = Node(a.value * c, (a,), name="scale")
    out._backward = lambda g: (g * c,)
    return out


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: shapes {a.value.shape} and {b.value.shape} not conformable"
        )
    out = Node(a.value @ b.value, (a, b), name="matmul")

    def backward(g):
        return (g @ b.value.T, a.value.T @ g)

    out._backward = backward
    return out


def transpose(a):
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got shape {a.value.shape}")
    out = Node(a.value.T, (a,), name="transpose")
    out._backward = lambda g: (g.T,)
    return out


def sigmoid(a):
    a = as_node(a)
    s = 1.0 / (1.0 + np.exp(-np.clip(a.value, -500, 500)))
    out = Node(s, (a,), name="sigmoid")
    out._backward = lambda g: (g * s * (1.0 - s),)
    return out


def tanh(a):
    a = as_node(a)
    t = np.tanh(a.value)
    out = Node(t, (a,), name="tanh")
    out._backward = lambda g: (g * (1.0 - t * t),)
    return out


def exp(a):
    a = as_node(a)
    e = np.exp(a.value)
    out = Node(e, (a,), name="exp")
    out._backward = lambda g: (g * e,)
    return out


def log(a):
    """Natural log with inputs clamped to >= LOG_CLAMP."""
    a = as_node(a)
    clamped = np.maximum(a.value, LOG_CLAMP)
    out = Node(np.log(clamped), (a,), name="log")

    def backward(g):
        # no gradient through the clamp region
        return (np.where(a.value >= LOG_CLAMP, g / clamped, 0.0),)

    out._backward = backward
    return out


def square(a):
    a = as_node(a)
    out = Node(a.value**2, (a,), name="square")
    out._backward = lambda g: (2.0 * g * a.value,)
    return out


def softmax(a):
    """Softmax over the last axis, with the row max subtracted for stability."""
    a = as_node(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Node(p, (a,), name="softmax")

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    out._backward = backward
    return out


def concat(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat: empty input list")
    out = Node(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes),
               name="concat")
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    out._backward = backward
    return out


def take(a, key):
    """Slice / index; gradient scattered back to the source positions."""
    a = as_node(a)
    out = Node(a.value[key], (a,), name="take")

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        return (full,)

    out._backward = backward
    return out


def reshape(a, shape):
    a = as_node(a)
    out = Node(a.value.reshape(shape), (a,), name="reshape")
    out._backward = lambda g: (g.reshape(a.value.shape),)
    return out


def sum_(a, axis=None):
    a = as_node(a)
    out = Node(a.value.sum(axis=axis), (a,), name="sum")

    def backward(g):
        if axis is None:
            return (np.full_like(a.value, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy(),)

    out._backward = backward
    return out


def mean_(a, axis=None):
    a = as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def topo_order(root):
    """Nodes reachable from root in topological order (parents first)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(node) into .grad for every reachable node.

    Requires a scalar-valued root. Gradients add onto whatever is already in
    the .grad slots, so zero them before a fresh pass.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")
    order = topo_order(root)
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = np.array(pg, dtype=np.float64)
            else:
                acc += pg


def zero_grads(nodes):
    for n in nodes:
        n.zero_grad()


def grad_check(f, params, step=1e-5, tol=1e-4):
    """Compare reverse-mode gradients of f(params) against central differences.

    f must return a scalar Node. Returns a dict with the max relative
    deviation over all coordinates and a pass flag.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    zero_grads(params)
    out = f(params)
    if not np.isfinite(out.value).all():
        raise FloatingPointError("grad_check: non-finite function value")
    backward(out)
    analytic = [p.grad.copy() for p in params]

    max_dev = 0.0
    for p, ag in zip(params, analytic):
        flat = p.value.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = float(f(params).value)
            flat[idx] = orig - step
            lo = float(f(params).value)
            flat[idx] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError("grad_check: non-finite value at probe point")
            numeric = (hi - lo) / (2.0 * step)
            a = ag.ravel()[idx]
            dev = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            max_dev = max(max_dev, dev)
    return {"max_rel_dev": max_dev, "passed": max_dev <= tol}
