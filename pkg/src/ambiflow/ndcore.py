"""Dense float64 tensors with reverse-mode automatic differentiation.

The computation graph is carried by the tensors themselves: every operation
records its parents and a vector-Jacobian-product closure on the result, and
``backward``/``grad`` walk that linked structure in reverse topological
order.  All vjp closures are written in terms of tensor operations, so
gradients can be re-traced (``create_graph=True``) to differentiate through
a gradient, which is what the critic's gradient penalty needs.

Everything is float64 and CPU-only.  Each op checks its output for
non-finite values and raises :class:`NumericError` naming the op.
"""

import hashlib

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor", "as_tensor", "constant", "no_grad", "is_grad_enabled",
    "add", "sub", "neg", "mul", "div", "matmul", "exp", "arctan", "relu",
    "leaky_relu", "absolute", "sqrt", "sqrt_guarded", "square", "tsum", "tmean", "reshape",
    "swap_last_axes", "broadcast_to", "concat", "split", "narrow", "take",
    "put", "stop_gradient", "l1_norm", "l2_norm_sq", "clamp_min",
    "backward", "grad", "zeros_like", "clip_gradients", "adam_step", "Adam",
    "rng_from",
]

_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A float64 array plus the graph node that produced it.

    ``data`` is row-major float64; ``grad`` is filled by :func:`backward`
    on leaf tensors that have ``requires_grad`` set.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return stop_gradient(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r})"

    # arithmetic sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def constant(x):
    """Wrap data as a non-differentiable tensor."""
    return as_tensor(x)


def zeros_like(t):
    return Tensor(np.zeros_like(t.data))


def _make(op, data, parents, vjp):
    """Create the result tensor of `op`, recording the node if needed."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite result in op '{op}'")
    rec = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if rec:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _reduce_to(t, shape):
    """Sum out broadcast axes of `t` so its shape becomes `shape`."""
    if t.shape == tuple(shape):
        return t
    extra = t.ndim - len(shape)
    if extra > 0:
        t = tsum(t, axis=tuple(range(extra)))
    hit = tuple(i for i, n in enumerate(shape) if n == 1 and t.shape[i] != 1)
    if hit:
        t = tsum(t, axis=hit, keepdims=True)
    if t.shape != tuple(shape):
        raise ShapeError(f"cannot reduce {t.shape} to {tuple(shape)}")
    return t


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e
    return _make("add", data, (a, b),
                 lambda cot: (_reduce_to(cot, a.shape), _reduce_to(cot, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from e
    return _make("sub", data, (a, b),
                 lambda cot: (_reduce_to(cot, a.shape), _reduce_to(neg(cot), b.shape)))


def neg(a):
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda cot: (neg(cot),))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e
    return _make("mul", data, (a, b),
                 lambda cot: (_reduce_to(mul(cot, b), a.shape),
                              _reduce_to(mul(cot, a), b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"div: {a.shape} vs {b.shape}") from e
    return _make("div", data, (a, b),
                 lambda cot: (_reduce_to(div(cot, b), a.shape),
                              _reduce_to(neg(div(mul(cot, a), mul(b, b))), b.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    return _make("matmul", data, (a, b),
                 lambda cot: (_reduce_to(matmul(cot, swap_last_axes(b)), a.shape),
                              _reduce_to(matmul(swap_last_axes(a), cot), b.shape)))


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)
    # capture the array, not the tensor: a closure over `out` would form a
    # reference cycle that keeps whole graphs alive until a full gc pass
    out = _make("exp", data, (a,), None)
    if out.requires_grad:
        out._vjp = lambda cot: (mul(cot, constant(data)),)
    return out


def arctan(a):
    a = as_tensor(a)
    denom = 1.0 + a.data * a.data
    return _make("arctan", np.arctan(a.data), (a,),
                 lambda cot: (mul(cot, constant(1.0 / denom)),))


def relu(a):
    """max(x, 0); the subgradient at 0 is fixed to 0."""
    a = as_tensor(a)
    mask = (a.data > 0.0).astype(np.float64)
    return _make("relu", a.data * mask, (a,),
                 lambda cot: (mul(cot, constant(mask)),))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    scale = np.where(a.data > 0.0, 1.0, slope)
    return _make("leaky_relu", a.data * scale, (a,),
                 lambda cot: (mul(cot, constant(scale)),))


def absolute(a):
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,),
                 lambda cot: (mul(cot, constant(sign)),))


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)
    out = _make("sqrt", data, (a,), None)
    if out.requires_grad:
        out._vjp = lambda cot: (div(mul(cot, 0.5), constant(data)),)
    return out


def sqrt_guarded(a, eps=1e-12):
    """sqrt with the gradient denominator floored at eps.

    The value is the exact square root; only the backward pass clamps, so
    sqrt of an exact zero contributes a zero (not NaN) gradient.
    """
    a = as_tensor(a)
    data = np.sqrt(a.data)
    out = _make("sqrt_guarded", data, (a,), None)
    if out.requires_grad:
        denom = np.maximum(data, eps)
        out._vjp = lambda cot: (div(mul(cot, 0.5), constant(denom)),)
    return out


def square(a):
    a = as_tensor(a)
    return mul(a, a)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(cot):
        if axis is None:
            kd_shape = (1,) * a.ndim
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            kd_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
        g = cot if keepdims and axis is not None else reshape(cot, kd_shape)
        return (broadcast_to(g, a.shape),)

    return _make("sum", data, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax % a.ndim]
    # true division, so the result matches np.mean bit for bit
    return div(tsum(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return _make("reshape", data, (a,), lambda cot: (reshape(cot, a.shape),))


def swap_last_axes(a):
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError("swap_last_axes needs >= 2 dims")
    data = np.swapaxes(a.data, -1, -2)
    return _make("swapT", data, (a,), lambda cot: (swap_last_axes(cot),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"broadcast {a.shape} to {shape}") from e
    return _make("broadcast", data, (a,), lambda cot: (_reduce_to(cot, a.shape),))


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[p.shape for p in parts]}") from e

    def vjp(cot):
        out, start = [], 0
        for p in parts:
            n = p.shape[axis]
            out.append(narrow(cot, axis, start, n))
            start += n
        return tuple(out)

    return _make("concat", data, tuple(parts), vjp)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along `axis`."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    data = a.data[tuple(idx)].copy()

    def vjp(cot):
        before = start
        after = a.shape[axis] - start - length
        pad = [(0, 0)] * a.ndim
        pad[axis] = (before, after)
        return (_pad_zeros(cot, pad),)

    return _make("narrow", data, (a,), vjp)


def _pad_zeros(a, pad):
    a = as_tensor(a)
    data = np.pad(a.data, pad)

    def vjp(cot):
        idx = tuple(slice(b, cot.shape[i] - e) for i, (b, e) in enumerate(pad))
        return (narrow_multi(cot, idx),)

    return _make("pad", data, (a,), vjp)


def narrow_multi(a, idx):
    a = as_tensor(a)
    data = a.data[idx].copy()

    def vjp(cot):
        pad = []
        for i, s in enumerate(idx):
            b = s.start or 0
            e = a.shape[i] - (s.stop if s.stop is not None else a.shape[i])
            pad.append((b, e))
        return (_pad_zeros(cot, pad),)

    return _make("narrow_multi", data, (a,), vjp)


def split(a, sizes, axis=0):
    """Split into consecutive chunks of the given sizes along `axis`."""
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {sizes} != dim {a.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        out.append(narrow(a, axis, start, n))
        start += n
    return out


def take(a, indices, axis):
    """Gather `indices` along `axis` (used for fixed permutations)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    data = np.take(a.data, indices, axis=axis)
    return _make("take", data, (a,),
                 lambda cot: (put(cot, indices, axis, a.shape[axis]),))


def put(a, indices, axis, size):
    """Scatter-add rows of `a` into a zero tensor of extent `size` on `axis`."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape = list(a.shape)
    shape[axis] = size
    data = np.zeros(shape, dtype=np.float64)
    idx = [slice(None)] * a.ndim
    moved = np.moveaxis(data, axis, 0)
    np.add.at(moved, indices, np.moveaxis(a.data, axis, 0))
    return _make("put", data, (a,),
                 lambda cot: (take(cot, indices, axis),))


def stop_gradient(a):
    """Detach from the graph: upstream gradients become exactly zero."""
    a = as_tensor(a)
    return Tensor(a.data)


def l1_norm(a):
    return tsum(absolute(a))


def l2_norm_sq(a):
    return tsum(mul(a, a))


def clamp_min(a, lo):
    """max(a, lo) elementwise with constant lo; gradient is 0 below lo."""
    return add(relu(sub(a, lo)), lo)


# ---------------------------------------------------------------------------
# reverse pass

def _topo(out):
    order, seen, stack = [], set(), [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(out, create_graph):
    if out.size != 1:
        raise ShapeError("backward requires a scalar output")
    order = _topo(out)
    cots = {id(out): constant(np.ones_like(out.data))}
    for node in reversed(order):
        cot = cots.pop(id(node), None)
        if cot is None or node._vjp is None:
            if cot is not None:
                cots[id(node)] = cot
            continue
        if create_graph:
            pcots = node._vjp(cot)
        else:
            with no_grad():
                pcots = node._vjp(cot)
        for p, pc in zip(node._parents, pcots):
            if pc is None or not p.requires_grad:
                continue
            prev = cots.get(id(p))
            if prev is None:
                cots[id(p)] = pc
            elif create_graph:
                cots[id(p)] = add(prev, pc)
            else:
                with no_grad():
                    cots[id(p)] = add(prev, pc)
    return order, cots


def backward(out):
    """Accumulate gradients of scalar `out` into `.grad` of all leaves.

    Returns the dict of leaf tensor -> gradient array.  Leaves that do not
    influence `out` are not visited; missing entries mean zero.
    """
    order, cots = _backprop(out, create_graph=False)
    leaves = {}
    for node in order:
        if node._vjp is None and node.requires_grad:
            g = cots.get(id(node))
            garr = g.data if g is not None else np.zeros_like(node.data)
            node.grad = garr if node.grad is None else node.grad + garr
            leaves[node] = node.grad
    return leaves


def grad(out, wrt, create_graph=False):
    """Gradients of scalar `out` w.r.t. the tensors in `wrt`.

    Tensors without influence on `out` get zero gradients.  With
    ``create_graph=True`` the returned tensors stay differentiable.
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    _, cots = _backprop(out, create_graph)
    gs = []
    for t in targets:
        g = cots.get(id(t))
        gs.append(g if g is not None else zeros_like(t))
    return gs[0] if single else gs


# ---------------------------------------------------------------------------
# optimization helpers

def clip_gradients(grads, lo=-15.0, hi=15.0):
    """Elementwise clamp of gradient arrays into [lo, hi]."""
    if lo > hi:
        raise ValueError(f"clip range inverted: {lo} > {hi}")
    single = isinstance(grads, np.ndarray)
    gs = [grads] if single else list(grads)
    out = [np.clip(g, lo, hi) for g in gs]
    return out[0] if single else out


def adam_step(param, g, m, v, t, lr, beta1=0.5, beta2=0.9, eps=1e-8):
    """One bias-corrected Adam update; returns (param, m, v) arrays."""
    if g.shape != param.shape:
        raise ShapeError(f"adam: grad {g.shape} vs param {param.shape}")
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param = param - lr * mhat / (np.sqrt(vhat) + eps)
    return param, m, v


class Adam:
    """Adam over a fixed list of leaf tensors; reads their `.grad` arrays."""

    def __init__(self, params, lr=1e-4, beta1=0.5, beta2=0.9, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            p.data, self.m[i], self.v[i] = adam_step(
                p.data, g, self.m[i], self.v[i], self.t,
                self.lr, self.beta1, self.beta2, self.eps)

    def state_arrays(self):
        """Optimizer state in declared parameter order (for checkpoints)."""
        return self.m, self.v, self.t

    def load_state(self, m, v, t):
        assert len(m) == len(self.params) and len(v) == len(self.params)
        self.m = [np.array(a, dtype=np.float64) for a in m]
        self.v = [np.array(a, dtype=np.float64) for a in v]
        self.t = int(t)


# ---------------------------------------------------------------------------
# deterministic randomness

def rng_from(seed, label=""):
    """Counter-based generator derived from (seed, label).

    Philox streams keyed by a hash of the pair, so every component draws
    from its own reproducible stream regardless of call order elsewhere.
    """
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
