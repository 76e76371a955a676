"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus an optional record of the operation that
produced it (parent tensors and a backward rule).  Graphs are built
implicitly during the forward pass and consumed by a single call to
`backward`; rebuild the graph for every new forward pass.

Arithmetic runs in float32 by default; switch to float64 for gradient
testing with `set_default_dtype`.
"""

import contextlib

import numpy as np

from ..errors import ContractViolation, InternalError

_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractViolation(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def dtype_scope(dtype):
    """Temporarily change the default dtype (used by gradient tests)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """n-dimensional array node of the differentiation graph.

    `data` is always a numpy array; `grad` is lazily allocated and only ever
    populated on tensors with `requires_grad=True`.
    """

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None,
                 op_name=""):
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._op_name = op_name
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        """Leaf view sharing this tensor's storage; gradients do not flow."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def reshape(self, *shape) -> "Tensor":
        from . import ops
        return ops.reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None) -> "Tensor":
        from . import ops
        return ops.sum_(self, axis=axis)

    def mean(self, axis=None) -> "Tensor":
        from . import ops
        return ops.mean(self, axis=axis)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.neg(as_tensor(other)))

    def __rsub__(self, other):
        from . import ops
        return ops.add(as_tensor(other), ops.neg(self))

    def __repr__(self):
        tag = f" op={self._op_name}" if self._op_name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{tag})"


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    """Create a leaf tensor, copying `data` into the default dtype."""
    arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return tensor(value)


def _toposort(root: Tensor):
    # Iterative DFS with tri-state marks; a gray revisit means a cycle.
    order = []
    state = {}  # id -> 1 (in progress) / 2 (done)
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        nid = id(node)
        if processed:
            state[nid] = 2
            order.append(node)
            continue
        mark = state.get(nid)
        if mark == 2:
            continue
        if mark == 1:
            raise InternalError("cycle detected in autodiff graph")
        state[nid] = 1
        stack.append((node, True))
        for p in node._parents:
            if state.get(id(p)) != 2:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Accumulates the full gradient into `.grad` of every reachable tensor
    with `requires_grad=True`.  The graph is single-use: a second sweep over
    the same nodes raises.
    """
    if loss.data.size != 1:
        raise ContractViolation(
            f"backward() needs a scalar loss, got shape {tuple(loss.shape)}")
    order = _toposort(loss)
    for node in order:
        if node._backward_fn is not None and node._consumed:
            raise ContractViolation("graph already consumed by a previous backward()")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is None:
            continue
        node._consumed = True
        if node.grad is None:
            continue  # no gradient path reached this node
        parent_grads = node._backward_fn(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
            else:
                parent.grad += g
    # Intermediate grads are kept on requires_grad tensors; buffers owned by
    # the closures are released with the graph itself.


def gradients(loss: Tensor, named) -> dict:
    """Run backward and return {name: gradient array} for the given leaves."""
    for t in named.values():
        t.zero_grad()
    backward(loss)
    out = {}
    for name, t in named.items():
        if t.requires_grad:
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return out
