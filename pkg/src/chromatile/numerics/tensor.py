"""Tensors and the differentiation tape.

A Tensor wraps a float32/float64 numpy array.  Operations from
``chromatile.numerics.ops`` record nodes on the innermost active Tape
(entered as a context manager); ``Tape.backward`` then walks the recorded
nodes once, in reverse, and returns a ``Gradients`` lookup.

Design constraints baked in here:

* the tape is append-only, so node order is a topological order for free;
* a tape is consumed by a single backward call and cannot be reused;
* gradients are retained for leaves (requires_grad tensors fed into taped
  ops) and for explicitly watched tensors; interior gradients are freed as
  soon as they have been propagated, to keep peak memory proportional to
  the forward pass;
* leaves that never influence the loss get zero gradients, not errors.
"""

import numpy as np

from chromatile.errors import UsageError

_FLOAT_DTYPES = (np.float32, np.float64)

_TAPE_STACK = []


def active_tape():
    """The innermost Tape currently entered, or None."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense n-dimensional float array, optionally tracked on a tape.

    ``node_id``/``tape`` identify the node that produced (or registered)
    this tensor on its most recent tape; both are None for tensors that
    have never touched a tape.
    """

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # Arithmetic sugar; the actual ops live in chromatile.numerics.ops and
    # are attached lazily to avoid a circular import.
    def __add__(self, other):
        from chromatile.numerics import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from chromatile.numerics import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from chromatile.numerics import ops

        return ops.mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__


class _Node:
    """One recorded operation: input node ids and a backward closure.

    ``leaf`` is the registered Tensor for leaf nodes and None for interior
    nodes; leaf nodes have no backward function.
    """

    __slots__ = ("inputs", "backward", "leaf")

    def __init__(self, inputs, backward, leaf=None):
        self.inputs = inputs
        self.backward = backward
        self.leaf = leaf


class Tape:
    """Append-only record of one forward pass.

    Use as a context manager::

        with Tape() as tape:
            loss = ...  # taped ops
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.nodes = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)

    def _register_leaf(self, tensor: Tensor) -> int:
        """Register ``tensor`` as a leaf of this tape (idempotent per tape)."""
        if tensor.tape is self and tensor.node_id is not None:
            return tensor.node_id
        node_id = len(self.nodes)
        self.nodes.append(_Node((), None, leaf=tensor))
        tensor.node_id = node_id
        tensor.tape = self
        return node_id

    def _record(self, input_ids, backward_fn) -> int:
        node_id = len(self.nodes)
        self.nodes.append(_Node(tuple(input_ids), backward_fn))
        return node_id

    def backward(self, loss: Tensor, watch=()) -> "Gradients":
        """Propagate from scalar ``loss`` back to every reachable node.

        Each node is visited exactly once, in reverse recording order.
        ``watch`` lists interior tensors whose gradients should be retained
        (everything else interior is freed once propagated).  Returns a
        Gradients object; query it with the same Tensor objects used in the
        forward pass.
        """
        if self._consumed:
            raise UsageError("tape already consumed by a previous backward call")
        if loss.tape is not self or loss.node_id is None:
            raise UsageError("loss tensor was not produced on this tape")
        if loss.data.size != 1:
            raise UsageError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        self._consumed = True

        watch_ids = set()
        for t in watch:
            if t.tape is not self or t.node_id is None:
                raise UsageError("watched tensor was not produced on this tape")
            watch_ids.add(t.node_id)

        grads = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones_like(loss.data)
        retained = {}
        for node_id in range(loss.node_id, -1, -1):
            grad_out = grads[node_id]
            if grad_out is None:
                continue
            node = self.nodes[node_id]
            if node.leaf is not None or node_id in watch_ids:
                retained[node_id] = grad_out
            grads[node_id] = None
            if node.backward is None:
                continue
            input_grads = node.backward(grad_out)
            for input_id, grad_in in zip(node.inputs, input_grads):
                if input_id is None or grad_in is None:
                    continue
                if grads[input_id] is None:
                    grads[input_id] = grad_in
                else:
                    grads[input_id] = grads[input_id] + grad_in
        return Gradients(self, retained)


class Gradients:
    """Gradient lookup returned by ``Tape.backward``.

    ``get(tensor)`` returns the gradient array for a leaf or watched tensor.
    A requires_grad tensor that never reached the loss (or never touched the
    tape) yields zeros of its shape, per the convention that unused leaves
    have zero gradient rather than being errors.
    """

    def __init__(self, tape: Tape, retained: dict):
        self._tape = tape
        self._retained = retained

    def get(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is self._tape and tensor.node_id is not None:
            if tensor.node_id in self._retained:
                return self._retained[tensor.node_id]
            node = self._tape.nodes[tensor.node_id]
            if node.leaf is None:
                raise UsageError(
                    "gradient for an interior tensor was not retained; "
                    "pass it via backward(..., watch=[tensor])"
                )
            return np.zeros_like(tensor.data)
        if tensor.requires_grad:
            return np.zeros_like(tensor.data)
        raise UsageError("tensor is not a leaf of this tape and does not require grad")
