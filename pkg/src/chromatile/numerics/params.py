"""Named parameter collections and the plain SGD update."""

import numpy as np

from chromatile.errors import UsageError
from chromatile.numerics.tensor import Gradients, Tensor


class ParameterSet:
    """Ordered mapping of unique names to trainable Tensors.

    Iteration order is insertion order, which keeps weight initialization,
    checkpoint layout, and update order deterministic.
    """

    def __init__(self):
        self._params = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise UsageError(f"parameter {name!r} must require gradients")
        self._params[name] = tensor
        return tensor

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise UsageError(f"unknown parameter {name!r}") from None

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def count_values(self) -> int:
        """Total number of scalar weights across all parameters."""
        return sum(int(t.data.size) for t in self._params.values())

    def grads(self, gradients: Gradients) -> dict:
        """Extract one gradient array per parameter (zeros for unused ones)."""
        return {name: gradients.get(t) for name, t in self._params.items()}


def sgd_step(params: ParameterSet, grads: dict, lr: float) -> None:
    """In-place ``p -= lr * g`` for every parameter.

    Plain gradient descent, no momentum or weight decay.  Updates mutate the
    parameter arrays so that model layers holding the same Tensor objects see
    the new values.  Missing or mis-shaped gradients are contract violations.
    """
    for name, p in params.items():
        if name not in grads:
            raise UsageError(f"missing gradient for parameter {name!r}")
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise UsageError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {p.data.shape}"
            )
        p.data -= lr * g
