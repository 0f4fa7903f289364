"""Reverse-mode differentiation tape.

A :class:`Tape` records every arithmetic step of a forward computation as an
append-only list of nodes, so append order is already a valid topological
order. Each node stores its value, its parent nodes and a closure computing
the parents' adjoints from the node's own adjoint. One reverse sweep over the
recorded nodes yields the gradient of a scalar output with respect to every
leaf touched by the forward pass.

Values are numpy arrays (0-d arrays for scalars). Nodes may hold whole
signals or spectrogram matrices: keeping windowed transforms and convolutions
as single vector nodes keeps the tape short even for long signals.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError

__all__ = ["Tape", "Var"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    """One recorded node: a value plus the recipe for its parents' adjoints."""

    __slots__ = ("value", "tape", "index", "parents", "_backward", "op", "grad")

    def __init__(self, value, tape: "Tape", index: int, parents, backward, op: str):
        self.value = value
        self.tape = tape
        self.index = index
        self.parents = parents
        self._backward = backward
        self.op = op
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape}, index={self.index})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Var):
            return self.tape.op(
                self.value + other.value,
                (self, other),
                lambda g, a=self.value.shape, b=other.value.shape: (
                    _unbroadcast(g, a),
                    _unbroadcast(g, b),
                ),
                "add",
            )
        c = np.asarray(other, dtype=float)
        return self.tape.op(
            self.value + c,
            (self,),
            lambda g, a=self.value.shape: (_unbroadcast(g, a),),
            "add_const",
        )

    __radd__ = __add__

    def __neg__(self):
        return self.tape.op(-self.value, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        if isinstance(other, Var):
            return self.tape.op(
                self.value - other.value,
                (self, other),
                lambda g, a=self.value.shape, b=other.value.shape: (
                    _unbroadcast(g, a),
                    -_unbroadcast(g, b),
                ),
                "sub",
            )
        return self + (-np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape.op(
                self.value * other.value,
                (self, other),
                lambda g, x=self.value, y=other.value: (
                    _unbroadcast(g * y, x.shape),
                    _unbroadcast(g * x, y.shape),
                ),
                "mul",
            )
        c = np.asarray(other, dtype=float)
        return self.tape.op(
            self.value * c,
            (self,),
            lambda g, a=self.value.shape: (_unbroadcast(g * c, a),),
            "mul_const",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return self.tape.op(
                self.value / other.value,
                (self, other),
                lambda g, x=self.value, y=other.value: (
                    _unbroadcast(g / y, x.shape),
                    _unbroadcast(-g * x / (y * y), y.shape),
                ),
                "div",
            )
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        c = np.asarray(other, dtype=float)
        return self.tape.op(
            c / self.value,
            (self,),
            lambda g, y=self.value: (_unbroadcast(-g * c / (y * y), y.shape),),
            "rdiv_const",
        )


class Tape:
    """Append-only record of a forward computation.

    One tape serves one forward/backward pair; build a fresh tape per
    training step.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> Var:
        """Register an input node that gradients should be reported for."""
        return self.op(np.asarray(value, dtype=float), (), None, "leaf")

    def op(self, value, parents: Sequence[Var], backward: Callable | None, op: str) -> Var:
        node = Var(np.asarray(value, dtype=float), self, len(self.nodes), tuple(parents), backward, op)
        self.nodes.append(node)
        return node

    def backward(self, output: Var) -> None:
        """Reverse sweep from `output`, accumulating `.grad` on every
        ancestor node. `output` must be a scalar recorded on this tape.
        """
        if output.tape is not self:
            raise ValueError("output was recorded on a different tape")
        if output.value.size != 1:
            raise ValueError("backward target must be scalar")
        if not np.isfinite(output.value):
            raise NumericalError(
                f"non-finite forward value at node #{output.index} op={output.op!r}"
            )
        output.grad = np.ones_like(output.value)
        for node in reversed(self.nodes[: output.index + 1]):
            if node.grad is None or node._backward is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, pgrad in zip(node.parents, parent_grads):
                if pgrad is None:
                    continue
                if not np.all(np.isfinite(pgrad)):
                    raise NumericalError(
                        f"non-finite gradient flowing into node #{parent.index} "
                        f"op={parent.op!r} (from node #{node.index} op={node.op!r})"
                    )
                if parent.grad is None:
                    parent.grad = np.array(pgrad, dtype=float, copy=True)
                else:
                    parent.grad = parent.grad + pgrad

    def gradient(self, output: Var, leaf: Var) -> np.ndarray:
        """Run :meth:`backward` and return the adjoint of `leaf` (zeros if
        the output does not depend on it)."""
        self.backward(output)
        if leaf.grad is None:
            return np.zeros_like(leaf.value)
        return np.asarray(leaf.grad, dtype=float)
