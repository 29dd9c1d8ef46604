"""Dense float64 tensors and the operation tape for reverse-mode gradients.

Ops executed while a :class:`Tape` is active append one entry each, in
execution order, so the entry list is already a topological order of the
graph. ``backward`` sweeps it once in reverse, accumulating into ``.grad``
(repeated sweeps without a reset keep accumulating). ``Tape.replay``
re-executes every recorded forward from the current leaf values.

With no active tape, ops run forward-only: inference costs no recording.
"""

import numpy as np

_TAPE_STACK = []


class Tensor:
    """A dense float64 array plus an optional accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # Operator sugar delegates to the primitive registry in ops.py.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


class TapeEntry:
    __slots__ = ("op", "inputs", "outputs", "backward_fn", "forward_fn")

    def __init__(self, op, inputs, outputs, backward_fn, forward_fn):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn
        self.forward_fn = forward_fn


class Tape:
    """Ordered, acyclic record of the primitive ops of one forward pass."""

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.entries)

    def replay(self):
        """Re-run every recorded forward from current input values."""
        for entry in self.entries:
            if entry.forward_fn is None:
                continue
            new_values = entry.forward_fn()
            for out, value in zip(entry.outputs, new_values):
                out.data = value


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(op, inputs, outputs, backward_fn, forward_fn):
    tape = active_tape()
    if tape is not None:
        tape.entries.append(TapeEntry(op, inputs, outputs, backward_fn, forward_fn))


def accumulate(tensor, grad):
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def backward(loss, tape):
    """Reverse sweep: accumulate d(loss)/d(node) into every node's .grad.

    ``loss`` must be a scalar node of ``tape``. Each entry is visited
    exactly once, in reverse recording (= reverse topological) order.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    accumulate(loss, np.ones(()))
    for entry in reversed(tape.entries):
        if all(out.grad is None for out in entry.outputs):
            continue
        douts = tuple(
            out.grad if out.grad is not None else np.zeros_like(out.data)
            for out in entry.outputs
        )
        entry.backward_fn(douts)


def zero_grad(tensors):
    for t in tensors:
        t.grad = None
