"""Dense tensors with reverse-mode differentiation on an explicit tape.

The graph is define-by-run: executing an op appends one node to the module
tape, and ``backward`` replays the tape in reverse. The tape is meant to be
reset between training steps. Two precision modes exist so gradients can be
checked tightly in float64 while normal runs stay in float32; tensors of
different modes must not be mixed in one graph.
"""

import contextlib

import numpy as np

from ..errors import DimensionError, UsageError

_MODE_DTYPES = {"standard": np.float32, "verification": np.float64}
_mode = "standard"


def precision_mode():
    return _mode


def set_precision(mode):
    global _mode
    if mode not in _MODE_DTYPES:
        raise UsageError(f"unknown precision mode {mode!r}")
    _mode = mode


def current_dtype():
    return _MODE_DTYPES[_mode]


@contextlib.contextmanager
def precision(mode):
    prev = _mode
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(prev)


class Node:
    """One executed op: inputs, output and the rule pulling gradients back."""

    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    def __init__(self):
        self.nodes = []

    def reset(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_tape = Tape()
_grad_enabled = True


def tape():
    return _tape


def reset_tape():
    _tape.reset()


class no_grad:
    """Context manager suppressing tape recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled():
    return _grad_enabled


class Tensor:
    """Dense array (up to 4 dims, row-major) with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "velocity")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else current_dtype())
        if arr.ndim > 4:
            raise DimensionError(f"tensors support at most 4 dims, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.velocity = None  # populated lazily by the optimizer

    # -- construction helpers ------------------------------------------------
    @staticmethod
    def _wrap(data, requires_grad):
        t = Tensor.__new__(Tensor)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.velocity = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        # gradients are never mutated in place, so aliasing the first
        # contribution is safe
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"


def check_same_dtype(*tensors):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise UsageError(f"tensors from different precision modes mixed in one graph: {dtypes}")


def record(op, inputs, out_data, backward):
    """Wrap an op result and push its node onto the active tape."""
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, needs)
    if needs:
        _tape.nodes.append(Node(op, inputs, out, backward))
    return out


def backward(loss):
    """Run the tape backwards from a scalar loss, accumulating gradients.

    Each call computes its own full vector-Jacobian flow and then sums it
    into the ``grad`` fields, so repeated calls accumulate; the caller
    zeroes grads between steps. Nodes that did not contribute to the loss
    are skipped.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise UsageError("backward on a tensor that does not require grad (nothing recorded)")
    flows = {id(loss): np.ones_like(loss.data)}
    tensors = {id(loss): loss}
    for node in reversed(_tape.nodes):
        gout = flows.get(id(node.out))
        if gout is None:
            continue
        grads = node.backward(gout)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            prev = flows.get(key)
            flows[key] = g if prev is None else prev + g
            tensors[key] = t
    for key, total in flows.items():
        tensors[key].accumulate_grad(total)
