"""Minimal reverse-mode differentiation over exactly the operation set the
planners need, plus the RMSprop optimizer.

Values are float64 tensors of shape (B, H, W, C) (batches of fields) except
the scalar loss.  Kernel parameters carry an optional projector onto the
steerable subspace: the forward pass consumes the projected kernel and the
gradient with respect to the free parameters is the projector applied to the
kernel gradient (the projector is idempotent and self-adjoint).  A graph is
confined to one worker; everything is deterministic given seeds and data
order.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .kernels import corr2d_batch, corr2d_input_grad, corr2d_kernel_grad


class Parameter:
    """A named trainable tensor, optionally constrained by a projector."""

    def __init__(self, value: np.ndarray, name: str = "",
                 projector: Callable[[np.ndarray], np.ndarray] | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.name = name
        self.projector = projector
        self._projected = None

    def set_value(self, value: np.ndarray) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self._projected = None

    @property
    def effective(self) -> np.ndarray:
        """The tensor the forward pass uses: projected if constrained."""
        if self.projector is None:
            return self.value
        if self._projected is None:
            self._projected = self.projector(self.value)
        return self._projected

    def pullback(self, grad: np.ndarray) -> np.ndarray:
        """Gradient with respect to the free parameters."""
        if self.projector is None:
            return grad
        return self.projector(grad)


class Node:
    """One eager operation on the computation graph."""

    __slots__ = ("value", "op", "parents", "grad", "_bw", "param")

    def __init__(self, value, op: str, parents: tuple = (),
                 bw: Callable | None = None, param: Parameter | None = None):
        self.value = value
        self.op = op
        self.parents = parents
        self.grad = None
        self._bw = bw
        self.param = param


def constant(value: np.ndarray) -> Node:
    return Node(np.asarray(value, dtype=np.float64), "input")


def param(p: Parameter) -> Node:
    return Node(p.effective, "param", param=p)


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    return Node(a.value + b.value, "add", (a, b), lambda gy: (gy, gy))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * c, "scale", (a,), lambda gy: (gy * c,))


def concat_channels(a: Node, b: Node) -> Node:
    if a.value.shape[:3] != b.value.shape[:3]:
        raise ValueError("concat needs matching batch and spatial shapes")
    ca = a.value.shape[3]
    value = np.concatenate([a.value, b.value], axis=3)
    return Node(value, "concat_channels", (a, b),
                lambda gy: (gy[..., :ca], gy[..., ca:]))


def slice_in_channels(w: Node, start: int, stop: int) -> Node:
    """View of a kernel node restricted to an input-channel block.

    Lets the planner hoist the convolution of a loop-constant block out of
    the iteration: convolving a stacked field with a stacked kernel equals
    the sum of the blockwise convolutions.
    """
    value = np.ascontiguousarray(w.value[:, :, :, start:stop])
    full = w.value.shape

    def bw(gy):
        gw = np.zeros(full)
        gw[:, :, :, start:stop] = gy
        return (gw,)

    return Node(value, "slice_in", (w,), bw)


def conv2d(x: Node, w: Node, padding: str = "zero") -> Node:
    """Cross-correlate a batch of fields with a kernel parameter node."""
    kernel = w.value
    F = kernel.shape[0]
    value = corr2d_batch(x.value, kernel, padding)

    def bw(gy):
        gx = corr2d_input_grad(gy, kernel, padding)
        gw = corr2d_kernel_grad(x.value, gy, F, padding)
        return (gx, gw)

    return Node(value, "conv1x1" if F == 1 else "conv2d", (x, w), bw)


def conv1x1(x: Node, w: Node) -> Node:
    return conv2d(x, w, "zero")


def block_max(x: Node, copies: int) -> Node:
    """Elementwise max across `copies` equal channel blocks.  The backward
    pass routes gradient only to argmax entries; ties go to the first block."""
    B, H, W, C = x.value.shape
    if C % copies != 0:
        raise ValueError(f"{C} channels do not split into {copies} blocks")
    blocked = x.value.reshape(B, H, W, copies, C // copies)
    winners = blocked.argmax(axis=3)
    value = np.take_along_axis(blocked, winners[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def bw(gy):
        gx = np.zeros_like(blocked)
        np.put_along_axis(gx, winners[:, :, :, None, :], gy[:, :, :, None, :], axis=3)
        return (gx.reshape(B, H, W, C),)

    return Node(value, "block_max", (x,), bw)


def softmax_ce(logits: Node, labels: np.ndarray, mask: np.ndarray) -> Node:
    """Per-pixel softmax cross-entropy averaged over each map's unmasked
    cells, then over the batch.  Returns a scalar node."""
    z = logits.value
    B = z.shape[0]
    mask = np.asarray(mask, dtype=bool)
    labels = np.where(mask, labels, 0).astype(np.intp)
    zmax = z.max(axis=3, keepdims=True)
    lse = zmax[..., 0] + np.log(np.exp(z - zmax).sum(axis=3))
    picked = np.take_along_axis(z, labels[..., None], axis=3)[..., 0]
    ce = (lse - picked) * mask
    counts = np.maximum(mask.reshape(B, -1).sum(axis=1), 1)
    loss = float((ce.reshape(B, -1).sum(axis=1) / counts).mean())

    def bw(gy):
        probs = np.exp(z - lse[..., None])
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=3)
        weight = (mask / counts[:, None, None] / B)[..., None]
        return ((probs - onehot) * weight * gy,)

    return Node(loss, "softmax_ce", (logits,), bw)


def topological_order(loss: Node) -> list[Node]:
    """Nodes reachable from `loss`, parents before children."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> dict[Parameter, np.ndarray]:
    """Populate gradients in reverse topological order and return the free
    gradient for every parameter reached from the scalar loss."""
    if np.ndim(loss.value) != 0:
        raise ValueError("backward expects a scalar loss node")
    order = topological_order(loss)
    loss.grad = np.float64(1.0)
    for node in reversed(order):
        if node.grad is None or node._bw is None:
            continue
        for parent, g in zip(node.parents, node._bw(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g
    grads: dict[Parameter, np.ndarray] = {}
    for node in order:
        if node.param is not None and node.grad is not None:
            g = node.param.pullback(node.grad)
            if node.param in grads:
                grads[node.param] = grads[node.param] + g
            else:
                grads[node.param] = g
    return grads


class RMSProp:
    """RMSprop with a per-parameter running second moment.

    v <- decay * v + (1 - decay) * g^2, then p <- p - lr * g / (sqrt(v) + eps).
    """

    def __init__(self, params: list[Parameter], learning_rate: float = 1e-3,
                 decay: float = 0.99, epsilon: float = 1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.decay = decay
        self.epsilon = epsilon
        self.moments = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads: dict[Parameter, np.ndarray]) -> None:
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            self.moments[i] = self.decay * self.moments[i] + (1.0 - self.decay) * g * g
            p.set_value(p.value - self.learning_rate * g / (np.sqrt(self.moments[i]) + self.epsilon))

    def state(self) -> list[np.ndarray]:
        return [m.copy() for m in self.moments]

    def load_state(self, moments: list[np.ndarray]) -> None:
        if len(moments) != len(self.params):
            raise ValueError("optimizer state does not match parameter list")
        self.moments = [np.asarray(m, dtype=np.float64).copy() for m in moments]
