"""Toy-scale checks of the AllReduce gradient identity.

A small reverse-mode tape over numpy arrays is enough here: the models are a
few dense matrices per simulated worker and every AllReduce is a literal sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FD_STEP = 1e-5


class Var:
    """A node on the tape: a value plus how to push gradients to its parents."""

    __slots__ = ("value", "parents", "grad")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents  # tuple of (Var, vjp)
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def add(a: Var, b: Var) -> Var:
    return Var(a.value + b.value, ((a, lambda g: g), (b, lambda g: g)))


def add_n(xs: Sequence[Var]) -> Var:
    """The AllReduce: every input receives the output gradient unchanged."""
    total = xs[0].value.copy()
    for x in xs[1:]:
        total = total + x.value
    return Var(total, tuple((x, lambda g: g) for x in xs))


def matmul(a: Var, b: Var) -> Var:
    return Var(a.value @ b.value, ((a, lambda g: g @ b.value.T), (b, lambda g: a.value.T @ g)))


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return Var(t, ((a, lambda g: g * (1.0 - t * t)),))


def mul_const(a: Var, c: np.ndarray) -> Var:
    return Var(a.value * c, ((a, lambda g: g * c),))


def square_sum(a: Var) -> Var:
    return Var(np.sum(a.value * a.value), ((a, lambda g: 2.0 * a.value * g),))


def total(a: Var) -> Var:
    return Var(np.sum(a.value), ((a, lambda g: np.broadcast_to(g, a.value.shape)),))


def backward(loss: Var, seed=None) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` for every node on the tape."""
    backward_from([(loss, np.ones_like(loss.value) if seed is None else seed)])


def backward_from(roots: Sequence[tuple[Var, np.ndarray]]) -> None:
    """Backpropagate several outputs at once, each with its own upstream gradient."""
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(r, False) for r, _ in roots]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p, _ in node.parents)
    for node in order:
        node.grad = None
    for r, g in roots:
        g = np.asarray(g, dtype=np.float64)
        r.grad = g if r.grad is None else r.grad + g
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            g = vjp(node.grad)
            parent.grad = g if parent.grad is None else parent.grad + g


# ------------------------------------------------------ gradient identity check


@dataclass(frozen=True)
class GradCheck:
    autodiff_deviation: float
    finite_difference_deviation: float

    @property
    def max_deviation(self) -> float:
        return max(self.autodiff_deviation, self.finite_difference_deviation)


def _random_loss(rng: np.random.Generator, shape, kind: str):
    """Return the loss on the tape and a batched numpy twin (leading axis = sample)."""
    axes = tuple(range(1, len(shape) + 1))
    if kind == "linear":
        return total, lambda ys: ys.sum(axis=axes)
    if kind != "random":
        raise ValueError(f"unknown loss kind {kind!r}")
    a = rng.normal(size=shape)
    b = rng.uniform(0.1, 1.0, size=shape)

    def on_tape(y: Var) -> Var:
        return add(total(mul_const(tanh(y), a)), mul_const(square_sum(mul_const(y, np.sqrt(b))), 0.5))

    def batched(ys: np.ndarray) -> np.ndarray:
        return (np.tanh(ys) * a).sum(axis=axes) + 0.5 * ((ys * np.sqrt(b)) ** 2).sum(axis=axes)

    return on_tape, batched


def allreduce_grad_identity(w: int, shape=(8, 8), seed: int = 0, loss: str = "random") -> GradCheck:
    """Compare d(phi)/d(x_i) against d(phi)/d(y) for y = sum_i x_i.

    The autodiff deviation compares tape gradients; the finite-difference
    deviation compares central differences in every x_i entry against the
    tape gradient at y.
    """
    if w < 1:
        raise ValueError("w must be at least 1")
    shape = tuple(shape)
    if not shape or 0 in shape:
        raise ValueError("shape must be non-empty")
    rng = np.random.default_rng(seed)
    phi, phi_batch = _random_loss(rng, shape, loss)
    xs = [Var(rng.normal(size=shape)) for _ in range(w)]

    y = add_n(xs)
    backward(phi(y))
    ad = max(float(np.max(np.abs(x.grad - y.grad))) for x in xs)

    y_leaf = Var(y.value)
    backward(phi(y_leaf))
    dy = y_leaf.grad

    n = int(np.prod(shape))
    step = np.eye(n).reshape((n,) + shape) * FD_STEP
    fd_dev = 0.0
    for i in range(w):
        def perturbed(sign):
            # one perturbed copy per entry of x_i, summed in worker order like add_n
            acc = np.zeros((n,) + shape)
            for j, x in enumerate(xs):
                acc = acc + (x.value + sign * step if j == i else x.value)
            return phi_batch(acc)
        fd = (perturbed(1.0) - perturbed(-1.0)) / (2 * FD_STEP)
        fd_dev = max(fd_dev, float(np.max(np.abs(fd.reshape(shape) - dy))))
    return GradCheck(ad, fd_dev)


# ------------------------------------------------- recomputation elision check


@dataclass
class ToyShardedModel:
    """Two consecutive column-parallel / row-parallel FFN blocks over ``w`` workers.

    Block ``l`` on worker ``i`` computes ``tanh(x @ A[l][i]) @ B[l][i]``; the
    AllReduce after each block sums the worker partials.
    """

    w: int
    x: np.ndarray
    A: list[list[np.ndarray]] = field(default_factory=list)
    B: list[list[np.ndarray]] = field(default_factory=list)

    @classmethod
    def random(cls, w: int, d_model: int = 4, d_ff: int = 8, rows: int = 4, seed: int = 0) -> "ToyShardedModel":
        if w < 1 or d_ff % w:
            raise ValueError("d_ff must split evenly over w workers")
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(rows, d_model))
        A, B = [], []
        for _ in range(2):
            full_a = rng.normal(size=(d_model, d_ff)) / np.sqrt(d_model)
            full_b = rng.normal(size=(d_ff, d_model)) / np.sqrt(d_ff)
            A.append(np.split(full_a, w, axis=1))
            B.append(np.split(full_b, w, axis=0))
        return cls(w, x, A, B)

    def _block(self, layer: int, inp: Var, params) -> list[Var]:
        a, b = params[layer]
        return [matmul(tanh(matmul(inp, a[i])), b[i]) for i in range(self.w)]

    def _params(self):
        return [([Var(m) for m in self.A[l]], [Var(m) for m in self.B[l]]) for l in range(2)]

    def forward(self) -> np.ndarray:
        params = self._params()
        y1 = add_n(self._block(0, Var(self.x), params))
        return add_n(self._block(1, y1, params)).value

    def unsharded_output(self) -> np.ndarray:
        h = self.x
        for l in range(2):
            a = np.concatenate(self.A[l], axis=1)
            b = np.concatenate(self.B[l], axis=0)
            h = np.tanh(h @ a) @ b
        return h

    def grads_full_replay(self) -> tuple[float, list[np.ndarray]]:
        """Replay both blocks and both AllReduces from the saved input, then backprop."""
        params = self._params()
        y1 = add_n(self._block(0, Var(self.x), params))
        y2 = add_n(self._block(1, y1, params))
        loss = square_sum(y2)
        backward(loss)
        return float(loss.value), _collect(params)

    def grads_elided(self) -> tuple[float, list[np.ndarray]]:
        """Recompute from post-AllReduce boundaries without replaying any AllReduce.

        Forward stores y1 (the first AllReduce's output).  Backward recomputes
        block 2 from y1 and seeds its partials with dL/dy2, then recomputes
        block 1 from x and seeds its partials with dL/dy1.
        """
        params = self._params()
        y1_stored = add_n(self._block(0, Var(self.x), params)).value
        y2_stored = add_n(self._block(1, Var(y1_stored), params)).value
        loss_value = float(np.sum(y2_stored * y2_stored))
        params = self._params()
        y1_leaf = Var(y1_stored)
        backward_from([(z, 2.0 * y2_stored) for z in self._block(1, y1_leaf, params)])
        backward_from([(z, y1_leaf.grad) for z in self._block(0, Var(self.x), params)])
        return loss_value, _collect(params)


def _collect(params) -> list[np.ndarray]:
    return [v.grad for a, b in params for v in list(a) + list(b)]


def recompute_elision_equivalence(model: ToyShardedModel) -> float:
    """Max absolute weight-gradient difference between full replay and elided replay."""
    loss_a, ga = model.grads_full_replay()
    loss_b, gb = model.grads_elided()
    if loss_a != loss_b:
        return float("inf")
    return max(float(np.max(np.abs(x - y))) for x, y in zip(ga, gb))
