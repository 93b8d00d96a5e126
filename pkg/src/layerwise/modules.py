"""Composable Riemannian modules with reverse-mode adjoints.

A model is a tree of modules. Its *layers* are the leaves of the tree in
forward traversal order; each leaf owns one parameter block (empty for
pointwise nonlinearities). Internally every activation carries a leading
batch axis and every covector carries ``(batch, seeds, dim)`` axes, so a
single reverse sweep propagates many seed covectors at once (this is how the
per-layer Jacobians are built: one seed per output coordinate).

Linear weights are stored row-major: the block of a ``Linear(n_in, n_out)``
layer is ``A.ravel()`` with ``A`` of shape ``(n_out, n_in)``, so
``dy_i / dA_jk = delta_ij x_k`` sits in column ``j * n_in + k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, StaleTape
from .rng import SplitMix64


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_prime(x):
    # subgradient at 0 taken as 0
    return (x > 0).astype(np.float64)


def _tanh_prime(x):
    t = np.tanh(x)
    return 1.0 - t * t


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "relu": (_relu, _relu_prime),
    "tanh": (np.tanh, _tanh_prime),
    "identity": (lambda x: x.copy(), np.ones_like),
}


class RiemannianModule:
    kind: str = ""
    input_dim: int
    output_dim: int

    def leaves(self) -> list["RiemannianModule"]:
        return [self]

    @property
    def n_layers(self) -> int:
        return len(self.leaves())

    @property
    def block_sizes(self) -> list[int]:
        return [leaf.block_size for leaf in self.leaves()]

    @property
    def param_count(self) -> int:
        return sum(self.block_sizes)

    block_size: int = 0

    # leaf protocol; composites override _forward/_backward instead
    def apply(self, w, X):
        raise NotImplementedError

    def input_vjp(self, w, X, Y, lam):
        raise NotImplementedError

    def param_vjp(self, w, X, Y, lam):
        B, K = lam.shape[:2]
        return np.zeros((B, K, 0))

    def init_block(self, rng: SplitMix64) -> np.ndarray:
        return np.zeros(0)

    def _forward(self, blocks, offset, X, records):
        Y = self.apply(blocks[offset], X)
        records.append((X, Y))
        return Y

    def _backward(self, records, blocks, offset, lam, adjoints, pgrads):
        X, Y = records[offset]
        adjoints[offset] = lam
        pgrads[offset] = self.param_vjp(blocks[offset], X, Y, lam)
        return self.input_vjp(blocks[offset], X, Y, lam)

    def __repr__(self):
        return f"{type(self).__name__}({self.input_dim}->{self.output_dim})"


class Linear(RiemannianModule):
    """``y = A x`` with ``A`` an ``(output_dim, input_dim)`` matrix."""

    kind = "Linear"

    def __init__(self, input_dim: int, output_dim: int):
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.block_size = self.input_dim * self.output_dim

    def matrix(self, w):
        return np.asarray(w).reshape(self.output_dim, self.input_dim)

    def apply(self, w, X):
        return X @ self.matrix(w).T

    def input_vjp(self, w, X, Y, lam):
        return lam @ self.matrix(w)

    def param_vjp(self, w, X, Y, lam):
        B, K = lam.shape[:2]
        return np.einsum("bko,bi->bkoi", lam, X).reshape(B, K, self.block_size)

    def init_block(self, rng):
        bound = 1.0 / np.sqrt(self.input_dim)
        return rng.uniform(self.block_size, -bound, bound)


class Bias(RiemannianModule):
    """``y = x + b``."""

    kind = "Bias"

    def __init__(self, dim: int):
        self.input_dim = self.output_dim = self.block_size = int(dim)

    def apply(self, w, X):
        return X + w

    def input_vjp(self, w, X, Y, lam):
        return lam

    def param_vjp(self, w, X, Y, lam):
        return lam

    def init_block(self, rng):
        bound = 1.0 / np.sqrt(self.input_dim)
        return rng.uniform(self.block_size, -bound, bound)


class PointwiseNonlinearity(RiemannianModule):
    kind = "PointwiseNonlinearity"

    def __init__(self, dim: int, activation: str = "tanh"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
        self.input_dim = self.output_dim = int(dim)
        self.activation = activation
        self.sigma, self.sigma_prime = ACTIVATIONS[activation]

    def apply(self, w, X):
        return self.sigma(X)

    def input_vjp(self, w, X, Y, lam):
        return lam * self.sigma_prime(X)[:, None, :]

    def __repr__(self):
        return f"{self.activation}({self.input_dim})"


class Sequential(RiemannianModule):
    kind = "Sequential"

    def __init__(self, *children: RiemannianModule):
        if not children:
            raise ValueError("Sequential needs at least one child")
        for a, b in zip(children, children[1:]):
            if b.input_dim != a.output_dim:
                raise DimensionMismatch(
                    f"cannot chain {a!r} into {b!r}: {a.output_dim} != {b.input_dim}"
                )
        self.children = tuple(children)
        self.input_dim = children[0].input_dim
        self.output_dim = children[-1].output_dim
        self._offsets = np.cumsum([0] + [c.n_layers for c in children]).tolist()

    def leaves(self):
        return [leaf for c in self.children for leaf in c.leaves()]

    def _forward(self, blocks, offset, X, records):
        for child, off in zip(self.children, self._offsets):
            X = child._forward(blocks, offset + off, X, records)
        return X

    def _backward(self, records, blocks, offset, lam, adjoints, pgrads):
        for child, off in reversed(list(zip(self.children, self._offsets))):
            lam = child._backward(records, blocks, offset + off, lam, adjoints, pgrads)
        return lam

    def __repr__(self):
        return "Sequential(" + ", ".join(map(repr, self.children)) + ")"


class Parallel(RiemannianModule):
    """Cartesian product: inputs and outputs are concatenations of the children's."""

    kind = "Parallel"

    def __init__(self, *children: RiemannianModule):
        if not children:
            raise ValueError("Parallel needs at least one child")
        self.children = tuple(children)
        self.input_dim = sum(c.input_dim for c in children)
        self.output_dim = sum(c.output_dim for c in children)
        self._offsets = np.cumsum([0] + [c.n_layers for c in children]).tolist()
        self._in_cuts = np.cumsum([c.input_dim for c in children])[:-1].tolist()
        self._out_cuts = np.cumsum([c.output_dim for c in children])[:-1].tolist()

    def leaves(self):
        return [leaf for c in self.children for leaf in c.leaves()]

    def _forward(self, blocks, offset, X, records):
        parts = np.split(X, self._in_cuts, axis=-1)
        outs = [c._forward(blocks, offset + off, x, records)
                for c, off, x in zip(self.children, self._offsets, parts)]
        return np.concatenate(outs, axis=-1)

    def _backward(self, records, blocks, offset, lam, adjoints, pgrads):
        parts = np.split(lam, self._out_cuts, axis=-1)
        ins = [c._backward(records, blocks, offset + off, l, adjoints, pgrads)
               for c, off, l in zip(self.children, self._offsets, parts)]
        return np.concatenate(ins, axis=-1)

    def __repr__(self):
        return "Parallel(" + ", ".join(map(repr, self.children)) + ")"


def compose_sequential(m1: RiemannianModule, m2: RiemannianModule) -> Sequential:
    """``m2`` after ``m1``; the output metric of ``m1`` is the pullback of ``m2``'s."""
    return Sequential(m1, m2)


def compose_parallel(m1: RiemannianModule, m2: RiemannianModule) -> Parallel:
    return Parallel(m1, m2)


def mlp(sizes: Sequence[int], activation: str = "tanh", bias: bool = False) -> Sequential:
    """Dense network ``sizes[0] -> ... -> sizes[-1]``, no activation after the last layer."""
    mods: list[RiemannianModule] = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        mods.append(Linear(a, b))
        if bias:
            mods.append(Bias(b))
        if i < len(sizes) - 2:
            mods.append(PointwiseNonlinearity(b, activation))
    return Sequential(*mods)


@dataclass(frozen=True)
class ParameterState:
    """Per-layer parameter blocks ``w^(alpha)``, one per leaf, in traversal order."""

    blocks: tuple

    def __post_init__(self):
        frozen = []
        for b in self.blocks:
            b = np.array(b, dtype=np.float64).ravel()
            b.flags.writeable = False
            frozen.append(b)
        object.__setattr__(self, "blocks", tuple(frozen))

    @property
    def sizes(self) -> list[int]:
        return [b.size for b in self.blocks]

    def flat(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate(self.blocks)

    def with_flat(self, vector) -> "ParameterState":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (sum(self.sizes),):
            raise DimensionMismatch(f"flat vector of length {vector.size}, expected {sum(self.sizes)}")
        cuts = np.cumsum(self.sizes)[:-1]
        return ParameterState(tuple(np.split(vector, cuts)))

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, alpha):
        return self.blocks[alpha]

    def check(self, module: RiemannianModule) -> None:
        if self.sizes != module.block_sizes:
            raise DimensionMismatch(f"parameter blocks {self.sizes} do not match module {module.block_sizes}")


def init_params(module: RiemannianModule, seed: int) -> ParameterState:
    """Uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` from a SplitMix64 stream."""
    rng = SplitMix64(seed)
    return ParameterState(tuple(leaf.init_block(rng) for leaf in module.leaves()))


@dataclass
class Tape:
    """Activation record of one forward call. ``records[alpha] = (input, output)``."""

    module: RiemannianModule
    params: ParameterState
    inputs: np.ndarray
    output: np.ndarray
    records: list | None
    batched: bool

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]

    def release(self) -> None:
        self.records = None

    def _require(self) -> list:
        if self.records is None or len(self.records) != self.module.n_layers:
            raise StaleTape("tape activations are missing; run forward again")
        return self.records


@dataclass(frozen=True)
class LayerJacobian:
    """``dy/dw^(alpha)``; shape ``(n_o, n_alpha)``, or ``(B, n_o, n_alpha)`` for batched tapes."""

    layer: int
    matrix: np.ndarray


@dataclass(frozen=True)
class LayerAdjoint:
    """Covector ``lambda_alpha`` on the output activation space of layer ``alpha``."""

    layer: int
    covector: np.ndarray = field(repr=False)


def forward(module: RiemannianModule, params: ParameterState, x) -> tuple[np.ndarray, Tape]:
    """Evaluate ``module`` at ``x`` (one sample ``(d,)`` or a batch ``(B, d)``)."""
    params.check(module)
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    X = x if batched else x[None, :]
    if X.ndim != 2 or X.shape[1] != module.input_dim:
        raise DimensionMismatch(f"input shape {x.shape} does not match input_dim {module.input_dim}")
    records: list = []
    Y = module._forward(params.blocks, 0, X, records)
    tape = Tape(module, params, X, Y, records, batched)
    return (Y if batched else Y[0]), tape


def _seeds(tape: Tape, covector) -> np.ndarray:
    """Normalize a covector argument to ``(B, K, n_o)``.

    Unbatched tapes take ``(n_o,)`` or ``(K, n_o)``; batched tapes take
    ``(B, n_o)`` or ``(B, K, n_o)``.
    """
    c = np.asarray(covector, dtype=np.float64)
    if tape.batched and c.ndim == 2:
        c = c[:, None, :]
    elif not tape.batched and c.ndim in (1, 2):
        c = c[None, None, :] if c.ndim == 1 else c[None]
    if c.ndim != 3 or c.shape[0] != tape.batch_size or c.shape[2] != tape.module.output_dim:
        raise DimensionMismatch(
            f"covector shape {np.shape(covector)} incompatible with output_dim {tape.module.output_dim}"
        )
    return c


def backprop(tape: Tape, seeds: np.ndarray):
    """Reverse sweep of ``(B, K, n_o)`` seed covectors.

    Returns ``(adjoints, param_vjps, input_covector)`` where ``adjoints[alpha]``
    has shape ``(B, K, out_dim_alpha)`` and ``param_vjps[alpha]`` has shape
    ``(B, K, n_alpha)``.
    """
    records = tape._require()
    n = tape.module.n_layers
    adjoints: list = [None] * n
    pgrads: list = [None] * n
    lam_in = tape.module._backward(records, tape.params.blocks, 0, seeds, adjoints, pgrads)
    return adjoints, pgrads, lam_in


def backward_adjoints(tape: Tape, output_covector) -> list[LayerAdjoint]:
    """Lagrange multipliers ``lambda_alpha``: the covector at each layer's output."""
    adjoints, _, _ = backprop(tape, _seeds(tape, output_covector))
    squeeze = (lambda a: a[:, 0, :]) if tape.batched else (lambda a: a[0, 0, :])
    return [LayerAdjoint(i, squeeze(a)) for i, a in enumerate(adjoints)]


def input_adjoint(tape: Tape, output_covector) -> np.ndarray:
    """The output covector pulled back to the network input."""
    _, _, lam_in = backprop(tape, _seeds(tape, output_covector))
    return lam_in[:, 0, :] if tape.batched else lam_in[0, 0, :]


def parameter_gradient(tape: Tape, output_covector) -> list[np.ndarray]:
    """Per-layer ``(df/dw^(alpha))^T lambda_alpha``, summed over the batch."""
    _, pgrads, _ = backprop(tape, _seeds(tape, output_covector))
    return [g[:, 0, :].sum(axis=0) for g in pgrads]


def layer_jacobians(tape: Tape) -> list[LayerJacobian]:
    """Jacobians of the output w.r.t. every layer, from ``n_o`` unit-seeded sweeps."""
    n_o = tape.module.output_dim
    seeds = np.broadcast_to(np.eye(n_o), (tape.batch_size, n_o, n_o))
    _, pgrads, _ = backprop(tape, seeds)
    return [LayerJacobian(i, g if tape.batched else g[0]) for i, g in enumerate(pgrads)]


def layer_jacobian(tape: Tape, layer: int) -> LayerJacobian:
    n = tape.module.n_layers
    if not 0 <= layer < n:
        raise IndexError(f"layer {layer} out of range for {n} layers")
    return layer_jacobians(tape)[layer]


def pullback_factor(L_y, layer: int, tape: Tape, sample: int = 0) -> np.ndarray:
    """Pull the factor of the metric at layer ``layer``'s output back to its input.

    Returns ``L_x = L_y @ J`` with ``J`` the layer's input Jacobian at the
    recorded activation, so ``L_x.T @ L_x == J.T @ L_y.T @ L_y @ J``.
    """
    records = tape._require()
    leaf = tape.module.leaves()[layer]
    L_y = np.asarray(L_y, dtype=np.float64)
    if L_y.ndim != 2 or L_y.shape[1] != leaf.output_dim:
        raise DimensionMismatch(f"factor shape {L_y.shape} does not match layer output dim {leaf.output_dim}")
    X, Y = records[layer]
    lam = L_y[None, :, :]
    return leaf.input_vjp(tape.params[layer], X[sample:sample + 1], Y[sample:sample + 1], lam)[0]


def pullback_to_input(L_o, tape: Tape, sample: int = 0) -> np.ndarray:
    """Pull the output-metric factor through the whole graph to the input space."""
    L_o = np.asarray(L_o, dtype=np.float64)
    if L_o.ndim != 2 or L_o.shape[1] != tape.module.output_dim:
        raise DimensionMismatch(f"factor shape {L_o.shape} does not match output_dim")
    seeds = np.zeros((tape.batch_size,) + L_o.shape)
    seeds[sample] = L_o
    _, _, lam_in = backprop(tape, seeds)
    return lam_in[sample]
