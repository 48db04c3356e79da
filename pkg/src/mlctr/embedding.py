"""Residual multi-layer matrix-factorization embedding networks.

One :class:`EmbeddingNetwork` produces the factor matrix of one tensor
mode. Starting from a base matrix ``U0`` (``d x r``), each layer ``j``
adds a low-rank non-linear correction through a by-pass connection::

    U_j = act(U_{j-1} + act(P_j @ Q_j))        P_j: d x h,  Q_j: h x r

and the output embedding matrix is ``U_l``. With no layers the output is
``U0`` itself, i.e. a plain CP factor matrix.

Training only ever needs the rows touched by a mini-batch, so the core
entry points (:meth:`EmbeddingNetwork.forward` and
:meth:`EmbeddingNetwork.backward`) work on an array of row indices.
:func:`forward_row` / :func:`backward_row` are the single-row forms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, ConfigError, TapeError

__all__ = [
    "Activation", "EmbeddingNetwork", "RowTape", "RowGrads", "NetGrads",
    "forward_row", "backward_row", "init_network", "ACTIVATIONS",
]

ACTIVATIONS = ("relu", "elu", "sigmoid", "identity")


@dataclass(frozen=True)
class Activation:
    """Element-wise transfer function and its derivative.

    ``relu`` uses 0 as its subgradient at the kink.
    """

    kind: str = "elu"
    elu_alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.kind!r}; choose from {ACTIVATIONS}")

    def __call__(self, x):
        kind = self.kind
        if kind == "identity":
            return x
        if kind == "relu":
            return np.maximum(x, 0.0)
        if kind == "elu":
            return np.where(x > 0, x, self.elu_alpha * np.expm1(np.minimum(x, 0.0)))
        # sigmoid, split by sign to stay finite for large |x|
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def deriv(self, x):
        kind = self.kind
        if kind == "identity":
            return np.ones_like(x)
        if kind == "relu":
            return (x > 0).astype(np.float64)
        if kind == "elu":
            return np.where(x > 0, 1.0, self.elu_alpha * np.exp(np.minimum(x, 0.0)))
        s = self(x)
        return s * (1.0 - s)

    @property
    def has_kink(self):
        return self.kind == "relu" or (self.kind == "elu" and self.elu_alpha != 1.0)


@dataclass
class NetGrads:
    """Gradients for a batch of rows; row-sparse parts keep one row per sample."""

    rows: np.ndarray
    base: np.ndarray            # (b, r), None when the base is frozen
    P: list                     # per layer (b, h)
    Q: list                     # per layer (h, r), already reduced over the batch


@dataclass
class RowTape:
    """Intermediates of one row's forward pass, kept for the backward pass."""

    row: int
    version: int
    base: np.ndarray
    inner: list = field(default_factory=list)    # P_j[row] @ Q_j, before activation
    outer: list = field(default_factory=list)    # residual sum, before activation
    outputs: list = field(default_factory=list)

    @property
    def output(self):
        return self.outputs[-1] if self.outputs else self.base

    def replay(self, net: "EmbeddingNetwork"):
        """Recompute the output from the network's current parameters."""
        if net.version != self.version:
            raise TapeError(f"tape recorded at version {self.version}, network is at {net.version}")
        out, _ = net.forward(np.array([self.row]))
        return out[0]


@dataclass
class RowGrads:
    base: np.ndarray
    P: list
    Q: list


class EmbeddingNetwork:
    """Layered generator for one mode's ``d x r`` embedding matrix.

    Parameters
    ----------
    base : ndarray, shape (d, r)
    P, Q : lists of ndarray
        Per-layer hidden matrices of shapes ``(d, h)`` and ``(h, r)``.
    activation : Activation
    freeze_base : bool
        Keep ``base`` at zero and exclude it from training.
    """

    def __init__(self, base, P=(), Q=(), activation=None, freeze_base=False, name="U"):
        self.base = np.array(base, dtype=np.float64)
        self.P = [np.array(p, dtype=np.float64) for p in P]
        self.Q = [np.array(q, dtype=np.float64) for q in Q]
        self.activation = activation or Activation()
        self.freeze_base = bool(freeze_base)
        self.name = name
        self.version = 0
        d, r = self.base.shape
        if len(self.P) != len(self.Q):
            raise ConfigError("P and Q must have one matrix per layer")
        for p, q in zip(self.P, self.Q):
            if p.shape[0] != d or q.shape[1] != r or p.shape[1] != q.shape[0]:
                raise ConfigError(f"layer shapes {p.shape} x {q.shape} do not fit base {self.base.shape}")
        if self.freeze_base:
            self.base[:] = 0.0

    @property
    def entity_count(self):
        return self.base.shape[0]

    @property
    def rank(self):
        return self.base.shape[1]

    @property
    def layers(self):
        return len(self.P)

    @property
    def hidden_width(self):
        return self.P[0].shape[1] if self.P else 0

    def parameters(self):
        """Named trainable arrays (views, not copies)."""
        out = {} if self.freeze_base else {f"{self.name}.base": self.base}
        for j, (p, q) in enumerate(zip(self.P, self.Q)):
            out[f"{self.name}.P{j}"] = p
            out[f"{self.name}.Q{j}"] = q
        return out

    def copy(self):
        net = EmbeddingNetwork(self.base.copy(), [p.copy() for p in self.P],
                               [q.copy() for q in self.Q], self.activation,
                               self.freeze_base, self.name)
        net.version = self.version
        return net

    def _check_rows(self, rows):
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        if len(rows) and (rows.min() < 0 or rows.max() >= self.entity_count):
            bad = rows[(rows < 0) | (rows >= self.entity_count)][0]
            raise BoundsError(f"row {bad} out of range for {self.name} with {self.entity_count} entities")
        return rows

    def forward(self, rows):
        """Embeddings of ``rows``, shape ``(len(rows), r)``, plus a cache for :meth:`backward`."""
        rows = self._check_rows(rows)
        act = self.activation
        u = self.base[rows]
        cache = []
        for p_mat, q_mat in zip(self.P, self.Q):
            p = p_mat[rows]
            z = p @ q_mat
            s = u + act(z)
            cache.append((p, z, s))
            u = act(s)
        return u, cache

    def output_matrix(self):
        """The full ``d x r`` output embedding matrix."""
        return self.forward(np.arange(self.entity_count))[0]

    def backward(self, rows, cache, grad_out):
        """Push ``dL/d(output rows)`` back to every parameter.

        Row-sparse gradients for ``base`` and ``P`` are returned per sample
        (duplicates in ``rows`` are not merged); ``Q`` gradients are summed.
        """
        act = self.activation
        g = np.asarray(grad_out, dtype=np.float64)
        gP = [None] * self.layers
        gQ = [None] * self.layers
        for j in range(self.layers - 1, -1, -1):
            p, z, s = cache[j]
            gs = g * act.deriv(s)
            gz = gs * act.deriv(z)
            gP[j] = gz @ self.Q[j].T
            gQ[j] = p.T @ gz
            g = gs
        return NetGrads(rows, None if self.freeze_base else g, gP, gQ)

    def kink_distance(self, rows):
        """Smallest |pre-activation| over the forward pass of ``rows`` (inf without layers)."""
        _, cache = self.forward(rows)
        m = np.inf
        for _, z, s in cache:
            m = min(m, float(np.abs(z).min()), float(np.abs(s).min()))
        return m

    def apply(self, grads: NetGrads, step):
        """In-place ``param -= step * grad`` for one batch's gradients."""
        if grads.base is not None:
            np.subtract.at(self.base, grads.rows, step * grads.base)
        for j in range(self.layers):
            np.subtract.at(self.P[j], grads.rows, step * grads.P[j])
            self.Q[j] -= step * grads.Q[j]
        self.version += 1

    def dense_gradients(self, grads: NetGrads):
        """Scatter a :class:`NetGrads` into arrays shaped like :meth:`parameters`."""
        out = {}
        if not self.freeze_base:
            g = np.zeros_like(self.base)
            if grads.base is not None:
                np.add.at(g, grads.rows, grads.base)
            out[f"{self.name}.base"] = g
        for j in range(self.layers):
            g = np.zeros_like(self.P[j])
            np.add.at(g, grads.rows, grads.P[j])
            out[f"{self.name}.P{j}"] = g
            out[f"{self.name}.Q{j}"] = grads.Q[j].copy()
        return out


def init_network(entity_count, rank, layers=0, hidden_width=1, activation=None,
                 seed=0, freeze_base=False, name="U") -> EmbeddingNetwork:
    """Gaussian initialisation: std ``1/sqrt(rank)`` for the base, ``1/sqrt(h)`` for P and Q."""
    if int(entity_count) < 1 or int(rank) < 1:
        raise ConfigError(f"entity_count and rank must be positive, got {entity_count}, {rank}")
    if int(layers) < 0:
        raise ConfigError(f"layers must be >= 0, got {layers}")
    if layers and int(hidden_width) < 1:
        raise ConfigError(f"hidden_width must be positive, got {hidden_width}")
    rng = np.random.default_rng(seed)
    d, r, h = int(entity_count), int(rank), int(hidden_width)
    base = rng.normal(0.0, 1.0 / np.sqrt(r), size=(d, r))
    P, Q = [], []
    for _ in range(int(layers)):
        P.append(rng.normal(0.0, 1.0 / np.sqrt(h), size=(d, h)))
        Q.append(rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, r)))
    return EmbeddingNetwork(base, P, Q, activation, freeze_base, name)


def forward_row(net: EmbeddingNetwork, i):
    """Embedding of entity ``i`` and the tape needed to differentiate it."""
    rows = net._check_rows([i])
    out, cache = net.forward(rows)
    act = net.activation
    tape = RowTape(int(rows[0]), net.version, net.base[rows[0]].copy())
    for _, z, s in cache:
        tape.inner.append(z[0].copy())
        tape.outer.append(s[0].copy())
        tape.outputs.append(act(s[0]))
    return out[0], tape


def backward_row(net: EmbeddingNetwork, tape: RowTape, grad_out) -> RowGrads:
    """Gradients of a scalar row loss given ``dL/d(embedding)``."""
    if tape.version != net.version:
        raise TapeError(f"tape recorded at version {tape.version}, network is at {net.version}")
    row = np.array([tape.row])
    cache = [(net.P[j][row], tape.inner[j][None], tape.outer[j][None])
             for j in range(net.layers)]
    g = net.backward(row, cache, np.asarray(grad_out, dtype=np.float64)[None])
    base = g.base[0] if g.base is not None else np.zeros(net.rank)
    return RowGrads(base, [p[0] for p in g.P], g.Q)
