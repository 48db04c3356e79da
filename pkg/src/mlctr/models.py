"""Single and coupled tensor-completion models.

A model owns one :class:`~mlctr.embedding.EmbeddingNetwork` per tensor
mode and a readout per tensor. Tensor ``X`` reads modes ``(U, V, T)``;
in a coupled model tensor ``Y`` reads ``(U, V, W)``, with ``U`` and ``V``
the very same network objects, so an update driven by a ``Y`` sample is
immediately visible to ``X`` predictions.

The readout is either the CP dot product ``sum_s u_s v_s t_s`` or a
one-hidden-layer MLP applied to the element-wise product ``u * v * t``.

Training loss over a batch is::

    sum_X (x_hat - x)^2 + lam * sum_Y (y_hat - y)^2

and :func:`grad_step` moves every touched parameter by ``lr`` times the
gradient of half that loss, which for a depth-0 model is the classical
CP-SGD update ``u <- u - lr * e * (v * t)``.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .embedding import Activation, EmbeddingNetwork, NetGrads, init_network
from .errors import BoundsError, ConfigError, DivergenceError, FormatError, UsageError
from .sparse import SparseTensor3, Standardizer

__all__ = [
    "ModelSpec", "MlpHead", "Samples", "CompletionModel", "SingleModel", "CoupledModel",
    "build_single", "build_coupled", "make_cp_baseline", "predict", "loss_batch",
    "grad_step", "Adam", "save_checkpoint", "load_checkpoint", "CHECKPOINT_FORMAT", "TAGS",
]

TAGS = ("X", "Y")
CHECKPOINT_FORMAT = "mlctr-checkpoint/1"
READOUTS = ("dot", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters shared by every mode network."""

    rank: int = 2
    layers: int = 0
    hidden: int = 1
    activation: str = "elu"
    elu_alpha: float = 1.0
    readout: str = "dot"
    mlp_hidden: int | None = None
    lam: float = 1.0
    seed: int = 0
    freeze_base: bool = False

    def __post_init__(self):
        if int(self.rank) < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if int(self.layers) < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.layers and int(self.hidden) < 1:
            raise ConfigError(f"hidden width must be >= 1 when layers > 0, got {self.hidden}")
        if self.readout not in READOUTS:
            raise ConfigError(f"readout must be one of {READOUTS}, got {self.readout!r}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.mlp_hidden is not None and int(self.mlp_hidden) < 1:
            raise ConfigError(f"mlp_hidden must be >= 1, got {self.mlp_hidden}")
        if self.freeze_base and self.layers == 0:
            raise ConfigError("freeze_base with no layers leaves nothing to train")
        Activation(self.activation, self.elu_alpha)

    @property
    def head_width(self):
        return int(self.mlp_hidden) if self.mlp_hidden is not None else 2 * int(self.rank)

    def act(self):
        return Activation(self.activation, self.elu_alpha)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class MlpHead:
    """``w2 . act(z @ W1 + b1) + b2`` for an ``r``-vector ``z``."""

    def __init__(self, W1, b1, w2, b2, activation: Activation):
        self.W1 = np.array(W1, dtype=np.float64)
        self.b1 = np.array(b1, dtype=np.float64)
        self.w2 = np.array(w2, dtype=np.float64)
        self.b2 = np.array(b2, dtype=np.float64).reshape(1)
        self.activation = activation

    @classmethod
    def init(cls, rank, width, activation, seed):
        rng = np.random.default_rng(seed)
        W1 = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(rank, width))
        w2 = rng.normal(0.0, 1.0 / np.sqrt(width), size=width)
        return cls(W1, np.zeros(width), w2, np.zeros(1), activation)

    def parameters(self, prefix):
        return {f"{prefix}.W1": self.W1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}

    def copy(self):
        return MlpHead(self.W1, self.b1, self.w2, self.b2, self.activation)

    def forward(self, z):
        a = z @ self.W1 + self.b1
        hidden = self.activation(a)
        return hidden @ self.w2 + self.b2[0], (z, a, hidden)

    def backward(self, cache, g):
        z, a, hidden = cache
        ga = (g[:, None] * self.w2) * self.activation.deriv(a)
        grads = {"W1": z.T @ ga, "b1": ga.sum(axis=0), "w2": hidden.T @ g, "b2": np.array([g.sum()])}
        return grads, ga @ self.W1.T

    def apply(self, grads, step):
        self.W1 -= step * grads["W1"]
        self.b1 -= step * grads["b1"]
        self.w2 -= step * grads["w2"]
        self.b2 -= step * grads["b2"]


@dataclass(frozen=True)
class Samples:
    """A tagged stream of observations: tag code (0 = X, 1 = Y), index triple, value."""

    tags: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        tags = np.asarray(self.tags, dtype=np.int8).reshape(-1)
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not len(tags) == len(idx) == len(vals):
            raise UsageError("tags, indices and values must have equal length")
        if len(tags) and (tags.min() < 0 or tags.max() >= len(TAGS)):
            raise UsageError(f"tag codes must be in 0..{len(TAGS) - 1}")
        object.__setattr__(self, "tags", tags)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, sel):
        return Samples(self.tags[sel], self.indices[sel], self.values[sel])

    @classmethod
    def from_tensor(cls, t: SparseTensor3, tag="X"):
        code = _tag_code(tag)
        return cls(np.full(len(t), code, np.int8), t.indices, t.values)

    @classmethod
    def from_tensors(cls, x: SparseTensor3 | None = None, y: SparseTensor3 | None = None):
        """Concatenation of X-tagged then Y-tagged entries."""
        parts = [cls.from_tensor(t, tag) for t, tag in ((x, "X"), (y, "Y")) if t is not None]
        if not parts:
            raise UsageError("no tensors given")
        return cls.concat(parts)

    @classmethod
    def from_list(cls, batch):
        """From ``[(tag, i, j, k, value), ...]``."""
        batch = list(batch)
        if not batch:
            return cls(np.zeros(0, np.int8), np.zeros((0, 3), np.int64), np.zeros(0))
        tags = [_tag_code(b[0]) for b in batch]
        return cls(tags, [b[1:4] for b in batch], [b[4] for b in batch])

    @staticmethod
    def concat(parts):
        return Samples(np.concatenate([p.tags for p in parts]),
                       np.concatenate([p.indices for p in parts]),
                       np.concatenate([p.values for p in parts]))


def _tag_code(tag):
    if isinstance(tag, (int, np.integer)) and 0 <= tag < len(TAGS):
        return int(tag)
    if tag in TAGS:
        return TAGS.index(tag)
    raise UsageError(f"unknown tensor tag {tag!r}; expected one of {TAGS}")


def _as_samples(batch):
    if isinstance(batch, Samples):
        return batch
    if isinstance(batch, SparseTensor3):
        return Samples.from_tensor(batch, "X")
    return Samples.from_list(batch)


@dataclass
class _Backprop:
    loss: float
    nets: dict = field(default_factory=dict)     # net name -> NetGrads (of half the loss)
    heads: dict = field(default_factory=dict)    # tag -> head grads (of half the loss)


class CompletionModel:
    """Mode networks plus per-tensor readouts.

    Use :func:`build_single`, :func:`build_coupled` or
    :func:`make_cp_baseline` rather than calling this directly.
    """

    kind = "base"

    def __init__(self, nets: dict, readouts: dict, spec: ModelSpec, heads=None):
        self.nets = dict(nets)
        self.readouts = {t: tuple(m) for t, m in readouts.items()}
        self.spec = spec
        self.heads = dict(heads or {})
        ranks = {n.rank for n in self.nets.values()}
        if len(ranks) != 1:
            raise ConfigError(f"all mode networks must share one rank, got {sorted(ranks)}")
        for tag, modes in self.readouts.items():
            _tag_code(tag)
            missing = [m for m in modes if m not in self.nets]
            if missing:
                raise ConfigError(f"readout {tag} uses unknown modes {missing}")

    @property
    def rank(self):
        return next(iter(self.nets.values())).rank

    @property
    def tensors(self):
        return tuple(self.readouts)

    def weight(self, tag):
        return 1.0 if tag == "X" else float(self.spec.lam)

    def dims(self, tag="X"):
        return tuple(self.nets[m].entity_count for m in self._modes(tag))

    def _modes(self, tag):
        try:
            return self.readouts[tag]
        except KeyError:
            raise UsageError(f"model has no tensor {tag!r}; it has {self.tensors}") from None

    def parameters(self):
        """All trainable arrays by name; shared networks appear once."""
        out = {}
        for net in self.nets.values():
            out.update(net.parameters())
        for tag, head in self.heads.items():
            out.update(head.parameters(f"head_{tag}"))
        return out

    def copy(self):
        clone = object.__new__(type(self))
        clone.nets = {k: n.copy() for k, n in self.nets.items()}
        clone.readouts = dict(self.readouts)
        clone.spec = self.spec
        clone.heads = {t: h.copy() for t, h in self.heads.items()}
        return clone

    def embeddings(self):
        """Output embedding matrix of every mode."""
        return {name: net.output_matrix() for name, net in self.nets.items()}

    # -- prediction ------------------------------------------------------

    def _readout(self, tag, u, v, t):
        head = self.heads.get(tag)
        if head is None:
            return np.einsum("br,br,br->b", u, v, t), None
        out, cache = head.forward(u * v * t)
        return out, cache

    def _check_triple_bounds(self, tag, idx):
        dims = self.dims(tag)
        if len(idx) and ((idx < 0) | (idx >= np.asarray(dims))).any():
            bad = idx[((idx < 0) | (idx >= np.asarray(dims))).any(axis=1)][0]
            raise BoundsError(f"triple {tuple(int(x) for x in bad)} outside {tag} extents {dims}")

    def predict_many(self, tag, indices):
        """Predictions for an ``(n, 3)`` index array of one tensor."""
        idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        modes = self._modes(tag)
        self._check_triple_bounds(tag, idx)
        embs = [self.nets[m].forward(idx[:, a])[0] for a, m in enumerate(modes)]
        return self._readout(tag, *embs)[0]

    def predict(self, tag, i, j, k):
        return float(self.predict_many(tag, [(i, j, k)])[0])

    def predict_samples(self, samples: Samples):
        out = np.empty(len(samples))
        for code, tag in enumerate(TAGS):
            sel = samples.tags == code
            if sel.any():
                out[sel] = self.predict_many(tag, samples.indices[sel])
        return out

    def loss(self, batch):
        samples = _as_samples(batch)
        if len(samples) == 0:
            raise UsageError("empty batch")
        total = 0.0
        for code, tag in enumerate(TAGS):
            sel = samples.tags == code
            if sel.any():
                e = self.predict_many(tag, samples.indices[sel]) - samples.values[sel]
                total += self.weight(tag) * float(e @ e)
        return total

    # -- gradients -------------------------------------------------------

    def _backprop(self, samples: Samples) -> _Backprop:
        """Forward every touched network once, then backpropagate ``0.5 * loss``."""
        if len(samples) == 0:
            raise UsageError("empty batch")
        # row requests per net: list of (tag, axis, sample-selection) blocks
        requests = {}
        selections = {}
        for code, tag in enumerate(TAGS):
            sel = np.nonzero(samples.tags == code)[0]
            if len(sel) == 0:
                continue
            modes = self._modes(tag)
            self._check_triple_bounds(tag, samples.indices[sel])
            selections[tag] = sel
            for axis, m in enumerate(modes):
                requests.setdefault(m, []).append((tag, axis))
        forwards = {}
        for m, reqs in requests.items():
            rows = np.concatenate([samples.indices[selections[tag], axis] for tag, axis in reqs])
            out, cache = self.nets[m].forward(rows)
            forwards[m] = (rows, out, cache)

        def block(m, tag, axis):
            start = 0
            for t2, a2 in requests[m]:
                n = len(selections[t2])
                if (t2, a2) == (tag, axis):
                    return slice(start, start + n)
                start += n
            raise AssertionError

        grad_out = {m: np.zeros_like(f[1]) for m, f in forwards.items()}
        result = _Backprop(0.0)
        for tag, sel in selections.items():
            modes = self._modes(tag)
            slices = [block(m, tag, a) for a, m in enumerate(modes)]
            u, v, t = (forwards[m][1][s] for m, s in zip(modes, slices))
            pred, head_cache = self._readout(tag, u, v, t)
            e = pred - samples.values[sel]
            w = self.weight(tag)
            result.loss += w * float(e @ e)
            g = w * e
            if head_cache is None:
                gz = g[:, None]
            else:
                result.heads[tag], gz = self.heads[tag].backward(head_cache, g)
            for m, s, gm in zip(modes, slices, (gz * (v * t), gz * (u * t), gz * (u * v))):
                grad_out[m][s] += gm
        for m, (rows, out, cache) in forwards.items():
            result.nets[m] = self.nets[m].backward(rows, cache, grad_out[m])
        return result

    def gradient(self, batch):
        """Dense gradient of :meth:`loss` w.r.t. every array in :meth:`parameters`."""
        samples = _as_samples(batch)
        bp = self._backprop(samples)
        out = {name: np.zeros_like(p) for name, p in self.parameters().items()}
        for m, g in bp.nets.items():
            for name, dense in self.nets[m].dense_gradients(g).items():
                out[name] = 2.0 * dense
        for tag, hg in bp.heads.items():
            for key, val in hg.items():
                out[f"head_{tag}.{key}"] = 2.0 * val
        return out

    def kink_distance(self, batch):
        """Smallest |pre-activation| met while predicting ``batch`` (inf when smooth)."""
        samples = _as_samples(batch)
        m = np.inf
        for code, tag in enumerate(TAGS):
            sel = samples.tags == code
            if not sel.any():
                continue
            idx = samples.indices[sel]
            modes = self._modes(tag)
            embs = []
            for a, name in enumerate(modes):
                net = self.nets[name]
                m = min(m, net.kink_distance(idx[:, a]))
                embs.append(net.forward(idx[:, a])[0])
            head = self.heads.get(tag)
            if head is not None:
                _, (_, a, _) = head.forward(embs[0] * embs[1] * embs[2])
                m = min(m, float(np.abs(a).min()))
        return m


class SingleModel(CompletionModel):
    kind = "single"


class CoupledModel(CompletionModel):
    kind = "coupled"

    @property
    def lam(self):
        return self.spec.lam


def _net_seed(seed, code):
    return np.random.SeedSequence([int(seed), code])


def _build_nets(names_dims, spec: ModelSpec):
    act = spec.act()
    return {name: init_network(d, spec.rank, spec.layers, spec.hidden, act,
                               seed=_net_seed(spec.seed, code), freeze_base=spec.freeze_base,
                               name=name)
            for code, (name, d) in enumerate(names_dims)}


def _build_heads(tags, spec: ModelSpec):
    if spec.readout != "mlp":
        return {}
    return {tag: MlpHead.init(spec.rank, spec.head_width, spec.act(), _net_seed(spec.seed, 100 + c))
            for c, tag in enumerate(tags)}


def build_single(dims, spec: ModelSpec) -> SingleModel:
    """Three mode networks sized to ``dims``."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError(f"dims must be three positive extents, got {dims}")
    nets = _build_nets(zip("UVT", dims), spec)
    return SingleModel(nets, {"X": ("U", "V", "T")}, spec, _build_heads(["X"], spec))


def build_coupled(dims_x, dims_y, spec: ModelSpec) -> CoupledModel:
    """Shared ``U``/``V`` over modes 1-2 of both tensors, ``T`` and ``W`` for their third modes."""
    dims_x = tuple(int(d) for d in dims_x)
    dims_y = tuple(int(d) for d in dims_y)
    if dims_x[:2] != dims_y[:2]:
        raise ConfigError(f"coupled tensors must agree on the first two extents, got {dims_x} and {dims_y}")
    nets = _build_nets(zip("UVTW", dims_x + dims_y[2:]), spec)
    readouts = {"X": ("U", "V", "T"), "Y": ("U", "V", "W")}
    return CoupledModel(nets, readouts, spec, _build_heads(["X", "Y"], spec))


def make_cp_baseline(dims, r, seed=0) -> SingleModel:
    """Depth-0, dot-readout model: predictions are exactly the CP multilinear form."""
    return build_single(dims, ModelSpec(rank=r, layers=0, readout="dot", seed=seed))


def model_from_factors(factors, spec: ModelSpec | None = None):
    """Depth-0 dot-readout model with the given factor matrices as bases.

    ``factors`` is ``(U, V, T)`` for a single model or ``(U, V, T, W)`` for
    a coupled one.
    """
    r = np.asarray(factors[0]).shape[1]
    spec = spec or ModelSpec(rank=r)
    spec = replace(spec, rank=r, layers=0, readout="dot")
    nets = {name: EmbeddingNetwork(f, activation=spec.act(), name=name) for name, f in zip("UVTW", factors)}
    if len(factors) == 3:
        return SingleModel(nets, {"X": ("U", "V", "T")}, spec)
    return CoupledModel(nets, {"X": ("U", "V", "T"), "Y": ("U", "V", "W")}, spec)


def predict(model: CompletionModel, which, triple):
    """Prediction for one index triple of tensor ``which`` (``"X"`` or ``"Y"``)."""
    i, j, k = triple
    return model.predict(which, i, j, k)


def loss_batch(model: CompletionModel, batch):
    """``sum_X e^2 + lam * sum_Y e^2`` over a batch of ``(tag, i, j, k, value)``."""
    return model.loss(batch)


class Adam:
    """Adaptive-moment updates applied only to the parameters a batch touches."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, {}

    def step(self, name, param, grad, lr):
        m = self.m.setdefault(name, np.zeros_like(param))
        v = self.v.setdefault(name, np.zeros_like(param))
        t = self.t[name] = self.t.get(name, 0) + 1
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1 ** t)
        vhat = v / (1 - self.beta2 ** t)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)


def _check_finite(bp: _Backprop, samples):
    ok = np.isfinite(bp.loss)
    for g in bp.nets.values():
        arrays = ([g.base] if g.base is not None else []) + g.P + g.Q
        ok = ok and all(np.isfinite(a).all() for a in arrays)
    for hg in bp.heads.values():
        ok = ok and all(np.isfinite(a).all() for a in hg.values())
    if not ok:
        head = samples.indices[:5].tolist()
        raise DivergenceError(f"non-finite loss or gradient (batch loss {bp.loss!r}, "
                              f"{len(samples)} samples, first triples {head})")


def grad_step(model: CompletionModel, batch, lr, optimizer=None):
    """One in-place update from the summed gradient of a batch.

    Only the networks and heads read by the batch's tensors move, so an
    ``X``-only batch never touches ``W`` and a ``Y``-only batch never
    touches ``T``. Returns the batch loss before the update.

    Raises
    ------
    DivergenceError
        When the loss or any gradient is not finite.
    """
    if not lr > 0:
        raise UsageError(f"learning rate must be positive, got {lr}")
    samples = _as_samples(batch)
    bp = model._backprop(samples)
    _check_finite(bp, samples)
    if optimizer is None:
        for m, g in bp.nets.items():
            model.nets[m].apply(g, lr)
        for tag, hg in bp.heads.items():
            model.heads[tag].apply(hg, lr)
        return bp.loss
    for m, g in bp.nets.items():
        net = model.nets[m]
        params = net.parameters()
        for name, dense in net.dense_gradients(g).items():
            optimizer.step(name, params[name], dense, lr)
        net.version += 1
    for tag, hg in bp.heads.items():
        params = model.heads[tag].parameters(f"head_{tag}")
        for key, val in hg.items():
            optimizer.step(f"head_{tag}.{key}", params[f"head_{tag}.{key}"], val, lr)
    return bp.loss


# -- checkpoints ---------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, model: CompletionModel, standardizers=None, extra=None):
    """Write a zip archive: ``manifest.json`` plus one row-major ``.npy`` per array.

    The archive carries fixed timestamps, so identical models give
    byte-identical files. The write goes to a temporary file first and is
    renamed into place.
    """
    path = Path(path)
    arrays = model.parameters()
    if model.spec.freeze_base:
        for name, net in model.nets.items():
            arrays.setdefault(f"{name}.base", net.base)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "spec": model.spec.to_dict(),
        "dims": {name: net.entity_count for name, net in model.nets.items()},
        "readouts": {t: list(m) for t, m in model.readouts.items()},
        "arrays": {name: list(a.shape) for name, a in sorted(arrays.items())},
        "standardizers": {t: s.to_dict() for t, s in sorted((standardizers or {}).items())},
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _zip_write(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
        for name in sorted(arrays):
            _zip_write(zf, f"{name}.npy", _npy_bytes(arrays[name]))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`.

    Returns
    -------
    (CompletionModel, dict of Standardizer, dict)
        The model, standardizers by tensor tag, and the ``extra`` metadata.
    """
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != CHECKPOINT_FORMAT:
                raise FormatError(f"checkpoint format {manifest.get('format')!r}, "
                                  f"expected {CHECKPOINT_FORMAT!r}")
            arrays = {}
            for name, shape in manifest["arrays"].items():
                a = np.load(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
                if list(a.shape) != shape:
                    raise FormatError(f"array {name} has shape {a.shape}, manifest says {shape}")
                arrays[name] = a
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    spec = ModelSpec.from_dict(manifest["spec"])
    act = spec.act()
    nets = {}
    for name in manifest["dims"]:
        P = [arrays[f"{name}.P{j}"] for j in range(spec.layers)]
        Q = [arrays[f"{name}.Q{j}"] for j in range(spec.layers)]
        nets[name] = EmbeddingNetwork(arrays[f"{name}.base"], P, Q, act, spec.freeze_base, name)
    heads = {}
    for tag in manifest["readouts"]:
        if f"head_{tag}.W1" in arrays:
            p = f"head_{tag}."
            heads[tag] = MlpHead(arrays[p + "W1"], arrays[p + "b1"], arrays[p + "w2"], arrays[p + "b2"], act)
    cls = {"single": SingleModel, "coupled": CoupledModel}.get(manifest["kind"])
    if cls is None:
        raise FormatError(f"unknown model kind {manifest['kind']!r}")
    model = cls(nets, manifest["readouts"], spec, heads)
    stds = {t: Standardizer.from_dict(d) for t, d in manifest["standardizers"].items()}
    return model, stds, manifest.get("extra", {})
