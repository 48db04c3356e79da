"""Synthetic ground truth and brute-force oracles.

Nothing here is used by the training path; these helpers exist so the
engine can be checked against something computed a different way.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import MaskError, OracleError, UsageError
from .sparse import SparseTensor3, save_coo

__all__ = ["SynthSpec", "SynthData", "generate", "mask", "nested_masks", "cp_dense",
           "fd_gradient", "dense_reconstruct", "write_synth"]

DENSE_CAP = 10**6
FACTOR_DISTS = ("normal", "elu", "offset-normal")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic CP tensor, optionally coupled with a second one.

    ``dims`` holds ``(d1, d2, d3)`` or, when ``coupled``, ``(d1, d2, d3, d4)``
    where ``d4`` is the third extent of ``Y``.
    """

    dims: tuple = (30, 30, 30)
    true_rank: int = 2
    noise_std: float = 0.0
    nonlinearity: str = "none"
    coupled: bool = False
    factor_dist: str = "normal"
    sparsity_levels: tuple = ()
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "sparsity_levels", tuple(float(s) for s in self.sparsity_levels))
        want = 4 if self.coupled else 3
        if len(dims) != want or min(dims) < 1:
            raise UsageError(f"{'coupled' if self.coupled else 'single'} spec needs {want} positive dims, got {dims}")
        if not 1 <= int(self.true_rank) <= min(dims):
            raise UsageError(f"true_rank must be in 1..{min(dims)}, got {self.true_rank}")
        if self.noise_std < 0:
            raise UsageError("noise_std must be >= 0")
        if self.nonlinearity not in ("none", "tanh-warp"):
            raise UsageError(f"nonlinearity must be 'none' or 'tanh-warp', got {self.nonlinearity!r}")
        if self.factor_dist not in FACTOR_DISTS:
            raise UsageError(f"factor_dist must be one of {FACTOR_DISTS}, got {self.factor_dist!r}")
        lv = self.sparsity_levels
        if any(not 0 <= s < 1 for s in lv) or any(b <= a for a, b in zip(lv, lv[1:])):
            raise UsageError(f"sparsity levels must be strictly increasing in [0, 1), got {lv}")


@dataclass
class SynthData:
    x: SparseTensor3
    y: SparseTensor3 | None
    factors: dict = field(default_factory=dict)
    spec: SynthSpec | None = None

    def checksums(self):
        return {k: hashlib.sha256(np.ascontiguousarray(v).tobytes()).hexdigest()
                for k, v in sorted(self.factors.items())}


def cp_dense(*factors):
    """Dense CP tensor ``sum_s A[i,s] B[j,s] C[k,s]``."""
    return np.einsum("is,js,ks->ijk", *factors)


def _values(factors, spec, rng):
    dense = cp_dense(*factors)
    if spec.noise_std > 0:
        dense = dense + rng.normal(0.0, spec.noise_std, size=dense.shape)
    if spec.nonlinearity == "tanh-warp":
        dense = np.tanh(dense)
    return dense


def _factor_sampler(kind, rng):
    def draw(d, r):
        z = rng.normal(size=(d, r))
        if kind == "elu":
            z = np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
        elif kind == "offset-normal":
            z = 0.5 + 0.5 * z
        return z
    return draw


def generate(spec: SynthSpec) -> SynthData:
    """Fully observed tensor(s) built from random factor matrices.

    ``factor_dist="normal"`` draws factor entries from N(0, 1);
    ``"elu"`` passes those draws through ``elu`` so every entry lies in
    ``(-1, inf)``, the output range of an elu embedding network;
    ``"offset-normal"`` draws from N(0.5, 0.25), mostly positive and well
    inside that range.

    In the coupled case ``Y`` reuses the exact ``U`` and ``V`` arrays of ``X``
    with a fresh third-mode factor ``W``.
    """
    rng = np.random.default_rng(spec.seed)
    r = int(spec.true_rank)
    d1, d2, d3 = spec.dims[:3]
    draw = _factor_sampler(spec.factor_dist, rng)
    U, V, T = draw(d1, r), draw(d2, r), draw(d3, r)
    factors = {"U": U, "V": V, "T": T}
    x = SparseTensor3.from_dense(_values((U, V, T), spec, rng), name="X")
    y = None
    if spec.coupled:
        W = draw(spec.dims[3], r)
        factors["W"] = W
        y = SparseTensor3.from_dense(_values((U, V, W), spec, rng), name="Y")
    return SynthData(x, y, factors, spec)


def _keep_count(t, level):
    if not 0 <= level < 1:
        raise MaskError(f"sparsity must be in [0, 1), got {level}")
    # guard against e.g. (1 - 0.99) * 27000 = 270.00000000000023
    keep = math.ceil((1.0 - level) * t.n_cells - 1e-9)
    if keep < 1:
        raise MaskError(f"sparsity {level} keeps no entries of a {t.dims} tensor")
    if keep > len(t):
        raise MaskError(f"sparsity {level} needs {keep} entries but {t.name!r} has only {len(t)}")
    return keep


def mask(t: SparseTensor3, sparsity_level, seed=0) -> SparseTensor3:
    """Uniformly random subset with ``ceil((1 - sparsity) * d1 d2 d3)`` entries.

    The subset is a prefix of one seeded permutation, so for a fixed seed a
    sparser mask is always contained in a denser one.
    """
    keep = _keep_count(t, sparsity_level)
    perm = np.random.default_rng(seed).permutation(len(t))
    return t.subset(np.sort(perm[:keep]))


def nested_masks(t: SparseTensor3, levels, seed=0):
    """``{level: mask(t, level, seed)}``; the results are nested by construction."""
    return {float(s): mask(t, s, seed) for s in levels}


def fd_gradient(loss_fn, params, step=1e-6):
    """Central-difference gradient of a scalar function of a flat vector."""
    if not step > 0:
        raise UsageError("step must be positive")
    p = np.array(params, dtype=np.float64).reshape(-1)
    g = np.empty_like(p)
    for n in range(p.size):
        old = p[n]
        p[n] = old + step
        fp = loss_fn(p)
        p[n] = old - step
        fm = loss_fn(p)
        p[n] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite loss at coordinate {n}")
        g[n] = (fp - fm) / (2.0 * step)
    return g


def dense_reconstruct(model, dims=None, tensor="X"):
    """Prediction at every cell, one :meth:`predict` call per triple."""
    dims = tuple(dims) if dims is not None else model.dims(tensor)
    if math.prod(dims) > DENSE_CAP:
        raise OracleError(f"{dims} has more than {DENSE_CAP} cells")
    out = np.empty(dims)
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                out[i, j, k] = model.predict(tensor, i, j, k)
    return out


def write_synth(data: SynthData, out_dir, sparsity_x=None, sparsity_y=None, mask_seed=None):
    """Write ``x.coo`` (and ``y.coo``) plus a ``synth.json`` sidecar.

    Returns the paths written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = data.spec.seed if mask_seed is None else mask_seed
    x = data.x if sparsity_x is None else mask(data.x, sparsity_x, seed)
    paths = {"x": out / "x.coo"}
    save_coo(x, paths["x"], comment="synthetic tensor X")
    y = None
    if data.y is not None:
        y = data.y if sparsity_y is None else mask(data.y, sparsity_y, seed + 1)
        paths["y"] = out / "y.coo"
        save_coo(y, paths["y"], comment="synthetic tensor Y")
    sidecar = {
        "format": "mlctr-synth/1",
        "spec": asdict(data.spec),
        "sparsity_x": sparsity_x,
        "sparsity_y": sparsity_y,
        "mask_seed": seed,
        "observed": {"x": len(x), "y": len(y) if y is not None else None},
        "factor_sha256": data.checksums(),
    }
    paths["sidecar"] = out / "synth.json"
    paths["sidecar"].write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return paths
