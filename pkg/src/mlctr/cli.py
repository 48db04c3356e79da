"""Command-line entry point: ``python -m mlctr <command> [flags]``.

Commands: ``train``, ``evaluate``, ``impute``, ``export-embeddings``,
``sweep``, ``synth``. Settings come from built-in defaults, then an
optional ``--config`` file of ``key=value`` lines, then command-line flags
(flags win). Every run writes ``manifest.txt`` to its output directory;
passing that file back through ``--config`` repeats the run.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .errors import ConfigError, DataError, MLCTRError
from .models import (CHECKPOINT_FORMAT, ModelSpec, build_coupled, build_single,
                     load_checkpoint, save_checkpoint)
from .sparse import SplitSpec, Standardizer, load_coo, save_coo, split, standardize
from .synth import SynthSpec, generate, nested_masks, write_synth
from .training import TrainConfig, evaluate, impute, train, write_history, write_metrics

log = logging.getLogger("mlctr")

COMMANDS = ("train", "evaluate", "impute", "export-embeddings", "sweep", "synth")
MANIFEST_FORMAT = "mlctr-manifest/1"


@dataclass(frozen=True)
class RunConfig:
    """Flat run settings; field names double as config-file keys."""

    command: str = "train"
    x: str | None = None
    y: str | None = None
    out: str = "run"
    checkpoint: str | None = None
    query: str | None = None
    # model
    rank: int = 4
    layers: int = 2
    hidden: int = 4
    activation: str = "elu"
    elu_alpha: float = 1.0
    readout: str = "dot"
    mlp_hidden: int | None = None
    lam: float = 1.0
    freeze_base: bool = False
    # training
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    optimizer: str = "sgd"
    seed: int = 0
    deterministic: bool = False
    split: str = "0.72,0.08,0.20"
    standardize: bool = True
    mape_epsilon: float = 1e-6
    # sweep
    ranks: str = "2,4"
    sparsities: str = "0.9"
    variants: str = "cp,mlctr"
    jobs: int = 1
    # synth
    dims: str = "30,30,30"
    true_rank: int = 2
    noise: float = 0.0
    nonlinearity: str = "none"
    factor_dist: str = "normal"
    coupled: bool = False
    sparsity: float | None = None
    sparsity_y: float | None = None

    def model_spec(self, **over):
        kw = dict(rank=self.rank, layers=self.layers, hidden=self.hidden, activation=self.activation,
                  elu_alpha=self.elu_alpha, readout=self.readout, mlp_hidden=self.mlp_hidden,
                  lam=self.lam, seed=self.seed, freeze_base=self.freeze_base)
        kw.update(over)
        return ModelSpec(**kw)

    def train_config(self):
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, seed=self.seed, deterministic=self.deterministic,
                           optimizer=self.optimizer)

    def split_spec(self, offset=0):
        return SplitSpec.parse(self.split, seed=self.seed + offset)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_ALIASES = {"lambda": "lam", "batch-size": "batch_size", "max-epochs": "max_epochs"}


def _coerce(name, raw):
    f = _FIELDS[name]
    typ = str(f.type)
    if raw is None or (isinstance(raw, str) and raw == ""):
        if "None" in typ:
            return None
        raise ConfigError(f"{name} needs a value")
    if not isinstance(raw, str):
        return raw
    try:
        if typ.startswith("bool"):
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def read_config_file(path):
    """``key=value`` lines; ``#`` comments and ``manifest.*`` keys are skipped.

    An empty value (``key=``) means "unset" for optional settings.
    """
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("manifest."):
            continue
        key = _ALIASES.get(key, key.replace("-", "_"))
        if key not in _FIELDS or key == "command":
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def write_manifest(path, cfg: RunConfig):
    lines = [f"# run manifest written by mlctr {__version__}",
             f"manifest.format={MANIFEST_FORMAT}",
             f"manifest.checkpoint_format={CHECKPOINT_FORMAT}",
             f"manifest.command={cfg.command}"]
    for f in fields(cfg):
        if f.name == "command":
            continue
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={'' if v is None else v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    add = common.add_argument
    add("--config", default=S, help="key=value file (e.g. a previous run's manifest.txt)")
    add("--x", default=S, help="COO file of tensor X")
    add("--y", default=S, help="COO file of coupled tensor Y (shares modes 1 and 2 with X)")
    add("--out", default=S, help="output directory")
    add("--checkpoint", default=S, help="model checkpoint to read")
    add("--rank", type=int, default=S)
    add("--layers", type=int, default=S)
    add("--hidden", type=int, default=S, help="hidden width per layer")
    add("--activation", choices=["relu", "elu", "sigmoid", "identity"], default=S)
    add("--readout", choices=["dot", "mlp"], default=S)
    add("--mlp-hidden", dest="mlp_hidden", type=int, default=S)
    add("--lambda", dest="lam", type=float, default=S, help="weight of the Y reconstruction loss")
    add("--lr", type=float, default=S)
    add("--batch-size", dest="batch_size", type=int, default=S)
    add("--max-epochs", dest="max_epochs", type=int, default=S)
    add("--patience", type=int, default=S)
    add("--optimizer", choices=["sgd", "adam"], default=S)
    add("--seed", type=int, default=S)
    add("--split", default=S, help="train,val,test fractions, e.g. 0.72,0.08,0.20")
    add("--deterministic", action="store_const", const=True, default=S)
    add("--no-standardize", dest="standardize", action="store_const", const=False, default=S)
    add("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="mlctr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model and evaluate it on the test split")
    p = sub.add_parser("evaluate", parents=[common], help="metrics of a checkpoint on a COO test file")
    p.add_argument("--mape-epsilon", dest="mape_epsilon", type=float, default=S)
    p = sub.add_parser("impute", parents=[common], help="predict values at query coordinates")
    p.add_argument("--query", default=S, help="file of 'i j k' or 'TAG i j k' lines")
    sub.add_parser("export-embeddings", parents=[common], help="write per-mode output embeddings")
    p = sub.add_parser("sweep", parents=[common], help="grid over variants, ranks and sparsity levels")
    p.add_argument("--ranks", default=S)
    p.add_argument("--sparsities", default=S)
    p.add_argument("--variants", default=S, help="comma list of cp, mlctr, mlctr-mlp, coupled")
    p.add_argument("--sparsity-y", dest="sparsity_y", type=float, default=S)
    p.add_argument("--jobs", type=int, default=S)
    p = sub.add_parser("synth", parents=[common], help="write a synthetic CP dataset")
    p.add_argument("--dims", default=S, help="d1,d2,d3 or d1,d2,d3,d4 with --coupled")
    p.add_argument("--true-rank", dest="true_rank", type=int, default=S)
    p.add_argument("--noise", type=float, default=S)
    p.add_argument("--nonlinearity", choices=["none", "tanh-warp"], default=S)
    p.add_argument("--factor-dist", dest="factor_dist", choices=["normal", "elu", "offset-normal"], default=S)
    p.add_argument("--coupled", action="store_const", const=True, default=S)
    p.add_argument("--sparsity", type=float, default=S)
    p.add_argument("--sparsity-y", dest="sparsity_y", type=float, default=S)
    return parser


def resolve_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key, val in vars(args).items():
        if key in _FIELDS and key != "command":
            values[key] = _coerce(key, val)
    values["command"] = args.command
    return RunConfig(**values)


# -- commands ------------------------------------------------------------

def _load(path, name):
    if not path:
        raise ConfigError(f"--{name.lower()} is required")
    try:
        return load_coo(path, name=Path(path).stem)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _variant_name(spec: ModelSpec, coupled):
    if coupled:
        return "mlctr-coupled"
    if spec.layers == 0 and spec.readout == "dot":
        return "cp"
    return "mlctr-mlp" if spec.readout == "mlp" else "mlctr"


def _prepare(t, cfg: RunConfig, offset):
    if cfg.standardize:
        ts, st = standardize(t)
    else:
        ts, st = t, Standardizer(applied=False)
    return ts, st, split(ts, cfg.split_spec(offset))


def _fit(cfg: RunConfig, x, y=None, spec=None):
    """Standardize, split, build, train. Returns a dict of everything produced."""
    if y is not None and x.dims[:2] != y.dims[:2]:
        raise ConfigError(f"coupled tensors must share extents d1, d2: X has {x.dims}, Y has {y.dims}")
    spec = spec or cfg.model_spec()
    xs, sx, (xtr, xva, xte) = _prepare(x, cfg, 0)
    stds = {"X": sx}
    parts = {"X": (xtr, xva, xte)}
    if y is not None:
        ys, sy, (ytr, yva, yte) = _prepare(y, cfg, 1)
        stds["Y"] = sy
        parts["Y"] = (ytr, yva, yte)
        model = build_coupled(x.dims, y.dims, spec)
    else:
        model = build_single(x.dims, spec)
    train_stream = {tag: p[0] for tag, p in parts.items()}
    val_stream = {tag: p[1] for tag, p in parts.items()}
    t0 = time.perf_counter()
    result = train(model, train_stream, val_stream, cfg.train_config())
    seconds = time.perf_counter() - t0
    reports = {tag: evaluate(result.model, p[2], stds[tag], tensor=tag, mape_epsilon=cfg.mape_epsilon)
               for tag, p in parts.items()}
    return dict(result=result, stds=stds, parts=parts, reports=reports, seconds=seconds,
                variant=_variant_name(spec, y is not None), spec=spec)


def _metric_rows(fit, names):
    rows = []
    for tag, rep in fit["reports"].items():
        rows.append(dict(dataset=names[tag], model=fit["variant"], rank=fit["spec"].rank, **rep.as_row()))
    return rows


def run_train(cfg: RunConfig):
    x = _load(cfg.x, "X")
    y = _load(cfg.y, "Y") if cfg.y else None
    if y is not None and x.dims[:2] != y.dims[:2]:
        raise ConfigError(f"coupled tensors must share extents d1, d2: X has {x.dims}, Y has {y.dims}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.txt", cfg)
    fit = _fit(cfg, x, y)
    res = fit["result"]
    names = {"X": x.name, "Y": y.name if y is not None else None}
    extra = {"best_epoch": res.best_epoch, "epochs_run": res.epochs_run,
             "best_val_rmse": res.best_val_rmse, "variant": fit["variant"]}
    save_checkpoint(out / "model.ckpt", res.model, fit["stds"], extra)
    write_history(out / "history.csv", res.history)
    write_metrics(out / "metrics.csv", _metric_rows(fit, names))
    for tag, (tr, va, te) in fit["parts"].items():
        st = fit["stds"][tag]
        for part, t in (("train", tr), ("val", va), ("test", te)):
            save_coo(t.with_values(st.inverse_transform(t.values)), out / f"{tag.lower()}.{part}.coo")
    with (out / "timing.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seconds_total", "epochs"])
        w.writerow([f"{fit['seconds']:.6f}", res.epochs_run])
    rep = fit["reports"]["X"]
    print(f"{fit['variant']} rank {fit['spec'].rank}: {res.epochs_run} epochs (best {res.best_epoch}), "
          f"test rmse {rep.rmse:.6g} mae {rep.mae:.6g} mape {rep.mape:.6g}")
    return 0


def _checkpoint_path(cfg):
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "model.ckpt"


def _read_checkpoint(cfg):
    path = _checkpoint_path(cfg)
    if not path.exists():
        raise OSError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def run_evaluate(cfg: RunConfig):
    model, stds, extra = _read_checkpoint(cfg)
    rows = []
    for tag, path in (("X", cfg.x), ("Y", cfg.y)):
        if not path:
            continue
        t = _load(path, tag)
        st = stds.get(tag, Standardizer(applied=False))
        ts = t.with_values(st.transform(t.values))
        rep = evaluate(model, ts, st, tensor=tag, mape_epsilon=cfg.mape_epsilon)
        rows.append(dict(dataset=t.name, model=extra.get("variant", model.kind), rank=model.rank, **rep.as_row()))
        print(f"{t.name}: rmse {rep.rmse:.6g} mae {rep.mae:.6g} mape {rep.mape:.6g} "
              f"({rep.n_mape_included}/{rep.n_total} in mape)")
    if not rows:
        raise ConfigError("evaluate needs --x and/or --y test files")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics_eval.csv", rows)
    return 0


def read_queries(path):
    """Lines of ``i j k`` (tensor X) or ``TAG i j k``."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = "X"
        if len(parts) == 4:
            tag, parts = parts[0], parts[1:]
        try:
            if len(parts) != 3:
                raise ValueError
            out.append((tag, tuple(int(p) for p in parts)))
        except ValueError:
            raise DataError(f"{path}:{lineno}: expected 'i j k' or 'TAG i j k', got {line!r}") from None
    return out


def run_impute(cfg: RunConfig):
    if not cfg.query:
        raise ConfigError("impute needs --query")
    model, stds, _ = _read_checkpoint(cfg)
    queries = read_queries(cfg.query)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for tag in ("X", "Y"):
        triples = [q for t, q in queries if t == tag]
        if triples:
            rows += [(tag, ijk, v) for ijk, v in impute(model, triples, stds.get(tag), tensor=tag)]
    order = {(t, q): n for n, (t, q) in enumerate(queries)}
    rows.sort(key=lambda r: order[(r[0], r[1])])
    with (out / "imputed.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tensor", "i", "j", "k", "value"])
        for tag, (i, j, k), v in rows:
            w.writerow([tag, i, j, k, f"{v:.17g}"])
    print(f"imputed {len(rows)} entries -> {out / 'imputed.csv'}")
    return 0


def export_embeddings(model, out_dir):
    """One ``embeddings_<mode>.csv`` per mode: entity index then ``r`` values, no header."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, emb in model.embeddings().items():
        path = out / f"embeddings_{name}.csv"
        with path.open("w", newline="") as fh:
            for i, row in enumerate(emb):
                fh.write(",".join([str(i)] + [f"{v:.17g}" for v in row]) + "\n")
        paths[name] = path
    return paths


def run_export(cfg: RunConfig):
    model, _, _ = _read_checkpoint(cfg)
    paths = export_embeddings(model, cfg.out)
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return 0


def _split_list(text, cast):
    try:
        return [cast(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad list {text!r}") from None


SWEEP_VARIANTS = ("cp", "mlctr", "mlctr-mlp", "coupled")
SWEEP_COLUMNS = ["variant", "rank", "sparsity", "status", "rmse", "mae", "mape", "n_train",
                 "epochs", "seconds", "seconds_per_epoch", "error"]


def _sweep_cell(args):
    cfg, variant, rank, level, x, y = args
    row = dict(variant=variant, rank=rank, sparsity=level, status="ok", error="")
    try:
        layers = 0 if variant == "cp" else cfg.layers
        readout = "mlp" if variant == "mlctr-mlp" else "dot"
        spec = cfg.model_spec(rank=rank, layers=layers, readout=readout)
        fit = _fit(cfg, x, y if variant == "coupled" else None, spec)
        rep = fit["reports"]["X"]
        res = fit["result"]
        row.update(rmse=rep.rmse, mae=rep.mae, mape=rep.mape,
                   n_train=sum(len(p[0]) for p in fit["parts"].values()),
                   epochs=res.epochs_run, seconds=round(fit["seconds"], 6),
                   seconds_per_epoch=round(fit["seconds"] / max(res.epochs_run, 1), 6))
    except Exception as exc:  # one failed cell must not abort the sweep
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def _worker_cap(requested):
    cap = os.environ.get("MLCTR_THREADS")
    if cap:
        try:
            return max(1, min(int(requested), int(cap)))
        except ValueError:
            raise ConfigError(f"MLCTR_THREADS must be an integer, got {cap!r}") from None
    return max(1, int(requested))


def run_sweep(cfg: RunConfig):
    ranks = _split_list(cfg.ranks, int)
    levels = _split_list(cfg.sparsities, float)
    variants = _split_list(cfg.variants, str)
    if not ranks or not levels or not variants:
        raise ConfigError("sweep axes must be non-empty")
    unknown = [v for v in variants if v not in SWEEP_VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; choose from {SWEEP_VARIANTS}")
    x = _load(cfg.x, "X")
    y = _load(cfg.y, "Y") if cfg.y else None
    if "coupled" in variants:
        if y is None:
            raise ConfigError("the coupled variant needs --y")
        if x.dims[:2] != y.dims[:2]:
            raise ConfigError(f"coupled tensors must share extents d1, d2: X has {x.dims}, Y has {y.dims}")
        if cfg.sparsity_y is not None:
            y = nested_masks(y, [cfg.sparsity_y], cfg.seed + 1)[cfg.sparsity_y]
    masks = nested_masks(x, sorted(levels), cfg.seed)
    cells = [(cfg, v, r, s, masks[s], y) for s in levels for v in variants for r in ranks]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.txt", cfg)
    jobs = _worker_cap(cfg.jobs)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(c) for c in cells]
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} cells ({failed} failed) -> {out / 'sweep.csv'}")
    return 0


def run_synth(cfg: RunConfig):
    dims = tuple(_split_list(cfg.dims, int))
    spec = SynthSpec(dims=dims, true_rank=cfg.true_rank, noise_std=cfg.noise,
                     nonlinearity=cfg.nonlinearity, coupled=cfg.coupled, seed=cfg.seed,
                     factor_dist=cfg.factor_dist)
    data = generate(spec)
    paths = write_synth(data, cfg.out, cfg.sparsity, cfg.sparsity_y)
    write_manifest(Path(cfg.out) / "manifest.txt", cfg)
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return 0


RUNNERS = {"train": run_train, "evaluate": run_evaluate, "impute": run_impute,
           "export-embeddings": run_export, "sweep": run_sweep, "synth": run_synth}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return RUNNERS[cfg.command](cfg)
    except MLCTRError as exc:
        kind = {2: "config", 3: "data", 4: "divergence"}.get(exc.exit_code, "error")
        print(f"mlctr: {kind} error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mlctr: I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
