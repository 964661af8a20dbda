"""Command-line entry point: ``qbag run``, ``qbag map`` and ``qbag audit``.

Exit status: 0 complete, 1 configuration or usage error, 2 partial completion,
3 external oracle timed out.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from qbag import rng as rngs
from qbag.domain import ConfigError, DomainError, Pool
from qbag.ensemble import SuspectLabel, flag_suspect_labels, load_committee, train_committee
from qbag.experiment import (
    export_map,
    export_oracle_map,
    run_comparison,
    run_tag,
    write_curves,
)
from qbag.loop import LoopConfig, load_checkpoint
from qbag.mlp import INITIAL_HIDDEN_UNITS, TrainConfig, adapt_hidden_units, with_seed
from qbag.oracle import OracleSpec, synthetic2d, synthetic3d
from qbag.sampling import Strategy

log = logging.getLogger("qbag")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL, EXIT_TIMEOUT = 0, 1, 2, 3
OUT_ENV = "QBAG_OUT"
DEFAULT_OUT = "qbag-out"
SECTION = "qbag"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

_INT = int
_FLOAT = float


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _optional_int(v: str):
    return None if v.strip().lower() in ("", "none", "auto") else int(v)


def parse_seeds(text: str) -> list[int]:
    """``"1..30"`` (inclusive), ``"0,3,7"`` or a mix like ``"0..2,9"``."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = (int(x) for x in part.split("..", 1))
            if hi < lo:
                raise ValueError(f"empty seed range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError("no seeds given")
    if any(s < 0 for s in out):
        raise ValueError("seeds must be >= 0")
    if len(set(out)) != len(out):
        raise ValueError("duplicate seeds")
    return out


def parse_strategies(text: str) -> list[str]:
    out = [Strategy(s.strip()).value for s in text.split(",") if s.strip()]
    if not out:
        raise ValueError("no strategies given")
    return out


def parse_bounds(text: str):
    """``"1400:2200, 0:1"`` -> ((1400, 2200), (0, 1))."""
    if text.strip().lower() in ("", "none"):
        return None
    return tuple(tuple(float(v) for v in part.split(":")) for part in text.split(","))


def parse_slice(text: str | None) -> dict[int, float]:
    """``"x3=0.5"`` -> {2: 0.5}."""
    if not text or text.strip().lower() == "none":
        return {}
    out = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        key = key.strip().lower()
        if not key.startswith("x") or not key[1:].isdigit() or not value:
            raise ValueError(f"slice must look like x3=0.5, got {part!r}")
        out[int(key[1:]) - 1] = float(value)
    return out


# key -> (parser, default). Defaults that depend on ``dim`` are filled in later.
KEYS: dict[str, tuple] = {
    "dim": (_INT, 2),
    "rounds": (_optional_int, None),
    "batch_size": (_optional_int, None),
    "n_explore": (_optional_int, None),
    "committee_size": (_INT, 20),
    "subsample_size": (_optional_int, None),
    "initial_size": (_INT, 20),
    "cv_k": (_INT, 10),
    "initial_hidden_units": (_INT, INITIAL_HIDDEN_UNITS),
    "fixed_hidden_units": (_optional_int, None),
    "explore_avoids_batch": (_bool, True),
    "resolution": (_optional_int, None),
    "test_size": (_optional_int, None),
    "strategies": (parse_strategies, ["qbag", "random"]),
    "seeds": (parse_seeds, list(range(10))),
    "oracle": (str, None),
    "noise": (_FLOAT, 0.0),
    "external_dir": (str, None),
    "timeout": (_FLOAT, 3600.0),
    "bounds": (parse_bounds, None),
    "epochs": (_INT, TrainConfig.epochs),
    "step_size": (_FLOAT, TrainConfig.step_size),
    "momentum": (_FLOAT, TrainConfig.momentum),
    "minibatch_size": (_INT, TrainConfig.minibatch_size),
    "l2_penalty": (_FLOAT, TrainConfig.l2_penalty),
    "map_resolution": (_optional_int, None),
    "map_slice": (parse_slice, None),
    "jobs": (_INT, 1),
}


@dataclass
class RunSettings:
    loop: LoopConfig
    strategies: list[str]
    seeds: list[int]
    jobs: int = 1
    map_resolution: int | None = None
    map_slice: dict[int, float] = field(default_factory=dict)

    def canonical(self) -> str:
        """Stable text form of everything that affects results; hashed for the manifest."""
        lp = self.loop
        lines = [f"{f.name} = {getattr(lp, f.name)!r}" for f in fields(lp)
                 if f.name not in ("oracle", "train", "strategy", "seed")]
        lines += [f"oracle.{f.name} = {getattr(lp.oracle, f.name)!r}" for f in fields(lp.oracle)]
        lines += [f"train.{f.name} = {getattr(lp.train, f.name)!r}" for f in fields(lp.train) if f.name != "rng_seed"]
        lines += [f"strategies = {','.join(self.strategies)}", f"seeds = {','.join(map(str, self.seeds))}"]
        lines += [f"map_resolution = {self.map_resolution!r}", f"map_slice = {sorted(self.map_slice.items())!r}"]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        cp.read_string(f"[{SECTION}]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return dict(cp[SECTION])


def build_settings(raw: dict[str, str], source: str = "config") -> RunSettings:
    """Validate ``raw`` key/value strings into :class:`RunSettings`.

    Errors name the offending key as ``<source>.<key>``.
    """
    vals = {}
    for key, (parse, default) in KEYS.items():
        vals[key] = default
    for key, text in raw.items():
        if key not in KEYS:
            raise ConfigError(f"{source}.{key}: unknown key")
        if text is None:
            continue
        try:
            vals[key] = KEYS[key][0](str(text))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}.{key}: {exc}") from None
    dim = vals["dim"]
    if dim not in (2, 3) and vals["oracle"] in (None, "synthetic2d", "synthetic3d"):
        raise ConfigError(f"{source}.dim: synthetic oracles need dim 2 or 3, got {dim}")
    paper = LoopConfig.paper_3d() if dim == 3 else LoopConfig.paper_2d()
    kind = vals["oracle"] or ("synthetic3d" if dim == 3 else "synthetic2d")
    try:
        spec = OracleSpec(kind, vals["noise"], 0, vals["external_dir"], vals["timeout"], vals["bounds"])
    except ValueError as exc:
        raise ConfigError(f"{source}.oracle: {exc}") from None
    try:
        train = TrainConfig(epochs=vals["epochs"], step_size=vals["step_size"], momentum=vals["momentum"],
                            minibatch_size=vals["minibatch_size"], l2_penalty=vals["l2_penalty"])
    except ValueError as exc:
        raise ConfigError(f"{source}.train: {exc}") from None

    def pick(key, fallback):
        return fallback if vals[key] is None else vals[key]

    batch = pick("batch_size", paper.batch_size)
    loop = LoopConfig(
        dim=dim,
        rounds=pick("rounds", paper.rounds),
        batch_size=batch,
        n_explore=vals["n_explore"],
        committee_size=vals["committee_size"],
        subsample_size=vals["subsample_size"],
        initial_size=vals["initial_size"],
        oracle=spec,
        train=train,
        cv_k=vals["cv_k"],
        initial_hidden_units=vals["initial_hidden_units"],
        fixed_hidden_units=vals["fixed_hidden_units"],
        explore_avoids_batch=vals["explore_avoids_batch"],
        resolution=vals["resolution"],
        test_size=vals["test_size"],
    )
    if vals["jobs"] < 1:
        raise ConfigError(f"{source}.jobs: must be >= 1")
    map_slice = vals["map_slice"]
    if not map_slice:
        map_slice = {2: 0.5} if dim == 3 else {}
    return RunSettings(loop, vals["strategies"], vals["seeds"], vals["jobs"], vals["map_resolution"], map_slice)


def settings_to_raw(s: RunSettings) -> dict[str, str]:
    """Inverse of :func:`build_settings`, used to store the resolved config next to the outputs."""
    lp = s.loop
    raw = {
        "dim": lp.dim, "rounds": lp.rounds, "batch_size": lp.batch_size, "n_explore": lp.n_explore,
        "committee_size": lp.committee_size, "subsample_size": lp.subsample_size,
        "initial_size": lp.initial_size, "cv_k": lp.cv_k, "initial_hidden_units": lp.initial_hidden_units,
        "fixed_hidden_units": lp.fixed_hidden_units, "explore_avoids_batch": lp.explore_avoids_batch,
        "resolution": lp.resolution, "test_size": lp.test_size,
        "strategies": ",".join(s.strategies), "seeds": ",".join(map(str, s.seeds)),
        "oracle": lp.oracle.kind, "noise": repr(lp.oracle.noise_rate), "external_dir": lp.oracle.external_dir,
        "timeout": repr(lp.oracle.timeout),
        "bounds": None if lp.oracle.bounds is None else ",".join(f"{a!r}:{b!r}" for a, b in lp.oracle.bounds),
        "epochs": lp.train.epochs, "step_size": repr(lp.train.step_size), "momentum": repr(lp.train.momentum),
        "minibatch_size": lp.train.minibatch_size, "l2_penalty": repr(lp.train.l2_penalty),
        "map_resolution": s.map_resolution,
        "map_slice": ",".join(f"x{ax + 1}={v!r}" for ax, v in sorted(s.map_slice.items())) or None,
        "jobs": s.jobs,
    }
    return {k: ("none" if v is None else str(v)) for k, v in raw.items()}


def write_config_file(s: RunSettings, path) -> None:
    lines = [f"{k} = {v}" for k, v in settings_to_raw(s).items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# run


def _write_batch_log(path: Path, pool: Pool, records, strategy: str) -> None:
    d = pool.dim
    kinds = {"qbag": None, "random": "random", "entropy": "entropy"}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "strategy", "kind", *[f"x{j + 1}" for j in range(d)]])
        for rec in records:
            if rec.batch is None:
                continue
            parts = [("disagreement", rec.batch.disagreement), ("exploratory", rec.batch.exploratory),
                     (kinds[strategy], rec.batch.picks)]
            for kind, ids in parts:
                for i in ids:
                    w.writerow([rec.round, strategy, kind, *(repr(float(v)) for v in pool.points[i])])


def _truth_fn(kind: str):
    return {"synthetic2d": synthetic2d, "synthetic3d": synthetic3d}.get(kind)


def cmd_run(settings: RunSettings, out_dir: Path, oracle_root: Path | None = None) -> int:
    """Run every (strategy, seed) pair, write curves, maps, committees, batch logs and a manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    write_config_file(settings, out_dir / "config.cfg")
    ck_root = out_dir / "checkpoints"
    lp = settings.loop
    if lp.oracle.kind == "external" and oracle_root is None:
        oracle_root = Path(lp.oracle.external_dir)

    def report(res):
        state = "ok" if res.ok else f"FAILED ({res.error})"
        print(f"{run_tag(res.strategy, res.seed)}: {state}", file=sys.stderr, flush=True)

    curve, results = run_comparison(lp, settings.strategies, settings.seeds, jobs=settings.jobs,
                                    checkpoint_root=ck_root, oracle_root=oracle_root, on_result=report)
    files = [out_dir / "config.cfg", *write_curves(curve, out_dir)]
    runs = {}
    map_res = settings.map_resolution or lp.grid_resolution
    map_slice = settings.map_slice if lp.dim == 3 else None
    for res in results:
        tag = run_tag(res.strategy, res.seed)
        entry = {"strategy": res.strategy.value, "seed": res.seed, "status": "complete" if res.ok else "failed"}
        if not res.ok:
            entry["error"] = res.error
        if res.ok:
            ck = load_checkpoint(ck_root / tag)
            model = out_dir / f"committee_{tag}.txt"
            shutil.copyfile(ck_root / tag / "committee.txt", model)
            pool_copy = out_dir / f"pool_{tag}.csv"
            shutil.copyfile(ck_root / tag / "pool.csv", pool_copy)
            batches = out_dir / f"batches_{tag}.csv"
            _write_batch_log(batches, ck.pool, res.records, res.strategy.value)
            mp = export_map(res.committee, map_res, out_dir / f"map_{tag}.csv", map_slice)
            entry["files"] = [p.name for p in (model, pool_copy, batches, mp)]
            entry["final_accuracy"] = res.records[-1].test_accuracy
            files += [model, pool_copy, batches, mp]
        runs[tag] = entry
    truth = _truth_fn(lp.oracle.kind)
    if truth is not None:
        files.append(export_oracle_map(truth, lp.dim, map_res, out_dir / "map_oracle.csv", map_slice))

    timeouts = [r for r in results if not r.ok and r.error.startswith("PendingOracleError")]
    status = "complete" if curve.complete else "partial"
    manifest = {
        "config_digest": "sha256:" + settings.digest(),
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "status": status,
        "files": sorted(p.name for p in files),
        "runs": runs,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    for s in settings.strategies:
        pts = [a for a in curve.agg if a.strategy == s]
        if pts:
            print(f"{s}: median accuracy {pts[-1].median:.4f} at {pts[-1].labels} labels")
    print(f"outputs in {out_dir}")
    if curve.complete:
        return EXIT_OK
    if timeouts:
        print(f"{len(timeouts)} run(s) waiting on the external oracle; answer the pending queries and rerun "
              f"with --resume {out_dir}", file=sys.stderr)
        return EXIT_TIMEOUT
    return EXIT_PARTIAL


# ---------------------------------------------------------------------------
# map and audit


def cmd_map(model_path, resolution: int, slice: dict[int, float] | None, out=None) -> int:
    """Write the committee's majority-vote map; ``out=None`` prints it."""
    try:
        with open(model_path, encoding="utf-8") as fh:
            committee = load_committee(fh)
    except OSError as exc:
        raise UsageError(f"cannot read model {model_path}: {exc.strerror}") from None
    except (DomainError, ValueError) as exc:
        raise UsageError(f"cannot load model {model_path}: {exc}") from None
    if resolution < 2:
        raise UsageError("resolution must be >= 2")
    try:
        export_map(committee, resolution, sys.stdout if out is None else out, slice or None)
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    return EXIT_OK


def audit_labels(
    X,
    y,
    n_classes: int = 5,
    seed: int = 0,
    committee_size: int = 20,
    train: TrainConfig | None = None,
    cv_k: int = 10,
) -> tuple[list[SuspectLabel], int]:
    """Bag a committee on the labeled set and return the labels its vote contradicts.

    The hidden size is adapted by repeated cross-validation starting from four
    units, until the choice stops changing. Returns the suspects and that size.
    """
    train = train or TrainConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    k = min(cv_k, len(X))
    hidden = INITIAL_HIDDEN_UNITS
    if k >= 2:
        seen = set()
        for step in range(8):
            cfg = with_seed(train, rngs.substream_seed(seed, "audit", 0, step))
            nxt = adapt_hidden_units(X, y, hidden, k, cfg, n_classes).chosen
            if nxt == hidden or nxt in seen:
                hidden = nxt
                break
            seen.add(hidden)
            hidden = nxt
    cfg = with_seed(train, rngs.substream_seed(seed, "audit", 1))
    c = train_committee(X, y, hidden, committee_size, None, cfg, n_classes,
                        bootstrap_seed=rngs.substream_seed(seed, "audit", 2))
    return flag_suspect_labels(c, X, y), hidden


def cmd_audit(pool_path, seed: int = 0, committee_size: int = 20, n_classes: int = 5) -> int:
    """Print labeled instances whose stored label the committee outvotes."""
    try:
        pool = Pool.from_csv(pool_path)
    except OSError as exc:
        raise UsageError(f"cannot read pool {pool_path}: {exc.strerror}") from None
    except (DomainError, ValueError) as exc:
        raise UsageError(f"cannot load pool {pool_path}: {exc}") from None
    if pool.n_labeled == 0:
        raise UsageError(f"{pool_path} has no labeled instances to audit")
    if pool.y_labeled.max() >= n_classes:
        raise UsageError(f"labels exceed --classes {n_classes}")
    suspects, hidden = audit_labels(pool.X_labeled, pool.y_labeled, n_classes, seed, committee_size)
    ids = pool.labeled_ids
    d = pool.dim
    print(f"# audited {pool.n_labeled} labels with {committee_size} networks of {hidden} hidden units; "
          f"{len(suspects)} suspect(s)")
    print(",".join(["id", *[f"x{j + 1}" for j in range(d)], "label", "voted", "votes_label", "votes_voted", "margin"]))
    for s in suspects:
        row = [int(ids[s.index]), *(repr(float(v)) for v in pool.points[ids[s.index]]), s.stored_label,
               s.voted_label, s.votes_for_stored, s.votes_for_voted, s.votes_for_voted - s.votes_for_stored]
        print(",".join(map(str, row)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qbag", description="Query-by-bagging active learning for classification maps.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug output")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run an active-learning comparison")
    r.add_argument("--config", help="flat 'key = value' config file")
    r.add_argument("--strategy", action="append", choices=[s.value for s in Strategy],
                   help="strategy to run; repeat for several (default from config: qbag and random)")
    r.add_argument("--seeds", help="seed list such as 1..30 or 0,2,5")
    r.add_argument("--jobs", type=int, help="parallel worker processes")
    r.add_argument("--resume", metavar="DIR", help="continue the run stored in DIR with its saved config")
    r.add_argument("--oracle", choices=["synthetic2d", "synthetic3d", "external"])
    r.add_argument("--dir", help="exchange directory for the external oracle")
    r.add_argument("--noise", type=float, help="probability of flipping each training label")
    r.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")

    m = sub.add_parser("map", help="export a committee's prediction map")
    m.add_argument("model", help="committee file written by 'run'")
    m.add_argument("--resolution", type=int, default=101)
    m.add_argument("--slice", help="fixed coordinate for 3-D models, e.g. x3=0.5")
    m.add_argument("--out", help="output CSV (default: stdout)")

    a = sub.add_parser("audit", help="flag labels the committee vote contradicts")
    a.add_argument("pool", help="pool snapshot CSV")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--committee-size", type=int, default=20)
    a.add_argument("--classes", type=int, default=5)
    return p


def _run_from_args(args) -> int:
    if args.resume:
        out_dir = Path(args.resume)
        cfg_path = out_dir / "config.cfg"
        if not cfg_path.exists():
            raise UsageError(f"{out_dir} holds no saved run to resume")
        if args.config or args.set or args.strategy or args.seeds or args.oracle or args.noise is not None:
            raise UsageError("--resume reuses the saved config; drop the other config options")
        raw = read_config_file(cfg_path)
        source = str(cfg_path)
    else:
        raw = read_config_file(args.config) if args.config else {}
        source = args.config or "config"
        out_dir = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            raw[key.strip()] = value.strip()
        if args.strategy:
            raw["strategies"] = ",".join(args.strategy)
        if args.seeds:
            raw["seeds"] = args.seeds
        if args.oracle:
            raw["oracle"] = args.oracle
            if args.oracle != "external":
                raw.setdefault("dim", "3" if args.oracle == "synthetic3d" else "2")
        if args.dir:
            raw["external_dir"] = args.dir
        if args.noise is not None:
            raw["noise"] = repr(args.noise)
    if args.jobs is not None:
        raw["jobs"] = str(args.jobs)
    settings = build_settings(raw, source)
    return cmd_run(settings, out_dir)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help and on bad usage
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _run_from_args(args)
        if args.command == "map":
            try:
                sl = parse_slice(args.slice)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            return cmd_map(args.model, args.resolution, sl, args.out)
        return cmd_audit(args.pool, args.seed, args.committee_size, args.classes)
    except (UsageError, ConfigError) as exc:
        print(f"qbag: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
