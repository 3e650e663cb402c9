"""Command-line harness: data prep, pretraining, sweeps, evaluation and reports.

Configuration is a JSON document::

    {
      "seed": 0,
      "data": {"synth": {"n_users": 2000, "n_items": 400, ...}}
              or {"interactions": "ratings.tsv", "items": "items.tsv",
                  "rating_threshold": 3.0, "header": false},
      "kcore": 5,
      "n_buckets": 10,
      "backbone": {"dim": 16, "lr": 0.002, "weight_decay": 1e-4, "epochs": 100, ...},
      "train": {"ki": 0.01, "windup_cap": 1.0, "epochs": 25, ...},
      "sweep": [
        {"label": "rev", "objectives": ["accuracy", "revenue"],
         "rho": {"revenue": 1.0}, "target_scale": 1.1},
        {"label": "static", "objectives": ["accuracy", "revenue"],
         "mode": "static", "rho_full": [0.8, 0.2]}
      ],
      "out": "runs/demo"
    }

``backbone`` holds the pretraining settings; ``train`` holds defaults shared
by every sweep entry, and each entry may override any ``TrainConfig`` field.
Relative data paths resolve against the config file's directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .backbone import load_checkpoint, save_checkpoint
from .coordinator import PreferenceVector
from .dataset import (InteractionDataset, ItemCatalog, ParseError, SynthConfig, build_catalog,
                      kcore_filter, leave_one_out_split, load_interactions, load_item_metadata,
                      synth_generate, write_interactions, write_item_metadata)
from .metrics import (METRICS, EvalReport, SolutionSet, evaluate, pareto_frontier,
                      select_solution)
from .trainer import TrainConfig, TrainingAborted, continual_train, init_model, pretrain

_logger = logging.getLogger("morec")

EXIT_OK, EXIT_ABORT, EXIT_CONFIG = 0, 1, 2

COLUMN_NAMES = {"hit": "Hit", "rhit": "rHit", "pop_kl": "Pop-KL", "min_hit": "min-Hit"}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_ENTRY_KEYS = _TRAIN_FIELDS | {"label"}
_BACKBONE_KEYS = {"dim", "lr", "weight_decay", "epochs", "patience", "batch_size",
                  "steps_per_epoch", "n_negatives", "negatives", "loss", "init_std",
                  "use_bias", "eval_k"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class ExperimentConfig:
    data: dict
    kcore: int = 5
    n_buckets: int = 10
    backbone: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    sweep: list = dataclasses.field(default_factory=list)
    out: str = "morec-out"
    seed: int = 0
    base_dir: str = "."

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> ExperimentConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        known = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "data" not in raw:
            raise ConfigError("config needs a 'data' section")
        return cls(**raw, base_dir=str(base_dir))

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, path.parent)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def validate(self, need_sweep: bool = True) -> ExperimentConfig:
        errors = []
        if "synth" in self.data:
            try:
                SynthConfig(**self.data["synth"]).validate()
            except (TypeError, ValueError) as exc:
                errors.append(f"data.synth: {exc}")
        elif "interactions" not in self.data:
            errors.append("data needs either 'synth' or 'interactions'")
        if not isinstance(self.kcore, int) or self.kcore < 1:
            errors.append("kcore must be a positive integer")
        bad = set(self.backbone) - _BACKBONE_KEYS
        if bad:
            errors.append(f"unknown backbone keys: {sorted(bad)}")
        bad = set(self.train) - _TRAIN_FIELDS
        if bad:
            errors.append(f"unknown train keys: {sorted(bad)}")
        if need_sweep and not self.sweep:
            errors.append("sweep must contain at least one entry")
        labels = []
        for n, entry in enumerate(self.sweep):
            if not isinstance(entry, dict):
                errors.append(f"sweep[{n}] must be an object")
                continue
            bad = set(entry) - _ENTRY_KEYS
            if bad:
                errors.append(f"sweep[{n}]: unknown keys {sorted(bad)}")
                continue
            labels.append(entry_label(entry, n))
            try:
                tcfg = self.entry_config(entry).validate()
                PreferenceVector(tcfg.rho, tcfg.pref_scale)
            except (TypeError, ValueError) as exc:
                errors.append(f"sweep[{n}]: {exc}")
        if len(set(labels)) != len(labels):
            errors.append("sweep labels must be unique")
        if any(lbl in ("base", "cache") for lbl in labels):
            errors.append("'base' and 'cache' are reserved labels")
        try:
            self.pretrain_config().validate()
        except (TypeError, ValueError) as exc:
            errors.append(f"backbone: {exc}")
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(**self.backbone, seed=self.seed)

    def entry_config(self, entry: dict) -> TrainConfig:
        fields = dict(self.backbone)
        fields.update(self.train)
        fields.update({k: v for k, v in entry.items() if k != "label"})
        fields["seed"] = self.seed
        return TrainConfig(**fields)

    def data_digest(self) -> str:
        return _digest({"data": self.data, "kcore": self.kcore, "n_buckets": self.n_buckets,
                        "seed": self.seed})

    def pretrain_digest(self) -> str:
        return _digest({"data": self.data_digest(), "backbone": self.backbone})

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return _digest(d)


def entry_label(entry: dict, n: int) -> str:
    return str(entry.get("label", f"sol{n + 1}"))


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# data preparation


def _resolve(cfg: ExperimentConfig, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(cfg.base_dir) / p


def load_raw(cfg: ExperimentConfig):
    """Raw interactions and item metadata for the configured source."""
    if "synth" in cfg.data:
        return synth_generate(SynthConfig(**cfg.data["synth"]), cfg.seed)
    d = cfg.data
    raw = load_interactions(_resolve(cfg, d["interactions"]), header=d.get("header", False),
                            rating_threshold=d.get("rating_threshold", 3.0))
    meta = load_item_metadata(_resolve(cfg, d["items"]),
                              header=d.get("header", False)) if "items" in d else {}
    return raw, meta


def prepare(cfg: ExperimentConfig):
    raw, meta = load_raw(cfg)
    filtered = kcore_filter(raw, cfg.kcore)
    if not len(filtered):
        raise ConfigError(f"{cfg.kcore}-core filtering left no interactions")
    ds = leave_one_out_split(filtered)
    if not len(ds.valid) or not len(ds.test):
        raise ConfigError("no user has the three interactions needed for valid/test")
    cat = build_catalog(meta, ds, cfg.n_buckets)
    _logger.info("prepared %d users, %d items, %d train pairs", ds.n_users, ds.n_items,
                 len(ds.train))
    return ds, cat


def save_prepared(ds: InteractionDataset, cat: ItemCatalog, path, digest: str) -> None:
    with Path(path).open("wb") as fh:
        np.savez(fh, digest=np.array(digest), user_ids=np.array(ds.user_ids),
                 item_ids=np.array(ds.item_ids), train=ds.train, valid=ds.valid, test=ds.test,
                 price=cat.price, category=cat.category,
                 category_names=np.array(cat.category_names), pop_count=cat.pop_count,
                 pop_bucket=cat.pop_bucket)


def load_prepared(path):
    with np.load(path, allow_pickle=False) as z:
        train = z["train"]
        n_users = len(z["user_ids"])
        s = train[np.lexsort((train[:, 1], train[:, 0]))]
        bounds = np.searchsorted(s[:, 0], np.arange(n_users + 1))
        train_items = [np.unique(s[bounds[u]:bounds[u + 1], 1]) for u in range(n_users)]
        ds = InteractionDataset(z["user_ids"].tolist(), z["item_ids"].tolist(), train,
                                z["valid"], z["test"], train_items)
        cat = ItemCatalog(z["price"], z["category"], z["category_names"].tolist(),
                          z["pop_count"], z["pop_bucket"])
        return ds, cat, str(z["digest"])


class Workspace:
    """File layout under the output directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.cache = self.root / "cache"

    def prepared(self) -> Path:
        return self.cache / f"data-{self.cfg.data_digest()}.npz"

    def pretrained(self) -> Path:
        return self.cache / f"pretrain-{self.cfg.pretrain_digest()}.npz"

    def pretrained_meta(self) -> Path:
        return self.cache / f"pretrain-{self.cfg.pretrain_digest()}.json"

    def entry_dir(self, label: str) -> Path:
        return self.root / label

    def ensure(self):
        try:
            self.cache.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {self.root} is not writable: {exc}") from exc


def get_prepared(ws: Workspace):
    path = ws.prepared()
    if path.exists():
        _logger.info("data cache hit %s", path.name)
        ds, cat, _ = load_prepared(path)
        return ds, cat
    ds, cat = prepare(ws.cfg)
    save_prepared(ds, cat, path, ws.cfg.data_digest())
    return ds, cat


def get_pretrained(ws: Workspace, ds=None, cat=None):
    """Pretrained base model and its converged loss, cached by config digest."""
    path, meta_path = ws.pretrained(), ws.pretrained_meta()
    if path.exists() and meta_path.exists():
        _logger.info("pretrain cache hit %s", path.name)
        model, _ = load_checkpoint(path)
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        return model, meta["loss"]
    if ds is None:
        ds, cat = get_prepared(ws)
    pcfg = ws.cfg.pretrain_config()
    log = []
    model, loss = pretrain(init_model(ds, pcfg), ds, pcfg, cat, history=log)
    save_checkpoint(model, path, ws.cfg.pretrain_digest())
    meta_path.write_text(json.dumps({"digest": ws.cfg.pretrain_digest(), "loss": loss,
                                     "history": log}, indent=2), encoding="utf-8")
    return model, loss


# ---------------------------------------------------------------------------
# sweep


def train_entry(cfg_dict: dict, base_dir: str, n: int) -> str:
    """Run one sweep entry into its own subdirectory; returns the label."""
    cfg = ExperimentConfig.from_dict(cfg_dict, base_dir)
    ws = Workspace(cfg)
    entry = cfg.sweep[n]
    label = entry_label(entry, n)
    ds, cat = get_prepared(ws)
    base, loss = get_pretrained(ws, ds, cat)
    tcfg = cfg.entry_config(entry)
    model, history = continual_train(base, ds, cat, tcfg, pretrain_loss=loss)
    d = ws.entry_dir(label)
    d.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    save_checkpoint(model, d / "model.npz", digest)
    with (d / "history.jsonl").open("w", encoding="utf-8") as fh:
        for rec in history.epochs:
            fh.write(json.dumps(dict(rec, digest=digest)) + "\n")
    with (d / "alpha_trace.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "err", "err_sum", "alpha_acc", "digest"])
        for row in history.alpha_trace_rows():
            w.writerow([*(repr(float(x)) if i else int(x) for i, x in enumerate(row)), digest])
    (d / "entry.json").write_text(json.dumps({
        "label": label, "digest": digest, "config": tcfg.to_dict(),
        "best_epoch": history.best_epoch, "target_loss": history.target_loss,
    }, indent=2), encoding="utf-8")
    _logger.info("%s: best epoch %s", label, history.best_epoch)
    return label


def run_sweep(cfg: ExperimentConfig, jobs: int = 1) -> list[str]:
    ws = Workspace(cfg)
    ds, cat = get_prepared(ws)
    get_pretrained(ws, ds, cat)
    args = [(cfg.to_dict(), cfg.base_dir, n) for n in range(len(cfg.sweep))]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(train_entry, *zip(*args)))
    return [train_entry(*a) for a in args]


def evaluate_all(cfg: ExperimentConfig) -> SolutionSet:
    """Test-split reports for the base model and every trained sweep entry."""
    ws = Workspace(cfg)
    ds, cat = get_prepared(ws)
    base, _ = get_pretrained(ws, ds, cat)
    k = cfg.pretrain_config().eval_k
    base_report = evaluate(base, ds, cat, k)
    labelled = []
    for n, entry in enumerate(cfg.sweep):
        label = entry_label(entry, n)
        path = ws.entry_dir(label) / "model.npz"
        if not path.exists():
            raise ConfigError(f"sweep entry {label!r} has not been trained ({path} missing)")
        model, header = load_checkpoint(path)
        if header.get("config_hash") != cfg.digest():
            raise ConfigError(f"{path} was trained under a different config digest")
        labelled.append((label, evaluate(model, ds, cat, k)))
    sset = SolutionSet.build(base_report, labelled, cfg.digest())
    (ws.root / "solutions.json").write_text(sset.to_json(), encoding="utf-8")
    return sset


def load_solution_set(path) -> SolutionSet:
    from .metrics import Solution

    raw = json.loads(Path(path).read_text(encoding="utf-8"))

    def sol(d):
        return Solution(d["label"], d["digest"], EvalReport.from_dict(d["report"]), d["imp"],
                        d["valid"], d["is_base"])

    return SolutionSet(sol(raw["base"]), [sol(s) for s in raw["solutions"]])


# ---------------------------------------------------------------------------
# reports


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_report(sset: SolutionSet, out_dir, traces: dict | None = None) -> dict:
    """Write ``report.json``, ``table.csv``, ``frontier.csv`` and ``alpha_trace.csv``.

    ``traces`` maps solution labels to ``(step, err, err_sum, alpha)`` rows.
    Returns the report dictionary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = sset.base.digest
    if any(s.digest != digest for s in sset.solutions):
        raise ValueError("solution set mixes config digests")
    selected = select_solution(sset, sset.base.report) if sset.solutions else sset.base
    rows = [sset.base, *sset.solutions]

    with (out / "table.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *COLUMN_NAMES.values(), "Imp", "valid", "selected", "digest"])
        for s in rows:
            w.writerow([s.label, *(_fmt(getattr(s.report, m)) for m in METRICS), _fmt(s.imp),
                        int(s.valid), int(s is selected), digest])

    frontier = frontier_rows(rows)
    with (out / "frontier.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_metric", "y_metric", "label", "x", "y", "digest"])
        for mx, my, s in frontier:
            w.writerow([COLUMN_NAMES[mx], COLUMN_NAMES[my], s.label,
                        _fmt(getattr(s.report, mx)), _fmt(getattr(s.report, my)), digest])

    with (out / "alpha_trace.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "step", "err", "err_sum", "alpha_acc", "digest"])
        for label, trace in (traces or {}).items():
            for step, err, err_sum, alpha in trace:
                w.writerow([label, int(step), _fmt(err), _fmt(err_sum), _fmt(alpha), digest])

    report = {
        "digest": digest,
        "selected": selected.label,
        "base": sset.base.to_dict(),
        "solutions": [s.to_dict() for s in sset.solutions],
        "frontier": [{"x": mx, "y": my, "label": s.label} for mx, my, s in frontier],
    }
    (out / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    return report


def frontier_rows(rows):
    """Non-dominated solutions for each (Hit, other metric) pair."""
    out = []
    for other in METRICS[1:]:
        pts = [[s.report.hit, getattr(s.report, other)] for s in rows]
        dirs = ["max", "min" if other == "pop_kl" else "max"]
        for i in pareto_frontier(pts, dirs):
            out.append(("hit", other, rows[i]))
    return out


def read_traces(cfg: ExperimentConfig) -> dict:
    ws = Workspace(cfg)
    traces = {}
    for n, entry in enumerate(cfg.sweep):
        label = entry_label(entry, n)
        path = ws.entry_dir(label) / "alpha_trace.csv"
        if path.exists():
            with path.open(encoding="utf-8", newline="") as fh:
                traces[label] = [(int(r["step"]), float(r["err"]), float(r["err_sum"]),
                                  float(r["alpha_acc"])) for r in csv.DictReader(fh)]
    return traces


def run_experiment(config_path, seed: int | None = None, out: str | None = None,
                   jobs: int = 1) -> int:
    """prep, pretrain, sweep, evaluate and report; returns a process exit code."""
    return main(_common_argv("run", config_path, seed, out, jobs))


def _common_argv(cmd, config_path, seed, out, jobs):
    argv = [cmd, "--config", str(config_path), "--jobs", str(jobs)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    if out is not None:
        argv += ["--out", str(out)]
    return argv


# ---------------------------------------------------------------------------
# entry point


def _cmd_synth(cfg, args):
    if "synth" not in cfg.data:
        raise ConfigError("synth needs a data.synth section")
    raw, meta = load_raw(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(raw, out / "interactions.tsv")
    write_item_metadata(meta, out / "items.tsv")
    print(f"wrote {len(raw)} interactions and {len(meta)} items to {out}")


def _cmd_prep(cfg, args):
    ws = Workspace(cfg)
    ws.ensure()
    ds, cat = get_prepared(ws)
    print(f"{ds.n_users} users, {ds.n_items} items, {len(ds.train)} train pairs "
          f"-> {ws.prepared()}")


def _cmd_pretrain(cfg, args):
    ws = Workspace(cfg)
    ws.ensure()
    _, loss = get_pretrained(ws)
    print(f"pretrained base (loss {loss:.4f}) -> {ws.pretrained()}")


def _cmd_train(cfg, args):
    Workspace(cfg).ensure()
    for label in run_sweep(cfg, args.jobs):
        print(f"trained {label}")


def _cmd_eval(cfg, args):
    sset = evaluate_all(cfg)
    for s in [sset.base, *sset.solutions]:
        r = s.report
        print(f"{s.label:>12}  Hit {r.hit:.4f}  rHit {r.rhit:.4f}  Pop-KL {r.pop_kl:.4f}  "
              f"min-Hit {r.min_hit:.4f}  Imp {s.imp:7.2f}  {'valid' if s.valid else 'invalid'}")


def _cmd_report(cfg, args):
    path = Path(cfg.out) / "solutions.json"
    if not path.exists():
        raise ConfigError(f"{path} missing; run 'eval' first")
    sset = load_solution_set(path)
    if sset.base.digest != cfg.digest():
        raise ConfigError("solutions.json belongs to a different config digest")
    report = emit_report(sset, cfg.out, read_traces(cfg))
    print(f"selected {report['selected']}; report written to {cfg.out}")


def _cmd_run(cfg, args):
    _cmd_train(cfg, args)
    _cmd_eval(cfg, args)
    _cmd_report(cfg, args)


COMMANDS = {
    "synth": (_cmd_synth, "write a synthetic dataset as TSV files", False),
    "prep": (_cmd_prep, "load, K-core filter and split the data", False),
    "pretrain": (_cmd_pretrain, "pretrain the accuracy-only base model", False),
    "train": (_cmd_train, "continual training for every sweep entry", True),
    "eval": (_cmd_eval, "evaluate base and sweep solutions on the test split", True),
    "report": (_cmd_report, "write report.json, table.csv, frontier.csv, alpha_trace.csv", True),
    "run": (_cmd_run, "train, eval and report in one go", True),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morec", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text, _) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel sweep processes")
    return parser


def _setup_logging():
    level = os.environ.get("MOREC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    func, _, need_sweep = COMMANDS[args.command]
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg.validate(need_sweep=need_sweep)
        func(cfg, args)
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
