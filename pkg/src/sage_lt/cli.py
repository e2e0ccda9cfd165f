"""Batch experiment runner.

    sage-lt run       [flags]     single configuration, one or more seeds
    sage-lt ablation  [flags]     five-row component ladder per seed
    sage-lt sweep     [flags] --grid mu=0.25,0.5,1
    sage-lt study     [flags]     Gaussian marginal-ratio study
    sage-lt attention [flags]     attention-map archive for a few test samples
    sage-lt verify                fast identity checks

Configuration can also come from a flat JSON file with dotted keys
(``{"loss.mu": 0.5, "task.beta": 50}``); command-line flags win.
Exit status: 0 ok, 1 usage error, 2 training aborted, 3 verification failed.
"""
import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import analysis
from .data import PretrainConfig, SyntheticTaskSpec, cached_foundation, generate, longtail_counts, split_groups
from .loss import LossConfig
from .trainer import Metrics, TrainConfig, TrainingAborted, init_psi, train

EXIT_OK, EXIT_USAGE, EXIT_ABORT, EXIT_VERIFY = 0, 1, 2, 3
COMPONENTS = ("sg", "init", "cf", "fit")
LADDER = (
    ("none", ()),
    ("+SG", ("sg",)),
    ("+SG+Init", ("sg", "init")),
    ("+SG+Init+CF", ("sg", "init", "cf")),
    ("all", ("sg", "init", "cf", "fit")),
)
METRIC_FIELDS = ("epoch", "split", "acc_all", "acc_head", "acc_med", "acc_tail", "loss")
SWEEPABLE = {"alpha": "train.alpha", "mu": "loss.mu", "gamma": "loss.gamma",
             "lambda1": "loss.lambda1", "lambda2": "loss.lambda2", "lambda3": "loss.lambda3"}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _section_fields(cls, skip=()):
    return {f.name: f.type for f in fields(cls) if f.name not in skip}


SECTIONS = {
    "task": (SyntheticTaskSpec, ()),
    "train": (TrainConfig, ("seed", "sg", "init", "cf", "fit", "loss", "thresholds")),
    "loss": (LossConfig, ()),
    "pretrain": (PretrainConfig, ()),
}


def known_keys():
    keys = {"seeds", "ablate", "out", "cache"}
    for sec, (cls, skip) in SECTIONS.items():
        keys.update(f"{sec}.{name}" for name in _section_fields(cls, skip))
    return keys


def _coerce(key, value, kind):
    try:
        if kind in (int, "int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind in (float, "float"):
            return float(value)
        if kind in (bool, "bool"):
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes", "on")
            return bool(value)
    except (TypeError, ValueError):
        raise UsageError(f"invalid value for {key}: {value!r}") from None
    return value


def _as_list(key, value, kind):
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    elif not isinstance(value, (list, tuple)):
        value = [value]
    return [_coerce(key, v, kind) if kind else str(v).strip() for v in value]


@dataclass
class ExperimentConfig:
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    seeds: list = field(default_factory=lambda: [0])
    ablate: list = field(default_factory=list)
    out: str = "out"
    cache: str = None

    @classmethod
    def from_flat(cls, flat):
        """Build from a dict with dotted keys; unknown or invalid keys raise ``UsageError``."""
        allowed = known_keys()
        for key in flat:
            if key not in allowed:
                raise UsageError(f"unknown config field {key!r}")
        sections = {}
        for sec, (klass, skip) in SECTIONS.items():
            kw = {}
            for name, kind in _section_fields(klass, skip).items():
                key = f"{sec}.{name}"
                if key in flat:
                    kw[name] = _coerce(key, flat[key], kind)
            sections[sec] = kw
        seeds = _as_list("seeds", flat.get("seeds", [0]), int)
        if not seeds:
            raise UsageError("seeds must be a non-empty list")
        ablate = _as_list("ablate", flat.get("ablate", []), None)
        bad = [a for a in ablate if a not in COMPONENTS]
        if bad:
            raise UsageError(f"ablate: unknown component(s) {bad}; choose from {COMPONENTS}")
        try:
            task = SyntheticTaskSpec(**sections["task"])
            task.longtail   # validates classes / n1 / beta
        except ValueError as e:
            raise UsageError(f"task: {e}") from None
        try:
            loss = LossConfig(**sections["loss"])
        except ValueError as e:
            raise UsageError(f"loss: {e}") from None
        flags = {c: c not in ablate for c in COMPONENTS}
        try:
            tr = TrainConfig(loss=loss, **flags, **sections["train"])
            if not 0.0 <= tr.alpha <= 1.0:
                raise ValueError("alpha must lie in [0, 1]")
        except ValueError as e:
            raise UsageError(f"train: {e}") from None
        try:
            pre = PretrainConfig(**sections["pretrain"])
            if pre.width % pre.heads:
                raise ValueError("width must be divisible by heads")
            if not 1 <= tr.bottleneck < pre.width:
                raise ValueError(f"train.bottleneck {tr.bottleneck} must satisfy 1 <= r < width")
        except ValueError as e:
            raise UsageError(f"pretrain: {e}") from None
        return cls(task, tr, pre, seeds, ablate, str(flat.get("out", "out")), flat.get("cache"))

    def to_flat(self):
        flat = {"seeds": list(self.seeds), "ablate": list(self.ablate)}
        for sec, (klass, skip) in SECTIONS.items():
            obj = self.train.loss if sec == "loss" else getattr(self, sec)
            for name in _section_fields(klass, skip):
                v = getattr(obj, name)
                flat[f"{sec}.{name}"] = list(v) if isinstance(v, tuple) else v
        return flat

    def config_hash(self):
        return config_hash(self.to_flat())

    def cache_dir(self):
        return self.cache or os.path.join(self.out, "foundation_cache")


def config_hash(flat):
    """sha256 of the canonical (sorted-key) JSON form."""
    return hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# argument parsing

FLAG_KEYS = {
    "beta": "task.beta", "classes": "task.classes", "n1": "task.n1", "noise": "task.noise",
    "epochs": "train.epochs", "batch_size": "train.batch_size", "lr": "train.lr",
    "momentum": "train.momentum", "alpha": "train.alpha",
    "mu": "loss.mu", "gamma": "loss.gamma", "lambda1": "loss.lambda1",
    "lambda2": "loss.lambda2", "lambda3": "loss.lambda3",
    "seed": "seeds", "ablate": "ablate", "out": "out", "cache": "cache",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="sage-lt", description="Long-tailed adapter fine-tuning experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat JSON file with dotted keys")
    for flag in FLAG_KEYS:
        common.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None)
    sub.add_parser("run", parents=[common], help="train one configuration per seed")
    sub.add_parser("ablation", parents=[common], help="five-row component ladder")
    sw = sub.add_parser("sweep", parents=[common], help="one-at-a-time hyperparameter grids")
    sw.add_argument("--grid", action="append", default=[],
                    help="NAME=v1,v2,... with NAME in " + ",".join(SWEEPABLE))
    st = sub.add_parser("study", parents=[common], help="Gaussian marginal-ratio study")
    st.add_argument("--dim", type=int, default=2)
    at = sub.add_parser("attention", parents=[common], help="export attention maps")
    at.add_argument("--samples", type=int, default=4)
    sub.add_parser("verify", parents=[common], help="fast identity checks")
    return p


def resolve_config(args):
    flat = {}
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"config: cannot read {args.config}: {e}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config: top level must be a JSON object")
        flat.update(loaded)
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag)
        if v is not None:
            flat[key] = v
    return ExperimentConfig.from_flat(flat)


# ---------------------------------------------------------------------------
# outputs


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_row(m, **extra):
    row = dict(extra)
    row.update(m.row())
    return {k: _fmt(v) for k, v in row.items()}


def metrics_from_row(row):
    """Inverse of ``metrics_row`` for the metric columns."""
    opt = lambda s: None if s == "" else float(s)
    return Metrics(
        acc_all=float(row["acc_all"]), acc_head=opt(row["acc_head"]), acc_med=opt(row["acc_med"]),
        acc_tail=opt(row["acc_tail"]), epoch=int(row["epoch"]), split=row["split"],
        loss=float(row["loss"]),
    )


def write_csv(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def aggregate(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return {"median": float(np.median(vals)), "min": float(min(vals)), "max": float(max(vals))}


def aggregate_metrics(finals):
    return {k: aggregate([getattr(m, k) for m in finals])
            for k in ("acc_all", "acc_head", "acc_med", "acc_tail")}


def parameter_counts(model):
    adapters = sum(v.size for v in model.adapter_params().values())
    return {
        "adapters": int(adapters),
        "classifier": int(model.psi["cls.W"].size),
        "fit": 2,
        "total_trainable": int(sum(v.size for v in model.psi.values())),
        "per_block_formula": analysis.parameter_table(model.config.width, model.config.bottleneck)[
            "SG-Adapter" if model.config.mode == "sage" else "AdaptFormer"]["per_block"],
    }


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands


class _Context:
    def __init__(self, cfg):
        self.cfg = cfg
        os.makedirs(cfg.out, exist_ok=True)
        self.bundle = cached_foundation(cfg.task, cfg.cache_dir(), cfg.pretrain)
        self.train_set, self.test_set = generate(cfg.task)
        self.groups = split_groups(self.train_set.counts, cfg.train.thresholds)

    def fit(self, tcfg, seed):
        return train(replace(tcfg, seed=seed), self.bundle, self.train_set, self.test_set, self.groups)


def _train_seeds(ctx, tcfg, seeds, log):
    """Run every seed; returns ``(histories, models, aborted)``, stopping at the first abort."""
    histories, models = {}, {}
    for seed in seeds:
        try:
            model, hist = ctx.fit(tcfg, seed)
        except TrainingAborted as e:
            return histories, models, f"seed {seed}: {e}"
        histories[seed], models[seed] = hist, model
        log(f"seed {seed}: acc_all={hist[-1].acc_all:.4f} acc_tail={_fmt(hist[-1].acc_tail)}"
            if hist else f"seed {seed}: no epochs")
    return histories, models, None


def cmd_run(cfg, log):
    ctx = _Context(cfg)
    hist, models, aborted = _train_seeds(ctx, cfg.train, cfg.seeds, log)
    rows = [metrics_row(m, seed=s) for s, h in hist.items() for m in h]
    write_csv(os.path.join(cfg.out, "metrics.csv"), rows, ("seed",) + METRIC_FIELDS)
    finals = [h[-1] for h in hist.values() if h]
    any_model = next(iter(models.values()), None) or init_psi(cfg.train, ctx.bundle, cfg.task.classes)
    summary = {
        "command": "run",
        "config": cfg.to_flat(),
        "config_hash": cfg.config_hash(),
        "flags": cfg.train.flags(),
        "parameter_counts": parameter_counts(any_model),
        "per_seed": {str(s): h[-1].row() for s, h in hist.items() if h},
        "aggregate": aggregate_metrics(finals),
        "completed_seeds": list(hist),
        "aborted": aborted,
    }
    _write_json(os.path.join(cfg.out, "summary.json"), summary)
    if aborted:
        raise TrainingAborted(aborted)
    return summary


def ladder_configs(tcfg):
    out = []
    for i, (name, on) in enumerate(LADDER, start=1):
        out.append((i, name, replace(tcfg, **{c: c in on for c in COMPONENTS})))
    return out


def cmd_ablation(cfg, log):
    ctx = _Context(cfg)
    rows, summary_rows, aborted = [], {}, None
    for i, name, tcfg in ladder_configs(cfg.train):
        log(f"row {i} ({name})")
        hist, _, aborted = _train_seeds(ctx, tcfg, cfg.seeds, log)
        flags = {c: int(v) for c, v in tcfg.flags().items()}
        for s, h in hist.items():
            rows.extend(metrics_row(m, row=i, name=name, **flags, seed=s) for m in h)
        finals = [h[-1] for h in hist.values() if h]
        summary_rows[str(i)] = {"name": name, "flags": tcfg.flags(),
                                "per_seed": {str(s): h[-1].row() for s, h in hist.items() if h},
                                "aggregate": aggregate_metrics(finals)}
        if aborted:
            break
    header = ("row", "name") + COMPONENTS + ("seed",) + METRIC_FIELDS
    write_csv(os.path.join(cfg.out, "ablation.csv"), rows, header)
    summary = {"command": "ablation", "config": cfg.to_flat(), "config_hash": cfg.config_hash(),
               "rows": summary_rows, "aborted": aborted}
    _write_json(os.path.join(cfg.out, "summary.json"), summary)
    if aborted:
        raise TrainingAborted(aborted)
    return summary


def parse_grid(specs):
    grids = []
    for spec in specs:
        name, sep, values = spec.partition("=")
        if not sep or name not in SWEEPABLE:
            raise UsageError(f"grid: expected NAME=v1,v2 with NAME in {sorted(SWEEPABLE)}, got {spec!r}")
        grids.append((name, _as_list(f"grid.{name}", values, float)))
    if not grids:
        raise UsageError("grid: at least one --grid NAME=values is required")
    return grids


def cmd_sweep(cfg, grid_specs, log):
    grids = parse_grid(grid_specs)
    ctx = _Context(cfg)
    base = cfg.to_flat()
    rows, aborted = [], None
    for name, values in grids:
        for v in values:
            try:
                point = ExperimentConfig.from_flat({**base, SWEEPABLE[name]: v})
            except UsageError as e:
                raise UsageError(f"grid {name}={v}: {e}") from None
            log(f"{name}={v}")
            hist, _, aborted = _train_seeds(ctx, point.train, cfg.seeds, log)
            for s, h in hist.items():
                if h:
                    rows.append(metrics_row(h[-1], param=name, value=v, seed=s))
            if aborted:
                break
        if aborted:
            break
    write_csv(os.path.join(cfg.out, "sweep.csv"), rows, ("param", "value", "seed") + METRIC_FIELDS)
    _write_json(os.path.join(cfg.out, "summary.json"),
                {"command": "sweep", "config": base, "config_hash": cfg.config_hash(),
                 "grids": {n: v for n, v in grids}, "aborted": aborted})
    if aborted:
        raise TrainingAborted(aborted)
    return rows


def cmd_study(cfg, dim, log):
    os.makedirs(cfg.out, exist_ok=True)
    counts = longtail_counts(cfg.task.longtail)
    results = {}
    for seed in cfg.seeds:
        model = analysis.GaussianClassModel.random(counts, dim=dim, seed=seed)
        try:
            res = analysis.marginal_ratio_study(model, counts, seed=seed)
        except ValueError as e:
            raise UsageError(f"study: {e}") from None
        results[str(seed)] = res.__dict__
        log(f"seed {seed}: r={res.r} p={res.p}")
    out = {"config": cfg.to_flat(), "config_hash": cfg.config_hash(), "dim": dim, "per_seed": results}
    _write_json(os.path.join(cfg.out, "study.json"), out)
    return out


def cmd_attention(cfg, n_samples, log):
    ctx = _Context(cfg)
    seed = cfg.seeds[0]
    model, _ = ctx.fit(cfg.train, seed)
    pick = [int(np.flatnonzero(ctx.test_set.labels == c)[0]) for c in range(cfg.task.classes)]
    pick = pick[:n_samples]
    index = analysis.export_attention(model, ctx.bundle, ctx.test_set.images[pick],
                                      os.path.join(cfg.out, "attention"))
    index["test_indices"] = pick
    log(f"wrote {len(index['files'])} arrays")
    return index


def cmd_verify(log):
    """Cheap closed-form checks; returns True when all pass."""
    from .loss import cf_loss, la_loss, post_compensate, theta_diagnostic

    rng = np.random.default_rng(0)
    checks = []
    z = rng.normal(size=(6, 4))
    y = rng.integers(0, 4, size=6)
    n = [40, 12, 5, 2]
    checks.append(("cf(gamma=0) == la",
                   abs(cf_loss(z, y, n, LossConfig(gamma=0.0)) - la_loss(z, y, n)) < 1e-10))
    pc = post_compensate([1.0, 2.0], [0.9, 0.1], [0.5, 0.5])
    checks.append(("post-compensation worked case",
                   np.allclose(pc, [1 - np.log(1.8), 2 + np.log(5)], atol=1e-12)))
    checks.append(("theta under equal priors",
                   np.allclose(theta_diagnostic(z, [0.25] * 4, [0.25] * 4), 1.0, atol=1e-12)))
    checks.append(("attention expansion",
                   max(analysis.msa_decomposition_check(8, 4, 3, s) for s in range(10)) < 1e-8))
    table = analysis.parameter_table(8, 2)
    checks.append(("parameter table", table["SG-Adapter"]["per_block"] == 184
                   and table["AdaptFormer"]["per_block"] == 59))
    for name, ok in checks:
        log(f"{'PASS' if ok else 'FAIL'} {name}")
    return all(ok for _, ok in checks)


def main(argv=None, log=None):
    log = log or (lambda msg: print(msg, file=sys.stderr))
    try:
        args = build_parser().parse_args(argv)
        if args.command == "verify":
            return EXIT_OK if cmd_verify(log) else EXIT_VERIFY
        cfg = resolve_config(args)
        if args.command == "run":
            cmd_run(cfg, log)
        elif args.command == "ablation":
            cmd_ablation(cfg, log)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.grid, log)
        elif args.command == "study":
            cmd_study(cfg, args.dim, log)
        elif args.command == "attention":
            cmd_attention(cfg, args.samples, log)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
