"""``boardcast`` command line: generate, run, explain, transfer, grad-check.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from . import dataset as ds
from . import explain as ex
from . import model as M
from . import nn
from . import synthgen as sg
from . import transfer as tf
from .metrics import AUC_HEADER, DISTRIBUTION_HEADER, auc, auc_row, breach_distribution, write_csv
from .train import NumericError, TrainConfig, evaluate, split_chronological, train

log = logging.getLogger("boardcast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "BOARDCAST_SEED"
ALLOWED_HORIZONS = (3, 7, 14)
GRAD_KINDS = ("conv1d", "lstm", "dense")
GRAD_TOLERANCE = 1e-5
GRAD_HEADER = ["target", "seed", "max_relative_error"]

DEFAULTS: dict = {
    "seed": 0,
    "output": "out",
    "data": {"path": None},
    "synth": {},
    "experiment": {
        "variants": list(M.VARIANTS),
        "cutoffs": [17 / 24],
        "horizons": [14],
        "label_mode": "point",
        "input_length": ds.DEFAULT_INPUT_LENGTH,
        "periods": [],
    },
    "train": {},
    "explain": {"k": 15, "n_permutations": 200, "n_samples": 20, "background": ex.BACKGROUND_SIZE, "per_day": False, "method": "auto"},
    "transfer": {"variant": "Full", "budgets": [60], "freeze": False, "cutoff": None, "horizon": None},
    "distribution": {"thresholds": [i / 24 for i in range(25)]},
}


class UsageError(Exception):
    pass


# -- configuration ----------------------------------------------------------------


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise UsageError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def load_config(path: str | None, overrides: list[tuple[str, object]]) -> dict:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {path} not found")
        try:
            raw = tomli.loads(p.read_text())
        except tomli.TOMLDecodeError as e:
            raise UsageError(f"config file {path}: {e}") from None
    cfg = _merge(DEFAULTS, raw)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg["seed"] = int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    for key, value in overrides:
        if value is None:
            continue
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise UsageError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node and node is not cfg["synth"] and node is not cfg["train"]:
            raise UsageError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return cfg


@dataclass
class ExperimentConfig:
    seed: int
    output: Path
    data_path: Path | None
    synth: sg.SynthConfig | None
    periods: list[str]
    variants: list[str]
    cutoffs: list[float]
    horizons: list[int]
    label_mode: str
    input_length: int
    train: TrainConfig
    explain: dict
    transfer: dict
    thresholds: list[float]
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, cfg: dict) -> "ExperimentConfig":
        e = cfg["experiment"]
        if not e["variants"]:
            raise UsageError("at least one variant is required")
        bad = [v for v in e["variants"] if v not in M.VARIANTS]
        if bad:
            raise UsageError(f"unknown variants {bad}; choose from {list(M.VARIANTS)}")
        if not e["cutoffs"]:
            raise UsageError("at least one cutoff is required")
        if any(not 0 <= float(c) <= 1 for c in e["cutoffs"]):
            raise UsageError("cutoffs must lie in [0, 1]")
        if not e["horizons"]:
            raise UsageError("at least one horizon is required")
        if any(int(h) not in ALLOWED_HORIZONS for h in e["horizons"]):
            raise UsageError(f"horizons must be drawn from {ALLOWED_HORIZONS}")
        seed = int(cfg["seed"])
        try:
            tc = TrainConfig.from_dict({**cfg["train"], "seed": seed})
        except (TypeError, ValueError) as err:
            raise UsageError(f"[train]: {err}") from None
        synth = None
        path = cfg["data"]["path"]
        if path is None:
            try:
                synth = sg.SynthConfig.from_dict({**cfg["synth"], "seed": seed})
            except (TypeError, ValueError) as err:
                raise UsageError(f"[synth]: {err}") from None
        t = cfg["transfer"]
        budgets = t["budgets"]
        if not budgets or any(not (b == "all" or (isinstance(b, int) and b > 0)) for b in budgets):
            raise UsageError("transfer budgets must be positive integers or \"all\"")
        return cls(
            seed=seed,
            output=Path(cfg["output"]),
            data_path=Path(path) if path is not None else None,
            synth=synth,
            periods=list(e["periods"]),
            variants=list(e["variants"]),
            cutoffs=[float(c) for c in e["cutoffs"]],
            horizons=[int(h) for h in e["horizons"]],
            label_mode=str(e["label_mode"]),
            input_length=int(e["input_length"]),
            train=tc,
            explain=dict(cfg["explain"]),
            transfer=dict(t),
            thresholds=[float(x) for x in cfg["distribution"]["thresholds"]],
            raw=cfg,
        )

    def rule(self, cutoff: float, horizon: int) -> ds.LabelRule:
        try:
            return ds.LabelRule(horizon, cutoff, self.label_mode)
        except ValueError as err:
            raise UsageError(str(err)) from None

    @property
    def reports(self) -> Path:
        return self.output / "reports"


def load_data(cfg: ExperimentConfig) -> ds.Dataset:
    if cfg.data_path is not None:
        return ds.load_dataset(cfg.data_path)
    return sg.generate(cfg.synth).to_dataset()


def _select(buckets: dict[str, list], periods: list[str]) -> dict[str, list]:
    if not periods:
        return buckets
    missing = [p for p in periods if p not in buckets]
    if missing:
        raise UsageError(f"unknown periods {missing}; the data defines {list(buckets)}")
    return {p: buckets[p] for p in periods}


def _static_widths(data: ds.Dataset) -> tuple[int, ...]:
    first = data.catchments[sorted(data.catchments)[0]]
    return first.profile.level_widths()


def _fmt_cutoff(c: float) -> str:
    return f"{c:.4g}"


def cell_name(period: str, variant: str, cutoff: float, horizon: int) -> str:
    return f"{period}_{variant}_c{_fmt_cutoff(cutoff)}_h{horizon}"


def _pool_map(fn, jobs_args: list, jobs: int) -> list:
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, jobs_args))


def _write_manifest(path: Path, cfg: ExperimentConfig, data: ds.Dataset, command: str, extra: dict | None = None):
    doc = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "data_fingerprint": data.fingerprint(),
        "config": cfg.raw,
        **(extra or {}),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))


# -- commands ---------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_config(args.config, [("seed", args.seed)])
    try:
        synth = sg.SynthConfig.from_dict({**cfg["synth"], "seed": int(cfg["seed"])})
    except (TypeError, ValueError) as err:
        raise UsageError(f"[synth]: {err}") from None
    out = Path(args.out)
    sg.generate(synth).write(out)
    print(f"wrote synthetic dataset ({synth.n_catchments} catchments, {len(synth.periods)} periods) to {out}")
    return EXIT_OK


def _run_job(job):
    name, variant, widths, input_length, tc, tr, va, cell, norm = job
    model = M.build(variant, widths, tc.seed, input_length=input_length)
    trained, manifest = train(model, tr, va, tc, extra={"cell": cell})
    labels = np.array([s.label for s in va])
    res = auc(evaluate(trained, va), labels)
    trained.manifest = {**trained.manifest, "cell": cell, "case_norm": norm}
    return name, res, manifest, M.to_json(trained)


def _norm_dict(norm: ds.ChannelNorm | None):
    if norm is None:
        return None
    return {"mean": norm.mean, "std": norm.std, "centered_only": norm.centered_only}


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_mapping(load_config(args.config, _common_overrides(args)))
    data = load_data(cfg)
    widths = _static_widths(data)
    reports = cfg.reports
    skips = ds.SkipReport(list(data.skips.rows))
    rows: dict[str, list] = {}
    try:
        dist = []
        for p in data.periods:
            if cfg.periods and p.name not in cfg.periods:
                continue
            vals = []
            for name in sorted(data.catchments):
                b = data.catchments[name].boarding
                keep = (b.dates >= np.datetime64(p.start, "D")) & (b.dates <= np.datetime64(p.end, "D"))
                vals.append(b.values[keep])
            v = np.concatenate(vals) if vals else np.zeros(0)
            if v.size == 0:
                continue
            for t, prop in zip(cfg.thresholds, breach_distribution(v, cfg.thresholds)):
                dist.append([p.name, t, prop, int(v.size)])
        write_csv(reports / "breach_distribution.csv", DISTRIBUTION_HEADER, dist)

        jobs = []
        for cutoff in cfg.cutoffs:
            for horizon in cfg.horizons:
                buckets = _select(data.windows(cfg.rule(cutoff, horizon), cfg.input_length, skips), cfg.periods)
                for period, samples in buckets.items():
                    tr, va = split_chronological(samples, cfg.train.split_fraction)
                    tr, (va,), norm = ds.normalize_channels(tr, va)
                    for variant in cfg.variants:
                        cell = {"period": period, "variant": variant, "cutoff": cutoff, "horizon": horizon,
                                "label_mode": cfg.label_mode, "input_length": cfg.input_length}
                        name = cell_name(period, variant, cutoff, horizon)
                        jobs.append((name, variant, widths, cfg.input_length, cfg.train, tr, va, cell, _norm_dict(norm)))
        results = _pool_map(_run_job, jobs, args.jobs)
        for job, (name, res, manifest, ckpt) in zip(jobs, results):
            cell = job[7]
            rows.setdefault(cell["period"], []).append(auc_row(cell["cutoff"], cell["horizon"], cell["variant"], res))
            manifest.extra["data_fingerprint"] = data.fingerprint()
            manifest.write(reports, name)
            path = cfg.output / "checkpoints" / f"{name}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(ckpt)
            log.info("%s: auc=%s", name, res.auc)
    finally:
        for period, r in rows.items():
            write_csv(reports / f"auc_{period}.csv", AUC_HEADER, r)
        skips.write(reports / "dataset_skips.csv")
    _write_manifest(cfg.output / "manifest_run.json", cfg, data, "run")
    n = sum(len(r) for r in rows.values())
    print(f"{n} AUC rows written to {reports}")
    return EXIT_OK


def cmd_explain(args) -> int:
    cfg = ExperimentConfig.from_mapping(load_config(args.config, _common_overrides(args) + [("explain.k", args.k)]))
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt_path} not found")
    model = M.load(ckpt_path)
    cell = model.manifest.get("cell")
    if cell is None:
        raise ex.ExplainError("checkpoint manifest lacks the training cell (period, cutoff, horizon)")
    data = load_data(cfg)
    widths = _static_widths(data)
    if model.arch.has_static and tuple(model.arch.static_widths) != tuple(widths):
        raise ex.ExplainError(
            f"checkpoint/dataset shape mismatch: checkpoint static widths {model.arch.static_widths}, dataset {widths}"
        )
    if model.arch.input_length != cell["input_length"]:
        raise ex.ExplainError("checkpoint/dataset shape mismatch: input length differs from the training cell")
    if model.arch.variant != "Full":
        warnings.warn(f"{model.arch.variant} checkpoint ignores static inputs; static players are dummies with zero attribution")
    rule = ds.LabelRule(cell["horizon"], cell["cutoff"], cell["label_mode"])
    buckets = data.windows(rule, cell["input_length"])
    if cell["period"] not in buckets:
        raise ex.ExplainError(f"period {cell['period']!r} of the checkpoint is not in the dataset")
    tr, va = split_chronological(buckets[cell["period"]], cfg.train.split_fraction)
    norm = model.manifest.get("case_norm")
    if norm is not None:
        cn = ds.ChannelNorm(norm["mean"], norm["std"], norm["centered_only"])
        tr, va = ([_apply_norm(s, cn) for s in group] for group in (tr, va))
    e = cfg.explain
    first = data.catchments[sorted(data.catchments)[0]]
    players = ex.players_for(model, va[0], bool(e["per_day"]), first.profile.slot_names())
    background = ex.draw_background(tr, cfg.seed, int(e["background"]))
    explained = ex.draw_background(va, cfg.seed + 1, int(e["n_samples"]))
    method = e["method"]
    if method == "auto":
        method = "exact" if len(players) <= ex.MAX_EXACT_PLAYERS and not e["per_day"] else "sampled"
    if method == "exact":
        if e["per_day"]:
            raise UsageError("per-day temporal players are available in sampled mode only")
        atts = [ex.exact_shapley(model, x, background, players) for x in explained]
    elif method == "sampled":
        atts = [ex.sampled_shapley(model, x, background, players, int(e["n_permutations"]), cfg.seed + i) for i, x in enumerate(explained)]
    else:
        raise UsageError(f"explain.method must be auto, exact or sampled, not {method!r}")
    ranking = ex.rank_features(atts, int(e["k"]))
    name = ckpt_path.stem
    ex.write_ranking(cfg.reports / f"shap_{name}.csv", ranking)
    _write_manifest(
        cfg.reports / f"explain_{name}.json", cfg, data, "explain",
        {"checkpoint": str(ckpt_path), "method": method, "n_players": len(players),
         "max_residual": max(abs(a.residual) for a in atts)},
    )
    print(f"{len(ranking)} ranked players written to {cfg.reports / f'shap_{name}.csv'}")
    return EXIT_OK


def _apply_norm(s: ds.WindowSample, norm: ds.ChannelNorm) -> ds.WindowSample:
    t = s.temporal.copy()
    t[:, 1] = norm.apply(t[:, 1])
    return dataclasses.replace(s, temporal=t)


def cmd_transfer(args) -> int:
    overrides = _common_overrides(args)
    if args.budget_sweep:
        overrides.append(("transfer.budgets", [30, 60, 120, "all"]))
    cfg = ExperimentConfig.from_mapping(load_config(args.config, overrides))
    data = load_data(cfg)
    t = cfg.transfer
    cutoff = float(t["cutoff"]) if t["cutoff"] is not None else cfg.cutoffs[0]
    horizon = int(t["horizon"]) if t["horizon"] is not None else cfg.horizons[0]
    if t["variant"] not in M.VARIANTS:
        raise UsageError(f"unknown transfer variant {t['variant']!r}")
    buckets = _select(data.windows(cfg.rule(cutoff, horizon), cfg.input_length), cfg.periods)
    if len(buckets) < 2:
        raise tf.TransferError(f"transfer needs at least 2 periods, got {len(buckets)}")
    budgets = [None if b == "all" else int(b) for b in t["budgets"]]
    written = []
    for b in budgets:
        rep = tf.cross_period_matrix(buckets, t["variant"], _static_widths(data), cfg.train, b, bool(t["freeze"]), args.jobs)
        fname = "transfer_matrix.csv" if len(budgets) == 1 else f"transfer_matrix_{'all' if b is None else b}.csv"
        rep.write(cfg.reports / fname)
        written.append(fname)
        for p in rep.unavailable:
            warnings.warn(f"period {p} unavailable for transfer")
    _write_manifest(cfg.reports / "transfer_manifest.json", cfg, data, "transfer",
                    {"cutoff": cutoff, "horizon": horizon, "files": written})
    print(f"wrote {', '.join(written)} to {cfg.reports}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    rows = []
    worst = 0.0
    for s in range(args.seeds):
        for kind in GRAD_KINDS:
            rows.append([kind, s, nn.grad_check(kind, s)])
        rows.append(["Full", s, M.grad_check_model("Full", s)])
    for target in (*GRAD_KINDS, "Full"):
        err = max(r[2] for r in rows if r[0] == target)
        worst = max(worst, err)
        print(f"{target:8s} max relative error {err:.3e}")
    if args.out:
        write_csv(Path(args.out) / "grad_check.csv", GRAD_HEADER, rows)
    if not worst < GRAD_TOLERANCE:
        print(f"gradient check failed: {worst:.3e} >= {GRAD_TOLERANCE:g}", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradient check passed")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot parse {text!r} as a comma-separated list") from None

    return parse


def _key_value(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected section.key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), _parse_value(v.strip())


def _common_overrides(args) -> list[tuple[str, object]]:
    out = [
        ("seed", args.seed),
        ("output", args.out),
        ("data.path", args.data),
        ("experiment.variants", args.variants),
        ("experiment.cutoffs", args.cutoffs),
        ("experiment.horizons", args.horizons),
        ("experiment.periods", args.periods),
    ]
    return out + list(args.set or [])


def _add_common(p: argparse.ArgumentParser, out_default=None):
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--out", default=out_default, help="output directory (overrides config 'output')")
    p.add_argument("--data", help="dataset directory (overrides [data] path)")
    p.add_argument("--seed", type=int, help=f"seed (overrides config and {SEED_ENV})")
    p.add_argument("--variants", type=_csv_list(str))
    p.add_argument("--cutoffs", type=_csv_list(float))
    p.add_argument("--horizons", type=_csv_list(int))
    p.add_argument("--periods", type=_csv_list(str))
    p.add_argument("--jobs", type=int, default=1, help="parallel training jobs")
    p.add_argument("--set", type=_key_value, action="append", metavar="SECTION.KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boardcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", required=True, help="TOML file with a [synth] table")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="train every (period, variant, cutoff, horizon) cell")
    _add_common(r)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("explain", help="Shapley ranking for a trained checkpoint")
    _add_common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--k", type=int)
    e.set_defaults(func=cmd_explain)

    t = sub.add_parser("transfer", help="cross-period transfer matrix")
    _add_common(t)
    t.add_argument("--budget-sweep", action="store_true", help="one matrix per target budget in 30, 60, 120, all days")
    t.set_defaults(func=cmd_transfer)

    c = sub.add_parser("grad-check", help="finite-difference check of every layer and the assembled model")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--out", help="directory for grad_check.csv")
    c.set_defaults(func=cmd_grad_check)
    return parser


def _exit_code(err: BaseException) -> int:
    if isinstance(err, UsageError):
        return EXIT_USAGE
    if isinstance(err, ArithmeticError):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except (UsageError, NumericError, ArithmeticError, ValueError, OSError, KeyError) as err:
        module = type(err).__module__.rsplit(".", 1)[-1]
        where = "boardcast" if module in ("builtins", "cli") else module
        print(f"boardcast: error [{where}]: {err}", file=sys.stderr)
        return _exit_code(err)


if __name__ == "__main__":
    sys.exit(main())
