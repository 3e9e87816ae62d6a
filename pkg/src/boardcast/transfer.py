"""Layer transplant between checkpoints, fine-tuning, and the cross-period transfer matrix."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .dataset import WindowSample, normalize_channels
from .metrics import auc, write_csv
from .model import HEAD_LAYERS, HybridModel
from .train import SplitError, TrainConfig, evaluate, limit_budget, split_chronological, train

log = logging.getLogger(__name__)

MATRIX_HEADER = ["source", "target", "transferred_auc", "indigenous_auc", "delta", "n_val", "seed"]
BUDGETS = (30, 60, 120, None)


class TransferError(ValueError):
    pass


class TransferShapeError(TransferError):
    pass


@dataclass(frozen=True)
class TransferPlan:
    source_checkpoint: Path | None
    layer_map: tuple[tuple[str, str], ...]
    freeze: frozenset[str] = frozenset()
    reinitialized: frozenset[str] = frozenset()
    reinit_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_map", tuple((str(a), str(b)) for a, b in self.layer_map))
        object.__setattr__(self, "freeze", frozenset(self.freeze))
        object.__setattr__(self, "reinitialized", frozenset(self.reinitialized))
        targets = [b for _, b in self.layer_map]
        if len(set(targets)) != len(targets):
            raise TransferError("layer_map maps two source layers onto the same target layer")
        mapped = set(targets)
        if not self.freeze <= mapped:
            raise TransferError(f"frozen layers must be mapped: {sorted(self.freeze - mapped)}")
        if self.reinitialized & mapped:
            raise TransferError(f"layers both mapped and reinitialized: {sorted(self.reinitialized & mapped)}")

    @property
    def mapped(self) -> frozenset[str]:
        return frozenset(b for _, b in self.layer_map)


def default_plan(arch: M.Architecture, source_checkpoint=None, freeze_mapped: bool = False, seed: int = 0) -> TransferPlan:
    """Map the temporal and static branches, reinitialize the head, freeze nothing by default."""
    names = [n for n, _, _ in arch.layer_specs() if n not in HEAD_LAYERS]
    return TransferPlan(
        Path(source_checkpoint) if source_checkpoint is not None else None,
        tuple((n, n) for n in names),
        freeze=frozenset(names) if freeze_mapped else frozenset(),
        reinitialized=frozenset(HEAD_LAYERS),
        reinit_seed=seed,
    )


def identity_plan(arch: M.Architecture, source_checkpoint=None) -> TransferPlan:
    names = [n for n, _, _ in arch.layer_specs()]
    return TransferPlan(Path(source_checkpoint) if source_checkpoint is not None else None, tuple((n, n) for n in names))


def transplant(target: HybridModel, plan: TransferPlan, source: HybridModel | None = None) -> HybridModel:
    """Copy of ``target`` carrying the mapped source layers bit-exactly.

    ``source`` defaults to the plan's checkpoint.  Reinitialized layers are
    drawn fresh from ``plan.reinit_seed``; everything else is left as is.
    """
    if source is None:
        if plan.source_checkpoint is None:
            raise TransferError("plan has no source checkpoint and no source model was given")
        source = M.load(plan.source_checkpoint)
    out = target.copy()
    for src_name, tgt_name in plan.layer_map:
        if src_name not in source.layers:
            raise TransferError(f"unknown source layer {src_name!r}; source has {sorted(source.layers)}")
        if tgt_name not in out.layers:
            raise TransferError(f"unknown target layer {tgt_name!r}; target has {sorted(out.layers)}")
        sp, tp = source.layers[src_name], out.layers[tgt_name]
        if sp.kind != tp.kind or sp.shapes() != tp.shapes():
            raise TransferShapeError(
                f"layer {src_name!r} -> {tgt_name!r}: source {sp.kind} {sp.shapes()} vs target {tp.kind} {tp.shapes()}"
            )
        out.layers[tgt_name] = M.nn.LayerParams(tgt_name, tp.kind, {k: v.copy() for k, v in sp.tensors.items()})
    unknown = plan.reinitialized - set(out.layers)
    if unknown:
        raise TransferError(f"unknown layers to reinitialize: {sorted(unknown)}")
    if plan.reinitialized:
        fresh = M.init_layers(out.arch, np.random.default_rng(plan.reinit_seed), plan.reinitialized)
        out.layers.update(fresh)
    out.manifest = {
        **out.manifest,
        "transplant": {
            "source_checkpoint": str(plan.source_checkpoint) if plan.source_checkpoint else None,
            "layer_map": [list(p) for p in plan.layer_map],
            "freeze": sorted(plan.freeze),
            "reinitialized": sorted(plan.reinitialized),
            "reinit_seed": plan.reinit_seed,
        },
    }
    return out


def fine_tune(model: HybridModel, train_set, val_set, config: TrainConfig, plan: TransferPlan | None = None):
    """``train`` with the plan's frozen layers added to the freeze mask; the manifest is flagged as transferred."""
    freeze = config.freeze_mask | (plan.freeze if plan else frozenset())
    extra = {"transferred": True}
    if plan is not None and plan.source_checkpoint is not None:
        extra["source_checkpoint"] = str(plan.source_checkpoint)
    return train(model, train_set, val_set, replace(config, freeze_mask=freeze), extra=extra)


# -- experiments ----------------------------------------------------------------


def _val_auc(model: HybridModel, val) -> float | None:
    return auc(evaluate(model, val), np.array([s.label for s in val])).auc


@dataclass
class PeriodData:
    """One period's split, kept raw so every budget can normalize on its own training set."""

    name: str
    train: list[WindowSample]
    val: list[WindowSample]

    def prepared(self, budget: int | None):
        tr = limit_budget(self.train, budget)
        if not tr:
            raise SplitError(f"period {self.name}: no training samples within a {budget}-day budget")
        tr, (va,), _ = normalize_channels(tr, self.val)
        return tr, va


def transfer_pair(
    source: PeriodData,
    target: PeriodData,
    variant: str,
    static_widths,
    config: TrainConfig,
    budget: int | None = 60,
    freeze_mapped: bool = False,
    source_model: HybridModel | None = None,
):
    """Train (or reuse) a source model, transplant it and fine-tune on the budgeted target.

    Returns ``(transferred_auc, indigenous_auc, n_val)``; both target runs use
    the same split, initial weights and seed.
    """
    seed = config.seed
    fresh = M.build(variant, static_widths, seed)
    if source_model is None:
        s_tr, s_va = source.prepared(None)
        source_model, _ = train(fresh, s_tr, s_va, config)
    t_tr, t_va = target.prepared(budget)
    indigenous, _ = train(fresh, t_tr, t_va, config)
    plan = default_plan(fresh.arch, freeze_mapped=freeze_mapped, seed=seed)
    transferred, _ = fine_tune(transplant(fresh, plan, source_model), t_tr, t_va, config, plan)
    return _val_auc(transferred, t_va), _val_auc(indigenous, t_va), len(t_va)


@dataclass
class Cell:
    source: str
    target: str
    transferred_auc: float | None
    indigenous_auc: float | None
    n_val: int
    seed: int

    @property
    def delta(self) -> float | None:
        if self.transferred_auc is None or self.indigenous_auc is None:
            return None
        return self.transferred_auc - self.indigenous_auc

    def row(self) -> list:
        return [self.source, self.target, self.transferred_auc, self.indigenous_auc, self.delta, self.n_val, self.seed]


@dataclass
class TransferReport:
    periods: list[str]
    cells: list[Cell]
    budget: int | None
    unavailable: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def cell(self, source: str, target: str) -> Cell:
        for c in self.cells:
            if c.source == source and c.target == target:
                return c
        raise KeyError((source, target))

    def row_means(self) -> dict[str, float | None]:
        """Mean off-diagonal transferred AUC per source period."""
        out = {}
        for p in self.periods:
            v = [c.transferred_auc for c in self.cells if c.source == p and c.target != p and c.transferred_auc is not None]
            out[p] = float(np.mean(v)) if v else None
        return out

    def write(self, path: Path) -> None:
        write_csv(path, MATRIX_HEADER, [c.row() for c in self.cells])


def _budget_label(b: int | None) -> str:
    return "all" if b is None else str(b)


def _train_job(args):
    variant, widths, config, tr, va = args
    m, _ = train(M.build(variant, widths, config.seed), tr, va, config)
    return m


def _fine_tune_job(args):
    variant, widths, config, freeze_mapped, src, tr, va = args
    fresh = M.build(variant, widths, config.seed)
    plan = default_plan(fresh.arch, freeze_mapped=freeze_mapped, seed=config.seed)
    m, _ = fine_tune(transplant(fresh, plan, src), tr, va, config, plan)
    return _val_auc(m, va)


def _map(fn, jobs_args, jobs: int):
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, jobs_args))


def cross_period_matrix(
    buckets: dict[str, Sequence[WindowSample]],
    variant: str,
    static_widths,
    config: TrainConfig,
    budget: int | None = None,
    freeze_mapped: bool = False,
    jobs: int = 1,
) -> TransferReport:
    """Every ordered (source, target) pair of periods.

    Sources train on all their training data; targets fine-tune within
    ``budget`` anchor days.  Diagonal cells are the indigenous result by
    definition.  Periods that cannot be split or scored are marked
    unavailable and their cells left empty.
    """
    if len(buckets) < 2:
        raise TransferError(f"cross-period matrix needs at least 2 periods, got {len(buckets)}")
    names = list(buckets)
    data: dict[str, PeriodData] = {}
    unavailable = []
    for p in names:
        try:
            tr, va = split_chronological(list(buckets[p]), config.split_fraction)
            pdata = PeriodData(p, tr, va)
            pdata.prepared(budget)
            if auc(np.zeros(len(va)), np.array([s.label for s in va])).auc is None:
                raise SplitError(f"period {p}: validation labels hold a single class")
            data[p] = pdata
        except SplitError as e:
            log.warning("period %s unavailable: %s", p, e)
            unavailable.append(p)
    if len(data) < 2:
        raise TransferError(f"fewer than 2 periods have sufficient samples (unavailable: {unavailable})")
    widths = tuple(static_widths)
    plain = replace(config, freeze_mask=frozenset())
    avail = [p for p in names if p in data]

    src_sets = {p: data[p].prepared(None) for p in avail}
    tgt_sets = {p: data[p].prepared(budget) for p in avail}
    sources = dict(zip(avail, _map(_train_job, [(variant, widths, plain, *src_sets[p]) for p in avail], jobs)))
    indig = _map(_train_job, [(variant, widths, plain, *tgt_sets[p]) for p in avail], jobs)
    indig_auc = {p: _val_auc(m, tgt_sets[p][1]) for p, m in zip(avail, indig)}
    pairs = [(s, t) for s in avail for t in avail if s != t]
    trans = dict(zip(pairs, _map(_fine_tune_job, [(variant, widths, plain, freeze_mapped, sources[s], *tgt_sets[t]) for s, t in pairs], jobs)))

    cells = []
    for s in names:
        for t in names:
            if s not in data or t not in data:
                cells.append(Cell(s, t, None, None, 0, config.seed))
                continue
            n_val = len(tgt_sets[t][1])
            ta = indig_auc[t] if s == t else trans[(s, t)]
            cells.append(Cell(s, t, ta, indig_auc[t], n_val, config.seed))
    return TransferReport(
        names,
        cells,
        budget,
        unavailable,
        {"variant": variant, "budget": _budget_label(budget), "freeze_mapped": freeze_mapped, "train": config.to_dict()},
    )
