"""Two-branch CNN-LSTM classifier and its checkpoint format.

Temporal branch: conv1d -> ReLU -> LSTM, last hidden state kept.
Static branch (Full variant only): for every socioecological level a conv1d
whose kernel spans the whole level vector -> ReLU, the level outputs
concatenated -> dense -> ReLU.
Head: concatenated branch outputs -> dense -> ReLU -> dense(1) -> sigmoid.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .dataset import LEVELS, WindowSample

FORMAT_VERSION = 1
VARIANTS = ("HistoryOnly", "HistoryPlusCases", "Full")
TEMPORAL_CHANNELS = {"HistoryOnly": 1, "HistoryPlusCases": 2, "Full": 2}


class ModelConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    variant: str
    static_widths: tuple[int, ...] = ()
    input_length: int = 7
    temporal_filters: int = 16
    temporal_kernel: int = 3
    lstm_hidden: int = 32
    static_filters: int = 8
    static_dense: int = 16
    head_dense: int = 16

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.variant == "Full":
            if len(self.static_widths) != len(LEVELS) or sum(self.static_widths) == 0:
                raise ModelConfigError("Full variant needs per-level static widths (building, estate, tpu)")
        object.__setattr__(self, "static_widths", tuple(int(w) for w in self.static_widths))

    @property
    def channels(self) -> int:
        return TEMPORAL_CHANNELS[self.variant]

    @property
    def has_static(self) -> bool:
        return self.variant == "Full"

    def layer_specs(self) -> list[tuple[str, str, tuple[int, ...]]]:
        """(name, kind, init args) for every layer in forward order."""
        specs = [
            ("temporal.0.conv1d", "conv1d", (self.channels, self.temporal_filters, self.temporal_kernel)),
            ("temporal.1.lstm", "lstm", (self.temporal_filters, self.lstm_hidden)),
        ]
        head_in = self.lstm_hidden
        if self.has_static:
            live = [i for i, w in enumerate(self.static_widths) if w > 0]
            for i in live:
                specs.append((f"static.{i}.conv1d", "conv1d", (1, self.static_filters, self.static_widths[i])))
            specs.append(
                (f"static.{len(LEVELS)}.dense", "dense", (len(live) * self.static_filters, self.static_dense))
            )
            head_in += self.static_dense
        specs.append(("head.0.dense", "dense", (head_in, self.head_dense)))
        specs.append(("head.1.dense", "dense", (self.head_dense, 1)))
        return specs

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["static_widths"] = list(self.static_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["static_widths"] = tuple(d.get("static_widths", ()))
        return cls(**d)


HEAD_LAYERS = ("head.0.dense", "head.1.dense")


@dataclass
class HybridModel:
    arch: Architecture
    layers: dict[str, nn.LayerParams]
    manifest: dict = field(default_factory=dict)

    # -- forward ----------------------------------------------------------

    def _split_static(self, S: np.ndarray) -> list[tuple[int, np.ndarray]]:
        out, pos = [], 0
        for i, w in enumerate(self.arch.static_widths):
            if w > 0:
                out.append((i, S[:, pos : pos + w]))
            pos += w
        return out

    def logits(self, X: np.ndarray, S: np.ndarray | None = None, tape: nn.GradientTape | None = None) -> np.ndarray:
        """Pre-sigmoid scores for a batch; ``X`` is ``[B, L, C]`` and ``S`` is ``[B, static]``."""
        a = self.arch
        if X.ndim != 3 or X.shape[1] != a.input_length or X.shape[2] < a.channels:
            raise nn.ShapeError(
                f"temporal branch: expected input [B, {a.input_length}, >={a.channels}], got {X.shape}"
            )
        L = self.layers
        x = np.ascontiguousarray(X[:, :, : a.channels].transpose(0, 2, 1))
        z = nn.layer_forward(L["temporal.0.conv1d"], x, tape)
        z, m0 = nn.relu_forward(z)
        z = z.transpose(0, 2, 1)
        hs, _ = nn.layer_forward(L["temporal.1.lstm"], z, tape)
        feats = [hs[:, -1]]
        masks = {"temporal.0": m0}
        if a.has_static:
            width = sum(a.static_widths)
            if S is None or S.ndim != 2 or S.shape[1] != width or S.shape[0] != X.shape[0]:
                got = None if S is None else S.shape
                raise nn.ShapeError(f"static branch: expected input [B, {width}], got {got}")
            outs = []
            for i, part in self._split_static(S):
                y = nn.layer_forward(L[f"static.{i}.conv1d"], part[:, None, :], tape)[:, :, 0]
                y, m = nn.relu_forward(y)
                masks[f"static.{i}"] = m
                outs.append(y)
            y = nn.layer_forward(L[f"static.{len(LEVELS)}.dense"], np.concatenate(outs, axis=1), tape)
            y, m = nn.relu_forward(y)
            masks["static.dense"] = m
            feats.append(y)
        h = np.concatenate(feats, axis=1)
        h = nn.layer_forward(L["head.0.dense"], h, tape)
        h, m = nn.relu_forward(h)
        masks["head.0"] = m
        out = nn.layer_forward(L["head.1.dense"], h, tape)[:, 0]
        if tape is not None:
            tape.caches["_masks"] = masks
            tape.caches["_batch"] = X.shape[0]
        return out

    def predict(self, X: np.ndarray, S: np.ndarray | None = None, tape: nn.GradientTape | None = None) -> np.ndarray:
        z = self.logits(X, S, tape)
        p = nn.sigmoid(z)
        if tape is not None:
            tape.caches["_prob"] = p
        return p

    def forward(self, sample: WindowSample) -> float:
        return float(self.predict(sample.temporal[None], sample.static[None])[0])

    # -- backward ----------------------------------------------------------

    def backward(self, tape: nn.GradientTape, dprob: np.ndarray | None = None, dlogit: np.ndarray | None = None):
        """Parameter gradients for every layer given d(loss)/d(prob) or d(loss)/d(logit)."""
        tape.require_forward()
        if "_masks" not in tape.caches:
            raise nn.TapeStateError("tape holds no model forward pass")
        if dlogit is None:
            if dprob is None:
                raise ValueError("pass dprob or dlogit")
            if "_prob" not in tape.caches:
                raise nn.TapeStateError("dprob given but forward did not record probabilities; use predict()")
            p = tape.caches["_prob"]
            dlogit = np.asarray(dprob, dtype=np.float64) * p * (1.0 - p)
        a, L, masks = self.arch, self.layers, tape.caches["_masks"]
        tape.grads.clear()
        d = np.asarray(dlogit, dtype=np.float64).reshape(-1, 1)
        d = nn.layer_backward(L["head.1.dense"], d, tape)
        d = nn.relu_backward(d, masks["head.0"])
        d = nn.layer_backward(L["head.0.dense"], d, tape)
        dh = d[:, : a.lstm_hidden]
        if a.has_static:
            ds = nn.relu_backward(d[:, a.lstm_hidden :], masks["static.dense"])
            ds = nn.layer_backward(L[f"static.{len(LEVELS)}.dense"], ds, tape)
            pos = 0
            for i, w in enumerate(a.static_widths):
                if w == 0:
                    continue
                part = nn.relu_backward(ds[:, pos : pos + a.static_filters], masks[f"static.{i}"])
                nn.layer_backward(L[f"static.{i}.conv1d"], part[:, :, None], tape)
                pos += a.static_filters
        B = tape.caches["_batch"]
        T = a.input_length - a.temporal_kernel + 1
        dhs = np.zeros((B, T, a.lstm_hidden))
        dhs[:, -1] = dh
        dz = nn.layer_backward(L["temporal.1.lstm"], dhs, tape)
        dz = nn.relu_backward(dz.transpose(0, 2, 1), masks["temporal.0"])
        nn.layer_backward(L["temporal.0.conv1d"], dz, tape)
        for name, p in L.items():
            tape.grads.setdefault(name, p.zeros_like())
        return tape.grads

    # -- utilities ---------------------------------------------------------

    def copy(self) -> "HybridModel":
        return HybridModel(self.arch, {k: v.copy() for k, v in self.layers.items()}, json.loads(json.dumps(self.manifest)))

    def n_params(self) -> int:
        return sum(t.size for p in self.layers.values() for t in p.tensors.values())

    def same_params(self, other: "HybridModel") -> bool:
        if self.layers.keys() != other.layers.keys():
            return False
        for k, p in self.layers.items():
            q = other.layers[k]
            for t in p.tensors:
                if p.tensors[t].tobytes() != q.tensors[t].tobytes():
                    return False
        return True


def init_layers(arch: Architecture, rng: np.random.Generator, names=None) -> dict[str, nn.LayerParams]:
    out = {}
    for name, kind, args in arch.layer_specs():
        p = nn.INITIALIZERS[kind](name, *args, rng)
        if names is None or name in names:
            out[name] = p
    return out


def build(variant: str, static_widths=(), seed: int = 0, **hyper) -> HybridModel:
    """Seeded model; identical arguments give bit-identical parameters."""
    widths = tuple(static_widths) if variant == "Full" else ()
    if variant == "Full" and not static_widths:
        raise ModelConfigError("Full variant requires a static profile shape")
    arch = Architecture(variant=variant, static_widths=widths, **hyper)
    rng = np.random.default_rng(seed)
    return HybridModel(arch, init_layers(arch, rng), {"init_seed": seed, "init": "glorot-uniform, forget bias 1"})


# -- checkpoints ----------------------------------------------------------------


def to_json(model: HybridModel) -> str:
    params = {}
    for name, p in model.layers.items():
        params[name] = {
            "kind": p.kind,
            "tensors": {k: {"shape": list(t.shape), "data": t.reshape(-1).tolist()} for k, t in p.tensors.items()},
        }
    doc = {
        "format_version": FORMAT_VERSION,
        "architecture": model.arch.to_dict(),
        "manifest": model.manifest,
        "params": params,
    }
    # json writes floats with repr(), the shortest string that parses back identically
    return json.dumps(doc, indent=1, allow_nan=False)


def from_json(text: str) -> HybridModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint parse error: {e}") from None
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint parse error: top level is not an object")
    ver = doc.get("format_version")
    if ver != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {ver!r} (expected {FORMAT_VERSION})")
    try:
        arch = Architecture.from_dict(doc["architecture"])
        params = doc["params"]
    except (KeyError, TypeError, ModelConfigError) as e:
        raise CheckpointError(f"bad architecture descriptor: {e}") from None
    layers = {}
    for name, kind, _ in arch.layer_specs():
        if name not in params:
            raise CheckpointError(f"missing layer {name!r} in checkpoint")
        entry = params[name]
        if entry.get("kind") != kind:
            raise CheckpointError(f"layer {name!r}: kind {entry.get('kind')!r} != {kind!r}")
        tensors = {}
        for tname, t in entry["tensors"].items():
            arr = np.asarray(t["data"], dtype=np.float64)
            if arr.size != int(np.prod(t["shape"])):
                raise CheckpointError(f"layer {name!r} tensor {tname!r}: data length does not match shape")
            tensors[tname] = arr.reshape(t["shape"])
        try:
            layers[name] = nn.LayerParams(name, kind, tensors)
        except nn.ShapeError as e:
            raise CheckpointError(str(e)) from None
    extra = set(params) - set(layers)
    if extra:
        raise CheckpointError(f"unexpected layers in checkpoint: {sorted(extra)}")
    # shape check against what the descriptor implies
    ref = init_layers(arch, np.random.default_rng(0))
    for name, p in layers.items():
        if p.shapes() != ref[name].shapes():
            raise CheckpointError(f"layer {name!r}: shapes {p.shapes()} do not match descriptor {ref[name].shapes()}")
    return HybridModel(arch, layers, doc.get("manifest", {}))


def save(model: HybridModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_json(model))


def load(path) -> HybridModel:
    return from_json(Path(path).read_text())


def grad_check_model(variant: str, seed: int, eps: float = 1e-4) -> float:
    """Finite-difference check of the assembled network on a seeded small instance."""
    rng = np.random.default_rng(seed)
    widths = tuple(int(w) for w in rng.integers(1, 5, size=3)) if variant == "Full" else ()
    m = build(
        variant,
        widths,
        seed=seed,
        input_length=int(rng.integers(3, 8)),
        temporal_filters=int(rng.integers(1, 5)),
        temporal_kernel=int(rng.integers(1, 4)),
        lstm_hidden=int(rng.integers(1, 5)),
        static_filters=int(rng.integers(1, 4)),
        static_dense=int(rng.integers(1, 5)),
        head_dense=int(rng.integers(1, 5)),
    )
    for p in m.layers.values():
        for t in p.tensors.values():
            t += rng.normal(scale=0.3, size=t.shape)
    B = int(rng.integers(1, 4))
    X = rng.normal(size=(B, m.arch.input_length, 2))
    S = rng.normal(size=(B, sum(widths)))
    R = rng.normal(size=B)

    def loss() -> float:
        return float(np.sum(m.predict(X, S) * R))

    tape = nn.GradientTape()
    m.predict(X, S, tape)
    grads = m.backward(tape, dprob=R)
    errs = []
    for name, p in m.layers.items():
        for t in p.tensors:
            errs.append(nn.relative_error(grads[name][t], nn.numeric_grad(loss, p.tensors[t], eps)))
    return max(errs)
