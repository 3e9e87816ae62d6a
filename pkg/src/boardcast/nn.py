"""Dense-array layer kernel: conv1d, LSTM, dense, ReLU and sigmoid.

Every layer is a pair of functions.  ``*_forward`` takes an input array and a
:class:`LayerParams` and returns ``(output, cache)``; ``*_backward`` takes the
upstream gradient and that cache and returns ``(input_grad, param_grads)``.
Inputs carry a leading batch axis; the single-sample shapes are accepted too
and are promoted transparently.

All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

KINDS = ("conv1d", "lstm", "dense")

_P_LO = np.finfo(np.float64).tiny
_P_HI = np.nextafter(1.0, 0.0)


class ShapeError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


@dataclass
class LayerParams:
    """Named parameter tensors of one layer."""

    name: str
    kind: str
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        _check_param_shapes(self)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}

    def copy(self) -> "LayerParams":
        return LayerParams(self.name, self.kind, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def _check_param_shapes(p: LayerParams) -> None:
    t = p.tensors
    if p.kind == "conv1d":
        ok = set(t) == {"weight", "bias"} and t["weight"].ndim == 3 and t["bias"].shape == (t["weight"].shape[0],)
    elif p.kind == "lstm":
        ok = set(t) == {"W", "U", "b"} and t["U"].ndim == 2
        if ok:
            four_h, hidden = t["U"].shape
            ok = (
                four_h == 4 * hidden
                and t["W"].ndim == 2
                and t["W"].shape[0] == four_h
                and t["b"].shape == (four_h,)
            )
    else:
        ok = set(t) == {"weight", "bias"} and t["weight"].ndim == 2 and t["bias"].shape == (t["weight"].shape[0],)
    if not ok:
        raise ShapeError(f"layer {p.name!r}: tensor shapes {p.shapes()} inconsistent with kind {p.kind}")


# -- initialisation -----------------------------------------------------------


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


def init_conv1d(name: str, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator) -> LayerParams:
    w = _glorot(rng, (out_ch, in_ch, kernel), in_ch * kernel, out_ch * kernel)
    return LayerParams(name, "conv1d", {"weight": w, "bias": np.zeros(out_ch)})


def init_lstm(name: str, n_in: int, hidden: int, rng: np.random.Generator) -> LayerParams:
    W = _glorot(rng, (4 * hidden, n_in), n_in, hidden)
    U = _glorot(rng, (4 * hidden, hidden), hidden, hidden)
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 1.0  # forget gate
    return LayerParams(name, "lstm", {"W": W, "U": U, "b": b})


def init_dense(name: str, n_in: int, n_out: int, rng: np.random.Generator) -> LayerParams:
    w = _glorot(rng, (n_out, n_in), n_in, n_out)
    return LayerParams(name, "dense", {"weight": w, "bias": np.zeros(n_out)})


INITIALIZERS: dict[str, Callable[..., LayerParams]] = {
    "conv1d": init_conv1d,
    "lstm": init_lstm,
    "dense": init_dense,
}


# -- activations --------------------------------------------------------------


def sigmoid(x):
    # clipped so the result stays inside the open unit interval in float64
    return np.clip(expit(x), _P_LO, _P_HI)


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


# -- conv1d -------------------------------------------------------------------


def conv1d_forward(x: np.ndarray, p: LayerParams):
    """Valid, stride-1 convolution.

    ``x`` is ``[in_ch, T]`` or ``[B, in_ch, T]``; output is ``[..., out_ch, T - k + 1]`` with
    ``out[o, t] = bias[o] + sum_c sum_j w[o, c, j] * x[c, t + j]``.
    """
    w, b = p.tensors["weight"], p.tensors["bias"]
    single = x.ndim == 2
    if single:
        x = x[None]
    out_ch, in_ch, k = w.shape
    if x.ndim != 3 or x.shape[1] != in_ch:
        raise ShapeError(f"{p.name}: expected {in_ch} input channels, got input shape {x.shape}")
    T = x.shape[2]
    if T < k:
        raise ShapeError(f"{p.name}: input length {T} shorter than kernel size {k}")
    t_out = T - k + 1
    # patches[b, t, c, j] = x[b, c, t + j]
    patches = np.lib.stride_tricks.sliding_window_view(x, k, axis=2).transpose(0, 2, 1, 3)
    cols = patches.reshape(x.shape[0], t_out, in_ch * k)
    y = cols @ w.reshape(out_ch, in_ch * k).T + b  # [B, t_out, out_ch]
    y = y.transpose(0, 2, 1)
    cache = (cols, x.shape, single)
    return (y[0] if single else y), cache


def conv1d_backward(dout: np.ndarray, cache, p: LayerParams):
    cols, x_shape, single = cache
    w = p.tensors["weight"]
    out_ch, in_ch, k = w.shape
    if single:
        dout = dout[None]
    d = dout.transpose(0, 2, 1)  # [B, t_out, out_ch]
    B, t_out, _ = d.shape
    dw = (d.reshape(-1, out_ch).T @ cols.reshape(-1, in_ch * k)).reshape(w.shape)
    db = d.sum(axis=(0, 1))
    dcols = (d @ w.reshape(out_ch, in_ch * k)).reshape(B, t_out, in_ch, k)
    dx = np.zeros(x_shape)
    for j in range(k):
        dx[:, :, j : j + t_out] += dcols[:, :, :, j].transpose(0, 2, 1)
    return (dx[0] if single else dx), {"weight": dw, "bias": db}


# -- LSTM ---------------------------------------------------------------------


def lstm_forward(x: np.ndarray, p: LayerParams):
    """Run an LSTM from zero state over ``x`` of shape ``[T, d]`` or ``[B, T, d]``.

    Gate order in the stacked matrices is input, forget, candidate, output.
    Returns ``(hs, (h_T, c_T)), cache``.
    """
    W, U, bias = p.tensors["W"], p.tensors["U"], p.tensors["b"]
    H = U.shape[1]
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != W.shape[1]:
        raise ShapeError(f"{p.name}: expected input width {W.shape[1]}, got input shape {x.shape}")
    B, T, _ = x.shape
    xw = x @ W.T + bias
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((B, T, H))
    gates = np.empty((B, T, 4 * H))
    cs = np.empty((B, T + 1, H))
    tcs = np.empty((B, T, H))
    cs[:, 0] = c
    for t in range(T):
        a = xw[:, t] + h @ U.T
        g = gates[:, t]
        g[:, : 2 * H] = expit(a[:, : 2 * H])
        g[:, 2 * H : 3 * H] = np.tanh(a[:, 2 * H : 3 * H])
        g[:, 3 * H :] = expit(a[:, 3 * H :])
        c = g[:, H : 2 * H] * c + g[:, :H] * g[:, 2 * H : 3 * H]
        tc = np.tanh(c)
        h = g[:, 3 * H :] * tc
        cs[:, t + 1] = c
        tcs[:, t] = tc
        hs[:, t] = h
    cache = (x, hs, gates, cs, tcs, single)
    if single:
        return (hs[0], (h[0], c[0])), cache
    return (hs, (h, c)), cache


def lstm_backward(dhs: np.ndarray, cache, p: LayerParams):
    """Backpropagation through time.  ``dhs`` is the gradient w.r.t. every step's hidden output."""
    x, hs, gates, cs, tcs, single = cache
    W, U = p.tensors["W"], p.tensors["U"]
    if single:
        dhs = dhs[None]
    B, T, H = hs.shape
    da_all = np.empty((B, T, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(T)):
        g = gates[:, t]
        i, f, gg, o = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
        dh = dhs[:, t] + dh_next
        tc = tcs[:, t]
        dc = dc_next + dh * o * (1.0 - tc * tc)
        da = da_all[:, t]
        da[:, :H] = dc * gg * i * (1.0 - i)
        da[:, H : 2 * H] = dc * cs[:, t] * f * (1.0 - f)
        da[:, 2 * H : 3 * H] = dc * i * (1.0 - gg * gg)
        da[:, 3 * H :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = da @ U
    flat = da_all.reshape(B * T, 4 * H)
    dW = flat.T @ x.reshape(B * T, -1)
    h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1).reshape(B * T, H)
    dU = flat.T @ h_prev
    db = flat.sum(axis=0)
    dx = da_all @ W
    return (dx[0] if single else dx), {"W": dW, "U": dU, "b": db}


# -- dense --------------------------------------------------------------------


def dense_forward(x: np.ndarray, p: LayerParams):
    w, b = p.tensors["weight"], p.tensors["bias"]
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"{p.name}: expected input width {w.shape[1]}, got {x.shape[-1]}")
    return x @ w.T + b, x


def dense_backward(dout: np.ndarray, cache, p: LayerParams):
    x = cache
    w = p.tensors["weight"]
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ w, {"weight": d2.T @ x2, "bias": d2.sum(axis=0)}


FORWARD = {"conv1d": conv1d_forward, "lstm": lstm_forward, "dense": dense_forward}
BACKWARD = {"conv1d": conv1d_backward, "lstm": lstm_backward, "dense": dense_backward}


# -- gradient tape --------------------------------------------------------------


@dataclass
class GradientTape:
    """Forward caches keyed by layer name plus the gradients filled in by backward."""

    caches: dict = field(default_factory=dict)
    grads: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    recorded: bool = False

    def require_forward(self):
        if not self.recorded:
            raise TapeStateError("backward called before any forward pass was recorded on this tape")


def layer_forward(p: LayerParams, x: np.ndarray, tape: GradientTape | None = None):
    out, cache = FORWARD[p.kind](x, p)
    if tape is not None:
        tape.caches[p.name] = cache
        tape.recorded = True
    return out


def layer_backward(p: LayerParams, dout: np.ndarray, tape: GradientTape):
    tape.require_forward()
    if p.name not in tape.caches:
        raise TapeStateError(f"no forward cache for layer {p.name!r}")
    dx, grads = BACKWARD[p.kind](dout, tape.caches[p.name], p)
    acc = tape.grads.get(p.name)
    if acc is None:
        tape.grads[p.name] = grads
    else:
        for k, g in grads.items():
            acc[k] += g
    return dx


# -- finite-difference checking ----------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(1e-8, |a| + |n|)`` with L2 norms over a whole tensor."""
    num = np.linalg.norm(analytic - numeric)
    den = max(1e-8, np.linalg.norm(analytic) + np.linalg.norm(numeric))
    return float(num / den)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for idx in range(flat.size):
        old = flat[idx]
        flat[idx] = old + eps
        fp = f()
        flat[idx] = old - eps
        fm = f()
        flat[idx] = old
        gflat[idx] = (fp - fm) / (2 * eps)
    return g


def _random_layer(kind: str, rng: np.random.Generator):
    """Seeded random small layer and a matching input, every extent <= 8."""
    if kind == "conv1d":
        in_ch, out_ch, k = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 4)
        T = int(k + rng.integers(0, 5))
        p = init_conv1d("probe.0.conv1d", in_ch, out_ch, k, rng)
        x = rng.normal(size=(int(rng.integers(1, 4)), in_ch, T))
    elif kind == "lstm":
        d, h, T = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 6)
        p = init_lstm("probe.0.lstm", d, h, rng)
        x = rng.normal(size=(int(rng.integers(1, 4)), T, d))
    elif kind == "dense":
        n_in, n_out = rng.integers(1, 9), rng.integers(1, 9)
        p = init_dense("probe.0.dense", n_in, n_out, rng)
        x = rng.normal(size=(int(rng.integers(1, 4)), n_in))
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    for t in p.tensors.values():
        t += rng.normal(scale=0.3, size=t.shape)
    return p, x


def grad_check_layer(p: LayerParams, x: np.ndarray, rng: np.random.Generator, eps: float = 1e-4) -> float:
    """Max relative error between backprop and central differences for one layer.

    The scalar probed is ``sum(output * R)`` for a fixed random ``R``; both
    parameter tensors and the layer input are checked.
    """

    def output(xx):
        out, _ = FORWARD[p.kind](xx, p)
        return out[0] if p.kind == "lstm" else out

    R = rng.normal(size=output(x).shape)

    def loss() -> float:
        return float(np.sum(output(x) * R))

    tape = GradientTape()
    out = layer_forward(p, x, tape)
    if p.kind == "lstm":
        out = out[0]
    dx = layer_backward(p, R, tape)
    errs = [relative_error(dx, numeric_grad(loss, x, eps))]
    for name, t in p.tensors.items():
        errs.append(relative_error(tape.grads[p.name][name], numeric_grad(loss, t, eps)))
    return max(errs)


def grad_check(kind: str, seed: int, eps: float = 1e-4) -> float:
    rng = np.random.default_rng(seed)
    p, x = _random_layer(kind, rng)
    return grad_check_layer(p, x, rng, eps)
