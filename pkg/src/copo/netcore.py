"""Dense tanh networks with hand-written reverse mode, Gaussian heads and Adam.

Parameters live in one flat float64 vector; layer weights and biases are views
into it, so flatten/unflatten is a copy of that vector.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


@dataclass
class ParamSet:
    """Flat parameter vector plus the layer layout it encodes.

    ``sizes`` lists layer widths input first; ``action_dim`` > 0 appends a
    free log-std vector of that length (policy networks only).
    """

    sizes: tuple[int, ...]
    flat: np.ndarray
    action_dim: int = 0

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        expected = param_count(self.sizes, self.action_dim)
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (expected,):
            raise ShapeError(f"flat vector has shape {self.flat.shape}, layout needs ({expected},)")

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        off = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = self.flat[off:off + n_in * n_out].reshape(n_in, n_out)
            off += n_in * n_out
            b = self.flat[off:off + n_out]
            off += n_out
            out.append((w, b))
        return out

    @property
    def log_std(self) -> np.ndarray:
        if not self.action_dim:
            raise AttributeError("value network has no log-std vector")
        return self.flat[-self.action_dim:]

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    def copy(self) -> "ParamSet":
        return ParamSet(self.sizes, self.flat.copy(), self.action_dim)

    def flatten(self) -> np.ndarray:
        return self.flat.copy()

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        return ParamSet(self.sizes, np.array(flat, dtype=np.float64), self.action_dim)

    def shape_header(self) -> dict:
        return {"sizes": list(self.sizes), "action_dim": self.action_dim}


def param_count(sizes, action_dim: int = 0) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])) + action_dim


def init_mlp(in_dim: int, hidden: tuple[int, ...], out_dim: int, rng: np.random.Generator,
             action_dim: int = 0, out_scale: float = 1.0, log_std_init: float = 0.0) -> ParamSet:
    """Orthogonal-ish init: scaled Gaussian weights, zero biases."""
    sizes = (in_dim, *hidden, out_dim)
    p = ParamSet(sizes, np.zeros(param_count(sizes, action_dim)), action_dim)
    layers = p.layers
    for k, (w, _) in enumerate(layers):
        scale = out_scale if k == len(layers) - 1 else 1.0
        w[...] = rng.standard_normal(w.shape) * scale / math.sqrt(w.shape[0])
    if action_dim:
        p.log_std[...] = log_std_init
    return p


def init_policy(obs_dim: int, act_dim: int, hidden, rng, log_std_init: float = -0.5) -> ParamSet:
    return init_mlp(obs_dim, tuple(hidden), act_dim, rng, action_dim=act_dim, out_scale=0.01,
                    log_std_init=log_std_init)


def init_value(obs_dim: int, hidden, rng) -> ParamSet:
    return init_mlp(obs_dim, tuple(hidden), 1, rng, out_scale=1.0)


# -- forward / backward ---------------------------------------------------------

def mlp_forward(params: ParamSet, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Tanh hidden layers, linear output. Returns (output, activations cache)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    if x.shape[1] != params.in_dim:
        raise ShapeError(f"input dim {x.shape[1]} != network input {params.in_dim}")
    acts = [x]
    layers = params.layers
    h = x
    for k, (w, b) in enumerate(layers):
        h = h @ w + b
        if k < len(layers) - 1:
            h = np.tanh(h)
        acts.append(h)
    return (h[0] if squeeze else h), acts


def mlp_backward(params: ParamSet, acts: list[np.ndarray], d_out: np.ndarray) -> np.ndarray:
    """Reverse pass: gradient of sum(d_out * output) w.r.t. the flat vector (log-std slot left 0)."""
    grad = np.zeros_like(params.flat)
    layers = params.layers
    offsets = []
    off = 0
    for w, b in layers:
        offsets.append(off)
        off += w.size + b.size
    delta = np.asarray(d_out, dtype=np.float64).reshape(acts[-1].shape)
    for k in range(len(layers) - 1, -1, -1):
        w, b = layers[k]
        h_in = acts[k]
        o = offsets[k]
        grad[o:o + w.size] = (h_in.T @ delta).ravel()
        grad[o + w.size:o + w.size + b.size] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ w.T) * (1.0 - acts[k] ** 2)
    return grad


@dataclass
class GaussianPolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray
    cache: list = field(default=None, repr=False)
    log_std_raw: np.ndarray = field(default=None, repr=False)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


def forward_policy(params: ParamSet, obs: np.ndarray) -> GaussianPolicyOutput:
    mean, cache = mlp_forward(params, obs)
    raw = params.log_std.copy()
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    return GaussianPolicyOutput(mean, np.broadcast_to(log_std, mean.shape).copy(), cache, raw)


def forward_value(params: ParamSet, obs: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(params, obs)
    return out[..., 0]


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, action: np.ndarray) -> np.ndarray:
    z = (action - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def sample_action(out: GaussianPolicyOutput, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (clamped action, log-prob of the unclamped draw, unclamped draw)."""
    eps = rng.standard_normal(out.mean.shape)
    raw = out.mean + np.exp(out.log_std) * eps
    logp = np.sum(-0.5 * eps * eps - out.log_std - 0.5 * LOG_2PI, axis=-1)
    return np.clip(raw, -1.0, 1.0), logp, raw


def policy_backward(params: ParamSet, out: GaussianPolicyOutput, d_mean: np.ndarray,
                    d_log_std: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the flat vector given upstream gradients on mean and (clamped) log-std.

    ``d_log_std`` may be per-sample (batch, act) or already summed (act,).
    """
    grad = mlp_backward(params, out.cache, d_mean)
    d_ls = np.asarray(d_log_std, dtype=np.float64)
    if d_ls.ndim == 2:
        d_ls = d_ls.sum(axis=0)
    inside = (out.log_std_raw >= LOG_STD_MIN) & (out.log_std_raw <= LOG_STD_MAX)
    grad[-params.action_dim:] = np.where(inside, d_ls, 0.0)
    return grad


def log_prob_grads(mean: np.ndarray, log_std: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample partials of the diagonal-Gaussian log-density w.r.t. mean and log-std."""
    inv_var = np.exp(-2.0 * log_std)
    diff = action - mean
    return diff * inv_var, diff * diff * inv_var - 1.0


def log_prob_and_grad(params: ParamSet, obs: np.ndarray, actions: np.ndarray,
                      weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample log-probs and the flat gradient of sum_k weights_k * log pi(a_k|o_k)."""
    out = forward_policy(params, obs)
    logp = gaussian_log_prob(out.mean, out.log_std, actions)
    dm, ds = log_prob_grads(out.mean, out.log_std, actions)
    w = np.asarray(weights, dtype=np.float64)[:, None]
    return logp, policy_backward(params, out, w * dm, w * ds)


# -- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "AdamState":
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat))


def optimizer_step(params: ParamSet, grad: np.ndarray, state: AdamState, lr: float,
                   max_grad_norm: float | None = None) -> ParamSet:
    """In-place Adam descent step on ``params``.

    A gradient with non-finite entries is logged and the step skipped, leaving
    both parameters and moments untouched.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.flat.shape:
        raise ShapeError(f"gradient shape {grad.shape} != params {params.flat.shape}")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        log.warning("non-finite gradient entries at %s; optimizer step skipped", bad[:5].tolist())
        state.skipped += 1
        return params
    if max_grad_norm is not None:
        norm = float(np.linalg.norm(grad))
        if norm > max_grad_norm:
            grad = grad * (max_grad_norm / norm)
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params.flat -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path: str | Path, nets: dict[str, ParamSet], opt: dict[str, AdamState] | None = None,
                    extra: dict | None = None, dtype=np.float64) -> None:
    """Versioned ``.npz``: a JSON header with layer shapes plus raw parameter arrays.

    ``dtype=np.float32`` writes single-precision network weights for export;
    loading always returns float64.
    """
    header = {"version": CHECKPOINT_VERSION, "nets": {k: p.shape_header() for k, p in nets.items()},
              "optimizer": {k: s.t for k, s in (opt or {}).items()}, "extra": extra or {}}
    arrays = {f"net__{k}": p.flat.astype(dtype) for k, p in nets.items()}
    for k, s in (opt or {}).items():
        arrays[f"adam_m__{k}"] = s.m
        arrays[f"adam_v__{k}"] = s.v
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, ParamSet], dict[str, AdamState], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ShapeError(f"unsupported checkpoint version {header.get('version')}")
        nets = {k: ParamSet(h["sizes"], data[f"net__{k}"].astype(np.float64), h["action_dim"])
                for k, h in header["nets"].items()}
        opt = {k: AdamState(data[f"adam_m__{k}"].copy(), data[f"adam_v__{k}"].copy(), t)
               for k, t in header["optimizer"].items()}
    return nets, opt, header["extra"]
