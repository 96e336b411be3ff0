"""Dense tanh velocity network with hand-written reverse mode, AdamW and averaging.

Parameters live in one flat float64 vector. The layout is, for each layer in
order, the weight matrix (out x in, row-major) followed by its bias, and finally
the condition-embedding table (condition_count x condition_embed_dim, row-major).
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DivergenceError,
    DomainError,
    NumericInputError,
)

# Lowest sinusoid frequency. A quarter period over [0, 1] keeps the embedding
# injective on the unit interval (integer frequencies would alias t=0 with t=1).
BASE_FREQUENCY = 0.25


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_widths: tuple = ()
    output_dim: int = 2
    activation: str = "tanh"
    time_embed_dim: int = 0
    condition_count: int = 1
    condition_embed_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.activation != "tanh":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigurationError(f"hidden widths must be >= 1, got {self.hidden_widths}")
        if self.output_dim < 1:
            raise ConfigurationError("output_dim must be >= 1")
        if self.time_embed_dim < 0 or self.time_embed_dim % 2:
            raise ConfigurationError("time_embed_dim must be a non-negative even number")
        if self.condition_count < 1 or self.condition_embed_dim < 0:
            raise ConfigurationError("condition_count must be >= 1 and condition_embed_dim >= 0")
        if self.data_dim != self.output_dim:
            raise ConfigurationError(
                f"input_dim {self.input_dim} minus embeddings gives data dim {self.data_dim}, "
                f"but output_dim is {self.output_dim}"
            )

    @classmethod
    def for_data(cls, data_dim=2, hidden_widths=(64, 64), time_embed_dim=8,
                 condition_count=1, condition_embed_dim=4):
        return cls(
            input_dim=data_dim + time_embed_dim + condition_embed_dim,
            hidden_widths=tuple(hidden_widths),
            output_dim=data_dim,
            time_embed_dim=time_embed_dim,
            condition_count=condition_count,
            condition_embed_dim=condition_embed_dim,
        )

    @property
    def data_dim(self):
        return self.input_dim - self.time_embed_dim - self.condition_embed_dim

    @property
    def layer_shapes(self):
        dims = (self.input_dim, *self.hidden_widths, self.output_dim)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def num_params(self):
        n = sum(o * i + o for o, i in self.layer_shapes)
        return n + self.condition_count * self.condition_embed_dim

    def to_dict(self):
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(f"bad network spec: {exc}") from exc


def time_embedding(t, dim):
    """Sinusoid pairs ``sin(2 pi f_i t), cos(2 pi f_i t)`` with ``f_i = 2**i / 4``."""
    t = np.asarray(t, dtype=np.float64)
    if dim == 0:
        return np.zeros(t.shape + (0,))
    freqs = BASE_FREQUENCY * 2.0 ** np.arange(dim // 2)
    ang = 2.0 * np.pi * t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def unpack(spec, theta):
    """Split a flat vector into ``([(W, b), ...], embedding_table)`` views."""
    theta = np.asarray(theta)
    if theta.shape != (spec.num_params,):
        raise ContractError(f"parameter vector has shape {theta.shape}, expected ({spec.num_params},)")
    layers, off = [], 0
    for o, i in spec.layer_shapes:
        W = theta[off:off + o * i].reshape(o, i)
        off += o * i
        b = theta[off:off + o]
        off += o
        layers.append((W, b))
    table = theta[off:].reshape(spec.condition_count, spec.condition_embed_dim)
    return layers, table


def init_params(spec, seed):
    """Glorot-uniform weights, zero biases, small Gaussian condition embeddings."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(spec.num_params)
    layers, table = unpack(spec, theta)
    for W, _ in layers:
        o, i = W.shape
        lim = math.sqrt(6.0 / (i + o))
        W[...] = rng.uniform(-lim, lim, size=W.shape)
    table[...] = rng.normal(0.0, 0.1, size=table.shape)
    return theta


class VelocityNet:
    """``v_theta(x, t, c)``; stateless apart from its NetworkSpec; parameters passed explicitly.

    All methods accept a single point ``x`` of shape ``(d,)`` or a batch ``(B, d)``
    with ``t`` and ``c`` either scalars or length-``B`` arrays.
    """

    def __init__(self, spec):
        self.spec = spec

    def init_params(self, seed):
        return init_params(self.spec, seed)

    def _inputs(self, x, t, c):
        spec = self.spec
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != spec.data_dim:
            raise ContractError(f"x has dim {x.shape[1]}, network expects {spec.data_dim}")
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        c = np.broadcast_to(np.asarray(c), (B,))
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
            raise NumericInputError("non-finite network input")
        if np.any(t <= 0.0) or np.any(t > 1.0):
            raise DomainError("t must lie in (0, 1]")
        if not np.issubdtype(c.dtype, np.integer) or np.any(c < 0) or np.any(c >= spec.condition_count):
            raise ContractError(f"condition ids must be integers in [0, {spec.condition_count})")
        return x, t, c, single

    def forward(self, theta, x, t, c):
        """Return ``(v, cache)``; ``cache`` feeds :meth:`backward`."""
        x, t, c, single = self._inputs(x, t, c)
        layers, table = unpack(self.spec, theta)
        h = np.concatenate([x, time_embedding(t, self.spec.time_embed_dim), table[c]], axis=1)
        acts = [h]
        for k, (W, b) in enumerate(layers):
            h = h @ W.T + b
            if k < len(layers) - 1:
                h = np.tanh(h)
            acts.append(h)
        cache = {"acts": acts, "c": c, "single": single, "n": theta.shape[0]}
        return (h[0] if single else h), cache

    def __call__(self, theta, x, t, c):
        return self.forward(theta, x, t, c)[0]

    def backward(self, theta, cache, upstream, per_sample=False):
        """Gradient of ``sum_b <upstream_b, v_b>`` with respect to theta.

        With ``per_sample=True`` returns a ``(B, P)`` array of per-point gradients
        instead of their sum.
        """
        spec = self.spec
        if np.shape(theta) != (cache["n"],) or cache["n"] != spec.num_params:
            raise ContractError("cache was produced with a different parameter vector shape")
        acts, c = cache["acts"], cache["c"]
        g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        B = acts[0].shape[0]
        if g.shape != (B, spec.output_dim):
            raise ContractError(f"upstream gradient shape {g.shape}, expected {(B, spec.output_dim)}")
        layers, _ = unpack(spec, theta)
        pieces = []
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            h_in = acts[k]
            if per_sample:
                pieces.append((np.einsum("bo,bi->boi", g, h_in).reshape(B, -1), g.copy()))
            else:
                pieces.append(((g.T @ h_in).ravel(), g.sum(axis=0)))
            g = g @ W
            if k > 0:
                g = g * (1.0 - acts[k] ** 2)
        pieces.reverse()
        n_c, e = spec.condition_count, spec.condition_embed_dim
        g_emb = g[:, spec.input_dim - e:]
        if per_sample:
            tab = np.zeros((B, n_c, e))
            tab[np.arange(B), c] = g_emb
            flat = [p for pair in pieces for p in pair] + [tab.reshape(B, -1)]
            return np.concatenate(flat, axis=1)
        tab = np.zeros((n_c, e))
        np.add.at(tab, c, g_emb)
        flat = [p for pair in pieces for p in pair] + [tab.ravel()]
        return np.concatenate(flat)


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0

    @classmethod
    def create(cls, n_params, **hyper):
        return cls(np.zeros(n_params), np.zeros(n_params), **hyper)


def global_norm(grad):
    return float(np.sqrt(np.dot(grad, grad)))


def adamw_step(state, theta, grad):
    """One AdamW update; returns ``(new_theta, new_state)`` without mutating inputs.

    The gradient is clipped to ``clip_norm`` (global L2 norm) before the moment
    updates and weight decay is applied multiplicatively, decoupled from Adam.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape or state.first_moment.shape != theta.shape:
        raise ContractError("optimizer state, parameters and gradient must share one shape")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient", step=state.step_count)
    norm = global_norm(grad)
    if state.clip_norm is not None and norm > state.clip_norm:
        grad = grad * (state.clip_norm / norm)
    k = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** k)
    v_hat = v / (1.0 - state.beta2 ** k)
    new_theta = theta * (1.0 - state.lr * state.weight_decay) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_theta, replace(state, first_moment=m, second_moment=v, step_count=k)


def average_params(models, weights=None):
    """Convex combination of parameter vectors (uniform when ``weights`` is None)."""
    if not models:
        raise ContractError("need at least one parameter vector")
    arrays = [np.asarray(m, dtype=np.float64) for m in models]
    if any(a.ndim != 1 or a.shape != arrays[0].shape for a in arrays):
        raise ContractError("parameter vectors must share one flat length")
    if weights is None:
        weights = np.full(len(arrays), 1.0 / len(arrays))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(arrays),):
        raise ContractError("one weight per model required")
    if abs(weights.sum() - 1.0) > 1e-12:
        raise ContractError(f"weights sum to {weights.sum()!r}, not 1")
    # identical inputs return an exact copy; a 1/3 + 1/3 + 1/3 sum would round
    if all(np.array_equal(a, arrays[0]) for a in arrays[1:]):
        return arrays[0].copy()
    out = np.zeros_like(arrays[0])
    for w, a in zip(weights, arrays):
        out += w * a
    return out


# --- checkpoints -----------------------------------------------------------------

def atomic_write_text(path, text):
    """Write via a temp file in the target directory, then rename into place."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, spec, theta, step_count=0):
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise NumericInputError("refusing to checkpoint non-finite parameters")
    payload = {"spec": spec.to_dict(), "values": [float(v) for v in theta], "step_count": int(step_count)}
    atomic_write_text(path, json.dumps(payload))


def load_checkpoint(path):
    """Return ``(spec, theta, step_count)``."""
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    spec = NetworkSpec.from_dict(payload["spec"])
    theta = np.array(payload["values"], dtype=np.float64)
    if theta.shape != (spec.num_params,):
        raise ContractError(f"checkpoint holds {theta.size} values, spec needs {spec.num_params}")
    return spec, theta, int(payload.get("step_count", 0))
