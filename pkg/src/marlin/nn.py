"""Small dense networks in float64 numpy: init, forward, backprop and Adam.

Only what MAPPO needs is here.  Losses are expressed as *heads*: callables
mapping the network output to ``(loss, dloss/doutput)``, which
:func:`value_and_grad` chains back through the layers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

CHECKPOINT_VERSION = 1


class InvalidShape(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class NonFiniteUpdate(FloatingPointError):
    pass


@dataclass
class MlpParams:
    """Weights are ``(out, in)``; tanh on hidden layers, identity on the output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise InvalidShape("weights and biases differ in count")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise InvalidShape(f"layer {k}: weight {W.shape} / bias {b.shape}")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise InvalidShape(f"layer {k} input {W.shape[1]} != previous output {self.weights[k - 1].shape[0]}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "MlpParams":
        arrays = list(arrays)
        return cls(arrays[0::2], arrays[1::2])

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(W) for W in self.weights], [np.zeros_like(b) for b in self.biases])

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


# Gradients share the parameter layout.
Gradients = MlpParams


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def mlp_init(layer_sizes, seed: int) -> MlpParams:
    """Orthogonal weights (gain sqrt(2) hidden, 0.01 output) and zero biases."""
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise InvalidShape(f"bad layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = 0.01 if k == len(sizes) - 2 else np.sqrt(2.0)
        weights.append(_orthogonal(rng, n_out, n_in, gain))
        biases.append(np.zeros(n_out))
    return MlpParams(weights, biases)


def forward_cached(params: MlpParams, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass that also returns every layer input for backprop."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != params.weights[0].shape[1]:
        raise ShapeMismatch(f"input width {h.shape[-1]} != {params.weights[0].shape[1]}")
    acts = [h]
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W.T + b
        if k < last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def forward(params: MlpParams, x) -> np.ndarray:
    return forward_cached(params, x)[0]


def backward(params: MlpParams, acts: list[np.ndarray], d_out: np.ndarray) -> Gradients:
    """Reverse-mode pass given dL/d(output); ``acts`` comes from :func:`forward_cached`."""
    n = len(params.weights)
    dW: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    db: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    delta = np.asarray(d_out, dtype=np.float64)
    for k in range(n - 1, -1, -1):
        h_in = acts[k]
        if delta.ndim == 1:
            dW[k] = np.outer(delta, h_in)
            db[k] = delta.copy()
        else:
            dW[k] = delta.T @ h_in
            db[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ params.weights[k]) * (1.0 - h_in**2)
    return MlpParams(dW, db)


Head = Callable[[np.ndarray], tuple[float, np.ndarray]]


def value_and_grad(params: MlpParams, x, head: Head) -> tuple[float, Gradients]:
    """Loss and exact parameter gradients of ``head(forward(params, x))``."""
    out, acts = forward_cached(params, x)
    loss, d_out = head(out)
    return float(loss), backward(params, acts, d_out)


def half_sq_norm(out: np.ndarray) -> tuple[float, np.ndarray]:
    return 0.5 * float(np.sum(out**2)), out.copy()


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: MlpParams
    v: MlpParams
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)


def adam_step(params: MlpParams, grads: Gradients, state: AdamState) -> tuple[MlpParams, AdamState]:
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient {g.shape} vs parameter {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    out = MlpParams.from_arrays(new_p)
    if not out.all_finite():
        raise NonFiniteUpdate("Adam step produced non-finite parameters")
    new_state = AdamState(MlpParams.from_arrays(new_m), MlpParams.from_arrays(new_v), t, state.lr, b1, b2, state.eps)
    return out, new_state


# ---------------------------------------------------------------------------
# categorical policy helpers

def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def categorical_sample(logits, rng: np.random.Generator) -> tuple[int, float]:
    """Draw one index from softmax(logits); returns ``(index, log_prob)``."""
    logp = log_softmax(logits)
    cdf = np.cumsum(np.exp(logp))
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    i = min(i, len(cdf) - 1)
    return i, float(logp[i])


# ---------------------------------------------------------------------------
# checkpoints

def save_arrays(path_or_file, named: dict[str, np.ndarray], meta: dict[str, int] | None = None) -> None:
    payload = {"__version__": np.array(CHECKPOINT_VERSION)}
    for k, v in (meta or {}).items():
        payload[f"__meta__{k}"] = np.array(v)
    payload.update(named)
    np.savez(path_or_file, **payload)


def load_arrays(path_or_file) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    with np.load(path_or_file, allow_pickle=False) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        named = {k: data[k].copy() for k in data.files if not k.startswith("__")}
        meta = {k[len("__meta__"):]: int(data[k]) for k in data.files if k.startswith("__meta__")}
    return named, meta


def params_to_arrays(prefix: str, params: MlpParams) -> dict[str, np.ndarray]:
    return {f"{prefix}.{i:03d}": a for i, a in enumerate(params.arrays())}


def params_from_arrays(prefix: str, named: dict[str, np.ndarray]) -> MlpParams:
    keys = sorted(k for k in named if k.startswith(prefix + "."))
    return MlpParams.from_arrays(named[k] for k in keys)


def adam_to_arrays(prefix: str, state: AdamState) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    named = {}
    named.update(params_to_arrays(prefix + ".m", state.m))
    named.update(params_to_arrays(prefix + ".v", state.v))
    named[prefix + ".hyper"] = np.array([state.lr, state.beta1, state.beta2, state.eps])
    return named, {prefix + ".t": state.t}


def adam_from_arrays(prefix: str, named: dict[str, np.ndarray], meta: dict[str, int]) -> AdamState:
    lr, b1, b2, eps = (float(v) for v in named[prefix + ".hyper"])
    return AdamState(
        params_from_arrays(prefix + ".m", named),
        params_from_arrays(prefix + ".v", named),
        meta[prefix + ".t"],
        lr, b1, b2, eps,
    )


def save_params(path_or_file, params: MlpParams, state: AdamState | None = None) -> None:
    named = params_to_arrays("params", params)
    meta = {}
    if state is not None:
        extra, meta = adam_to_arrays("adam", state)
        named.update(extra)
    save_arrays(path_or_file, named, meta)


def load_params(path_or_file) -> tuple[MlpParams, AdamState | None]:
    named, meta = load_arrays(path_or_file)
    params = params_from_arrays("params", named)
    state = adam_from_arrays("adam", named, meta) if "adam.hyper" in named else None
    return params, state

