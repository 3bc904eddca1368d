"""Q-function multilayer perceptron in plain numpy.

Two topologies share the code:

* ``standard``: ``6K -> h1 -> h2 -> K+1`` with ReLU after each hidden layer.
* ``dueling``: shared ``6K -> h1`` layer, then a value stream ``h1 -> h2 -> 1``
  and an advantage stream ``h1 -> h2 -> K+1`` combined as
  ``Q = V + A - mean(A)``.

Weights are stored ``(fan_in, fan_out)`` so a batch ``X`` of row vectors
maps through ``X @ W + b``. Output index 0 is action -1 (no instruction);
index ``i + 1`` is "vehicle i yields".
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import math
from pathlib import Path

import numpy as np

from dqjl.env import N_FEATURES
from dqjl.errors import CheckpointError, ShapeMismatchError

ARCHITECTURES = ("standard", "dueling")
DEFAULT_HIDDEN = (128, 256)
CHECKPOINT_FORMAT = "dqjl-qnet"


def layer_shapes(arch: str, pad_size: int, hidden: tuple[int, int] = DEFAULT_HIDDEN) -> dict[str, tuple[int, ...]]:
    n_in = N_FEATURES * pad_size
    n_out = pad_size + 1
    h1, h2 = hidden
    if arch == "standard":
        return {
            "W1": (n_in, h1), "b1": (h1,),
            "W2": (h1, h2), "b2": (h2,),
            "W3": (h2, n_out), "b3": (n_out,),
        }
    if arch == "dueling":
        return {
            "W1": (n_in, h1), "b1": (h1,),
            "Wv1": (h1, h2), "bv1": (h2,),
            "Wv2": (h2, 1), "bv2": (1,),
            "Wa1": (h1, h2), "ba1": (h2,),
            "Wa2": (h2, n_out), "ba2": (n_out,),
        }
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


@dataclass
class QNetworkParams:
    arch: str
    pad_size: int
    hidden: tuple[int, int]
    weights: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0

    def __post_init__(self) -> None:
        shapes = layer_shapes(self.arch, self.pad_size, self.hidden)
        if set(shapes) != set(self.weights):
            raise ShapeMismatchError(f"parameter names {sorted(self.weights)} do not match {self.arch}")
        for name, shape in shapes.items():
            if self.weights[name].shape != shape:
                raise ShapeMismatchError(f"{name} has shape {self.weights[name].shape}, expected {shape}")
            self.adam_m.setdefault(name, np.zeros(shape))
            self.adam_v.setdefault(name, np.zeros(shape))

    @property
    def n_inputs(self) -> int:
        return N_FEATURES * self.pad_size

    @property
    def n_actions(self) -> int:
        return self.pad_size + 1

    def names(self) -> list[str]:
        return list(layer_shapes(self.arch, self.pad_size, self.hidden))

    def copy(self) -> "QNetworkParams":
        return QNetworkParams(
            arch=self.arch,
            pad_size=self.pad_size,
            hidden=self.hidden,
            weights={k: w.copy() for k, w in self.weights.items()},
            adam_m={k: w.copy() for k, w in self.adam_m.items()},
            adam_v={k: w.copy() for k, w in self.adam_v.items()},
            adam_t=self.adam_t,
        )

    def copy_weights_from(self, other: "QNetworkParams") -> None:
        for k, w in other.weights.items():
            np.copyto(self.weights[k], w)


def init_params(
    arch: str,
    pad_size: int,
    rng: np.random.Generator,
    hidden: tuple[int, int] = DEFAULT_HIDDEN,
) -> QNetworkParams:
    """Glorot-uniform weights, zero biases, zero Adam moments."""
    weights = {}
    for name, shape in layer_shapes(arch, pad_size, hidden).items():
        if len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            weights[name] = rng.uniform(-limit, limit, size=shape)
        else:
            weights[name] = np.zeros(shape)
    return QNetworkParams(arch=arch, pad_size=pad_size, hidden=tuple(hidden), weights=weights)


def _as_batch(params: QNetworkParams, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != params.n_inputs:
        raise ShapeMismatchError(f"expected input length {params.n_inputs}, got shape {x.shape}")
    return batch, single


def aggregate_dueling(value: np.ndarray, advantage: np.ndarray) -> np.ndarray:
    """``Q = V + A - mean_a A`` for a batch of ``(B, 1)`` values and ``(B, N)`` advantages."""
    return value + advantage - advantage.mean(axis=-1, keepdims=True)


def _forward_cache(params: QNetworkParams, X: np.ndarray) -> tuple[np.ndarray, dict]:
    w = params.weights
    h1 = X @ w["W1"] + w["b1"]
    a1 = np.maximum(h1, 0.0)
    if params.arch == "standard":
        h2 = a1 @ w["W2"] + w["b2"]
        a2 = np.maximum(h2, 0.0)
        q = a2 @ w["W3"] + w["b3"]
        return q, {"X": X, "h1": h1, "a1": a1, "h2": h2, "a2": a2}
    hv = a1 @ w["Wv1"] + w["bv1"]
    av = np.maximum(hv, 0.0)
    value = av @ w["Wv2"] + w["bv2"]
    ha = a1 @ w["Wa1"] + w["ba1"]
    aa = np.maximum(ha, 0.0)
    adv = aa @ w["Wa2"] + w["ba2"]
    q = aggregate_dueling(value, adv)
    return q, {"X": X, "h1": h1, "a1": a1, "hv": hv, "av": av, "ha": ha, "aa": aa}


def forward(params: QNetworkParams, state_features: np.ndarray) -> np.ndarray:
    """Q-values for one flat feature vector (length ``6K``) or a batch of them."""
    X, single = _as_batch(params, state_features)
    q, _ = _forward_cache(params, X)
    return q[0] if single else q


def dueling_forward(params: QNetworkParams, state_features: np.ndarray) -> np.ndarray:
    if params.arch != "dueling":
        raise ShapeMismatchError("dueling_forward needs dueling-shaped parameters")
    return forward(params, state_features)


def dueling_streams(params: QNetworkParams, state_features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """The value ``(B,)`` and advantage ``(B, K+1)`` streams before aggregation."""
    if params.arch != "dueling":
        raise ShapeMismatchError("dueling_streams needs dueling-shaped parameters")
    X, _ = _as_batch(params, state_features)
    _, c = _forward_cache(params, X)
    w = params.weights
    return (c["av"] @ w["Wv2"] + w["bv2"])[:, 0], c["aa"] @ w["Wa2"] + w["ba2"]


def backward(
    params: QNetworkParams,
    state_features: np.ndarray,
    action_index,
    td_target,
) -> tuple[dict[str, np.ndarray], float]:
    """Gradient of the squared TD error with the target held constant.

    ``action_index`` is the output column (0 = action -1). For a batch the
    loss is the mean over rows of ``(target - Q(s, a))**2``. Returns the
    gradient dict and the loss.
    """
    X, _ = _as_batch(params, state_features)
    actions = np.atleast_1d(np.asarray(action_index, dtype=np.int64))
    targets = np.atleast_1d(np.asarray(td_target, dtype=np.float64))
    B = X.shape[0]
    if actions.shape != (B,) or targets.shape != (B,):
        raise ShapeMismatchError("one action and one target per input row required")

    q, c = _forward_cache(params, X)
    rows = np.arange(B)
    residual = q[rows, actions] - targets
    loss = float(np.mean(residual**2))
    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * residual / B

    w = params.weights
    g: dict[str, np.ndarray] = {}
    if params.arch == "standard":
        g["W3"] = c["a2"].T @ dq
        g["b3"] = dq.sum(axis=0)
        dh2 = (dq @ w["W3"].T) * (c["h2"] > 0)
        g["W2"] = c["a1"].T @ dh2
        g["b2"] = dh2.sum(axis=0)
        da1 = dh2 @ w["W2"].T
    else:
        dvalue = dq.sum(axis=1, keepdims=True)
        dadv = dq - dq.mean(axis=1, keepdims=True)
        g["Wv2"] = c["av"].T @ dvalue
        g["bv2"] = dvalue.sum(axis=0)
        dhv = (dvalue @ w["Wv2"].T) * (c["hv"] > 0)
        g["Wv1"] = c["a1"].T @ dhv
        g["bv1"] = dhv.sum(axis=0)
        g["Wa2"] = c["aa"].T @ dadv
        g["ba2"] = dadv.sum(axis=0)
        dha = (dadv @ w["Wa2"].T) * (c["ha"] > 0)
        g["Wa1"] = c["a1"].T @ dha
        g["ba1"] = dha.sum(axis=0)
        da1 = dhv @ w["Wv1"].T + dha @ w["Wa1"].T
    dh1 = da1 * (c["h1"] > 0)
    g["W1"] = X.T @ dh1
    g["b1"] = dh1.sum(axis=0)
    return g, loss


def adam_step(
    params: QNetworkParams,
    gradients: dict[str, np.ndarray],
    lr: float = 0.0005,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    max_grad_norm: float | None = None,
) -> None:
    """Bias-corrected Adam update, in place."""
    for name, grad in gradients.items():
        if grad.shape != params.weights[name].shape:
            raise ShapeMismatchError(f"gradient for {name} has shape {grad.shape}")
    if max_grad_norm is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in gradients.values()))
        if norm > max_grad_norm:
            gradients = {k: g * (max_grad_norm / norm) for k, g in gradients.items()}

    params.adam_t += 1
    t = params.adam_t
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for name, grad in gradients.items():
        m = params.adam_m[name]
        v = params.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        params.weights[name] -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


# -- checkpoints ---------------------------------------------------------------


def _fmt_array(a: np.ndarray) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in a.ravel()) + "]"


def dumps_checkpoint(params: QNetworkParams) -> str:
    """Self-describing JSON text; every float is written with 17 significant digits."""
    for group in (params.weights, params.adam_m, params.adam_v):
        for name, a in group.items():
            if not np.all(np.isfinite(a)):
                raise CheckpointError(f"refusing to save non-finite values in {name}")
    shapes = layer_shapes(params.arch, params.pad_size, params.hidden)

    def tensors(group: dict[str, np.ndarray]) -> str:
        items = [
            f'    {{"name": "{k}", "shape": {json.dumps(list(shapes[k]))}, "values": {_fmt_array(group[k])}}}'
            for k in shapes
        ]
        return "[\n" + ",\n".join(items) + "\n  ]"

    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "arch": params.arch,
        "pad_size": params.pad_size,
        "hidden": list(params.hidden),
        "layer_shapes": {k: list(v) for k, v in shapes.items()},
        "adam_t": params.adam_t,
    }
    head = json.dumps(header, indent=2)[:-2]
    return (
        f"{head},\n"
        f'  "weights": {tensors(params.weights)},\n'
        f'  "adam_m": {tensors(params.adam_m)},\n'
        f'  "adam_v": {tensors(params.adam_v)}\n'
        "}\n"
    )


def loads_checkpoint(text: str) -> QNetworkParams:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    try:
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError("not a dqjl Q-network checkpoint")
        arch = doc["arch"]
        pad_size = int(doc["pad_size"])
        hidden = tuple(int(h) for h in doc["hidden"])
        shapes = layer_shapes(arch, pad_size, hidden)

        def read(group: list) -> dict[str, np.ndarray]:
            out = {}
            for entry in group:
                name = entry["name"]
                shape = tuple(entry["shape"])
                if shapes.get(name) != shape:
                    raise CheckpointError(f"{name} has shape {shape}, expected {shapes.get(name)}")
                values = np.asarray(entry["values"], dtype=np.float64)
                if values.size != math.prod(shape):
                    raise CheckpointError(f"{name} has {values.size} values for shape {shape}")
                if not np.all(np.isfinite(values)):
                    raise CheckpointError(f"{name} contains NaN or Inf")
                out[name] = values.reshape(shape)
            if set(out) != set(shapes):
                raise CheckpointError(f"checkpoint tensors {sorted(out)} do not match {arch}")
            return out

        return QNetworkParams(
            arch=arch,
            pad_size=pad_size,
            hidden=hidden,
            weights=read(doc["weights"]),
            adam_m=read(doc["adam_m"]),
            adam_v=read(doc["adam_v"]),
            adam_t=int(doc["adam_t"]),
        )
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc


def save(params: QNetworkParams, path: str | Path) -> None:
    Path(path).write_text(dumps_checkpoint(params))


def load(path: str | Path) -> QNetworkParams:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads_checkpoint(text)
