"""Feed-forward ranking network with hand-written backprop.

Three input layouts share one network: ``generic`` scores the segment alone,
``phd_ca`` sees the segment concatenated with the mean history profile, and
``phd_ca_ed`` additionally gets the k nearest history distances.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .vecmath import DEFAULT_K, distance_feature_matrix

VARIANTS = ("generic", "phd_ca", "phd_ca_ed")
ACTIVATIONS = ("relu", "selu")
SELU_LAMBDA = 1.05070098
SELU_ALPHA = 1.67326324
INIT_SCALE = np.sqrt(3.0)  # U(-c/sqrt(fan_in), c/sqrt(fan_in)) has variance 1/fan_in
BN_EPS = 1e-5
BN_MOMENTUM = 0.99
MAX_HIDDEN = 512
CHECKPOINT_MAGIC = b"PHDFNN01"


@dataclass(frozen=True)
class FnnArchitecture:
    """Layer layout. Dropout values are drop probabilities."""

    feature_dim: int
    variant: str = "phd_ca"
    hidden_sizes: tuple[int, ...] = (512, 64)
    activation: str = "relu"
    dropout_input: float = 0.0
    dropout_hidden: float = 0.0
    batch_norm: bool = False
    distance_k: int = DEFAULT_K
    distance_pad: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        hs = self.hidden_sizes
        if any(h <= 0 or h > MAX_HIDDEN for h in hs):
            raise ValueError(f"hidden sizes must be in [1, {MAX_HIDDEN}], got {hs}")
        if any(b > a for a, b in zip(hs, hs[1:])):
            raise ValueError(f"hidden sizes must be non-increasing, got {hs}")
        for p in (self.dropout_input, self.dropout_hidden):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout must be in [0, 1), got {p}")

    @property
    def input_dim(self) -> int:
        f = self.feature_dim
        return {"generic": f, "phd_ca": 2 * f, "phd_ca_ed": 2 * f + self.distance_k}[self.variant]

    @property
    def uses_history(self) -> bool:
        return self.variant != "generic"

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_sizes, 1]


@dataclass(eq=False)
class FnnModel:
    arch: FnnArchitecture
    params: dict[str, np.ndarray]
    running: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.arch.hidden_sizes) + 1

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"W{i}", f"b{i}"]
            if self.arch.batch_norm and i < self.n_layers - 1:
                names += [f"gamma{i}", f"beta{i}"]
        return names

    def copy(self) -> "FnnModel":
        return copy.deepcopy(self)


def init_fnn(arch: FnnArchitecture, seed: int = 0) -> FnnModel:
    rng = np.random.default_rng(seed)
    sizes = arch.layer_sizes
    params: dict[str, np.ndarray] = {}
    running: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = INIT_SCALE / np.sqrt(fan_in)
        params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
        if arch.batch_norm and i < len(sizes) - 2:
            params[f"gamma{i}"] = np.ones(fan_out)
            params[f"beta{i}"] = np.zeros(fan_out)
            running[f"mean{i}"] = np.zeros(fan_out)
            running[f"var{i}"] = np.ones(fan_out)
    model = FnnModel(arch, params, running, seed)
    return model


# ---------------------------------------------------------------------------
# input assembly


def assemble_inputs(arch: FnnArchitecture, segments, history=None, distances=None) -> np.ndarray:
    """Stack model inputs for segment features ``segments`` (n, F)."""
    S = np.atleast_2d(np.asarray(segments, dtype=np.float64))
    if S.shape[1] != arch.feature_dim:
        raise ValueError(f"segment dimension {S.shape[1]} != feature_dim {arch.feature_dim}")
    if arch.variant == "generic":
        return S
    if history is None:
        raise ValueError(f"variant {arch.variant} needs a user history")
    P = np.broadcast_to(history.profile, S.shape)
    if arch.variant == "phd_ca":
        return np.hstack([S, P])
    if distances is None:
        distances = distance_feature_matrix(S, history, arch.distance_k, arch.distance_pad)
    D = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    if D.shape != (S.shape[0], arch.distance_k):
        raise ValueError(f"distance features shape {D.shape}, expected {(S.shape[0], arch.distance_k)}")
    return np.hstack([S, P, D])


# ---------------------------------------------------------------------------
# forward / backward


def _act(y, kind):
    if kind == "relu":
        return np.maximum(y, 0.0)
    return SELU_LAMBDA * np.where(y > 0, y, SELU_ALPHA * np.expm1(np.minimum(y, 0.0)))


def _act_grad(y, kind):
    if kind == "relu":
        return (y > 0).astype(y.dtype)
    return SELU_LAMBDA * np.where(y > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(y, 0.0)))


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {where}")


def forward_batch(model: FnnModel, X, train_mode: bool = False, dropout_seed: int | None = None,
                  cache: dict | None = None) -> np.ndarray:
    """Scores for rows of ``X``. In train mode dropout and batch statistics are used."""
    arch = model.arch
    p = model.params
    a = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if a.shape[1] != arch.input_dim:
        raise ValueError(f"input dimension {a.shape[1]} != expected {arch.input_dim}")
    rng = np.random.default_rng(dropout_seed) if train_mode else None
    if cache is not None:
        cache["layers"] = []
        cache["batch_stats"] = {}
    if train_mode and arch.dropout_input > 0:
        keep = 1.0 - arch.dropout_input
        in_mask = (rng.random(a.shape) < keep) / keep
        a = a * in_mask
    else:
        in_mask = None
    if cache is not None:
        cache["in_mask"] = in_mask
    last = model.n_layers - 1
    for i in range(model.n_layers):
        W, b = p[f"W{i}"], p[f"b{i}"]
        z = a @ W + b
        if i == last:
            _check_finite(z, "output layer")
            if cache is not None:
                cache["layers"].append({"a": a})
            return z[:, 0]
        entry = {"a": a}
        if arch.batch_norm:
            if train_mode:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                if cache is not None:
                    cache["batch_stats"][i] = (mu, var)
            else:
                mu = model.running[f"mean{i}"]
                var = model.running[f"var{i}"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv_std
            y = p[f"gamma{i}"] * zhat + p[f"beta{i}"]
            entry.update(zhat=zhat, inv_std=inv_std)
        else:
            y = z
        h = _act(y, arch.activation)
        _check_finite(h, f"hidden layer {i}")
        if train_mode and arch.dropout_hidden > 0:
            keep = 1.0 - arch.dropout_hidden
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        else:
            mask = None
        entry.update(y=y, mask=mask)
        if cache is not None:
            cache["layers"].append(entry)
        a = h
    raise AssertionError("unreachable")


def _backward(model: FnnModel, cache: dict, dout: np.ndarray) -> dict[str, np.ndarray]:
    arch = model.arch
    p = model.params
    grads: dict[str, np.ndarray] = {}
    layers = cache["layers"]
    delta = dout[:, None]
    for i in range(model.n_layers - 1, -1, -1):
        entry = layers[i]
        a = entry["a"]
        if i < model.n_layers - 1:
            # delta is dL/dh for this hidden layer's output
            if entry["mask"] is not None:
                delta = delta * entry["mask"]
            delta = delta * _act_grad(entry["y"], arch.activation)
            if arch.batch_norm:
                zhat = entry["zhat"]
                grads[f"gamma{i}"] = np.sum(delta * zhat, axis=0)
                grads[f"beta{i}"] = np.sum(delta, axis=0)
                dzhat = delta * p[f"gamma{i}"]
                n = dzhat.shape[0]
                delta = (entry["inv_std"] / n) * (
                    n * dzhat - dzhat.sum(axis=0) - zhat * np.sum(dzhat * zhat, axis=0)
                )
        grads[f"W{i}"] = a.T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        _check_finite(grads[f"W{i}"], f"gradient of layer {i}")
        delta = delta @ p[f"W{i}"].T
    return grads


def forward(model: FnnModel, segment, history=None, distances=None, train_mode: bool = False,
            dropout_seed: int | None = None) -> float:
    X = assemble_inputs(model.arch, segment, history,
                        None if distances is None else np.atleast_2d(distances))
    return float(forward_batch(model, X, train_mode, dropout_seed)[0])


def score_segment(model: FnnModel, segment, history=None, distances=None) -> float:
    return forward(model, segment, history, distances, train_mode=False)


def score_segments(model: FnnModel, segments, history=None) -> np.ndarray:
    return forward_batch(model, assemble_inputs(model.arch, segments, history))


def pairwise_loss(score_pos, score_neg, margin: float = 1.0):
    """Margin hinge on the score difference; works on scalars or arrays."""
    loss = np.maximum(0.0, margin - (np.asarray(score_pos) - np.asarray(score_neg)))
    return float(loss) if np.ndim(loss) == 0 else loss


def _split_batch(pair_batch):
    if isinstance(pair_batch, tuple) and len(pair_batch) == 2 and np.ndim(pair_batch[0]) == 2:
        Xp, Xn = pair_batch
    else:
        Xp = np.array([np.asarray(a, dtype=np.float64) for a, _ in pair_batch])
        Xn = np.array([np.asarray(b, dtype=np.float64) for _, b in pair_batch])
    Xp = np.asarray(Xp, dtype=np.float64)
    Xn = np.asarray(Xn, dtype=np.float64)
    if len(Xp) == 0 or Xp.shape != Xn.shape:
        raise ValueError("pair batch must be non-empty with matching shapes")
    return Xp, Xn


def batch_loss(model: FnnModel, pair_batch, dropout_seed: int | None = None, margin: float = 1.0,
               train_mode: bool = True) -> float:
    Xp, Xn = _split_batch(pair_batch)
    s = forward_batch(model, np.vstack([Xp, Xn]), train_mode, dropout_seed)
    B = len(Xp)
    return float(np.mean(pairwise_loss(s[:B], s[B:], margin)))


def gradients(model: FnnModel, pair_batch, dropout_seed: int | None = None, margin: float = 1.0,
              return_cache: bool = False):
    """Loss and gradient of the mean pairwise hinge over a batch.

    Positives and negatives go through one train-mode forward pass, so with
    batch norm they share batch statistics. Returns ``(loss, grads)``.
    """
    Xp, Xn = _split_batch(pair_batch)
    B = len(Xp)
    cache: dict = {}
    s = forward_batch(model, np.vstack([Xp, Xn]), True, dropout_seed, cache)
    margins = margin - (s[:B] - s[B:])
    active = (margins > 0).astype(np.float64)
    loss = float(np.mean(np.maximum(margins, 0.0)))
    dout = np.concatenate([-active, active]) / B
    grads = _backward(model, cache, dout)
    if return_cache:
        return loss, grads, cache
    return loss, grads


def update_running_stats(model: FnnModel, cache: dict) -> None:
    for i, (mu, var) in cache.get("batch_stats", {}).items():
        model.running[f"mean{i}"] = BN_MOMENTUM * model.running[f"mean{i}"] + (1 - BN_MOMENTUM) * mu
        model.running[f"var{i}"] = BN_MOMENTUM * model.running[f"var{i}"] + (1 - BN_MOMENTUM) * var


# ---------------------------------------------------------------------------
# checkpoint


def _tensor_order(model: FnnModel) -> list[tuple[str, np.ndarray]]:
    out = [(n, model.params[n]) for n in model.param_names()]
    for i in range(model.n_layers - 1):
        if model.arch.batch_norm:
            out += [(f"mean{i}", model.running[f"mean{i}"]), (f"var{i}", model.running[f"var{i}"])]
    return out


def save_fnn(model: FnnModel, path) -> None:
    desc = asdict(model.arch)
    desc["hidden_sizes"] = list(desc["hidden_sizes"])
    desc["seed"] = model.seed
    blob = json.dumps(desc, sort_keys=True).encode()
    tensors = _tensor_order(model)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for _, t in tensors:
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_fnn(path) -> FnnModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an FNN checkpoint")
    (n,) = struct.unpack_from("<I", raw, 8)
    desc = json.loads(raw[12:12 + n])
    seed = desc.pop("seed", 0)
    desc["hidden_sizes"] = tuple(desc["hidden_sizes"])
    model = init_fnn(FnnArchitecture(**desc), seed)
    off = 12 + n
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    names = [name for name, _ in _tensor_order(model)]
    if count != len(names):
        raise ValueError(f"{path}: expected {len(names)} tensors, found {count}")
    for name in names:
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
        off += size
        (model.params if name in model.params else model.running)[name] = arr
    return model
