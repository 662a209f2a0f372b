"""A small differentiable CNN classifier with hand-written backpropagation.

Architecture: conv(3->8, 3x3, same) -> ReLU -> 2x2 mean-pool ->
conv(8->16, 3x3, same) -> ReLU -> 2x2 mean-pool -> flatten -> dense(-> C).
One parameter set serves every image role in a training step. Mean pooling
(rather than max) keeps the loss surface smooth for finite-difference
verification, and everything runs in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from . import losses

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "dense_w", "dense_b")

_MAGIC = b"MVDA"
_VERSION = 1

# fixed forward order of the image roles a training step may contain
ROLE_ORDER = ("src_query", "src_view", "tgt_query", "tgt_self", "tgt_view")


@dataclass
class ModelParams:
    input_side: int
    class_count: int
    seed: int
    arrays: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.input_side,
            self.class_count,
            self.seed,
            {k: v.copy() for k, v in self.arrays.items()},
        )


@dataclass
class ForwardCache:
    x: np.ndarray
    z1: np.ndarray
    p1: np.ndarray
    z2: np.ndarray
    flat: np.ndarray


def init_params(input_side: int, class_count: int, seed: int) -> ModelParams:
    """He-style fan-in scaled uniform weights, zero biases."""
    if input_side % 4 != 0 or input_side < 8:
        raise ValueError(f"input_side must be a multiple of 4 and >= 8, got {input_side}")
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    rng = np.random.default_rng(seed)
    feat = 16 * (input_side // 4) ** 2

    def he_uniform(shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape)

    arrays = {
        "conv1_w": he_uniform((8, 3, 3, 3), 3 * 9),
        "conv1_b": np.zeros(8),
        "conv2_w": he_uniform((16, 8, 3, 3), 8 * 9),
        "conv2_b": np.zeros(16),
        "dense_w": he_uniform((feat, class_count), feat),
        "dense_b": np.zeros(class_count),
    }
    return ModelParams(input_side, class_count, seed, arrays)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.arrays.items()}


def _conv_same(x, w, b):
    n, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd))
    for kh in range(3):
        for kw in range(3):
            out += np.einsum(
                "nihw,oi->nohw", xp[:, :, kh:kh + h, kw:kw + wd], w[:, :, kh, kw]
            )
    return out + b[None, :, None, None]


def _conv_same_backward(x, w, dz):
    n, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for kh in range(3):
        for kw in range(3):
            patch = xp[:, :, kh:kh + h, kw:kw + wd]
            dw[:, :, kh, kw] = np.einsum("nohw,nihw->oi", dz, patch)
            dxp[:, :, kh:kh + h, kw:kw + wd] += np.einsum(
                "nohw,oi->nihw", dz, w[:, :, kh, kw]
            )
    db = dz.sum(axis=(0, 2, 3))
    return dw, db, dxp[:, :, 1:h + 1, 1:wd + 1]


def _meanpool2(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _meanpool2_backward(dy):
    return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) / 4.0


def forward(params: ModelParams, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Logits (N, C) for a batch (N, 3, S, S), plus the backward cache."""
    if batch.ndim != 4 or batch.shape[1] != 3 or batch.shape[2] != params.input_side \
            or batch.shape[3] != params.input_side:
        raise ValueError(f"batch shape {batch.shape} does not match input side {params.input_side}")
    a = params.arrays
    z1 = _conv_same(batch, a["conv1_w"], a["conv1_b"])
    p1 = _meanpool2(np.maximum(z1, 0.0))
    z2 = _conv_same(p1, a["conv2_w"], a["conv2_b"])
    p2 = _meanpool2(np.maximum(z2, 0.0))
    flat = p2.reshape(batch.shape[0], -1)
    logits = flat @ a["dense_w"] + a["dense_b"]
    return logits, ForwardCache(batch, z1, p1, z2, flat)


def backward(params: ModelParams, cache: ForwardCache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of the scalar loss w.r.t. every parameter."""
    if dlogits.shape != (cache.flat.shape[0], params.class_count):
        raise ValueError(f"dlogits shape {dlogits.shape} does not match cache")
    a = params.arrays
    grads = {}
    grads["dense_w"] = cache.flat.T @ dlogits
    grads["dense_b"] = dlogits.sum(axis=0)
    dflat = dlogits @ a["dense_w"].T
    s4 = params.input_side // 4
    dp2 = dflat.reshape(-1, 16, s4, s4)
    da2 = _meanpool2_backward(dp2)
    dz2 = da2 * (cache.z2 > 0)
    grads["conv2_w"], grads["conv2_b"], dp1 = _conv_same_backward(cache.p1, a["conv2_w"], dz2)
    da1 = _meanpool2_backward(dp1)
    dz1 = da1 * (cache.z1 > 0)
    grads["conv1_w"], grads["conv1_b"], _ = _conv_same_backward(cache.x, a["conv1_w"], dz1)
    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax; works on a single row or a batch of rows."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --- composite loss over role batches -------------------------------------

def _forward_roles(params, roles):
    names = [r for r in ROLE_ORDER if r in roles and roles[r] is not None]
    batch = np.concatenate([roles[r] for r in names], axis=0)
    logits, cache = forward(params, batch)
    probs = softmax(logits)
    slices, start = {}, 0
    for r in names:
        n = roles[r].shape[0]
        slices[r] = slice(start, start + n)
        start += n
    return logits, probs, slices, cache


def _role_predictions(probs, slices):
    pick = lambda r: probs[slices[r]] if r in slices else None
    return losses.RolePredictions(
        src_query=pick("src_query"),
        src_view=pick("src_view"),
        tgt_query=pick("tgt_query"),
        tgt_self=pick("tgt_self"),
        tgt_view=pick("tgt_view"),
    )


def composite_loss(params, roles, labels, config) -> float:
    """Scalar total loss of a role batch, recomputing references from params."""
    _, probs, slices, _ = _forward_roles(params, roles)
    breakdown = losses.total_loss(_role_predictions(probs, slices), labels, config)
    return breakdown.total


def composite_loss_and_grads(params, roles, labels, config):
    """(LossBreakdown, parameter gradients) with reference rows held constant."""
    _, probs, slices, cache = _forward_roles(params, roles)
    preds = _role_predictions(probs, slices)
    breakdown, dprob_roles = losses.total_loss_logit_grads(preds, labels, config)
    dlogits = np.zeros_like(probs)
    for role, grad in dprob_roles.items():
        if grad is not None:
            dlogits[slices[role]] += grad
    return breakdown, backward(params, cache, dlogits)


def grad_check(
    params: ModelParams,
    roles: dict,
    labels: np.ndarray,
    config,
    eps: float = 1e-5,
    num_coords: int = 120,
    seed: int = 0,
    grads: dict | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``num_coords`` parameter coordinates; relative error is
    |g_a - g_n| / max(1e-8, |g_a| + |g_n|). Pass ``grads`` to check a
    precomputed (possibly corrupted) gradient instead of the analytic one.
    """
    if grads is None:
        _, grads = composite_loss_and_grads(params, roles, labels, config)
    coords = [(name, idx) for name in PARAM_NAMES for idx in range(params.arrays[name].size)]
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(coords), size=min(num_coords, len(coords)), replace=False)
    worst = 0.0
    work = params.copy()
    for ci in picked:
        name, idx = coords[ci]
        flat = work.arrays[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + eps
        lo_hi = composite_loss(work, roles, labels, config)
        flat[idx] = orig - eps
        lo_lo = composite_loss(work, roles, labels, config)
        flat[idx] = orig
        if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
            raise ValueError("non-finite loss during finite differencing")
        g_n = (lo_hi - lo_lo) / (2.0 * eps)
        g_a = grads[name].reshape(-1)[idx]
        rel = abs(g_a - g_n) / max(1e-8, abs(g_a) + abs(g_n))
        worst = max(worst, rel)
    return worst


# --- checkpoint serialization ----------------------------------------------

def save_checkpoint(path: str | Path, params: ModelParams, extra_meta: dict | None = None) -> None:
    """Versioned binary layout: magic, version, JSON meta, shape table, f64 LE data."""
    meta = {
        "input_side": params.input_side,
        "class_count": params.class_count,
        "seed": params.seed,
    }
    if extra_meta:
        meta.update(extra_meta)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(PARAM_NAMES)))
        for name in PARAM_NAMES:
            arr = params.arrays[name]
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            arrays[name] = data.astype(np.float64)
    missing = set(PARAM_NAMES) - set(arrays)
    if missing:
        raise DataError(f"{path}: missing parameter arrays {sorted(missing)}")
    params = ModelParams(meta["input_side"], meta["class_count"], meta.get("seed", 0), arrays)
    return params, meta
