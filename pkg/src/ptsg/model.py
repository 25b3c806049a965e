"""Feature fusion, the anchor-seeded event detector, the plateau mask and masked pooling.

All forward functions take batched arrays/tensors (leading batch axis) and a
mapping ``name -> Tensor`` of parameters, so the same code runs on a tape for
training and on constants for inference.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

CKPT_MAGIC = b"cu-ckpt/1\n"


@dataclass(frozen=True)
class ModelDims:
    dim_video: int
    dim_query: int
    dim: int = 16
    hidden: int = 64
    bins: int = 16  # anchor-relative pooling bins seen by the detector

    def __post_init__(self):
        if min(self.dim_video, self.dim_query, self.dim, self.hidden, self.bins) <= 0:
            raise ValueError(f"dims must be positive: {self}")


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_fusion(dims: ModelDims, rng, prefix="") -> dict[str, np.ndarray]:
    D = dims.dim
    p = {
        "proj_v_w": _uniform(rng, (dims.dim_video, D), dims.dim_video),
        "proj_v_b": _uniform(rng, (D,), dims.dim_video),
        "proj_q_w": _uniform(rng, (dims.dim_query, D), dims.dim_query),
        "proj_q_b": _uniform(rng, (D,), dims.dim_query),
    }
    for block in ("v2q", "q2v"):
        for role in ("q", "k", "v"):
            p[f"{block}_{role}"] = _uniform(rng, (D, D), D)
    return {prefix + k: v for k, v in p.items()}


def init_params(dims: ModelDims, seed: int) -> dict[str, np.ndarray]:
    """Implicit-stage parameters: fusion, detector MLP and raw mask sharpness."""
    rng = np.random.default_rng(seed)
    p = init_fusion(dims, rng)
    fan = (dims.bins + 1) * dims.dim
    p["det_w1"] = _uniform(rng, (fan, dims.hidden), fan)
    p["det_b1"] = _uniform(rng, (dims.hidden,), fan)
    p["det_w2"] = _uniform(rng, (dims.hidden, 2), dims.hidden)
    p["det_b2"] = _uniform(rng, (2,), dims.hidden)
    # softplus(log(e - 1)) == 1
    p["mask_k_raw"] = np.array(math.log(math.e - 1.0))
    return p


def constants(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def on_tape(tape: tc.Tape, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: tape.leaf(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# fusion


@dataclass
class FusedFeatures:
    V: Tensor  # B x T x D
    Q: Tensor  # B x M x D
    q: Tensor  # B x D, mean over query tokens
    v_vd: Tensor  # B x D, mean over frames
    attn_v: Tensor  # B x T x M
    attn_q: Tensor  # B x M x T


def _attend(x, ctx, wq, wk, wv):
    d = wq.shape[-1]
    scores = (x @ wq) @ (ctx @ wk).T * (1.0 / math.sqrt(d))
    attn = tc.softmax(scores)
    return x + attn @ (ctx @ wv), attn


def fuse(video, query, params: dict[str, Tensor], prefix="") -> FusedFeatures:
    """Project both streams, then cross-attend each to the other with a residual."""
    video, query = tc.as_tensor(video), tc.as_tensor(query)
    if video.data.ndim != 3 or query.data.ndim != 3 or video.shape[0] != query.shape[0]:
        raise tc.ShapeError(f"fuse expects B x T x D_v and B x M x D_q, got {video.shape}, {query.shape}")
    P = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    if video.shape[-1] != P["proj_v_w"].shape[0] or query.shape[-1] != P["proj_q_w"].shape[0]:
        raise tc.ShapeError(
            f"feature dims ({video.shape[-1]}, {query.shape[-1]}) do not match the model "
            f"({P['proj_v_w'].shape[0]}, {P['proj_q_w'].shape[0]})")
    vp = video @ P["proj_v_w"] + P["proj_v_b"]
    qp = query @ P["proj_q_w"] + P["proj_q_b"]
    V, attn_v = _attend(vp, qp, P["v2q_q"], P["v2q_k"], P["v2q_v"])
    Q, attn_q = _attend(qp, vp, P["q2v_q"], P["q2v_k"], P["q2v_v"])
    return FusedFeatures(V, Q, Q.mean(axis=-2), V.mean(axis=-2), attn_v, attn_q)


# ---------------------------------------------------------------------------
# event detector


@dataclass
class EventPrediction:
    delta: Tensor  # (B,) center offset from the anchor, frames
    width: Tensor  # (B,) event width, frames
    center: Tensor
    start: Tensor
    end: Tensor
    T: int

    def clamped(self) -> np.ndarray:
        """B x 2 array of export intervals inside [0, T] with width >= 1 frame."""
        return clamp_intervals(self.start.data, self.end.data, self.T)


def clamp_intervals(start, end, T) -> np.ndarray:
    s = np.clip(np.asarray(start, dtype=np.float64), 0.0, T)
    e = np.clip(np.asarray(end, dtype=np.float64), 0.0, T)
    short = (e - s) < 1.0
    mid = (s + e) / 2
    s = np.where(short, np.clip(mid - 0.5, 0.0, T - 1.0), s)
    e = np.where(short, s + 1.0, e)
    return np.stack([s, e], axis=-1)


def anchor_bins(anchors, T: int, bins: int) -> np.ndarray:
    """B x bins x T averaging matrix over frame offsets relative to each anchor.

    Frame t falls into the bin of its offset ``(t + 0.5 - anchor) / T`` split
    evenly over (-1, 1). Empty bins average to zero.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1)
    off = (np.arange(T) + 0.5)[None, :] - anchors[:, None]
    idx = np.clip(np.floor((off / T + 1.0) / 2.0 * bins), 0, bins - 1).astype(int)
    P = np.zeros((anchors.size, bins, T))
    b_idx, t_idx = np.nonzero(np.ones_like(idx, dtype=bool))
    P[b_idx, idx.reshape(-1), t_idx] = 1.0
    counts = P.sum(axis=-1, keepdims=True)
    return P / np.maximum(counts, 1.0)


def detect_event(V: Tensor, anchors, params: dict[str, Tensor], T: int) -> EventPrediction:
    """Offset and width around the seed anchor from anchor-relative pooled frames."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1)
    if np.any(anchors < 0) or np.any(anchors > T):
        raise ValueError(f"anchor outside [0, {T}]: {anchors}")
    B, D = V.shape[0], V.shape[-1]
    bins = params["det_w1"].shape[0] // D - 1
    pooled = (tc.Tensor(anchor_bins(anchors, T, bins)) @ V).reshape(B, bins * D)
    x = tc.concat([pooled, V.mean(axis=1)], axis=1)
    h = tc.tanh(x @ params["det_w1"] + params["det_b1"])
    raw = h @ params["det_w2"] + params["det_b2"]
    return event_from_raw(raw[:, 0], raw[:, 1], anchors, T)


def event_from_raw(delta_raw: Tensor, width_raw: Tensor, anchors, T: int) -> EventPrediction:
    delta = tc.tanh(delta_raw) * (T / 2.0)
    width = tc.sigmoid(width_raw) * float(T) + 1.0
    center = delta + tc.Tensor(np.asarray(anchors, dtype=np.float64))
    half = width * 0.5
    return EventPrediction(delta, width, center, center - half, center + half, T)


def sharpness(params: dict[str, Tensor]) -> Tensor:
    return tc.softplus(params["mask_k_raw"])


def plateau_mask(start: Tensor, end: Tensor, T: int, k: Tensor) -> Tensor:
    """B x T soft membership: sigmoid(k(t+.5-s)) * sigmoid(k(e-t-.5))."""
    start, end, k = tc.as_tensor(start), tc.as_tensor(end), tc.as_tensor(k)
    B = start.shape[0]
    ones = tc.Tensor(np.ones((1, T)))
    s = start.reshape(B, 1) @ ones
    e = end.reshape(B, 1) @ ones
    grid = tc.Tensor(np.broadcast_to(np.arange(T) + 0.5, (B, T)).copy())
    return tc.sigmoid((grid - s) * k) * tc.sigmoid((e - grid) * k)


def pool_event(V: Tensor, m: Tensor) -> tuple[Tensor, Tensor]:
    """Event and background vectors, both normalized by T (not by mask mass)."""
    B, T = m.shape
    if V.shape[:2] != (B, T):
        raise tc.ShapeError(f"mask {m.shape} does not match features {V.shape}")
    ev = (m.reshape(B, 1, T) @ V).reshape(B, V.shape[-1]) * (1.0 / T)
    bg = ((1.0 - m).reshape(B, 1, T) @ V).reshape(B, V.shape[-1]) * (1.0 / T)
    return ev, bg


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 tensors atomically (temp file + rename)."""
    names = sorted(tensors)
    table = [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names]
    header = json.dumps({"meta": meta or {}, "tensors": table}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(header + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a cu-ckpt/1 checkpoint")
    nl = raw.index(b"\n", len(CKPT_MAGIC))
    header = json.loads(raw[len(CKPT_MAGIC):nl])
    buf, pos = raw[nl + 1:], 0
    out = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 8
        if pos + n > len(buf):
            raise ValueError(f"{path}: truncated tensor {entry['name']}")
        out[entry["name"]] = np.frombuffer(buf[pos:pos + n], dtype="<f8").reshape(shape).copy()
        pos += n
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes after tensor data")
    return out, header["meta"]


def dims_to_meta(dims: ModelDims) -> dict:
    return asdict(dims)
