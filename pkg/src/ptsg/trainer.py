"""Implicit-stage training, pseudo-label export, and the explicit grounding stage."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import cluster, evalkit, losses, model
from . import tensorcore as tc
from .dataio import Corpus, CorpusError, Interval, SampleRecord, save_pseudo_labels
from .losses import LOSS_NAMES, LossWeights

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    losses: tuple[str, ...] = LOSS_NAMES
    batch_size: int = 16
    clusters_per_batch: int = 4
    n_clusters: int = 10
    rho: float = 1.2
    kmeans_iters: int = 100
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 5.0
    epochs: int = 200
    seed: int = 0
    dim: int = 16
    hidden: int = 64
    bins: int = 16
    mask_k_init: float = 1.0
    ema: float = 0.995  # decay of the exported weight average; 0 keeps the raw weights
    explicit_model: str = "soft-extent"
    explicit_epochs: int = 100
    explicit_lr: float = 1e-3
    explicit_beta: float = 0.1  # smooth-L1 transition, normalized time units

    def validate(self):
        if self.epochs < 1 or self.explicit_epochs < 1:
            raise ValueError("epochs must be >= 1")
        unknown = set(self.losses) - set(LOSS_NAMES)
        if unknown:
            raise ValueError(f"unknown loss names {sorted(unknown)}; choose from {LOSS_NAMES}")
        if not self.losses:
            raise ValueError("no loss enabled")
        if self.batch_size % self.clusters_per_batch:
            raise ValueError(f"B must be divisible by N (B={self.batch_size}, N={self.clusters_per_batch})")
        if self.batch_size // self.clusters_per_batch < 2:
            raise ValueError("B/N must be >= 2")
        if self.n_clusters < 2 or self.rho < 1:
            raise ValueError("need n_clusters >= 2 and rho >= 1")
        if not 0 <= self.ema < 1:
            raise ValueError("ema must lie in [0, 1)")
        if not (self.lr > 0 and self.explicit_lr > 0 and self.mask_k_init > 0):
            raise ValueError("learning rates and mask sharpness must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["losses"] = list(self.losses)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "losses" in d:
            d["losses"] = tuple(d["losses"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0

    def update(self, params, grads):
        self.step += 1
        c1 = 1 - self.b1 ** self.step
        c2 = 1 - self.b2 ** self.step
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if not np.all(np.isfinite(params[k])):
                raise TrainingDiverged(f"non-finite parameter {k} at step {self.step}")


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)

    def append(self, entry: dict):
        self.epochs.append(entry)

    def dump(self, path):
        Path(path).write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in self.epochs))

    @classmethod
    def load(cls, path) -> "TrainLog":
        return cls([json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()])


def _groups(samples: list[SampleRecord]) -> list[list[int]]:
    """Positions grouped by (T, M) so each group stacks into one batched tensor."""
    by: dict[tuple[int, int], list[int]] = {}
    for pos, s in enumerate(samples):
        by.setdefault((s.T, s.M), []).append(pos)
    return list(by.values())


def model_dims(corpus: Corpus, cfg: TrainConfig) -> model.ModelDims:
    dv, dq, _ = corpus.dims()
    return model.ModelDims(dv, dq, cfg.dim, cfg.hidden, cfg.bins)


def init_implicit(corpus: Corpus, cfg: TrainConfig) -> dict[str, np.ndarray]:
    params = model.init_params(model_dims(corpus, cfg), cfg.seed)
    params["mask_k_raw"] = np.array(math.log(math.expm1(cfg.mask_k_init)))
    return params


# ---------------------------------------------------------------------------
# implicit stage


@dataclass
class _Forward:
    v_ev: tc.Tensor
    v_bg: tc.Tensor
    v_vd: tc.Tensor
    q: tc.Tensor
    start: tc.Tensor
    end: tc.Tensor
    T: np.ndarray  # per row
    order: list[int]  # batch positions in row order


def _implicit_forward(P, samples: list[SampleRecord]) -> _Forward:
    parts = {k: [] for k in ("v_ev", "v_bg", "v_vd", "q", "start", "end")}
    order, Ts = [], []
    k = model.sharpness(P)
    for grp in _groups(samples):
        sub = [samples[i] for i in grp]
        T = sub[0].T
        fused = model.fuse(np.stack([s.video for s in sub]), np.stack([s.query for s in sub]), P)
        anchors = [s.label.center for s in sub]
        pred = model.detect_event(fused.V, anchors, P, T)
        m = model.plateau_mask(pred.start, pred.end, T, k)
        ev, bg = model.pool_event(fused.V, m)
        for name, t in (("v_ev", ev), ("v_bg", bg), ("v_vd", fused.v_vd), ("q", fused.q),
                        ("start", pred.start), ("end", pred.end)):
            parts[name].append(t)
        order.extend(grp)
        Ts.extend([T] * len(grp))
    cat = {n: (ts[0] if len(ts) == 1 else tc.concat(ts, axis=0)) for n, ts in parts.items()}
    return _Forward(**cat, T=np.array(Ts), order=order)


def implicit_loss_parts(P, samples: list[SampleRecord], tags, cfg: TrainConfig) -> dict[str, tc.Tensor]:
    f = _implicit_forward(P, samples)
    tags = np.asarray(tags)[f.order]
    w = cfg.weights
    parts = {}
    if "raml" in cfg.losses:
        parts["raml"] = losses.l_raml(f.v_ev, f.v_vd, f.q, w.alpha)
    if "raun" in cfg.losses:
        parts["raun"] = losses.l_raun(f.v_ev, f.v_bg, f.v_vd, w.beta)
    if "erml" in cfg.losses or "erun" in cfg.losses:
        sets = losses.build_contrast_sets(tags, require_uni="erun" in cfg.losses)
        if "erml" in cfg.losses:
            parts["erml"] = losses.l_erml(f.v_ev, f.q, sets, w.tau)
        if "erun" in cfg.losses:
            parts["erun"] = losses.l_erun(f.v_ev, sets, w.tau)
    labs = [samples[i].label for i in f.order]
    parts["grnd"] = losses.l_grnd(f.start, f.end, [lb.start for lb in labs], [lb.end for lb in labs])
    return parts


def _cluster_plan_inputs(corpus: Corpus, cfg: TrainConfig):
    """Cluster assignment and the effective N for this corpus."""
    n = len(corpus)
    K = min(cfg.n_clusters, n)
    if K < 2:
        assignment = [[0] for _ in range(n)]
    else:
        emb = cluster.embed_queries(corpus)
        cm = cluster.kmeans(emb, K, seed=cfg.seed, max_iters=cfg.kmeans_iters, rho=cfg.rho)
        assignment = cluster.assign(cm, emb)
    nonempty = len({k for ks in assignment for k in ks})
    N = cfg.clusters_per_batch
    # tiny corpora: largest divisor of B that fits the available clusters
    while N > nonempty or cfg.batch_size % N or cfg.batch_size // N < 2:
        N -= 1
    return assignment, N


def predict_implicit(params, corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    """Unclamped (start, end) arrays and clamped B x 2 intervals for every sample."""
    P = model.constants(params)
    samples = list(corpus)
    raw = np.zeros((len(samples), 2))
    out = np.zeros((len(samples), 2))
    for grp in _groups(samples):
        sub = [samples[i] for i in grp]
        T = sub[0].T
        fused = model.fuse(np.stack([s.video for s in sub]), np.stack([s.query for s in sub]), P)
        pred = model.detect_event(fused.V, [s.label.center for s in sub], P, T)
        raw[grp, 0], raw[grp, 1] = pred.start.data, pred.end.data
        out[grp] = pred.clamped()
    return raw, out


def _require_labels(corpus: Corpus):
    missing = [s.sample_id for s in corpus if s.label is None]
    if missing:
        raise CorpusError(f"samples without partial labels: {', '.join(missing[:5])}"
                          + (" ..." if len(missing) > 5 else ""))


def pseudo_label_stats(params, corpus: Corpus) -> dict:
    raw, clamped = predict_implicit(params, corpus)
    labs = [s.label for s in corpus]
    contained = np.array([r[0] <= lb.start and lb.end <= r[1] for r, lb in zip(raw, labs)])
    stats = {"containment": float(contained.mean())}
    if all(s.gt is not None for s in corpus):
        preds = {s.sample_id: Interval(*c) for s, c in zip(corpus, clamped)}
        gts = {s.sample_id: s.gt for s in corpus}
        stats["pseudo_miou"] = evalkit.evaluate(preds, gts).miou
    return stats


def train_implicit(corpus: Corpus, cfg: TrainConfig, params=None, track: bool = True):
    """Optimize the implicit stage; returns (params, TrainLog).

    ``track`` adds per-epoch containment / pseudo-label mIoU (one extra
    inference pass per epoch).
    """
    cfg.validate()
    _require_labels(corpus)
    params = init_implicit(corpus, cfg) if params is None else {k: v.copy() for k, v in params.items()}
    assignment, N = _cluster_plan_inputs(corpus, cfg)
    opt = Adam(params, cfg.lr, cfg.betas, cfg.eps)
    avg = {k: v.copy() for k, v in params.items()} if cfg.ema else None
    samples = list(corpus)
    tlog = TrainLog()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        plan = cluster.make_batches(assignment, cfg.batch_size, N, cfg.seed, epoch)
        sums: dict[str, float] = {}
        for b, batch in enumerate(plan.batches):
            tape = tc.Tape()
            P = model.on_tape(tape, params)
            parts = implicit_loss_parts(P, [samples[i] for i, _ in batch], [k for _, k in batch], cfg)
            total = losses.total_implicit_loss(parts, cfg.weights)
            if not math.isfinite(total.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            g = tape.backward(total)
            grads = {name: tc.grad_of(g, t) for name, t in P.items()}
            clip_global_norm(grads, cfg.clip_norm)
            opt.update(params, grads)
            if avg is not None:
                for k in avg:
                    avg[k] = cfg.ema * avg[k] + (1 - cfg.ema) * params[k]
            for name, t in parts.items():
                sums[name] = sums.get(name, 0.0) + t.item()
            sums["total"] = sums.get("total", 0.0) + total.item()
        entry = {"epoch": epoch, **{k: v / len(plan) for k, v in sums.items()}}
        entry["sharpness"] = float(np.logaddexp(0.0, params["mask_k_raw"]))
        if track:
            entry.update(pseudo_label_stats(params if avg is None else avg, corpus))
        entry["seconds"] = time.perf_counter() - t0
        tlog.append(entry)
        log.debug("implicit epoch %d: %s", epoch, entry)
    return (params if avg is None else avg), tlog


def export_pseudo_labels(params, corpus: Corpus, path=None) -> list[tuple[str, Interval]]:
    """Clamped detector intervals for every (labelled) sample; optionally written to ``path``."""
    _require_labels(corpus)
    _, clamped = predict_implicit(params, corpus)
    out = [(s.sample_id, Interval(float(c[0]), float(c[1]))) for s, c in zip(corpus, clamped)]
    if path is not None:
        save_pseudo_labels(out, path)
    return out


# ---------------------------------------------------------------------------
# explicit stage


class SoftExtentGrounder:
    """Fusion + per-frame two-layer perceptron scoring; the score mass gives the interval.

    With frame scores a_t in (0, 1), the normalized center is the score-weighted
    mean frame position and the normalized width is the total score over T.
    """

    name = "soft-extent"

    @staticmethod
    def init_params(dims: model.ModelDims, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng([seed, 2])
        p = model.init_fusion(dims, rng)
        D, H = dims.dim, dims.hidden
        p["head_w1"] = model._uniform(rng, (D, H), D)
        p["head_b1"] = model._uniform(rng, (H,), D)
        p["head_w2"] = model._uniform(rng, (H, 1), H)
        p["head_b2"] = np.zeros(1)
        return p

    @staticmethod
    def forward(P, video: np.ndarray, query: np.ndarray) -> tuple[tc.Tensor, tc.Tensor]:
        """Normalized (center, width) tensors of shape (B,)."""
        B, T = video.shape[:2]
        fused = model.fuse(video, query, P)
        h = tc.tanh(fused.V @ P["head_w1"] + P["head_b1"])
        a = tc.sigmoid(h @ P["head_w2"] + P["head_b2"]).reshape(B, T)
        mass = a.sum(axis=1)
        pos = (a @ tc.Tensor(((np.arange(T) + 0.5) / T).reshape(T, 1))).reshape(B)
        return pos / mass, mass * (1.0 / T)


STAGE2_MODELS = {SoftExtentGrounder.name: SoftExtentGrounder}


def explicit_dims(params) -> tuple[int, int]:
    return params["proj_v_w"].shape[0], params["proj_q_w"].shape[0]


def _soft_iou(c, w, tc_, tw):
    s, e = c - w * 0.5, c + w * 0.5
    ts, te = tc.Tensor(tc_ - tw / 2), tc.Tensor(tc_ + tw / 2)
    inter = tc.relu(tc.minimum(e, te) - tc.maximum(s, ts))
    union = w + tc.Tensor(tw) - inter
    return inter / union


def explicit_loss(P, samples: list[SampleRecord], targets: np.ndarray, cfg: TrainConfig,
                  grounder=SoftExtentGrounder) -> tc.Tensor:
    """Smooth-L1 on normalized (center, width) plus 1 - IoU against the targets (B x 2 frames)."""
    terms = []
    for grp in _groups(samples):
        sub = [samples[i] for i in grp]
        T = sub[0].T
        c, w = grounder.forward(P, np.stack([s.video for s in sub]), np.stack([s.query for s in sub]))
        tgt = targets[grp] / T
        tcen, twid = tgt.mean(axis=1), tgt[:, 1] - tgt[:, 0]
        reg = tc.smooth_l1(c - tc.Tensor(tcen), cfg.explicit_beta) + tc.smooth_l1(w - tc.Tensor(twid), cfg.explicit_beta)
        terms.append((reg + (1.0 - _soft_iou(c, w, tcen, twid))).sum())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(samples))


def train_explicit(corpus: Corpus, pseudo: list[tuple[str, Interval]], cfg: TrainConfig):
    """Fit the stage-2 grounder on ``pseudo`` treated as ground truth."""
    cfg.validate()
    grounder = STAGE2_MODELS[cfg.explicit_model]
    lookup = dict(pseudo)
    missing = [s.sample_id for s in corpus if s.sample_id not in lookup]
    if missing:
        raise CorpusError(f"no pseudo-label for: {', '.join(missing[:5])}")
    samples = list(corpus)
    targets = np.array([[lookup[s.sample_id].start, lookup[s.sample_id].end] for s in samples])
    params = grounder.init_params(model_dims(corpus, cfg), cfg.seed)
    opt = Adam(params, cfg.explicit_lr, cfg.betas, cfg.eps)
    tlog = TrainLog()
    B = cfg.batch_size
    for epoch in range(cfg.explicit_epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, 3, epoch]).permutation(len(samples))
        total_sum, nb = 0.0, 0
        for b in range(0, len(order), B):
            idx = order[b:b + B]
            tape = tc.Tape()
            P = model.on_tape(tape, params)
            loss = explicit_loss(P, [samples[i] for i in idx], targets[idx], cfg, grounder)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite explicit loss at epoch {epoch}, batch {nb}")
            g = tape.backward(loss)
            grads = {name: tc.grad_of(g, t) for name, t in P.items()}
            clip_global_norm(grads, cfg.clip_norm)
            opt.update(params, grads)
            total_sum += loss.item()
            nb += 1
        tlog.append({"epoch": epoch, "loss": total_sum / nb, "seconds": time.perf_counter() - t0})
    return params, tlog


def infer_explicit(params, samples, grounder=SoftExtentGrounder) -> list[Interval]:
    """Intervals from features alone (labels are ignored), clamped to [0, T], width >= 1."""
    if isinstance(samples, SampleRecord):
        samples = [samples]
    samples = list(samples)
    P = model.constants(params)
    out = []
    # one sample per forward pass: batched BLAS can change the last bits
    for s in samples:
        c, w = grounder.forward(P, s.video[None], s.query[None])
        row = model.clamp_intervals((c.data - w.data / 2) * s.T, (c.data + w.data / 2) * s.T, s.T)[0]
        out.append(Interval(float(row[0]), float(row[1])))
    return out


# ---------------------------------------------------------------------------
# the full pipeline


@dataclass(frozen=True)
class LabelConfig:
    distribution: str = "uniform"
    seconds: float = 0.0
    seed: int = 0


def run_two_stage(train: Corpus, test: Corpus, label_cfg: LabelConfig, cfg: TrainConfig,
                  out_dir=None, tag: str = "two-stage"):
    """Labels -> implicit stage -> pseudo-labels -> explicit stage -> test report.

    Returns ``(test_report, pseudo_report, artifacts)`` where ``pseudo_report``
    scores the pseudo-labels against training ground truth when available.
    """
    from .dataio import simulate_partial_labels

    overlap = set(train.ids) & set(test.ids)
    if overlap:
        raise CorpusError(f"train and test share sample ids: {sorted(overlap)[:5]}")
    labelled = simulate_partial_labels(train, label_cfg.distribution, label_cfg.seconds, label_cfg.seed)
    imp_params, imp_log = train_implicit(labelled, cfg)
    pseudo = export_pseudo_labels(imp_params, labelled)
    exp_params, exp_log = train_explicit(labelled, pseudo, cfg)
    preds = infer_explicit(exp_params, list(test))
    report = evalkit.evaluate({s.sample_id: p for s, p in zip(test, preds)},
                              {s.sample_id: s.gt for s in test}, tag=tag)
    pseudo_report = None
    if all(s.gt is not None for s in labelled):
        pseudo_report = evalkit.evaluate(dict(pseudo), {s.sample_id: s.gt for s in labelled},
                                         tag=tag + "-pseudo")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_pseudo_labels(pseudo, out / "pseudo.txt")
        dims_meta = model.dims_to_meta(model_dims(train, cfg))
        model.save_checkpoint(out / "implicit.ckpt", imp_params, {"kind": "implicit", "dims": dims_meta})
        model.save_checkpoint(out / "explicit.ckpt", exp_params,
                              {"kind": "explicit", "model": cfg.explicit_model, "dims": dims_meta})
        save_pseudo_labels([(s.sample_id, p) for s, p in zip(test, preds)], out / "predictions.txt")
        reports = [report] + ([pseudo_report] if pseudo_report else [])
        evalkit.emit_report(reports, "records", out / "eval.txt")
        imp_log.dump(out / "implicit_log.jsonl")
        exp_log.dump(out / "explicit_log.jsonl")
    return report, pseudo_report, {"implicit": imp_params, "explicit": exp_params,
                                   "pseudo": pseudo, "implicit_log": imp_log, "explicit_log": exp_log}
