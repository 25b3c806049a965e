"""Corpus files, synthetic corpora with planted events, and partial-label simulation.

All times are frame indices. Seconds only appear in
:func:`simulate_partial_labels`, converted through each sample's fps.

On-disk corpus layout (``cu-corpus/1``)::

    <dir>/manifest.txt          key: value header, then one row per sample
    <dir>/<id>.video.f32        T*D_v little-endian float32, row-major
    <dir>/<id>.query.f32        M*D_q
    <dir>/<id>.sent.f32         D_s (optional)
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CORPUS_FORMAT = "cu-corpus/1"
PSEUDO_FORMAT = "cu-pseudo/1"
_COLUMNS = ["id", "T", "M", "fps", "video", "query", "sent",
            "gt_start", "gt_end", "label_center", "label_range", "cluster"]


class CorpusError(ValueError):
    """Malformed corpus, label, or pseudo-label data."""


@dataclass(frozen=True)
class Interval:
    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise CorpusError(f"non-finite interval ({self.start}, {self.end})")
        if self.start > self.end:
            raise CorpusError(f"interval start {self.start} > end {self.end}")

    @property
    def length(self) -> float:
        return self.end - self.start

    def within(self, lo: float, hi: float) -> bool:
        return lo <= self.start and self.end <= hi


@dataclass(frozen=True)
class PartialLabel:
    center: float
    range: float = 0.0

    @property
    def start(self) -> float:
        return self.center - self.range / 2

    @property
    def end(self) -> float:
        return self.center + self.range / 2

    def interval(self) -> Interval:
        return Interval(self.start, self.end)


@dataclass
class SampleRecord:
    sample_id: str
    video: np.ndarray  # T x D_v
    query: np.ndarray  # M x D_q
    fps: float = 1.0
    sentence: np.ndarray | None = None
    gt: Interval | None = None
    label: PartialLabel | None = None
    cluster: int | None = None  # planted cluster, synthetic corpora only

    @property
    def T(self) -> int:
        return self.video.shape[0]

    @property
    def M(self) -> int:
        return self.query.shape[0]

    def validate(self):
        sid = self.sample_id
        if not sid or any(c.isspace() for c in sid):
            raise CorpusError(f"bad sample id {sid!r}")
        if self.video.ndim != 2 or self.T < 2:
            raise CorpusError(f"{sid}: video must be T x D_v with T >= 2, got {self.video.shape}")
        if self.query.ndim != 2 or self.M < 1:
            raise CorpusError(f"{sid}: query must be M x D_q with M >= 1, got {self.query.shape}")
        for name, arr in (("video", self.video), ("query", self.query), ("sentence", self.sentence)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise CorpusError(f"{sid}: non-finite values in {name} features")
        if not self.fps > 0:
            raise CorpusError(f"{sid}: fps must be positive")
        if self.gt is not None and not (0 <= self.gt.start < self.gt.end <= self.T):
            raise CorpusError(f"{sid}: gt interval {self.gt} outside [0, {self.T}]")
        if self.label is not None:
            lab = self.label
            if lab.range < 0 or not (0 <= lab.start <= lab.end <= self.T):
                raise CorpusError(f"{sid}: partial label {lab} outside [0, {self.T}]")


@dataclass
class Corpus:
    samples: list[SampleRecord]
    provenance: str = "external"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    def by_id(self) -> dict[str, SampleRecord]:
        return {s.sample_id: s for s in self.samples}

    def dims(self) -> tuple[int, int, int]:
        s0 = self.samples[0]
        ds = 0 if s0.sentence is None else s0.sentence.shape[0]
        return s0.video.shape[1], s0.query.shape[1], ds

    def validate(self):
        if not self.samples:
            raise CorpusError("corpus is empty")
        dv, dq, ds = self.dims()
        seen = set()
        for s in self.samples:
            s.validate()
            if s.sample_id in seen:
                raise CorpusError(f"duplicate sample id {s.sample_id}")
            seen.add(s.sample_id)
            sd = 0 if s.sentence is None else s.sentence.shape[0]
            if s.video.shape[1] != dv or s.query.shape[1] != dq or sd != ds:
                raise CorpusError(f"{s.sample_id}: dims differ from the rest of the corpus")


def _f32_roundtrip(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype="<f4").astype(np.float64)


# ---------------------------------------------------------------------------
# corpus files


def _fmt(x) -> str:
    return "-" if x is None else repr(x) if isinstance(x, float) else str(x)


def _write_blob(path: Path, arr: np.ndarray):
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_corpus(corpus: Corpus, out_dir) -> Path:
    corpus.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dv, dq, ds = corpus.dims()
    lines = [
        f"format-version: {CORPUS_FORMAT}",
        f"dim-video: {dv}",
        f"dim-query: {dq}",
        f"dim-sentence: {ds}",
        f"provenance: {corpus.provenance}",
        f"samples: {len(corpus)}",
        "# " + " ".join(_COLUMNS),
    ]
    for s in corpus:
        vname, qname = f"{s.sample_id}.video.f32", f"{s.sample_id}.query.f32"
        _write_blob(out / vname, s.video)
        _write_blob(out / qname, s.query)
        sname = None
        if s.sentence is not None:
            sname = f"{s.sample_id}.sent.f32"
            _write_blob(out / sname, s.sentence)
        gt, lab = s.gt, s.label
        row = [s.sample_id, s.T, s.M, float(s.fps), vname, qname, sname,
               None if gt is None else float(gt.start), None if gt is None else float(gt.end),
               None if lab is None else float(lab.center), None if lab is None else float(lab.range),
               s.cluster]
        lines.append(" ".join(_fmt(v) for v in row))
    tmp = out / "manifest.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, out / "manifest.txt")
    return out / "manifest.txt"


def _read_blob(path: Path, shape: tuple, sid: str) -> np.ndarray:
    if not path.exists():
        raise CorpusError(f"{sid}: missing blob {path.name}")
    raw = path.read_bytes()
    want = int(np.prod(shape)) * 4
    if len(raw) != want:
        raise CorpusError(f"{sid}: blob {path.name} has {len(raw)} bytes, expected {want}")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise CorpusError(f"{sid}: non-finite values in {path.name}")
    return arr


def load_corpus(path) -> Corpus:
    """Load a corpus from its directory or manifest path, preserving order."""
    path = Path(path)
    manifest = path / "manifest.txt" if path.is_dir() else path
    if not manifest.exists():
        raise CorpusError(f"no manifest at {manifest}")
    root = manifest.parent
    header: dict[str, str] = {}
    rows = []
    for line in manifest.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        if ":" in line and not rows and line.split(":", 1)[0] in {
            "format-version", "dim-video", "dim-query", "dim-sentence", "provenance", "samples"
        }:
            k, v = line.split(":", 1)
            header[k.strip()] = v.strip()
        else:
            rows.append(line.split())
    if header.get("format-version") != CORPUS_FORMAT:
        raise CorpusError(f"unsupported corpus format {header.get('format-version')!r}")
    dv, dq, ds = (int(header[k]) for k in ("dim-video", "dim-query", "dim-sentence"))

    def opt(v, conv=float):
        return None if v == "-" else conv(v)

    samples = []
    for row in rows:
        if len(row) != len(_COLUMNS):
            raise CorpusError(f"malformed manifest row: {' '.join(row)}")
        sid, T, M, fps, vname, qname, sname, gs, ge, lc, lr, cl = row
        T, M = int(T), int(M)
        video = _read_blob(root / vname, (T, dv), sid)
        query = _read_blob(root / qname, (M, dq), sid)
        sent = None if sname == "-" else _read_blob(root / sname, (ds,), sid)
        gt = None if gs == "-" else Interval(float(gs), float(ge))
        lab = None if lc == "-" else PartialLabel(float(lc), float(lr))
        samples.append(SampleRecord(sid, video, query, float(fps), sent, gt, lab, opt(cl, int)))
    if int(header.get("samples", len(samples))) != len(samples):
        raise CorpusError("manifest sample count does not match its rows")
    corpus = Corpus(samples, header.get("provenance", "external"))
    corpus.validate()
    return corpus


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass(frozen=True)
class GenConfig:
    num_samples: int = 200
    T: int = 64
    dim_video: int = 32
    dim_query: int = 24
    dim_sentence: int = 16
    n_clusters: int = 5
    event_len: tuple[int, int] = (10, 32)
    noise: float = 0.5
    num_tokens: int = 6
    fps: float = 2.0
    seed: int = 0
    # prototypes come from world_seed so that disjoint splits share semantics
    world_seed: int | None = None
    id_prefix: str = "s"


def generate_synthetic(cfg: GenConfig) -> Corpus:
    """Corpus with one planted event per sample and ``n_clusters`` semantic clusters.

    Event frames are ``video_proto[c] + noise``, all other frames are a shared
    background prototype plus noise. Query tokens and the sentence embedding are
    drawn around per-cluster text prototypes.
    """
    lo, hi = cfg.event_len
    if not (0 < lo <= hi < cfg.T):
        raise CorpusError(f"event length range {cfg.event_len} infeasible for T={cfg.T}")
    if cfg.n_clusters < 2:
        raise CorpusError("need at least 2 planted clusters")
    if cfg.num_samples < 1:
        raise CorpusError("need at least one sample")
    world = np.random.default_rng(cfg.seed if cfg.world_seed is None else cfg.world_seed)
    K = cfg.n_clusters
    vid_proto = world.normal(size=(K, cfg.dim_video))
    bg_proto = world.normal(size=cfg.dim_video)
    txt_proto = world.normal(size=(K, cfg.dim_query))
    sent_proto = world.normal(size=(K, cfg.dim_sentence)) if cfg.dim_sentence else None

    rng = np.random.default_rng([cfg.seed, 1])
    samples = []
    for i in range(cfg.num_samples):
        c = int(rng.integers(K))
        L = int(rng.integers(lo, hi + 1))
        s = int(rng.integers(0, cfg.T - L + 1))
        video = np.tile(bg_proto, (cfg.T, 1))
        video[s:s + L] = vid_proto[c]
        video = video + cfg.noise * rng.normal(size=video.shape)
        query = txt_proto[c] + cfg.noise * rng.normal(size=(cfg.num_tokens, cfg.dim_query))
        sent = None
        if sent_proto is not None:
            sent = _f32_roundtrip(sent_proto[c] + cfg.noise * rng.normal(size=cfg.dim_sentence))
        samples.append(SampleRecord(
            f"{cfg.id_prefix}{i:05d}", _f32_roundtrip(video), _f32_roundtrip(query), float(cfg.fps),
            sent, Interval(float(s), float(s + L)), None, c,
        ))
    corpus = Corpus(samples, f"synthetic seed={cfg.seed} world={cfg.world_seed}")
    corpus.validate()
    return corpus


# ---------------------------------------------------------------------------
# partial labels

DISTRIBUTIONS = ("uniform", "gaussian")


def simulate_partial_labels(corpus: Corpus, distribution: str = "uniform",
                            clip_seconds: float = 0.0, seed: int = 0) -> Corpus:
    """Return a copy of ``corpus`` whose samples carry a simulated partial label.

    Clip length is ``clip_seconds * fps`` frames, truncated to the event. The
    clip center is uniform over the feasible range, or normal around the event
    midpoint with sigma = length/6, redrawn until feasible (100 tries, then the
    midpoint).
    """
    if distribution not in DISTRIBUTIONS:
        raise CorpusError(f"unknown distribution {distribution!r}; choose from {DISTRIBUTIONS}")
    if clip_seconds < 0:
        raise CorpusError("clip duration must be >= 0")
    rng = np.random.default_rng(seed)
    out = []
    for smp in corpus:
        if smp.gt is None:
            raise CorpusError(f"{smp.sample_id}: no gt interval to simulate a label from")
        s, e = smp.gt.start, smp.gt.end
        r = min(clip_seconds * smp.fps, e - s)
        lo, hi = s + r / 2, e - r / 2
        if distribution == "uniform":
            c = float(rng.uniform(lo, hi)) if hi > lo else lo
        else:
            mid, sigma = (s + e) / 2, (e - s) / 6
            c = mid
            for _ in range(100):
                draw = float(rng.normal(mid, sigma))
                if lo <= draw <= hi:
                    c = draw
                    break
        # guard against round-off pushing the clip past the event edge
        c = min(max(c, lo), hi)
        out.append(replace(smp, label=PartialLabel(c, float(r))))
    return Corpus(out, corpus.provenance, dict(corpus.meta))


def split_corpus(corpus: Corpus, n_test: int) -> tuple[Corpus, Corpus]:
    """First ``len - n_test`` samples for training, the rest held out."""
    if not 0 < n_test < len(corpus):
        raise CorpusError(f"cannot hold out {n_test} of {len(corpus)} samples")
    k = len(corpus) - n_test
    return (Corpus(corpus.samples[:k], corpus.provenance),
            Corpus(corpus.samples[k:], corpus.provenance))


# ---------------------------------------------------------------------------
# pseudo-label files


def save_pseudo_labels(labels, path) -> None:
    """Write ``(sample_id, Interval)`` pairs, one ``id start end`` line each."""
    seen = set()
    rows = []
    for sid, iv in labels:
        if sid in seen:
            raise CorpusError(f"duplicate sample id {sid} in pseudo-labels")
        seen.add(sid)
        if not isinstance(iv, Interval):
            iv = Interval(float(iv[0]), float(iv[1]))
        rows.append(f"{sid} {float(iv.start)!r} {float(iv.end)!r}")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join([PSEUDO_FORMAT] + rows) + "\n")
    os.replace(tmp, path)


def load_pseudo_labels(path) -> list[tuple[str, Interval]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != PSEUDO_FORMAT:
        raise CorpusError(f"{path}: missing {PSEUDO_FORMAT} header")
    out, seen = [], set()
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise CorpusError(f"{path}: malformed line {line!r}")
        sid = parts[0]
        if sid in seen:
            raise CorpusError(f"duplicate sample id {sid} in pseudo-labels")
        seen.add(sid)
        out.append((sid, Interval(float(parts[1]), float(parts[2]))))
    return out
