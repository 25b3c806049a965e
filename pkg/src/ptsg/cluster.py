"""Query-semantic k-means and cluster-aware batch plans."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Corpus, CorpusError

CLUSTERS_FORMAT = "cu-clusters/1"


def embed_queries(corpus: Corpus) -> np.ndarray:
    """Sentence embeddings when every sample has one, else mean-pooled query tokens."""
    has = [s.sentence is not None for s in corpus]
    if all(has):
        return np.stack([s.sentence for s in corpus])
    if any(has):
        missing = [s.sample_id for s in corpus if s.sentence is None]
        raise CorpusError(f"sentence embeddings missing for: {', '.join(missing)}")
    return np.stack([s.query.mean(axis=0) for s in corpus])


@dataclass
class ClusterModel:
    centroids: np.ndarray  # K x D_s
    rho: float = 1.2
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def K(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(X, C):
    return np.maximum(
        (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :], 0.0)


def _kmeans_pp(X, K, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, np.array(centers))[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))  # every point already coincides with a centre
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None])[:, 0])
    return np.array(centers, dtype=np.float64)


def kmeans(X, K: int, seed: int = 0, max_iters: int = 100, rho: float = 1.2) -> ClusterModel:
    """k-means++ seeding followed by Lloyd iterations until the assignment stops changing.

    ``inertia_history[i]`` is the inertia after the i-th assignment step; it
    never increases. An emptied cluster is moved onto the point farthest from
    its own current centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if K < 2:
        raise ValueError("K must be >= 2")
    if n < K:
        raise ValueError(f"need at least K={K} samples, got {n}")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, K, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(X, C)
        new = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(K):
            members = labels == k
            if members.any():
                C[k] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(((X - C[k]) ** 2).sum(axis=1)))
                C[k] = X[far]
                labels[far] = k
    return ClusterModel(C, rho, history, it)


def assign(model: ClusterModel, X) -> list[list[int]]:
    """Per sample, member clusters ordered by distance (primary = nearest, lowest index on ties).

    Any centroid within ``rho`` times the nearest distance is also joined.
    """
    X = np.asarray(X, dtype=np.float64)
    # direct differences keep exact ties exact (the expanded form does not)
    d = np.sqrt(((X[:, None, :] - model.centroids[None, :, :]) ** 2).sum(axis=-1))
    out = []
    for row in d:
        order = np.argsort(row, kind="stable")
        near = row[order[0]]
        out.append([int(k) for k in order if row[k] <= model.rho * near + 1e-12])
    return out


@dataclass
class BatchPlan:
    # each batch: list of (sample index, cluster tag)
    batches: list[list[tuple[int, int]]]

    def __len__(self):
        return len(self.batches)


def make_batches(assignment: list[list[int]], B: int, N: int, seed: int, epoch: int) -> BatchPlan:
    """Batches of N clusters x B/N members, enough batches for one pass over the data.

    Clusters are drawn without replacement with probability proportional to
    size. Members come off a per-cluster shuffled queue (refilled when it runs
    dry), so large clusters are walked through before repeating; a cluster
    smaller than B/N is sampled with replacement.
    """
    if N < 1 or B % N != 0:
        raise ValueError(f"B must be divisible by N (B={B}, N={N})")
    per = B // N
    if per < 2:
        raise ValueError(f"B/N must be >= 2 so every sample has a same-cluster peer (B={B}, N={N})")
    members: dict[int, list[int]] = {}
    for i, ks in enumerate(assignment):
        for k in ks:
            members.setdefault(k, []).append(i)
    tags = sorted(members)
    if N > len(tags):
        raise ValueError(f"N={N} exceeds the {len(tags)} non-empty clusters")
    sizes = np.array([len(members[k]) for k in tags], dtype=np.float64)
    rng = np.random.default_rng([seed, epoch])
    n_batches = -(-len(assignment) // B)
    queues: dict[int, list[int]] = {k: [] for k in tags}
    batches = []
    for _ in range(n_batches):
        chosen = rng.choice(len(tags), size=N, replace=False, p=sizes / sizes.sum())
        batch = []
        for ci in sorted(chosen.tolist()):
            k = tags[ci]
            pool = members[k]
            if len(pool) < per:
                picks = [pool[j] for j in rng.choice(len(pool), size=per, replace=True).tolist()]
            else:
                q = queues[k]
                if len(q) < per:
                    q.extend(pool[j] for j in rng.permutation(len(pool)).tolist() if pool[j] not in q)
                picks, queues[k] = q[:per], q[per:]
            batch.extend((i, k) for i in picks)
        batches.append(batch)
    return BatchPlan(batches)


def save_cluster_dump(ids: list[str], assignment: list[list[int]], path) -> None:
    path = Path(path)
    lines = [CLUSTERS_FORMAT] + [f"{sid} " + " ".join(map(str, ks)) for sid, ks in zip(ids, assignment)]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_cluster_dump(path) -> tuple[list[str], list[list[int]]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CLUSTERS_FORMAT:
        raise ValueError(f"{path}: missing {CLUSTERS_FORMAT} header")
    ids, out = [], []
    for line in lines[1:]:
        if line.strip():
            parts = line.split()
            ids.append(parts[0])
            out.append([int(x) for x in parts[1:]])
    return ids, out
