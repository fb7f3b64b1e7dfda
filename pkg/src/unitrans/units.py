"""Discrete units: frame features, k-means codebooks, quantization and UER."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dsp import MelSpectrogram
from .exceptions import ClusteringError, MetricError, ShapeError, VocabError

DEFAULT_UNITS = 64


@dataclass
class Codebook:
    centroids: np.ndarray
    inertia_history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ShapeError("codebook needs a [K >= 2, dim] centroid matrix")
        if not np.all(np.isfinite(self.centroids)):
            raise ClusteringError("codebook has non-finite centroids")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def to_dict(self) -> dict:
        return {"K": self.K, "dim": self.dim, "centroids": self.centroids.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Codebook":
        cb = cls(np.asarray(d["centroids"], dtype=np.float64))
        if cb.K != d["K"] or cb.dim != d["dim"]:
            raise ShapeError("codebook header disagrees with centroid matrix")
        return cb

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class UnitSequence:
    ids: np.ndarray
    utt_id: str = ""
    K: int | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if self.ids.size and self.ids.min() < 0:
            raise VocabError("unit ids must be non-negative")
        if self.K is not None and self.ids.size and self.ids.max() >= self.K:
            raise VocabError(f"unit id {self.ids.max()} outside vocabulary of {self.K}")

    def __len__(self):
        return self.ids.size

    def tolist(self) -> list:
        return self.ids.tolist()


def _ids(u) -> np.ndarray:
    if isinstance(u, UnitSequence):
        return u.ids
    return np.asarray(u, dtype=np.int64).reshape(-1)


def encode_features(mel, encoder=None) -> np.ndarray:
    """Frame features; ``encoder=None`` passes log-mel frames through unchanged."""
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ShapeError("expected a non-empty [frames, dims] matrix")
    if encoder is None:
        return frames
    return encoder.encode(frames)


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 2048) -> np.ndarray:
    # explicit differences rather than the |x|^2 - 2xc + |c|^2 expansion keep exact ties exact
    out = np.empty((x.shape[0], c.shape[0]))
    for s in range(0, x.shape[0], chunk):
        diff = x[s:s + chunk, None, :] - c[None, :, :]
        out[s:s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(x.shape[0])]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(x.shape[0]))
        else:
            idx = int(rng.choice(x.shape[0], p=closest / total))
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans_train(features, K: int = DEFAULT_UNITS, iters: int = 50, seed: int = 0) -> Codebook:
    """Lloyd's algorithm from k-means++ seeding.

    ``inertia_history[t]`` is the inertia after the t-th assignment step and
    never increases. An emptied cluster is re-seeded at the point farthest
    from its centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("features must be a [frames, dims] matrix")
    if K < 2:
        raise ClusteringError("K must be at least 2")
    n_distinct = np.unique(x, axis=0).shape[0]
    if n_distinct < K:
        raise ClusteringError(f"{n_distinct} distinct frames cannot support K={K} clusters")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, K, rng)
    history = []
    labels = None
    for _ in range(max(1, iters)):
        d = _sq_dists(x, centroids)
        new_labels = np.argmin(d, axis=1)
        point_cost = d[np.arange(x.shape[0]), new_labels]
        history.append(float(point_cost.sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        taken = set()
        for k in np.nonzero(~nonempty)[0]:
            order = np.argsort(-point_cost, kind="stable")
            idx = next(i for i in order if i not in taken)
            taken.add(idx)
            centroids[k] = x[idx]
            point_cost[idx] = 0.0
    return Codebook(centroids, history)


def quantize(features, codebook: Codebook, utt_id: str = "") -> UnitSequence:
    """Nearest centroid per frame; ties resolve to the lowest index."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != codebook.dim:
        raise ShapeError(f"feature dim {x.shape[1]} != codebook dim {codebook.dim}")
    ids = np.argmin(_sq_dists(x, codebook.centroids), axis=1)
    return UnitSequence(ids, utt_id, codebook.K)


def collapse_units(u):
    """Merge runs of repeated ids. Returns the same container type it was given."""
    ids = _ids(u)
    if ids.size:
        ids = ids[np.concatenate([[True], ids[1:] != ids[:-1]])]
    if isinstance(u, UnitSequence):
        return UnitSequence(ids, u.utt_id, u.K)
    return ids


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit costs, one numpy row per reference symbol."""
    a, b = _ids(a), _ids(b)
    offs = np.arange(b.size + 1)
    prev = offs.copy()
    for i, x in enumerate(a, 1):
        cur = np.empty_like(prev)
        cur[0] = i
        cur[1:] = np.minimum(prev[1:] + 1, prev[:-1] + (b != x))
        # insertions chain left to right: cur[j] = min_k cur[k] + (j - k)
        prev = np.minimum.accumulate(cur - offs) + offs
    return int(prev[-1])


def unit_error_rate(ref, hyp, collapse: bool = True) -> float:
    """Percent edit distance of ``hyp`` against ``ref`` (collapsed by default)."""
    r, h = _ids(ref), _ids(hyp)
    if collapse:
        r, h = collapse_units(r), collapse_units(h)
    if r.size == 0:
        raise MetricError("reference unit sequence is empty")
    return 100.0 * edit_distance(r, h) / r.size


def mean_uer(refs, hyps, collapse: bool = True) -> float:
    refs, hyps = list(refs), list(hyps)
    if len(refs) != len(hyps) or not refs:
        raise MetricError("need equally many, non-zero reference and hypothesis sequences")
    return float(np.mean([unit_error_rate(r, h, collapse) for r, h in zip(refs, hyps)]))


class Unitizer(BaseEstimator, TransformerMixin):
    """Fit a k-means codebook on (optionally encoded) mel frames; transform to unit ids.

    ``encoder`` is anything with ``encode(frames) -> features``; None uses raw
    log-mel frames.
    """

    def __init__(self, n_units: int = DEFAULT_UNITS, encoder=None, max_iter: int = 50,
                 random_state: int = 0, max_fit_frames: int | None = 40000):
        self.n_units = n_units
        self.encoder = encoder
        self.max_iter = max_iter
        self.random_state = random_state
        self.max_fit_frames = max_fit_frames

    def _features(self, X):
        return [encode_features(m, self.encoder) for m in X]

    def fit(self, X, y=None):
        feats = np.concatenate(self._features(X), axis=0)
        if self.max_fit_frames and feats.shape[0] > self.max_fit_frames:
            rng = np.random.default_rng(self.random_state)
            feats = feats[np.sort(rng.choice(feats.shape[0], self.max_fit_frames, replace=False))]
        self.codebook_ = kmeans_train(feats, self.n_units, self.max_iter, self.random_state)
        return self

    def transform(self, X):
        check_is_fitted(self, "codebook_")
        return [quantize(f, self.codebook_).ids for f in self._features(X)]
