"""Similarity scoring between views and mining of dissimilar view sets.

Similarity is normalized mutual information over discretized grayscale
rasters: both images are reduced to luma, resized to a common side, and
quantized into B bins; the joint histogram over spatially aligned pixels
gives 2*(H(a) - H(a|b)) / (H(a) + H(b)), which is 1 for identical rasters
and 0 for independent ones. Mining keeps, for each query, the n candidates
with the *lowest* NMI: the most dissimilar views of the same container and
date, which carry the most complementary appearance.

Entropies are in bits. The NMI value itself is base-invariant.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import bilinear_resize, to_grayscale
from .manifest import DatasetManifest, ImageRecord, view_candidates

DEFAULT_BINS = 64
DEFAULT_SIDE = 64


@dataclass
class Histogram:
    """Bin counts of one quantized raster."""

    counts: np.ndarray  # (B,) non-negative ints
    total: int

    def probabilities(self) -> np.ndarray:
        return self.counts / self.total


@dataclass
class JointHistogram:
    """B x B counts over spatially aligned pixel pairs of two rasters."""

    counts: np.ndarray
    total: int

    def row_marginal(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def col_marginal(self) -> np.ndarray:
        return self.counts.sum(axis=0)


@dataclass
class ViewSet:
    """Mined partners for one query; scores ascend when present."""

    query_id: str
    member_ids: list[str]
    scores: list[float] | None = None


def quantize_gray(img: np.ndarray, bins: int, side: int) -> np.ndarray:
    """Luma raster resized to side x side, quantized to integer bins."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if side < 2:
        raise ValueError("side must be >= 2")
    gray = bilinear_resize(to_grayscale(img), side, side)
    return np.minimum((gray * bins).astype(np.int64), bins - 1)


def grayscale_histogram(img: np.ndarray, bins: int, side: int) -> Histogram:
    q = quantize_gray(img, bins, side)
    counts = np.bincount(q.ravel(), minlength=bins)
    return Histogram(counts=counts, total=int(counts.sum()))


def joint_histogram(a: np.ndarray, b: np.ndarray, bins: int, side: int) -> JointHistogram:
    qa = quantize_gray(a, bins, side)
    qb = quantize_gray(b, bins, side)
    flat = qa.ravel() * bins + qb.ravel()
    counts = np.bincount(flat, minlength=bins * bins).reshape(bins, bins)
    return JointHistogram(counts=counts, total=int(counts.sum()))


def _entropy_counts(counts: np.ndarray) -> float:
    total = counts.sum()
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


def entropy(h: Histogram) -> float:
    """Shannon entropy in bits; raises on an empty histogram."""
    if h.total <= 0:
        raise ValueError("entropy of an empty histogram")
    return _entropy_counts(h.counts)


def nmi(a: np.ndarray, b: np.ndarray, bins: int = DEFAULT_BINS, side: int = DEFAULT_SIDE) -> float:
    """Normalized mutual information of two images, in [0, 1].

    Marginals are taken from the joint histogram itself, which makes
    nmi(x, x) == 1.0 exact: the joint of a raster with itself is diagonal,
    so joint and marginal entropies are the same sum in the same order.
    Constant rasters (zero entropy on both sides) compare by identity.
    """
    qa = quantize_gray(a, bins, side)
    qb = quantize_gray(b, bins, side)
    flat = qa.ravel() * bins + qb.ravel()
    joint = np.bincount(flat, minlength=bins * bins).reshape(bins, bins)
    ha = _entropy_counts(joint.sum(axis=1))
    hb = _entropy_counts(joint.sum(axis=0))
    hab = _entropy_counts(joint.ravel())
    denom = ha + hb
    if denom == 0.0:
        return 1.0 if np.array_equal(qa, qb) else 0.0
    mutual = denom - hab
    return min(1.0, max(0.0, 2.0 * mutual / denom))


class NmiCache:
    """Memo of pairwise scores keyed by (query id, candidate id, bins, side).

    Keys are ordered pairs on purpose: both orientations are computed
    independently so cached scores are bit-identical to direct calls, and
    tie-breaking during mining stays exact. Reads are lock-free; insertion
    is serialized.
    """

    def __init__(self):
        self._scores: dict[tuple, float] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._scores)

    def get(self, a_id: str, b_id: str, bins: int, side: int) -> float | None:
        return self._scores.get((a_id, b_id, bins, side))

    def put(self, a_id: str, b_id: str, bins: int, side: int, score: float) -> None:
        with self._lock:
            self._scores[(a_id, b_id, bins, side)] = score


def _score(query, cand, images, bins, side, cache):
    if cache is not None:
        hit = cache.get(query.id, cand.id, bins, side)
        if hit is not None:
            return hit
    value = nmi(images[query.id], images[cand.id], bins, side)
    if cache is not None:
        cache.put(query.id, cand.id, bins, side, value)
    return value


def sgvm_select(
    query: ImageRecord,
    candidates: list[ImageRecord],
    n: int,
    images,
    bins: int = DEFAULT_BINS,
    side: int = DEFAULT_SIDE,
    cache: NmiCache | None = None,
) -> ViewSet:
    """Keep the min(n, len(candidates)) candidates with the lowest NMI.

    Ties break toward the lower view_id. ``images`` maps record id to its
    [0, 1] float array.
    """
    scored = [
        (_score(query, cand, images, bins, side, cache), cand.view_id, cand.id)
        for cand in candidates
    ]
    scored.sort()
    chosen = scored[: min(n, len(scored))]
    return ViewSet(
        query_id=query.id,
        member_ids=[cid for _, _, cid in chosen],
        scores=[s for s, _, _ in chosen],
    )


def random_select(query: ImageRecord, candidates: list[ImageRecord], n: int, rng) -> ViewSet:
    """Uniform sample without replacement; members reported by view_id order."""
    k = min(n, len(candidates))
    if k == 0:
        return ViewSet(query_id=query.id, member_ids=[], scores=None)
    idx = rng.choice(len(candidates), size=k, replace=False)
    chosen = sorted((candidates[i] for i in idx), key=lambda r: r.view_id)
    return ViewSet(query_id=query.id, member_ids=[r.id for r in chosen], scores=None)


def mine_view_sets(
    manifest: DatasetManifest,
    images,
    n: int,
    method: str = "sgvm",
    bins: int = DEFAULT_BINS,
    side: int = DEFAULT_SIDE,
    seed: int = 0,
    cache: NmiCache | None = None,
) -> dict[str, ViewSet]:
    """One ViewSet per record, for both domains, in manifest (id) order."""
    if method not in ("sgvm", "random"):
        raise ValueError(f"unknown mining method {method!r}")
    rng = np.random.default_rng(seed)
    if method == "sgvm" and cache is None:
        cache = NmiCache()
    out: dict[str, ViewSet] = {}
    for rec in manifest:
        cands = view_candidates(rec, manifest)
        if method == "sgvm":
            out[rec.id] = sgvm_select(rec, cands, n, images, bins, side, cache)
        else:
            out[rec.id] = random_select(rec, cands, n, rng)
    return out


def save_view_sets(view_sets: dict[str, ViewSet], path: str | Path) -> None:
    """JSON-lines: {"query": id, "views": [{"id": ..., "nmi": ...}, ...]}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for qid in sorted(view_sets):
            vs = view_sets[qid]
            views = [
                {"id": mid, "nmi": None if vs.scores is None else vs.scores[i]}
                for i, mid in enumerate(vs.member_ids)
            ]
            fh.write(json.dumps({"query": qid, "views": views}) + "\n")


def load_view_sets(path: str | Path) -> dict[str, ViewSet]:
    out: dict[str, ViewSet] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            members = [v["id"] for v in obj["views"]]
            raw_scores = [v.get("nmi") for v in obj["views"]]
            scores = None if any(s is None for s in raw_scores) else raw_scores
            out[obj["query"]] = ViewSet(obj["query"], members, scores)
    return out
