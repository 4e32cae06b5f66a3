"""Bag-of-features encoding: sampling, k-means vocabularies, histograms.

Each descriptor channel gets its own vocabulary.  A trial becomes one
histogram per channel, smoothed so that every bin is strictly positive
and renormalised to sum to one.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

VOCAB_MAGIC = b"IFMVOC1\0"
_VOC_HEADER = struct.Struct("<8s4sIIQ")
SMOOTHING = 1e-6


@dataclass(frozen=True)
class Vocabulary:
    channel: str
    centroids: np.ndarray  # (S, dim)
    seed: int = 0
    n_samples: int = 0
    iterations: int = 0
    wcss: tuple = field(default=(), repr=False)

    @property
    def size(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]


@dataclass
class HistogramProfile:
    """Per-channel bag-of-features histograms of one trial."""

    trial_id: str
    histograms: dict  # channel -> (S,) array
    subject_id: str = ""
    intention: str = ""

    def to_json(self):
        return {"trial_id": self.trial_id, "subject_id": self.subject_id, "intention": self.intention,
                "histograms": {c: h.tolist() for c, h in self.histograms.items()}}

    @classmethod
    def from_json(cls, obj):
        return cls(str(obj["trial_id"]), {c: np.asarray(h, dtype=float) for c, h in obj["histograms"].items()},
                   str(obj.get("subject_id", "")), str(obj.get("intention", "")))


# ---------------------------------------------------------------- sampling

def _chunks(descriptors):
    if isinstance(descriptors, np.ndarray):
        yield np.atleast_2d(descriptors)
        return
    for chunk in descriptors:
        chunk = np.asarray(getattr(chunk, "vectors", chunk), dtype=float)
        if chunk.size:
            yield np.atleast_2d(chunk)


def subsample(descriptors, cap, seed=0):
    """Uniform sample of at most ``cap`` rows without replacement.

    ``descriptors`` is an array or an iterable of arrays (or descriptor
    sets), consumed once in order.  Reservoir sampling keeps the result a
    deterministic function of the stream and ``seed``.
    """
    if cap <= 0:
        raise ConfigError("cap must be positive")
    rng = np.random.default_rng(seed)
    reservoir = None
    seen = 0
    for chunk in _chunks(descriptors):
        if reservoir is None:
            reservoir = np.empty((cap, chunk.shape[1]))
        m = chunk.shape[0]
        fill = max(0, min(cap - seen, m))
        reservoir[seen:seen + fill] = chunk[:fill]
        rest = chunk[fill:]
        if len(rest):
            idx = np.arange(seen + fill, seen + m)
            j = rng.integers(0, idx + 1)
            hit = np.flatnonzero(j < cap)
            if hit.size:
                # later rows overwrite earlier ones landing in the same slot
                slots = j[hit]
                _, last = np.unique(slots[::-1], return_index=True)
                keep = hit[::-1][last]
                reservoir[j[keep]] = rest[keep]
        seen += m
    if reservoir is None:
        return np.zeros((0, 0))
    return reservoir[:min(cap, seen)].copy()


# ----------------------------------------------------------------- k-means

def _sq_dists(X, C, c_sq=None):
    if c_sq is None:
        c_sq = np.einsum("ij,ij->i", C, C)
    d = np.einsum("ij,ij->i", X, X)[:, None] - 2.0 * X @ C.T + c_sq[None, :]
    return np.maximum(d, 0.0)


def nearest(X, C, chunk=4096, exact=False):
    """Index of the nearest row of ``C`` for each row of ``X`` (ties: lowest index).

    Distances use the expanded form ``|x|^2 - 2 x.c + |c|^2``; rows whose
    two best candidates are within rounding of each other, or all rows when
    ``exact`` is set, are settled by evaluating ``|x - c|^2`` directly.
    """
    X = np.asarray(X, dtype=float)
    C = np.asarray(C, dtype=float)
    out = np.empty(len(X), dtype=np.int64)
    c_sq = np.einsum("ij,ij->i", C, C)
    for a in range(0, len(X), chunk):
        xb = X[a:a + chunk]
        d = _sq_dists(xb, C, c_sq)
        best = np.argmin(d, axis=1)
        if exact or C.shape[0] < 2:
            unsure = np.arange(len(xb))
        else:
            dmin = d[np.arange(len(xb)), best]
            scale = np.einsum("ij,ij->i", xb, xb) + c_sq.max()
            unsure = np.flatnonzero((d <= (dmin + 1e-9 * scale)[:, None]).sum(1) > 1)
        for r in unsure:
            best[r] = np.argmin(((xb[r] - C) ** 2).sum(1))
        out[a:a + chunk] = best
    return out


def _wcss(X, C, labels):
    return float(((X - C[labels]) ** 2).sum())


def kmeans_pp(X, S, rng):
    """k-means++ seeding; raises if fewer than ``S`` distinct rows exist."""
    n = len(X)
    centers = np.empty(S, dtype=np.int64)
    centers[0] = rng.integers(n)
    d = ((X - X[centers[0]]) ** 2).sum(1)
    for k in range(1, S):
        total = d.sum()
        if not total > 0:
            raise DataError(f"only {k} distinct descriptors available for a vocabulary of size {S}")
        pick = min(int(np.searchsorted(np.cumsum(d), rng.random() * total, side="right")), n - 1)
        if d[pick] == 0:  # rounding pushed the draw past the last weighted row
            pick = int(np.flatnonzero(d > 0)[-1])
        centers[k] = pick
        d = np.minimum(d, ((X - X[pick]) ** 2).sum(1))
    return X[centers].copy()


def _reseed_empty(X, C, labels, empty):
    d = ((X - C[labels]) ** 2).sum(1)
    for k in empty:
        far = int(np.argmax(d))
        if not d[far] > 0:
            raise DataError("cannot reseed an empty cluster: every sample coincides with a centroid")
        C[k] = X[far]
        labels[far] = k
        d = np.minimum(d, ((X - X[far]) ** 2).sum(1))
        d[far] = 0.0
    return C, labels


def kmeans(samples, S, seed=0, max_iters=100, channel=""):
    """Lloyd iterations from a k-means++ start.

    Stops after ``max_iters`` updates or once no assignment changes.  A
    cluster left empty is moved onto the sample farthest from its centroid.
    The within-cluster sum of squares is recorded after every assignment.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2 or len(X) < S:
        raise DataError(f"k-means needs at least S={S} samples, got {len(X)}")
    if S < 1:
        raise ConfigError("vocabulary size S must be positive")
    rng = np.random.default_rng(seed)
    C = kmeans_pp(X, S, rng)
    labels = nearest(X, C)
    history = [_wcss(X, C, labels)]
    it = 0
    while it < max_iters:
        it += 1
        counts = np.bincount(labels, minlength=S)
        sums = np.zeros_like(C)
        _segment_sum(sums, labels, X)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            C, labels = _reseed_empty(X, C, labels, np.flatnonzero(~nonempty))
        new = nearest(X, C)
        history.append(_wcss(X, C, new))
        if np.array_equal(new, labels):
            break
        labels = new
    return Vocabulary(channel, C, seed, len(X), it, tuple(history))


def _segment_sum(out, labels, X):
    order = np.argsort(labels, kind="stable")
    sl = labels[order]
    starts = np.flatnonzero(np.r_[True, sl[1:] != sl[:-1]])
    out[sl[starts]] = np.add.reduceat(X[order], starts, axis=0)


# ---------------------------------------------------------------- encoding

def smooth(counts):
    """Normalised, strictly positive histogram from raw bin counts."""
    counts = np.asarray(counts, dtype=float)
    S = counts.size
    total = counts.sum()
    if total == 0:
        return np.full(S, 1.0 / S)
    h = counts / total
    h = (h + SMOOTHING) / (1.0 + S * SMOOTHING)
    return h / h.sum()


def quantize(descriptors, vocab: Vocabulary):
    """Smoothed bag-of-features histogram of one channel's descriptors."""
    channel = getattr(descriptors, "channel", None)
    if channel is not None and vocab.channel and channel != vocab.channel:
        raise DataError(f"channel mismatch: {channel} descriptors against a {vocab.channel} vocabulary")
    X = np.asarray(getattr(descriptors, "vectors", descriptors), dtype=float)
    if X.size == 0:
        return np.full(vocab.size, 1.0 / vocab.size)
    if X.shape[1] != vocab.dim:
        raise DataError(f"descriptor length {X.shape[1]} does not match vocabulary dimension {vocab.dim}")
    labels = nearest(X, vocab.centroids)
    return smooth(np.bincount(labels, minlength=vocab.size))


def encode(trial_id, descriptor_sets, vocabs: dict, subject_id="", intention="") -> HistogramProfile:
    """One histogram per channel; ``vocabs`` maps channel to vocabulary."""
    hist = {}
    for ds in descriptor_sets:
        if ds.channel not in vocabs:
            raise DataError(f"no vocabulary for channel {ds.channel}")
        hist[ds.channel] = quantize(ds, vocabs[ds.channel])
    return HistogramProfile(trial_id, hist, subject_id, intention)


# --------------------------------------------------------------------- I/O

def write_vocabularies(path, vocabs):
    with open(path, "wb") as fh:
        for v in vocabs:
            tag = v.channel.encode("ascii").ljust(4, b"\0")
            fh.write(_VOC_HEADER.pack(VOCAB_MAGIC, tag, v.size, v.dim, int(v.seed)))
            fh.write(np.ascontiguousarray(v.centroids, dtype="<f4").tobytes())


def read_vocabularies(path) -> dict:
    """Channel -> :class:`Vocabulary` for every section in the file."""
    data = Path(path).read_bytes()
    out = {}
    pos = 0
    while pos < len(data):
        if len(data) - pos < _VOC_HEADER.size:
            raise DataError(f"{path}: truncated vocabulary header")
        magic, tag, S, dim, seed = _VOC_HEADER.unpack_from(data, pos)
        if magic != VOCAB_MAGIC:
            raise DataError(f"{path}: not a vocabulary file (bad magic)")
        pos += _VOC_HEADER.size
        end = pos + 4 * S * dim
        if end > len(data):
            raise DataError(f"{path}: centroid block shorter than {S}x{dim}")
        cent = np.frombuffer(data[pos:end], dtype="<f4").reshape(S, dim).astype(float)
        pos = end
        channel = tag.rstrip(b"\0").decode("ascii")
        out[channel] = Vocabulary(channel, cent, seed)
    return out
