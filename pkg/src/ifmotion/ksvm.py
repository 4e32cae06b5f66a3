"""Kernels and soft-margin SVMs trained by sequential minimal optimisation.

The dual problem solved for labels ``y`` in {-1, +1} and Gram matrix ``K`` is

    minimise   f(a) = 1/2 a' Q a - sum(a),   Q_ij = y_i y_j K_ij
    subject to 0 <= a_i <= C,  y' a = 0

and the decision function is ``sum_i a_i y_i K(x_i, x) + b``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConvergenceError, DataError, DegenerateKernelError

LINEAR, EXPCHI2 = "linear", "expchi2"
SVM_MAGIC = b"IFMSVM1\0"
MAX_PAIRS = 2000  # profile cap for estimating A_i
_TAU = 1e-12


# ----------------------------------------------------------------- kernels

def chi2_distance(h, hb):
    """Chi-square distance ``sum (h - hb)^2 / (h + hb)``; 0/0 terms count as 0."""
    h = np.asarray(h, dtype=float)
    hb = np.asarray(hb, dtype=float)
    if h.shape != hb.shape:
        raise DataError(f"histogram lengths differ: {h.shape} vs {hb.shape}")
    s = h + hb
    num = (h - hb) ** 2
    return float(np.sum(np.divide(num, s, out=np.zeros_like(s), where=s > 0)))


def chi2_matrix(A, B=None, max_elems=4_000_000):
    """Pairwise chi-square distances between rows of ``A`` and ``B``.

    With ``B`` omitted the result is the symmetric matrix over ``A``, with
    only the upper triangle computed and mirrored.
    """
    A = np.asarray(A, dtype=float)
    sym = B is None
    B = A if sym else np.asarray(B, dtype=float)
    if A.shape[1] != B.shape[1]:
        raise DataError(f"histogram lengths differ: {A.shape[1]} vs {B.shape[1]}")
    out = np.zeros((len(A), len(B)))
    rows = max(1, max_elems // max(1, B.shape[0] * B.shape[1]))
    for a in range(0, len(A), rows):
        lo = a if sym else 0
        x = A[a:a + rows, None, :]
        y = B[None, lo:, :]
        s = x + y
        num = (x - y) ** 2
        out[a:a + rows, lo:] = np.divide(num, s, out=np.zeros_like(s), where=s > 0).sum(-1)
    if sym:
        iu = np.triu_indices(len(A), 1)
        out[(iu[1], iu[0])] = out[iu]
        np.fill_diagonal(out, 0.0)
    return out


def channel_normalizer(histograms, seed=0):
    """Mean chi-square distance over unordered pairs of training histograms.

    Above ``MAX_PAIRS`` histograms a fixed-seed subsample estimates the mean.
    """
    H = np.asarray(histograms, dtype=float)
    if len(H) < 2:
        raise DataError("at least two training histograms are needed for A_i")
    if len(H) > MAX_PAIRS:
        pick = np.sort(np.random.default_rng(seed).choice(len(H), MAX_PAIRS, replace=False))
        H = H[pick]
    D = chi2_matrix(H)
    n = len(H)
    A = D[np.triu_indices(n, 1)].mean()
    if not A > 0:
        raise DegenerateKernelError("all training histograms are identical; A_i = 0")
    return float(A)


@dataclass(frozen=True)
class KernelConfig:
    kind: str = EXPCHI2
    normalizers: dict = field(default_factory=dict)  # channel -> A_i

    def __post_init__(self):
        if self.kind not in (LINEAR, EXPCHI2):
            raise ConfigError(f"unknown kernel {self.kind!r}")
        for c, a in self.normalizers.items():
            if not a > 0:
                raise ConfigError(f"normalizer for channel {c} must be positive")

    @property
    def channels(self):
        return tuple(sorted(self.normalizers))

    @classmethod
    def fit(cls, profiles, channels=None, seed=0):
        """Exponential chi-square config with A_i estimated from ``profiles``."""
        channels = channels or sorted(profiles[0].histograms)
        return cls(EXPCHI2, {c: channel_normalizer([p.histograms[c] for p in profiles], seed) for c in channels})


def _hist(profile, channel):
    try:
        return profile.histograms[channel]
    except KeyError:
        raise DataError(f"profile {profile.trial_id!r} lacks channel {channel}") from None


def exp_chi2_kernel(v, vb, cfg: KernelConfig):
    """``exp(-1/2 sum_i d(H^i, Hb^i) / A_i)`` over the configured channels."""
    total = sum(chi2_distance(_hist(v, c), _hist(vb, c)) / a for c, a in sorted(cfg.normalizers.items()))
    return float(np.exp(-0.5 * total))


def _stack(profiles, channel):
    return np.stack([_hist(p, channel) for p in profiles])


def gram(profiles, cfg: KernelConfig, others=None):
    """Kernel matrix between ``profiles`` and ``others`` (default: themselves).

    For the linear kernel the items are feature vectors; for the
    exponential chi-square kernel they are :class:`HistogramProfile` objects.
    """
    if cfg.kind == LINEAR:
        X = np.asarray(profiles, dtype=float)
        if others is None:
            G = X @ X.T
            return 0.5 * (G + G.T)
        return X @ np.asarray(others, dtype=float).T
    if not len(profiles):
        raise DataError("gram needs at least one profile")
    total = 0.0
    for c, a in sorted(cfg.normalizers.items()):
        A = _stack(profiles, c)
        D = chi2_matrix(A) if others is None else chi2_matrix(A, _stack(others, c))
        total = total + D / a
    return np.exp(-0.5 * total)


# --------------------------------------------------------------------- SMO

@dataclass
class SVMModel:
    """Binary SVM.  ``coef`` holds ``a_i y_i`` for every training example."""

    coef: np.ndarray
    bias: float
    C: float
    kernel: KernelConfig
    labels: tuple = ("+1", "-1")  # class meant by a positive / negative score
    iterations: int = 0
    violation: float = 0.0
    train_ids: tuple = ()

    @property
    def support(self):
        return np.flatnonzero(self.coef != 0)

    @property
    def alpha(self):
        return np.abs(self.coef)


def dual_objective(alpha, K, y):
    """``1/2 a' Q a - sum(a)`` with ``Q = (y y') * K``."""
    ay = alpha * y
    return float(0.5 * ay @ K @ ay - alpha.sum())


def kkt_violation(alpha, grad, y, C):
    """Maximal violating pair gap ``m(a) - M(a)`` (0 when optimal)."""
    up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    low = ((y < 0) & (alpha < C)) | ((y > 0) & (alpha > 0))
    if not up.any() or not low.any():
        return 0.0
    f = -y * grad
    return float(f[up].max() - f[low].min())


def _rho(alpha, grad, y, C):
    yg = y * grad
    upper = alpha >= C
    lower = alpha <= 0
    free = ~(upper | lower)
    if free.any():
        return float(yg[free].mean())
    ub_mask = (upper & (y < 0)) | (lower & (y > 0))
    lb_mask = (upper & (y > 0)) | (lower & (y < 0))
    ub = yg[ub_mask].min() if ub_mask.any() else np.inf
    lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
    return float((ub + lb) / 2)


def smo_train(K, y, C=10.0, tol=1e-3, max_iter=5_000_000, kernel: KernelConfig | None = None,
              labels=("+1", "-1"), train_ids=()):
    """Solve the SVM dual for Gram matrix ``K`` and labels ``y`` in {-1, +1}.

    Working pairs are chosen as the maximal violating pair; iterations stop
    once the violation drops below ``tol``.  Raises :class:`ConvergenceError`
    after ``max_iter`` pair updates.
    """
    K = np.asarray(K, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if K.shape != (n, n):
        raise DataError(f"Gram matrix shape {K.shape} does not match {n} labels")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("labels must be -1 or +1")
    if (y > 0).all() or (y < 0).all():
        raise DataError("training set contains a single class")
    if not C > 0:
        raise ConfigError("C must be positive")
    Q = K * np.outer(y, y)
    QD = np.diag(Q).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)
    pos = y > 0
    it = 0
    gap = np.inf
    while True:
        f = -y * grad
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        fu = np.where(up, f, -np.inf)
        fl = np.where(low, f, np.inf)
        i = int(np.argmax(fu))
        j = int(np.argmin(fl))
        gap = fu[i] - fl[j]
        if gap < tol:
            break
        if it >= max_iter:
            raise ConvergenceError(f"SMO did not converge in {max_iter} iterations (violation {gap:.3g})", gap)
        it += 1
        ai, aj = alpha[i], alpha[j]
        Qi, Qj = Q[i], Q[j]
        if y[i] != y[j]:
            quad = QD[i] + QD[j] + 2.0 * Qi[j]
            quad = quad if quad > 0 else _TAU
            delta = (-grad[i] - grad[j]) / quad
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            quad = QD[i] + QD[j] - 2.0 * Qi[j]
            quad = quad if quad > 0 else _TAU
            delta = (grad[i] - grad[j]) / quad
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
                if nj > C:
                    nj, ni = C, total - C
            else:
                if nj < 0:
                    nj, ni = 0.0, total
                if ni < 0:
                    ni, nj = 0.0, total
        alpha[i], alpha[j] = ni, nj
        grad += Qi * (ni - ai) + Qj * (nj - aj)
    b = -_rho(alpha, grad, y, C)
    return SVMModel(alpha * y, b, float(C), kernel or KernelConfig(LINEAR), tuple(labels), it, float(gap),
                    tuple(train_ids))


def decision(model: SVMModel, K_rows):
    """Scores for a batch of kernel rows ``(m, n_train)``."""
    K_rows = np.atleast_2d(np.asarray(K_rows, dtype=float))
    if K_rows.shape[1] != len(model.coef):
        raise DataError(f"kernel row has length {K_rows.shape[1]}, expected {len(model.coef)}")
    # elementwise product then row sum keeps batch and single scores bit-identical
    return (K_rows * model.coef).sum(axis=1) + model.bias


def predict(model: SVMModel, kernel_row):
    """``(score, label)`` for one kernel row; a score of exactly 0 maps to +1."""
    score = float(decision(model, kernel_row)[0])
    return score, 1 if score >= 0 else -1


def predict_batch(model: SVMModel, K_rows):
    scores = decision(model, K_rows)
    return scores, np.where(scores >= 0, 1, -1)


# -------------------------------------------------------------- one-vs-one

@dataclass
class MulticlassModel:
    classes: tuple
    pairs: list  # [((a, b), SVMModel, train_index)], a before b in ``classes``
    rule: str = "majority vote; ties by summed signed score, then class order"


def ovo_train(K, labels, classes=None, C=10.0, tol=1e-3, kernel: KernelConfig | None = None, train_ids=()):
    """One binary SVM per unordered class pair; the earlier class is +1."""
    labels = np.asarray(labels)
    present = [c for c in (classes or sorted(set(labels.tolist()))) if c in set(labels.tolist())]
    if len(present) < 2:
        raise DataError("one-vs-one training needs at least two classes")
    K = np.asarray(K, dtype=float)
    pairs = []
    for a, b in combinations(present, 2):
        idx = np.flatnonzero((labels == a) | (labels == b))
        y = np.where(labels[idx] == a, 1.0, -1.0)
        ids = tuple(train_ids[i] for i in idx) if len(train_ids) else ()
        model = smo_train(K[np.ix_(idx, idx)], y, C, tol, kernel=kernel, labels=(a, b), train_ids=ids)
        pairs.append(((a, b), model, idx))
    return MulticlassModel(tuple(present), pairs)


def ovo_scores(model: MulticlassModel, K_rows):
    """Vote counts and summed signed scores, each ``(m, n_classes)``."""
    K_rows = np.atleast_2d(np.asarray(K_rows, dtype=float))
    pos = {c: k for k, c in enumerate(model.classes)}
    votes = np.zeros((len(K_rows), len(model.classes)))
    sums = np.zeros_like(votes)
    for (a, b), svm, idx in model.pairs:
        s = decision(svm, K_rows[:, idx])
        win_a = s >= 0
        votes[win_a, pos[a]] += 1
        votes[~win_a, pos[b]] += 1
        sums[:, pos[a]] += s
        sums[:, pos[b]] -= s
    return votes, sums


def ovo_predict(model: MulticlassModel, K_rows):
    """Winning class per kernel row (majority vote with deterministic ties)."""
    votes, sums = ovo_scores(model, K_rows)
    out = []
    for v, s in zip(votes, sums):
        tied = np.flatnonzero(v == v.max())
        if len(tied) > 1:
            best = s[tied].max()
            tied = tied[s[tied] == best]
        out.append(model.classes[int(tied[0])])
    return out


# --------------------------------------------------------------------- I/O

def _pack(header, arrays):
    meta = dict(header)
    meta["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [SVM_MAGIC, struct.pack("<I", len(blob)), blob]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in arrays]
    return b"".join(parts)


def save_model(path, model, support_data=None, extra=None):
    """Write a binary or one-vs-one model.

    ``support_data`` holds what prediction needs besides the kernel: for
    the linear kernel the standardised training matrix (or any row-aligned
    array), for exponential chi-square a mapping channel -> histogram matrix.
    """
    models = model.pairs if isinstance(model, MulticlassModel) else [(model.labels, model, None)]
    first = models[0][1]
    header = {
        "kind": "ovo" if isinstance(model, MulticlassModel) else "binary",
        "classes": list(model.classes) if isinstance(model, MulticlassModel) else list(model.labels),
        "kernel": first.kernel.kind,
        "normalizers": first.kernel.normalizers,
        "C": first.C,
        "models": [],
        "extra": extra or {},
    }
    arrays = []
    for k, ((a, b), svm, idx) in enumerate(models):
        header["models"].append({"labels": [a, b], "bias": svm.bias, "iterations": svm.iterations,
                                 "violation": svm.violation, "support_ids": [svm.train_ids[i] for i in svm.support]
                                 if svm.train_ids else []})
        arrays.append((f"coef{k}", svm.coef))
        arrays.append((f"index{k}", np.arange(len(svm.coef)) if idx is None else idx))
    if support_data is not None:
        if isinstance(support_data, dict):
            for c in sorted(support_data):
                arrays.append((f"data:{c}", support_data[c]))
        else:
            arrays.append(("data", support_data))
    Path(path).write_bytes(_pack(header, arrays))


def load_model(path):
    """Returns ``(model, support_data, extra)`` as written by :func:`save_model`."""
    data = Path(path).read_bytes()
    if data[:8] != SVM_MAGIC:
        raise DataError(f"{path}: not a model file (bad magic)")
    (n,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + n].decode("utf-8"))
    pos = 12 + n
    arrays = {}
    for spec in header["arrays"]:
        size = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(spec["shape"]).copy()
        pos += 8 * size
    kernel = KernelConfig(header["kernel"], header["normalizers"])
    pairs = []
    for k, m in enumerate(header["models"]):
        svm = SVMModel(arrays[f"coef{k}"], m["bias"], header["C"], kernel, tuple(m["labels"]), m["iterations"],
                       m["violation"])
        pairs.append((tuple(m["labels"]), svm, arrays[f"index{k}"].astype(np.int64)))
    model = MulticlassModel(tuple(header["classes"]), pairs) if header["kind"] == "ovo" else pairs[0][1]
    data_keys = [k for k in arrays if k.startswith("data")]
    if data_keys == ["data"]:
        support = arrays["data"]
    elif data_keys:
        support = {k.split(":", 1)[1]: arrays[k] for k in data_keys}
    else:
        support = None
    return model, support, header.get("extra", {})
