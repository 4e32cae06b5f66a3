"""Dense trajectories with HOG and HOF descriptors.

Points are sampled on a regular lattice at several spatial scales, tracked
through median-filtered flow for ``L`` frames, and described by orientation
histograms pooled over an ``n_x x n_y x n_t`` grid of cuboids that follows
the trajectory.  Per-frame histograms are read from integral images, so the
cost per tracked point is constant.

Cuboid layout inside a descriptor: cuboid index ``(t, y, x)`` with ``x``
varying fastest, each cuboid contributing ``bins`` consecutive values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import ConfigError, DataError
from .flow import estimate_flow, resize, scaled_shape

HOG, HOF = "HOG", "HOF"
CHANNELS = (HOG, HOF)


@dataclass(frozen=True)
class DTParams:
    L: int = 15
    N: int = 32
    n_x: int = 2
    n_y: int = 2
    n_t: int = 3
    sampling_step_px: int = 5
    scales: tuple = (1.0, 1.0 / math.sqrt(2.0), 0.5)
    hog_bins: int = 8
    hof_bins: int = 9
    min_displacement_px: float = 1.0
    max_displacement_px: float = 50.0
    min_flow_px: float = 0.4
    texture_quality: float = 0.001

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError("trajectory length L must be at least 1")
        if self.n_t < 1 or self.n_x < 1 or self.n_y < 1:
            raise ConfigError("cuboid grid sizes must be positive")
        if self.n_t > 1 and self.L % self.n_t:
            raise ConfigError(f"n_t={self.n_t} must divide L={self.L}")
        if self.L == 5 and self.n_t != 1:
            raise ConfigError("the L=5 configuration requires n_t=1")
        if self.N % 2:
            raise ConfigError("patch side N must be even")
        if self.hof_bins != self.hog_bins + 1:
            raise ConfigError("hof_bins must equal hog_bins + 1")
        if self.sampling_step_px < 1:
            raise ConfigError("sampling_step_px must be positive")
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))

    @classmethod
    def short(cls, **overrides):
        """Shortened trajectories: L=5 with a single temporal cell."""
        base = dict(L=5, n_t=1)
        base.update(overrides)
        return cls(**base)

    def dim(self, channel):
        bins = self.hog_bins if channel == HOG else self.hof_bins
        return self.n_x * self.n_y * self.n_t * bins


@dataclass
class DenseTrajectory:
    points: np.ndarray  # (L+1, 2) as (x, y) in the coordinates of its scale
    scale: float
    start_frame: int

    @property
    def end_frame(self):
        return self.start_frame + len(self.points) - 1


@dataclass
class DescriptorSet:
    """Descriptors of one channel for one video."""

    channel: str
    trial_id: str
    vectors: np.ndarray  # (n, dim)
    start_frames: np.ndarray  # (n,) int
    scales: np.ndarray  # (n,) float
    traj_len: int
    trajectories: list = field(default=None, repr=False)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def end_frames(self):
        return self.start_frames + self.traj_len

    def select(self, mask):
        mask = np.asarray(mask)
        trajs = None
        if self.trajectories is not None:
            idx = np.flatnonzero(mask) if mask.dtype == bool else mask
            trajs = [self.trajectories[i] for i in idx]
        return DescriptorSet(self.channel, self.trial_id, self.vectors[mask],
                             self.start_frames[mask], self.scales[mask], self.traj_len, trajs)


# -------------------------------------------------------- per-pixel binning

def orientation_bins(dx, dy, bins, min_magnitude=None):
    """Magnitude-weighted orientation histogram maps, shape ``(H, W, n)``.

    Orientations cover the full circle with linear interpolation between
    neighbouring bins (bin ``k`` is centred at ``2 pi k / bins``).  When
    ``min_magnitude`` is given, an extra last bin receives weight 1 for
    vectors shorter than it.
    """
    mag = np.hypot(dx, dy)
    ang = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    fbin = ang * bins / (2 * np.pi)
    b0 = np.floor(fbin).astype(int) % bins
    b1 = (b0 + 1) % bins
    w1 = (fbin - np.floor(fbin)) * mag
    w0 = mag - w1
    n = bins + (1 if min_magnitude is not None else 0)
    out = np.zeros(dx.shape + (n,))
    if min_magnitude is not None:
        small = mag < min_magnitude
        w0 = np.where(small, 0.0, w0)
        w1 = np.where(small, 0.0, w1)
        out[..., bins] = small
    # b0 != b1 for bins >= 2, so the two writes never collide
    np.put_along_axis(out, b0[..., None], w0[..., None], axis=-1)
    np.put_along_axis(out, b1[..., None], w1[..., None], axis=-1)
    return out


def gradients(frame):
    frame = np.asarray(frame, dtype=float)
    dy, dx = np.gradient(frame)
    return dx, dy


def integral(maps):
    out = np.zeros((maps.shape[0] + 1, maps.shape[1] + 1, maps.shape[2]))
    np.cumsum(np.cumsum(maps, axis=0), axis=1, out=out[1:, 1:])
    return out


def min_eigenvalue(frame):
    """Smaller eigenvalue of the 3x3 box-summed structure tensor."""
    dx, dy = gradients(frame)
    sxx = ndimage.uniform_filter(dx * dx, 3, mode="nearest")
    syy = ndimage.uniform_filter(dy * dy, 3, mode="nearest")
    sxy = ndimage.uniform_filter(dx * dy, 3, mode="nearest")
    half_tr = 0.5 * (sxx + syy)
    disc = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy ** 2, 0.0))
    return np.maximum(half_tr - disc, 0.0)


# ------------------------------------------------------------- sampling

def lattice_shape(image_shape, step):
    return image_shape[0] // step, image_shape[1] // step


def occupancy(points, image_shape, step):
    """Boolean lattice mask of cells that already hold a tracked point."""
    rows, cols = lattice_shape(image_shape, step)
    mask = np.zeros((rows, cols), dtype=bool)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.size:
        cx = np.floor(pts[:, 0] / step).astype(int)
        cy = np.floor(pts[:, 1] / step).astype(int)
        ok = (cx >= 0) & (cx < cols) & (cy >= 0) & (cy < rows)
        mask[cy[ok], cx[ok]] = True
    return mask


def sample_grid(frame, mask=None, p: DTParams = DTParams(), eig=None):
    """Lattice points of ``frame`` that are free and textured.

    ``mask`` is a boolean lattice occupancy (see :func:`occupancy`); ``eig``
    may pass a precomputed :func:`min_eigenvalue` map.  Returns ``(n, 2)``
    points as (x, y).
    """
    frame = np.asarray(frame, dtype=float)
    step = p.sampling_step_px
    rows, cols = lattice_shape(frame.shape, step)
    if eig is None:
        eig = min_eigenvalue(frame)
    thresh = p.texture_quality * eig.max()
    ys = step // 2 + step * np.arange(rows)
    xs = step // 2 + step * np.arange(cols)
    ok = eig[np.ix_(ys, xs)] > thresh
    if mask is not None:
        ok &= ~np.asarray(mask, dtype=bool)
    cy, cx = np.nonzero(ok)
    return np.stack([xs[cx], ys[cy]], axis=1).astype(float)


# ------------------------------------------------------------- tracking

def bilinear(field_, pts):
    """Sample a 2-D array at float (x, y) points with edge clamping."""
    h, w = field_.shape
    x = np.clip(pts[:, 0], 0, w - 1)
    y = np.clip(pts[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros(len(x), int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros(len(y), int)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return ((1 - fy) * ((1 - fx) * field_[y0, x0] + fx * field_[y0, x1])
            + fy * ((1 - fx) * field_[y1, x0] + fx * field_[y1, x1]))


def _median3(arr):
    return ndimage.median_filter(arr, size=3, mode="nearest")


def median_bilinear(field_, pts):
    """:func:`bilinear` lookup in the 3x3 median-filtered ``field_``.

    ``field_`` may be ``(H, W)`` or a stack ``(C, H, W)``.  Only the medians
    around the query points are computed; the result equals a lookup in
    ``median_filter(field_, 3, mode="nearest")``.
    """
    stack = np.asarray(field_)
    single = stack.ndim == 2
    if single:
        stack = stack[None]
    h, w = stack.shape[1:]
    x = np.clip(pts[:, 0], 0, w - 1)
    y = np.clip(pts[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(int), max(h - 2, 0))
    fx = x - x0
    fy = y - y0
    # rows/cols y0-1 .. y0+2 cover the 3x3 neighbourhoods of all four corners
    rr = np.clip(y0[:, None] + np.arange(-1, 3)[None, :], 0, h - 1)
    cc = np.clip(x0[:, None] + np.arange(-1, 3)[None, :], 0, w - 1)
    win = stack[:, rr[:, :, None], cc[:, None, :]]  # (C, n, 4, 4)
    med = np.empty(win.shape[:2] + (2, 2))
    for dy in (0, 1):
        for dx in (0, 1):
            nb = win[:, :, dy:dy + 3, dx:dx + 3].reshape(win.shape[0], len(x), 9)
            med[:, :, dy, dx] = np.partition(nb, 4, axis=-1)[..., 4]
    res = ((1 - fy) * ((1 - fx) * med[..., 0, 0] + fx * med[..., 0, 1])
           + fy * ((1 - fx) * med[..., 1, 0] + fx * med[..., 1, 1]))
    return res[0] if single else res


def _advance(pts, flow, shape):
    """Move points one frame along the median-filtered flow; returns the new
    points and an in-bounds mask."""
    new = pts + median_bilinear(np.stack([flow.u, flow.v]), pts).T
    h, w = shape
    inside = (new[:, 0] >= 0) & (new[:, 0] <= w - 1) & (new[:, 1] >= 0) & (new[:, 1] <= h - 1)
    return new, inside


def valid_paths(paths, p: DTParams):
    """Displacement pruning for ``(n, L+1, 2)`` paths."""
    steps = np.linalg.norm(np.diff(paths, axis=1), axis=2)
    return (steps.max(axis=1, initial=0.0) <= p.max_displacement_px) & (steps.sum(axis=1) >= p.min_displacement_px)


def track(points, flows, p: DTParams = DTParams(), start_frame=0, scale=1.0, median=True):
    """Track ``points`` through ``flows[start_frame:start_frame + L]``.

    Points leaving the image or violating the displacement bounds are
    dropped.  Returns a list of :class:`DenseTrajectory`.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(flows) - start_frame < p.L:
        raise DataError(f"need {p.L} flow fields after frame {start_frame}, have {len(flows) - start_frame}")
    paths = [pts]
    alive = np.ones(len(pts), dtype=bool)
    for k in range(p.L):
        f = flows[start_frame + k]
        if median:
            new, inside = _advance(paths[-1], f, f.u.shape)
        else:
            new = paths[-1] + np.stack([bilinear(f.u, paths[-1]), bilinear(f.v, paths[-1])], axis=1)
            inside = ((new[:, 0] >= 0) & (new[:, 0] <= f.width - 1)
                      & (new[:, 1] >= 0) & (new[:, 1] <= f.height - 1))
        alive &= inside
        paths.append(new)
    paths = np.stack(paths, axis=1)
    keep = alive & valid_paths(paths, p)
    return [DenseTrajectory(paths[i], scale, start_frame) for i in np.flatnonzero(keep)]


# ----------------------------------------------------------- descriptors

def _cell_edges(center, size, limit, n_cells):
    """Left edges and width of ``n_cells`` cells of a patch of ``size``
    centred at ``center`` and shifted to stay inside ``[0, limit)``."""
    size_eff = min(size, limit)
    start = np.clip(np.round(center).astype(int) - size // 2, 0, limit - size_eff)
    width = size_eff / n_cells
    edges = start[:, None] + np.floor(np.arange(n_cells + 1) * width).astype(int)[None, :]
    return edges


def patch_edges(pts, shape, p: DTParams):
    """Cell edges ``(xe, ye)`` of the N x N patches around ``pts``."""
    h, w = shape
    return _cell_edges(pts[:, 0], p.N, w, p.n_x), _cell_edges(pts[:, 1], p.N, h, p.n_y)


def _gather(integ, xe, ye, p: DTParams, offset=(0, 0)):
    oy, ox = offset
    xe = xe - ox
    ye = ye - oy
    out = np.empty((len(xe), p.n_y * p.n_x, integ.shape[2]))
    for cy in range(p.n_y):
        y0, y1 = ye[:, cy], ye[:, cy + 1]
        for cx in range(p.n_x):
            x0, x1 = xe[:, cx], xe[:, cx + 1]
            out[:, cy * p.n_x + cx] = integ[y1, x1] - integ[y0, x1] - integ[y1, x0] + integ[y0, x0]
    return out


def patch_histograms(integ, pts, p: DTParams):
    """Per-cell histograms around ``pts``: shape ``(n, n_y * n_x, bins)``."""
    xe, ye = patch_edges(pts, (integ.shape[0] - 1, integ.shape[1] - 1), p)
    return _gather(integ, xe, ye, p)


def finish_descriptor(cells):
    """Cuboid histograms ``(n, n_cuboids, bins)`` to L2-normalised vectors.

    All-zero cuboids become uniform before normalisation.
    """
    cells = np.array(cells, dtype=float)
    bins = cells.shape[-1]
    empty = cells.sum(axis=-1) <= 1e-12
    cells[empty] = 1.0 / bins
    vec = cells.reshape(len(cells), -1)
    norm = np.linalg.norm(vec, axis=1, keepdims=True)
    return vec / np.where(norm > 0, norm, 1.0)


def _frame_maps(frame, flow, p: DTParams, box=None):
    """Integral HOG/HOF maps over ``box = (y0, y1, x0, x1)`` (whole frame by default)."""
    frame = np.asarray(frame, dtype=float)
    h, w = frame.shape
    y0, y1, x0, x1 = box if box is not None else (0, h, 0, w)
    # one pixel of context keeps the gradients identical to the full-frame ones
    Y0, Y1, X0, X1 = max(y0 - 1, 0), min(y1 + 1, h), max(x0 - 1, 0), min(x1 + 1, w)
    dx, dy = gradients(frame[Y0:Y1, X0:X1])
    sl = (slice(y0 - Y0, y1 - Y0), slice(x0 - X0, x1 - X0))
    hog = integral(orientation_bins(dx[sl], dy[sl], p.hog_bins))
    hof = None
    if flow is not None:
        hof = integral(orientation_bins(flow.u[y0:y1, x0:x1], flow.v[y0:y1, x0:x1],
                                        p.hof_bins - 1, min_magnitude=p.min_flow_px))
    return hog, hof


def describe(trajectory: DenseTrajectory, frames, flows, p: DTParams = DTParams()):
    """HOG and HOF vectors of one trajectory (frames/flows at its scale)."""
    hogs, hofs = [], []
    for k in range(p.L):
        t = trajectory.start_frame + k
        hog_i, hof_i = _frame_maps(frames[t], flows[t], p)
        pt = trajectory.points[k:k + 1]
        hogs.append(patch_histograms(hog_i, pt, p)[0])
        hofs.append(patch_histograms(hof_i, pt, p)[0])
    return (finish_descriptor(_pool_time(np.array(hogs)[None], p))[0],
            finish_descriptor(_pool_time(np.array(hofs)[None], p))[0])


def _pool_time(per_frame, p: DTParams):
    """``(n, L, cells, bins)`` -> ``(n, n_t * cells, bins)`` by summing each temporal cell."""
    n, L, cells, bins = per_frame.shape
    return per_frame.reshape(n, p.n_t, L // p.n_t, cells, bins).sum(axis=2).reshape(n, p.n_t * cells, bins)


def _scale_video(frames, flows, scale):
    if scale == 1.0:
        return [np.asarray(f, dtype=float) for f in frames], list(flows)
    shape = scaled_shape(np.asarray(frames[0]).shape, scale)
    return [resize(f, shape) for f in frames], [fl.resized(scale) for fl in flows]


class _Tracker:
    """Trajectory state of one parameter set at one scale."""

    def __init__(self, p: DTParams, shape, n_frames):
        self.p = p
        self.shape = shape
        self.T = n_frames
        cells = p.n_x * p.n_y
        self.paths = np.zeros((0, p.L + 1, 2))
        self.hog = np.zeros((0, p.L, cells, p.hog_bins))
        self.hof = np.zeros((0, p.L, cells, p.hof_bins))
        self.start = np.zeros(0, dtype=np.int64)
        self.alive = np.zeros(0, dtype=bool)
        self.out = {"paths": [], "hog": [], "hof": [], "start": []}

    def _keep(self, rows):
        self.paths, self.hog, self.hof = self.paths[rows], self.hog[rows], self.hof[rows]
        self.start, self.alive = self.start[rows], self.alive[rows]

    def begin_frame(self, t, frame, eig):
        """Retire complete trajectories, then sample new points on frame ``t``."""
        p = self.p
        done = (t - self.start) == p.L
        if done.any():
            keep = done & self.alive
            keep[keep] = valid_paths(self.paths[keep], p)
            for key, arr in (("paths", self.paths), ("hog", self.hog), ("hof", self.hof),
                             ("start", self.start)):
                self.out[key].append(arr[keep])
            self._keep(~done)
        if t + p.L <= self.T - 1:
            idx = np.flatnonzero(self.alive)
            occ = occupancy(self.paths[idx, t - self.start[idx]], self.shape, p.sampling_step_px)
            new = sample_grid(frame, occ, p, eig=eig)
            m = len(new)
            if m:
                fresh = np.zeros((m, p.L + 1, 2))
                fresh[:, 0] = new
                self.paths = np.concatenate([self.paths, fresh])
                self.hog = np.concatenate([self.hog, np.zeros((m,) + self.hog.shape[1:])])
                self.hof = np.concatenate([self.hof, np.zeros((m,) + self.hof.shape[1:])])
                self.start = np.concatenate([self.start, np.full(m, t)])
                self.alive = np.concatenate([self.alive, np.ones(m, dtype=bool)])

    def current(self, t):
        return self.paths[np.arange(len(self.start)), t - self.start]

    def record(self, t, cur, edges, hog_i, hof_i, offset):
        idx = np.arange(len(self.start))
        step = t - self.start
        xe, ye = edges
        self.hog[idx, step] = _gather(hog_i, xe, ye, self.p, offset)
        self.hof[idx, step] = _gather(hof_i, xe, ye, self.p, offset)
        new, inside = _advance(cur, self._flow, self.shape)
        self.paths[idx, step + 1] = new
        self.alive &= inside

    def result(self):
        if not sum(len(s) for s in self.out["start"]):
            return None
        return tuple(np.concatenate(self.out[k]) for k in ("paths", "hog", "hof", "start"))


def _extract_scale(frames, flows, params, scale):
    """Run every parameter set in ``params`` over one scale, sharing the
    per-frame texture and histogram maps."""
    frames, flows = _scale_video(frames, flows, scale)
    T = len(frames)
    shape = frames[0].shape
    trackers = [_Tracker(p, shape, T) for p in params]
    p0 = params[0]
    for t in range(T):
        eig = min_eigenvalue(frames[t]) if any(t + p.L <= T - 1 for p in params) else None
        for tr in trackers:
            tr.begin_frame(t, frames[t], eig)
        active = [tr for tr in trackers if len(tr.start)]
        if not active:
            continue
        curs = [tr.current(t) for tr in active]
        edges = [patch_edges(c, shape, tr.p) for c, tr in zip(curs, active)]
        box = (min(ye.min() for _, ye in edges), max(ye.max() for _, ye in edges),
               min(xe.min() for xe, _ in edges), max(xe.max() for xe, _ in edges))
        hog_i, hof_i = _frame_maps(frames[t], flows[t], p0, box)
        for tr, cur, e in zip(active, curs, edges):
            tr._flow = flows[t]
            tr.record(t, cur, e, hog_i, hof_i, (box[0], box[2]))
    return [tr.result() for tr in trackers]


def _check_shared(params):
    keys = ("N", "n_x", "n_y", "sampling_step_px", "scales", "hog_bins", "hof_bins",
            "min_flow_px", "texture_quality")
    for p in params[1:]:
        for k in keys:
            if getattr(p, k) != getattr(params[0], k):
                raise ConfigError(f"parameter sets extracted together must share {k}")


def extract_many(frames, params, flows=None, trial_id="", keep_trajectories=False):
    """:func:`extract` for several parameter sets (e.g. ``L=15`` and ``L=5``)
    in one pass.  Returns one ``(hog, hof)`` pair per parameter set, each
    identical to what :func:`extract` returns for that set alone."""
    params = list(params)
    _check_shared(params)
    frames = [np.asarray(f, dtype=float) for f in frames]
    need = max(p.L for p in params) + 1
    if len(frames) < need:
        raise DataError(f"video has {len(frames)} frames; at least L+1 = {need} are required")
    if flows is None:
        flows = [estimate_flow(frames[i], frames[i + 1]) for i in range(len(frames) - 1)]
    if len(flows) != len(frames) - 1:
        raise DataError(f"expected {len(frames) - 1} flow fields, got {len(flows)}")
    for fl in flows:
        if (fl.height, fl.width) != frames[0].shape:
            raise DataError("flow field dimensions do not match the frames")
    collected = [{HOG: [], HOF: [], "start": [], "scale": [], "traj": []} for _ in params]
    for scale in params[0].scales:
        for p, acc, res in zip(params, collected, _extract_scale(frames, flows, params, scale)):
            if res is None:
                continue
            paths, hog, hof, start = res
            acc[HOG].append(finish_descriptor(_pool_time(hog, p)))
            acc[HOF].append(finish_descriptor(_pool_time(hof, p)))
            acc["start"].append(start)
            acc["scale"].append(np.full(len(start), scale))
            if keep_trajectories:
                acc["traj"].extend(DenseTrajectory(path, scale, int(s)) for path, s in zip(paths, start))
    results = []
    for p, acc in zip(params, collected):
        start_frames = np.concatenate(acc["start"]).astype(np.int64) if acc["start"] else np.zeros(0, np.int64)
        scale_arr = np.concatenate(acc["scale"]) if acc["scale"] else np.zeros(0)
        pair = []
        for ch in CHANNELS:
            vecs = np.concatenate(acc[ch]) if acc[ch] else np.zeros((0, p.dim(ch)))
            pair.append(DescriptorSet(ch, trial_id, vecs, start_frames.copy(), scale_arr.copy(), p.L,
                                      list(acc["traj"]) if keep_trajectories else None))
        results.append(tuple(pair))
    return results


def extract(frames, p: DTParams = DTParams(), flows=None, trial_id="", keep_trajectories=False):
    """Dense-trajectory HOG and HOF descriptor sets of one video.

    ``flows`` defaults to :func:`estimate_flow` between consecutive frames.
    Every descriptor records its trajectory's start frame; the end frame is
    ``start + L``.
    """
    return extract_many(frames, [p], flows, trial_id, keep_trajectories)[0]
