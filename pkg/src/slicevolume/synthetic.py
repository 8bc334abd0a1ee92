"""Synthetic n-phase grain volumes with a log-normal grain-size spread.

Grains are cells of a periodic power (Laguerre) diagram: each voxel goes to
the grain maximising ``w_i - |x - c_i|^2``.  Centres come from polydisperse
Poisson-disk sampling, and weights are then calibrated so every cell reaches
the volume of a diameter drawn from the target log-normal law.

Phases are assigned per grain.  The phase with the largest fraction acts as
the matrix; grains of the other phases are kept from touching grains of
their own phase where possible, so that connected components of a minority
phase coincide with single grains and stay measurable by
:func:`slicevolume.metrics.grain_stats`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi
from scipy import optimize, stats
from scipy.spatial import cKDTree

from .metrics import grain_stats
from .volume import LabelVolume, axis_index

log = logging.getLogger(__name__)

PAPER_ALPHAS = (0.15, 0.35, 0.6)
MIN_DIAMETER_VOX = 2.5


class GrainSpecError(ValueError):
    pass


class FeasibilityError(GrainSpecError):
    pass


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class GrainSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    voxel_size_um: float = 0.125
    n_phases: int = 3
    mean_diameter_um: float = 0.57
    ln_sigma_g: float = 0.35
    phase_fractions: tuple[float, ...] = (0.8, 0.1, 0.1)
    seed: int = 0
    calibration_iters: int = 10

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "phase_fractions", tuple(float(f) for f in self.phase_fractions))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise GrainSpecError(f"dims must be 3 positive integers, got {self.dims}")
        if self.n_phases < 2:
            raise GrainSpecError(f"n_phases must be >= 2, got {self.n_phases}")
        if self.voxel_size_um <= 0:
            raise GrainSpecError("voxel_size_um must be positive")
        if not (self.ln_sigma_g >= 0 and math.isfinite(self.ln_sigma_g)):
            raise GrainSpecError(f"ln_sigma_g must be finite and >= 0, got {self.ln_sigma_g}")
        if len(self.phase_fractions) != self.n_phases:
            raise GrainSpecError(
                f"need {self.n_phases} phase fractions, got {len(self.phase_fractions)}"
            )
        if min(self.phase_fractions) < 0 or abs(sum(self.phase_fractions) - 1) > 1e-6:
            raise GrainSpecError(f"phase fractions must be >= 0 and sum to 1: {self.phase_fractions}")
        if self.mean_diameter_um <= self.voxel_size_um:
            raise GrainSpecError(
                f"mean diameter {self.mean_diameter_um} um must exceed the voxel size "
                f"{self.voxel_size_um} um"
            )

    @property
    def mean_diameter_vox(self) -> float:
        return self.mean_diameter_um / self.voxel_size_um

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["phase_fractions"] = list(self.phase_fractions)
        return d


# --- geometry -------------------------------------------------------------


def _voxel_centres(dims, x0: int = 0, x1: int | None = None) -> np.ndarray:
    x1 = dims[0] if x1 is None else x1
    axes = [np.arange(x0, x1) + 0.5, np.arange(dims[1]) + 0.5, np.arange(dims[2]) + 0.5]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)


def _wrap(d: np.ndarray, box: np.ndarray) -> np.ndarray:
    return d - np.round(d / box) * box


def _lifted_assign(centres, weights, box, pts) -> np.ndarray:
    """Exact power assignment of arbitrary points.  Lifting each centre to 4D
    with height ``sqrt(M - w)`` turns the power diagram into a plain
    nearest-neighbour query."""
    height = np.sqrt(weights.max() + 1.0 - weights)
    tree = cKDTree(np.column_stack([centres, height]),
                   boxsize=np.append(box, 4.0 * height.max() + 1.0))
    _, idx = tree.query(np.column_stack([pts, np.zeros(len(pts))]), k=1)
    return idx


def _fold_axis(best, owner, axis: int, pad: int, n: int):
    """Fold a ghost-padded axis back onto the periodic range ``[0, n)``."""
    length = best.shape[axis]
    shape = list(best.shape)
    shape[axis] = n
    out_b = np.full(shape, -np.inf)
    out_o = np.zeros(shape, dtype=owner.dtype)
    for start in range(0, length, n):
        stop = min(start + n, length)
        dst = (np.arange(start, stop) - pad) % n
        sb = np.take(best, np.arange(start, stop), axis=axis)
        so = np.take(owner, np.arange(start, stop), axis=axis)
        cb = np.take(out_b, dst, axis=axis)
        co = np.take(out_o, dst, axis=axis)
        m = sb > cb
        idx = [slice(None)] * best.ndim
        idx[axis] = dst
        out_b[tuple(idx)] = np.where(m, sb, cb)
        out_o[tuple(idx)] = np.where(m, so, co)
    return out_b, out_o


def power_assign(centres, weights, dims, floor: float | None = None,
                 return_score: bool = False):
    """Index of the grain maximising ``w - |x - c|^2`` for every voxel
    (periodic, flattened in C order).

    Each grain scores only the voxels inside the ball where its score can
    exceed ``floor``, splatted into a ghost-padded buffer that is folded back
    periodically.  Voxels whose best score ends below ``floor`` are not
    certified by that and are resolved by an exact lifted nearest-neighbour
    query, so the result is exact for any ``floor``; a good floor only makes
    it fast.
    """
    dims = tuple(int(d) for d in dims)
    box = np.asarray(dims, dtype=np.float64)
    centres = np.where(centres >= box, 0.0, centres)
    weights = np.asarray(weights, dtype=np.float64)
    if floor is None:
        spacing = (np.prod(box) / len(weights)) ** (1 / 3)
        floor = float(weights.min()) - (2.0 * spacing) ** 2
    reach = np.sqrt(np.maximum(weights - floor, 0.0))
    live = np.flatnonzero(weights > floor)
    # a grain reaching across half the domain is not splatted; then no voxel
    # is certified and everything goes through the exact fallback
    certified = bool((reach[live] < 0.5 * box.min()).all())
    if not certified:
        live = live[:0]
    lo = np.ceil(centres[live] - 0.5 - reach[live, None]).astype(np.int64)
    hi = np.floor(centres[live] - 0.5 + reach[live, None]).astype(np.int64)
    pad = int(max(0, -lo.min(initial=0), (hi - (np.array(dims) - 1)).max(initial=0)))
    best = np.full(tuple(d + 2 * pad for d in dims), -np.inf)
    owner = np.zeros(best.shape, dtype=np.int64)
    for k, i in enumerate(live):
        (x0, y0, z0), (x1, y1, z1) = lo[k], hi[k] + 1
        if x1 <= x0 or y1 <= y0 or z1 <= z0:
            continue
        c = centres[i]
        dx = (np.arange(x0, x1) + 0.5 - c[0]) ** 2
        dy = (np.arange(y0, y1) + 0.5 - c[1]) ** 2
        dz = (np.arange(z0, z1) + 0.5 - c[2]) ** 2
        sc = weights[i] - (dx[:, None, None] + dy[None, :, None] + dz[None, None, :])
        sel = (slice(x0 + pad, x1 + pad), slice(y0 + pad, y1 + pad), slice(z0 + pad, z1 + pad))
        b = best[sel]
        m = sc > b
        b[m] = sc[m]
        owner[sel][m] = i
    for ax in range(3):
        best, owner = _fold_axis(best, owner, ax, pad, dims[ax])
    owner, best = owner.ravel(), best.ravel()
    loose = np.flatnonzero(best < floor) if certified else np.arange(len(best))
    if len(loose):
        pts = np.stack(np.unravel_index(loose, dims), 1) + 0.5
        idx = _lifted_assign(centres, weights, box, pts)
        owner[loose] = idx
        best[loose] = weights[idx] - (_wrap(pts - centres[idx], box) ** 2).sum(1)
    return (owner, best) if return_score else owner


def _clear_of(tree, members, centres, radii, cand, r, reach, k_near, box) -> np.ndarray:
    """True where a candidate sphere (centre ``cand``, radius ``r``) overlaps
    none of the spheres ``members`` indexed by ``tree``.  ``reach`` bounds
    ``r + radii`` from above."""
    dist, idx = tree.query(cand, k=k_near, distance_upper_bound=reach)
    hit = idx < len(members)
    rad = radii[members[np.where(hit, idx, 0)]]
    ok = ~(hit & (dist < rad + r[:, None])).any(1)
    for j in np.flatnonzero(ok & hit[:, -1]):
        # more neighbours in range than queried: check them all
        others = members[tree.query_ball_point(cand[j], reach)]
        dd = _wrap(centres[others] - cand[j], box)
        ok[j] = bool(((dd**2).sum(-1) >= (radii[others] + r[j]) ** 2).all())
    return ok


def _in_box(x: np.ndarray, box: np.ndarray) -> np.ndarray:
    return np.where(x >= box, 0.0, x)


def poisson_disk_centres(radii, dims, rng: np.random.Generator, batch: int = 8,
                         max_batches: int = 1600, chunk: int = 256, k_near: int = 24,
                         size_tolerance: float = 0.9) -> np.ndarray:
    """Random sequential placement of non-overlapping spheres, largest first.

    Grains are placed a chunk at a time, in order of decreasing radius.  Each
    grain of the chunk draws ``batch`` candidate centres per round and keeps
    the first one clear of the spheres already placed.  Overlaps inside the
    chunk are settled in favour of the larger grain, and the losers retry in
    the next round.  Once a grain fails in a round, grains smaller than
    ``size_tolerance`` times its radius wait as well, so big grains are not
    crowded out by small ones placed ahead of them.  Placed spheres live in a periodic KD-tree that is rebuilt
    once the spheres added since the last build pass an eighth of the total.
    The newer ones sit in a second, small tree.
    """
    box = np.asarray(dims, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    n = len(radii)
    centres = np.zeros((n, 3))
    pending = np.argsort(-radii, kind="stable")
    tries = np.zeros(n, dtype=np.int64)
    placed = np.empty(0, dtype=np.int64)
    recent = np.empty(0, dtype=np.int64)
    tree = None
    r_max = float(radii.max()) if n else 0.0
    while len(pending):
        grains = pending[:max(chunk, len(placed) // 16)]
        g = len(grains)
        r = np.repeat(radii[grains], batch)
        reach = float(radii[grains].max()) + r_max
        cand = _in_box(rng.uniform(0.0, 1.0, (g * batch, 3)) * box, box)
        ok = np.ones(g * batch, dtype=bool)
        if tree is not None:
            ok &= _clear_of(tree, placed[:tree.n], centres, radii, cand, r, reach, k_near, box)
        if len(recent):
            small = cKDTree(centres[recent], boxsize=box)
            ok &= _clear_of(small, recent, centres, radii, cand, r, reach, k_near, box)
        ok = ok.reshape(g, batch)
        chosen = cand.reshape(g, batch, 3)[np.arange(g), ok.argmax(1)]
        accept = ok.any(1)
        idx = np.flatnonzero(accept)
        if len(idx) > 1:
            pairs = cKDTree(chosen[idx], boxsize=box).query_pairs(
                2.0 * float(radii[grains[idx]].max()), output_type="ndarray")
            if len(pairs):
                a, b = idx[pairs[:, 0]], idx[pairs[:, 1]]
                d2 = (_wrap(chosen[a] - chosen[b], box) ** 2).sum(1)
                clash = d2 < (radii[grains[a]] + radii[grains[b]]) ** 2
                a, b = np.minimum(a, b)[clash], np.maximum(a, b)[clash]
                # earlier (larger) grain wins; walk the clashes by later index
                for i, j in zip(a[np.argsort(b, kind="stable")], np.sort(b, kind="stable")):
                    if accept[i]:
                        accept[j] = False
        failed = ~accept
        if failed.any():
            # nothing much smaller may jump ahead of a grain that failed
            f = int(np.argmax(failed))
            held = radii[grains] < size_tolerance * radii[grains[f]]
            accept &= ~held
            failed &= ~held
        centres[grains[accept]] = chosen[accept]
        placed = np.concatenate([placed, grains[accept]])
        recent = np.concatenate([recent, grains[accept]])
        tries[grains[failed]] += batch
        if (tries >= batch * max_batches).any():
            r_bad = radii[np.flatnonzero(tries >= batch * max_batches)[0]]
            raise FeasibilityError(
                f"could not place grain of radius {r_bad:.2f} voxels; spec too dense for dims {dims}"
            )
        pending = np.concatenate([grains[~accept], pending[g:]])
        if len(recent) >= max(chunk, len(placed) // 8):
            tree = cKDTree(centres[placed], boxsize=box)
            recent = recent[:0]
    return centres


def truncated_lognormal_params(mean_d: float, ln_sigma: float, d_min: float):
    """Location/scale of a log-normal truncated below ``d_min`` whose mean is
    ``mean_d`` and whose log-diameter standard deviation is ``ln_sigma``."""
    if ln_sigma == 0:
        return math.log(mean_d), 0.0
    lo = math.log(d_min)

    def moments(p):
        mu, s = p[0], math.exp(p[1])
        a = (lo - mu) / s
        tail = max(stats.norm.sf(a), 1e-300)
        mean = math.exp(mu + 0.5 * s * s) * stats.norm.sf(a - s) / tail
        return mean, stats.truncnorm.std(a, np.inf, loc=mu, scale=s)

    def resid(p):
        m, sd = moments(p)
        return [math.log(m / mean_d), sd / ln_sigma - 1.0]

    x0 = [math.log(mean_d) - 0.5 * ln_sigma**2, math.log(ln_sigma)]
    sol, _, ier, msg = optimize.fsolve(resid, x0, full_output=True)
    if ier != 1 or max(abs(r) for r in resid(sol)) > 1e-6:
        raise FeasibilityError(
            f"no truncated log-normal with mean {mean_d:.2f} and ln sigma {ln_sigma} "
            f"above {d_min:.2f} voxels: {msg}"
        )
    return float(sol[0]), float(math.exp(sol[1]))


def resolved_size_law(mean_d: float, ln_sigma: float, max_scale_ratio: float = 1.4):
    """Truncation point and log-normal parameters used for grain diameters.

    The cut starts at ``MIN_DIAMETER_VOX`` (or 0.6 of the mean for coarse
    grids) and is lowered in 0.1 voxel steps until a truncated law with the
    requested mean and spread exists whose underlying scale is at most
    ``max_scale_ratio * ln_sigma``; wide spreads at small mean diameters need
    a lower cut.  Returns ``(d_min, mu, s)``.
    """
    d_min = min(MIN_DIAMETER_VOX, 0.6 * mean_d)
    while d_min > 0.5 - 1e-9:
        try:
            mu, s = truncated_lognormal_params(mean_d, ln_sigma, d_min)
        except FeasibilityError:
            mu, s = None, None
        if s is not None and s <= max_scale_ratio * ln_sigma + 1e-12:
            return d_min, mu, s
        d_min = round(d_min - 0.1, 10)
    raise FeasibilityError(
        f"no resolvable size law with mean {mean_d:.2f} voxels and ln sigma {ln_sigma}"
    )


def _target_volumes(spec: GrainSpec, rng: np.random.Generator) -> np.ndarray:
    """Grain volumes (voxels) summing to the domain volume.

    Diameters below ``MIN_DIAMETER_VOX`` cannot be voxelised faithfully, so
    the law is truncated there with parameters re-solved to keep the target
    mean and ln sigma_g.
    """
    D = spec.mean_diameter_vox
    d_min, mu, s = resolved_size_law(D, spec.ln_sigma_g)
    a = (math.log(d_min) - mu) / s if s > 0 else -np.inf
    total = float(np.prod(spec.dims))
    probe = np.exp(mu + s * stats.truncnorm.rvs(a, np.inf, size=4096,
                                                random_state=np.random.default_rng(0)))
    mean_vol = float(np.mean(math.pi / 6.0 * probe**3))
    expected = total / mean_vol
    if D > min(spec.dims) / 2 or expected < 2:
        raise FeasibilityError(
            f"mean diameter {D:.2f} voxels is too large for dims {spec.dims} "
            f"(expected {expected:.1f} grains)"
        )
    n = max(2, int(rng.poisson(expected)))
    if s > 0:
        d = np.exp(mu + s * stats.truncnorm.rvs(a, np.inf, size=n, random_state=rng))
    else:
        d = np.full(n, D)
    vol = math.pi / 6.0 * d**3
    return vol * (total / vol.sum())


def tessellate(spec: GrainSpec, rng: np.random.Generator, packing_scale: float = 0.6,
               step: float = 0.5):
    """Grain index per voxel (flattened, C order) and the target volumes."""
    target = _target_volumes(spec, rng)
    radii = packing_scale * 0.5 * (6.0 / math.pi * target) ** (1 / 3)
    centres = poisson_disk_centres(radii, spec.dims, rng)
    weights = radii**2
    box = np.asarray(spec.dims, dtype=np.float64)
    grid = None
    n = len(target)
    floor = None
    for _ in range(spec.calibration_iters):
        owner, score = power_assign(centres, weights, spec.dims, floor, return_score=True)
        floor = float(score.min()) - 1.0
        vol = np.bincount(owner, minlength=n).astype(np.float64)
        if grid is None and np.prod(spec.dims) <= 1 << 22:
            grid = _voxel_centres(spec.dims)
        if grid is not None:
            # Lloyd step towards the cell centroids
            disp = _wrap(grid - centres[owner], box)
            shift = np.stack([np.bincount(owner, disp[:, k], minlength=n) for k in range(3)], 1)
            live = vol > 0
            centres[live] = np.mod(centres[live] + shift[live] / vol[live, None], box)
        weights = weights + step * (target ** (2 / 3) - vol ** (2 / 3))
    return power_assign(centres, weights, spec.dims, floor), target


def grain_adjacency(owner: np.ndarray, n: int) -> list[np.ndarray]:
    """Face-neighbour lists of the grains (periodic)."""
    pairs = []
    for ax in range(owner.ndim):
        b = np.roll(owner, -1, axis=ax)
        m = owner != b
        pairs.append(np.stack([owner[m], b[m]], 1))
    p = np.concatenate(pairs) if pairs else np.empty((0, 2), dtype=np.int64)
    p = np.unique(np.sort(p, axis=1), axis=0)
    p = np.concatenate([p, p[:, ::-1]])
    p = p[np.lexsort((p[:, 1], p[:, 0]))]
    splits = np.searchsorted(p[:, 0], np.arange(1, n))
    return np.split(p[:, 1], splits)


def assign_phases(volumes, neighbours, fractions, rng: np.random.Generator,
                  order_exponent: float = 0.5, overshoot: float = 0.01) -> np.ndarray:
    """Phase per grain.

    Grains are visited in a random order weighted by ``volume**order_exponent``.
    A minority phase is eligible while the grain fits in its volume target
    (plus ``overshoot`` of the domain) and no neighbour already carries it;
    the choice among eligible phases is proportional to their remaining
    deficit.  Everything else joins the matrix phase.  Isolation is never
    relaxed: a minority phase that cannot reach its target ends up short,
    which is logged.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    n = len(volumes)
    total = float(volumes.sum())
    matrix = int(np.argmax(fr))
    target = fr * total
    acc = np.zeros(len(fr))
    phase = np.full(n, -1, dtype=np.int64)
    minority = [q for q in range(len(fr)) if q != matrix and fr[q] > 0]
    slack = overshoot * total
    key = np.log(rng.uniform(1e-300, 1.0, n)) / np.maximum(volumes, 1.0) ** order_exponent
    for g in np.argsort(-key, kind="stable"):
        vg = volumes[g]
        choice = matrix
        if vg > 0:
            nb = phase[neighbours[g]]
            cands = [q for q in minority
                     if acc[q] + 0.5 * vg <= target[q] and acc[q] + vg <= target[q] + slack
                     and not (nb == q).any()]
            if cands:
                deficit = np.array([max(target[q] - acc[q], 1e-9) for q in cands])
                choice = cands[int(rng.choice(len(cands), p=deficit / deficit.sum()))]
        phase[g] = choice
        acc[choice] += vg
    for q in minority:
        if acc[q] < target[q] - 0.02 * total:
            log.warning("phase %d reached fraction %.3f of target %.3f without touching "
                        "its own grains", q, acc[q] / total, fr[q])
    return phase


def generate_grain_volume(spec: GrainSpec) -> LabelVolume:
    rng = np.random.default_rng(spec.seed)
    owner, _ = tessellate(spec, rng)
    n = int(owner.max()) + 1
    owner = owner.reshape(spec.dims)
    volumes = np.bincount(owner.ravel(), minlength=n).astype(np.float64)
    phase = assign_phases(volumes, grain_adjacency(owner, n), spec.phase_fractions, rng)
    labels = phase[owner].astype(np.uint8)
    _absorb_fragments(labels, owner, volumes, int(np.argmax(spec.phase_fractions)))
    return LabelVolume(labels, spec.n_phases, spec.voxel_size_um)


def _absorb_fragments(labels, owner, volumes, matrix: int):
    """Hand digitisation fragments of minority grains to the matrix phase.

    A voxelised power cell can split into a main body and a few loose voxels;
    a component holding less than half of its grain's voxels is such a piece.
    """
    for q in np.unique(labels):
        if q == matrix:
            continue
        comp, n = ndi.label(labels == q)
        if n == 0:
            continue
        sizes = np.bincount(comp.ravel(), minlength=n + 1)
        first = np.full(n + 1, -1, dtype=np.int64)
        flat = comp.ravel()
        nz = np.flatnonzero(flat)
        first[flat[nz[::-1]]] = nz[::-1]
        grain = owner.ravel()[first[1:]]
        border = np.zeros(n + 1, dtype=bool)
        for ax in range(comp.ndim):
            for end in (0, -1):
                border[np.take(comp, end, axis=ax)] = True
        frag = np.flatnonzero((sizes[1:] < 0.5 * volumes[grain]) & ~border[1:]) + 1
        if len(frag):
            labels[np.isin(comp, frag)] = matrix


@dataclass
class SelfCheck:
    target_ln_sigma_g: float
    fitted_ln_sigma_g: float | None
    target_mean_diameter_um: float
    fitted_mean_diameter_um: float | None
    n_grains: int
    ln_sigma_tol: float = 0.1
    mean_rel_tol: float = 0.2
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def self_check(v: LabelVolume, spec: GrainSpec) -> SelfCheck:
    rep = grain_stats(v)
    sc = SelfCheck(spec.ln_sigma_g, rep.ln_sigma_g, spec.mean_diameter_um,
                   rep.mean_diameter_um, rep.count)
    sc.checks["ln_sigma_g"] = (
        rep.ln_sigma_g is not None and abs(rep.ln_sigma_g - spec.ln_sigma_g) <= sc.ln_sigma_tol
    )
    sc.checks["mean_diameter"] = (
        rep.mean_diameter_um is not None
        and abs(rep.mean_diameter_um / spec.mean_diameter_um - 1) <= sc.mean_rel_tol
    )
    return sc


# --- datasets and ingestion -----------------------------------------------


def make_dataset(v: LabelVolume, axis, indices, patch_size: int, alpha: float):
    """Training dataset from selected slices of ``v``."""
    from .training import Dataset

    ax = axis_index(axis)
    extent = v.dims[ax]
    indices = [int(i) for i in np.atleast_1d(indices)]
    if not indices:
        raise IndexError("at least one slice index is required")
    for i in indices:
        if not 0 <= i < extent:
            raise IndexError(f"slice index {i} out of range for axis extent {extent}")
    images = [np.take(v.labels, i, axis=ax) for i in indices]
    return Dataset(images, v.n_phases, patch_size, alpha)


def ingest_tiff_stack(path, n_phases: int, voxel_size_um: float | None = None) -> LabelVolume:
    """Multi-page TIFF of integer labels -> LabelVolume.

    Pages map to z, rows to x and columns to y.
    """
    import tifffile

    path = Path(path)
    try:
        arr = tifffile.imread(path)
    except (OSError, ValueError, tifffile.TiffFileError) as e:
        raise IngestionError(f"{path}: cannot read TIFF: {e}") from None
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise IngestionError(f"{path}: expected a stack of 2D pages, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise IngestionError(f"{path}: non-integer pixel values (greyscale input is not supported)")
        arr = arr.astype(np.int64)
    bad = (arr < 0) | (arr >= n_phases)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise IngestionError(f"{path}: pixel {idx} has value {arr[idx]}, outside [0, {n_phases})")
    return LabelVolume(np.transpose(arr, (1, 2, 0)), n_phases, voxel_size_um)
