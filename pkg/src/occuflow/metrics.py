"""Chamfer distance, occupancy IoU/mIoU and a seeded occupancy corruptor."""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import PointCloud, SemanticOccupancyGrid

# candidates fetched from the tree before exact re-scoring
_KD_CANDIDATES = 8


def _points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("chamfer distance of an empty point cloud is undefined")
    return pts


def _sq_dist_min(a: np.ndarray, b: np.ndarray, cand: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[cand]
    return (diff * diff).sum(axis=-1).min(axis=1)


def nearest_sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each row of ``a``, the exact minimum squared distance to ``b``.

    The tree proposes candidates; the minimum is taken over squared distances
    recomputed in the same arithmetic as :func:`chamfer_bruteforce`.
    """
    k = min(_KD_CANDIDATES, len(b))
    _, cand = cKDTree(b).query(a, k=k)
    cand = np.asarray(cand).reshape(len(a), k)
    return _sq_dist_min(a, b, cand)


def chamfer(a, b) -> float:
    """Sum of the two directional means of nearest-neighbor squared distances, in m^2."""
    pa, pb = _points(a), _points(b)
    return float(nearest_sq_distances(pa, pb).mean() + nearest_sq_distances(pb, pa).mean())


def chamfer_bruteforce(a, b) -> float:
    pa, pb = _points(a), _points(b)
    ab = _sq_dist_min(pa, pb, np.broadcast_to(np.arange(len(pb)), (len(pa), len(pb))))
    ba = _sq_dist_min(pb, pa, np.broadcast_to(np.arange(len(pa)), (len(pb), len(pa))))
    return float(ab.mean() + ba.mean())


def _check_same(pred: SemanticOccupancyGrid, gt: SemanticOccupancyGrid) -> None:
    if pred.geometry != gt.geometry:
        raise ValueError(f"geometry mismatch: {pred.geometry} vs {gt.geometry}")


def binary_iou(pred: SemanticOccupancyGrid, gt: SemanticOccupancyGrid) -> float:
    _check_same(pred, gt)
    p, g = pred.occupied, gt.occupied
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def class_ious(pred: SemanticOccupancyGrid, gt: SemanticOccupancyGrid) -> dict[int, float]:
    """IoU of each non-free class present in ``gt``."""
    _check_same(pred, gt)
    out = {}
    for c in np.unique(gt.labels):
        if c == 0:
            continue
        p, g = pred.labels == c, gt.labels == c
        out[int(c)] = np.count_nonzero(p & g) / np.count_nonzero(p | g)
    return out


def occupancy_iou(pred: SemanticOccupancyGrid, gt: SemanticOccupancyGrid) -> tuple[float, float]:
    """``(IoU, mIoU)``. With no occupied class in ``gt`` the mIoU is 1.0 for an empty prediction, else 0.0."""
    iou = binary_iou(pred, gt)
    per = class_ious(pred, gt)
    if per:
        miou = float(np.mean(list(per.values())))
    else:
        miou = 1.0 if not pred.occupied.any() else 0.0
    return float(iou), miou


class UnreachableTarget(ValueError):
    pass


def _near_surface(labels: np.ndarray, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Free voxels within ``radius`` (Chebyshev) of an occupied voxel, and the nearest occupied label per voxel."""
    occ = labels != 0
    struct = np.ones((2 * radius + 1,) * 3, dtype=bool)
    near = ndimage.binary_dilation(occ, structure=struct) & ~occ
    _, idx = ndimage.distance_transform_edt(~occ, return_indices=True)
    nearest = labels[idx[0], idx[1], idx[2]]
    return near, nearest


def corrupt(
    grid: SemanticOccupancyGrid,
    target_iou: float,
    target_miou: float | None = None,
    seed: int = 0,
    radius: int = 2,
    iou_tol: float = 0.02,
    miou_tol: float = 0.03,
) -> SemanticOccupancyGrid:
    """Degrade ``grid`` to a measured IoU (and optionally mIoU) against itself.

    Occupied voxels are deleted and spurious voxels inserted within ``radius``
    voxels of existing surfaces, splitting the error evenly when capacity
    allows. Spurious voxels copy the label of their nearest surface. A random
    fraction of the remaining voxels is then relabeled to another non-free
    class to reach ``target_miou``.
    """
    if not (0.0 < target_iou <= 1.0):
        raise UnreachableTarget(f"target_iou must lie in (0, 1], got {target_iou}")
    if target_miou is not None and not (0.0 <= target_miou <= 1.0):
        raise UnreachableTarget(f"target_miou must lie in [0, 1], got {target_miou}")
    rng = np.random.default_rng(seed)
    labels = grid.labels.copy()
    n = int(np.count_nonzero(labels))
    if target_iou < 1.0:
        if n == 0:
            raise UnreachableTarget("cannot lower the IoU of a grid with no occupied voxels")
        near, nearest = _near_surface(labels, radius)
        cand = np.flatnonzero(near)
        occ = np.flatnonzero(labels)
        # even split: delete d, insert i = d with (n - d) / (n + i) = t
        d = int(round(n * (1.0 - target_iou) / (1.0 + target_iou)))
        i = int(round((n - d) / target_iou - n))
        if i > len(cand):
            i = len(cand)
            d = int(round(n - target_iou * (n + i)))
        d = min(max(d, 0), n)
        i = min(max(i, 0), len(cand))
        flat = labels.reshape(-1)
        drop = rng.choice(occ, size=d, replace=False) if d else np.empty(0, dtype=np.intp)
        add = rng.choice(cand, size=i, replace=False) if i else np.empty(0, dtype=np.intp)
        flat[add] = nearest.reshape(-1)[add]
        flat[drop] = 0
    out = grid.with_labels(labels)
    iou, miou = occupancy_iou(out, grid)
    if abs(iou - target_iou) > iou_tol:
        raise UnreachableTarget(f"IoU {iou:.4f} cannot be brought within {iou_tol} of {target_iou} on this grid")
    if target_miou is None or abs(miou - target_miou) <= miou_tol:
        return out
    if target_miou > miou:
        raise UnreachableTarget(f"target mIoU {target_miou} above the {miou:.4f} left after IoU corruption")
    return _relabel(out, grid, target_miou, miou_tol, rng)


def _relabel(out, grid, target_miou, tol, rng) -> SemanticOccupancyGrid:
    non_free = np.arange(1, len(grid.classes))
    if len(non_free) < 2:
        raise UnreachableTarget("relabeling needs at least two non-free classes")
    base = out.labels.reshape(-1)
    occ = np.flatnonzero(base)
    order = rng.permutation(occ)
    # a uniformly drawn different class per voxel
    shift = rng.integers(1, len(non_free), size=len(order))
    new = non_free[(np.searchsorted(non_free, base[order]) + shift) % len(non_free)].astype(np.uint8)

    def at(m: int):
        flat = base.copy()
        flat[order[:m]] = new[:m]
        g = out.with_labels(flat.reshape(out.dims))
        return g, occupancy_iou(g, grid)[1]

    lo, hi = 0, len(order)
    g_hi, miou_hi = at(hi)
    if miou_hi > target_miou + tol:
        raise UnreachableTarget(f"target mIoU {target_miou} below the {miou_hi:.4f} reached by relabeling everything")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        g, miou = at(mid)
        if abs(miou - target_miou) <= tol:
            return g
        if miou > target_miou:
            lo = mid
        else:
            hi = mid
    g, miou = at(hi)
    if abs(miou - target_miou) <= tol:
        return g
    raise UnreachableTarget(f"mIoU {miou:.4f} cannot be brought within {tol} of {target_miou}")
