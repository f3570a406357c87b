"""Oriented-box geometry: corners, separating-axis overlap, and a sampling oracle."""

import math

import numpy as np


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def box_corners(center, length, width, heading):
    """Return the 4x2 corner array of an oriented rectangle, counter-clockwise."""
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center, dtype=np.float64)


def _axes(heading):
    c, s = math.cos(heading), math.sin(heading)
    return np.array([[c, s], [-s, c]])


def boxes_overlap(box_a, box_b) -> bool:
    """Separating-axis test for two oriented boxes.

    Each box is ``(center, length, width, heading)``. Touching boxes count
    as overlapping.
    """
    ca = box_corners(*box_a)
    cb = box_corners(*box_b)
    for axis in np.vstack([_axes(box_a[3]), _axes(box_b[3])]):
        pa = ca @ axis
        pb = cb @ axis
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


def separation_margin(box_a, box_b) -> float:
    """Signed distance-like margin: largest projected gap over the SAT axes.

    Positive means separated along some axis, negative means overlap depth
    along the best axis. Used to skip near-tangent cases in oracle checks.
    """
    ca = box_corners(*box_a)
    cb = box_corners(*box_b)
    best = -math.inf
    for axis in np.vstack([_axes(box_a[3]), _axes(box_b[3])]):
        pa = ca @ axis
        pb = cb @ axis
        gap = max(pb.min() - pa.max(), pa.min() - pb.max())
        best = max(best, gap)
    return best


def point_in_box(points, box) -> np.ndarray:
    center, length, width, heading = box
    rel = np.asarray(points, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    c, s = math.cos(heading), math.sin(heading)
    lon = rel[..., 0] * c + rel[..., 1] * s
    lat = -rel[..., 0] * s + rel[..., 1] * c
    return (np.abs(lon) <= 0.5 * length) & (np.abs(lat) <= 0.5 * width)


def sampled_overlap(box_a, box_b, n: int = 200) -> bool:
    """Brute-force overlap oracle by dense sampling.

    Samples an ``n x n`` grid over each box (boundary included) and checks
    containment in the other box. Independent of the projection logic in
    :func:`boxes_overlap`; it can miss overlaps thinner than the grid pitch,
    so agreement is only expected away from tangency.
    """
    u = np.linspace(-0.5, 0.5, n)
    gu, gv = np.meshgrid(u, u, indexing="ij")
    for this, other in ((box_a, box_b), (box_b, box_a)):
        center, length, width, heading = this
        c, s = math.cos(heading), math.sin(heading)
        lon = gu.ravel() * length
        lat = gv.ravel() * width
        pts = np.stack([center[0] + lon * c - lat * s, center[1] + lon * s + lat * c], axis=-1)
        if point_in_box(pts, other).any():
            return True
    return False
