"""Static BEV lane map: point aggregation, occupancy grid, cleanup, lines.

Grids are stored row-major with ``counts[i, j]`` covering
x in [ox + j r, ox + (j+1) r) and z in [oz + i r, oz + (i+1) r).
Outside the grid every operation sees empty cells.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import Pose, Pose2, project_to_se2

DEFAULT_RESOLUTION = 0.1
DEFAULT_DENSITY_M = 5
DEFAULT_DENSITY_MIN_FG = 8
DEFAULT_ASSIGN_RADIUS = 0.5
THIN_MARKING_MIN_FG = 4
LANE_FIELDS = ["lane_id", "x", "z"]

_FULL3 = np.ones((3, 3), dtype=bool)


@dataclass
class OccupancyGrid:
    resolution: float
    origin: tuple[float, float]
    counts: np.ndarray
    dropped: int = 0

    def __post_init__(self) -> None:
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise ValueError("counts must be a 2D array (height, width)")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        self.counts = counts.astype(np.int64)
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def height(self) -> int:
        return self.counts.shape[0]

    @property
    def width(self) -> int:
        return self.counts.shape[1]

    def occupied(self) -> np.ndarray:
        return self.counts > 0

    def cell_centers(self) -> np.ndarray:
        """(n, 2) world (x, z) centres of the nonzero cells, in raster order."""
        i, j = np.nonzero(self.counts)
        r = self.resolution
        return np.stack([self.origin[0] + (j + 0.5) * r, self.origin[1] + (i + 0.5) * r], axis=-1)

    def with_counts(self, counts: np.ndarray) -> "OccupancyGrid":
        return OccupancyGrid(self.resolution, self.origin, counts)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.origin == other.origin
            and np.array_equal(self.counts, other.counts)
        )

    def to_text(self) -> str:
        ox, oz = self.origin
        lines = [f"GRID {float(self.resolution)!r} {ox!r} {oz!r} {self.width} {self.height}"]
        lines += [" ".join(str(int(v)) for v in row) for row in self.counts]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "OccupancyGrid":
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        if not rows or rows[0][0] != "GRID" or len(rows[0]) != 6:
            raise ValueError("grid file must start with 'GRID res ox oz width height'")
        res, ox, oz = (float(v) for v in rows[0][1:4])
        width, height = int(rows[0][4]), int(rows[0][5])
        body = rows[1:]
        if len(body) != height or any(len(r) != width for r in body):
            raise ValueError(f"grid body must be {height} rows of {width} integers")
        counts = np.array([[int(v) for v in r] for r in body], dtype=np.int64).reshape(height, width)
        return cls(res, (ox, oz), counts)

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: Path) -> "OccupancyGrid":
        return cls.from_text(Path(path).read_text())


@dataclass
class LanePointCloud:
    lane_id: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)


@dataclass(frozen=True)
class LineSegment:
    """Line in normal form rho = x cos(angle) + z sin(angle)."""

    angle: float
    offset: float
    support: int

    def distance(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        return np.abs(pts[:, 0] * math.cos(self.angle) + pts[:, 1] * math.sin(self.angle) - self.offset)


# ---------------------------------------------------------------------------
# aggregation and rasterisation


def aggregate_window(
    per_frame_points: Sequence[np.ndarray],
    poses: Sequence[Pose],
    window: int,
    depth_cutoff: float = 5.0,
) -> np.ndarray:
    """World-frame points from the trailing ``window`` frames.

    Only camera-frame points with z <= ``depth_cutoff`` are kept, where the
    flat-ground lift is most reliable.
    """
    if len(per_frame_points) != len(poses):
        raise ValueError(f"{len(per_frame_points)} point sets for {len(poses)} poses")
    if window < 1:
        raise ValueError("window must be >= 1")
    out = []
    start = max(0, len(poses) - window)
    for pts, pose in zip(per_frame_points[start:], poses[start:]):
        p2 = pose if isinstance(pose, Pose2) else project_to_se2(pose)
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        pts = pts[pts[:, 1] <= depth_cutoff]
        out.append(pts @ p2.rotation.T + p2.translation)
    if not out:
        return np.zeros((0, 2))
    return np.concatenate(out)


def rasterize(
    points: np.ndarray, resolution: float, origin: tuple[float, float], width: int, height: int
) -> OccupancyGrid:
    """Floor-bin points into a count grid; out-of-bounds points are tallied in ``dropped``."""
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    counts = np.zeros((height, width), dtype=np.int64)
    j = np.floor((pts[:, 0] - origin[0]) / resolution).astype(np.int64)
    i = np.floor((pts[:, 1] - origin[1]) / resolution).astype(np.int64)
    inside = (i >= 0) & (i < height) & (j >= 0) & (j < width)
    np.add.at(counts, (i[inside], j[inside]), 1)
    return OccupancyGrid(resolution, origin, counts, dropped=int((~inside).sum()))


# ---------------------------------------------------------------------------
# grid cleanup


def neighborhood_counts(occupied: np.ndarray, m: int) -> np.ndarray:
    """Number of occupied cells in each m x m neighbourhood (zero outside the grid)."""
    return ndimage.convolve(occupied.astype(np.int64), np.ones((m, m), dtype=np.int64), mode="constant", cval=0)


def density_filter(
    grid: OccupancyGrid, m: int = DEFAULT_DENSITY_M, min_fg: int = DEFAULT_DENSITY_MIN_FG
) -> OccupancyGrid:
    """Keep occupied cells whose m x m neighbourhood holds more than ``min_fg`` occupied cells."""
    if m < 1 or m % 2 == 0:
        raise ValueError("m must be odd and >= 1")
    occ = grid.occupied()
    keep = occ & (neighborhood_counts(occ, m) > min_fg)
    return grid.with_counts(np.where(keep, grid.counts, 0))


def morphology(grid: OccupancyGrid, op: str) -> OccupancyGrid:
    """Binary opening or closing with a full 3x3 element over an unbounded empty plane."""
    if op not in ("open", "close"):
        raise ValueError("op must be 'open' or 'close'")
    pad = 2
    occ = np.pad(grid.occupied(), pad)
    if op == "open":
        out = ndimage.binary_dilation(ndimage.binary_erosion(occ, _FULL3), _FULL3)
    else:
        out = ndimage.binary_erosion(ndimage.binary_dilation(occ, _FULL3), _FULL3)
    out = out[pad:-pad, pad:-pad]
    return grid.with_counts(out.astype(np.int64))


# ---------------------------------------------------------------------------
# Hough lines


@dataclass
class HoughAccumulator:
    angles: np.ndarray  # (n_angles,)
    rho_resolution: float
    half_bins: int  # rho bin k holds rho ~ (k - half_bins) * rho_resolution
    votes: np.ndarray  # (n_angles, 2 * half_bins + 1)

    def rho(self, k: int) -> float:
        return (k - self.half_bins) * self.rho_resolution


def hough_band_resolution(grid: OccupancyGrid, rho_resolution: float | None = None) -> float:
    """The rho bin width used for ``grid``: two cells unless given."""
    rho_res = 2.0 * grid.resolution if rho_resolution is None else float(rho_resolution)
    if not rho_res > 0:
        raise ValueError("rho_resolution must be positive")
    return rho_res


def hough_accumulator(grid: OccupancyGrid, angle_bins: int = 180, rho_resolution: float | None = None) -> HoughAccumulator:
    """Vote every occupied cell centre into (angle, rho) bins.

    Angles cover [0, pi). Rho bins are symmetric about zero so that the line
    (angle, rho) and its twin (angle + pi, -rho) map to mirrored indices.
    The default rho bin is two cells wide: the centres of a rasterised line
    scatter up to one cell across it, and narrower bins split its votes.
    """
    if angle_bins < 2:
        raise ValueError("angle_bins must be >= 2")
    rho_res = hough_band_resolution(grid, rho_resolution)
    angles = np.arange(angle_bins) * (math.pi / angle_bins)
    pts = grid.cell_centers()
    corners = np.array([
        [grid.origin[0], grid.origin[1]],
        [grid.origin[0] + grid.width * grid.resolution, grid.origin[1] + grid.height * grid.resolution],
    ])
    rho_max = float(np.abs(corners).max()) * math.sqrt(2.0)
    half = int(math.ceil(rho_max / rho_res)) + 1
    votes = np.zeros((angle_bins, 2 * half + 1), dtype=np.int64)
    if len(pts):
        rho = pts[:, :1] * np.cos(angles) + pts[:, 1:] * np.sin(angles)  # (n, angles)
        k = np.round(rho / rho_res).astype(np.int64) + half
        a = np.broadcast_to(np.arange(angle_bins), k.shape)
        np.add.at(votes, (a.ravel(), k.ravel()), 1)
    return HoughAccumulator(angles, rho_res, half, votes)


def _wrapped_neighbors(acc: HoughAccumulator, a: int, k: int) -> list[tuple[int, int]]:
    n, nk = acc.votes.shape
    out = []
    for da in (-1, 0, 1):
        for dk in (-1, 0, 1):
            if da == 0 and dk == 0:
                continue
            aa, kk = a + da, k + dk
            if aa < 0 or aa >= n:
                # crossing angle 0/pi flips the sign of rho
                aa %= n
                kk = 2 * acc.half_bins - (k + dk)
            if 0 <= kk < nk:
                out.append((aa, kk))
    return out


def hough_lines(
    grid: OccupancyGrid,
    angle_bins: int = 180,
    rho_resolution: float | None = None,
    min_support: int = 10,
) -> list[LineSegment]:
    """Lines with at least ``min_support`` votes, found by voting with removal.

    The strongest accumulator bin (the centre of a flat peak) seeds a line
    that is refined by a total least squares fit to the cells within 1.5
    rho bins of it. Those cells are then removed and the rest vote again,
    so the secondary maxima of a discretised line never become extra lines
    and a line split across two rho bins is still recovered at its true
    angle. ``support`` counts the cells within the band of the final line
    that no earlier line claimed. Lines are returned in the order found.
    """
    rho_res = hough_band_resolution(grid, rho_resolution)
    pts = grid.cell_centers()
    occupied = np.nonzero(grid.counts)
    keep = np.ones(len(pts), dtype=bool)
    band = 1.5 * rho_res
    lines: list[LineSegment] = []
    while keep.any():
        counts = np.zeros_like(grid.counts)
        counts[occupied] = keep  # cell_centers uses the same raster order
        acc = hough_accumulator(grid.with_counts(counts), angle_bins, rho_res)
        a, k = (int(i) for i in np.unravel_index(np.argmax(acc.votes), acc.votes.shape))
        if acc.votes[a, k] < max(min_support, 1):
            break
        a, k = _plateau_centre(acc, _plateau(acc, a, k))
        line = _refine_line(pts[keep], LineSegment(float(acc.angles[a]), acc.rho(k), 0), band)
        near = keep & (line.distance(pts) <= band)
        if not near.any():
            break
        lines.append(LineSegment(line.angle, line.offset, int(near.sum())))
        keep &= ~near
    return lines


def _refine_line(pts: np.ndarray, line: LineSegment, band: float, rounds: int = 3) -> LineSegment:
    """Total least squares fit to the points within ``band`` of ``line``, repeated."""
    for _ in range(rounds):
        sel = pts[line.distance(pts) <= band]
        if len(sel) < 2:
            break
        c = sel.mean(axis=0)
        normal = np.linalg.svd(sel - c)[2][1]
        angle = math.atan2(normal[1], normal[0])
        offset = float(normal @ c)
        # keep angles in [0, pi) like the accumulator
        if angle < 0:
            angle, offset = angle + math.pi, -offset
        if angle >= math.pi:
            angle, offset = angle - math.pi, -offset
        line = LineSegment(angle, offset, 0)
    return line


def _plateau(acc: HoughAccumulator, a: int, k: int) -> list[tuple[int, int]]:
    """Bins connected to (a, k) through neighbours holding the same vote count."""
    v = acc.votes[a, k]
    seen = {(a, k)}
    stack = [(a, k)]
    while stack:
        cur = stack.pop()
        for nb in _wrapped_neighbors(acc, *cur):
            if nb not in seen and acc.votes[nb] == v:
                seen.add(nb)
                stack.append(nb)
    return sorted(seen)


def _plateau_centre(acc: HoughAccumulator, plateau: list[tuple[int, int]]) -> tuple[int, int]:
    if len(plateau) == 1:
        return plateau[0]
    # unwrap bins that crossed angle 0/pi back next to the first one
    n = acc.votes.shape[0]
    a0 = plateau[0][0]
    pts = []
    for a, k in plateau:
        if a - a0 > n // 2:
            a, k = a - n, 2 * acc.half_bins - k
        pts.append((a, k))
    arr = np.array(pts, dtype=float)
    centre = arr.mean(axis=0)
    best = int(np.argmin(((arr - centre) ** 2).sum(axis=1)))
    return plateau[best]


def lane_constraint_points(
    grid: OccupancyGrid, lines: Sequence[LineSegment], lane_assignment_radius: float = DEFAULT_ASSIGN_RADIUS
) -> list[LanePointCloud]:
    """Group occupied cell centres by nearest line within the radius.

    Lane ids follow the order of ``lines``; lines that collect no cells are
    omitted. Ties go to the earlier line.
    """
    if not lines:
        raise ValueError("need at least one line")
    pts = grid.cell_centers()
    if len(pts) == 0:
        return []
    dist = np.stack([ln.distance(pts) for ln in lines], axis=1)
    best = np.argmin(dist, axis=1)
    ok = dist[np.arange(len(pts)), best] <= lane_assignment_radius
    clouds = []
    for lid in range(len(lines)):
        sel = ok & (best == lid)
        if sel.any():
            clouds.append(LanePointCloud(lid, pts[sel]))
    return clouds


# ---------------------------------------------------------------------------
# lane point CSV


def write_lane_points(path: Path, clouds: Sequence[LanePointCloud]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LANE_FIELDS)
        for c in clouds:
            for x, z in c.points:
                w.writerow([c.lane_id, f"{x:.17g}", f"{z:.17g}"])


def read_lane_points(path: Path) -> list[LanePointCloud]:
    groups: dict[int, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LANE_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            groups.setdefault(int(row["lane_id"]), []).append((float(row["x"]), float(row["z"])))
    return [LanePointCloud(k, np.array(v)) for k, v in groups.items()]


# ---------------------------------------------------------------------------
# end to end


@dataclass
class LaneExtraction:
    grid: OccupancyGrid  # after density filtering and closing
    lines: list[LineSegment]
    clouds: list[LanePointCloud]


def extract_lanes(
    points: np.ndarray,
    resolution: float = DEFAULT_RESOLUTION,
    m: int = DEFAULT_DENSITY_M,
    min_fg: int = THIN_MARKING_MIN_FG,
    angle_bins: int = 180,
    min_support: int = 20,
    lane_assignment_radius: float = DEFAULT_ASSIGN_RADIUS,
    margin: float = 1.0,
    relative_support: float = 0.5,
) -> LaneExtraction:
    """World road points to per-lane point clouds.

    The grid spans the points plus ``margin``; cleanup is the density filter
    followed by a closing, which stands in for learned lane completion. The
    density default keeps one-cell-wide markings (a straight run fills m of
    the m x m neighbourhood) while removing isolated specks. Lines weaker
    than ``relative_support`` times the strongest are accumulator side
    lobes and are discarded.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("no road points")
    lo = np.floor((pts.min(axis=0) - margin) / resolution) * resolution
    hi = pts.max(axis=0) + margin
    width, height = (int(v) for v in np.ceil((hi - lo) / resolution))
    grid = rasterize(pts, resolution, (float(lo[0]), float(lo[1])), width, height)
    grid = morphology(density_filter(grid, m, min_fg), "close")
    lines = hough_lines(grid, angle_bins, None, min_support)
    if lines:
        floor = relative_support * lines[0].support
        lines = [ln for ln in lines if ln.support >= floor]
    clouds = lane_constraint_points(grid, lines, lane_assignment_radius) if lines else []
    return LaneExtraction(grid, lines, clouds)
