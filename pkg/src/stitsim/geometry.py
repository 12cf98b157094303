"""Convex polytopes stored as vertex/facet incidence, with facet provenance.

Facets are vertex-index loops ordered counter-clockwise when seen from
outside.  Each facet carries an integer ``carrier`` naming the entity whose
plane it lies in: non-negative ids are I-polygons, negative ids are window
faces.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .directional import Hyperplane, canonical_direction

EPS = 1e-9


def cross3(a, b):
    """``np.cross`` for (..., 3) arrays without its axis-handling overhead."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


class SplitError(ValueError):
    pass


class NoSplitError(SplitError):
    pass


class DegenerateSplitError(SplitError):
    pass


@dataclass
class Segment3:
    p0: np.ndarray
    p1: np.ndarray

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=float)
        self.p1 = np.asarray(self.p1, dtype=float)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.p1 - self.p0))

    @property
    def direction(self) -> np.ndarray:
        return canonical_direction(self.p1 - self.p0)

    @property
    def vertices(self) -> np.ndarray:
        return np.array([self.p0, self.p1])


@dataclass
class ConvexPolytope:
    vertices: np.ndarray
    facets: list[list[int]]
    normals: np.ndarray
    offsets: np.ndarray
    carriers: list[int]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def box(cls, lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0),
            carriers=(-1, -2, -3, -4, -5, -6)) -> "ConvexPolytope":
        """Axis-parallel box.  Facet order: x-, x+, y-, y+, z-, z+."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if np.any(hi <= lo):
            raise ValueError("degenerate box")
        V = np.array([[hi[0] if i & 1 else lo[0],
                       hi[1] if i & 2 else lo[1],
                       hi[2] if i & 4 else lo[2]] for i in range(8)])
        facets = [[0, 4, 6, 2], [1, 3, 7, 5], [0, 1, 5, 4],
                  [2, 6, 7, 3], [0, 2, 3, 1], [4, 5, 7, 6]]
        normals = np.array([[-1, 0, 0], [1, 0, 0], [0, -1, 0],
                            [0, 1, 0], [0, 0, -1], [0, 0, 1]], dtype=float)
        offsets = np.array([-lo[0], hi[0], -lo[1], hi[1], -lo[2], hi[2]])
        return cls(V, facets, normals, offsets, list(carriers))

    @classmethod
    def from_halfspaces(cls, normals, offsets, carriers=None) -> "ConvexPolytope":
        """Bounded polytope ``{x : normals @ x <= offsets}`` (test helper scale)."""
        import itertools

        N = np.asarray(normals, dtype=float)
        d = np.asarray(offsets, dtype=float)
        pts = []
        for i, j, k in itertools.combinations(range(len(N)), 3):
            A = N[[i, j, k]]
            if abs(np.linalg.det(A)) < 1e-12:
                continue
            x = np.linalg.solve(A, d[[i, j, k]])
            if np.all(N @ x <= d + 1e-9):
                pts.append(x)
        pts = np.unique(np.round(np.array(pts), 12), axis=0)
        carriers = list(range(len(N))) if carriers is None else list(carriers)
        facets, fn, fo, fc = [], [], [], []
        for i in range(len(N)):
            on = np.flatnonzero(np.abs(pts @ N[i] - d[i]) < 1e-9)
            if len(on) < 3:
                continue
            loop = _order_loop(pts[on], N[i] / np.linalg.norm(N[i]))
            facets.append([int(on[k]) for k in loop])
            nrm = np.linalg.norm(N[i])
            fn.append(N[i] / nrm)
            fo.append(d[i] / nrm)
            fc.append(carriers[i])
        return cls(pts, facets, np.array(fn), np.array(fo), fc)

    # measurement

    def edges(self):
        """``(edge_vertex_pairs, facet_pairs)`` as integer arrays."""
        if "edges" not in self._cache:
            owner: dict[tuple[int, int], list[int]] = {}
            for f, loop in enumerate(self.facets):
                for a, b in zip(loop, loop[1:] + loop[:1]):
                    owner.setdefault((a, b) if a < b else (b, a), []).append(f)
            pairs = np.array(list(owner.keys()), dtype=int)
            fpairs = np.array(list(owner.values()), dtype=int)
            self._cache["edges"] = (pairs, fpairs)
        return self._cache["edges"]

    def volume(self) -> float:
        if "volume" not in self._cache:
            V = self.vertices - self.vertices.mean(axis=0)
            # fan triangulation of every facet, coned from the centroid
            tri = np.array([(loop[0], loop[i], loop[i + 1]) for loop in self.facets
                            for i in range(1, len(loop) - 1)])
            A, B, C = V[tri[:, 0]], V[tri[:, 1]], V[tri[:, 2]]
            self._cache["volume"] = float((A * cross3(B, C)).sum()) / 6.0
        return self._cache["volume"]

    def facet_areas(self) -> np.ndarray:
        V = self.vertices
        return np.array([polygon_area(V[loop]) for loop in self.facets])

    def surface_area(self) -> float:
        return float(self.facet_areas().sum())

    def diameter(self) -> float:
        if "diam" not in self._cache:
            V = self.vertices
            d = V[:, None, :] - V[None, :, :]
            self._cache["diam"] = float(np.sqrt((d * d).sum(axis=2).max()))
        return self._cache["diam"]

    def width(self, u) -> float:
        proj = self.vertices @ np.asarray(u, dtype=float)
        return float(proj.max() - proj.min())

    def mean_width(self) -> float:
        """Exact mean width from edge lengths and exterior dihedral angles."""
        if "mw" not in self._cache:
            pairs, fpairs = self.edges()
            V = self.vertices
            lengths = np.linalg.norm(V[pairs[:, 0]] - V[pairs[:, 1]], axis=1)
            n = self.normals
            cosang = np.einsum("ij,ij->i", n[fpairs[:, 0]], n[fpairs[:, 1]])
            ext = np.arccos(np.clip(cosang, -1.0, 1.0))
            self._cache["mw"] = float(lengths @ ext / (4 * np.pi))
        return self._cache["mw"]

    def contains(self, x, tol: float = EPS) -> bool:
        return bool(np.all(self.normals @ np.asarray(x) <= self.offsets + tol))

    def boundary_distance(self, x) -> np.ndarray:
        """Distance from point(s) ``x`` to the boundary (for interior points)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return (self.offsets[None, :] - x @ self.normals.T).min(axis=1)


@dataclass
class SectionPolygon:
    """Cross-section ``c ∩ h``.  Edge ``i`` runs from vertex ``i`` to ``i+1``
    and lies in facet ``edge_facets[i]`` of the mother cell; vertex ``i`` lies
    on the mother-cell edge between facets ``vertex_facets[i]``."""

    plane: Hyperplane
    vertices: np.ndarray
    edge_facets: list[int]
    edge_carriers: list[int]
    vertex_facets: list[tuple[int, int]]

    def area(self) -> float:
        return polygon_area(self.vertices)

    def perimeter(self) -> float:
        V = self.vertices
        return float(np.linalg.norm(np.roll(V, -1, axis=0) - V, axis=1).sum())

    def diameter(self) -> float:
        V = self.vertices
        d = V[:, None, :] - V[None, :, :]
        return float(np.sqrt((d * d).sum(axis=2).max()))

    def edge_segments(self) -> list[Segment3]:
        V = self.vertices
        return [Segment3(V[i], V[(i + 1) % len(V)]) for i in range(len(V))]


def polygon_area(P: np.ndarray) -> float:
    if len(P) < 3:
        return 0.0
    c = cross3(P[1:-1] - P[0], P[2:] - P[0]).sum(axis=0)
    return float(0.5 * np.sqrt(c @ c))


def point_set_of(obj) -> np.ndarray:
    if isinstance(obj, np.ndarray):
        return obj
    return np.asarray(obj.vertices, dtype=float)


def isotropic_mean_width(obj) -> float:
    """Mean width of a polytope, a planar polygon or a segment."""
    if isinstance(obj, ConvexPolytope):
        return obj.mean_width()
    if isinstance(obj, Segment3):
        return obj.length / 2
    if isinstance(obj, SectionPolygon):
        return obj.perimeter() / 4
    raise TypeError(f"cannot measure {type(obj).__name__}")


def _order_loop(P: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Indices ordering coplanar points counter-clockwise about ``normal``."""
    c = P.mean(axis=0)
    e1 = P[0] - c
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    ang = np.arctan2((P - c) @ e2, (P - c) @ e1)
    return np.argsort(ang)


def split_polytope(c: ConvexPolytope, h: Hyperplane, tol: float = EPS,
                   section_carrier: int = -1000):
    """Split ``c`` by ``h``.

    Returns ``(plus, minus, section)`` where ``plus`` lies on the side the
    normal points to.  Both halves keep the carriers of inherited facets and
    gain the section as a facet carried by ``section_carrier``.

    Raises :class:`NoSplitError` when ``h`` misses the interior and
    :class:`DegenerateSplitError` when ``h`` passes within ``tol`` of a vertex
    or the section is shorter than ``tol`` across.
    """
    V = c.vertices
    u = h.normal
    sd = V @ u - h.offset
    if sd.max() <= tol or sd.min() >= -tol:
        raise NoSplitError("no split")
    if np.abs(sd).min() < tol:
        raise DegenerateSplitError("degenerate split")
    pos = sd > 0

    new_index: dict[tuple[int, int], int] = {}
    new_points: list[np.ndarray] = []
    plus_loops: list[list[int]] = []
    minus_loops: list[list[int]] = []
    # per facet: the two section vertices it contributes, in loop order
    crossings: dict[int, list[int]] = {}
    nV = len(V)
    for f, loop in enumerate(c.facets):
        pl, ml, cr = [], [], []
        k = len(loop)
        for i in range(k):
            a, b = loop[i], loop[(i + 1) % k]
            (pl if pos[a] else ml).append(a)
            if pos[a] != pos[b]:
                key = (a, b) if a < b else (b, a)
                idx = new_index.get(key)
                if idx is None:
                    i0, i1 = key
                    lam = sd[i0] / (sd[i0] - sd[i1])
                    new_points.append(V[i0] + lam * (V[i1] - V[i0]))
                    idx = nV + len(new_points) - 1
                    new_index[key] = idx
                pl.append(idx)
                ml.append(idx)
                cr.append(idx)
        plus_loops.append(pl)
        minus_loops.append(ml)
        if cr:
            if len(cr) != 2:
                raise DegenerateSplitError("facet crossed more than twice")
            crossings[f] = cr

    # chain section edges into a loop
    adj: dict[int, list[tuple[int, int]]] = {}
    for f, (a, b) in crossings.items():
        adj.setdefault(a, []).append((b, f))
        adj.setdefault(b, []).append((a, f))
    if any(len(v) != 2 for v in adj.values()):
        raise DegenerateSplitError("section is not a simple loop")
    start = next(iter(adj))
    order, edge_f = [start], []
    cur, last_f = start, None
    while True:
        w, f = next((w, f) for w, f in adj[cur] if f != last_f)
        edge_f.append(f)
        if w == start:
            break
        order.append(w)
        cur, last_f = w, f
    if len(order) != len(adj):
        raise DegenerateSplitError("section loop broken")

    allV = np.vstack([V, np.array(new_points)])
    SP = allV[order]
    # orient counter-clockwise about +u
    if np.dot(cross3(SP[1:-1] - SP[0], SP[2:] - SP[0]).sum(axis=0), u) < 0:
        order = order[::-1]
        edge_f = edge_f[::-1]
        edge_f = edge_f[1:] + edge_f[:1]
        SP = allV[order]
    d = SP[:, None, :] - SP[None, :, :]
    if np.sqrt((d * d).sum(axis=2).max()) < tol:
        raise DegenerateSplitError("degenerate split")

    # facet pair of each section vertex: the two section edges meeting there
    k = len(order)
    vertex_facets = [(edge_f[(i - 1) % k], edge_f[i]) for i in range(k)]
    section = SectionPolygon(
        plane=h, vertices=SP, edge_facets=list(edge_f),
        edge_carriers=[c.carriers[f] for f in edge_f],
        vertex_facets=vertex_facets)

    def build(side_mask, loops, sec_loop, sec_normal, sec_offset):
        keep = np.concatenate([side_mask, np.ones(len(new_points), dtype=bool)])
        remap = -np.ones(len(allV), dtype=int)
        remap[keep] = np.arange(keep.sum())
        facets, normals, offsets, carriers = [], [], [], []
        for f, loop in enumerate(loops):
            if len(loop) >= 3:
                facets.append([int(remap[i]) for i in loop])
                normals.append(c.normals[f])
                offsets.append(c.offsets[f])
                carriers.append(c.carriers[f])
        facets.append([int(remap[i]) for i in sec_loop])
        normals.append(sec_normal)
        offsets.append(sec_offset)
        carriers.append(section_carrier)
        return ConvexPolytope(allV[keep], facets, np.array(normals),
                              np.array(offsets), carriers)

    # outward normal of the section facet is -u on the plus side
    plus = build(pos, plus_loops, order[::-1], -u, -h.offset)
    minus = build(~pos, minus_loops, order, u, h.offset)
    return plus, minus, section


def coplanar_crossings(s: Segment3, candidates, tol: float = EPS, normal=None):
    """Transversal crossings of ``s`` with coplanar ``candidates``.

    ``candidates`` is a sequence of :class:`Segment3` or an ``(n, 2, 3)``
    endpoint array.  Only points strictly interior to both segments (relative
    tolerance ``tol`` on the segment parameters) are returned, as
    ``(point, candidate_index)`` pairs.  ``normal`` is the common plane normal;
    it is inferred from the segments when omitted.
    """
    if isinstance(candidates, np.ndarray):
        C = candidates
    else:
        C = np.array([[q.p0, q.p1] for q in candidates]).reshape(-1, 2, 3)
    if len(C) == 0:
        return []
    d = s.p1 - s.p0
    e = C[:, 1] - C[:, 0]
    if normal is None:
        cr = cross3(d, e)
        normal = cr[np.argmax(np.linalg.norm(cr, axis=1))]
        if np.linalg.norm(normal) < 1e-15:
            return []
    # 2D problem in the coordinate plane best aligned with the carrier plane
    drop = int(np.argmax(np.abs(normal)))
    i, j = [k for k in range(3) if k != drop]
    den = d[i] * e[:, j] - d[j] * e[:, i]
    w = C[:, 0] - s.p0
    scale = np.linalg.norm(d) * np.linalg.norm(e, axis=1)
    ok = np.abs(den) > 1e-12 * scale
    den_safe = np.where(ok, den, 1.0)
    ts = (w[:, i] * e[:, j] - w[:, j] * e[:, i]) / den_safe
    tc = (w[:, i] * d[j] - w[:, j] * d[i]) / den_safe
    hit = ok & (ts > tol) & (ts < 1 - tol) & (tc > tol) & (tc < 1 - tol)
    return [(s.p0 + ts[k] * d, int(k)) for k in np.flatnonzero(hit)]
