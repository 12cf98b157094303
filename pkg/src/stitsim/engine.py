"""Cell-division construction of STIT tessellations in a box window.

The engine keeps an event queue of cell death times.  At each death the cell
is split by a plane from its hitting measure; the new I-polygon, its sides
(the new I-segments) and the interior vertices they create on existing
segments are recorded with full provenance.

Carrier ids: I-polygons are numbered 0, 1, 2, ... in birth order; the six
window faces are -1 (x-), -2 (x+), -3 (y-), -4 (y+), -5 (z-), -6 (z+) and
count as born at time 0.  Because ids increase with birth time, the younger of
two carriers is simply the one with the larger id.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .directional import DirectionalModel, Hyperplane, canonical_direction
from .geometry import (EPS, ConvexPolytope, cross3, DegenerateSplitError, NoSplitError,
                       Segment3, coplanar_crossings, split_polytope)

DEFAULT_MAX_EVENTS = 10_000_000
WINDOW_FACES = (-1, -2, -3, -4, -5, -6)


class EventCapExceeded(RuntimeError):
    pass


@dataclass
class IPolygonRecord:
    id: int
    plane: Hyperplane
    birth: float
    phase_tag: int
    vertices: np.ndarray
    area: float
    segment_ids: list[int] = field(default_factory=list)


@dataclass
class VertexRecord:
    id: int
    point: np.ndarray
    kind: str                  # "T" or "X"
    creation_time: float
    segment_ids: tuple          # one id for T, two for X
    on_boundary: bool


@dataclass
class ISegmentRecord:
    id: int
    p0: np.ndarray
    p1: np.ndarray
    birth: float
    polygon_id: int
    carrier_id: int
    carrier_birth: float
    window_carried: bool
    censored: bool
    phase_tag: int = 0
    # (position in (0, 1), kind, creation_time, vertex id)
    interior_vertices: list = field(default_factory=list)

    @property
    def geometry(self) -> Segment3:
        return Segment3(self.p0, self.p1)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.p1 - self.p0))

    @property
    def direction(self) -> np.ndarray:
        return canonical_direction(self.p1 - self.p0)

    @property
    def reference_point(self) -> np.ndarray:
        """Lexicographically smallest endpoint."""
        return self.p0 if tuple(self.p0) <= tuple(self.p1) else self.p1

    @property
    def n_T(self) -> int:
        return sum(1 for v in self.interior_vertices if v[1] == "T")

    @property
    def n_X(self) -> int:
        return sum(1 for v in self.interior_vertices if v[1] == "X")

    @property
    def n_X_birth(self) -> int:
        """X vertices present when the segment was born."""
        return sum(1 for v in self.interior_vertices if v[1] == "X" and v[2] == self.birth)


@dataclass
class TessellationResult:
    window: tuple[np.ndarray, np.ndarray]
    time: float
    model: DirectionalModel
    cells: list[ConvexPolytope]
    polygons: list[IPolygonRecord]
    segments: list[ISegmentRecord]
    vertices: list[VertexRecord]
    event_log: list[tuple]     # (time, cell id, offset, normal)
    seed: object
    method: str = "direct"
    checkpoints: list[dict] = field(default_factory=list)
    phase_times: tuple = ()

    @property
    def window_volume(self) -> float:
        lo, hi = self.window
        return float(np.prod(hi - lo))

    def summary(self) -> dict:
        vol = self.window_volume
        inner = [s for s in self.segments if not s.window_carried]
        return {
            "time": self.time,
            "n_events": len(self.event_log),
            "n_cells": len(self.cells),
            "n_polygons": len(self.polygons),
            "n_segments": len(self.segments),
            "n_segments_inner": len(inner),
            "n_T_interior": sum(1 for v in self.vertices if v.kind == "T" and not v.on_boundary),
            "n_X_interior": sum(1 for v in self.vertices if v.kind == "X" and not v.on_boundary),
            "S_V": sum(p.area for p in self.polygons) / vol,
            "L_V": sum(s.length for s in inner) / vol,
            "cell_volume_sum": float(sum(c.volume() for c in self.cells)),
        }


def _as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


class _Engine:
    """Mutable simulation state shared by ``simulate`` and ``nest``."""

    def __init__(self, lo, hi, model: DirectionalModel, method: str = "direct",
                 max_events: int = DEFAULT_MAX_EVENTS, checkpoint_every: int = 0):
        if method not in ("direct", "rejection"):
            raise ValueError(f"unknown method {method!r}")
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.window = ConvexPolytope.box(self.lo, self.hi)
        self.model = model
        self.method = method
        self.max_events = max_events
        self.checkpoint_every = checkpoint_every
        self.tol = EPS * self.window.diameter()
        self._lo, self._hi = self.lo.tolist(), self.hi.tolist()

        self.cells: dict[int, ConvexPolytope] = {0: self.window}
        self.next_cell = 1
        self.polygons: list[IPolygonRecord] = []
        self.segments: list[ISegmentRecord] = []
        self.vertices: list[VertexRecord] = []
        self.events: list[tuple] = []
        self.checkpoints: list[dict] = []
        self.birth = {c: 0.0 for c in WINDOW_FACES}
        self.side_index: dict[tuple[int, int], int] = {}
        self.by_carrier: dict[int, list[int]] = {}

    # -- lifetimes ---------------------------------------------------------

    def _draw_split(self, cell: ConvexPolytope, frame: ConvexPolytope,
                    frame_rate: float, now: float, rng):
        """Return ``(death_time, plane)`` for ``cell`` alive at ``now``."""
        if self.method == "direct":
            rate = self.model.lambda_polytope(cell)
            return now + rng.exponential(1 / rate), None
        # rejection: candidate planes hit the frame at rate Λ([frame]);
        # the first one that cuts the cell splits it
        t = now
        while True:
            t += rng.exponential(1 / frame_rate)
            h = self.model.sample_hitting_hyperplane(frame, rng)
            sd = cell.vertices @ h.normal - h.offset
            if sd.max() > self.tol and sd.min() < -self.tol and np.abs(sd).min() >= self.tol:
                return t, h

    # -- splitting ---------------------------------------------------------

    def _on_boundary(self, p) -> bool:
        lo, hi, tol = self._lo, self._hi, self.tol
        return any(abs(x - a) < tol or abs(x - b) < tol for x, a, b in zip(p.tolist(), lo, hi))

    def apply_split(self, cell_id: int, h: Hyperplane, now: float, phase: int = 0):
        """Split cell ``cell_id`` by ``h`` at time ``now`` and update registries.

        Raises :class:`DegenerateSplitError` / :class:`NoSplitError` without
        touching the state when the plane is unusable.
        """
        cell = self.cells[cell_id]
        pid = len(self.polygons)
        plus, minus, sec = split_polytope(cell, h, tol=self.tol, section_carrier=pid)
        if sec.diameter() < self.tol:
            raise DegenerateSplitError("degenerate split")

        poly = IPolygonRecord(pid, h, now, phase, sec.vertices, sec.area())
        self.polygons.append(poly)
        self.birth[pid] = now
        V = sec.vertices
        k = len(V)

        # (3) T vertices: every section vertex sits on an edge of the mother
        # cell, which is part of the segment born as the younger carrier's
        # side in the older carrier's plane.
        for i in range(k):
            fa, fb = sec.vertex_facets[i]
            a, b = cell.carriers[fa], cell.carriers[fb]
            if a < 0 and b < 0:
                continue
            young, old = max(a, b), min(a, b)
            sid = self.side_index.get((young, old))
            if sid is None:
                raise RuntimeError(f"no segment for carrier pair {(young, old)}")
            self._add_vertex("T", V[i], now, (sid,))

        # (2) new segments, one per section edge
        new_ids = []
        for i in range(k):
            carrier = sec.edge_carriers[i]
            p0, p1 = V[i], V[(i + 1) % k]
            window_carried = carrier < 0
            seg = ISegmentRecord(
                id=len(self.segments), p0=p0.copy(), p1=p1.copy(), birth=now,
                polygon_id=pid, carrier_id=carrier,
                carrier_birth=self.birth[carrier], window_carried=window_carried,
                censored=window_carried or self._on_boundary(p0) or self._on_boundary(p1),
                phase_tag=phase)
            self.segments.append(seg)
            self.side_index[(pid, carrier)] = seg.id
            poly.segment_ids.append(seg.id)
            new_ids.append(seg.id)

        # (4) X vertices: crossings with segments already lying in the carrier
        # plane (necessarily on its other side)
        for sid in new_ids:
            seg = self.segments[sid]
            if seg.window_carried:
                continue
            others = self.by_carrier.get(seg.carrier_id, [])
            if others:
                C = np.array([[self.segments[o].p0, self.segments[o].p1] for o in others])
                ptol = self.tol / seg.length
                normal = self.polygons[seg.carrier_id].plane.normal
                for point, j in coplanar_crossings(seg.geometry, C, tol=ptol, normal=normal):
                    self._add_vertex("X", point, now, (sid, others[j]))
        for sid in new_ids:
            c = self.segments[sid].carrier_id
            if c >= 0:
                self.by_carrier.setdefault(c, []).append(sid)

        # (5) replace the mother cell by its halves
        del self.cells[cell_id]
        ids = []
        for half in (plus, minus):
            self.cells[self.next_cell] = half
            ids.append(self.next_cell)
            self.next_cell += 1
        self.events.append((now, cell_id, h.offset, tuple(h.normal)))
        return ids

    def _add_vertex(self, kind, point, now, seg_ids):
        positions = []
        for sid in seg_ids:
            s = self.segments[sid]
            d = s.p1 - s.p0
            L2 = float(d @ d)
            tau = float((point - s.p0) @ d / L2)
            L = np.sqrt(L2)
            if tau * L < self.tol or (1 - tau) * L < self.tol:
                return None       # at an endpoint: measure-zero, discard
            positions.append(tau)
        vid = len(self.vertices)
        self.vertices.append(VertexRecord(vid, np.asarray(point, float).copy(), kind, now,
                                          tuple(seg_ids), self._on_boundary(point)))
        for sid, tau in zip(seg_ids, positions):
            self.segments[sid].interior_vertices.append((tau, kind, now, vid))
        return vid

    # -- event loop --------------------------------------------------------

    def run(self, cell_ids, t0: float, t1: float, rng, phase: int = 0,
            frame: ConvexPolytope | None = None):
        """Run the division process on ``cell_ids`` from ``t0`` to ``t1``."""
        frame = self.window if frame is None else frame
        frame_rate = self.model.lambda_polytope(frame)
        heap = []

        def schedule(cid, now):
            t, h = self._draw_split(self.cells[cid], frame, frame_rate, now, rng)
            if t < t1:
                heapq.heappush(heap, (t, cid, h))

        for cid in cell_ids:
            schedule(cid, t0)
        while heap:
            now, cid, h = heapq.heappop(heap)
            if len(self.events) >= self.max_events:
                raise EventCapExceeded(
                    f"event cap of {self.max_events} exceeded; reduce t or the window")
            cell = self.cells[cid]
            while True:
                if h is None:
                    h = self.model.sample_hitting_hyperplane(cell, rng)
                try:
                    new = self.apply_split(cid, h, now, phase)
                    break
                except (DegenerateSplitError, NoSplitError):
                    h = None      # resample the plane; same death time
            for c in new:
                schedule(c, now)
            if self.checkpoint_every and len(self.events) % self.checkpoint_every == 0:
                self.checkpoint(now)

    def checkpoint(self, now: float):
        vols = [c.volume() for c in self.cells.values()]
        self.checkpoints.append({"time": float(now), "n_cells": len(vols),
                                 "volume_sum": float(np.sum(vols)),
                                 "min_volume": float(np.min(vols))})

    def result(self, t: float, seed, phase_times=()) -> TessellationResult:
        order = sorted(range(len(self.events)), key=lambda i: self.events[i][0])
        return TessellationResult(
            window=(self.lo.copy(), self.hi.copy()), time=t, model=self.model,
            cells=list(self.cells.values()), polygons=self.polygons,
            segments=self.segments, vertices=self.vertices,
            event_log=[self.events[i] for i in order], seed=seed,
            method=self.method, checkpoints=self.checkpoints,
            phase_times=tuple(phase_times))


def _window_bounds(window):
    if isinstance(window, ConvexPolytope):
        return window.vertices.min(axis=0), window.vertices.max(axis=0)
    lo, hi = window
    return np.asarray(lo, float), np.asarray(hi, float)


def simulate(window, t: float, model: DirectionalModel, seed, *, method: str = "direct",
             max_events: int = DEFAULT_MAX_EVENTS, checkpoint_every: int = 0) -> TessellationResult:
    """Exact realisation of the STIT tessellation at time ``t`` in a box.

    ``window`` is ``(lo, hi)`` or a box :class:`ConvexPolytope`.  ``method``
    selects exact per-cell rates (``"direct"``) or the window-level rejection
    construction (``"rejection"``).  With ``checkpoint_every = k`` the cell
    volumes are summed every ``k`` events and at the end.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    lo, hi = _window_bounds(window)
    eng = _Engine(lo, hi, model, method, max_events, checkpoint_every)
    rng = np.random.default_rng(_as_seed_sequence(seed))
    eng.run([0], 0.0, t, rng, phase=0)
    if checkpoint_every:
        eng.checkpoint(t)
    return eng.result(t, seed)


def nest(window, s: float, u: float, model: DirectionalModel, seed, *,
         method: str = "direct", max_events: int = DEFAULT_MAX_EVENTS,
         checkpoint_every: int = 0) -> TessellationResult:
    """Iterated construction: ``Y(s)`` in the window, then an independent
    ``Y(u)`` inside each of its cells.  Birth times are absolute (phase-1
    objects are born in ``(s, s+u]``)."""
    if not (s > 0 and u > 0):
        raise ValueError("s and u must be positive")
    lo, hi = _window_bounds(window)
    eng = _Engine(lo, hi, model, method, max_events, checkpoint_every)
    ss = _as_seed_sequence(seed)
    base, inner = ss.spawn(2)
    eng.run([0], 0.0, s, np.random.default_rng(base), phase=0)
    if checkpoint_every:
        eng.checkpoint(s)
    cell_ids = sorted(eng.cells)
    for cid, child in zip(cell_ids, inner.spawn(len(cell_ids))):
        eng.run([cid], s, s + u, np.random.default_rng(child), phase=1,
                frame=eng.cells[cid])
    if checkpoint_every:
        eng.checkpoint(s + u)
    return eng.result(s + u, seed, phase_times=(s, u))


def linear_section(result: TessellationResult, point, direction):
    """Hits of the line ``point + x * direction`` with the I-polygons.

    Returns ``(x_hits, (x_in, x_out))``: sorted line parameters of the hits
    (unit-speed parametrisation) and the chord of the window.
    """
    p = np.asarray(point, dtype=float)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    lo, hi = result.window
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (lo - p) / d
        b = (hi - p) / d
    nz = np.abs(d) > 1e-15
    if np.any(~nz & ((p < lo) | (p > hi))):
        return np.empty(0), (0.0, 0.0)
    x_in = np.max(np.minimum(a, b)[nz])
    x_out = np.min(np.maximum(a, b)[nz])
    if x_out <= x_in:
        return np.empty(0), (0.0, 0.0)
    hits = []
    for poly in result.polygons:
        u = poly.plane.normal
        den = d @ u
        if abs(den) < 1e-15:
            continue
        x = (poly.plane.offset - p @ u) / den
        if not x_in < x < x_out:
            continue
        q = p + x * d
        V = poly.vertices
        E = np.roll(V, -1, axis=0) - V
        side = cross3(E, q - V) @ u
        if np.all(side >= 0):
            hits.append(x)
    return np.sort(np.array(hits)), (float(x_in), float(x_out))


def collect_complete_segments(result: TessellationResult, margin: float = 0.0):
    """Uncensored segments whose reference point lies in the eroded window."""
    lo, hi = result.window
    if margin < 0 or 2 * margin >= np.min(hi - lo):
        raise ValueError("margin must be in [0, min side / 2)")
    out = []
    for s in result.segments:
        if s.censored or s.window_carried:
            continue
        r = s.reference_point
        if np.all(r >= lo + margin) and np.all(r <= hi - margin):
            out.append(s)
    return out
