"""Serialization of simulation results and geometry/table exports."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .directional import DirectionalModel, Hyperplane
from .engine import (IPolygonRecord, ISegmentRecord, TessellationResult, VertexRecord)
from .geometry import ConvexPolytope

SCHEMA_VERSION = 1
SEGMENT_CSV_HEADER = ["id", "birth", "carrier_birth", "dir_x", "dir_y", "dir_z",
                      "length", "n_T", "n_X", "censored"]


class SchemaError(ValueError):
    pass


def _seed_to_json(seed):
    if isinstance(seed, np.random.SeedSequence):
        return {"entropy": seed.entropy, "spawn_key": list(seed.spawn_key)}
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return None if seed is None else str(seed)


def _seed_from_json(d):
    if isinstance(d, dict):
        return np.random.SeedSequence(d["entropy"], spawn_key=tuple(d["spawn_key"]))
    return d


def result_to_dict(r: TessellationResult) -> dict:
    """Full, versioned, lossless representation (floats round-trip via repr)."""
    return {
        "schema_version": SCHEMA_VERSION,
        "window": {"lo": r.window[0].tolist(), "hi": r.window[1].tolist()},
        "time": r.time,
        "model": r.model.to_dict(),
        "seed": _seed_to_json(r.seed),
        "method": r.method,
        "phase_times": list(r.phase_times),
        "cells": [{"vertices": c.vertices.tolist(), "facets": c.facets,
                   "normals": c.normals.tolist(), "offsets": c.offsets.tolist(),
                   "carriers": list(c.carriers)} for c in r.cells],
        "polygons": [{"id": p.id, "offset": p.plane.offset, "normal": p.plane.normal.tolist(),
                      "birth": p.birth, "phase_tag": p.phase_tag,
                      "vertices": p.vertices.tolist(), "area": p.area,
                      "segment_ids": p.segment_ids} for p in r.polygons],
        "segments": [{"id": s.id, "p0": s.p0.tolist(), "p1": s.p1.tolist(), "birth": s.birth,
                      "polygon_id": s.polygon_id, "carrier_id": s.carrier_id,
                      "carrier_birth": s.carrier_birth, "window_carried": s.window_carried,
                      "censored": s.censored, "phase_tag": s.phase_tag,
                      "interior_vertices": [list(v) for v in s.interior_vertices]}
                     for s in r.segments],
        "vertices": [{"id": v.id, "point": v.point.tolist(), "kind": v.kind,
                      "creation_time": v.creation_time, "segment_ids": list(v.segment_ids),
                      "on_boundary": v.on_boundary} for v in r.vertices],
        "event_log": [[e[0], e[1], e[2], list(e[3])] for e in r.event_log],
        "checkpoints": r.checkpoints,
    }


def result_from_dict(d: dict) -> TessellationResult:
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported result schema version {version!r}")
    try:
        cells = [ConvexPolytope(np.array(c["vertices"], float), [list(f) for f in c["facets"]],
                                np.array(c["normals"], float), np.array(c["offsets"], float),
                                list(c["carriers"])) for c in d["cells"]]
        polygons = [IPolygonRecord(p["id"], Hyperplane(p["offset"], np.array(p["normal"])),
                                   p["birth"], p["phase_tag"], np.array(p["vertices"], float),
                                   p["area"], list(p["segment_ids"])) for p in d["polygons"]]
        segments = [ISegmentRecord(
            id=s["id"], p0=np.array(s["p0"], float), p1=np.array(s["p1"], float),
            birth=s["birth"], polygon_id=s["polygon_id"], carrier_id=s["carrier_id"],
            carrier_birth=s["carrier_birth"], window_carried=s["window_carried"],
            censored=s["censored"], phase_tag=s["phase_tag"],
            interior_vertices=[tuple(v) for v in s["interior_vertices"]])
            for s in d["segments"]]
        vertices = [VertexRecord(v["id"], np.array(v["point"], float), v["kind"],
                                 v["creation_time"], tuple(v["segment_ids"]), v["on_boundary"])
                    for v in d["vertices"]]
        return TessellationResult(
            window=(np.array(d["window"]["lo"], float), np.array(d["window"]["hi"], float)),
            time=d["time"], model=DirectionalModel.from_dict(d["model"]), cells=cells,
            polygons=polygons, segments=segments, vertices=vertices,
            event_log=[(e[0], e[1], e[2], tuple(e[3])) for e in d["event_log"]],
            seed=_seed_from_json(d.get("seed")), method=d.get("method", "direct"),
            checkpoints=d.get("checkpoints", []), phase_times=tuple(d.get("phase_times", ())))
    except (KeyError, TypeError, IndexError) as exc:
        raise SchemaError(f"malformed result file: {exc}") from exc


def result_to_json(r: TessellationResult) -> str:
    return json.dumps(result_to_dict(r), separators=(",", ":"))


def load_result(path) -> TessellationResult:
    with open(path) as fh:
        return result_from_dict(json.load(fh))


def segments_csv(r: TessellationResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SEGMENT_CSV_HEADER)
    for s in r.segments:
        d = s.direction
        w.writerow([s.id, repr(s.birth), repr(s.carrier_birth), repr(float(d[0])),
                    repr(float(d[1])), repr(float(d[2])), repr(s.length), s.n_T, s.n_X,
                    int(s.censored)])
    return buf.getvalue()


def event_log_jsonl(r: TessellationResult) -> str:
    return "".join(json.dumps({"time": e[0], "cell": e[1], "offset": e[2],
                               "normal": list(e[3])}) + "\n" for e in r.event_log)


def polygon_faces(r: TessellationResult, fragments: bool = False):
    """``(vertices (k, 3), birth, polygon id)`` per exported face.

    By default every I-polygon is exported as born.  With ``fragments`` the
    faces are the pieces into which later divisions cut each I-polygon, taken
    from the cells on the side its normal points to.
    """
    if not fragments:
        return [(p.vertices, p.birth, p.id) for p in r.polygons]
    faces = []
    for c in r.cells:
        for f, carrier in enumerate(c.carriers):
            if carrier < 0:
                continue
            poly = r.polygons[carrier]
            # the outward normal is -u on the plus side of the polygon's plane
            if np.dot(c.normals[f], poly.plane.normal) < 0:
                faces.append((c.vertices[c.facets[f]], poly.birth, poly.id))
    faces.sort(key=lambda x: (x[2], tuple(np.round(x[0].mean(axis=0), 12))))
    return faces


def to_obj(r: TessellationResult, fragments: bool = False) -> str:
    lines = ["# STIT tessellation I-polygons", f"# time {r.time!r}"]
    faces = polygon_faces(r, fragments)
    k = 1
    for V, birth, pid in faces:
        lines.append(f"# polygon {pid} birth {birth!r}")
        lines.append(f"g polygon_{pid}")
        for v in V:
            lines.append(f"v {v[0]!r} {v[1]!r} {v[2]!r}")
        lines.append("f " + " ".join(str(k + i) for i in range(len(V))))
        k += len(V)
    return "\n".join(lines) + "\n"


def to_ply(r: TessellationResult, fragments: bool = False) -> str:
    faces = polygon_faces(r, fragments)
    n_v = sum(len(V) for V, _, _ in faces)
    head = ["ply", "format ascii 1.0", "comment STIT tessellation I-polygons",
            f"element vertex {n_v}", "property double x", "property double y",
            "property double z", f"element face {len(faces)}",
            "property list uchar int vertex_indices", "property double birth",
            "property int polygon_id", "end_header"]
    verts, fl = [], []
    k = 0
    for V, birth, pid in faces:
        verts.extend(f"{v[0]!r} {v[1]!r} {v[2]!r}" for v in V)
        fl.append(f"{len(V)} " + " ".join(str(k + i) for i in range(len(V))) + f" {birth!r} {pid}")
        k += len(V)
    return "\n".join(head + verts + fl) + "\n"


def write_files(out_dir, files: dict[str, str]):
    """Write all ``files`` (name -> text) or none of them.

    Contents are staged in a temporary directory next to ``out_dir`` and
    moved into place only after every file was written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=out))
    try:
        for name, text in files.items():
            (stage / name).write_text(text)
        for name in files:
            os.replace(stage / name, out / name)
    finally:
        for p in stage.iterdir():
            p.unlink()
        stage.rmdir()
