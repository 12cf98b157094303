import json

import numpy as np
import pytest

from stitsim import serialize as S
from stitsim.directional import DirectionalModel
from stitsim.engine import nest, simulate

CUBE = ((0, 0, 0), (1, 1, 1))


@pytest.fixture(scope="module")
def run():
    return simulate(CUBE, 6.0, DirectionalModel.isotropic(), seed=11, checkpoint_every=5)


def test_round_trip_is_lossless(run):
    text = S.result_to_json(run)
    back = S.result_from_dict(json.loads(text))
    assert S.result_to_json(back) == text
    assert back.event_log == run.event_log
    assert [s.n_T for s in back.segments] == [s.n_T for s in run.segments]
    assert sum(c.volume() for c in back.cells) == pytest.approx(1, rel=1e-12)


def test_round_trip_nested_and_seed_sequence():
    r = nest(CUBE, 3.0, 3.0, DirectionalModel.axis(), seed=np.random.SeedSequence(4, spawn_key=(2,)))
    back = S.result_from_dict(json.loads(S.result_to_json(r)))
    assert back.phase_times == (3.0, 3.0)
    assert back.seed.spawn_key == (2,) and back.seed.entropy == 4
    assert [p.phase_tag for p in back.polygons] == [p.phase_tag for p in r.polygons]


def test_schema_version_checked(run):
    d = S.result_to_dict(run)
    d["schema_version"] = 99
    with pytest.raises(S.SchemaError):
        S.result_from_dict(d)
    d = S.result_to_dict(run)
    del d["cells"]
    with pytest.raises(S.SchemaError):
        S.result_from_dict(d)


def test_segments_csv_and_events(run):
    rows = S.segments_csv(run).splitlines()
    assert rows[0].split(",") == S.SEGMENT_CSV_HEADER
    assert len(rows) == len(run.segments) + 1
    ev = [json.loads(x) for x in S.event_log_jsonl(run).splitlines()]
    assert len(ev) == len(run.event_log) and ev[0]["time"] == run.event_log[0][0]


def test_obj_and_ply_exports(run):
    obj = S.to_obj(run)
    assert obj.count("\nf ") == len(run.polygons)
    assert obj.count("\nv ") == sum(len(p.vertices) for p in run.polygons)
    ply = S.to_ply(run).splitlines()
    assert f"element face {len(run.polygons)}" in ply
    # fragments tile the same total area as the as-born polygons
    from stitsim.geometry import polygon_area
    area = lambda faces: sum(polygon_area(V) for V, _, _ in faces)
    assert area(S.polygon_faces(run, fragments=True)) == pytest.approx(
        sum(p.area for p in run.polygons), rel=1e-9)


def test_write_files_all_or_nothing(tmp_path, monkeypatch):
    S.write_files(tmp_path / "o", {"a.txt": "1", "b.txt": "2"})
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["a.txt", "b.txt"]

    calls = []
    real = S.Path.write_text

    def failing(self, text):
        calls.append(self.name)
        if len(calls) == 2:
            raise OSError("disk full")
        return real(self, text)

    monkeypatch.setattr(S.Path, "write_text", failing)
    with pytest.raises(OSError):
        S.write_files(tmp_path / "p", {"a.txt": "1", "b.txt": "2"})
    assert list((tmp_path / "p").iterdir()) == []
