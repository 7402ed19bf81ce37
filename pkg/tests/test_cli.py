import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from hextraj import cli
from hextraj.config import RunConfig

FIXTURE = Path(__file__).parent / "data" / "porto_fixture.csv"
SMALL = ["--embed_dim", "64", "--layers", "2", "--heads", "2", "--epochs", "1", "--seed", "0"]


def run(cmd, out, *extra, raw=FIXTURE):
    return cli.main([cmd, "--raw", str(raw), "--out_dir", str(out), *SMALL, *extra])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("ingest", out) == 0
    assert run("train", out) == 0
    return out


def test_ingest_statistics_match_files(trained):
    manifest = dict(line.split("=", 1) for line in (trained / "manifest_ingest.txt").read_text().splitlines())
    counts = {n: len((trained / f"{n}.txt").read_text().splitlines()) - 1 for n in ("train", "val", "test")}
    assert all(int(manifest[n]) == counts[n] for n in counts)
    assert int(manifest["trajectories"]) == sum(counts.values())
    assert int(manifest["blocks"]) == len((trained / "vocab.txt").read_text().splitlines()) - 2


def tiny_csv(path, n):
    rows = ["entity_id,timestamp,lat,lon"]
    for e in range(n):
        rows += [f"v{e},{t + 100 * e},{41.15 + 0.0015 * t:.6f},{-8.61 + 0.002 * e:.6f}" for t in range(20)]
    path.write_text("\n".join(rows) + "\n")
    return path


def test_tiny_ingest_is_deterministic(tmp_path):
    # the chronological split needs ten trajectories; three is a data error
    assert run("ingest", tmp_path / "three", "--min_traj_len", "5", raw=tiny_csv(tmp_path / "t3.csv", 3)) == 2
    raw = tiny_csv(tmp_path / "tiny.csv", 10)
    digests = []
    for name in ("a", "b"):
        assert run("ingest", tmp_path / name, "--min_traj_len", "5", raw=raw) == 0
        digests.append([(tmp_path / name / f).read_bytes() for f in ("train.txt", "test.txt", "vocab.txt")])
    assert digests[0] == digests[1]


def test_predict_outputs(trained):
    assert run("predict", trained) == 0
    rows = read_csv(trained / "predictions.csv")
    assert 1 <= len(rows) <= 5
    scores = [float(r["score"]) for r in rows]
    assert scores == sorted(scores, reverse=True)
    gj = json.loads((trained / "predictions.geojson").read_text())
    assert gj["type"] == "FeatureCollection"
    for f in gj["features"]:
        assert f["type"] == "Feature" and set(f) >= {"geometry", "properties"}
        g = f["geometry"]
        if g["type"] == "Polygon":
            ring = g["coordinates"][0]
            assert len(ring) == 7 and ring[0] == ring[-1]
            # a res-9 cell spans a few hundred meters of latitude
            lats = [lat for _, lat in ring]
            assert 50 < (max(lats) - min(lats)) * 6_371_000 * math.pi / 180 < 1000
        else:
            assert g["type"] in ("LineString", "Point")
    for rank, r in enumerate(rows, start=1):
        path = [t for t in r["tokens"].split() if t != "EOT"]
        line = [f["geometry"] for f in gj["features"]
                if f["properties"].get("rank") == rank and f["geometry"]["type"] != "Polygon"]
        if path:
            coords = line[0]["coordinates"] if line[0]["type"] == "LineString" else [line[0]["coordinates"]]
            assert len(coords) == len(path)
            lon, lat = coords[0]
            assert abs(lat - 41.15) < 0.2 and abs(lon + 8.61) < 0.2


def test_evaluate_and_sweep(trained):
    assert run("evaluate", trained, "--sweep_l", "5,10", "--sweep_k", "1,5") == 0
    metrics = {r["metric"]: float(r["value"]) for r in read_csv(trained / "metrics.csv")}
    assert metrics["acc@1"] <= metrics["acc@3"] <= metrics["acc@5"]
    assert all(0.0 <= v <= 1.0 for k, v in metrics.items() if k != "cases")
    sweep = read_csv(trained / "sweep.csv")
    assert [(r["l"], r["k"]) for r in sweep] == [("5", "1"), ("5", "5"), ("10", "1"), ("10", "5")]
    hashes = {r["config_hash"] for r in read_csv(trained / "metrics.csv")} | {r["config_hash"] for r in sweep}
    assert len(hashes) == 1


def test_attention_csv(trained):
    assert run("attention", trained) == 0
    rows = read_csv(trained / "attention.csv")
    mats = {}
    for r in rows:
        mats.setdefault(r["head"], {})[(int(r["query_pos"]), int(r["key_pos"]))] = float(r["weight"])
    assert set(mats) == {"0", "1", "max"}
    n = max(i for i, _ in mats["0"]) + 1
    for h in ("0", "1"):
        a = np.array([[mats[h][(i, j)] for j in range(n)] for i in range(n)])
        assert np.allclose(a.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(a[np.triu_indices(n, 1)] == 0.0)
        assert np.all(np.array([[mats["max"][(i, j)] for j in range(n)] for i in range(n)]) >= a)


def test_refuses_mismatched_artifacts(trained, tmp_path, capsys):
    # a different model config than the one the checkpoint was trained under
    assert run("evaluate", trained, "--beam_width", "3") == 0
    assert cli.main(["predict", "--raw", str(FIXTURE), "--out_dir", str(trained), "--embed_dim", "32",
                     "--layers", "2", "--heads", "2", "--epochs", "1"]) == 2
    assert "different configuration" in capsys.readouterr().err
    # a dataset ingested under another resolution cannot be trained with this one
    other = tmp_path / "other"
    assert run("ingest", other, "--res", "8", "--min_traj_len", "5") == 0
    assert run("train", other) == 2


def test_exit_codes(tmp_path, capsys):
    assert cli.main([]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["ingest", "--out_dir", str(tmp_path)]) == 1
    assert cli.main(["ingest", "--raw", str(FIXTURE), "--beam_width", "wide"]) == 1
    assert cli.main(["ingest", "--raw", str(tmp_path / "missing.csv"), "--out_dir", str(tmp_path)]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("entity_id,timestamp,lat,lon\na,1,41.1,-8.6\na,2,x,-8.6\n")
    assert cli.main(["ingest", "--raw", str(bad), "--out_dir", str(tmp_path)]) == 2
    assert "line 3" in capsys.readouterr().err
    assert cli.main(["train", "--raw", str(FIXTURE), "--out_dir", str(tmp_path / "nothing")]) == 2


def test_config_file_and_flag_override(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# comment\nbeam_width = 3\nl=8\n")
    args = cli.build_parser().parse_args(["predict", "--config", str(conf), "--l", "9"])
    cfg = cli.parse_config(args)
    assert cfg.beam_width == 3 and cfg.l == 9 and cfg.k == 5
    assert cfg == RunConfig(beam_width=3, l=9)


def test_hiermap_command(tmp_path):
    out = tmp_path / "m"
    assert cli.main(["hiermap", "--raw", str(FIXTURE), "--out_dir", str(out), "--max_iter", "3"]) == 0
    text = (out / "map.txt").read_text()
    assert text.startswith("# hextraj-map")
    gj = json.loads((out / "map.geojson").read_text())
    n_active = sum(1 for line in text.splitlines()[1:] if line.startswith("r"))
    assert len(gj["features"]) == n_active
    # the map feeds a mixed-resolution ingest
    assert run("ingest", tmp_path / "mixed", "--map_path", str(out / "map.txt")) == 0
    assert (tmp_path / "mixed" / "train.txt").read_text().splitlines()[0].find("res=mixed") >= 0

