import csv
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from rigidreg.cli import load_schema, main
from rigidreg.geom3d import RigidTransform, apply_transform, center, generate_shape, random_rotation
from rigidreg.pcio import read_xyz, write_xyz

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--kind", "torus", "--n", "48", "--count", "4", "--seed", "1", "--out-dir", str(d / "data")]) == 0
    assert main(["train", "--config", str(SMOKE), "--data", str(d / "data"), "--out", str(d / "m.ckpt")]) == 0
    return d


def test_generate_writes_files(tmp_path):
    out = tmp_path / "g"
    assert main(["generate", "--kind", "sphere", "--n", "256", "--count", "3", "--seed", "5", "--out-dir", str(out)]) == 0
    files = sorted(out.glob("*.xyz"))
    assert len(files) == 3
    assert all(len(f.read_text().splitlines()) == 256 for f in files)
    seeds = np.random.SeedSequence(5).generate_state(3)
    for f, s in zip(files, seeds):
        assert np.array_equal(read_xyz(f).points, center(generate_shape("sphere", 256, int(s))).points)
    again = tmp_path / "g2"
    main(["generate", "--kind", "sphere", "--n", "256", "--count", "3", "--seed", "5", "--out-dir", str(again)])
    for f in files:
        assert f.read_bytes() == (again / f.name).read_bytes()
    man = json.loads((out / "manifest.json").read_text())
    jsonschema.validate(man, load_schema("manifest"))
    assert len(man["outputs"]) == 3 and man["config"]["centered"] is True


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("RIGIDREG_SEED", "5")
    main(["generate", "--kind", "cube", "--n", "16", "--out-dir", str(tmp_path / "a")])
    monkeypatch.delenv("RIGIDREG_SEED")
    main(["generate", "--kind", "cube", "--n", "16", "--seed", "5", "--out-dir", str(tmp_path / "b")])
    assert (tmp_path / "a/cube_0000.xyz").read_bytes() == (tmp_path / "b/cube_0000.xyz").read_bytes()
    assert json.loads((tmp_path / "a/manifest.json").read_text())["seed"] == 5


def test_train_outputs_and_determinism(workdir, tmp_path):
    rows = list(csv.reader(open(workdir / "m.ckpt.log.csv")))
    assert rows[0] == ["step", "l_h", "l_pq", "l_nq", "l_c"] and len(rows) == 5
    assert all(np.isfinite(float(v)) for r in rows[1:] for v in r)
    assert main(["train", "--config", str(SMOKE), "--data", str(workdir / "data"), "--out", str(tmp_path / "m.ckpt")]) == 0
    assert (tmp_path / "m.ckpt.log.csv").read_bytes() == (workdir / "m.ckpt.log.csv").read_bytes()
    assert (tmp_path / "m.ckpt").read_bytes() == (workdir / "m.ckpt").read_bytes()


def test_resume_continues_step_count(workdir, tmp_path):
    ck = tmp_path / "r.ckpt"
    args = ["train", "--config", str(SMOKE), "--data", str(workdir / "data"), "--out", str(ck)]
    assert main(args) == 0
    assert main(args + ["--epochs", "2", "--resume"]) == 0
    man = json.loads((tmp_path / "r.ckpt.manifest.json").read_text())
    assert man["notes"]["resumed_from_step"] == 4 and man["notes"]["final_step"] == 8
    assert len((tmp_path / "r.ckpt.log.csv").read_text().splitlines()) == 9
    straight = tmp_path / "s.ckpt"
    main(["train", "--config", str(SMOKE), "--epochs", "2", "--data", str(workdir / "data"), "--out", str(straight)])
    assert straight.read_bytes() == ck.read_bytes()


def test_register_identity_and_known_transform(workdir, tmp_path):
    src = workdir / "data" / "torus_0000.xyz"
    out = tmp_path / "r.json"
    assert main(["register", "--checkpoint", str(workdir / "m.ckpt"), "--src", str(src), "--dst", str(src), "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    jsonschema.validate(res, load_schema("register"))
    assert np.allclose(np.reshape(res["R"], (3, 3)), np.eye(3), atol=1e-9)
    assert res["chamfer"] <= 1e-20 and res["registrar"] == "consensus"
    rng = np.random.default_rng(0)
    T = RigidTransform(random_rotation(180, rng), rng.uniform(-0.5, 0.5, 3))
    dst = tmp_path / "moved.xyz"
    write_xyz(dst, apply_transform(read_xyz(src), T))
    assert main(["register", "--checkpoint", str(workdir / "m.ckpt"), "--src", str(src), "--dst", str(dst), "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert np.allclose(np.reshape(res["R"], (3, 3)), T.R, atol=1e-6)
    assert np.allclose(res["t"], T.t, atol=1e-6)


def test_register_icp_needs_no_checkpoint(workdir, tmp_path):
    src = workdir / "data" / "torus_0001.xyz"
    out = tmp_path / "i.json"
    assert main(["register", "--registrar", "icp", "--src", str(src), "--dst", str(src), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["registrar"] == "icp"
    assert main(["register", "--registrar", "full", "--src", str(src), "--dst", str(src), "--out", str(out)]) == 1


def test_ablate_emits_seven_rows(workdir, tmp_path):
    data = str(workdir / "data")
    assert main(["ablate", "--config", str(SMOKE), "--train-dir", data, "--test-dir", data, "--out-dir", str(tmp_path)]) == 0
    table = json.loads((tmp_path / "ablation.json").read_text())
    jsonschema.validate(table, load_schema("ablation"))
    assert len(table["rows"]) == 7 and table["rows"][0]["mode"] == "full_method"


def test_bench_single_point_grid(workdir, tmp_path):
    data = str(workdir / "data")
    assert main(["bench", "--config", str(SMOKE), "--train-dir", data, "--test-dir", data,
                 "--checkpoint", str(workdir / "m.ckpt"), "--noise-grid", "0.01", "--out-dir", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    jsonschema.validate(metrics, load_schema("metrics"))
    rows = list(csv.DictReader(open(tmp_path / "sweep_noise_sigma.csv")))
    assert len(rows) == 1 and float(rows[0]["value"]) == 0.01


def test_replay_reproduces_outputs(workdir, tmp_path):
    data = str(workdir / "data")
    out = tmp_path / "b"
    assert main(["bench", "--config", str(SMOKE), "--train-dir", data, "--test-dir", data, "--out-dir", str(out)]) == 0
    before = (out / "metrics.json").read_bytes()
    assert main(["replay", str(out / "manifest.json")]) == 0
    assert (out / "metrics.json").read_bytes() == before


def test_replay_detects_tampering(workdir, tmp_path):
    src = workdir / "data" / "torus_0002.xyz"
    out = tmp_path / "o.json"
    main(["register", "--registrar", "icp", "--src", str(src), "--dst", str(src), "--out", str(out)])
    man_path = tmp_path / "o.json.manifest.json"
    man = json.loads(man_path.read_text())
    man["outputs"][str(out)] = "0" * 64
    man_path.write_text(json.dumps(man))
    assert main(["replay", str(man_path)]) == 2


def test_exit_codes_and_messages(workdir, tmp_path, capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"epochs": 1, "lr_rate": 0.1}')
    assert main(["train", "--config", str(bad), "--data", str(workdir / "data"), "--out", str(tmp_path / "x")]) == 1
    assert "lr_rate" in capsys.readouterr().err
    bad.write_text('{"m_p": 0.2, "m_n": 0.5}')
    assert main(["train", "--config", str(bad), "--data", str(workdir / "data"), "--out", str(tmp_path / "x")]) == 1
    assert "m_p" in capsys.readouterr().err
    assert main(["train", "--config", str(SMOKE), "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "x")]) == 2
    assert main(["register", "--registrar", "icp", "--src", str(tmp_path / "nope.xyz"),
                 "--dst", str(tmp_path / "nope.xyz"), "--out", str(tmp_path / "o.json")]) == 2
