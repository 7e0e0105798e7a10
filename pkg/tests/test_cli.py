import json

import numpy as np
import pytest

from ikmr.cli import EXIT_INVALID, EXIT_OK, main
from ikmr.nets import load_model, retarget
from ikmr.skeleton import load_motion, motion_to_dict, save_motion
from ikmr.training import load_dataset


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("datagen", "--output", d / "ds.json", "--count", 4, "--seed", 3) == EXIT_OK
    assert run("pretrain", "--dataset", d / "ds.json", "--output", d / "m.ckpt", "--steps", 3,
               "--batch-size", 2, "--log", d / "pre.jsonl", "--seed", 3) == EXIT_OK
    return d


def test_unknown_flag_is_rejected(work, capsys):
    assert run("datagen", "--output", work / "x.json", "--bogus", 1) == EXIT_INVALID
    assert run("no-such-command") == EXIT_INVALID
    assert run() == EXIT_INVALID


def test_missing_model_is_a_validation_failure(work):
    assert run("retarget", "--model", work / "absent.ckpt", "--input", work, "--output", work / "o") == EXIT_INVALID


def test_datagen_is_deterministic(work, tmp_path):
    for name in ("a.json", "b.json"):
        assert run("datagen", "--output", tmp_path / name, "--count", 3, "--seed", 11) == EXIT_OK
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("IKMR_SEED", "11")
    assert run("datagen", "--output", tmp_path / "env.json", "--count", 3) == EXIT_OK
    assert run("datagen", "--output", tmp_path / "flag.json", "--count", 3, "--seed", 11) == EXIT_OK
    assert (tmp_path / "env.json").read_bytes() == (tmp_path / "flag.json").read_bytes()


def test_pretrain_resume_continues_step_numbering(work, tmp_path):
    log = tmp_path / "log.jsonl"
    assert run("pretrain", "--dataset", work / "ds.json", "--output", tmp_path / "a.ckpt", "--steps", 2,
               "--batch-size", 2, "--log", log) == EXIT_OK
    assert run("pretrain", "--dataset", work / "ds.json", "--output", tmp_path / "b.ckpt", "--steps", 2,
               "--batch-size", 2, "--log", log, "--resume", tmp_path / "a.ckpt") == EXIT_OK
    steps = [json.loads(line)["step"] for line in log.read_text().splitlines()]
    assert steps == [0, 1, 2, 3]


def test_resume_matches_uninterrupted_run(work, tmp_path):
    common = ["--dataset", work / "ds.json", "--batch-size", 2, "--seed", 5]
    assert run("pretrain", *common, "--output", tmp_path / "full.ckpt", "--steps", 4) == EXIT_OK
    assert run("pretrain", *common, "--output", tmp_path / "half.ckpt", "--steps", 2) == EXIT_OK
    assert run("pretrain", *common, "--output", tmp_path / "rest.ckpt", "--steps", 2,
               "--resume", tmp_path / "half.ckpt") == EXIT_OK
    full, rest = load_model(tmp_path / "full.ckpt")[0], load_model(tmp_path / "rest.ckpt")[0]
    for k, p in full.parameters().items():
        assert np.array_equal(p.value, rest.parameters()[k].value), k


def test_finetune_refuses_mismatched_skeleton_b(work, tmp_path):
    assert run("datagen", "--output", tmp_path / "g1.json", "--count", 2, "--skeleton-b", "g1-like") == EXIT_OK
    assert run("finetune", "--model", work / "m.ckpt", "--output", tmp_path / "f.ckpt",
               "--feasible", tmp_path / "g1.json", "--steps", 1) == EXIT_INVALID
    assert not (tmp_path / "f.ckpt").exists()


def test_finetune_from_dataset_mode(work, tmp_path):
    assert run("finetune", "--model", work / "m.ckpt", "--output", tmp_path / "f.ckpt",
               "--dataset", work / "ds.json", "--steps", 2, "--batch-size", 2,
               "--log", tmp_path / "ft.jsonl") == EXIT_OK
    rows = [json.loads(line) for line in (tmp_path / "ft.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1] and {"loss_recon_B", "loss_ee"} <= set(rows[0])


def test_retarget_directory_matches_sequential(work, tmp_path):
    ds = load_dataset(work / "ds.json")
    src = tmp_path / "in"
    src.mkdir()
    for i, (a, _) in enumerate(ds.pairs):
        save_motion(a, src / f"clip{i}.json")
    assert run("retarget", "--model", work / "m.ckpt", "--input", src, "--output", tmp_path / "out",
               "--workers", 2) == EXIT_OK
    model = load_model(work / "m.ckpt")[0]
    for i, (a, _) in enumerate(ds.pairs):
        out = load_motion(tmp_path / "out" / f"clip{i}.json")
        ref = retarget(model, a)
        assert out.skeleton == model.skeletons["B"].name
        assert np.array_equal(out.rotations, ref.rotations)
        assert np.array_equal(out.root_translation, ref.root_translation)


def test_retarget_long_single_file(work, tmp_path):
    ds = load_dataset(work / "ds.json")
    a = ds.pairs[0][0]
    d = motion_to_dict(a)
    d["rotations"] = d["rotations"] + d["rotations"][:40]
    d["root_translation"] = d["root_translation"] + d["root_translation"][:40]
    (tmp_path / "long.json").write_text(json.dumps(d))
    assert run("retarget", "--model", work / "m.ckpt", "--input", tmp_path / "long.json",
               "--output", tmp_path / "long_out.json") == EXIT_OK
    assert load_motion(tmp_path / "long_out.json").num_frames == 104


def test_corrupt_quaternion_names_file_and_frame(work, tmp_path, capsys):
    a = load_dataset(work / "ds.json").pairs[0][0]
    d = motion_to_dict(a)
    d["rotations"][17][2] = [0.5, 0.5, 0.0, 0.0]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    capsys.readouterr()
    assert run("retarget", "--model", work / "m.ckpt", "--input", bad, "--output", tmp_path / "o.json") == EXIT_INVALID
    err = capsys.readouterr().err
    assert "bad.json" in err and "frame 17" in err


def test_eval_twice_is_byte_identical(work, tmp_path):
    from ikmr.resources import config_path

    for name in ("r1.json", "r2.json"):
        assert run("eval", "--model", work / "m.ckpt", "--baseline-model", work / "m.ckpt",
                   "--dataset", work / "ds.json", "--noise-levels", "0,0.05",
                   "--limits", config_path("toy-robot-limits.json"),
                   "--report", tmp_path / name, "--seed", 2) == EXIT_OK
    assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()
    assert (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()
    rep = json.loads((tmp_path / "r1.json").read_text())
    for side in ("model", "baseline"):
        assert all(v >= 0 for v in rep["smoothness"][side].values())
    assert rep["noise_sweep"][0]["akte"] == 0.0
    assert all(v == {"count": 0, "max": 0.0} for v in rep["feasibility"]["filtered"].values())
    assert (tmp_path / "r1.csv").read_text().splitlines()[0] == "noise_std,akte,akja,source_akja"


def test_bench_row_count(work, tmp_path):
    out = tmp_path / "bench.csv"
    assert run("bench", "--model", work / "m.ckpt", "--batch-sizes", "1,2", "--repeats", 1,
               "--workers", 2, "--output", out) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0].split(",")[:2] == ["backend", "batch_size"]
    from ikmr import _kernels

    assert len(lines) == 1 + 2 * len(_kernels.BACKENDS)
    assert all(float(line.split(",")[6]) > 0 for line in lines[1:])
