import json
import os

import numpy as np
import pytest

from trisim.cli import main
from trisim.config import WorkbenchConfig, named_stream
from trisim.errors import ConfigError
from trisim.raster import ImageBuffer, write_ppm


DESK_INI = """
[sim]
grid_nx = 9
grid_ny = 11
pull_substeps = 8
settle_steps = 8

[camera]
width = 64
height = 64

[dataset]
image_size = 64
count_source = 8
count_target = 4
actions_per_episode = 3

[cut]
epochs = 2
save_every = 1
batch_size = 4
width = 4
head_hidden = 8
patches_per_tap = 8

[metrics]
feature_epochs = 2
score_sample = 8

[policy]
total_steps_image = 32
total_steps_embedded = 32
rollout_steps = 16
n_envs = 2
epochs = 2
batch_size = 8
runs_per_condition = 1
checkpoints_per_run = 2
test_episodes = 1
settle_on_reset = 20
"""


@pytest.fixture(scope="module")
def desk_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "desk.ini"
    path.write_text(DESK_INI)
    return str(path)


def test_config_defaults_validate():
    cfg = WorkbenchConfig.defaults().validate()
    assert cfg.get("policy", "total_steps_embedded") == 128000
    assert cfg.get("dataset", "count_source") == 500


def test_config_rejects_unknown_key(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[sim]\nnot_a_key = 1\n")
    with pytest.raises(ConfigError):
        WorkbenchConfig.load(str(bad))


def test_config_rejects_unknown_section(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError):
        WorkbenchConfig.load(str(bad))


def test_config_rejects_bad_value(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[sim]\ngrid_nx = banana\n")
    with pytest.raises(ConfigError):
        WorkbenchConfig.load(str(bad))


def test_config_hash_stable(desk_ini):
    a = WorkbenchConfig.load(desk_ini)
    b = WorkbenchConfig.load(desk_ini)
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != WorkbenchConfig.defaults().content_hash()


def test_config_comments_and_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("# a comment\n[sim]\ngrid_nx = 5  # inline\n")
    cfg = WorkbenchConfig.load(str(path))
    assert cfg.get("sim", "grid_nx") == 5
    assert cfg.get("sim", "grid_ny") == 21  # untouched default


def test_named_streams_independent_and_reproducible():
    a1 = named_stream(7, "sim").integers(0, 1 << 30, 4)
    a2 = named_stream(7, "sim").integers(0, 1 << 30, 4)
    b = named_stream(7, "policy").integers(0, 1 << 30, 4)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    with pytest.raises(ConfigError):
        named_stream(7, "bogus")


def test_cli_missing_input_exit_code_2(tmp_path, desk_ini):
    rc = main(
        [
            "--config", desk_ini,
            "train-translator", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"),
        ]
    )
    assert rc == 2


def test_cli_unknown_config_exit_code_2(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[sim]\nwhat = 1\n")
    rc = main(["--config", str(bad), "report", "--experiment", str(tmp_path)])
    assert rc == 2


def test_cli_gen_dataset_and_force(tmp_path, desk_ini):
    out = str(tmp_path / "data")
    assert main(["--config", desk_ini, "--seed", "5", "gen-dataset", "--out", out]) == 0
    assert len(os.listdir(os.path.join(out, "source"))) == 8
    assert len(os.listdir(os.path.join(out, "target"))) == 4
    manifest = json.load(open(os.path.join(out, "manifest.json")))
    assert manifest["status"] == "ok"
    assert manifest["command"] == "gen-dataset"
    assert any(k.startswith("source/") for k in manifest["artifacts"])
    # refuses to overwrite without --force
    assert main(["--config", desk_ini, "gen-dataset", "--out", out]) == 2
    assert (
        main(["--config", desk_ini, "--force", "--seed", "5", "gen-dataset", "--out", out])
        == 0
    )


def test_cli_gen_dataset_deterministic(tmp_path, desk_ini):
    import hashlib

    outs = []
    for tag in ("a", "b"):
        out = str(tmp_path / tag)
        assert main(["--config", desk_ini, "--seed", "9", "gen-dataset", "--out", out]) == 0
        digest = hashlib.sha256()
        for sub in ("source", "target"):
            for name in sorted(os.listdir(os.path.join(out, sub))):
                digest.update(open(os.path.join(out, sub, name), "rb").read())
        outs.append(digest.hexdigest())
    assert outs[0] == outs[1]


def test_cli_dry_run_touches_nothing(tmp_path, desk_ini):
    out = str(tmp_path / "dry")
    rc = main(["--config", desk_ini, "--dry-run", "gen-dataset", "--out", out])
    assert rc == 0
    assert os.listdir(out) == ["manifest.json"]
    manifest = json.load(open(os.path.join(out, "manifest.json")))
    assert manifest["status"] == "dry-run"


def test_cli_score_frame(tmp_path, desk_ini, capsys):
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    img[:8, :8] = (0, 0, 255)
    frame = str(tmp_path / "f.ppm")
    write_ppm(frame, ImageBuffer.create(img))
    pose = str(tmp_path / "pose.txt")
    with open(pose, "w") as fh:
        fh.write("-1 0 -1  1 0 -1  0 0 1\n0 0.0 0  0.2 0.0 0\n")
    rc = main(["--config", desk_ini, "score-frame", frame, pose])
    assert rc == 0
    row = capsys.readouterr().out.strip()
    fields = row.split(",")
    assert fields[0] == "64"  # red pixel count
    assert fields[1] == "1"  # goal1 (eps1 at 32x32 = 6)
    assert fields[-1] == "1.0"


def test_cli_score_frame_bad_pose(tmp_path, desk_ini):
    img = np.zeros((16, 16, 3), dtype=np.uint8)
    frame = str(tmp_path / "f.ppm")
    write_ppm(frame, ImageBuffer.create(img))
    pose = str(tmp_path / "pose.txt")
    with open(pose, "w") as fh:
        fh.write("1 2 3\n")
    assert main(["--config", desk_ini, "score-frame", frame, pose]) == 2


def test_cli_full_chain_small(tmp_path, desk_ini):
    data = str(tmp_path / "data")
    trans = str(tmp_path / "trans")
    exp = str(tmp_path / "exp")
    assert main(["--config", desk_ini, "--seed", "3", "gen-dataset", "--out", data]) == 0
    assert (
        main(["--config", desk_ini, "--seed", "3", "train-translator", "--data", data, "--out", trans])
        == 0
    )
    assert (
        main(["--config", desk_ini, "--seed", "3", "select-translator", "--ckpts", trans, "--data", data])
        == 0
    )
    scores = open(os.path.join(trans, "scores.csv")).read().strip().split("\n")
    assert scores[0] == "epoch,is_mean,is_std,fid,rank_sum,selected"
    assert len(scores) == 3  # 2 checkpoints
    selected = open(os.path.join(trans, "selected.txt")).read().strip().split("\n")
    assert all(os.path.isfile(p) for p in selected)
    assert (
        main(
            [
                "--config", desk_ini, "--seed", "3",
                "train-policy", "--variants", "original", "--out", exp,
            ]
        )
        == 0
    )
    ck = os.path.join(exp, "original", "run00", "policy_ck01.ckpt")
    assert os.path.isfile(ck)
    assert (
        main(
            [
                "--config", desk_ini, "--seed", "3",
                "evaluate", "--policy", ck, "--variant", "original",
                "--episodes", "2", "--out", str(tmp_path / "ev"),
            ]
        )
        == 0
    )
    assert (
        main(["--config", desk_ini, "report", "--experiment", exp, "--out", str(tmp_path / "rep")])
        == 0
    )
    for name in ("fig7_loss.csv", "fig8_reward.csv", "fig9_success.csv", "fig10_steps.csv"):
        assert os.path.isfile(os.path.join(tmp_path / "rep", name))


def test_cli_select_scores_csv_counts(tmp_path, desk_ini):
    # cmd_select over N checkpoints -> scores.csv with N rows and
    # min(top_n, N) selected rows
    import csv

    data = str(tmp_path / "d")
    trans = str(tmp_path / "t")
    assert main(["--config", desk_ini, "--seed", "4", "gen-dataset", "--out", data]) == 0
    assert (
        main(["--config", desk_ini, "--seed", "4", "train-translator", "--data", data, "--out", trans])
        == 0
    )
    assert (
        main(["--config", desk_ini, "--seed", "4", "select-translator", "--ckpts", trans, "--data", data])
        == 0
    )
    with open(os.path.join(trans, "scores.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert sum(int(r["selected"]) for r in rows) == 2
