"""Command-line behavior: exit codes, printed summaries, artifact side effects.

Heavy stages reuse the session workspace through a config file; only gen-data
and build run from scratch here, at the micro scale.
"""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from blockforge.cli import main
from blockforge.config import config_from_dict, config_to_dict, config_to_json


@pytest.fixture()
def cfg_file(micro_ws, tmp_path):
    path = tmp_path / "config.json"
    path.write_text(config_to_json(micro_ws))
    return str(path)


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-verb"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--n", "2"])  # missing --seed
    assert exc.value.code == 2


def test_bad_config_path_exits_1(capsys):
    code = main(["fit", "--config", "/does/not/exist.json"])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")


def test_fit_resumes_with_nothing_left(cfg_file, capsys):
    code = main(["fit", "--config", cfg_file])
    assert code == 0
    assert "fitted 0 of 8 blocks" in capsys.readouterr().out


def test_sample_writes_meshes_to_out_dir(cfg_file, tmp_path, capsys):
    out = tmp_path / "smp"
    code = main([
        "sample", "--config", cfg_file, "--n", "1", "--seed", "5",
        "--out", str(out),
    ])
    assert code == 0
    printed = capsys.readouterr().out.strip().splitlines()
    assert len(printed) == 1
    mesh = Path(printed[0])
    assert mesh.parent == out
    assert mesh.read_text().startswith(("v ", "#", "o "))


def test_eval_prints_metric_table(scene_copy, tmp_path, capsys):
    meshes = str(scene_copy.parent / "meshes")
    report_path = tmp_path / "report.json"
    code = main(["eval", "--pred", meshes, "--ref", meshes, "--out", str(report_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "cd_mean" in out
    assert json.loads(report_path.read_text())["cd_mean"] == pytest.approx(0.0, abs=1e-12)


def test_expand_rejects_bad_targets(cfg_file, scene_copy, capsys):
    code = main([
        "expand", "--config", cfg_file, "--scene", str(scene_copy),
        "--to", "garbage", "--seed", "1",
    ])
    assert code == 1
    assert "error:" in capsys.readouterr().err

    code = main([
        "expand", "--config", cfg_file, "--scene", str(scene_copy),
        "--to", "0,0,0", "--seed", "1",
    ])
    assert code == 1
    assert "already populated" in capsys.readouterr().err


def test_build_reports_block_count(cfg_file, micro_ws, capsys):
    code = main([
        "build", "--config", cfg_file, "--scene-extent", "4.8,3.2,3.3",
        "--name", "cli_build", "--seed", "3",
    ])
    assert code == 0
    assert "'cli_build': 4 blocks" in capsys.readouterr().out
    manifest = Path(micro_ws.artifact_dir) / "scenes" / "cli_build" / "manifest.json"
    assert manifest.exists()


def test_build_rejects_malformed_extent(cfg_file, capsys):
    code = main([
        "build", "--config", cfg_file, "--scene-extent", "4.8,3.2",
        "--name", "never", "--seed", "0",
    ])
    assert code == 1
    assert "--scene-extent" in capsys.readouterr().err


def test_gen_data_writes_resolved_config(micro_ws, tmp_path, capsys):
    raw = config_to_dict(micro_ws)
    raw["artifact_dir"] = str(tmp_path / "fresh")
    raw["data"] = dict(raw["data"], train_blocks=2, holdout_blocks=1)
    cfg = config_from_dict(raw)
    path = tmp_path / "fresh.json"
    path.write_text(config_to_json(cfg))

    code = main(["gen-data", "--config", str(path)])
    assert code == 0
    assert "wrote 3 blocks" in capsys.readouterr().out
    resolved = Path(raw["artifact_dir"]) / "config.resolved.json"
    assert json.loads(resolved.read_text())["data"]["train_blocks"] == 2


def test_serve_rejects_bad_addr(cfg_file, scene_copy, capsys):
    code = main([
        "serve", "--config", cfg_file, "--scene", str(scene_copy),
        "--addr", "nohost",
    ])
    assert code == 1
    assert "HOST:PORT" in capsys.readouterr().err
