"""
测试命令行入口、退出码、run.json 与配置加载
"""

import csv

import numpy as np
import pytest

from app.main import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main
from app.models import RunStatus
from app.services import pipeline
from app.services.run_manager import RunManager
from app.settings import Settings, load_configs
from scripts.errors import DataError, DivergenceError
from scripts.image_io import read_hdr, write_hdr

FAST_CONFIG = """\
render:
  spp: 1
  depth: 1
  n_light: 2
  n_brdf: 2
  workers: 1
optim:
  iterations: 2
  warmup: 0
  eval_every: 0
  checkpoint_every: 0
  preview_every: 0
  smooth_points: 32
"""


@pytest.fixture(autouse=True)
def _isolated(monkeypatch):
    monkeypatch.delenv("REFMC_THREADS", raising=False)
    Settings.clear_cache()
    yield
    Settings.clear_cache()


@pytest.fixture
def fast_config(tmp_path):
    path = tmp_path / "fast.yaml"
    path.write_text(FAST_CONFIG, encoding="utf-8")
    return path


def run(*args) -> int:
    return main(["--log-file", "", *map(str, args)])


# ============================================================================
# 用法错误
# ============================================================================


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["bogus"],
        ["render"],
        ["render", "--scene", "a.yaml"],
        ["render", "--scene", "a.yaml", "--out", "b.hdr", "--depth", "5"],
        ["optimize", "--scene", "a.yaml", "--data", "d", "--out", "o", "--lr", "fast"],
    ],
)
def test_usage_errors(argv):
    assert run(*argv) == EXIT_USAGE


# ============================================================================
# render
# ============================================================================


def test_render_writes_images(minimal_scene_file, fast_config, tmp_path, capsys):
    out = tmp_path / "out" / "img.hdr"
    code = run("render", "--scene", minimal_scene_file, "--out", out, "--config", fast_config, "--seed", 3)
    assert code == EXIT_OK
    image = read_hdr(out)
    assert image.shape == (8, 8, 3)
    assert (tmp_path / "out" / "img_diffuse.hdr").exists()
    assert "rays/sec=" in capsys.readouterr().out


def test_render_missing_scene(tmp_path):
    assert run("render", "--scene", tmp_path / "nope.yaml", "--out", tmp_path / "x.hdr") == EXIT_DATA


def test_render_bad_camera_index(minimal_scene_file, fast_config, tmp_path):
    code = run("render", "--scene", minimal_scene_file, "--out", tmp_path / "x.hdr",
               "--config", fast_config, "--camera", 4)
    assert code == EXIT_DATA


def test_render_scene_error(tmp_path):
    scene = tmp_path / "bad.yaml"
    scene.write_text("meshes:\n  - primitive: cone\n", encoding="utf-8")
    assert run("render", "--scene", scene, "--out", tmp_path / "x.hdr") == EXIT_DATA


# ============================================================================
# make-dataset / optimize / eval
# ============================================================================


def _make_data(scene_file, out_dir):
    return run("make-dataset", "--scene", scene_file, "--out", out_dir, "--views", 3,
               "--spp", 1, "--depth", 1, "--width", 6, "--height", 6)


def test_make_dataset_command(minimal_scene_file, tmp_path):
    data = tmp_path / "data"
    assert _make_data(minimal_scene_file, data) == EXIT_OK
    assert (data / "transforms_train.json").exists()
    assert (data / "test" / "r_002.hdr").exists()
    record = RunManager.load(data)
    assert record.command == "make-dataset"
    assert record.status == RunStatus.COMPLETED
    assert [s.status for s in record.steps] == [RunStatus.COMPLETED] * 2
    assert record.result == {"out_dir": str(data), "train": 2, "test": 1}


def test_optimize_command(minimal_scene_file, fast_config, tmp_path):
    data = tmp_path / "data"
    out = tmp_path / "run"
    assert _make_data(minimal_scene_file, data) == EXIT_OK
    code = run("optimize", "--scene", minimal_scene_file, "--data", data, "--config", fast_config,
               "--out", out, "--lr", 0.01)
    assert code == EXIT_OK

    record = RunManager.load(out)
    assert record.status == RunStatus.COMPLETED
    assert [s.step_name for s in record.steps] == ["Load Scene", "Load Dataset", "Optimize", "Render Test Views"]
    assert record.steps[2].result["iterations"] == 2
    assert record.completed_at is not None
    assert (out / "metrics.csv").exists()
    assert (out / "final" / "k_d.rfm").exists()
    assert (out / "renders" / "r_002.hdr").exists()

    # 从检查点继续
    again = tmp_path / "again"
    code = run("optimize", "--scene", minimal_scene_file, "--data", data, "--config", fast_config,
               "--out", again, "--init", out / "final", "--iterations", 1)
    assert code == EXIT_OK
    assert RunManager.load(again).steps[2].result["iterations"] == 1


def test_optimize_missing_data(minimal_scene_file, fast_config, tmp_path):
    out = tmp_path / "run"
    code = run("optimize", "--scene", minimal_scene_file, "--data", tmp_path / "nope",
               "--config", fast_config, "--out", out)
    assert code == EXIT_DATA
    record = RunManager.load(out)
    assert record.status == RunStatus.FAILED
    assert record.steps[-1].step_name == "Load Dataset"
    assert record.steps[-1].status == RunStatus.FAILED
    assert record.error


def test_optimize_divergence_exit_code(minimal_scene_file, fast_config, tmp_path, monkeypatch):
    data = tmp_path / "data"
    assert _make_data(minimal_scene_file, data) == EXIT_OK

    def _diverge(*args, **kwargs):
        raise DivergenceError("blow-up", {"iteration": 7})

    monkeypatch.setattr(pipeline, "optimize", _diverge)
    out = tmp_path / "run"
    code = run("optimize", "--scene", minimal_scene_file, "--data", data, "--config", fast_config, "--out", out)
    assert code == EXIT_DIVERGED
    record = RunManager.load(out)
    assert record.status == RunStatus.DIVERGED
    assert record.result == {"iteration": 7}


def test_eval_command(tmp_path, capsys):
    img = np.full((4, 4, 3), 0.25)
    write_hdr(tmp_path / "render" / "a.hdr", img)
    write_hdr(tmp_path / "gt" / "a.hdr", img)
    out = tmp_path / "metrics" / "psnr.csv"
    assert run("eval", tmp_path / "render", tmp_path / "gt", "--out", out) == EXIT_OK
    with open(out, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["name", "psnr", "error"]
    assert rows[1] == ["a", "inf", ""]
    assert rows[2][0] == "mean"
    assert "a\tinf" in capsys.readouterr().out


def test_eval_missing_dirs(tmp_path):
    assert run("eval", tmp_path / "x", tmp_path / "y") == EXIT_DATA


# ============================================================================
# 配置与运行状态
# ============================================================================


def test_settings_defaults_and_overrides():
    rcfg, ocfg = load_configs(render_overrides={"spp": 3, "depth": None}, optim_overrides={"lr": 0.5})
    assert rcfg.spp == 3
    assert rcfg.depth == 2
    assert ocfg.lr == 0.5
    assert ocfg.w_d == pytest.approx(0.1)


def test_settings_rejects_unknown_section(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("render: {}\nextra: 1\n", encoding="utf-8")
    with pytest.raises(DataError):
        Settings(path)


def test_settings_rejects_invalid_value(fast_config):
    with pytest.raises(DataError):
        Settings(fast_config).render_config({"depth": 7})
    with pytest.raises(DataError):
        Settings(fast_config).optim_config({"typo": 1})


def test_settings_missing_file(tmp_path):
    with pytest.raises(DataError):
        Settings(tmp_path / "none.yaml")


def test_run_manager_steps(tmp_path):
    run_manager = RunManager(tmp_path, "render", total_steps=2, run_id="abc")
    assert RunManager.load(tmp_path).status == RunStatus.PENDING
    run_manager.add_step_result(1, "A", RunStatus.FAILED, error="x")
    run_manager.add_step_result(1, "A", RunStatus.COMPLETED, result={"n": 1})
    run_manager.update(status=RunStatus.COMPLETED, progress="done")
    record = RunManager.load(tmp_path)
    assert record.run_id == "abc"
    assert len(record.steps) == 1
    assert record.steps[0].result == {"n": 1}
    assert record.completed_at is not None
    assert not (tmp_path / "run.tmp").exists()
