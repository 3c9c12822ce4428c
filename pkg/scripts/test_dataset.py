"""
测试数据集读写、真值生成与逐图像评估
"""

import json
import math

import numpy as np
import pytest

from scripts.dataset import Dataset, Frame, audit_image, evaluate_dirs, load_dataset, make_dataset, write_dataset
from scripts.errors import DataError
from scripts.geometry import look_at
from scripts.image_io import write_hdr


def _small_dataset(scene, out_dir, seed=0, views=3):
    return make_dataset(scene, views, spp=1, seed=seed, out_dir=out_dir, depth=1, width=8, height=6)


# ============================================================================
# 生成与读取
# ============================================================================


def test_make_dataset_split_and_files(sphere_scene, tmp_path):
    dataset = _small_dataset(sphere_scene, tmp_path)
    assert [f.name for f in dataset.train] == ["r_000", "r_001"]
    assert [f.name for f in dataset.test] == ["r_002"]
    assert dataset.train[0].image.shape == (6, 8, 3)
    for split in ("train", "test"):
        meta = json.loads((tmp_path / f"transforms_{split}.json").read_text(encoding="utf-8"))
        assert meta["camera_angle_x"] == pytest.approx(math.radians(40.0))
        for entry in meta["frames"]:
            assert (tmp_path / entry["file_path"]).exists()
            assert len(entry["transform_matrix"]) == 4


def test_make_dataset_deterministic(sphere_scene, tmp_path):
    _small_dataset(sphere_scene, tmp_path / "a", seed=5)
    _small_dataset(sphere_scene, tmp_path / "b", seed=5)
    for rel in ("train/r_000.hdr", "train/r_001.hdr", "test/r_002.hdr", "transforms_train.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_make_dataset_cameras_on_upper_hemisphere(sphere_scene, tmp_path):
    dataset = _small_dataset(sphere_scene, tmp_path, views=6)
    for frame in dataset.train + dataset.test:
        assert frame.camera.is_rigid()
        assert frame.camera.position[2] > 0.0
        assert np.linalg.norm(frame.camera.position) == pytest.approx(4.0)


def test_make_dataset_rejects_zero_views(sphere_scene, tmp_path):
    with pytest.raises(DataError):
        make_dataset(sphere_scene, 0, spp=1, seed=0, out_dir=tmp_path)


def test_load_dataset_roundtrip(sphere_scene, tmp_path):
    made = _small_dataset(sphere_scene, tmp_path)
    loaded = load_dataset(tmp_path)
    assert len(loaded) == 3
    assert loaded.root == tmp_path
    for a, b in zip(made.train + made.test, loaded.train + loaded.test):
        assert a.name == b.name
        assert np.allclose(a.camera.c2w, b.camera.c2w)
        assert a.camera.fov_x == pytest.approx(b.camera.fov_x)
        peak = a.image.max(axis=-1, keepdims=True)
        assert np.all(np.abs(a.image - b.image) <= peak / 128.0 + 1e-12)


def test_load_dataset_missing_dir(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope")


def test_load_dataset_without_train_split(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_load_dataset_missing_image(sphere_scene, tmp_path):
    _small_dataset(sphere_scene, tmp_path)
    (tmp_path / "train" / "r_001.hdr").unlink()
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_load_dataset_invalid_json(tmp_path):
    (tmp_path / "transforms_train.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_dataset_validate_sizes_and_poses():
    camera = look_at((0.0, -3.0, 0.0), (0.0, 0.0, 0.0), width=4, height=4)
    good = Frame("a", camera, np.ones((4, 4, 3)))
    small = Frame("b", camera, np.ones((2, 2, 3)))
    with pytest.raises(DataError):
        Dataset(train=[good, small]).validate()

    skewed = look_at((0.0, -3.0, 0.0), (0.0, 0.0, 0.0), width=4, height=4)
    skewed.c2w[:3, 0] *= 2.0
    with pytest.raises(DataError):
        Dataset(train=[good, Frame("c", skewed, np.ones((4, 4, 3)))]).validate()
    assert Dataset(train=[good]).validate().train == [good]


@pytest.mark.parametrize("bad", [np.nan, np.inf, -0.5])
def test_audit_image(bad):
    image = np.ones((3, 3, 3))
    audit_image(image, "ok")
    image[1, 1, 0] = bad
    with pytest.raises(DataError):
        audit_image(image, "bad")


def test_write_dataset_skips_empty_split(tmp_path):
    camera = look_at((0.0, -3.0, 0.0), (0.0, 0.0, 0.0), width=4, height=4)
    write_dataset(Dataset(train=[Frame("only", camera, np.full((4, 4, 3), 0.5))]), tmp_path)
    assert (tmp_path / "transforms_train.json").exists()
    assert not (tmp_path / "transforms_test.json").exists()
    assert len(load_dataset(tmp_path).train) == 1


# ============================================================================
# 评估
# ============================================================================


def test_evaluate_identical_dirs(tmp_path):
    img = np.random.default_rng(0).random((4, 4, 3))
    for d in ("render", "gt"):
        write_hdr(tmp_path / d / "r_000.hdr", img)
        write_hdr(tmp_path / d / "r_001.hdr", img * 0.5)
    rows = evaluate_dirs(tmp_path / "render", tmp_path / "gt")
    assert [r["name"] for r in rows] == ["r_000", "r_001", "mean"]
    assert all(math.isinf(r["psnr"]) for r in rows)


def test_evaluate_reports_bad_rows(tmp_path):
    img = np.full((4, 4, 3), 0.5)
    write_hdr(tmp_path / "render" / "a.hdr", img)
    write_hdr(tmp_path / "gt" / "a.hdr", img * 0.9)
    write_hdr(tmp_path / "render" / "b.hdr", img)
    write_hdr(tmp_path / "gt" / "b.hdr", np.full((2, 4, 3), 0.5))
    write_hdr(tmp_path / "render" / "c.hdr", img)
    (tmp_path / "render" / "notes.txt").write_text("ignored", encoding="utf-8")

    rows = {r["name"]: r for r in evaluate_dirs(tmp_path / "render", tmp_path / "gt")}
    assert set(rows) == {"a", "b", "c", "mean"}
    assert rows["a"]["error"] == "" and math.isfinite(rows["a"]["psnr"])
    assert rows["b"]["psnr"] is None and "dimension mismatch" in rows["b"]["error"]
    assert rows["c"]["psnr"] is None and rows["c"]["error"] == "missing ground truth"
    assert rows["mean"]["psnr"] == pytest.approx(rows["a"]["psnr"])


def test_evaluate_missing_dirs(tmp_path):
    with pytest.raises(DataError):
        evaluate_dirs(tmp_path / "x", tmp_path / "y")
