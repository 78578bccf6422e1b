import json
import zipfile

import numpy as np
import pytest
import torch
from PIL import Image

from promptstyle.bank import init_prompt_bank
from promptstyle.control import init_control_adapter
from promptstyle.diffusion import ToyDenoiser, build_noise_schedule, freeze, parameter_hash
from promptstyle.io import (Checkpoint, CheckpointError, ChecksumError, DatasetEmptyError, DatasetSpec,
                            ImageDecodeError, SchemaVersionError, dataset_paths, load_adapter, load_backbone,
                            load_bank, load_checkpoint, load_image_dataset, save_adapter, save_backbone, save_bank,
                            save_checkpoint, save_png, to_uint8)


def _write_png(path, size, colour):
    Image.new("RGB", size, colour).save(path)


def test_dataset_sorted_resized_and_scaled(tmp_path):
    _write_png(tmp_path / "b.png", (20, 30), (255, 0, 0))
    _write_png(tmp_path / "a.png", (64, 64), (0, 0, 255))
    Image.new("RGB", (10, 10), (0, 255, 0)).save(tmp_path / "c.jpg")
    (tmp_path / "notes.txt").write_text("not an image")
    spec = DatasetSpec(tmp_path, target_size=16)
    assert [p.name for p in dataset_paths(spec)] == ["a.png", "b.png", "c.jpg"]
    imgs = load_image_dataset(spec)
    assert len(imgs) == 3 and all(im.shape == (3, 16, 16) for im in imgs)
    assert torch.equal(imgs[0][2], torch.ones(16, 16)) and torch.equal(imgs[0][0], torch.zeros(16, 16))
    assert imgs[1][0].min() == 1.0
    assert all(im.min() >= 0 and im.max() <= 1 for im in imgs)
    assert len(load_image_dataset(DatasetSpec(tmp_path, 16, limit=2))) == 2


def test_dataset_large_target(tmp_path):
    _write_png(tmp_path / "x.png", (40, 24), (10, 20, 30))
    (im,) = load_image_dataset(DatasetSpec(tmp_path, target_size=512))
    assert im.shape == (3, 512, 512)
    assert im[0, 100, 100].item() == pytest.approx(10 / 255, abs=1e-6)


def test_dataset_errors(tmp_path):
    with pytest.raises(DatasetEmptyError):
        dataset_paths(DatasetSpec(tmp_path))
    with pytest.raises(FileNotFoundError):
        dataset_paths(DatasetSpec(tmp_path / "missing"))
    with pytest.raises(ValueError):
        DatasetSpec(tmp_path, target_size=100)
    (tmp_path / "broken.png").write_bytes(b"\x89PNG this is not a real png")
    with pytest.raises(ImageDecodeError, match="broken.png"):
        load_image_dataset(DatasetSpec(tmp_path))


def test_png_round_trip(tmp_path):
    img = torch.rand((3, 8, 8), generator=torch.Generator().manual_seed(0))
    save_png(img, tmp_path / "o.png")
    (back,) = load_image_dataset(DatasetSpec(tmp_path, 8))
    np.testing.assert_array_equal(to_uint8(back), to_uint8(img))


def test_checkpoint_round_trip_bitwise(tmp_path):
    arrays = {"f32": np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32),
              "f64": np.random.default_rng(1).normal(size=(5,)),
              "i64": np.arange(6, dtype=np.int64).reshape(2, 3),
              "big": np.arange(4, dtype=">f8")}
    save_checkpoint(tmp_path / "c.ckpt", Checkpoint(arrays, {"kind": "test", "note": [1, 2]}))
    ck = load_checkpoint(tmp_path / "c.ckpt", "test")
    for k, v in arrays.items():
        assert ck.arrays[k].dtype == v.dtype.newbyteorder("=")
        np.testing.assert_array_equal(ck.arrays[k], v)
    assert ck.metadata["note"] == [1, 2] and ck.metadata["created"]
    with zipfile.ZipFile(tmp_path / "c.ckpt") as zf:
        meta = json.loads(zf.read("metadata.json"))
    assert meta["schema_version"] == 1 and meta["entries"]["big"]["dtype"] == "<f8"
    assert not [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
    with pytest.raises(CheckpointError, match="expected"):
        load_checkpoint(tmp_path / "c.ckpt", "prompt_bank")


def _rewrite(src, dst, edit):
    with zipfile.ZipFile(src) as zin, zipfile.ZipFile(dst, "w") as zout:
        for item in zin.infolist():
            zout.writestr(item.filename, edit(item.filename, zin.read(item.filename)))


def test_schema_mismatch_and_corruption(tmp_path):
    save_checkpoint(tmp_path / "c.ckpt", Checkpoint({"w": np.ones(4)}, {"kind": "test"}))

    def bump(name, data):
        if name == "metadata.json":
            meta = json.loads(data)
            meta["schema_version"] = 2
            return json.dumps(meta)
        return data

    _rewrite(tmp_path / "c.ckpt", tmp_path / "v2.ckpt", bump)
    with pytest.raises(SchemaVersionError, match="version 2"):
        load_checkpoint(tmp_path / "v2.ckpt")

    def flip(name, data):
        return data[:-1] + bytes([data[-1] ^ 1]) if name == "arrays/w" else data

    _rewrite(tmp_path / "c.ckpt", tmp_path / "bad.ckpt", flip)
    with pytest.raises(ChecksumError, match="'w'"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_typed_round_trips(tmp_path):
    torch.manual_seed(0)
    model = freeze(ToyDenoiser(widths=(4, 6, 8), conditioning_dim=4, time_dim=8))
    sched = build_noise_schedule(16, 0.01, 0.3)
    save_backbone(tmp_path / "bb.ckpt", model, sched)
    m2, s2, _ = load_backbone(tmp_path / "bb.ckpt")
    assert parameter_hash(m2) == parameter_hash(model)
    np.testing.assert_array_equal(s2.alpha_bar, sched.alpha_bar)

    bank = init_prompt_bank(5, 2, 4, seed=3)
    save_bank(tmp_path / "bank.ckpt", bank, step=7, lambda_ortho=5e-3, seed=3)
    b2, md = load_bank(tmp_path / "bank.ckpt")
    assert torch.equal(b2.prompts, bank.prompts) and md["training_step"] == 7 and md["lambda_ortho"] == 5e-3

    adapter = init_control_adapter(model)
    with torch.no_grad():
        adapter.connectors[0].weight.fill_(0.25)
    save_adapter(tmp_path / "ad.ckpt", adapter, model, step=3)
    a2, _ = load_adapter(tmp_path / "ad.ckpt", m2)
    assert parameter_hash(a2) == parameter_hash(adapter)
    other = freeze(ToyDenoiser(widths=(4, 6, 6), conditioning_dim=4, time_dim=8))
    with pytest.raises(CheckpointError, match="built for"):
        load_adapter(tmp_path / "ad.ckpt", other)
