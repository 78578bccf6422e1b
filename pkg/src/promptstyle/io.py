"""Image datasets, PNG output and the checkpoint container.

A checkpoint is one zip archive holding raw little-endian arrays under
``arrays/<name>`` and a ``metadata.json`` entry recording schema version,
dtype, shape and sha256 of every array plus free-form metadata.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

SCHEMA_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class DatasetEmptyError(ValueError):
    pass


class ImageDecodeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class SchemaVersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class DatasetSpec:
    root_path: Path
    target_size: int = 32
    file_glob: str = "*"
    limit: Optional[int] = None

    def __post_init__(self):
        self.root_path = Path(self.root_path)
        if self.target_size < 8 or self.target_size % 8:
            raise ValueError(f"target_size must be >= 8 and divisible by 8, got {self.target_size}")
        if self.limit is not None and self.limit < 1:
            raise ValueError(f"limit must be >= 1, got {self.limit}")


def dataset_paths(spec: DatasetSpec) -> list[Path]:
    if not spec.root_path.is_dir():
        raise FileNotFoundError(f"dataset directory {spec.root_path} does not exist")
    paths = sorted((p for p in spec.root_path.glob(spec.file_glob)
                    if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
                   key=lambda p: p.resolve().as_posix())
    if spec.limit is not None:
        paths = paths[:spec.limit]
    if not paths:
        raise DatasetEmptyError(f"no images matching {spec.file_glob!r} under {spec.root_path}")
    return paths


def load_image(path, target_size: int) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((target_size, target_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def load_image_dataset(spec: DatasetSpec) -> list[torch.Tensor]:
    """Decode, bilinearly resize and scale to [0, 1], in sorted path order."""
    return [load_image(p, spec.target_size) for p in dataset_paths(spec)]


def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().to(torch.float64).clamp(0, 1).numpy().transpose(1, 2, 0)
    return np.round(arr * 255.0).astype(np.uint8)


def save_png(image: torch.Tensor, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    arrays: dict
    metadata: dict = field(default_factory=dict)


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.ascontiguousarray(value)


def save_checkpoint(path, payload: Checkpoint) -> Path:
    """Atomically write ``payload`` (temp file in the target directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    blobs = {}
    for name, value in payload.arrays.items():
        arr = _to_numpy(value)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        blobs[name] = raw
        entries[name] = {"dtype": le.dtype.str, "shape": list(arr.shape), "sha256": hashlib.sha256(raw).hexdigest()}
    meta = {
        "schema_version": SCHEMA_VERSION,
        "created": payload.metadata.get("created") or _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "entries": entries,
        "metadata": {k: v for k, v in payload.metadata.items() if k != "created"},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr("metadata.json", json.dumps(meta, indent=2, sort_keys=True))
            for name, raw in blobs.items():
                zf.writestr(f"arrays/{name}", raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, expected_kind: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive ({exc})") from exc
    with zf:
        try:
            meta = json.loads(zf.read("metadata.json"))
        except KeyError:
            raise CheckpointError(f"{path}: missing metadata.json") from None
        version = meta.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(f"{path}: checkpoint schema version {version} != supported version {SCHEMA_VERSION}")
        arrays = {}
        for name, info in meta["entries"].items():
            try:
                raw = zf.read(f"arrays/{name}")
            except KeyError:
                raise CheckpointError(f"{path}: entry {name!r} listed in metadata but missing") from None
            if hashlib.sha256(raw).hexdigest() != info["sha256"]:
                raise ChecksumError(f"{path}: checksum mismatch for entry {name!r}")
            dtype = np.dtype(info["dtype"])
            shape = tuple(info["shape"])
            if len(raw) != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"{path}: entry {name!r} has {len(raw)} bytes, metadata shape {shape}")
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    md = dict(meta.get("metadata", {}))
    md["created"] = meta.get("created")
    if expected_kind is not None and md.get("kind") != expected_kind:
        raise CheckpointError(f"{path}: expected a {expected_kind!r} checkpoint, found {md.get('kind')!r}")
    return Checkpoint(arrays=arrays, metadata=md)


# Typed helpers

def _state_arrays(module: torch.nn.Module) -> dict:
    return {k: v for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: dict, path) -> None:
    state = module.state_dict()
    if set(state) != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the model "
                              f"(missing {sorted(set(state) - set(arrays))}, extra {sorted(set(arrays) - set(state))})")
    for k, v in arrays.items():
        if tuple(state[k].shape) != v.shape:
            raise CheckpointError(f"{path}: entry {k!r} has shape {v.shape}, model expects {tuple(state[k].shape)}")
    floats = {v.dtype for v in arrays.values() if v.dtype.kind == "f"}
    if len(floats) == 1:
        # keep the stored precision rather than casting into the module's default
        module.to(torch.from_numpy(np.zeros(0, dtype=floats.pop())).dtype)
    module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})


def save_backbone(path, model, sched, extra: Optional[dict] = None) -> Path:
    md = {"kind": "backbone", "model_config": model.config,
          "schedule": {"T": sched.T, "beta_start": float(sched.beta[0]), "beta_end": float(sched.beta[-1])}}
    md.update(extra or {})
    return save_checkpoint(path, Checkpoint(_state_arrays(model), md))


def load_backbone(path):
    from .diffusion import ToyDenoiser, build_noise_schedule, freeze

    ck = load_checkpoint(path, "backbone")
    cfg = ck.metadata["model_config"]
    model = ToyDenoiser(**cfg)
    _load_state(model, ck.arrays, path)
    s = ck.metadata["schedule"]
    return freeze(model), build_noise_schedule(s["T"], s["beta_start"], s["beta_end"]), ck.metadata


def save_bank(path, bank, *, step: int = 0, lambda_ortho: Optional[float] = None, seed: Optional[int] = None,
              extra: Optional[dict] = None) -> Path:
    md = {"kind": "prompt_bank", "K": bank.K, "tokens": bank.tokens, "embed_dim": bank.embed_dim,
          "training_step": step, "lambda_ortho": lambda_ortho, "seed": seed}
    md.update(extra or {})
    return save_checkpoint(path, Checkpoint({"prompts": bank.prompts}, md))


def load_bank(path):
    from .bank import PromptBank

    ck = load_checkpoint(path, "prompt_bank")
    prompts = ck.arrays.get("prompts")
    if prompts is None:
        raise CheckpointError(f"{path}: no 'prompts' entry")
    md = ck.metadata
    if prompts.shape != (md["K"], md["tokens"], md["embed_dim"]):
        raise CheckpointError(f"{path}: prompts shape {prompts.shape} disagrees with metadata "
                              f"({md['K']}, {md['tokens']}, {md['embed_dim']})")
    return PromptBank(torch.from_numpy(np.array(prompts))), md


def save_adapter(path, adapter, model, *, step: int = 0, seed: Optional[int] = None,
                 content_encoder_seed: int = 0, extra: Optional[dict] = None) -> Path:
    md = {"kind": "control_adapter", "model_config": model.config, "training_step": step, "seed": seed,
          "content_encoder_seed": content_encoder_seed, "final_loss": adapter.final_loss}
    md.update(extra or {})
    return save_checkpoint(path, Checkpoint(_state_arrays(adapter), md))


def load_adapter(path, model):
    from .control import init_control_adapter

    ck = load_checkpoint(path, "control_adapter")
    if ck.metadata.get("model_config") != getattr(model, "config", None):
        raise CheckpointError(f"{path}: adapter was built for backbone {ck.metadata.get('model_config')}, "
                              f"got {getattr(model, 'config', None)}")
    adapter = init_control_adapter(model)
    _load_state(adapter, ck.arrays, path)
    adapter.final_loss = ck.metadata.get("final_loss")
    adapter.eval()
    return adapter, ck.metadata
