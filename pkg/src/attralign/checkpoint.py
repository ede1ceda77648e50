"""Checkpoint persistence: parameters, batch-norm buffers, optimizer state.

A checkpoint is a directory of float64 tensor files plus ``manifest.json``
carrying the name->shape map, a config snapshot, the episode-sampler rng
state and the step counter.  Reloading restores training/evaluation
bit-exactly, including optimizer moments.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import read_tensor, write_tensor
from .errors import DataFormatError
from .optim import AdamState

__all__ = ["save_checkpoint", "load_checkpoint"]

FORMAT = "attralign-checkpoint-v1"


def _rng_state_to_json(state):
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, np.integer):
            return int(v)
        if isinstance(v, np.ndarray):
            return {"__ndarray__": v.tolist(), "dtype": str(v.dtype)}
        return v

    return conv(state)


def _rng_state_from_json(state):
    def conv(v):
        if isinstance(v, dict):
            if "__ndarray__" in v:
                return np.array(v["__ndarray__"], dtype=v["dtype"])
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(state)


def save_checkpoint(
    path,
    params: dict,
    buffers: dict[str, np.ndarray],
    config: dict,
    step: int = 0,
    adam: AdamState | None = None,
    rng: np.random.Generator | None = None,
):
    """Write parameters (+ buffers, optimizer moments, rng state) to ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = {}
    for name, tensor in params.items():
        fname = f"param__{name.replace('/', '_')}.agt"
        write_tensor(path / fname, tensor.data, dtype="f8")
        names[name] = {"file": fname, "shape": list(tensor.data.shape)}
    buffer_names = {}
    for name, arr in buffers.items():
        fname = f"buffer__{name.replace('/', '_')}.agt"
        write_tensor(path / fname, arr, dtype="f8")
        buffer_names[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {
        "format": FORMAT,
        "step": int(step),
        "params": names,
        "buffers": buffer_names,
        "config": config,
        "rng_state": _rng_state_to_json(rng.bit_generator.state) if rng else None,
        "adam": None,
    }
    if adam is not None:
        adam_names = {}
        for name in adam.m:
            mf = f"adam_m__{name.replace('/', '_')}.agt"
            vf = f"adam_v__{name.replace('/', '_')}.agt"
            write_tensor(path / mf, adam.m[name], dtype="f8")
            write_tensor(path / vf, adam.v[name], dtype="f8")
            adam_names[name] = {"m": mf, "v": vf}
        manifest["adam"] = {
            "step": adam.step,
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
            "moments": adam_names,
        }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))


class Checkpoint:
    """Loaded checkpoint contents."""

    def __init__(self, path, manifest, params, buffers, adam_manifest):
        self.path = Path(path)
        self.manifest = manifest
        self.param_arrays = params
        self.buffer_arrays = buffers
        self._adam_manifest = adam_manifest

    @property
    def step(self) -> int:
        return self.manifest["step"]

    @property
    def config(self) -> dict:
        return self.manifest["config"]

    def restore_params(self, params: dict):
        """Copy stored values into live parameter tensors, validating shapes."""
        stored = set(self.param_arrays)
        live = set(params)
        if stored != live:
            missing = sorted(live - stored)
            extra = sorted(stored - live)
            raise DataFormatError(
                f"checkpoint does not match model: missing {missing}, extra {extra}"
            )
        for name, tensor in params.items():
            arr = self.param_arrays[name]
            if arr.shape != tensor.data.shape:
                raise DataFormatError(
                    f"checkpoint parameter {name!r} has shape {arr.shape}, "
                    f"model expects {tensor.data.shape}"
                )
            tensor.data = arr.copy()

    def restore_buffers(self, buffers: dict[str, np.ndarray]):
        for name, arr in buffers.items():
            if name not in self.buffer_arrays:
                raise DataFormatError(f"checkpoint missing buffer {name!r}")
            stored = self.buffer_arrays[name]
            if stored.shape != arr.shape:
                raise DataFormatError(
                    f"checkpoint buffer {name!r} has shape {stored.shape}, "
                    f"model expects {arr.shape}"
                )
            arr[...] = stored

    def restore_adam(self, adam: AdamState):
        info = self._adam_manifest
        if info is None:
            raise DataFormatError("checkpoint holds no optimizer state")
        adam.step = info["step"]
        adam.lr = info["lr"]
        adam.beta1 = info["beta1"]
        adam.beta2 = info["beta2"]
        adam.eps = info["eps"]
        for name, files in info["moments"].items():
            adam.m[name] = read_tensor(self.path / files["m"])
            adam.v[name] = read_tensor(self.path / files["v"])

    def restore_rng(self) -> np.random.Generator | None:
        state = self.manifest.get("rng_state")
        if state is None:
            return None
        rng = np.random.default_rng(0)
        rng.bit_generator.state = _rng_state_from_json(state)
        return rng


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise DataFormatError(f"{path}: no checkpoint manifest found")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise DataFormatError(
            f"{path}: unrecognized checkpoint format {manifest.get('format')!r}"
        )
    params = {
        name: read_tensor(path / info["file"])
        for name, info in manifest["params"].items()
    }
    buffers = {
        name: read_tensor(path / info["file"])
        for name, info in manifest["buffers"].items()
    }
    return Checkpoint(path, manifest, params, buffers, manifest.get("adam"))
