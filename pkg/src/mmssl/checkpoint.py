"""Checkpoint archive: one npz file holding every parameter plus run state.

Arrays are keyed by hierarchical names ("student/encoder.blocks.0...",
"teacher/...", "optim/<param>/exp_avg", "center", "torch_rng"), each entry
self-describing (dtype + shape in the npz header) with a little-endian
payload. Run metadata (step, config echo, numpy rng state, optimizer
hyperparameters) travels as a JSON blob under "meta".
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .model import ModelState

_META_KEY = "meta"


def _le(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.byteorder == ">":
        return arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def _optimizer_param_names(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> list[str]:
    """Names of the optimizer's params in state_dict index order.

    state_dict indexes params by flat enumeration over param_groups, which
    need not match named_parameters order once groups exist.
    """
    by_id = {id(p): name for name, p in model.named_parameters()}
    names = []
    for group in optimizer.param_groups:
        for p in group["params"]:
            if id(p) not in by_id:
                raise ValueError("optimizer holds a parameter not found in the student")
            names.append(by_id[id(p)])
    return names


def save_checkpoint(
    path: str | Path,
    state: ModelState,
    optimizer: torch.optim.Optimizer | None = None,
    *,
    step: int = 0,
    np_rng: np.random.Generator | None = None,
    config: dict | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for prefix, model in (("student", state.student), ("teacher", state.teacher)):
        for name, p in model.named_parameters():
            arrays[f"{prefix}/{name}"] = _le(p.detach().numpy())
    arrays["center"] = _le(state.center.numpy())
    arrays["torch_rng"] = torch.get_rng_state().numpy()

    opt_groups = None
    if optimizer is not None:
        names = _optimizer_param_names(state.student, optimizer)
        sd = optimizer.state_dict()
        flat_index = [i for g in sd["param_groups"] for i in g["params"]]
        for pos, idx in enumerate(flat_index):
            entry = sd["state"].get(idx)
            if entry is None:
                continue  # parameter never stepped (e.g. frozen warmup phase)
            pname = names[pos]
            for key, val in entry.items():
                val = val.numpy() if isinstance(val, torch.Tensor) else np.asarray(val)
                arrays[f"optim/{pname}/{key}"] = _le(val)
        opt_groups = [
            {k: v for k, v in g.items() if k != "params"} for g in sd["param_groups"]
        ]

    meta = {
        "step": step,
        "ema_momentum": state.ema_momentum,
        "config": config or {},
        "np_rng": np_rng.bit_generator.state if np_rng is not None else None,
        "opt_groups": opt_groups,
    }
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(
    path: str | Path,
    state: ModelState,
    optimizer: torch.optim.Optimizer | None = None,
) -> dict:
    """Restore parameters/optimizer/rng in place; returns the meta dict.

    The numpy rng is returned inside meta (key "np_rng") rather than set
    globally; rebuild a generator with `restore_np_rng(meta)`.
    """
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(bytes(arrays.pop(_META_KEY)).decode("utf-8"))

    with torch.no_grad():
        for prefix, model in (("student", state.student), ("teacher", state.teacher)):
            named = dict(model.named_parameters())
            for name, p in named.items():
                key = f"{prefix}/{name}"
                if key not in arrays:
                    raise KeyError(f"checkpoint missing parameter {key}")
                val = arrays[key]
                if tuple(val.shape) != tuple(p.shape):
                    raise ValueError(f"{key}: shape {val.shape} != parameter {tuple(p.shape)}")
                p.copy_(torch.from_numpy(val))
        state.center = torch.from_numpy(arrays["center"]).clone()
    state.ema_momentum = float(meta["ema_momentum"])
    torch.set_rng_state(torch.from_numpy(arrays["torch_rng"]))

    if optimizer is not None and meta.get("opt_groups") is not None:
        names = _optimizer_param_names(state.student, optimizer)
        sd = optimizer.state_dict()
        flat_index = [i for g in sd["param_groups"] for i in g["params"]]
        new_state = {}
        for pos, idx in enumerate(flat_index):
            entry = {}
            prefix = f"optim/{names[pos]}/"
            for key in list(arrays):
                if key.startswith(prefix):
                    val = arrays[key]
                    field = key[len(prefix) :]
                    entry[field] = (
                        torch.from_numpy(val).clone() if val.ndim else torch.tensor(val.item())
                    )
            if entry:
                new_state[idx] = entry
        groups = []
        for g, saved in zip(sd["param_groups"], meta["opt_groups"]):
            merged = dict(g)
            merged.update(saved)
            groups.append(merged)
        optimizer.load_state_dict({"state": new_state, "param_groups": groups})
    return meta


def restore_np_rng(meta: dict) -> np.random.Generator:
    if meta.get("np_rng") is None:
        raise ValueError("checkpoint carries no numpy rng state")
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = meta["np_rng"]
    return gen
