"""Network checkpoints: a key=value manifest plus one tensor file per parameter.

Manifest keys::

    config.<field>=<value>          network configuration
    step=<int>                      optimizer steps taken
    param.<name>=<file>|<shape>|f64 parameter tensor, shape as ``AxBxC``
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import ensure_dir, read_kv, read_tensor, write_kv, write_tensor
from .errors import ConfigMismatch, SpecInvalid
from .network import NetworkConfig, NetworkState, init_state

MANIFEST = "checkpoint.manifest"


def save_checkpoint(out_dir, state: NetworkState, cfg: NetworkConfig):
    out_dir = ensure_dir(out_dir)
    items = {f"config.{k}": v for k, v in cfg.to_dict().items()}
    items["step"] = state.step
    for name, p in state.params.items():
        fname = f"{name}.dgmm"
        write_tensor(out_dir / fname, p)
        shape = "x".join(str(d) for d in p.shape)
        items[f"param.{name}"] = f"{fname}|{shape}|f64"
    path = out_dir / MANIFEST
    write_kv(path, items)
    return path


def load_checkpoint(path):
    """Returns ``(state, cfg)``. ``path`` is the checkpoint directory or its manifest."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    items = read_kv(path)
    cfg = NetworkConfig.from_dict({k[7:]: v for k, v in items.items() if k.startswith("config.")})
    expected = init_state(cfg, 0).params
    params = {}
    for key, value in items.items():
        if not key.startswith("param."):
            continue
        name = key[6:]
        fname, shape, dtype = value.split("|")
        if dtype != "f64":
            raise SpecInvalid(f"parameter {name} has dtype {dtype}, expected f64")
        arr = read_tensor(path.parent / fname)
        want = tuple(int(d) for d in shape.split("x")) if shape else ()
        if arr.shape != want:
            raise SpecInvalid(f"parameter {name} stored as {arr.shape}, manifest says {want}")
        params[name] = arr
    if set(params) != set(expected):
        raise ConfigMismatch("checkpoint parameters do not match its configuration")
    for name, arr in params.items():
        if arr.shape != expected[name].shape:
            raise ConfigMismatch(f"parameter {name} has shape {arr.shape}, config implies {expected[name].shape}")
    state = NetworkState(params, step=int(items.get("step", 0)))
    return state, cfg
