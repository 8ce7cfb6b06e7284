"""Parameter containers and the manifest checkpoint format."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .io import read_tns, write_tns
from .tensor import Parameter

MANIFEST = "manifest.txt"


class Module:
    """Holds Parameters and child Modules as attributes.

    Names come from attribute paths (``dssf.0.r.in_proj_w``); lists and
    dicts of modules are walked with their index or key.
    """

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_dict(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameter_dict()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.size != p.size:
                raise ValueError(f"{name}: size {value.size} != {p.size}")
            p.data = value.reshape(p.shape).astype(p.dtype)


def _walk(value, name):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}.{key}")


def save_checkpoint(module: Module, directory) -> Path:
    """Write one TNS1 file per parameter plus ``manifest.txt``.

    Manifest lines read ``name file shape`` with shape dims joined by ``x``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, p in module.named_parameters():
        fname = f"{name}.tns"
        write_tns(directory / fname, p.data)
        shape = "x".join(str(s) for s in p.shape) or "scalar"
        lines.append(f"{name} {fname} {shape}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    return directory


def read_manifest(directory) -> list[tuple[str, str, tuple]]:
    entries = []
    for line in (Path(directory) / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        name, fname, shape = line.split()
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        entries.append((name, fname, dims))
    return entries


def load_checkpoint(module: Module, directory) -> Module:
    directory = Path(directory)
    state = {}
    for name, fname, dims in read_manifest(directory):
        state[name] = read_tns(os.path.join(directory, fname)).reshape(dims)
    module.load_state_dict(state)
    return module
