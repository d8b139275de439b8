"""Versioned text checkpoints of a TrainState.

Floats are written with ``float.hex`` so a reload is bit-exact.  Layout::

    collapse-lab-state 1
    step <int>
    seed <int>
    gamma <hex>
    A <rows> <cols>
    <one line of hex floats per row>
    U ... / W ... / W_init ...
    end
"""

from pathlib import Path

import numpy as np

from .model import LinearHead, ParticleCloud
from .training import TrainState

__all__ = ["CheckpointError", "save_state", "load_state", "dumps_state", "loads_state", "FORMAT_VERSION"]

MAGIC = "collapse-lab-state"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _matrix(name: str, M: np.ndarray) -> list:
    lines = [f"{name} {M.shape[0]} {M.shape[1]}"]
    lines += [" ".join(float(v).hex() for v in row) for row in M]
    return lines


def dumps_state(state: TrainState) -> str:
    lines = [f"{MAGIC} {FORMAT_VERSION}", f"step {state.step}", f"seed {state.seed}",
             f"gamma {float(state.head.gamma).hex()}"]
    for name, M in (("A", state.cloud.A), ("U", state.cloud.U), ("W", state.head.W), ("W_init", state.W_init)):
        lines += _matrix(name, M)
    lines.append("end")
    return "\n".join(lines) + "\n"


def loads_state(text: str) -> TrainState:
    lines = text.splitlines()
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise CheckpointError("truncated checkpoint")
        pos += 1
        return lines[pos - 1].split()

    head = take()
    if len(head) != 2 or head[0] != MAGIC:
        raise CheckpointError("not a collapse-lab checkpoint")
    if head[1] != str(FORMAT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {head[1]}")
    fields = {}
    try:
        for key in ("step", "seed", "gamma"):
            tok = take()
            if tok[0] != key:
                raise CheckpointError(f"expected {key!r}, found {tok[0]!r}")
            fields[key] = float.fromhex(tok[1]) if key == "gamma" else int(tok[1])
        mats = {}
        for key in ("A", "U", "W", "W_init"):
            tok = take()
            if tok[0] != key:
                raise CheckpointError(f"expected matrix {key!r}, found {tok[0]!r}")
            r, c = int(tok[1]), int(tok[2])
            rows = [[float.fromhex(v) for v in take()] for _ in range(r)]
            M = np.array(rows, dtype=float).reshape(r, c)
            mats[key] = M
        if take() != ["end"]:
            raise CheckpointError("missing end marker")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint near line {pos}: {exc}") from None
    cloud = ParticleCloud(mats["A"], mats["U"])
    return TrainState(cloud, LinearHead(mats["W"], fields["gamma"]), fields["step"], fields["seed"], mats["W_init"])


def save_state(state: TrainState, path) -> None:
    Path(path).write_text(dumps_state(state))


def load_state(path) -> TrainState:
    return loads_state(Path(path).read_text())
