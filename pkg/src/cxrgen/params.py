"""Named parameter storage, seeded initialization, and checkpoint files."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, DataError
from .tensor import Array, Tensor

CHECKPOINT_FORMAT = "cxrgen-checkpoint-v1"


class ParameterStore:
    """Learnable tensors addressable by stable dotted paths.

    Parameters are created in a deterministic order, so a fixed RNG seed
    reproduces the exact same initialization run to run.
    """

    def __init__(self, rng: Union[np.random.Generator, int, None] = None):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self._rng = rng
        self._params: dict[str, Tensor] = {}

    def _register(self, path: str, data: Array) -> Tensor:
        if path in self._params:
            raise ConfigurationError(f"duplicate parameter path: {path!r}")
        t = Tensor(data, requires_grad=True)
        self._params[path] = t
        return t

    def dense(self, path: str, shape: Sequence[int]) -> Tensor:
        """Fan-in scaled uniform init for dense / attention projections."""
        shape = tuple(int(s) for s in shape)
        bound = 1.0 / np.sqrt(max(1, shape[0]))
        return self._register(path, self._rng.uniform(-bound, bound, size=shape))

    def embedding(self, path: str, shape: Sequence[int]) -> Tensor:
        """N(0, 0.02) init for embedding tables."""
        shape = tuple(int(s) for s in shape)
        return self._register(path, self._rng.normal(0.0, 0.02, size=shape))

    def zeros(self, path: str, shape: Sequence[int]) -> Tensor:
        return self._register(path, np.zeros(tuple(int(s) for s in shape)))

    def ones(self, path: str, shape: Sequence[int]) -> Tensor:
        return self._register(path, np.ones(tuple(int(s) for s in shape)))

    @property
    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._params[path]
        except KeyError:
            raise ConfigurationError(f"unknown parameter path: {path!r}") from None

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def state_dict(self) -> dict[str, Array]:
        """Snapshot of every parameter value (copies, safe to stash)."""
        return {path: t.data.copy() for path, t in self._params.items()}

    def load_state_dict(self, state: Mapping[str, Array]) -> None:
        """Rebind parameter data from ``state``; key sets must match exactly."""
        missing = sorted(set(self._params) - set(state))
        extra = sorted(set(state) - set(self._params))
        if missing or extra:
            raise DataError(f"state dict mismatch; missing={missing} unexpected={extra}")
        for path, t in self._params.items():
            arr = np.asarray(state[path], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise DataError(
                    f"shape mismatch for {path!r}: checkpoint {arr.shape}, model {t.data.shape}")
            t.data = arr


def save_checkpoint(path: Union[str, Path], state: Mapping[str, Array],
                    metadata: Optional[Mapping] = None) -> None:
    """Write parameters (and optional metadata) as a single JSON document."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "metadata": dict(metadata or {}),
        "parameters": {
            p: {"shape": list(np.asarray(a).shape),
                "data": np.asarray(a, dtype=np.float64).reshape(-1).tolist()}
            for p, a in sorted(state.items())
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: Union[str, Path]) -> tuple[dict[str, Array], dict]:
    """Read a checkpoint; returns (parameter arrays, metadata)."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"not a recognized checkpoint file: {path}")
    state: dict[str, Array] = {}
    for p, entry in payload["parameters"].items():
        arr = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise DataError(f"corrupt checkpoint entry for {p!r}")
        state[p] = arr.reshape(shape)
    return state, payload.get("metadata", {})
