"""Named, stage-tagged parameter storage."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from ..errors import ContractError, PlanError
from .tensor import Tensor

TAGS = ("base", "stage1", "stage2", "refiner", "frozen")


@dataclass
class Param:
    tensor: Tensor
    tag: str


def tensor_digest(arr: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class ParameterStore:
    """Ordered map ``dotted.name -> (Tensor, tag)``.

    Tags: ``base`` (backbone weights), ``stage1`` (mapper and text
    cross-attention K/V), ``stage2`` (injection K/V), ``refiner``
    (watermark refiner) and ``frozen`` (never updated by any plan).
    """

    def __init__(self) -> None:
        self._entries: dict[str, Param] = {}

    def add(self, name: str, value, tag: str) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        if tag not in TAGS:
            raise PlanError(f"unknown parameter tag {tag!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = tag != "frozen"
        self._entries[name] = Param(t, tag)
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def tag(self, name: str) -> str:
        return self._entries[name].tag

    def items(self) -> Iterator[tuple[str, Tensor, str]]:
        for name, p in self._entries.items():
            yield name, p.tensor, p.tag

    def names(self, tags: Iterable[str] | None = None) -> list[str]:
        if tags is None:
            return list(self._entries)
        tags = set(tags)
        return [n for n, p in self._entries.items() if p.tag in tags]

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.tensor.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.tensor.data.copy() for n, p in self._entries.items()}

    def digests(self) -> dict[str, str]:
        return {n: tensor_digest(p.tensor.data) for n, p in self._entries.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._entries):
            h.update(name.encode())
            h.update(self._entries[name].tag.encode())
            h.update(tensor_digest(self._entries[name].tensor.data).encode())
        return h.hexdigest()

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        """Replace parameter values by name; shapes must match."""
        missing = [n for n in self._entries if n not in arrays]
        unknown = [n for n in arrays if n not in self._entries]
        if strict and (missing or unknown):
            raise ContractError(f"parameter mismatch: missing={missing[:5]} unknown={unknown[:5]}")
        for name, arr in arrays.items():
            if name not in self._entries:
                continue
            t = self._entries[name].tensor
            if tuple(arr.shape) != t.shape:
                raise ContractError(f"{name}: stored shape {arr.shape} != expected {t.shape}")
            t.data = np.array(arr, dtype=t.dtype)

    def astype(self, dtype) -> None:
        for p in self._entries.values():
            p.tensor.data = p.tensor.data.astype(dtype)
