"""Named parameter registry with explicit sharing links.

Shared weights (e.g. the cross-modal attention reusing the self-attention
projections) are expressed as aliases: one storage slot, any number of
names resolving to it. Counting, checkpointing, and optimizer state all
operate on canonical slots only, so sharing is structural rather than a
copy that could drift.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor


class ParamStore:
    def __init__(self):
        self._slots: dict[str, Tensor] = {}
        self._aliases: dict[str, str] = {}

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._slots or name in self._aliases:
            raise ConfigError(f"parameter {name!r} already defined")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._slots[name] = t
        return t

    def alias(self, name: str, target: str) -> None:
        """Register ``name`` as another handle for an existing parameter.

        Targets must already resolve, so alias chains cannot form cycles.
        """
        if name in self._slots or name in self._aliases:
            raise ConfigError(f"parameter {name!r} already defined")
        self.canonical(target)
        self._aliases[name] = target

    def canonical(self, name: str) -> str:
        seen = set()
        while name in self._aliases:
            if name in seen:
                raise ContractError(f"alias cycle at {name!r}")
            seen.add(name)
            name = self._aliases[name]
        if name not in self._slots:
            raise KeyError(f"unknown parameter {name!r}")
        return name

    def __getitem__(self, name: str) -> Tensor:
        return self._slots[self.canonical(name)]

    def __contains__(self, name: str) -> bool:
        try:
            self.canonical(name)
            return True
        except KeyError:
            return False

    def names(self) -> list[str]:
        """Canonical slot names, sorted."""
        return sorted(self._slots)

    def alias_table(self) -> dict[str, str]:
        return dict(self._aliases)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._slots[n]) for n in self.names()]

    def count(self) -> int:
        """Total scalar parameters; aliases add nothing."""
        return sum(t.size for _, t in self.items())

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, t in self.items():
            t.data[...] = snap[n]
