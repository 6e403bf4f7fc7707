"""CRRA utilities: logarithmic and power ``v**p / p`` with ``0 < p < 1``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["UtilitySpec"]


@dataclass(frozen=True)
class UtilitySpec:
    kind: str = "log"
    p: float | None = None

    def __post_init__(self):
        if self.kind not in ("log", "power"):
            raise ValueError(f"utility kind must be 'log' or 'power', got {self.kind!r}")
        if self.kind == "power":
            if self.p is None or not 0.0 < self.p < 1.0:
                raise ValueError(f"power utility needs an exponent in (0, 1), got {self.p}")
        elif self.p is not None:
            raise ValueError("log utility takes no exponent")

    @classmethod
    def parse(cls, text: str) -> "UtilitySpec":
        """Parse ``"log"`` or ``"power:<p>"``."""
        text = text.strip()
        if text == "log":
            return cls("log")
        kind, _, p = text.partition(":")
        if kind == "power" and p:
            return cls("power", float(p))
        raise ValueError(f"cannot parse utility {text!r}; use 'log' or 'power:<p>'")

    def __str__(self) -> str:
        return "log" if self.kind == "log" else f"power:{self.p!r}"

    @property
    def is_log(self) -> bool:
        return self.kind == "log"

    @property
    def asymptotic_elasticity(self) -> float:
        return 0.0 if self.is_log else float(self.p)

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.is_log:
                out = np.where(v > 0, np.log(np.where(v > 0, v, 1.0)), -np.inf)
            else:
                out = np.where(v >= 0, np.maximum(v, 0.0) ** self.p / self.p, -np.inf)
        return out if out.ndim else float(out)

    def derivative(self, v):
        v = np.asarray(v, dtype=float)
        return 1.0 / v if self.is_log else v ** (self.p - 1.0)
