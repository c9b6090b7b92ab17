"""McNemar's test for paired classifier outcomes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# chi-square critical values, one degree of freedom
CRITICAL_VALUES = {0.05: 3.841, 0.01: 6.635, 0.001: 10.828}


class DegenerateTable(ValueError):
    """Both classifiers agree on every sample, so the statistic is undefined."""


@dataclass(frozen=True)
class ContingencyTable:
    """Paired outcome counts. ``n_01``: A wrong, B right; ``n_10``: A right, B wrong."""

    n_00: int
    n_01: int
    n_10: int
    n_11: int

    def __post_init__(self):
        for name in ("n_00", "n_01", "n_10", "n_11"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")

    @property
    def total(self) -> int:
        return self.n_00 + self.n_01 + self.n_10 + self.n_11

    @classmethod
    def from_predictions(cls, correct_a, correct_b) -> "ContingencyTable":
        a = np.asarray(correct_a, dtype=bool)
        b = np.asarray(correct_b, dtype=bool)
        if a.shape != b.shape:
            raise ValueError(f"outcome vectors differ in shape: {a.shape} vs {b.shape}")
        return cls(int(np.sum(~a & ~b)), int(np.sum(~a & b)), int(np.sum(a & ~b)), int(np.sum(a & b)))


@dataclass(frozen=True)
class McNemarResult:
    chi2: float
    p_value: float

    def __iter__(self):
        # unpacks as (chi2, significant_at_0.001)
        return iter((self.chi2, self.significant(0.001)))

    def significant(self, alpha: float = 0.001) -> bool:
        return self.chi2 > CRITICAL_VALUES[alpha]

    @property
    def level(self) -> str:
        for alpha in sorted(CRITICAL_VALUES):
            if self.significant(alpha):
                return f"p<{alpha:g}"
        return "n.s."

    def to_dict(self) -> dict:
        return {"chi2": self.chi2, "p_value": self.p_value, "level": self.level,
                "significant_at_0.001": self.significant(0.001)}


def mcnemar(table: ContingencyTable) -> McNemarResult:
    """Uncorrected statistic ``(n_01 - n_10)^2 / (n_01 + n_10)``."""
    disc = table.n_01 + table.n_10
    if disc == 0:
        raise DegenerateTable("n_01 + n_10 = 0: no discordant pairs, statistic undefined")
    chi2 = (table.n_01 - table.n_10) ** 2 / disc
    # survival function of chi-square with one degree of freedom
    return McNemarResult(chi2=float(chi2), p_value=math.erfc(math.sqrt(chi2 / 2.0)))
