"""Operator valuations and the truthful bid response.

Valuations follow the scaled square-root family a*sqrt(x): strictly
increasing, strictly concave, zero at zero.  The coefficient is private to
the operator; the market only ever sees the bid it induces.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .network import InputMismatchError, PoolSystem, PoolView

__all__ = [
    "UtilitySpec",
    "UtilityTable",
    "utility",
    "marginal_utility",
    "best_response_bid",
    "best_response_bids",
]


@dataclass(frozen=True)
class UtilitySpec:
    """One operator's valuation scale within one pool."""

    coefficient: float

    def __post_init__(self) -> None:
        if not self.coefficient > 0:
            raise ValueError(f"valuation coefficient must be positive, got {self.coefficient}")


def utility(spec: UtilitySpec, freq: float) -> float:
    """Value of running freq trains, a*sqrt(freq)."""
    if freq < 0:
        raise ValueError(f"frequency must be nonnegative, got {freq}")
    return spec.coefficient * math.sqrt(freq)


def marginal_utility(spec: UtilitySpec, freq: float) -> float:
    """Derivative of the valuation; diverges at zero frequency."""
    if freq <= 0:
        raise ValueError(f"marginal utility needs a positive frequency, got {freq}")
    return spec.coefficient / (2.0 * math.sqrt(freq))


def best_response_bid(spec: UtilitySpec, price: float) -> float:
    """Payment that maximizes an operator's surplus at a given path price.

    Maximizing value(bid / price) - bid over the bid gives a unique optimum
    for this family; the implied frequency then satisfies marginal value =
    price exactly.
    """
    if not price > 0:
        raise ValueError(f"path price must be positive, got {price}")
    return spec.coefficient ** 2 / (4.0 * price)


def best_response_bids(coefficients: np.ndarray, prices: np.ndarray) -> np.ndarray:
    """Vectorized best_response_bid; caller guarantees positive prices."""
    return coefficients ** 2 / (4.0 * prices)


class UtilityTable:
    """Valuation specs keyed exactly by the (operator, pool) pairs of a pool system."""

    def __init__(self, entries: Mapping[tuple[str, str], UtilitySpec]) -> None:
        self.entries = dict(entries)

    def spec(self, lop: str, pool_id: str) -> UtilitySpec:
        try:
            return self.entries[(lop, pool_id)]
        except KeyError:
            raise InputMismatchError(f"no valuation for operator {lop!r} in pool {pool_id!r}") from None

    def validate_against(self, pools: PoolSystem) -> None:
        missing = set(pools.lines) - set(self.entries)
        extra = set(self.entries) - set(pools.lines)
        if missing or extra:
            raise InputMismatchError(
                f"valuation table mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )

    def coefficients_for(self, view: PoolView) -> np.ndarray:
        """Coefficient vector aligned with a compiled pool view."""
        return np.array([self.spec(lop, view.pool_id).coefficient for lop in view.lop_ids])

    def to_json(self) -> dict:
        return {
            "utilities": [
                {"lop": lop, "pool": k, "a": spec.coefficient}
                for (lop, k), spec in sorted(self.entries.items())
            ]
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "UtilityTable":
        try:
            entries = {
                (str(row["lop"]), str(row["pool"])): UtilitySpec(float(row["a"]))
                for row in doc["utilities"]
            }
        except (KeyError, TypeError) as err:
            raise ValueError(f"malformed valuation document: missing or bad field {err}") from None
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> "UtilityTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def __len__(self) -> int:
        return len(self.entries)
