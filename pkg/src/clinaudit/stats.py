#    clinaudit - A safety audit toolkit for clinical classifiers and language models
#    Copyright (C) 2026  The clinaudit authors

#    This program is free software: you can redistribute it and/or modify
#    it under the terms of the GNU General Public License as published by
#    the Free Software Foundation, either version 3 of the License, or
#    (at your option) any later version.

#    This program is distributed in the hope that it will be useful,
#    but WITHOUT ANY WARRANTY; without even the implied warranty of
#    MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
#    GNU General Public License for more details.

#    You should have received a copy of the GNU General Public License
#    along with this program.  If not, see <https://www.gnu.org/licenses/>.

from __future__ import annotations

import numpy as np
from dataclasses import dataclass, asdict
from fractions import Fraction
from typing import Tuple, Union
from scipy.stats import norm
from .constants import CONFIDENCE, Z_95, CI_METHODS
from .errors import ValidationError


@dataclass(frozen=True)
class ProportionCI:
    point: float
    lower: float
    upper: float
    method: str
    confidence: float
    n: int
    successes: int

    def to_dict(self) -> dict:
        return asdict(self)


def z_for_confidence(confidence: float) -> float:
    """
    Two-sided standard normal quantile.

    @param confidence: Coverage in (0, 1).
    @return: 1.959964 at 0.95, otherwise norm.ppf(1 - alpha / 2).
    """
    if not 0 < confidence < 1:
        raise ValidationError(f"confidence must lie in (0, 1), got {confidence}")
    if confidence == CONFIDENCE:
        return Z_95
    return float(norm.ppf(1.0 - (1.0 - confidence) / 2.0))


def _check_counts(successes: int, n: int):
    if n < 1:
        raise ValidationError(f"Interval needs n >= 1, got {n}")
    if not 0 <= successes <= n:
        raise ValidationError(f"successes must lie in [0, {n}], got {successes}")


def wilson_bounds(successes: Union[int, np.ndarray], n: int, z: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised Wilson score bounds, exact at the 0 and n boundaries.

    @param successes: Count or array of counts.
    @param n: Trials.
    @param z: Normal quantile.
    @return: (lower, upper) arrays.
    """
    s = np.asarray(successes, dtype=np.float64)
    p = s / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2.0 * n)) / denom
    half = (z / denom) * np.sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n))
    lower = np.where(s == 0, 0.0, np.clip(center - half, 0.0, 1.0))
    upper = np.where(s == n, 1.0, np.clip(center + half, 0.0, 1.0))
    return lower, upper


def wilson_interval(successes: int, n: int, confidence: float = CONFIDENCE) -> ProportionCI:
    _check_counts(successes, n)
    lower, upper = wilson_bounds(successes, n, z_for_confidence(confidence))
    return ProportionCI(accuracy(successes, n), float(lower), float(upper), "wilson", confidence, n, successes)


def wald_interval(successes: int, n: int, confidence: float = CONFIDENCE) -> ProportionCI:
    """
    Normal-approximation interval p +/- z * sqrt(p (1 - p) / n), clipped
    to [0, 1]. Degenerate at p = 0 and p = 1.

    @param successes: Correct count.
    @param n: Trials.
    @param confidence: Coverage.
    @return: ProportionCI.
    """
    _check_counts(successes, n)
    z = z_for_confidence(confidence)
    p = accuracy(successes, n)
    half = z * np.sqrt(p * (1.0 - p) / n)
    return ProportionCI(p, float(max(0.0, p - half)), float(min(1.0, p + half)), "wald", confidence, n, successes)


def proportion_interval(successes: int, n: int, method: str = "wilson", confidence: float = CONFIDENCE) -> ProportionCI:
    if method not in CI_METHODS:
        raise ValidationError(f"Unknown interval method '{method}'; expected one of {CI_METHODS}")
    if method == "wald":
        return wald_interval(successes, n, confidence)
    return wilson_interval(successes, n, confidence)


def accuracy(correct: int, total: int) -> float:
    """
    @param correct: Correct count.
    @param total: Count of attempts, at least 1.
    @return: correct / total, computed as an exact fraction before conversion.
    """
    if total < 1:
        raise ValidationError(f"accuracy needs total >= 1, got {total}")
    if not 0 <= correct <= total:
        raise ValidationError(f"correct must lie in [0, {total}], got {correct}")
    return float(Fraction(correct, total))
