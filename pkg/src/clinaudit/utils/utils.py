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

import sys
import os
import json
import hashlib
import numpy as np
from typing import Any, List, MutableSequence, TypeVar
from colorama import Fore, Style
from ..errors import AuditIOError, ValidationError

T = TypeVar('T')

SEVERITY = {
    0: '',
    1: Fore.WHITE + "Remark" + Fore.RESET,
    2: Fore.YELLOW + "Warning" + Fore.RESET,
    3: Fore.RED + "Error" + Fore.RESET,
    4: Style.BRIGHT + Fore.RED + "Fatal" + Style.RESET_ALL
}

_verbose = False


def set_verbose(value: bool):
    global _verbose
    _verbose = bool(value)


def audit_log(*args, source: str = "clinaudit", severity: int = 0):
    """
    Print a tagged diagnostic line to stderr. Remarks (severity < 2)
    are dropped unless verbose mode is on.

    @param args: Message fragments, joined without separators.
    @param source: Tag identifying the emitting component.
    @param severity: Key into SEVERITY.
    @return: None
    """
    if severity < 2 and not _verbose:
        return

    source = f"[{source}]"
    prefix = f"{SEVERITY[severity]}: " if severity else ''
    print(f"{source:.<15}", prefix, *args, sep='', file=sys.stderr)


_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        """
        Counter-based 64-bit generator. Every stream is a pure function of
        its seed, so shuffles and synthetic data reproduce across platforms.

        @param seed: Any integer; reduced modulo 2**64.
        """
        self.seed = seed & _MASK
        self.state = self.seed

    def fork(self, key: int) -> SplitMix64:
        """
        Derive an independent stream. The result depends only on this
        generator's seed and the key, not on how much has been consumed.

        @param key: Stream discriminator.
        @return: New generator.
        """
        return SplitMix64(_mix64((self.seed + (key + 1) * _GOLDEN) & _MASK))

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        return _mix64(self.state)

    def uniform(self) -> float:
        """
        @return: Float in [0, 1) with 53 random bits.
        """
        return (self.next_u64() >> 11) * 2.0 ** -53

    def randint(self, low: int, high: int) -> int:
        """
        Unbiased integer in the closed range [low, high].

        @param low: Smallest value.
        @param high: Largest value.
        @return: Integer.
        """
        span = high - low + 1
        limit = ((1 << 64) // span) * span

        while True:
            value = self.next_u64()
            if value < limit:
                return low + value % span

    def shuffle(self, items: MutableSequence[T]) -> MutableSequence[T]:
        """
        In-place Fisher-Yates shuffle.

        @param items: Sequence to permute.
        @return: The same sequence, for chaining.
        """
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]

        return items

    def uniform_block(self, n: int) -> np.ndarray:
        """
        The next n uniforms as a float64 array; identical to n calls of uniform().

        @param n: Count.
        @return: Array of shape (n,).
        """
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
        states = steps + np.uint64(self.state)
        self.state = (self.state + n * _GOLDEN) & _MASK
        return (_mix64_array(states) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal_block(self, n: int) -> np.ndarray:
        """
        Standard normal samples via the Box-Muller transform.

        @param n: Count.
        @return: Array of shape (n,).
        """
        pairs = (n + 1) // 2
        u1 = self.uniform_block(pairs)
        u2 = self.uniform_block(pairs)
        radius = np.sqrt(-2.0 * np.log1p(-u1))
        angle = 2.0 * np.pi * u2
        return np.concatenate((radius * np.cos(angle), radius * np.sin(angle)))[:n]


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), ensure_ascii=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def fingerprint(obj: Any, length: int = 12) -> str:
    """
    Short content hash of a JSON-serialisable object.

    @param obj: Object to hash through its canonical JSON form.
    @param length: Hex characters to keep.
    @return: Hex digest prefix.
    """
    return sha256_hex(canonical_json(obj).encode("utf-8"))[:length]


def format_percent(value: float, decimals: int = 1, signed: bool = False) -> str:
    """
    Render a fraction as a percentage number without the percent sign.
    Negative zero is normalised so rounding never prints "-0.0".

    @param value: Fraction, e.g. 0.893.
    @param decimals: Digits after the point.
    @param signed: Always print a sign.
    @return: E.g. "89.3" or "-16.6".
    """
    scaled = round(value * 100.0, decimals) + 0.0
    if signed:
        return f"{scaled:+.{decimals}f}"
    return f"{scaled:.{decimals}f}"


def ensure_directory(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise AuditIOError(f"Unable to create directory '{path}': {e}") from e
    return path


def write_text(path: str, text: str) -> str:
    """
    Write UTF-8 text with '\\n' line endings.

    @param path: Destination file.
    @param text: Contents.
    @return: The path written.
    """
    try:
        with open(path, 'w', encoding="utf-8", newline='\n') as file:
            file.write(text)
    except OSError as e:
        raise AuditIOError(f"Unable to write '{path}': {e}") from e
    return path


def read_text(path: str) -> str:
    try:
        with open(path, 'r', encoding="utf-8") as file:
            return file.read()
    except OSError as e:
        raise AuditIOError(f"Unable to read '{path}': {e}") from e


def read_json(path: str) -> Any:
    text = read_text(path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"'{path}' is not valid JSON: {e}") from e


def write_json(path: str, obj: Any) -> str:
    return write_text(path, json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + '\n')


def chunks(items: List[T], size: int) -> List[List[T]]:
    return [items[i:i + size] for i in range(0, len(items), size)]
