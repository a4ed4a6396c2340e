"""Spatial and temporal retrieval keys: geohash cells and meal-time periods."""

from __future__ import annotations

import bisect
import functools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"
_DECODE = {c: i for i, c in enumerate(BASE32)}

DEFAULT_PERIODS = 95
MINUTES_PER_DAY = 1440


class DomainError(ValueError):
    """Input outside the domain of a key function."""


class GeohashFormatError(ValueError):
    pass


class BinnerFitError(ValueError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise DomainError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise DomainError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise DomainError(f"longitude {self.lon} outside [-180, 180]")


def geohash_encode(lat: float, lon: float, precision: int = 6) -> str:
    """Standard geohash of a point; bits alternate longitude/latitude, longitude first."""
    GeoPoint(lat, lon)
    if not 1 <= precision <= 12:
        raise DomainError(f"precision {precision} outside [1, 12]")
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    chars = []
    bit = 0
    value = 0
    even = True
    while len(chars) < precision:
        if even:
            mid = (lon_lo + lon_hi) / 2
            if lon >= mid:
                value = (value << 1) | 1
                lon_lo = mid
            else:
                value <<= 1
                lon_hi = mid
        else:
            mid = (lat_lo + lat_hi) / 2
            if lat >= mid:
                value = (value << 1) | 1
                lat_lo = mid
            else:
                value <<= 1
                lat_hi = mid
        even = not even
        bit += 1
        if bit == 5:
            chars.append(BASE32[value])
            bit = 0
            value = 0
    return "".join(chars)


@functools.lru_cache(maxsize=65536)
def geohash_decode_bbox(code: str) -> tuple[float, float, float, float]:
    """Return (lat_min, lat_max, lon_min, lon_max) of the cell named by `code`."""
    if not 1 <= len(code) <= 12:
        raise GeohashFormatError(f"geohash length {len(code)} outside [1, 12]")
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    even = True
    for c in code:
        try:
            value = _DECODE[c]
        except KeyError:
            raise GeohashFormatError(f"invalid geohash character {c!r} in {code!r}") from None
        for shift in range(4, -1, -1):
            on = (value >> shift) & 1
            if even:
                mid = (lon_lo + lon_hi) / 2
                if on:
                    lon_lo = mid
                else:
                    lon_hi = mid
            else:
                mid = (lat_lo + lat_hi) / 2
                if on:
                    lat_lo = mid
                else:
                    lat_hi = mid
            even = not even
    return lat_lo, lat_hi, lon_lo, lon_hi


def minute_of_day(hh: int, mm: int) -> int:
    if not (0 <= hh <= 23 and 0 <= mm <= 59):
        raise DomainError(f"invalid clock time {hh:02d}:{mm:02d}")
    return hh * 60 + mm


def minute_of_timestamp(ts: float) -> int:
    """Minute of day of a local-time epoch timestamp; seconds are dropped."""
    secs = int(ts) % 86400
    return minute_of_day(secs // 3600, (secs % 3600) // 60)


@dataclass(frozen=True)
class MealTimeBinner:
    """Equal-frequency partition of the day into periods.

    `boundaries[i]` is the first minute of period i + 1; period 0 covers
    everything below the first boundary.
    """

    boundaries: tuple[int, ...]
    period_count: int

    def __post_init__(self):
        if self.period_count < 1:
            raise BinnerFitError("period_count must be >= 1")
        b = self.boundaries
        if any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise BinnerFitError("boundaries must be strictly increasing")
        if len(b) + 1 > self.period_count:
            raise BinnerFitError("more effective bins than period_count")
        if any(not 0 <= x < MINUTES_PER_DAY for x in b):
            raise BinnerFitError("boundary outside [0, 1439]")

    @property
    def n_bins(self) -> int:
        return len(self.boundaries) + 1

    def assign(self, minute: int) -> int:
        return bisect.bisect_right(self.boundaries, minute)

    def save(self, path: str | Path) -> None:
        lines = [f"M={self.period_count}"] + [str(x) for x in self.boundaries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MealTimeBinner":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("M="):
            raise BinnerFitError(f"{path}: missing 'M=' header")
        m = int(lines[0][2:])
        return cls(tuple(int(x) for x in lines[1:] if x.strip()), m)


def equal_frequency_boundaries(values: Sequence[float], n_bins: int) -> list:
    """Cut points at sorted-rank indices floor(i*n/M), i = 1..M-1, duplicates merged.

    A cut equal to the minimum would leave an empty first bin and is dropped.
    """
    if not values:
        raise BinnerFitError("cannot fit bins on empty input")
    if n_bins < 1:
        raise BinnerFitError("number of bins must be >= 1")
    ordered = sorted(values)
    n = len(ordered)
    cuts = []
    for i in range(1, n_bins):
        v = ordered[(i * n) // n_bins]
        if v > ordered[0] and (not cuts or v > cuts[-1]):
            cuts.append(v)
    return cuts


def fit_mealtime_binner(minutes: Iterable[int], M: int = DEFAULT_PERIODS) -> MealTimeBinner:
    minutes = list(minutes)
    for t in minutes:
        if not 0 <= t < MINUTES_PER_DAY:
            raise DomainError(f"minute {t} outside [0, 1439]")
    return MealTimeBinner(tuple(int(x) for x in equal_frequency_boundaries(minutes, M)), M)


def assign_period(binner: MealTimeBinner, minute: int) -> int:
    return binner.assign(minute)
