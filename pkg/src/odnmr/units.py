"""Parsing of unit-suffixed configuration values such as ``"10 mT"``.

Values come back as plain floats in SI base units (Hz for frequencies,
Hz/s for sweep rates, nm for hyperfine geometry distances).
"""

from __future__ import annotations

from functools import lru_cache

import pint

# target unit per physical kind
KINDS = {
    "field": "tesla",
    "frequency": "hertz",
    "rate": "hertz / second",
    "time": "second",
    "length_nm": "nanometer",
    "angle": "radian",
    "density_nm3": "nanometer ** -3",
    "density_m3": "meter ** -3",
    "volume": "meter ** 3",
    "temperature": "kelvin",
    "gyromagnetic": "hertz / tesla",
    "fraction": "dimensionless",
}


class UnitError(ValueError):
    pass


@lru_cache(maxsize=1)
def registry() -> pint.UnitRegistry:
    return pint.UnitRegistry(autoconvert_offset_to_baseunit=True)


def parse_quantity(text, kind: str) -> float:
    """Convert ``text`` (e.g. ``"9 MHz/ms"``) to a float in the unit of ``kind``.

    Bare numbers are accepted only for the ``fraction`` kind.
    """
    if kind not in KINDS:
        raise KeyError(f"unknown quantity kind {kind!r}")
    if not isinstance(text, str):
        if kind == "fraction" and isinstance(text, (int, float)) and not isinstance(text, bool):
            return float(text)
        raise UnitError(f"expected a string with a unit suffix, got {text!r}")
    ureg = registry()
    try:
        q = ureg.Quantity(text.strip())
    except Exception as exc:  # pint raises several unrelated types
        raise UnitError(f"cannot parse {text!r}: {exc}") from None
    if kind != "fraction" and q.unitless:
        raise UnitError(f"{text!r} has no unit; expected {KINDS[kind]}")
    try:
        value = q.to(KINDS[kind]).magnitude
    except pint.DimensionalityError:
        raise UnitError(f"{text!r} is not a {kind} (expected units of {KINDS[kind]})") from None
    return float(value)


def format_quantity(value: float, unit: str) -> str:
    return f"{value!r} {unit}"
