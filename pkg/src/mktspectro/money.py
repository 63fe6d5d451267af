"""Exact currency arithmetic on integer micro-units.

All prices and cash amounts are carried as integers in units of 1e-6
currency (micros).  Fee rates are integers scaled by 1e7, which is fine
enough to represent every rate in the fee schedule exactly (0.01475% =
1475e-7).  Nothing in the accounting path touches floats, so totals are
independent of summation order.
"""
from __future__ import annotations

from decimal import Decimal, InvalidOperation

MICROS = 10**6          # micro-units per currency unit
CENT_MICROS = 10**4     # micro-units per 0.01 currency unit
RATE_SCALE = 10**7      # fee rates stored as integer multiples of 1e-7

# Guards the int64 fee path: notional_micros * rate_e7 must not overflow.
MAX_NOTIONAL_MICROS = 10**14


def parse_amount_micros(text: str) -> int:
    """Parse a decimal currency string into integer micros."""
    try:
        value = Decimal(text)
    except InvalidOperation:
        raise ValueError(f"not a decimal number: {text!r}") from None
    scaled = value * MICROS
    if scaled != scaled.to_integral_value():
        raise ValueError(f"finer than 1e-6 currency units: {text!r}")
    return int(scaled)


def parse_rate_e7(value: str | float | Decimal) -> int:
    """Parse a fee rate into integer 1e-7 units (e.g. '0.0001475' -> 1475)."""
    if isinstance(value, float):
        value = Decimal(repr(value))
    elif isinstance(value, str):
        try:
            value = Decimal(value)
        except InvalidOperation:
            raise ValueError(f"not a decimal rate: {value!r}") from None
    scaled = value * RATE_SCALE
    if scaled != scaled.to_integral_value():
        raise ValueError(f"rate has more than 7 decimal places: {value}")
    rate = int(scaled)
    if rate < 0:
        raise ValueError(f"negative rate: {value}")
    return rate


def format_micros(micros: int) -> str:
    """Canonical decimal string for a micro amount.

    Two decimal places when the amount is cent-exact, six otherwise, so
    report files stay byte-stable and human readable.
    """
    sign = "-" if micros < 0 else ""
    units, frac = divmod(abs(micros), MICROS)
    if frac % CENT_MICROS == 0:
        return f"{sign}{units}.{frac // CENT_MICROS:02d}"
    return f"{sign}{units}.{frac:06d}"


def micros_to_float(micros: int) -> float:
    return micros / MICROS


def round_half_up(num: int, den: int) -> int:
    """Round num/den to the nearest integer, halves away from zero."""
    if den <= 0:
        raise ValueError("denominator must be positive")
    if num >= 0:
        return (num + den // 2) // den
    return -((-num + den // 2) // den)


def micros_to_cent_micros(micros: int) -> int:
    """Round a micro amount to the nearest cent, returned in micros."""
    return round_half_up(micros, CENT_MICROS) * CENT_MICROS
