"""Reference implementations kept deliberately naive and independent of tbbtrace."""

TICKS = 10_000_000


def is_leap(year: int) -> bool:
    return year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)


def days_before_year(year: int) -> int:
    return sum(366 if is_leap(y) else 365 for y in range(1601, year))


def leaps_through(year: int) -> int:
    """Leap years in 1..year, by the Gregorian rule."""
    return year // 4 - year // 100 + year // 400


def days_before_year_fast(year: int) -> int:
    return 365 * (year - 1601) + leaps_through(year - 1) - leaps_through(1600)


def days_before_month(year: int, month: int) -> int:
    lengths = [31, 29 if is_leap(year) else 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31]
    return sum(lengths[: month - 1])


def filetime_of(year, month, day, hour=0, minute=0, second=0, ticks=0) -> int:
    days = days_before_year_fast(year) + days_before_month(year, month) + day - 1
    return ((days * 24 + hour) * 60 + minute) * 60 * TICKS + second * TICKS + ticks
