"""Exception types shared across the package.

The CLI maps these onto process exit codes: UsageError -> 1,
DataError -> 2, NumericError -> 3.
"""


class UsageError(Exception):
    """Bad command-line usage or invalid argument combination."""


class DataError(Exception):
    """Missing or malformed input data (files, shapes, label ranges)."""


class NumericError(Exception):
    """Non-finite values encountered where finite math is required."""


class ShapeError(DataError):
    """Incompatible tensor shapes; message names both shapes."""
