"""Exception types carrying the stable ``E_*`` error codes.

The CLI maps the class of an exception to its process exit code, so
new error sites should raise the most specific subclass available.
"""

from __future__ import annotations


class LabError(Exception):
    """Precondition or configuration failure (exit code 2)."""

    exit_code = 2

    def __init__(self, code: str, message: str = ""):
        self.code = code
        self.message = message
        super().__init__(f"{code}: {message}" if message else code)


class NumericError(LabError):
    """Non-finite loss/gradient or an invalid numeric domain (exit code 3)."""

    exit_code = 3


class StorageError(LabError):
    """Unreadable, unwritable or malformed file (exit code 4)."""

    exit_code = 4
