"""Exceptions raised by the branch store.

Every error is an :class:`OSError` carrying the errno that the mounted
filesystem reports for it, so the FUSE layer and the control file can map
failures without a lookup table of their own.

=====================  ===========  ==========================================
exception              errno        meaning
=====================  ===========  ==========================================
StaleBranchError       ESTALE       a sibling already committed / lost the race
FrozenBranchError      EROFS        branch has live children (frozen origin)
BranchExistsError      EEXIST       a live branch already uses the name
InvalidBranchNameError EINVAL       name is empty, reserved, or malformed
UnknownBranchError     ENOENT       no such branch
BranchClosedError      ENOENT       branch already committed or aborted
RootBranchError        EINVAL       operation makes no sense on the root
UnsupportedFileError   EOPNOTSUPP   FIFO, socket or device node in a layer
CrossBranchError       EXDEV        rename between two branch views
=====================  ===========  ==========================================

Plain path errors use the builtin ``FileNotFoundError``,
``NotADirectoryError`` and friends.
"""

from __future__ import annotations

import errno
import os


class BranchError(OSError):
    """Base class for branch-level failures."""

    errno_code = errno.EIO

    def __init__(self, message: str, branch: str | None = None):
        super().__init__(self.errno_code, message)
        self.branch = branch

    def __str__(self) -> str:
        return self.strerror or os.strerror(self.errno_code)


class StaleBranchError(BranchError):
    errno_code = errno.ESTALE


class FrozenBranchError(BranchError):
    errno_code = errno.EROFS


class BranchExistsError(BranchError):
    errno_code = errno.EEXIST


class InvalidBranchNameError(BranchError):
    errno_code = errno.EINVAL


class UnknownBranchError(BranchError):
    errno_code = errno.ENOENT


class BranchClosedError(BranchError):
    errno_code = errno.ENOENT


class RootBranchError(BranchError):
    errno_code = errno.EINVAL


class UnsupportedFileError(BranchError):
    errno_code = errno.EOPNOTSUPP


class CrossBranchError(BranchError):
    errno_code = errno.EXDEV


def path_error(code: int, path: str) -> OSError:
    """Build the builtin OSError subclass matching ``code`` for ``path``."""
    return OSError(code, os.strerror(code), path)
