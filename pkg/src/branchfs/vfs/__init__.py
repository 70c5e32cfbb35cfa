"""Mounted presentation of a branch store over the FUSE kernel protocol."""

from .control import CONTROL_NAME, DEFAULT_BRANCH_XATTR, ControlCommand
from .fs import (
    FS_IOC_BRANCH_ABORT,
    FS_IOC_BRANCH_COMMIT,
    FS_IOC_BRANCH_CREATE,
    FS_IOC_BRANCH_CREATE_NAMED,
    BranchFS,
    MountConfig,
    default_store_dir,
)

__all__ = [
    "CONTROL_NAME",
    "DEFAULT_BRANCH_XATTR",
    "FS_IOC_BRANCH_ABORT",
    "FS_IOC_BRANCH_COMMIT",
    "FS_IOC_BRANCH_CREATE",
    "FS_IOC_BRANCH_CREATE_NAMED",
    "BranchFS",
    "ControlCommand",
    "MountConfig",
    "default_store_dir",
]
