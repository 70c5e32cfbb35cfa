"""Copy-on-write branch contexts over an ordinary directory tree."""

from .errors import BranchError, FrozenBranchError, StaleBranchError
from .store import ROOT, BranchMeta, BranchState, BranchStore, CommitReport, Resolution

__all__ = [
    "ROOT",
    "BranchError",
    "BranchMeta",
    "BranchState",
    "BranchStore",
    "CommitReport",
    "FrozenBranchError",
    "Resolution",
    "StaleBranchError",
]

__version__ = "0.1.0"
