"""
File-access recorder used to audit the continual-learning constraint.

While adapting to domain t the process must not read any file belonging to
domains 0..t-1. FileAccessRecorder collects every path opened while it is
active, using the interpreter's "open" audit event, so tests and the CLI can
prove which dataset directories were touched.

Audit hooks cannot be removed once installed, so a single module-level hook
dispatches to whichever recorders are currently active.
"""

import os
import sys
import threading
from pathlib import Path
from typing import List, Optional, Union

_lock = threading.Lock()
_active: List["FileAccessRecorder"] = []
_hook_installed = False


def _audit_hook(event: str, args: tuple) -> None:
    if event != "open" or not _active:
        return
    path = args[0] if args else None
    if isinstance(path, (bytes, bytearray)):
        path = os.fsdecode(path)
    if not isinstance(path, (str, os.PathLike)):
        # integer file descriptors carry no path
        return
    for recorder in list(_active):
        recorder._record(os.fspath(path))


def _install_hook() -> None:
    global _hook_installed
    with _lock:
        if not _hook_installed:
            sys.addaudithook(_audit_hook)
            _hook_installed = True


class FileAccessRecorder:
    """
    Context manager recording the absolute path of every file opened.

    Example:
        with FileAccessRecorder() as recorder:
            adapt(...)
        assert not recorder.opened_under(domain0_root)
    """

    def __init__(self) -> None:
        self.paths: List[str] = []

    def __enter__(self) -> "FileAccessRecorder":
        _install_hook()
        with _lock:
            _active.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        with _lock:
            if self in _active:
                _active.remove(self)

    def _record(self, path: str) -> None:
        try:
            self.paths.append(os.path.abspath(path))
        except (OSError, ValueError):
            self.paths.append(path)

    def opened_under(self, root: Union[str, Path]) -> List[str]:
        """Paths recorded below `root` (resolved), in access order."""
        base = os.path.abspath(str(root))
        prefix = base.rstrip(os.sep) + os.sep
        return [p for p in self.paths if p == base or p.startswith(prefix)]

    def first_opened_under(self, root: Union[str, Path]) -> Optional[str]:
        hits = self.opened_under(root)
        return hits[0] if hits else None
