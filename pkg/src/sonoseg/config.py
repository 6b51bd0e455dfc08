"""Global runtime switches: checked mode, gradient recording, thread count."""

from contextlib import contextmanager

_checked = True
_grad_enabled = True
_num_threads = 1


def checked_mode() -> bool:
    return _checked


def set_checked_mode(on: bool) -> None:
    global _checked
    _checked = bool(on)


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def num_threads() -> int:
    return _num_threads


def set_num_threads(n: int) -> None:
    global _num_threads
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _num_threads = int(n)
