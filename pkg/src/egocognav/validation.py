"""Input checks shared by estimators, metrics and the CLI."""
import numpy as np

from .episodes.data import WindowBatch, WindowSample, stack_windows
from .errors import OutOfRange, ShapeMismatch


def check_windows(X):
    """Accept a WindowBatch, a WindowSample or a sequence of samples; return a WindowBatch."""
    if isinstance(X, WindowBatch):
        batch = X
    elif isinstance(X, WindowSample):
        batch = stack_windows([X])
    else:
        try:
            items = list(X)
        except TypeError:
            raise TypeError(f"expected windows, got {type(X).__name__}") from None
        if not items or not all(isinstance(w, WindowSample) for w in items):
            raise TypeError("expected a non-empty sequence of WindowSample")
        batch = stack_windows(items)
    if batch.motion.ndim != 3 or batch.motion.shape[-1] != 3:
        raise ShapeMismatch(f"motion must be (B, T1, 3), got {batch.motion.shape}")
    return batch


def check_unit_interval(name, values):
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise OutOfRange(f"{name} contains non-finite values")
    if np.any(values < 0) or np.any(values > 1):
        raise OutOfRange(f"{name} must lie in [0, 1]")
    return values


def check_same_length(**arrays):
    lengths = {k: len(v) for k, v in arrays.items()}
    if len(set(lengths.values())) > 1:
        raise ShapeMismatch(f"length mismatch: {lengths}")
    return next(iter(lengths.values())) if lengths else 0


def check_targets(X, y):
    """Uncertainty targets: ``y`` if given, else the windows' own labels."""
    batch = check_windows(X)
    target = batch.u_target if y is None else np.asarray(y, dtype=float)
    check_same_length(X=batch.motion, y=target)
    return batch, check_unit_interval("y", target)
