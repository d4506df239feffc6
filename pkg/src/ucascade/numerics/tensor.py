"""Array helpers and deterministic random streams.

Tensors are plain ``numpy.ndarray`` values; this module only adds the
validation applied to external input and the splittable generator used for
dropout masks.
"""

import numpy as np

from ..errors import DataError


def as_tensor(data, dtype=np.float64, shape=None):
    """Convert external input to an ndarray, rejecting NaN/Inf."""
    arr = np.asarray(data, dtype=dtype)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise DataError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise DataError("tensor contains non-finite values")
    return arr


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def split_rngs(seed, n):
    """Return ``n`` independent generators derived from ``seed`` in fixed order."""
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(n)]


def derive_seed(*keys):
    """Deterministic 64-bit seed from a tuple of non-negative ints."""
    ss = np.random.SeedSequence([int(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
