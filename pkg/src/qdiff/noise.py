"""Complex Gaussian increments from counter-based random streams.

Each trajectory owns the Philox4x64 stream keyed by ``(seed, trajectory_index)``.
Increment number ``k`` of a stream is built from raw words ``2k`` and ``2k+1``
by a Box-Muller transform, so any increment can be regenerated from
``(seed, trajectory_index, k)`` alone, independent of batching or worker
scheduling.

An increment is ``a + i b`` with ``a, b ~ N(0, dt)`` independent, hence
``E[dxi] = 0``, ``E[dxi^2] = 0`` and ``E[|dxi|^2] = 2 dt``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.random import Philox

_MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * np.pi
# Counter region for draws that are not increments (initial-state sampling).
_AUX_BLOCK = 1 << 255


def _key(seed: int, trajectory_index: int) -> np.ndarray:
    if seed < 0 or seed > _MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    if trajectory_index < 0 or trajectory_index > _MASK64:
        raise ValueError(f"trajectory index out of range: {trajectory_index!r}")
    return np.array([seed, trajectory_index], dtype=np.uint64)


def _raw_words(seed: int, trajectory_index: int, first_word: int, n_words: int) -> np.ndarray:
    block, skip = divmod(first_word, 4)
    bg = Philox(key=_key(seed, trajectory_index), counter=block)
    return bg.random_raw(n_words + skip)[skip:]


def _to_unit(words: np.ndarray) -> np.ndarray:
    # 53-bit uniforms on the open interval (0, 1)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def _box_muller(words: np.ndarray) -> np.ndarray:
    u = _to_unit(words)
    u1, u2 = u[..., 0::2], u[..., 1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = _TWO_PI * u2
    return r * np.cos(theta) + 1j * (r * np.sin(theta))


def standard_increments(seed: int, trajectory_index: int, start: int, count: int) -> np.ndarray:
    """Unit-variance complex increments ``start .. start+count-1`` of one stream.

    Real and imaginary parts are independent standard normals.
    """
    if start < 0 or count < 0:
        raise ValueError("start and count must be non-negative")
    return _box_muller(_raw_words(seed, trajectory_index, 2 * start, 2 * count))


def increment_block(seed: int, trajectory_indices, start: int, count: int, dt: float) -> np.ndarray:
    """Increments for many streams at once, shape ``(len(trajectory_indices), count)``.

    Row ``i`` equals ``standard_increments(seed, trajectory_indices[i], start, count)``
    scaled by ``sqrt(dt)``.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    idx = [int(i) for i in np.atleast_1d(trajectory_indices)]
    # Pad rows to a multiple of 8 values so every row starts at the same SIMD
    # lane offset; the transform is then identical whatever the batch shape.
    padded = -(-count // 8) * 8
    words = np.empty((len(idx), 2 * padded), dtype=np.uint64)
    for row, i in enumerate(idx):
        words[row] = _raw_words(seed, i, 2 * start, 2 * padded)
    return _box_muller(words)[:, :count] * np.sqrt(dt)


def auxiliary_uniform(seed: int, trajectory_index: int) -> float:
    """One uniform on (0, 1) from a reserved part of the stream, disjoint from increments."""
    w = Philox(key=_key(seed, trajectory_index), counter=_AUX_BLOCK).random_raw(1)
    return float(_to_unit(w)[0])


@dataclass
class NoiseStream:
    """Position in one trajectory's increment sequence.

    ``counter`` counts complex increments already consumed.  A stream is
    single-owner state; copy it (``dataclasses.replace``) to replay.
    """

    seed: int
    trajectory_index: int = 0
    counter: int = 0

    def __post_init__(self):
        _key(self.seed, self.trajectory_index)
        if self.counter < 0:
            raise ValueError("counter must be non-negative")


@dataclass(frozen=True)
class NoiseIncrements:
    values: np.ndarray  # complex, one per Lindblad operator
    dt: float

    def __len__(self) -> int:
        return len(self.values)

    @property
    def chi(self) -> np.ndarray:
        """Real increments ``dchi_m = dxi_m + dxi_m^*``."""
        return 2.0 * self.values.real


def sample_increments(stream: NoiseStream, m_count: int, dt: float) -> NoiseIncrements:
    """Draw one increment per Lindblad operator and advance the stream."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    if m_count < 1:
        raise ValueError(f"m_count must be >= 1, got {m_count!r}")
    z = standard_increments(stream.seed, stream.trajectory_index, stream.counter, m_count)
    stream.counter += m_count
    vals = z * np.sqrt(dt)
    vals.flags.writeable = False
    return NoiseIncrements(vals, float(dt))
