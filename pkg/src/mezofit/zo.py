"""MeZO/SPSA zeroth-order gradient estimation with seed-regenerated noise.

The estimator perturbs the flat parameter vector in place with Gaussian
directions that are never materialized at full length: noise streams come
from a counter-based generator (Philox) keyed by (seed, stream index) and are
replayed chunk by chunk whenever they are needed again. Peak extra storage is
a bounded chunk plus a sparse record of the few coordinates whose float
perturbation cannot be undone by arithmetic alone, so the parameter vector is
always restored bit-for-bit after an estimate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from mezofit.memory import ConfigError

DEFAULT_CHUNK = 1 << 16

_MASK64 = (1 << 64) - 1


class NonfiniteLossError(RuntimeError):
    """A loss evaluation produced NaN or Inf; parameters were restored."""


class NonfiniteGradError(RuntimeError):
    """A gradient evaluation produced NaN or Inf; no update was applied."""


# ---------------------------------------------------------------------------
# flat parameters with named segments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int


@dataclass
class ParameterVector:
    """Flat float64 parameter storage tiled exactly by named segments."""

    values: np.ndarray
    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("values must be one-dimensional")
        self.segments = tuple(self.segments)
        names = [s.name for s in self.segments]
        if len(set(names)) != len(names):
            raise ValueError("segment names must be unique")
        pos = 0
        for seg in self.segments:
            if seg.offset != pos or seg.length < 0:
                raise ValueError(
                    f"segments must tile the vector contiguously; "
                    f"segment {seg.name!r} starts at {seg.offset}, expected {pos}")
            pos += seg.length
        if pos != self.values.size:
            raise ValueError(
                f"segments cover {pos} elements but the vector holds {self.values.size}")
        self._by_name = {s.name: s for s in self.segments}

    @classmethod
    def from_arrays(cls, named_arrays: Sequence[tuple[str, np.ndarray]]) -> "ParameterVector":
        segments, chunks, pos = [], [], 0
        for name, arr in named_arrays:
            flat = np.asarray(arr, dtype=np.float64).ravel()
            segments.append(Segment(name, pos, flat.size))
            chunks.append(flat)
            pos += flat.size
        values = np.concatenate(chunks) if chunks else np.empty(0)
        return cls(values, tuple(segments))

    def __len__(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        seg = self._by_name[name]
        return self.values[seg.offset:seg.offset + seg.length]

    def view(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        return self.segment(name).reshape(shape)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.segments)

    def assert_finite(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise NonfiniteLossError("parameter vector contains NaN/Inf")


# ---------------------------------------------------------------------------
# deterministic noise streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbationSeed:
    """Key of one regenerable standard-normal stream."""

    seed: int
    stream_index: int


def splitmix64(x: int) -> int:
    """Standard 64-bit finalizer; used to derive per-step seeds."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def step_seed(master_seed: int, step_index: int) -> int:
    """64-bit seed for one optimizer step; fresh directions for every step."""
    return splitmix64((master_seed & _MASK64) ^ splitmix64(step_index & _MASK64))


def _generator(seed: PerturbationSeed) -> np.random.Generator:
    key = np.array([seed.seed & _MASK64, seed.stream_index & _MASK64],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def generate_noise(seed: PerturbationSeed, length: int) -> np.ndarray:
    """Materialize a standard-normal stream (tests and small vectors only)."""
    if length < 0:
        raise ValueError("length must be >= 0")
    return _generator(seed).standard_normal(length)


def iter_noise_chunks(seed: PerturbationSeed, length: int,
                      chunk: int = DEFAULT_CHUNK) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (offset, block) pieces of the stream without holding it whole."""
    gen = _generator(seed)
    for start in range(0, length, chunk):
        n = min(chunk, length - start)
        yield start, gen.standard_normal(n)


# ---------------------------------------------------------------------------
# hyperparameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ZOConfig:
    epsilon: float = 1e-3
    learning_rate: float = 1e-3
    num_perturbations: int = 5
    master_seed: int = 0

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon!r}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate!r}")
        if not (isinstance(self.num_perturbations, int) and self.num_perturbations >= 1):
            raise ConfigError(
                f"num_perturbations must be a positive integer, got {self.num_perturbations!r}")


@dataclass(frozen=True)
class StepReport:
    step_index: int
    seeds: tuple[PerturbationSeed, ...]
    projected_gradients: tuple[float, ...]
    losses: tuple[tuple[float, float], ...]  # (loss_plus, loss_minus) per direction


# ---------------------------------------------------------------------------
# exactly-reversible in-place perturbation
# ---------------------------------------------------------------------------
#
# Plain float adds lose low bits, so x + d - d != x for a large fraction of
# coordinates. Each pass below therefore checks invertibility coordinate-wise
# and records the original bits of the (rare) coordinates that fail; the
# record is replayed by the next pass. Expected record size is a tiny
# fraction of the vector for unit-scale parameters and epsilon ~ 1e-3.

_Record = list[tuple[int, np.ndarray, np.ndarray]]  # (chunk start, local idx, saved values)


def _shift(values: np.ndarray, seed: PerturbationSeed, epsilon: float,
           chunk: int, sign: float, undo: _Record | None) -> _Record:
    """values <- fl(base + sign*epsilon*z) where base is the pre-perturbation
    vector, recovered exactly from `undo` (the record of the previous shift).
    Returns the record needed to undo this shift."""
    record: _Record = []
    undo_by_start = {start: (idx, saved) for start, idx, saved in (undo or [])}
    for start, z in iter_noise_chunks(seed, values.size, chunk):
        d = epsilon * z
        block = slice(start, start + d.size)
        base = values[block]
        if undo is not None:
            base = base - (-sign) * d  # previous shift had the opposite sign
            fix = undo_by_start.get(start)
            if fix is not None:
                base[fix[0]] = fix[1]
        shifted = base + sign * d
        bad = np.nonzero(shifted - sign * d != base)[0]
        if bad.size:
            record.append((start, bad, np.array(base[bad])))
        values[block] = shifted
    return record


def _unshift(values: np.ndarray, seed: PerturbationSeed, epsilon: float,
             chunk: int, sign: float, undo: _Record) -> None:
    """Exactly invert the previous `_shift` with the same (seed, sign)."""
    undo_by_start = {start: (idx, saved) for start, idx, saved in undo}
    for start, z in iter_noise_chunks(seed, values.size, chunk):
        d = epsilon * z
        block = slice(start, start + d.size)
        base = values[block] - sign * d
        fix = undo_by_start.get(start)
        if fix is not None:
            base[fix[0]] = fix[1]
        values[block] = base


def spsa_directional_derivative(loss_fn: Callable[[ParameterVector], float],
                                theta: ParameterVector,
                                seed: PerturbationSeed,
                                epsilon: float,
                                chunk: int = DEFAULT_CHUNK) -> float:
    """Central-difference directional derivative along a regenerated direction.

    Evaluates the loss at theta + eps*z and theta - eps*z by shifting theta in
    place (z is streamed from `seed`, never stored), restores theta
    bit-for-bit, and returns (loss_plus - loss_minus) / (2*eps).
    """
    g, _, _ = _spsa_full(loss_fn, theta, seed, epsilon, chunk)
    return g


def _spsa_full(loss_fn, theta, seed, epsilon, chunk):
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon!r}")
    values = theta.values
    rec_up = _shift(values, seed, epsilon, chunk, +1.0, None)
    loss_plus = float(loss_fn(theta))
    if not np.isfinite(loss_plus):
        _unshift(values, seed, epsilon, chunk, +1.0, rec_up)
        raise NonfiniteLossError(f"loss at +epsilon perturbation is {loss_plus}")
    rec_dn = _shift(values, seed, epsilon, chunk, -1.0, rec_up)
    loss_minus = float(loss_fn(theta))
    _unshift(values, seed, epsilon, chunk, -1.0, rec_dn)
    if not np.isfinite(loss_minus):
        raise NonfiniteLossError(f"loss at -epsilon perturbation is {loss_minus}")
    return (loss_plus - loss_minus) / (2.0 * epsilon), loss_plus, loss_minus


# ---------------------------------------------------------------------------
# optimizer steps
# ---------------------------------------------------------------------------

def mezo_step(loss_fn: Callable[[ParameterVector], float],
              theta: ParameterVector,
              cfg: ZOConfig,
              step_index: int,
              chunk: int = DEFAULT_CHUNK) -> tuple[ParameterVector, StepReport]:
    """One MeZO step: average num_perturbations projected gradients, then
    apply theta <- theta - (lr/n) * sum_i g_i * z_i with every z_i regenerated
    a second time. On a non-finite loss the step is abandoned with theta at
    its pre-step value."""
    if step_index < 0:
        raise ConfigError(f"step_index must be >= 0, got {step_index}")
    sseed = step_seed(cfg.master_seed, step_index)
    n = cfg.num_perturbations
    seeds = tuple(PerturbationSeed(sseed, i) for i in range(n))

    gs, losses = [], []
    for s in seeds:
        g, lp, lm = _spsa_full(loss_fn, theta, s, cfg.epsilon, chunk)
        gs.append(g)
        losses.append((lp, lm))

    if cfg.learning_rate > 0:
        scale = cfg.learning_rate / n
        gens = [_generator(s) for s in seeds]  # ascending stream order
        size = theta.values.size
        for start in range(0, size, chunk):
            m = min(chunk, size - start)
            acc = gens[0].standard_normal(m) * gs[0]
            for g, gen in zip(gs[1:], gens[1:]):
                acc += gen.standard_normal(m) * g
            theta.values[start:start + m] -= scale * acc
        theta.assert_finite()

    report = StepReport(step_index, seeds, tuple(gs), tuple(losses))
    return theta, report


def bp_sgd_step(loss_and_grad_fn: Callable[[ParameterVector],
                                           tuple[ParameterVector, float]],
                theta: ParameterVector,
                eta: float) -> ParameterVector:
    """Vanilla SGD: theta <- theta - eta * grad. `loss_and_grad_fn` returns
    (gradient, loss) as produced by the toy model's backward pass."""
    grad, loss = loss_and_grad_fn(theta)
    if not np.isfinite(loss):
        raise NonfiniteLossError(f"loss is {loss}")
    gvals = grad.values if isinstance(grad, ParameterVector) else np.asarray(grad)
    if gvals.shape != theta.values.shape:
        raise ValueError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(gvals)):
        raise NonfiniteGradError("gradient contains NaN/Inf")
    theta.values -= eta * gvals
    return theta
