"""Multi-level bucket index over concatenated hash codes.

Each repetition assigns every point a tuple of hash codes, one per slot.
Sorting the points lexicographically by code tuple makes every prefix-based
bucket a contiguous run, so one structure serves all levels at once: level k
buckets are the groups of points sharing their first k codes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationError, FamilyCalibration
from .families import FamilyParams, HashFunction, derived_seed, hash_batch, sample_hash_function
from .geometry import Dataset

MAGIC = b"MLSLSH01"
FORMAT_VERSION = 1
_FLAG_CODES = 1

# float noise guard for ceil on formula values that are exact integers
_CEIL_EPS = 1e-9


class IndexFormatError(ValueError):
    """Raised when an index file is malformed or truncated."""


def _ceil_guard(x: float) -> int:
    return int(math.ceil(x - _CEIL_EPS))


def compute_k(n: int, p2: float) -> int:
    """Number of hash slots: ceil(ln n / ln(1/p2)), at least 1."""
    if n < 1:
        raise ValueError(f"need at least one point, got {n}")
    if not 0.0 < p2 < 1.0:
        raise ValueError(f"p2 must lie in (0, 1), got {p2}")
    if n == 1:
        return 1
    return max(1, _ceil_guard(math.log(n) / math.log(1.0 / p2)))


def compute_numreps(p1: float, k: int) -> int:
    """Repetitions needed for constant recall at depth k: ceil(p1^-k)."""
    if not 0.0 < p1 <= 1.0:
        raise ValueError(f"p1 must lie in (0, 1], got {p1}")
    if k < 1:
        raise ValueError(f"depth must be at least 1, got {k}")
    return _ceil_guard(p1**-k)


def reps(k: int, j: int, probe_success: float) -> int:
    """Repetitions to consult at level k with j probes: ceil(2 ln(2jk) / P).

    P is the calibrated probability that one repetition's first j probes
    reach a point at the target radius. Unclamped; callers cap at the number
    of repetitions actually built.
    """
    if k < 1 or j < 1:
        raise ValueError(f"level and probe count must be positive, got k={k}, j={j}")
    if not 0.0 < probe_success <= 1.0:
        raise ValueError(f"probe success must lie in (0, 1], got {probe_success}")
    return max(1, _ceil_guard(2.0 * math.log(2.0 * j * k) / probe_success))


@dataclass(frozen=True)
class BuildParams:
    family: FamilyParams
    calibration: FamilyCalibration
    space_budget: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family != self.calibration.params:
            raise ValueError("calibration was measured for a different family")
        if self.space_budget is not None and self.space_budget < 1:
            raise ValueError(f"space budget must be positive, got {self.space_budget}")


class Repetition:
    """One repetition: K hash functions plus points sorted by code tuple.

    sorted_codes is stored column-major so the per-column binary searches in
    prefix_range touch contiguous memory.
    """

    __slots__ = ("functions", "sorted_codes", "order")

    def __init__(self, functions: tuple[HashFunction, ...], codes: np.ndarray):
        if codes.ndim != 2 or codes.shape[1] != len(functions):
            raise ValueError(
                f"code matrix shape {codes.shape} does not match {len(functions)} slots"
            )
        self.functions = functions
        # lexsort keys run last-to-first, so feed columns in reverse
        order = np.lexsort(tuple(codes[:, s] for s in reversed(range(codes.shape[1]))))
        self.order = order.astype(np.int64)
        self.sorted_codes = np.asfortranarray(codes[self.order].astype(np.int32))

    @property
    def depth(self) -> int:
        return len(self.functions)

    def prefix_range(self, prefix: tuple[int, ...]) -> tuple[int, int]:
        """Half-open run [lo, hi) of sorted positions whose codes start with prefix."""
        if not 1 <= len(prefix) <= self.depth:
            raise ValueError(
                f"prefix length must lie in 1..{self.depth}, got {len(prefix)}"
            )
        lo, hi = 0, self.sorted_codes.shape[0]
        for s, code in enumerate(prefix):
            col = self.sorted_codes[lo:hi, s]
            lo, hi = lo + np.searchsorted(col, code, side="left"), lo + np.searchsorted(
                col, code, side="right"
            )
            if lo == hi:
                break
        return int(lo), int(hi)

    def members(self, prefix: tuple[int, ...]) -> np.ndarray:
        """Dataset indices of the bucket for `prefix`, in sorted-run order."""
        lo, hi = self.prefix_range(prefix)
        return self.order[lo:hi]

    def codes_in_input_order(self) -> np.ndarray:
        out = np.empty_like(self.sorted_codes, order="C")
        out[self.order] = self.sorted_codes
        return out


@dataclass(frozen=True, eq=False)
class MultiLevelIndex:
    dataset: Dataset
    params: BuildParams
    levels: int
    repetitions: tuple[Repetition, ...]

    @property
    def num_repetitions(self) -> int:
        return len(self.repetitions)

    @property
    def size(self) -> int:
        return self.dataset.size

    def bucket(self, rep: int, prefix: tuple[int, ...]) -> np.ndarray:
        if not 0 <= rep < len(self.repetitions):
            raise ValueError(f"repetition {rep} outside 0..{len(self.repetitions) - 1}")
        return self.repetitions[rep].members(prefix)

    def bucket_size(self, rep: int, prefix: tuple[int, ...]) -> int:
        if not 0 <= rep < len(self.repetitions):
            raise ValueError(f"repetition {rep} outside 0..{len(self.repetitions) - 1}")
        lo, hi = self.repetitions[rep].prefix_range(prefix)
        return hi - lo

    def save(self, path: str, include_codes: bool = True) -> None:
        """Write the index to `path`.

        With include_codes=False the file omits the code matrices; loading
        recomputes them from the stored points and seeds, trading load time
        for file size. Raw (pre-normalization) inputs are never persisted.
        """
        ds = self.dataset
        meta = {
            "family": self.params.family.to_json_dict(),
            "calibration": self.params.calibration.to_json_dict(),
            "seed": self.params.seed,
            "space_budget": self.params.space_budget,
            "levels": self.levels,
            "num_repetitions": len(self.repetitions),
            "n": ds.size,
            "d": ds.dim,
            "degenerate_ids": list(ds.degenerate_ids),
        }
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        flags = _FLAG_CODES if include_codes else 0
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", FORMAT_VERSION, flags))
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            f.write(np.ascontiguousarray(ds.centroid, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(ds.matrix, dtype="<f8").tobytes())
            if include_codes:
                for rep in self.repetitions:
                    f.write(
                        np.ascontiguousarray(
                            rep.codes_in_input_order(), dtype="<i4"
                        ).tobytes()
                    )


def _slot_functions(
    family: FamilyParams, seed: int, rep: int, depth: int
) -> tuple[HashFunction, ...]:
    return tuple(
        sample_hash_function(family, derived_seed(seed, rep, s)) for s in range(depth)
    )


def build_index(
    dataset: Dataset,
    calibration: FamilyCalibration,
    space_budget: int | None = None,
    seed: int = 0,
) -> MultiLevelIndex:
    """Build the index sized by the calibrated probabilities.

    Depth K comes from compute_k(n, p2); the repetition count is
    compute_numreps(p1, K), capped by space_budget when one is given.
    """
    n = dataset.size
    K = compute_k(n, calibration.p2)
    if calibration.levels < K:
        raise CalibrationError(
            f"calibration covers {calibration.levels} levels but n={n} needs {K}; "
            "re-calibrate with more levels"
        )
    R = compute_numreps(calibration.p1, K)
    if space_budget is not None:
        R = min(R, space_budget)
    params = BuildParams(
        family=calibration.params,
        calibration=calibration,
        space_budget=space_budget,
        seed=seed,
    )
    repetitions = []
    for rep in range(R):
        fns = _slot_functions(calibration.params, seed, rep, K)
        codes = np.empty((n, K), dtype=np.int32)
        for s, fn in enumerate(fns):
            codes[:, s] = hash_batch(fn, dataset.matrix)
        repetitions.append(Repetition(fns, codes))
    return MultiLevelIndex(
        dataset=dataset, params=params, levels=K, repetitions=tuple(repetitions)
    )


def _read_exact(f, count: int, what: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise IndexFormatError(
            f"truncated index file: expected {count} bytes of {what}, got {len(buf)}"
        )
    return buf


def load_index(path: str) -> MultiLevelIndex:
    """Load an index written by MultiLevelIndex.save.

    Files saved without code matrices are rebuilt from the stored points and
    the recorded seeds; the result is identical to the original build.
    """
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise IndexFormatError(f"bad magic {magic!r}; not an index file")
        version, flags = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != FORMAT_VERSION:
            raise IndexFormatError(f"unsupported index format version {version}")
        if flags & ~_FLAG_CODES:
            raise IndexFormatError(f"unknown flag bits {flags:#x}")
        (meta_len,) = struct.unpack("<Q", _read_exact(f, 8, "metadata length"))
        try:
            meta = json.loads(_read_exact(f, meta_len, "metadata"))
        except json.JSONDecodeError as e:
            raise IndexFormatError(f"corrupt index metadata: {e}") from e
        n, d = int(meta["n"]), int(meta["d"])
        K, R = int(meta["levels"]), int(meta["num_repetitions"])
        centroid = np.frombuffer(
            _read_exact(f, 8 * d, "centroid"), dtype="<f8"
        ).astype(np.float64)
        matrix = (
            np.frombuffer(_read_exact(f, 8 * n * d, "points"), dtype="<f8")
            .reshape(n, d)
            .astype(np.float64)
        )
        code_blocks = []
        if flags & _FLAG_CODES:
            for rep in range(R):
                block = np.frombuffer(
                    _read_exact(f, 4 * n * K, f"codes for repetition {rep}"),
                    dtype="<i4",
                ).reshape(n, K)
                code_blocks.append(block.astype(np.int32))
        trailing = f.read(1)
        if trailing:
            raise IndexFormatError("trailing data after index payload")

    family = FamilyParams.from_json_dict(meta["family"])
    calibration = FamilyCalibration.from_json_dict(meta["calibration"])
    seed = int(meta["seed"])
    budget = meta["space_budget"]
    dataset = Dataset(
        matrix=matrix,
        centroid=centroid,
        degenerate_ids=tuple(meta["degenerate_ids"]),
    )
    params = BuildParams(
        family=family,
        calibration=calibration,
        space_budget=None if budget is None else int(budget),
        seed=seed,
    )
    repetitions = []
    for rep in range(R):
        fns = _slot_functions(family, seed, rep, K)
        if code_blocks:
            codes = code_blocks[rep]
        else:
            codes = np.empty((n, K), dtype=np.int32)
            for s, fn in enumerate(fns):
                codes[:, s] = hash_batch(fn, dataset.matrix)
        repetitions.append(Repetition(fns, codes))
    return MultiLevelIndex(
        dataset=dataset, params=params, levels=K, repetitions=tuple(repetitions)
    )
