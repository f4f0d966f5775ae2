"""Shared domain types, the line-delimited pair dataset format, and seeded streams.

Everything random in the package is drawn from a :class:`Stream`.  A stream is
identified by a root seed plus a path of labels; ``stream.split("train", 3)``
derives an independent child whose draws never depend on how many numbers the
parent (or any sibling) has consumed.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

FORMAT_MAGIC = "#balanced-pref"
FORMAT_VERSION = "v1"

Sample = tuple  # tuple[float, ...] of length d
VoteVector = tuple  # tuple[int, ...] of length K, entries in {-1, 0, +1}


class ValidationError(ValueError):
    """Raised when a value violates a domain invariant."""


class DatasetFormatError(ValidationError):
    """Raised for malformed dataset files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------


def _check_finite(values: Iterable[float], what: str) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValidationError(f"{what} contains non-finite value {v!r}")


@dataclass(frozen=True)
class ScoreVector:
    values: tuple[float, ...]
    metric_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "metric_ids", tuple(str(m) for m in self.metric_ids))
        if len(self.values) != len(self.metric_ids):
            raise ValidationError(
                f"score vector has {len(self.values)} values for {len(self.metric_ids)} metrics"
            )
        _check_finite(self.values, "score vector")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ConsensusLabel:
    s: int
    tie_broken: bool = False

    def __post_init__(self):
        if self.s not in (-1, 1):
            raise ValidationError(f"consensus must be +1 or -1, got {self.s!r}")


@dataclass(frozen=True)
class PreferencePair:
    pair_id: int
    condition: int
    sample_a: Sample
    sample_b: Sample
    scores_a: ScoreVector
    scores_b: ScoreVector
    votes: VoteVector | None = None
    consensus: ConsensusLabel | None = None

    def __post_init__(self):
        object.__setattr__(self, "sample_a", tuple(float(v) for v in self.sample_a))
        object.__setattr__(self, "sample_b", tuple(float(v) for v in self.sample_b))
        if self.condition < 0:
            raise ValidationError(f"pair {self.pair_id}: negative condition {self.condition}")
        if len(self.sample_a) != len(self.sample_b):
            raise ValidationError(f"pair {self.pair_id}: samples differ in dimension")
        _check_finite(self.sample_a + self.sample_b, f"pair {self.pair_id} samples")
        if self.scores_a.metric_ids != self.scores_b.metric_ids:
            raise ValidationError(f"pair {self.pair_id}: scores_a and scores_b metric ids differ")
        if self.votes is not None:
            votes = tuple(int(v) for v in self.votes)
            if len(votes) != len(self.scores_a):
                raise ValidationError(f"pair {self.pair_id}: {len(votes)} votes for K={len(self.scores_a)}")
            if any(v not in (-1, 0, 1) for v in votes):
                raise ValidationError(f"pair {self.pair_id}: votes must lie in {{-1, 0, +1}}")
            object.__setattr__(self, "votes", votes)
        if self.consensus is not None and self.votes is None:
            raise ValidationError(f"pair {self.pair_id}: consensus present without votes")

    @property
    def d(self) -> int:
        return len(self.sample_a)

    @property
    def k(self) -> int:
        return len(self.scores_a)

    @property
    def metric_ids(self) -> tuple[str, ...]:
        return self.scores_a.metric_ids

    def swapped(self) -> "PreferencePair":
        """The same pair with A and B exchanged; votes and consensus are negated."""
        votes = None if self.votes is None else tuple(-v for v in self.votes)
        consensus = None
        if self.consensus is not None:
            consensus = ConsensusLabel(-self.consensus.s, self.consensus.tie_broken)
        return replace(
            self,
            sample_a=self.sample_b,
            sample_b=self.sample_a,
            scores_a=self.scores_b,
            scores_b=self.scores_a,
            votes=votes,
            consensus=consensus,
        )

    def unlabeled(self) -> "PreferencePair":
        return replace(self, votes=None, consensus=None)


# --------------------------------------------------------------------------
# seeded streams
# --------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _label_key(label) -> int:
    # ints and strings must never collide, hence the type tag in the digest
    if isinstance(label, (bool, np.bool_)):
        label = int(label)
    if isinstance(label, (int, np.integer)):
        raw = b"i" + str(int(label)).encode()
    elif isinstance(label, str):
        raw = b"s" + label.encode("utf-8")
    else:
        raise TypeError(f"split labels must be str or int, got {type(label).__name__}")
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class Stream:
    """A deterministic random stream addressed by ``(seed, path)``.

    Draw methods delegate to a PCG64 generator that is created lazily, so a
    stream used only for ``split`` never advances.
    """

    seed: int
    path: tuple = ()
    _gen: list = field(default_factory=list, repr=False, compare=False)

    def split(self, *labels) -> "Stream":
        return Stream(self.seed, self.path + tuple(labels))

    @property
    def generator(self) -> np.random.Generator:
        if not self._gen:
            ss = np.random.SeedSequence(
                entropy=self.seed & _MASK64,
                spawn_key=tuple(_label_key(lab) for lab in self.path),
            )
            self._gen.append(np.random.Generator(np.random.PCG64(ss)))
        return self._gen[0]

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)


def seeded_rng(seed: int) -> Stream:
    return Stream(int(seed))


# --------------------------------------------------------------------------
# dataset file format
# --------------------------------------------------------------------------


def _fmt(v: float) -> str:
    # repr is the shortest string that parses back to the same double
    return repr(float(v))


def format_header(d: int, k: int, metric_ids: Sequence[str], extra: dict | None = None) -> str:
    for m in metric_ids:
        if not m or any(ch in m for ch in ", \t\n="):
            raise ValidationError(f"metric id {m!r} cannot be serialized")
    parts = [FORMAT_MAGIC, FORMAT_VERSION, f"d={d}", f"k={k}", "metrics=" + ",".join(metric_ids)]
    for key, value in (extra or {}).items():
        parts.append(f"{key}={value}")
    return " ".join(parts)


def parse_header(line: str) -> dict:
    tokens = line.strip().split()
    if len(tokens) < 5 or tokens[0] != FORMAT_MAGIC:
        raise DatasetFormatError("missing or invalid header", line=1)
    if tokens[1] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {tokens[1]!r}", line=1)
    fields = {}
    for tok in tokens[2:]:
        key, sep, value = tok.partition("=")
        if not sep:
            raise DatasetFormatError(f"bad header token {tok!r}", line=1)
        fields[key] = value
    try:
        d, k = int(fields["d"]), int(fields["k"])
        metrics = tuple(fields["metrics"].split(",")) if fields["metrics"] else ()
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"header lacks d/k/metrics ({exc})", line=1) from None
    if len(metrics) != k:
        raise DatasetFormatError(f"header declares k={k} but lists {len(metrics)} metrics", line=1)
    extra = {key: v for key, v in fields.items() if key not in ("d", "k", "metrics")}
    return {"d": d, "k": k, "metric_ids": metrics, "extra": extra}


def format_record(p: PreferencePair) -> str:
    fields = [str(p.pair_id), str(p.condition)]
    fields += [_fmt(v) for v in p.sample_a]
    fields += [_fmt(v) for v in p.sample_b]
    fields += [_fmt(v) for v in p.scores_a.values]
    fields += [_fmt(v) for v in p.scores_b.values]
    if p.votes is None:
        fields.append("-")
    else:
        fields += [str(v) for v in p.votes]
    if p.consensus is None:
        fields += ["-", "-"]
    else:
        fields += ["+1" if p.consensus.s > 0 else "-1", "1" if p.consensus.tie_broken else "0"]
    return ",".join(fields)


def parse_record(line: str, d: int, k: int, metric_ids: tuple[str, ...], lineno: int) -> PreferencePair:
    fields = line.rstrip("\n").split(",")
    head = 2 + 2 * d + 2 * k
    n = len(fields)
    if n == head + 3:
        has_votes = False
    elif n == head + k + 2:
        has_votes = True
    else:
        raise DatasetFormatError(
            f"expected {head + 3} or {head + k + 2} fields for d={d}, k={k}; got {n}", line=lineno
        )
    try:
        pair_id, condition = int(fields[0]), int(fields[1])
        nums = [float(f) for f in fields[2:head]]
        votes = None
        if has_votes:
            votes = tuple(int(f) for f in fields[head:head + k])
        elif fields[head] != "-":
            raise ValueError(f"votes field {fields[head]!r} should be '-'")
        cons_f, tie_f = fields[-2], fields[-1]
        if cons_f == "-":
            if tie_f != "-":
                raise ValueError("tie_broken given without consensus")
            consensus = None
        else:
            if cons_f not in ("+1", "-1") or tie_f not in ("0", "1"):
                raise ValueError(f"bad consensus fields {cons_f!r},{tie_f!r}")
            consensus = ConsensusLabel(1 if cons_f == "+1" else -1, tie_f == "1")
        return PreferencePair(
            pair_id=pair_id,
            condition=condition,
            sample_a=tuple(nums[:d]),
            sample_b=tuple(nums[d:2 * d]),
            scores_a=ScoreVector(tuple(nums[2 * d:2 * d + k]), metric_ids),
            scores_b=ScoreVector(tuple(nums[2 * d + k:]), metric_ids),
            votes=votes,
            consensus=consensus,
        )
    except (ValueError, ValidationError) as exc:
        raise DatasetFormatError(str(exc), line=lineno) from None


def _check_homogeneous(pairs: Sequence[PreferencePair], d: int, k: int, metric_ids) -> None:
    for p in pairs:
        if p.d != d or p.k != k or p.metric_ids != tuple(metric_ids):
            raise ValidationError(f"pair {p.pair_id} does not match dataset d={d}, k={k}, metrics={metric_ids}")


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_dataset(
    pairs: Sequence[PreferencePair],
    path: str | os.PathLike,
    *,
    d: int | None = None,
    metric_ids: Sequence[str] | None = None,
    extra: dict | None = None,
) -> None:
    """Write ``pairs`` to ``path``.

    ``d`` and ``metric_ids`` are taken from the first pair; they must be passed
    explicitly to write an empty dataset with a meaningful header.
    """
    pairs = list(pairs)
    if pairs:
        d = pairs[0].d if d is None else d
        metric_ids = pairs[0].metric_ids if metric_ids is None else tuple(metric_ids)
    else:
        d = 0 if d is None else d
        metric_ids = () if metric_ids is None else tuple(metric_ids)
    _check_homogeneous(pairs, d, len(metric_ids), tuple(metric_ids))
    lines = [format_header(d, len(metric_ids), metric_ids, extra)]
    lines += [format_record(p) for p in pairs]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_dataset_with_header(path: str | os.PathLike) -> tuple[dict, list[PreferencePair]]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise DatasetFormatError("empty file", line=1)
        header = parse_header(first)
        pairs = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            pairs.append(parse_record(line, header["d"], header["k"], header["metric_ids"], lineno))
    return header, pairs


def read_dataset(path: str | os.PathLike) -> list[PreferencePair]:
    return read_dataset_with_header(path)[1]
