"""Retain / Forget1 / Forget2 Markov chains and the datasets sampled from them.

States are 1-based (1..n_states) everywhere in this module and in dataset
files. Random streams come from :func:`substream`: numpy's Philox
counter-based generator keyed by ``(seed, blake2b(tag))``, so each purpose
(sampling a source, splitting it, shuffling) owns an independent stream.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

FORMAT_VERSION = 1
N_STATES = 10

# designated (1-based) states of each canonical chain
DESIGNATED = {
    "Retain": (1, 2, 3),
    "Forget1": (4, 5, 6),
    "Forget2": (7, 8, 9),
}
SOURCES = tuple(DESIGNATED)


def substream(seed: int, tag: str) -> np.random.Generator:
    digest = hashlib.blake2b(tag.encode(), digest_size=8).digest()
    key = [int(seed) & (2**64 - 1), int.from_bytes(digest, "little")]
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True, eq=False)
class ChainSpec:
    name: str
    initial: np.ndarray
    transition: np.ndarray

    def __post_init__(self):
        init = np.asarray(self.initial, dtype=np.float64)
        trans = np.asarray(self.transition, dtype=np.float64)
        n = init.shape[0]
        if trans.shape != (n, n):
            raise ValueError(f"transition must be {n}x{n}, got {trans.shape}")
        if np.any(init < 0) or np.any(init > 1) or np.any(trans < 0) or np.any(trans > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(init.sum() - 1) > 1e-9 or np.any(np.abs(trans.sum(axis=1) - 1) > 1e-9):
            raise ValueError("initial distribution and transition rows must sum to 1")
        object.__setattr__(self, "initial", init)
        object.__setattr__(self, "transition", trans)

    @property
    def n_states(self) -> int:
        return self.initial.shape[0]


def canonical_spec(name: str, epsilon: float = 0.2, n_states: int = N_STATES) -> ChainSpec:
    """Chain that moves uniformly within its three designated states.

    With probability ``epsilon`` it leaks to one of the other states; rows of
    non-designated states are uniform over all states.
    """
    if name not in DESIGNATED:
        raise ValueError(f"unknown chain {name!r}; expected one of {SOURCES}")
    if not 0 <= epsilon < 1:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    if n_states <= max(DESIGNATED[name]):
        raise ValueError(f"n_states={n_states} too small for {name}")
    designated = np.zeros(n_states, dtype=bool)
    designated[[s - 1 for s in DESIGNATED[name]]] = True
    n_in = designated.sum()
    initial = np.where(designated, (1 - epsilon) / n_in, epsilon / (n_states - n_in))
    transition = np.tile(np.full(n_states, 1.0 / n_states), (n_states, 1))
    transition[designated] = initial
    return ChainSpec(name, initial, transition)


@dataclass(frozen=True)
class SequenceSample:
    states: tuple[int, ...]
    source: str
    split: str = "train"

    @property
    def length(self) -> int:
        return len(self.states)


def _draw(rng: np.random.Generator, probs: np.ndarray, n: int) -> np.ndarray:
    # inverse-CDF draw; rows of probs are categorical distributions
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    u = rng.random(n)
    return (u[:, None] > np.atleast_2d(cdf)).sum(axis=-1)


def sample_states(spec: ChainSpec, n: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """``(n, length)`` array of 1-based states, vectorised over sequences."""
    if length < 1:
        raise ValueError("length must be >= 1")
    out = np.empty((n, length), dtype=np.int64)
    cur = _draw(rng, spec.initial, n)
    out[:, 0] = cur
    for t in range(1, length):
        cur = _draw(rng, spec.transition[cur], n)
        out[:, t] = cur
    return out + 1


def sample_sequence(spec: ChainSpec, length: int, rng: np.random.Generator) -> SequenceSample:
    states = sample_states(spec, 1, length, rng)[0]
    return SequenceSample(tuple(int(s) for s in states), spec.name)


@dataclass
class SequenceDataset:
    samples: list[SequenceSample]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return SequenceDataset(self.samples[i], self.seed, dict(self.meta))
        return self.samples[i]

    @property
    def split(self) -> list[bool]:
        """Per-sample train flag."""
        return [s.split == "train" for s in self.samples]

    def where(self, source: str | None = None, split: str | None = None) -> "SequenceDataset":
        keep = [s for s in self.samples
                if (source is None or s.source == source) and (split is None or s.split == split)]
        return SequenceDataset(keep, self.seed, dict(self.meta))

    def train(self) -> "SequenceDataset":
        return self.where(split="train")

    def test(self) -> "SequenceDataset":
        return self.where(split="test")

    def lengths(self) -> np.ndarray:
        return np.array([s.length for s in self.samples], dtype=np.int64)

    def save(self, path: str | Path) -> None:
        """Write ``<path>.txt`` (one sequence per line) and ``<path>.json`` sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = "".join(" ".join(map(str, s.states)) + "\n" for s in self.samples)
        path.with_suffix(".txt").write_text(lines)
        lengths: dict[str, int] = {}
        counts: dict[str, int] = {}
        for s in self.samples:
            lengths.setdefault(s.source, s.length)
            counts[s.source] = counts.get(s.source, 0) + 1
        sidecar = {
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "epsilon": self.meta.get("epsilon"),
            "lengths": lengths,
            "counts": counts,
            "sources": [s.source for s in self.samples],
            "split": [s.split for s in self.samples],
            "meta": self.meta,
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SequenceDataset":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(".json").read_text())
        if sidecar.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format {sidecar.get('format_version')}")
        rows = path.with_suffix(".txt").read_text().splitlines()
        if len(rows) != len(sidecar["sources"]):
            raise ValueError("sequence file and sidecar disagree on sample count")
        samples = [
            SequenceSample(tuple(int(v) for v in row.split()), src, split)
            for row, src, split in zip(rows, sidecar["sources"], sidecar["split"])
        ]
        return cls(samples, sidecar["seed"], sidecar.get("meta", {}))


@dataclass
class DataConfig:
    epsilon: float = 0.2
    n_retain: int = 10000
    n_forget1: int = 5000
    n_forget2: int = 5000
    len_retain: int = 20
    len_forget1: int = 20
    len_forget2: int = 5
    train_fraction: float = 0.8
    include_forget2_in_pretrain: bool = True
    retrain_on: str = "retain"

    def counts(self) -> dict[str, int]:
        return {"Retain": self.n_retain, "Forget1": self.n_forget1, "Forget2": self.n_forget2}

    def lengths(self) -> dict[str, int]:
        return {"Retain": self.len_retain, "Forget1": self.len_forget1, "Forget2": self.len_forget2}


class Benchmark(NamedTuple):
    pretrain: SequenceDataset  # train splits used to fit the original model
    retain: SequenceDataset    # all Retain samples, both splits
    forget: SequenceDataset    # Forget1 + Forget2, both splits, shuffled
    full: SequenceDataset      # everything, generation order


def split_source(samples: list[SequenceSample], fraction: float, rng) -> list[SequenceSample]:
    n_train = int(round(fraction * len(samples)))
    order = rng.permutation(len(samples))
    is_train = np.zeros(len(samples), dtype=bool)
    is_train[order[:n_train]] = True
    return [SequenceSample(s.states, s.source, "train" if t else "test")
            for s, t in zip(samples, is_train)]


def build_benchmark(config: DataConfig, seed: int = 0,
                    include_forget2_in_pretrain: bool | None = None) -> Benchmark:
    """Sample every source, split it 80/20 (stratified) and assemble the sets.

    ``include_forget2_in_pretrain`` overrides the config flag when given.
    """
    if include_forget2_in_pretrain is None:
        include_forget2_in_pretrain = config.include_forget2_in_pretrain
    counts, lengths = config.counts(), config.lengths()
    if min(counts.values()) < 1 or min(lengths.values()) < 1:
        raise ValueError("dataset sizes and lengths must be positive")
    per_source: dict[str, list[SequenceSample]] = {}
    for name in SOURCES:
        spec = canonical_spec(name, config.epsilon)
        states = sample_states(spec, counts[name], lengths[name], substream(seed, f"sample/{name}"))
        raw = [SequenceSample(tuple(row.tolist()), name) for row in states]
        per_source[name] = split_source(raw, config.train_fraction, substream(seed, f"split/{name}"))

    meta = {"epsilon": config.epsilon}
    full = SequenceDataset([s for name in SOURCES for s in per_source[name]], seed, meta)
    pre_sources = SOURCES if include_forget2_in_pretrain else ("Retain", "Forget1")
    pretrain = SequenceDataset(
        [s for name in pre_sources for s in per_source[name] if s.split == "train"], seed, meta)
    forget = per_source["Forget1"] + per_source["Forget2"]
    perm = substream(seed, "shuffle/forget").permutation(len(forget))
    forget_ds = SequenceDataset([forget[i] for i in perm], seed, meta)
    retain_ds = SequenceDataset(list(per_source["Retain"]), seed, meta)
    return Benchmark(pretrain, retain_ds, forget_ds, full)


def transition_counts(states: np.ndarray, n_states: int = N_STATES) -> np.ndarray:
    """Count matrix of observed (from, to) pairs in 1-based state sequences."""
    states = np.asarray(states)
    src = states[:, :-1].reshape(-1) - 1
    dst = states[:, 1:].reshape(-1) - 1
    return np.bincount(src * n_states + dst, minlength=n_states * n_states).reshape(n_states, n_states)


def ceil_fraction(fraction: float, n: int) -> int:
    return max(1, int(math.ceil(fraction * n - 1e-9)))
