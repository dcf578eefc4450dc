"""Pool bookkeeping for the semi-supervised active-learning loop.

The engine never trains anything.  Each cycle it consumes a prediction dump
for the unlabeled pool, emits a selection manifest and a pseudo-label set,
and hands both to an external trainer, which trains on the labeled plus
pseudo-labeled images and returns the next dump.

State transitions are pure: every operation returns a new ``PoolState``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional

import numpy as np

from .pseudo import GateThresholds, PseudoLabelSet, build_pseudo_set
from .records import InstancePrediction, SchemaError, dumps, read_json, write_atomic
from .scoring import (
    entropy_image_score,
    image_score,
    instance_score,
    select_most_uncertain,
)

STATE_VERSION = 1
STRATEGIES = ("tsp", "entropy", "random")
DEFAULT_BUDGET = 3000
DEFAULT_PER_CYCLE = 500
DEFAULT_BETA = 0.01


class LoopError(RuntimeError):
    """Operation not valid in the current loop state."""


class LoopComplete(LoopError):
    """All cycles have run or the unlabeled pool is exhausted."""


class StateFileError(SchemaError):
    """State file is corrupt or violates a pool invariant."""


class UnsupportedVersionError(StateFileError):
    pass


@dataclass(frozen=True)
class CycleRecord:
    cycle: int
    strategy: str
    selected: tuple[str, ...]
    pseudo_count: int = 0
    thresholds: Optional[dict] = None
    beta: Optional[float] = None
    evaluation: Optional[dict] = None

    def to_json(self) -> dict:
        return {
            "cycle": self.cycle,
            "strategy": self.strategy,
            "selected": list(self.selected),
            "pseudo_count": self.pseudo_count,
            "thresholds": self.thresholds,
            "beta": self.beta,
            "evaluation": self.evaluation,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CycleRecord":
        return cls(
            cycle=int(obj["cycle"]),
            strategy=str(obj["strategy"]),
            selected=tuple(str(i) for i in obj["selected"]),
            pseudo_count=int(obj.get("pseudo_count", 0)),
            thresholds=obj.get("thresholds"),
            beta=obj.get("beta"),
            evaluation=obj.get("evaluation"),
        )


@dataclass(frozen=True)
class PoolState:
    all_ids: tuple[str, ...]
    d_u: frozenset[str]
    d_al: frozenset[str]
    d_semi: frozenset[str]
    k: int
    per_cycle_b: int
    max_cycles: int
    seed: int
    rng_state: dict
    config: dict = field(default_factory=dict)
    history: tuple[CycleRecord, ...] = ()

    @property
    def done(self) -> bool:
        return self.k >= self.max_cycles or not self.d_u

    def rng(self) -> np.random.Generator:
        bitgen = np.random.PCG64()
        bitgen.state = self.rng_state
        return np.random.Generator(bitgen)

    def to_json(self) -> dict:
        return {
            "version": STATE_VERSION,
            "all_ids": list(self.all_ids),
            "d_u": sorted(self.d_u),
            "d_al": sorted(self.d_al),
            "d_semi": sorted(self.d_semi),
            "k": self.k,
            "per_cycle_b": self.per_cycle_b,
            "max_cycles": self.max_cycles,
            "seed": self.seed,
            "rng_state": self.rng_state,
            "config": self.config,
            "history": [r.to_json() for r in self.history],
        }

    @classmethod
    def from_json(cls, obj: Any) -> "PoolState":
        if not isinstance(obj, dict):
            raise StateFileError("state file must hold a JSON object")
        version = obj.get("version")
        if version != STATE_VERSION:
            raise UnsupportedVersionError(
                f"unsupported state file version {version!r} (expected {STATE_VERSION})"
            )
        required = ("all_ids", "d_u", "d_al", "d_semi", "k", "per_cycle_b",
                    "max_cycles", "seed", "rng_state")
        for key in required:
            if key not in obj:
                raise StateFileError(f"state file is missing field {key!r}")
        try:
            rng_state = obj["rng_state"]
            if not isinstance(rng_state, dict) or rng_state.get("bit_generator") != "PCG64":
                raise StateFileError("field 'rng_state' must be a PCG64 generator state")
            state = cls(
                all_ids=tuple(str(i) for i in obj["all_ids"]),
                d_u=frozenset(str(i) for i in obj["d_u"]),
                d_al=frozenset(str(i) for i in obj["d_al"]),
                d_semi=frozenset(str(i) for i in obj["d_semi"]),
                k=int(obj["k"]),
                per_cycle_b=int(obj["per_cycle_b"]),
                max_cycles=int(obj["max_cycles"]),
                seed=int(obj["seed"]),
                rng_state=rng_state,
                config=dict(obj.get("config") or {}),
                history=tuple(CycleRecord.from_json(r) for r in obj.get("history", [])),
            )
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, StateFileError):
                raise
            raise StateFileError(f"malformed state file: {exc}") from exc
        validate_state(state)
        return state


def validate_state(state: PoolState) -> None:
    universe = set(state.all_ids)
    if len(universe) != len(state.all_ids):
        raise StateFileError("field 'all_ids' contains duplicates")
    if state.d_u & state.d_al:
        overlap = sorted(state.d_u & state.d_al)[:5]
        raise StateFileError(f"fields 'd_u' and 'd_al' overlap: {overlap}")
    if state.d_u | state.d_al != universe:
        raise StateFileError("fields 'd_u' and 'd_al' do not partition 'all_ids'")
    if not state.d_semi <= state.d_u:
        raise StateFileError("field 'd_semi' is not contained in 'd_u'")
    if state.k < 0:
        raise StateFileError("field 'k' must be >= 0")
    if state.per_cycle_b < 1 or state.max_cycles < 1:
        raise StateFileError("fields 'per_cycle_b' and 'max_cycles' must be >= 1")


def init_pools(
    image_ids: Iterable[str],
    per_cycle_b: int = DEFAULT_PER_CYCLE,
    max_cycles: int = DEFAULT_BUDGET // DEFAULT_PER_CYCLE,
    seed: int = 0,
    config: Optional[Mapping] = None,
) -> PoolState:
    raw = [str(i) for i in image_ids]
    if not raw:
        raise ValueError("cannot start a loop with an empty image pool")
    ids = sorted(set(raw))
    if len(ids) != len(raw):
        warnings.warn(f"dropped {len(raw) - len(ids)} duplicate image ids", stacklevel=2)
    if per_cycle_b < 1:
        raise ValueError(f"per-cycle selection size must be >= 1, got {per_cycle_b}")
    if max_cycles < 1:
        raise ValueError(f"cycle count must be >= 1, got {max_cycles}")
    if per_cycle_b > len(ids):
        raise ValueError(f"per-cycle selection size {per_cycle_b} exceeds pool size {len(ids)}")
    if per_cycle_b * max_cycles > len(ids):
        warnings.warn(
            f"budget {per_cycle_b * max_cycles} exceeds pool size {len(ids)}; "
            "the loop will stop early",
            stacklevel=2,
        )
    bitgen = np.random.PCG64(np.random.SeedSequence(seed))
    return PoolState(
        all_ids=tuple(ids),
        d_u=frozenset(ids),
        d_al=frozenset(),
        d_semi=frozenset(),
        k=0,
        per_cycle_b=per_cycle_b,
        max_cycles=max_cycles,
        seed=seed,
        rng_state=bitgen.state,
        config=dict(config or {}),
    )


def manifest(cycle: int, strategy: str, selected, scores: Mapping[str, float]) -> dict:
    return {
        "cycle": cycle,
        "strategy": strategy,
        "selected": list(selected),
        "scores": {i: float(scores[i]) for i in sorted(scores)},
    }


def _draw(state: PoolState, n: int) -> tuple[list[str], dict]:
    rng = state.rng()
    pool = sorted(state.d_u)
    picks = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in picks], rng.bit_generator.state


def cold_start(state: PoolState) -> tuple[dict, PoolState]:
    """Cycle 1: draw ``b`` images uniformly at random into the labeled set."""
    if state.k != 0:
        raise LoopError(f"cold start is only valid at k=0 (k={state.k})")
    selected, rng_state = _draw(state, state.per_cycle_b)
    chosen = frozenset(selected)
    new = replace(
        state,
        d_u=state.d_u - chosen,
        d_al=state.d_al | chosen,
        k=1,
        rng_state=rng_state,
        history=state.history + (CycleRecord(1, "random", tuple(selected)),),
    )
    return manifest(1, "random", selected, {}), new


def _num_classes(predictions: Mapping[str, list[InstancePrediction]]) -> int:
    n = max((len(p.class_probs) for insts in predictions.values() for p in insts), default=0)
    return max(n, 1)


def strategy_scores(
    predictions: Mapping[str, list[InstancePrediction]],
    strategy: str,
    num_classes: Optional[int] = None,
) -> dict[str, float]:
    if strategy == "tsp":
        return {
            i: image_score([instance_score(p.scores) for p in insts])
            for i, insts in predictions.items()
        }
    if strategy == "entropy":
        n = num_classes or _num_classes(predictions)
        return {
            i: entropy_image_score([p.class_probs for p in insts], n)
            for i, insts in predictions.items()
        }
    raise ValueError(f"strategy {strategy!r} has no score; expected one of {STRATEGIES}")


def run_cycle(
    state: PoolState,
    predictions: Mapping[str, list[InstancePrediction]],
    thresholds: GateThresholds = GateThresholds(),
    strategy: str = "tsp",
    beta: float = DEFAULT_BETA,
    gate_rule: str = "all",
    num_classes: Optional[int] = None,
    evaluation: Optional[dict] = None,
) -> tuple[dict, PseudoLabelSet, PoolState, CycleRecord]:
    """One non-initial cycle: rank the pool, label ``b`` images, pseudo-label the rest."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if state.k < 1:
        raise LoopError("run the cold start before the first scored cycle")
    if state.done:
        raise LoopComplete(f"loop finished after {state.k} cycles")
    missing = sorted(state.d_u - set(predictions))
    if missing:
        raise ValueError(f"prediction dump lacks {len(missing)} pool images: {missing}")
    extra = set(predictions) - state.d_u
    if extra:
        warnings.warn(f"ignoring predictions for {len(extra)} images outside the unlabeled pool", stacklevel=2)
    pool_preds = {i: predictions[i] for i in sorted(state.d_u)}

    b = state.per_cycle_b
    if len(state.d_u) < b:
        warnings.warn(
            f"only {len(state.d_u)} images left for a selection of {b}; taking all and stopping",
            stacklevel=2,
        )
        b = len(state.d_u)

    rng_state = state.rng_state
    if strategy == "random":
        scores: dict[str, float] = {}
        selected, rng_state = _draw(state, b)
    else:
        scores = strategy_scores(pool_preds, strategy, num_classes)
        selected = select_most_uncertain(scores, b, higher_is_uncertain=strategy == "entropy")

    chosen = frozenset(selected)
    d_u = state.d_u - chosen
    pseudo = build_pseudo_set({i: pool_preds[i] for i in d_u}, d_u, thresholds, gate_rule)
    cycle = state.k + 1
    record = CycleRecord(
        cycle=cycle,
        strategy=strategy,
        selected=tuple(selected),
        pseudo_count=pseudo.instance_count,
        thresholds=thresholds.to_json(),
        beta=beta,
        evaluation=evaluation,
    )
    new = replace(
        state,
        d_u=d_u,
        d_al=state.d_al | chosen,
        d_semi=frozenset(d_u),
        k=cycle,
        rng_state=rng_state,
        history=state.history + (record,),
    )
    return manifest(cycle, strategy, selected, scores), pseudo, new, record


def save_state(state: PoolState, path) -> None:
    write_atomic(path, dumps(state.to_json()))


def load_state(path) -> PoolState:
    return PoolState.from_json(read_json(path))
