"""Seeded synthetic world for closed-loop runs of the active-learning loop.

The "model" is a parametric oracle.  Its quality for class ``c`` grows with
the labeled instance mass of that class::

    quality = theta_max - (theta_max - theta_0) * exp(-mass / tau)

and every noise source (box jitter, mask boundary flips, score calibration
noise, misses, class confusion, false positives) scales with
``1 - quality``.  Pseudo-labels feed back as discounted mass: each
pseudo-labeled instance adds ``beta * pseudo_gain`` to its class when it is
correct and subtracts ``pseudo_penalty`` times that when it is not.  This is
a surrogate for training, not a model of it.

Random draws come from streams keyed by (seed, purpose, cycle, image), so
runs that differ only in strategy share their noise.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .evaluation import map50
from .geometry import (
    DEFAULT_NMS_THRESHOLD,
    Box,
    box_iou,
    mask_iou,
    nms,
    rasterize_box,
    rasterize_ellipse,
)
from .loop import cold_start, init_pools, run_cycle
from .losses import beta_at_cycle
from .pseudo import GateThresholds, PseudoLabelSet
from .records import Annotation, InstancePrediction, PredictionDump, write_json
from .scoring import TripletScores

SIM_STRATEGIES = ("random", "entropy", "tsp", "tsp_ssl")
CORRECT_IOU = 0.5

# stream purposes
_GEN, _POOL, _TEST = 1, 2, 3
_PLACEMENT_ATTEMPTS = 1000


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    width: int = 64
    height: int = 64
    num_classes: int = 3
    class_weights: tuple[float, ...] = (0.7, 0.2, 0.1)
    min_instances: int = 1
    max_instances: int = 3
    shapes: tuple[str, ...] = ("rectangle", "ellipse")
    min_size: int = 8
    max_size: int = 24
    n_train: int = 200
    n_test: int = 100
    theta_0: float = 0.3
    theta_max: float = 0.95
    tau: float = 20.0
    jitter: float = 0.25
    mask_noise: float = 0.5
    calib_noise: float = 0.3
    miss_rate: float = 0.3
    fp_rate: float = 0.5
    confusion: float = 0.4
    pseudo_gain: float = 10.0
    pseudo_penalty: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise SimConfigError("image dimensions must be >= 1")
        if self.num_classes < 1:
            raise SimConfigError("num_classes must be >= 1")
        if len(self.class_weights) != self.num_classes:
            raise SimConfigError("class_weights needs one entry per class")
        if any(w < 0 for w in self.class_weights) or sum(self.class_weights) <= 0:
            raise SimConfigError("class_weights must be non-negative with a positive sum")
        if not 0 <= self.min_instances <= self.max_instances:
            raise SimConfigError("need 0 <= min_instances <= max_instances")
        if not self.shapes or set(self.shapes) - {"rectangle", "ellipse"}:
            raise SimConfigError("shapes must be a non-empty subset of {rectangle, ellipse}")
        if not 2 <= self.min_size <= self.max_size:
            raise SimConfigError("need 2 <= min_size <= max_size")
        if self.max_size > min(self.width, self.height):
            raise SimConfigError(
                f"max_size {self.max_size} does not fit a {self.width}x{self.height} image"
            )
        if self.n_train < 1 or self.n_test < 1:
            raise SimConfigError("n_train and n_test must be >= 1")
        if not 0.0 <= self.theta_0 <= self.theta_max <= 1.0:
            raise SimConfigError("need 0 <= theta_0 <= theta_max <= 1")
        if self.tau <= 0:
            raise SimConfigError("tau must be positive")
        for name in ("mask_noise", "miss_rate", "confusion"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SimConfigError(f"{name} must lie in [0, 1]")
        for name in ("jitter", "calib_noise", "fp_rate", "pseudo_gain", "pseudo_penalty"):
            if getattr(self, name) < 0:
                raise SimConfigError(f"{name} must be non-negative")

    @classmethod
    def from_json(cls, obj: Mapping) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise SimConfigError(f"unknown SimConfig fields: {sorted(unknown)}")
        kw = dict(obj)
        for key in ("class_weights", "shapes"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_json(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(self.class_weights)
        d["shapes"] = list(self.shapes)
        return d

    @classmethod
    def noiseless(cls, **kw) -> "SimConfig":
        base = dict(theta_0=1.0, theta_max=1.0, jitter=0.0, mask_noise=0.0, calib_noise=0.0,
                    miss_rate=0.0, fp_rate=0.0, confusion=0.0)
        base.update(kw)
        return cls(**base)


@dataclass
class GtInstance(Annotation):
    shape: str = "rectangle"


@dataclass
class SyntheticDataset:
    train: dict[str, list[GtInstance]]
    test: dict[str, list[GtInstance]]
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {i: n for n, i in enumerate(list(self.train) + list(self.test))}

    def gt(self, image_id: str) -> list[GtInstance]:
        return self.train[image_id] if image_id in self.train else self.test[image_id]


def _stream(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _rasterize(shape: str, box: Box, h: int, w: int) -> np.ndarray:
    if shape == "ellipse":
        return rasterize_ellipse(box, h, w)
    return rasterize_box(box, h, w)


def _gen_image(cfg: SimConfig, rng: np.random.Generator) -> list[GtInstance]:
    weights = np.asarray(cfg.class_weights, dtype=float)
    weights = weights / weights.sum()
    n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    out = []
    for _ in range(n):
        cls = int(rng.choice(cfg.num_classes, p=weights))
        shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        bw = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        bh = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        # same-class boxes above the NMS threshold would make a perfect model lose a detection
        for _ in range(_PLACEMENT_ATTEMPTS):
            x1 = int(rng.integers(0, cfg.width - bw + 1))
            y1 = int(rng.integers(0, cfg.height - bh + 1))
            box = Box(float(x1), float(y1), float(x1 + bw), float(y1 + bh))
            if all(g.class_id != cls or box_iou(g.box, box) <= DEFAULT_NMS_THRESHOLD for g in out):
                break
        else:
            raise SimConfigError(
                f"cannot place {n} instances without same-class overlap in a "
                f"{cfg.width}x{cfg.height} image"
            )
        mask = _rasterize(shape, box, cfg.height, cfg.width)
        out.append(GtInstance(class_id=cls, box=box, mask=mask, shape=shape))
    return out


def gen_dataset(cfg: SimConfig) -> SyntheticDataset:
    train = {
        f"train_{i:05d}": _gen_image(cfg, _stream(cfg.seed, _GEN, 0, i)) for i in range(cfg.n_train)
    }
    test = {
        f"test_{i:05d}": _gen_image(cfg, _stream(cfg.seed, _GEN, 1, i)) for i in range(cfg.n_test)
    }
    return SyntheticDataset(train, test)


def model_quality(mass: float, cfg: SimConfig) -> float:
    return cfg.theta_max - (cfg.theta_max - cfg.theta_0) * math.exp(-max(mass, 0.0) / cfg.tau)


def is_correct(inst, gts: Sequence[Annotation]) -> bool:
    """Same class as some ground truth and mask IoU >= 0.5 with it."""
    return any(
        g.class_id == inst.class_id and mask_iou(inst.mask, g.mask) >= CORRECT_IOU for g in gts
    )


def class_masses(
    ds: SyntheticDataset,
    labeled_ids: Iterable[str],
    cfg: SimConfig,
    pseudo: Optional[PseudoLabelSet] = None,
    pseudo_weight: float = 0.0,
) -> np.ndarray:
    mass = np.zeros(cfg.num_classes)
    for i in labeled_ids:
        for g in ds.train[i]:
            mass[g.class_id] += 1.0
    if pseudo is not None and pseudo_weight > 0:
        for image_id, anns in pseudo.images.items():
            gts = ds.gt(image_id)
            for a in anns:
                if is_correct(a, gts):
                    mass[a.class_id] += pseudo_weight
                else:
                    mass[a.class_id] -= pseudo_weight * cfg.pseudo_penalty
    return np.maximum(mass, 0.0)


def _shift_or(m: np.ndarray) -> np.ndarray:
    out = m.copy()
    out[1:, :] |= m[:-1, :]
    out[:-1, :] |= m[1:, :]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    return out


def _boundary_band(m: np.ndarray) -> np.ndarray:
    dilated = _shift_or(m)
    eroded = ~_shift_or(~m)
    return dilated & ~eroded


def _clip01(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def _class_probs(pred_class: int, q: float, num_classes: int) -> tuple[float, ...]:
    if num_classes == 1:
        return (1.0,)
    rest = (1.0 - q) / (num_classes - 1)
    return tuple(q if c == pred_class else rest for c in range(num_classes))


def _jitter_box(box: Box, z: np.ndarray, scale: float, cfg: SimConfig) -> Box:
    w, h = box.width, box.height
    x1 = box.x1 + z[0] * scale * w
    y1 = box.y1 + z[1] * scale * h
    x2 = box.x2 + z[2] * scale * w
    y2 = box.y2 + z[3] * scale * h
    x1, x2 = sorted((min(max(x1, 0.0), cfg.width), min(max(x2, 0.0), cfg.width)))
    y1, y2 = sorted((min(max(y1, 0.0), cfg.height), min(max(y2, 0.0), cfg.height)))
    # keep at least one pixel of extent
    if x2 - x1 < 1.0:
        x1 = min(x1, cfg.width - 1.0)
        x2 = x1 + 1.0
    if y2 - y1 < 1.0:
        y1 = min(y1, cfg.height - 1.0)
        y2 = y1 + 1.0
    return Box(x1, y1, x2, y2)


def _predict_instance(g: GtInstance, theta: float, cfg: SimConfig,
                      rng: np.random.Generator) -> Optional[InstancePrediction]:
    noise = 1.0 - theta
    # fixed number of draws per instance keeps streams aligned across qualities
    u_miss = rng.random()
    z_box = rng.standard_normal(4)
    u_flip = rng.random((cfg.height, cfg.width))
    u_conf = rng.random()
    other = int(rng.integers(max(cfg.num_classes - 1, 1)))
    z_score = rng.standard_normal(3)
    if u_miss < cfg.miss_rate * noise:
        return None
    box = _jitter_box(g.box, z_box, cfg.jitter * noise, cfg)
    mask = _rasterize(g.shape, box, cfg.height, cfg.width)
    mask = mask ^ (_boundary_band(mask) & (u_flip < cfg.mask_noise * noise))
    confused = cfg.num_classes > 1 and u_conf < cfg.confusion * noise
    cls = (g.class_id + 1 + other) % cfg.num_classes if confused else g.class_id
    sd = cfg.calib_noise * noise
    q_mean = 0.4 if confused else 0.5 + 0.5 * theta
    q = _clip01(q_mean + sd * z_score[0])
    b = _clip01(box_iou(box, g.box) + sd * z_score[1])
    m = _clip01(mask_iou(mask, g.mask) + sd * z_score[2])
    return InstancePrediction(
        class_id=cls,
        scores=TripletScores(q, b, m),
        box=box,
        mask=mask,
        class_probs=_class_probs(cls, q, cfg.num_classes),
    )


def _false_positive(cfg: SimConfig, thetas: np.ndarray,
                    rng: np.random.Generator) -> InstancePrediction:
    cls = int(rng.integers(cfg.num_classes))
    noise = 1.0 - thetas[cls]
    bw = int(rng.integers(cfg.min_size, cfg.max_size + 1))
    bh = int(rng.integers(cfg.min_size, cfg.max_size + 1))
    x1 = int(rng.integers(0, cfg.width - bw + 1))
    y1 = int(rng.integers(0, cfg.height - bh + 1))
    box = Box(float(x1), float(y1), float(x1 + bw), float(y1 + bh))
    shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
    mask = _rasterize(shape, box, cfg.height, cfg.width)
    base = rng.uniform(0.2, 0.6, size=3)
    z = rng.standard_normal(3) * cfg.calib_noise * noise
    q, b, m = (_clip01(v) for v in base + z)
    return InstancePrediction(
        class_id=cls,
        scores=TripletScores(q, b, m),
        box=box,
        mask=mask,
        class_probs=_class_probs(cls, q, cfg.num_classes),
    )


def predict_image(gts: Sequence[GtInstance], thetas: np.ndarray, cfg: SimConfig,
                  rng_inst: np.random.Generator,
                  rng_fp: np.random.Generator) -> list[InstancePrediction]:
    preds = [p for g in gts
             if (p := _predict_instance(g, float(thetas[g.class_id]), cfg, rng_inst)) is not None]
    n_fp = int(rng_fp.poisson(cfg.fp_rate * (1.0 - float(np.mean(thetas)))))
    preds += [_false_positive(cfg, thetas, rng_fp) for _ in range(n_fp)]
    if len(preds) > 1:
        keep = nms([p.box for p in preds], [p.scores.cls for p in preds], [p.class_id for p in preds])
        preds = [preds[i] for i in keep]
    return preds


def oracle_predict(
    ds: SyntheticDataset,
    labeled_ids: Iterable[str],
    target_ids: Iterable[str],
    cfg: SimConfig,
    seed: int,
    *,
    pseudo: Optional[PseudoLabelSet] = None,
    pseudo_weight: float = 0.0,
    cycle: int = 0,
) -> PredictionDump:
    """Predictions of the model trained on ``labeled_ids`` (plus pseudo mass) for ``target_ids``.

    Test-split images use one noise stream per image for the whole run, so
    test predictions differ between cycles only through model quality.
    """
    thetas = np.array([model_quality(m, cfg) for m in
                       class_masses(ds, labeled_ids, cfg, pseudo, pseudo_weight)])
    images = {}
    for image_id in sorted(target_ids):
        n = ds.index[image_id]
        if image_id in ds.test:
            key = (seed, _TEST, 0, n)
        else:
            key = (seed, _POOL, cycle, n)
        root = np.random.SeedSequence([int(k) for k in key])
        s_inst, s_fp = root.spawn(2)
        images[image_id] = predict_image(ds.gt(image_id), thetas, cfg,
                                         np.random.default_rng(s_inst), np.random.default_rng(s_fp))
    return PredictionDump(cycle, images)


@dataclass
class ExperimentResult:
    strategy: str
    seed: int
    map_curve: list[float]
    labeled: list[int]
    # per scored cycle: (correct, total) over all emitted pool instances and over gated ones
    emitted_precision: list[tuple[int, int]] = field(default_factory=list)
    gated_precision: list[tuple[int, int]] = field(default_factory=list)
    manifests: list[dict] = field(default_factory=list)


def _precision_counts(images: Mapping[str, Sequence], ds: SyntheticDataset) -> tuple[int, int]:
    correct = total = 0
    for image_id, insts in images.items():
        gts = ds.gt(image_id)
        for p in insts:
            total += 1
            correct += is_correct(p, gts)
    return correct, total


def run_experiment(
    cfg: SimConfig,
    strategy: str,
    cycles: int = 6,
    per_cycle: int = 20,
    thresholds: GateThresholds = GateThresholds(),
    beta: float = 0.01,
    beta_schedule: str = "constant",
    seed: Optional[int] = None,
    out_dir: Optional[Path] = None,
    dataset: Optional[SyntheticDataset] = None,
) -> ExperimentResult:
    """Run the loop end to end against the oracle; mAP@0.5 on the test split per cycle.

    ``seed`` drives the loop's generator and the oracle noise; the dataset
    is fixed by ``cfg.seed``.
    """
    if strategy not in SIM_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {SIM_STRATEGIES}")
    seed = cfg.seed if seed is None else seed
    ds = dataset if dataset is not None else gen_dataset(cfg)
    use_ssl = strategy.endswith("_ssl")
    select_with = strategy.removesuffix("_ssl")

    state = init_pools(ds.train, per_cycle, cycles, seed)
    man, state = cold_start(state)
    res = ExperimentResult(strategy, seed, [], [])
    pseudo: Optional[PseudoLabelSet] = None
    pseudo_weight = 0.0

    def evaluate(k: int) -> None:
        dump = oracle_predict(ds, state.d_al, ds.test, cfg, seed,
                              pseudo=pseudo, pseudo_weight=pseudo_weight, cycle=k)
        res.map_curve.append(map50(dump.images, ds.test).map)
        res.labeled.append(len(state.d_al))

    res.manifests.append(man)
    _write_artifacts(out_dir, 1, man, None, None)
    evaluate(1)
    for k in range(2, cycles + 1):
        if state.done:
            break
        dump = oracle_predict(ds, state.d_al, state.d_u, cfg, seed,
                              pseudo=pseudo, pseudo_weight=pseudo_weight, cycle=k)
        beta_k = beta_at_cycle(beta, k, cycles, beta_schedule)
        man, new_pseudo, state, _ = run_cycle(
            state, dump.images, thresholds, select_with, beta=beta_k, num_classes=cfg.num_classes
        )
        res.manifests.append(man)
        res.emitted_precision.append(
            _precision_counts({i: dump.images[i] for i in state.d_semi}, ds))
        res.gated_precision.append(_precision_counts(new_pseudo.images, ds))
        _write_artifacts(out_dir, k, man, dump, new_pseudo)
        if use_ssl:
            pseudo = new_pseudo
            pseudo_weight = beta_k * cfg.pseudo_gain
        evaluate(k)
    return res


def _write_artifacts(out_dir: Optional[Path], k: int, man: dict,
                     dump: Optional[PredictionDump], pseudo: Optional[PseudoLabelSet]) -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    write_json(out_dir / f"cycle_{k:02d}_manifest.json", man)
    if dump is not None:
        write_json(out_dir / f"cycle_{k:02d}_predictions.json", dump.to_json())
    if pseudo is not None:
        write_json(out_dir / f"cycle_{k:02d}_pseudo.json", pseudo.to_json())


@dataclass
class StrategyReport:
    cycles: int
    per_cycle: int
    curves: dict[str, np.ndarray]  # strategy -> (n_seeds, n_cycles)
    labeled: list[int]
    seeds: list[int]
    runs: dict[str, list[ExperimentResult]] = field(default_factory=dict)

    def mean(self, strategy: str) -> np.ndarray:
        return self.curves[strategy].mean(axis=0)

    def std(self, strategy: str) -> np.ndarray:
        return self.curves[strategy].std(axis=0)

    def rows(self) -> list[dict]:
        out = []
        for s in self.curves:
            mean, std = self.mean(s), self.std(s)
            for k in range(self.curves[s].shape[1]):
                out.append({
                    "strategy": s,
                    "cycle": k + 1,
                    "labeled": self.labeled[k],
                    "map_mean": float(mean[k]),
                    "map_std": float(std[k]),
                    "n_seeds": len(self.seeds),
                })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["strategy", "cycle", "labeled", "map_mean", "map_std", "n_seeds"],
                           lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({**r, "map_mean": repr(r["map_mean"]), "map_std": repr(r["map_std"])})
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "cycles": self.cycles,
            "per_cycle": self.per_cycle,
            "seeds": self.seeds,
            "rows": self.rows(),
        }


def strategy_labels(strategies: Sequence[str]) -> list[str]:
    """Unique report labels; a repeated strategy gets ``#2``, ``#3``, ... appended."""
    seen: dict[str, int] = {}
    labels = []
    for s in strategies:
        seen[s] = seen.get(s, 0) + 1
        labels.append(s if seen[s] == 1 else f"{s}#{seen[s]}")
    return labels


def _run_one(args) -> ExperimentResult:
    cfg, strategy, seed, kwargs, out_dir = args
    return run_experiment(cfg, strategy, seed=seed, out_dir=out_dir, **kwargs)


def compare_strategies(
    cfg: SimConfig,
    strategies: Sequence[str],
    seeds: Sequence[int],
    cycles: int = 6,
    per_cycle: int = 20,
    thresholds: GateThresholds = GateThresholds(),
    beta: float = 0.01,
    beta_schedule: str = "constant",
    out_dir: Optional[Path] = None,
    workers: int = 1,
) -> StrategyReport:
    if len(strategies) < 2:
        raise ValueError("compare at least two strategies")
    if not seeds:
        raise ValueError("need at least one seed")
    kwargs = dict(cycles=cycles, per_cycle=per_cycle, thresholds=thresholds,
                  beta=beta, beta_schedule=beta_schedule)
    labels = strategy_labels(strategies)
    jobs = []
    for label, s in zip(labels, strategies):
        for seed in seeds:
            run_dir = None if out_dir is None else Path(out_dir) / label / f"seed_{seed}"
            jobs.append((cfg, s, seed, kwargs, run_dir))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]

    n = len(seeds)
    runs = {label: results[i * n:(i + 1) * n] for i, label in enumerate(labels)}
    curves = {label: np.array([r.map_curve for r in rs]) for label, rs in runs.items()}
    labeled = results[0].labeled
    return StrategyReport(cycles, per_cycle, curves, labeled, list(seeds), runs)
