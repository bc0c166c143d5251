# /modules/tcd_forecast/metrics_eval.py
# Displacement metrics (mm, raw space), diversity and multimodal metrics, and
# the best-of-N evaluation protocol that turns a pipeline + test split into an
# EvalReport.

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, Field, field_validator

from . import config as CFG
from .errors import ParameterError, StructuralError
from .sequence_core import (AvailabilityMask, OcclusionPattern, PoseSequence, apply_mask, fit_scale, make_mask,
                            SkeletonSpec)
from .utils import derive_seed

logger = logging.getLogger('tcd_system.eval')

SELECTION_KEYS = ("ADE", "FDE")


def _same_shape(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise StructuralError(f"Shape mismatch: {a.shape} vs {b.shape}")
    return a, b


# ==========================================
# --- DISPLACEMENT METRICS ---
# ==========================================

def de(pred_frame, gt_frame) -> float:
    """Mean over joints of the per-joint Euclidean distance."""
    p, g = _same_shape(pred_frame, gt_frame)
    return float(np.linalg.norm(p - g, axis=-1).mean())


def frame_errors(pred, gt) -> np.ndarray:
    """DE of every frame of a P x J x 3 prediction."""
    p, g = _same_shape(pred, gt)
    return np.linalg.norm(p - g, axis=-1).mean(axis=-1)


def ade(pred, gt) -> float:
    return float(frame_errors(pred, gt).mean())


def fde(pred, gt) -> float:
    return float(frame_errors(pred, gt)[-1])


def apd(samples) -> float:
    """Mean over unordered pairs of the L2 distance between flattened samples."""
    flat = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    n = flat.shape[0]
    if n < 2:
        raise ParameterError(f"APD needs at least 2 samples, got {n}")
    diff = flat[:, None, :] - flat[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    upper = np.triu_indices(n, k=1)
    return float(dist[upper].mean())


def _multimodal_targets(gt_pool, query_last, threshold):
    if not gt_pool:
        raise ParameterError("Multimodal ground-truth pool is empty")
    if not threshold > 0:
        raise ParameterError(f"Multimodal threshold must be positive, got {threshold}")
    query = np.asarray(query_last, dtype=np.float64).reshape(-1)
    targets = [np.asarray(future, dtype=np.float64) for last, future in gt_pool
               if np.linalg.norm(np.asarray(last, dtype=np.float64).reshape(-1) - query) <= threshold]
    if not targets:
        raise ParameterError("No pool member matches the query observation; the pool must contain the query")
    return targets


def _best_sample_mean(samples, targets, metric):
    samples = np.asarray(samples, dtype=np.float64)
    return float(np.mean([min(metric(s, target) for s in samples) for target in targets]))


def mmade(samples, gt_pool, query_obs_last_frame, threshold=CFG.MULTIMODAL_THRESHOLD) -> float:
    """
    Mean, over pool futures whose last observed pose lies within `threshold`
    of the query's, of the best sample's ADE.
    """
    return _best_sample_mean(samples, _multimodal_targets(gt_pool, query_obs_last_frame, threshold), ade)


def mmfde(samples, gt_pool, query_obs_last_frame, threshold=CFG.MULTIMODAL_THRESHOLD) -> float:
    return _best_sample_mean(samples, _multimodal_targets(gt_pool, query_obs_last_frame, threshold), fde)


def repair_ade(repaired, gt, M_obs):
    """Mean per-joint distance over joints that were missing; None when nothing was missing."""
    r, g = _same_shape(repaired, gt)
    bits = M_obs.joint_bits[:r.shape[0]] if isinstance(M_obs, AvailabilityMask) else np.asarray(M_obs)[..., 0]
    if bits.shape != r.shape[:2]:
        raise StructuralError(f"Mask shape {bits.shape} does not match sequence {r.shape[:2]}")
    missing = bits == 0
    if not missing.any():
        return None
    return float(np.linalg.norm(r - g, axis=-1)[missing].mean())


def horizon_to_frame(horizon_ms, fps, P) -> int:
    """1-based future frame index round(horizon * fps / 1000)."""
    frame = int(np.floor(horizon_ms * fps / 1000.0 + 0.5))
    if not 1 <= frame <= P:
        raise ParameterError(f"Horizon {horizon_ms} ms maps to frame {frame}, outside 1..{P}")
    return frame


def select_best(samples, gt, key=CFG.SELECTION_KEY) -> int:
    if key not in SELECTION_KEYS:
        raise ParameterError(f"Unknown selection key '{key}' (expected one of {SELECTION_KEYS})")
    metric = ade if key == "ADE" else fde
    return int(np.argmin([metric(s, gt) for s in samples]))


# ==========================================
# --- REPORT ---
# ==========================================

class EvalReport(BaseModel):
    protocol: dict
    regime: dict
    metrics: dict[str, dict[str, float]]
    n_samples: int
    seeds: list[int]
    n_sequences: int = 0
    units: str = "mm"
    groups: dict[str, "EvalReport"] = Field(default_factory=dict)

    @field_validator("metrics")
    @classmethod
    def _nonnegative_sorted(cls, metrics):
        ordered = {}
        for name, by_horizon in metrics.items():
            for horizon, value in by_horizon.items():
                if not value >= 0:
                    raise ValueError(f"Metric {name}@{horizon} is negative or NaN: {value}")
            ordered[name] = dict(sorted(by_horizon.items(), key=lambda kv: int(kv[0])))
        return ordered

    def value(self, name, horizon_ms=None):
        by_horizon = self.metrics[name]
        if horizon_ms is None:
            return by_horizon[max(by_horizon, key=int)]
        return by_horizon[str(int(horizon_ms))]


EvalReport.model_rebuild()


# ==========================================
# --- EVALUATION PROTOCOL ---
# ==========================================

@dataclass(frozen=True)
class EvalProtocol:
    n_samples: int = CFG.DETERMINISTIC_SAMPLES
    horizons_ms: tuple = tuple(CFG.HORIZONS_MS)
    seed: int = 0
    selection_key: str = CFG.SELECTION_KEY
    threshold: float = CFG.MULTIMODAL_THRESHOLD
    workers: int = 1
    scale: float = None     # root-relative normalization for multimodal matching; corpus std when None

    def __post_init__(self):
        if self.n_samples < 1:
            raise ParameterError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.selection_key not in SELECTION_KEYS:
            raise ParameterError(f"Unknown selection key '{self.selection_key}'")
        if self.workers < 1:
            raise ParameterError(f"workers must be >= 1, got {self.workers}")
        object.__setattr__(self, 'horizons_ms', tuple(sorted(int(h) for h in self.horizons_ms)))


@dataclass(frozen=True, eq=False)
class EvalItem:
    """Ground truth (O+P frames), its availability mask and the corrupted input."""
    gt: PoseSequence
    mask: AvailabilityMask
    observed: PoseSequence
    meta: dict = field(default_factory=dict)


def prepare_test_set(sequences, pattern: OcclusionPattern, O, P, seed, skeleton: SkeletonSpec = None):
    """Draws one mask per sequence and applies it (with the regime's noise) to the observation."""
    items = []
    for i, gt in enumerate(sequences):
        if gt.frames < O + P:
            raise StructuralError(f"Test sequence {i} has {gt.frames} frames, needs O+P={O + P}")
        gt = gt.with_coords(gt.coords[:O + P], observation_len=O)
        skel = skeleton or gt.skeleton or SkeletonSpec.default()
        mask = make_mask(pattern, O, P, skel, derive_seed(seed, "mask", i))
        observed = apply_mask(gt, mask, pattern.noise_std, derive_seed(seed, "apply", i))
        items.append(EvalItem(gt=gt, mask=mask, observed=observed, meta={"index": i}))
    return items


def _last_pose_key(coords, O, scale):
    last = np.asarray(coords[O - 1], dtype=np.float64)
    return (last - last[CFG.ROOT_JOINT]) / scale


def _evaluate_one(pipeline, item: EvalItem, index, protocol: EvalProtocol, frames, pool, pool_scale):
    O, P = pipeline.O, pipeline.P
    seed = derive_seed(protocol.seed, "sequence", index)
    result = pipeline.run(item.observed, item.mask, seed, protocol.n_samples)
    samples = np.asarray(result.samples, dtype=np.float64)
    future = np.asarray(item.gt.coords[O:O + P])
    if samples.shape[1:] != future.shape:
        raise StructuralError(f"Pipeline produced {samples.shape[1:]} futures, expected {future.shape}")

    best = samples[select_best(samples, future, protocol.selection_key)]
    errors = frame_errors(best, future)
    record = {
        "ADE": float(errors.mean()),
        "FDE": {h: float(errors[f - 1]) for h, f in frames.items()},
        "MMADE": mmade(samples, pool, _last_pose_key(item.gt.coords, O, pool_scale), protocol.threshold),
        "MMFDE": mmfde(samples, pool, _last_pose_key(item.gt.coords, O, pool_scale), protocol.threshold),
        "APD": apd(samples) if len(samples) >= 2 else None,
        "repair_ADE": None,
        "meta": item.meta,
    }
    if result.repaired is not None:
        record["repair_ADE"] = repair_ade(result.repaired, item.gt.coords[:O], item.mask.observation())
    return record


def _aggregate(records, full_ms, protocol, pipeline, regime, seeds) -> EvalReport:
    metrics = {
        "ADE": {str(full_ms): float(np.mean([r["ADE"] for r in records]))},
        "FDE": {str(h): float(np.mean([r["FDE"][h] for r in records])) for h in protocol.horizons_ms},
        "MMADE": {str(full_ms): float(np.mean([r["MMADE"] for r in records]))},
        "MMFDE": {str(full_ms): float(np.mean([r["MMFDE"] for r in records]))},
    }
    for name in ("APD", "repair_ADE"):
        values = [r[name] for r in records if r[name] is not None]
        if values:
            metrics[name] = {str(full_ms): float(np.mean(values))}
    return EvalReport(
        protocol={
            "pipeline": pipeline.spec, "n_samples": protocol.n_samples,
            "horizons_ms": list(protocol.horizons_ms), "selection_key": protocol.selection_key,
            "threshold": protocol.threshold, "O": pipeline.O, "P": pipeline.P,
        },
        regime=regime, metrics=metrics, n_samples=protocol.n_samples, seeds=seeds, n_sequences=len(records))


def evaluate(pipeline, test_set, protocol: EvalProtocol, regime: dict = None, group_by=None) -> EvalReport:
    """
    Best-of-N evaluation. Sequences fan out over `protocol.workers` threads and
    reduce in sequence order, so the report does not depend on the worker count.
    `group_by(item) -> str` adds per-group reports.
    """
    if not test_set:
        raise ParameterError("Test set is empty")
    O, P = pipeline.O, pipeline.P
    fps = test_set[0].gt.fps
    frames = {h: horizon_to_frame(h, fps, P) for h in protocol.horizons_ms}
    full_ms = int(np.floor(P * 1000.0 / fps + 0.5))

    pool_scale = protocol.scale or fit_scale([item.gt for item in test_set], O, CFG.ROOT_JOINT)
    pool = [(_last_pose_key(item.gt.coords, O, pool_scale), np.asarray(item.gt.coords[O:O + P]))
            for item in test_set]

    def run(indexed):
        i, item = indexed
        record = _evaluate_one(pipeline, item, i, protocol, frames, pool, pool_scale)
        if (i + 1) % 50 == 0:
            logger.info(f"Evaluated {i + 1}/{len(test_set)} sequences with '{pipeline.spec}'")
        return record

    if protocol.workers == 1:
        records = [run(pair) for pair in enumerate(test_set)]
    else:
        with ThreadPoolExecutor(max_workers=protocol.workers) as pool_exec:
            records = list(pool_exec.map(run, enumerate(test_set)))

    regime = regime or {}
    seeds = [protocol.seed]
    report = _aggregate(records, full_ms, protocol, pipeline, regime, seeds)
    if group_by is not None:
        keys = [str(group_by(item)) for item in test_set]
        report.groups = {
            key: _aggregate([r for r, k in zip(records, keys) if k == key], full_ms, protocol, pipeline, regime, seeds)
            for key in sorted(set(keys))
        }
    logger.info(f"'{pipeline.spec}': ADE {report.value('ADE'):.2f} mm over {len(records)} sequences")
    return report
