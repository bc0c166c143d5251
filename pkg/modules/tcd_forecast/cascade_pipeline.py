# /modules/tcd_forecast/cascade_pipeline.py
# Inference products built from trained blocks:
#   * TCD two-stage forecasting (short block -> averaged -> long block)
#   * one-level forecasting ("single" block)
#   * pre-processing repair of an occluded observation
#   * post-processing refinement of any predictor's output
# plus the predictor plug-ins (Zero-Vel, exec:<command>) and the
# "[pre+]<base>[+refine]" pipeline composition.

import os
import shlex
import logging
import tempfile
import subprocess
from dataclasses import dataclass

import numpy as np
import torch

from . import config as CFG
from .diffusion_engine import chain_seeds, sample_chains
from .errors import ParameterError, StructuralError, ModeError, ConfigError, PredictorError, TCDError
from .schedule import NoiseSchedule, make_schedule
from .sequence_core import (AvailabilityMask, NormalizationState, PoseSequence, ROLE_FULL, ROLE_OBSERVATION,
                            denormalize, normalize, observation_shift)
from .sequence_io import read_sequence, write_sequence
from .trainer import Checkpoint, load_checkpoint, canvas_for_role
from .utils import as_array, derive_seed

logger = logging.getLogger('tcd_system.cascade')


def short_horizon(P, ratio=CFG.SHORT_HORIZON_RATIO) -> int:
    """K = round(ratio * P), at least 1."""
    return max(1, int(np.floor(ratio * P + 0.5)))


@dataclass(frozen=True)
class CascadeConfig:
    O: int = CFG.OBSERVATION_LEN
    P: int = CFG.PREDICTION_LEN
    K: int = None
    short_samples_to_average: int = CFG.SHORT_SAMPLES_TO_AVERAGE
    seed: int = 0

    def __post_init__(self):
        if self.O < 1 or self.P < 1:
            raise ParameterError(f"O and P must be >= 1, got O={self.O}, P={self.P}")
        if self.K is None:
            object.__setattr__(self, 'K', short_horizon(self.P))
        if not 1 <= self.K < self.P:
            raise ParameterError(f"Short horizon K must satisfy 1 <= K < P, got K={self.K}, P={self.P}")
        if self.short_samples_to_average < 1:
            raise ParameterError(f"short_samples_to_average must be >= 1, got {self.short_samples_to_average}")


# ==========================================
# --- DIFFUSION BLOCKS ---
# ==========================================

class DiffusionBlock:
    """
    A denoiser bound to its schedule, role and normalization scale.
    Canvases handed to `sample` are in normalized space.
    """

    def __init__(self, denoiser, schedule: NoiseSchedule, role, scale=1.0, frames=None, checkpoint=None, source=None):
        if not scale > 0:
            raise ParameterError(f"Block scale must be positive, got {scale}")
        self.denoiser = denoiser
        self.schedule = schedule
        self.role = role
        self.scale = float(scale)
        self.frames = frames
        self.checkpoint = checkpoint
        self.source = source

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, source=None) -> "DiffusionBlock":
        tc = ck.train_config
        frames, _ = canvas_for_role(tc.role, tc.O, tc.P, tc.K)
        return cls(ck.build_denoiser(), make_schedule(tc.schedule_kind, tc.T), tc.role,
                   scale=ck.scale, frames=frames, checkpoint=ck, source=source)

    @classmethod
    def from_path(cls, path) -> "DiffusionBlock":
        return cls.from_checkpoint(load_checkpoint(path), source=path)

    def require_role(self, *roles):
        if self.role not in roles:
            raise ModeError(f"Block trained as '{self.role}' cannot serve as {' / '.join(roles)} block",
                            path=self.source or f"cascade.checkpoints.{roles[0]}")

    def sample(self, canvas, keep, seed, n=1, hint=None) -> torch.Tensor:
        canvas = torch.as_tensor(canvas, dtype=torch.float64)
        if self.frames is not None and canvas.shape[0] != self.frames:
            raise StructuralError(
                f"'{self.role}' block expects a {self.frames}-frame canvas, got {canvas.shape[0]} frames",
                path=self.source or f"cascade.checkpoints.{self.role}")
        return sample_chains(self.denoiser, canvas, torch.as_tensor(keep), self.schedule,
                             chain_seeds(seed, n), hint=hint)


# ==========================================
# --- NORMALIZED CANVAS HELPERS ---
# ==========================================

def _observation_parts(obs: PoseSequence, M, O):
    """(raw observation O x J x 3, boolean observation mask O x J x 3)."""
    coords = np.asarray(obs.coords[:O], dtype=np.float64)
    if coords.shape[0] != O:
        raise StructuralError(f"Observation has {coords.shape[0]} frames, expected O={O}")
    if M is None:
        return coords, np.ones(coords.shape, dtype=bool)
    bits = M.as_bool()
    if bits[O:].any():
        raise ParameterError("Mask marks future frames as observed")
    if bits.shape[1:] != coords.shape[1:] or bits.shape[0] < O:
        raise StructuralError(f"Mask shape {bits.shape} does not match observation {coords.shape}")
    return coords, bits[:O]


def _state_for(coords, keep, block: DiffusionBlock) -> NormalizationState:
    mask = AvailabilityMask(keep.astype(np.uint8), keep.shape[0])
    return NormalizationState(CFG.ROOT_JOINT, observation_shift(coords, mask, keep.shape[0], CFG.ROOT_JOINT),
                              block.scale)


# ==========================================
# --- TCD CASCADE ---
# ==========================================

@dataclass(frozen=True, eq=False)
class CascadeOutput:
    samples: np.ndarray      # n x (O+P) x J x 3, raw space
    stage1: np.ndarray       # (O+K) x J x 3, raw space (averaged short-block output)


def tcd_sample(obs: PoseSequence, M: AvailabilityMask, cfg: CascadeConfig, short: DiffusionBlock,
               long: DiffusionBlock, seed, n_samples=1) -> CascadeOutput:
    short.require_role("short")
    long.require_role("long")
    O, P, K = cfg.O, cfg.P, cfg.K
    raw_obs, keep_obs = _observation_parts(obs, M, O)
    J = raw_obs.shape[1]
    state = _state_for(raw_obs, keep_obs, short)

    # Stage 1: occluded observation + K noise frames, averaged over several chains.
    canvas1 = np.zeros((O + K, J, 3))
    canvas1[:O] = normalize(raw_obs, state)
    keep1 = np.zeros(canvas1.shape, dtype=bool)
    keep1[:O] = keep_obs
    keep1_t = torch.as_tensor(keep1)
    canvas1_t = torch.as_tensor(canvas1)
    draws = short.sample(canvas1_t, keep1_t, derive_seed(seed, "short"), n=cfg.short_samples_to_average)
    average = torch.where(keep1_t, canvas1_t, draws.mean(dim=0))
    logger.debug(f"Stage 1 averaged {cfg.short_samples_to_average} short-block samples")

    # Stage 2: first O+K frames fixed to the stage-1 average.
    canvas2 = torch.zeros((O + P, J, 3), dtype=torch.float64)
    canvas2[:O + K] = average
    keep2 = torch.zeros(canvas2.shape, dtype=torch.bool)
    keep2[:O + K] = True
    futures = long.sample(canvas2, keep2, derive_seed(seed, "long"), n=n_samples)

    samples = denormalize(as_array(futures), state)
    stage1 = denormalize(as_array(average), state)
    samples[:, :O] = np.where(keep_obs, raw_obs, samples[:, :O])
    stage1[:O] = np.where(keep_obs, raw_obs, stage1[:O])
    samples[:, O:O + K] = stage1[O:]
    return CascadeOutput(samples=samples, stage1=stage1)


def tcd_predict(obs: PoseSequence, M: AvailabilityMask, cfg: CascadeConfig, short: DiffusionBlock,
                long: DiffusionBlock, seed=None) -> PoseSequence:
    """One TCD forecast: (O+P)-frame sequence with repaired observation and future."""
    seed = cfg.seed if seed is None else seed
    out = tcd_sample(obs, M, cfg, short, long, seed, n_samples=1)
    return PoseSequence(out.samples[0], fps=obs.fps, role_tag=ROLE_FULL, observation_len=cfg.O,
                        skeleton=obs.skeleton)


def one_level_sample(obs: PoseSequence, M: AvailabilityMask, O, P, block: DiffusionBlock, seed,
                     n_samples=1) -> np.ndarray:
    """Single (O+P)-frame block predicting all P frames at once: n x (O+P) x J x 3."""
    block.require_role("single")
    raw_obs, keep_obs = _observation_parts(obs, M, O)
    state = _state_for(raw_obs, keep_obs, block)
    canvas = np.zeros((O + P,) + raw_obs.shape[1:])
    canvas[:O] = normalize(raw_obs, state)
    keep = np.zeros(canvas.shape, dtype=bool)
    keep[:O] = keep_obs
    samples = denormalize(as_array(block.sample(canvas, keep, derive_seed(seed, "single"), n=n_samples)), state)
    samples[:, :O] = np.where(keep_obs, raw_obs, samples[:, :O])
    return samples


# ==========================================
# --- REPAIR & REFINE ---
# ==========================================

def preprocess_repair(obs_imperfect: PoseSequence, M_obs: AvailabilityMask, block: DiffusionBlock,
                      seed=0) -> PoseSequence:
    """Imputes occluded observation joints with the O-frame pre block; observed entries pass through."""
    O = M_obs.observation_len
    raw_obs, keep = _observation_parts(obs_imperfect, M_obs, O)
    if keep.all():
        return obs_imperfect
    block.require_role("pre")
    state = _state_for(raw_obs, keep, block)
    repaired = denormalize(as_array(block.sample(normalize(raw_obs, state), keep, derive_seed(seed, "pre"))[0]), state)
    repaired = np.where(keep, raw_obs, repaired)
    return PoseSequence(repaired, fps=obs_imperfect.fps, role_tag=ROLE_OBSERVATION, observation_len=O,
                        skeleton=obs_imperfect.skeleton)


def zero_vel_predict(obs: PoseSequence, P: int) -> PoseSequence:
    """Repeats the last observed pose for all P future frames."""
    last = obs.coords[-1]
    return PoseSequence(np.repeat(last[None], P, axis=0), fps=obs.fps, skeleton=obs.skeleton)


def postprocess_refine(obs_repaired: PoseSequence, initial_pred: PoseSequence, block: DiffusionBlock, seed=0,
                       M_obs: AvailabilityMask = None, n_samples=1):
    """
    Refines a P-frame prediction with the refine-trained block. The prediction
    rides along as a conditioning hint; the future stays unavailable.
    Returns a PoseSequence, or an n x P x J x 3 array when n_samples > 1.
    """
    block.require_role("refine")
    O = obs_repaired.frames
    P = initial_pred.frames
    raw_obs, keep_obs = _observation_parts(obs_repaired, M_obs, O)
    if initial_pred.joints != raw_obs.shape[1]:
        raise StructuralError(f"Prediction has {initial_pred.joints} joints, observation {raw_obs.shape[1]}")
    state = _state_for(raw_obs, keep_obs, block)

    canvas = np.zeros((O + P,) + raw_obs.shape[1:])
    canvas[:O] = normalize(raw_obs, state)
    keep = np.zeros(canvas.shape, dtype=bool)
    keep[:O] = keep_obs
    hint = np.zeros(canvas.shape[:2] + (4,))
    hint[O:, :, :3] = normalize(np.asarray(initial_pred.coords), state)
    hint[O:, :, 3] = 1.0
    samples = block.sample(canvas, keep, derive_seed(seed, "refine"), n=n_samples,
                           hint=torch.as_tensor(hint))
    futures = denormalize(as_array(samples[:, O:]), state)
    if n_samples > 1:
        return futures
    return PoseSequence(futures[0], fps=obs_repaired.fps, skeleton=obs_repaired.skeleton)


# ==========================================
# --- PREDICTORS ---
# ==========================================
# predict(obs, M_obs, P, seed, n_samples) -> n x P x J x 3 raw futures.
# Deterministic predictors return a single sample whatever n_samples asks.

class ZeroVelPredictor:
    name = "zero_vel"
    stochastic = False

    def predict(self, obs, M_obs, P, seed, n_samples=1):
        return zero_vel_predict(obs, P).coords[None].copy()


class TCDPredictor:
    name = "tcd"
    stochastic = True

    def __init__(self, short: DiffusionBlock, long: DiffusionBlock, cfg: CascadeConfig):
        self.short, self.long, self.cfg = short, long, cfg

    def predict(self, obs, M_obs, P, seed, n_samples=1):
        out = tcd_sample(obs, M_obs, self.cfg, self.short, self.long, seed, n_samples)
        return out.samples[:, self.cfg.O:]


class SinglePredictor:
    name = "single"
    stochastic = True

    def __init__(self, block: DiffusionBlock, O: int):
        self.block, self.O = block, O

    def predict(self, obs, M_obs, P, seed, n_samples=1):
        return one_level_sample(obs, M_obs, self.O, P, self.block, seed, n_samples)[:, self.O:]


class ExecPredictor:
    """
    External black box: the observation goes out as PSEQ1 to {input_path},
    the command writes a P-frame PSEQ1 to {output_path}.
    """
    stochastic = False

    def __init__(self, command_template: str, timeout=None):
        if not command_template.strip():
            raise ConfigError("exec: predictor needs a command template", path="pipeline")
        self.command_template = command_template
        self.timeout = timeout
        self.name = f"exec:{command_template}"

    def predict(self, obs, M_obs, P, seed, n_samples=1):
        with tempfile.TemporaryDirectory(prefix="tcd_exec_") as workdir:
            input_path = os.path.join(workdir, "observation" + CFG.PSEQ_EXTENSION)
            output_path = os.path.join(workdir, "prediction" + CFG.PSEQ_EXTENSION)
            write_sequence(input_path, obs)
            try:
                command = self.command_template.format(input_path=input_path, output_path=output_path, P=P)
                argv = shlex.split(command)
            except (KeyError, IndexError, ValueError) as e:
                raise PredictorError(f"Command template does not expand: {type(e).__name__}: {e}", path=self.name)
            logger.info(f"Invoking external predictor: {command}")
            try:
                result = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as e:
                raise PredictorError(f"External predictor failed to run: {e}", path=self.name)
            if result.returncode != 0:
                tail = (result.stderr or "").strip().splitlines()[-3:]
                raise PredictorError(f"External predictor exited with {result.returncode}: {' | '.join(tail)}",
                                     path=self.name)
            try:
                prediction, _ = read_sequence(output_path)
            except TCDError as e:
                raise PredictorError(f"External predictor output unreadable: {e.message}", path=self.name)
        if prediction.coords.shape != (P,) + obs.coords.shape[1:]:
            raise PredictorError(
                f"External predictor returned shape {prediction.coords.shape}, expected {(P,) + obs.coords.shape[1:]}",
                path=self.name)
        return np.asarray(prediction.coords)[None].copy()


# ==========================================
# --- PIPELINE COMPOSITION ---
# ==========================================

@dataclass(frozen=True, eq=False)
class ForecastResult:
    samples: np.ndarray          # n x P x J x 3, raw space
    repaired: np.ndarray = None  # O x J x 3 when a pre block ran


class ForecastPipeline:
    """[pre+]<base>[+refine] around any predictor."""

    def __init__(self, base, O, P, pre: DiffusionBlock = None, refine: DiffusionBlock = None, spec=None):
        if pre is not None:
            pre.require_role("pre")
        if refine is not None:
            refine.require_role("refine")
        self.base, self.O, self.P = base, O, P
        self.pre, self.refine = pre, refine
        self.spec = spec or "+".join(p for p in ("pre" if pre else "", base.name, "refine" if refine else "") if p)

    @property
    def stochastic(self) -> bool:
        return self.base.stochastic or self.refine is not None

    def run(self, obs: PoseSequence, M_obs: AvailabilityMask, seed, n_samples=1) -> ForecastResult:
        observation = obs.observation(self.O) if obs.frames != self.O else obs
        mask = M_obs
        repaired = None
        if self.pre is not None:
            obs_mask = M_obs.observation() if M_obs.frames != self.O else M_obs
            observation = preprocess_repair(observation, obs_mask, self.pre, derive_seed(seed, "pre"))
            repaired = np.asarray(observation.coords).copy()
            mask = None
        predictions = self.base.predict(observation, mask, self.P, derive_seed(seed, "base"), n_samples)
        if self.refine is not None:
            refined = []
            for k in range(n_samples):
                initial = PoseSequence(predictions[k % len(predictions)], fps=obs.fps, skeleton=obs.skeleton)
                out = postprocess_refine(observation, initial, self.refine, derive_seed(seed, "refine", k),
                                         M_obs=mask)
                refined.append(np.asarray(out.coords))
            predictions = np.stack(refined)
        return ForecastResult(samples=predictions, repaired=repaired)


def parse_pipeline_spec(spec: str, blocks: dict, cascade_cfg: CascadeConfig) -> ForecastPipeline:
    """
    Grammar: [pre+]<tcd|single|zero_vel|exec:<command>>[+refine].
    `blocks` maps role -> DiffusionBlock for the roles the pipeline string needs.
    """
    text = spec.strip()
    use_pre = text.startswith("pre+")
    if use_pre:
        text = text[len("pre+"):]
    use_refine = text.endswith("+refine")
    if use_refine:
        text = text[:-len("+refine")]

    def block(role):
        if role not in blocks or blocks[role] is None:
            raise ConfigError(f"Pipeline '{spec}' needs a '{role}' checkpoint", path=f"cascade.checkpoints.{role}")
        return blocks[role]

    if text == "tcd":
        base = TCDPredictor(block("short"), block("long"), cascade_cfg)
    elif text == "single":
        base = SinglePredictor(block("single"), cascade_cfg.O)
    elif text == "zero_vel":
        base = ZeroVelPredictor()
    elif text.startswith("exec:"):
        base = ExecPredictor(text[len("exec:"):])
    else:
        raise ConfigError(f"Unknown pipeline base '{text}' in '{spec}'", path="pipeline")
    return ForecastPipeline(base, cascade_cfg.O, cascade_cfg.P,
                            pre=block("pre") if use_pre else None,
                            refine=block("refine") if use_refine else None, spec=spec)
