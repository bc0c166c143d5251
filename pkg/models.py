# /models.py
# Run configuration documents. One RunConfig drives a whole experiment; every
# CLI subcommand reads it, and `--set dotted.path=value` overrides single keys.

import os
import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from modules.tcd_forecast import config as CFG
from modules.tcd_forecast.cascade_pipeline import CascadeConfig, short_horizon
from modules.tcd_forecast.denoiser_net import DenoiserConfig
from modules.tcd_forecast.errors import ConfigError
from modules.tcd_forecast.metrics_eval import EvalProtocol
from modules.tcd_forecast.sequence_core import OcclusionPattern, PATTERN_KINDS
from modules.tcd_forecast.trainer import TrainConfig
from modules.tcd_forecast.utils import derive_seed


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --- 1. DATA (synthetic gait corpus) ---
class DataConfig(_Section):
    n_train: int = Field(2000, ge=1)
    n_test: int = Field(200, ge=1)
    O: int = Field(CFG.OBSERVATION_LEN, ge=1)
    P: int = Field(CFG.PREDICTION_LEN, ge=1)
    fps: float = Field(CFG.FPS, gt=0)
    # Static corpus: zero amplitudes and zero speed (every frame equals frame 0)
    static: bool = False
    train_dir: str = os.path.join(CFG.DATA_DIR, 'corpus', 'train')
    test_dir: str = os.path.join(CFG.DATA_DIR, 'corpus', 'test')
    seed: Optional[int] = None


# --- 2. OCCLUSION ---
class MaskConfig(_Section):
    kind: Literal[PATTERN_KINDS] = "full"
    prob: Optional[float] = Field(None, ge=0.0, le=1.0)
    groups: Optional[list[str]] = None
    joints: Optional[list[int]] = None
    consecutive_frac: Optional[float] = Field(None, ge=0.0, le=1.0)
    frac: Optional[float] = Field(None, ge=0.0, le=1.0)
    consecutive: bool = True
    noise_std: float = Field(0.0, ge=0.0)    # mm
    seed: Optional[int] = None

    def to_pattern(self) -> OcclusionPattern:
        return OcclusionPattern.preset(
            self.kind, prob=self.prob,
            groups=tuple(self.groups) if self.groups is not None else None,
            joints=tuple(self.joints) if self.joints is not None else None,
            consecutive_frac=self.consecutive_frac, frac=self.frac, consecutive=self.consecutive,
            noise_std=self.noise_std or None)

    def descriptor(self) -> dict:
        return {k: v for k, v in self.model_dump().items() if v is not None and k != "seed"}


# --- 3. DIFFUSION ---
class ScheduleConfig(_Section):
    kind: Literal["cosine", "quadratic", "linear"] = CFG.SCHEDULE_KIND
    T: int = Field(CFG.DIFFUSION_STEPS, ge=1)


class DenoiserSection(_Section):
    residual_layers: int = Field(CFG.DESK_DENOISER["residual_layers"], ge=1)
    channels: int = Field(CFG.DESK_DENOISER["channels"], ge=1)
    heads: int = Field(CFG.DESK_DENOISER["heads"], ge=1)
    feedforward_mult: int = Field(CFG.FEEDFORWARD_MULT, ge=1)
    step_embed_dim: int = Field(CFG.STEP_EMBED_DIM, ge=2)
    temporal: bool = True
    spatial: bool = True
    precision: Literal["float32", "float64"] = CFG.PRECISION

    @model_validator(mode="after")
    def _heads_divide_channels(self):
        if self.channels % self.heads:
            raise ValueError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        return self

    def to_core(self, frames, joints, T, refine=False) -> DenoiserConfig:
        return DenoiserConfig(frames=frames, joints=joints, diffusion_steps=T, refine=refine,
                              **self.model_dump())


# --- 4. TRAINING ---
class TrainSection(_Section):
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(CFG.BATCH_SIZE, ge=1)
    learning_rate: float = Field(CFG.LEARNING_RATE, ge=0.0)
    decay_factor: float = Field(CFG.DECAY_FACTOR, gt=0.0, lt=1.0)
    decay_milestones: list[float] = Field(default_factory=lambda: list(CFG.DECAY_MILESTONES))
    seed: Optional[int] = None


# --- 5. CASCADE ---
class CheckpointPaths(_Section):
    short: Optional[str] = None
    long: Optional[str] = None
    pre: Optional[str] = None
    refine: Optional[str] = None
    single: Optional[str] = None


class CascadeSection(_Section):
    O: Optional[int] = Field(None, ge=1)
    P: Optional[int] = Field(None, ge=1)
    K: Optional[int] = Field(None, ge=1)
    short_samples_to_average: int = Field(CFG.SHORT_SAMPLES_TO_AVERAGE, ge=1)
    checkpoints: CheckpointPaths = Field(default_factory=CheckpointPaths)
    seed: Optional[int] = None


# --- 6. EVALUATION ---
class EvalSection(_Section):
    pipeline: str = "tcd"
    # Unset: best-of-STOCHASTIC_SAMPLES for stochastic pipelines, best-of-DETERMINISTIC_SAMPLES otherwise
    n_samples: Optional[int] = Field(None, ge=1)
    horizons_ms: list[int] = Field(default_factory=lambda: list(CFG.HORIZONS_MS))
    selection_key: Literal["ADE", "FDE"] = CFG.SELECTION_KEY
    threshold: float = Field(CFG.MULTIMODAL_THRESHOLD, gt=0.0)
    workers: int = Field(1, ge=1)
    # Test-time occlusion regime; the training mask section applies when absent
    regime: Optional[MaskConfig] = None
    seed: Optional[int] = None


# --- 7. RUN DOCUMENT ---
class RunConfig(_Section):
    seed: Optional[int] = None
    data: DataConfig = Field(default_factory=DataConfig)
    mask: MaskConfig = Field(default_factory=MaskConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    denoiser: DenoiserSection = Field(default_factory=DenoiserSection)
    train: TrainSection = Field(default_factory=TrainSection)
    cascade: CascadeSection = Field(default_factory=CascadeSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    @model_validator(mode="after")
    def _cascade_matches_data(self):
        c = self.cascade
        if c.O is None:
            c.O = self.data.O
        if c.P is None:
            c.P = self.data.P
        if (c.O, c.P) != (self.data.O, self.data.P):
            raise ValueError(f"cascade O/P ({c.O}, {c.P}) differ from data O/P ({self.data.O}, {self.data.P})")
        if c.K is None:
            c.K = short_horizon(c.P)
        if not 1 <= c.K < c.P:
            raise ValueError(f"cascade.K must satisfy 1 <= K < P, got K={c.K}, P={c.P}")
        return self

    # --- HELPERS ---
    def section_seed(self, name) -> int:
        """Explicit section seed, else derived from the global seed and the section name."""
        explicit = getattr(getattr(self, name), "seed", None)
        if explicit is not None:
            return explicit
        if self.seed is None:
            raise ConfigError("No global seed configured", path="seed")
        return derive_seed(self.seed, name)

    def cascade_config(self) -> CascadeConfig:
        c = self.cascade
        return CascadeConfig(O=c.O, P=c.P, K=c.K, short_samples_to_average=c.short_samples_to_average,
                             seed=self.section_seed("cascade"))

    def train_config(self, role) -> TrainConfig:
        t = self.train
        return TrainConfig(
            role=role, epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
            decay_factor=t.decay_factor, decay_milestones=tuple(t.decay_milestones),
            seed=derive_seed(self.section_seed("train"), role), mask_pattern=self.mask.to_pattern(),
            schedule_kind=self.schedule.kind, T=self.schedule.T, O=self.data.O, P=self.data.P, K=self.cascade.K)

    def eval_regime(self) -> MaskConfig:
        return self.eval.regime if self.eval.regime is not None else self.mask

    def sample_count(self, stochastic: bool) -> int:
        if self.eval.n_samples is not None:
            return self.eval.n_samples
        return CFG.STOCHASTIC_SAMPLES if stochastic else CFG.DETERMINISTIC_SAMPLES

    def eval_protocol(self, stochastic: bool = False) -> EvalProtocol:
        e = self.eval
        return EvalProtocol(n_samples=self.sample_count(stochastic), horizons_ms=tuple(e.horizons_ms),
                            seed=self.section_seed("eval"), selection_key=e.selection_key, threshold=e.threshold,
                            workers=e.workers)


# --- LOADING ---

def _parse_value(raw):
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def apply_overrides(doc: dict, overrides) -> dict:
    """Applies 'dotted.path=value' strings; values parse as JSON, else stay strings."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"Override '{item}' is not of the form dotted.path=value", path=item)
        dotted, raw = item.split("=", 1)
        keys = [k for k in dotted.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"Override '{item}' has an empty path", path=item)
        node = doc
        for key in keys[:-1]:
            child = node.get(key)
            if child is None:
                child = node[key] = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"Cannot descend into non-section key '{key}'", path=dotted)
            node = child
        node[keys[-1]] = _parse_value(raw)
    return doc


def load_run_config(path=None, overrides=None, environ=None) -> RunConfig:
    """
    Reads the JSON run document (optional), applies overrides and resolves
    the global seed: document value, else $TCD_SEED, else ConfigError.
    """
    environ = os.environ if environ is None else environ
    doc = {}
    if path is not None:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                doc = json.load(f)
        except OSError as e:
            raise ConfigError(f"Cannot read config file: {e.strerror}", path=path)
        except ValueError as e:
            raise ConfigError(f"Config file is not valid JSON: {e}", path=path)
        if not isinstance(doc, dict):
            raise ConfigError("Config document must be a JSON object", path=path)
    doc = apply_overrides(doc, overrides)

    if doc.get("seed") is None and environ.get(CFG.SEED_ENV_VAR):
        try:
            doc["seed"] = int(environ[CFG.SEED_ENV_VAR])
        except ValueError:
            raise ConfigError(f"{CFG.SEED_ENV_VAR} must be an integer, got '{environ[CFG.SEED_ENV_VAR]}'",
                              path=CFG.SEED_ENV_VAR)

    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as e:
        first = e.errors()[0]
        dotted = ".".join(str(p) for p in first["loc"]) or "<root>"
        details = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Invalid run config: {details}", path=dotted)

    if cfg.seed is None:
        raise ConfigError(f"No seed: set 'seed' in the config or the {CFG.SEED_ENV_VAR} environment variable",
                          path="seed")
    return cfg
