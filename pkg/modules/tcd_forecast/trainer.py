# /modules/tcd_forecast/trainer.py
# Masked epsilon-objective training for every block role, plus the TCDCKPT1
# checkpoint container.
#
# Block roles and their training canvases (frames, conditioning window):
#   short  : O+K frames, occluded observation (training pattern), K future frames
#   long   : O+P frames, first O+K frames clean and observed
#   pre    : O frames, occluded observation, no future
#   refine : O+P frames, clean observation, future carries the Zero-Vel hint
#   single : O+P frames, occluded observation, all P future frames (one-level ablation)

import os
import json
import struct
import logging
from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import config as CFG
from .denoiser_net import DenoiserConfig, DenoiserNet, TrainingBatch, init_params, loss_and_grad, masked_eps_loss
from .diffusion_engine import diffuse_batch
from .errors import (ParameterError, StructuralError, ModeError, DegenerateBatchError, TrainingDivergedError,
                     CheckpointError, CorruptCheckpointError, CheckpointVersionError)
from .schedule import make_schedule
from .sequence_core import (AvailabilityMask, NormalizationState, OcclusionPattern, SkeletonSpec, fit_scale, make_mask,
                            normalize, observation_shift)
from .utils import derive_seed, make_generator, make_rng

logger = logging.getLogger('tcd_system.trainer')

ROLES = ("short", "long", "pre", "refine", "single")
_LENGTH = struct.Struct('<I')


def canvas_for_role(role, O, P, K):
    """(frames, observation_len) of the canvas a block of this role works on."""
    if role == "short":
        return O + K, O
    if role == "long":
        return O + P, O + K
    if role == "pre":
        return O, O
    if role in ("refine", "single"):
        return O + P, O
    raise ParameterError(f"Unknown block role '{role}' (expected one of {ROLES})")


# ==========================================
# --- CONFIG ---
# ==========================================

@dataclass(frozen=True)
class TrainConfig:
    role: str = "short"
    epochs: int = 10
    batch_size: int = CFG.BATCH_SIZE
    learning_rate: float = CFG.LEARNING_RATE
    decay_factor: float = CFG.DECAY_FACTOR
    decay_milestones: tuple = tuple(CFG.DECAY_MILESTONES)
    seed: int = 0
    mask_pattern: OcclusionPattern = field(default_factory=OcclusionPattern)
    schedule_kind: str = CFG.SCHEDULE_KIND
    T: int = CFG.DIFFUSION_STEPS
    O: int = CFG.OBSERVATION_LEN
    P: int = CFG.PREDICTION_LEN
    K: int = 5

    def __post_init__(self):
        object.__setattr__(self, 'decay_milestones', tuple(float(m) for m in self.decay_milestones))
        if self.role not in ROLES:
            raise ParameterError(f"Unknown block role '{self.role}' (expected one of {ROLES})")
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError(f"epochs must be >= 0 and batch_size >= 1, got {self.epochs}, {self.batch_size}")
        if self.learning_rate < 0:
            raise ParameterError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 < self.decay_factor < 1.0:
            raise ParameterError(f"decay_factor must lie in (0, 1), got {self.decay_factor}")
        ms = self.decay_milestones
        if any(not 0.0 < m < 1.0 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ParameterError(f"decay_milestones must be strictly increasing in (0, 1), got {list(ms)}")
        if self.O < 1 or self.P < 1:
            raise ParameterError(f"O and P must be >= 1, got {self.O}, {self.P}")
        if self.role in ("short", "long") and not 1 <= self.K < self.P:
            raise ParameterError(f"Short horizon K must satisfy 1 <= K < P, got K={self.K}, P={self.P}")

    @property
    def canvas(self):
        return canvas_for_role(self.role, self.O, self.P, self.K)

    def to_manifest(self) -> dict:
        doc = asdict(self)
        doc["decay_milestones"] = list(self.decay_milestones)
        doc["mask_pattern"]["groups"] = list(self.mask_pattern.groups)
        doc["mask_pattern"]["joints"] = list(self.mask_pattern.joints)
        return doc

    @classmethod
    def from_manifest(cls, doc) -> "TrainConfig":
        doc = dict(doc)
        pattern = dict(doc.pop("mask_pattern"))
        pattern["groups"] = tuple(pattern.get("groups", ()))
        pattern["joints"] = tuple(pattern.get("joints", ()))
        return cls(mask_pattern=OcclusionPattern(**pattern), **doc)


def learning_rate_at(epoch, cfg: TrainConfig) -> float:
    """base * decay^(milestones passed); milestone m falls at epoch round(m * epochs)."""
    passed = sum(1 for m in cfg.decay_milestones if epoch >= int(np.floor(m * cfg.epochs + 0.5)))
    return cfg.learning_rate * cfg.decay_factor ** passed


# ==========================================
# --- CHECKPOINT ---
# ==========================================

@dataclass(eq=False)
class Checkpoint:
    denoiser_config: DenoiserConfig
    train_config: TrainConfig
    params: OrderedDict
    epoch: int = 0
    optimizer_step: int = 0
    exp_avg: OrderedDict = field(default_factory=OrderedDict)
    exp_avg_sq: OrderedDict = field(default_factory=OrderedDict)
    normalization: dict = field(default_factory=dict)     # {"root_joint", "scale"}
    loss_trace: list = field(default_factory=list)
    version: int = CFG.CHECKPOINT_VERSION

    @property
    def role(self) -> str:
        return self.train_config.role

    @property
    def rng_state(self) -> dict:
        return {"seed": self.train_config.seed, "next_epoch": self.epoch}

    @property
    def scale(self) -> float:
        return float(self.normalization["scale"])

    def build_denoiser(self) -> DenoiserNet:
        net = DenoiserNet(self.denoiser_config)
        net.load_state_dict({k: v.clone() for k, v in self.params.items()}, strict=True)
        net.to(self.params[next(iter(self.params))].dtype)
        net.eval()
        return net

    def require_role(self, *roles):
        if self.role not in roles:
            raise ModeError(f"Checkpoint trained as '{self.role}' cannot serve as {' / '.join(roles)} block")


def _tensor_directory(ck: Checkpoint):
    entries = [(f"param.{k}", v) for k, v in ck.params.items()]
    entries += [(f"adam.exp_avg.{k}", v) for k, v in ck.exp_avg.items()]
    entries += [(f"adam.exp_avg_sq.{k}", v) for k, v in ck.exp_avg_sq.items()]
    return entries


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    directory, payloads, offset = [], [], 0
    for name, tensor in _tensor_directory(ck):
        raw = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype='<f4').tobytes()
        directory.append({"name": name, "dtype": "float32", "shape": list(tensor.shape), "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    manifest = {
        "version": ck.version,
        "denoiser": ck.denoiser_config.to_manifest(),
        "train": ck.train_config.to_manifest(),
        "schedule": {"kind": ck.train_config.schedule_kind, "T": ck.train_config.T},
        "epoch": ck.epoch,
        "rng_state": ck.rng_state,
        "normalization": ck.normalization,
        "optimizer": {"step": ck.optimizer_step},
        "loss_trace": list(ck.loss_trace),
        "tensors": directory,
        "payload_bytes": offset,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return CFG.CHECKPOINT_MAGIC + _LENGTH.pack(len(header)) + header + b"".join(payloads)


def save_checkpoint(ck: Checkpoint, path):
    blob = checkpoint_bytes(ck)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(blob)
    logger.info(f"Saved '{ck.role}' checkpoint at epoch {ck.epoch} to {path}")
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint: {e.strerror}", path=path)

    magic = CFG.CHECKPOINT_MAGIC
    if not blob.startswith(magic) or len(blob) < len(magic) + _LENGTH.size:
        raise CorruptCheckpointError("Not a TCDCKPT1 checkpoint (bad magic or empty file)", path=path)
    (header_len,) = _LENGTH.unpack_from(blob, len(magic))
    start = len(magic) + _LENGTH.size
    try:
        manifest = json.loads(blob[start:start + header_len])
    except (UnicodeDecodeError, ValueError):
        raise CorruptCheckpointError("Checkpoint manifest is truncated or unreadable", path=path)
    if manifest.get("version") != CFG.CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"Checkpoint version {manifest.get('version')} unsupported (expected {CFG.CHECKPOINT_VERSION})", path=path)

    payload = blob[start + header_len:]
    if len(payload) != manifest.get("payload_bytes"):
        raise CorruptCheckpointError(
            f"Payload holds {len(payload)} bytes, manifest declares {manifest.get('payload_bytes')}", path=path)

    try:
        denoiser_cfg = DenoiserConfig(**manifest["denoiser"])
        train_cfg = TrainConfig.from_manifest(manifest["train"])
    except (TypeError, KeyError, ParameterError) as e:
        raise CorruptCheckpointError(f"Checkpoint configs invalid: {e}", path=path)

    tensors = OrderedDict()
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] + 4 * count > len(payload):
            raise CorruptCheckpointError(f"Tensor '{entry['name']}' runs past the payload", path=path)
        array = np.frombuffer(payload, dtype='<f4', count=count, offset=entry["offset"]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.copy())

    expected = {k: tuple(v.shape) for k, v in DenoiserNet(denoiser_cfg).named_parameters()}

    def section(prefix):
        return OrderedDict((k[len(prefix):], v) for k, v in tensors.items() if k.startswith(prefix))

    params = section("param.")
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise CorruptCheckpointError("Parameter directory does not match the denoiser config", path=path)

    ck = Checkpoint(
        denoiser_config=denoiser_cfg, train_config=train_cfg, params=params,
        epoch=int(manifest["epoch"]), optimizer_step=int(manifest["optimizer"]["step"]),
        exp_avg=section("adam.exp_avg."), exp_avg_sq=section("adam.exp_avg_sq."),
        normalization=manifest["normalization"], loss_trace=list(manifest["loss_trace"]),
        version=manifest["version"])
    logger.info(f"Loaded '{ck.role}' checkpoint (epoch {ck.epoch}) from {path}")
    return ck


# ==========================================
# --- TRAINING DATA ---
# ==========================================

class TrainingCanvas:
    """
    Clean sequences for one role plus the per-element mask draw. Each element
    is normalized against its own drawn mask with `observation_shift`, the same
    frame the cascade samples in.
    """

    def __init__(self, dataset, cfg: TrainConfig, scale, dtype=torch.float32):
        if not dataset:
            raise ParameterError("Training dataset is empty")
        shapes = {s.coords.shape for s in dataset}
        if len(shapes) != 1:
            raise StructuralError(f"Training sequences have inconsistent shapes: {sorted(shapes)}")
        frames, joints, _ = next(iter(shapes))
        self.frames, self.observation_len = cfg.canvas
        if frames < self.frames:
            raise StructuralError(f"Role '{cfg.role}' needs {self.frames} frames, sequences have {frames}")
        self.cfg = cfg
        self.scale = scale
        self.joints = joints
        self.dtype = dtype
        self.skeleton = dataset[0].skeleton or SkeletonSpec.default()
        if self.skeleton.num_joints != joints:
            raise StructuralError(f"Skeleton has {self.skeleton.num_joints} joints, data has {joints}")
        self.raw = np.stack([np.asarray(s.coords[:self.frames], dtype=np.float64) for s in dataset])

    def __len__(self):
        return self.raw.shape[0]

    def draw_mask(self, seed) -> AvailabilityMask:
        cfg = self.cfg
        if cfg.role in ("long", "refine"):
            return AvailabilityMask.observed_window(self.frames, self.joints, self.observation_len)
        future = self.frames - cfg.O
        for attempt in range(CFG.MASK_REDRAW_LIMIT):
            mask = make_mask(cfg.mask_pattern, cfg.O, future, self.skeleton, derive_seed(seed, attempt))
            if mask.missing_count() > 0:
                return mask
        raise DegenerateBatchError(
            f"Pattern '{cfg.mask_pattern.kind}' left nothing unavailable after {CFG.MASK_REDRAW_LIMIT} draws")

    def normalized(self, index, mask: AvailabilityMask) -> np.ndarray:
        coords = self.raw[index]
        shift = observation_shift(coords, mask, self.cfg.O, CFG.ROOT_JOINT)
        return normalize(coords, NormalizationState(CFG.ROOT_JOINT, shift, self.scale))

    def batch(self, indices, seed, sched) -> TrainingBatch:
        gen = make_generator(derive_seed(seed, "noise"))
        masks = [self.draw_mask(derive_seed(seed, "mask", i)) for i in range(len(indices))]
        keep = torch.stack([torch.as_tensor(m.as_bool()) for m in masks])
        s0 = torch.as_tensor(np.stack([self.normalized(int(idx), m) for idx, m in zip(indices, masks)]),
                             dtype=self.dtype)
        sigma = self.cfg.mask_pattern.noise_std
        if sigma > 0:
            s0 = s0 + (sigma / self.scale) * torch.randn(s0.shape, generator=gen, dtype=s0.dtype) * keep
        t = torch.randint(1, sched.T + 1, (len(indices),), generator=gen)
        s_t, eps = diffuse_batch(s0, keep, t, sched, gen)
        hint = self.zero_velocity_hint(s0, keep) if self.cfg.role == "refine" else None
        return TrainingBatch(s_t=s_t, t=t, keep=keep, observed=s0, eps=eps, hint=hint)

    def zero_velocity_hint(self, s0, keep) -> torch.Tensor:
        """Last observed frame repeated over the future, taken from what the network is shown."""
        O = self.cfg.O
        last = torch.where(keep[:, O - 1:O], s0[:, O - 1:O], torch.zeros_like(s0[:, O - 1:O]))
        hint = torch.zeros(s0.shape[:3] + (4,), dtype=s0.dtype)
        hint[:, O:, :, :3] = last
        hint[:, O:, :, 3] = 1.0
        return hint


# ==========================================
# --- TRAINING LOOP ---
# ==========================================

def _check_denoiser(denoiser_cfg: DenoiserConfig, cfg: TrainConfig, joints):
    frames, _ = cfg.canvas
    if denoiser_cfg.frames < frames or denoiser_cfg.joints != joints:
        raise StructuralError(
            f"Denoiser bounds {denoiser_cfg.frames}x{denoiser_cfg.joints} do not fit the {frames}x{joints} canvas")
    if denoiser_cfg.refine != (cfg.role == "refine"):
        raise ModeError(f"Denoiser refine={denoiser_cfg.refine} does not match role '{cfg.role}'")
    if denoiser_cfg.diffusion_steps != cfg.T:
        raise ParameterError(f"Denoiser built for T={denoiser_cfg.diffusion_steps}, training uses T={cfg.T}")


def _restore_optimizer(optimizer, net, ck: Checkpoint):
    if ck.optimizer_step == 0:
        return
    state = optimizer.state_dict()
    state["state"] = {
        i: {"step": torch.tensor(float(ck.optimizer_step)),
            "exp_avg": ck.exp_avg[name].to(p.dtype).clone(),
            "exp_avg_sq": ck.exp_avg_sq[name].to(p.dtype).clone()}
        for i, (name, p) in enumerate(net.named_parameters())
    }
    optimizer.load_state_dict(state)


def _snapshot(net, optimizer, denoiser_cfg, cfg, epoch, step, normalization, trace) -> Checkpoint:
    names = [name for name, _ in net.named_parameters()]
    moments = {"exp_avg": OrderedDict(), "exp_avg_sq": OrderedDict()}
    for name, p in zip(names, net.parameters()):
        state = optimizer.state.get(p, {})
        for key in moments:
            if key in state:
                moments[key][name] = state[key].detach().clone()
    return Checkpoint(
        denoiser_config=denoiser_cfg, train_config=cfg,
        params=OrderedDict((k, v.detach().clone()) for k, v in net.named_parameters()),
        epoch=epoch, optimizer_step=step, exp_avg=moments["exp_avg"], exp_avg_sq=moments["exp_avg_sq"],
        normalization=normalization, loss_trace=list(trace))


def train(dataset, cfg: TrainConfig, denoiser_cfg: DenoiserConfig = None, resume: Checkpoint = None,
          until_epoch=None, on_epoch=None) -> Checkpoint:
    """
    Trains one block and returns the final checkpoint (loss_trace holds the
    per-epoch mean loss). Every random draw derives from (seed, epoch, batch),
    so resuming an epoch-k checkpoint replays the uninterrupted run.
    `until_epoch` stops early while keeping the learning-rate schedule of the
    full `cfg.epochs` run.
    """
    if resume is not None:
        denoiser_cfg = resume.denoiser_config
        if resume.train_config.role != cfg.role:
            raise ModeError(f"Cannot resume a '{resume.role}' checkpoint as '{cfg.role}'")
        normalization = dict(resume.normalization)
    else:
        normalization = {"root_joint": CFG.ROOT_JOINT, "scale": fit_scale(dataset, cfg.O, CFG.ROOT_JOINT)}
    if denoiser_cfg is None:
        frames, _ = cfg.canvas
        denoiser_cfg = DenoiserConfig(frames=frames, refine=cfg.role == "refine", diffusion_steps=cfg.T)

    net = resume.build_denoiser() if resume is not None else init_params(denoiser_cfg, derive_seed(cfg.seed, "init"))
    net.train()
    canvas = TrainingCanvas(dataset, cfg, normalization["scale"], dtype=net.dtype)
    _check_denoiser(denoiser_cfg, cfg, canvas.joints)
    logger.info(f"[{cfg.role}] {net.parameter_count()} parameters, {len(canvas)} sequences, "
                f"canvas {denoiser_cfg.frames} frames")
    sched = make_schedule(cfg.schedule_kind, cfg.T)

    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=CFG.ADAM_BETAS, eps=CFG.ADAM_EPS)
    start_epoch, step, trace = 0, 0, []
    if resume is not None:
        _restore_optimizer(optimizer, net, resume)
        start_epoch, step, trace = resume.epoch, resume.optimizer_step, list(resume.loss_trace)
    end_epoch = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)

    params = list(net.parameters())
    for epoch in range(start_epoch, end_epoch):
        lr = learning_rate_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = make_rng(derive_seed(cfg.seed, "order", epoch)).permutation(len(canvas))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            indices = torch.as_tensor(order[start:start + cfg.batch_size], dtype=torch.long)
            batch = canvas.batch(indices, derive_seed(cfg.seed, "batch", epoch, b), sched)
            loss, grads = loss_and_grad(net, batch)
            value = float(loss)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"Non-finite loss {value} at epoch {epoch}, batch {b} (lr {lr:g})")
            for p, g in zip(params, grads.values()):
                p.grad = g
            optimizer.step()
            step += 1
            losses.append(value)
        trace.append(float(np.mean(losses)))
        logger.info(f"[{cfg.role}] epoch {epoch + 1}/{cfg.epochs} | loss {trace[-1]:.6f} | lr {lr:.2e}")
        if on_epoch is not None:
            on_epoch(epoch + 1, trace[-1])

    net.eval()
    return _snapshot(net, optimizer, denoiser_cfg, cfg, max(end_epoch, start_epoch), step, normalization, trace)


@torch.no_grad()
def validation_loss(ck: Checkpoint, dataset, seed) -> float:
    """Masked epsilon loss of a checkpoint on held-out sequences with fixed draws."""
    net = ck.build_denoiser()
    cfg = ck.train_config
    canvas = TrainingCanvas(dataset, cfg, ck.scale, dtype=net.dtype)
    sched = make_schedule(cfg.schedule_kind, cfg.T)
    batch = canvas.batch(torch.arange(len(canvas)), derive_seed(seed, "validation"), sched)
    eps_hat = net(batch.s_t, batch.t, batch.keep, batch.observed, batch.hint)
    return float(masked_eps_loss(eps_hat, batch.eps, batch.keep))
