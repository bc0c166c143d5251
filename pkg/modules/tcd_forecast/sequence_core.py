# /modules/tcd_forecast/sequence_core.py
# Pose sequences, availability masks, normalization, the synthetic gait corpus
# and the occlusion-pattern generators.

import math
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import config as CFG
from .errors import ParameterError, StructuralError
from .utils import make_rng

logger = logging.getLogger('tcd_system.sequence')

ROLE_OBSERVATION = "observation"
ROLE_FULL = "full"

# Swing axis per limb group; joints outside every group never rotate.
_GROUP_AXES = {
    "right_leg": "x", "left_leg": "x",
    "left_arm": "x", "right_arm": "x",
    "torso": "z",
}


def _readonly(array):
    array.flags.writeable = False
    return array


# ==========================================
# --- SKELETON ---
# ==========================================

@dataclass(frozen=True, eq=False)
class SkeletonSpec:
    """
    Joint labels, limb groups and the kinematic tree.
    rest_offsets (J x 3, mm) are only needed by the synthetic generator.
    """
    joint_names: tuple
    limb_groups: dict
    parent_index: tuple
    rest_offsets: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, 'joint_names', tuple(self.joint_names))
        object.__setattr__(self, 'parent_index', tuple(int(p) for p in self.parent_index))
        object.__setattr__(self, 'limb_groups',
                           {str(k): tuple(int(j) for j in v) for k, v in dict(self.limb_groups).items()})
        J = len(self.joint_names)
        if J < 2:
            raise StructuralError(f"Skeleton needs at least 2 joints, got {J}")
        if len(self.parent_index) != J:
            raise StructuralError(f"parent_index has {len(self.parent_index)} entries for {J} joints")

        seen = set()
        for name, joints in self.limb_groups.items():
            for j in joints:
                if not 0 <= j < J:
                    raise StructuralError(f"Limb group '{name}' references joint {j} outside 0..{J - 1}")
                if j in seen:
                    raise StructuralError(f"Limb groups overlap at joint {j}")
                seen.add(j)

        roots = [j for j, p in enumerate(self.parent_index) if p < 0]
        if len(roots) != 1:
            raise StructuralError(f"Skeleton must have exactly one root, found {len(roots)}")
        for j in range(J):
            # Walking up from any joint must reach the root within J hops.
            node, hops = j, 0
            while self.parent_index[node] >= 0:
                node = self.parent_index[node]
                if not 0 <= node < J:
                    raise StructuralError(f"Joint {j} has parent {node} outside the skeleton")
                hops += 1
                if hops > J:
                    raise StructuralError(f"Cycle in parent graph through joint {j}")

        if self.rest_offsets is not None:
            offsets = np.asarray(self.rest_offsets, dtype=np.float64)
            if offsets.shape != (J, 3):
                raise StructuralError(f"rest_offsets must be {J}x3, got {offsets.shape}")
            object.__setattr__(self, 'rest_offsets', _readonly(offsets.copy()))

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def root(self) -> int:
        return self.parent_index.index(-1)

    def topological_order(self):
        order, placed = [], set()
        while len(order) < self.num_joints:
            for j, p in enumerate(self.parent_index):
                if j not in placed and (p < 0 or p in placed):
                    order.append(j)
                    placed.add(j)
        return order

    def group_joints(self, groups) -> list:
        joints = set()
        for name in groups:
            if name not in self.limb_groups:
                raise ParameterError(f"Unknown limb group '{name}' (known: {sorted(self.limb_groups)})")
            joints.update(self.limb_groups[name])
        return sorted(joints)

    def to_header(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "limb_groups": {k: list(v) for k, v in self.limb_groups.items()},
            "parent_index": list(self.parent_index),
        }

    @classmethod
    def from_header(cls, header: dict) -> "SkeletonSpec":
        return cls(header["joint_names"], header["limb_groups"], header["parent_index"])

    @classmethod
    def default(cls) -> "SkeletonSpec":
        return cls(CFG.JOINT_NAMES, CFG.LIMB_GROUPS, CFG.PARENT_INDEX, np.array(CFG.REST_OFFSETS_MM))


# ==========================================
# --- POSES & MASKS ---
# ==========================================

@dataclass(frozen=True, eq=False)
class PoseSequence:
    """frames x J x 3 joint coordinates (mm in raw space)."""
    coords: np.ndarray
    fps: float = CFG.FPS
    role_tag: str = ROLE_FULL
    observation_len: int = None
    skeleton: SkeletonSpec = None

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[2] != 3:
            raise StructuralError(f"Pose coords must be frames x J x 3, got {coords.shape}")
        if coords.shape[0] < 2 or coords.shape[1] < 2:
            raise StructuralError(f"Pose sequence needs frames >= 2 and J >= 2, got {coords.shape[:2]}")
        if not np.all(np.isfinite(coords)):
            raise StructuralError("Pose sequence contains non-finite coordinates")
        if self.fps <= 0:
            raise ParameterError(f"fps must be positive, got {self.fps}")
        if self.role_tag not in (ROLE_OBSERVATION, ROLE_FULL):
            raise ParameterError(f"Unknown role tag '{self.role_tag}'")
        if self.skeleton is not None and self.skeleton.num_joints != coords.shape[1]:
            raise StructuralError(f"Skeleton has {self.skeleton.num_joints} joints, coords have {coords.shape[1]}")
        object.__setattr__(self, 'coords', _readonly(coords))
        object.__setattr__(self, 'fps', float(self.fps))

    @property
    def frames(self) -> int:
        return self.coords.shape[0]

    @property
    def joints(self) -> int:
        return self.coords.shape[1]

    def with_coords(self, coords, **changes) -> "PoseSequence":
        return replace(self, coords=coords, **changes)

    def observation(self, O=None) -> "PoseSequence":
        O = O if O is not None else self.observation_len
        if O is None:
            raise ParameterError("observation length unknown for this sequence")
        return replace(self, coords=self.coords[:O], role_tag=ROLE_OBSERVATION, observation_len=O)

    def future(self, O=None) -> np.ndarray:
        O = O if O is not None else self.observation_len
        return self.coords[O:]


@dataclass(frozen=True, eq=False)
class AvailabilityMask:
    """Binary frames x J x 3 tensor; 1 = observed. Frames at or after observation_len are 0."""
    bits: np.ndarray
    observation_len: int

    def __post_init__(self):
        bits = np.array(self.bits)
        if bits.ndim != 3 or bits.shape[2] != 3:
            raise StructuralError(f"Mask must be frames x J x 3, got {bits.shape}")
        if not np.all((bits == 0) | (bits == 1)):
            raise StructuralError("Mask bits must be 0 or 1")
        bits = bits.astype(np.uint8)
        O = int(self.observation_len)
        if not 0 <= O <= bits.shape[0]:
            raise StructuralError(f"observation_len {O} outside 0..{bits.shape[0]}")
        if bits[O:].any():
            raise StructuralError("Mask marks future frames as observed")
        if not (np.all(bits[..., 0] == bits[..., 1]) and np.all(bits[..., 0] == bits[..., 2])):
            raise StructuralError("Mask must occlude whole joints (3 coordinate bits equal)")
        object.__setattr__(self, 'bits', _readonly(bits))
        object.__setattr__(self, 'observation_len', O)

    @property
    def frames(self) -> int:
        return self.bits.shape[0]

    @property
    def joints(self) -> int:
        return self.bits.shape[1]

    @property
    def joint_bits(self) -> np.ndarray:
        return self.bits[..., 0]

    def as_bool(self) -> np.ndarray:
        return self.bits.astype(bool)

    def missing_count(self) -> int:
        return int((self.bits == 0).sum())

    def observation(self) -> "AvailabilityMask":
        return AvailabilityMask(self.bits[:self.observation_len], self.observation_len)

    def extended(self, frames) -> "AvailabilityMask":
        """Zero-pads the mask to `frames` frames (new frames unavailable)."""
        pad = np.zeros((frames - self.frames,) + self.bits.shape[1:], dtype=np.uint8)
        return AvailabilityMask(np.concatenate([self.bits, pad]), self.observation_len)

    @classmethod
    def from_joint_bits(cls, joint_bits, observation_len) -> "AvailabilityMask":
        joint_bits = np.asarray(joint_bits, dtype=np.uint8)
        return cls(np.repeat(joint_bits[..., None], 3, axis=-1), observation_len)

    @classmethod
    def observed_window(cls, frames, joints, observation_len) -> "AvailabilityMask":
        joint_bits = np.zeros((frames, joints), dtype=np.uint8)
        joint_bits[:observation_len] = 1
        return cls.from_joint_bits(joint_bits, observation_len)


# ==========================================
# --- NORMALIZATION ---
# ==========================================

@dataclass(frozen=True, eq=False)
class NormalizationState:
    root_joint: int
    shift: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ParameterError(f"Normalization scale must be positive, got {self.scale}")
        object.__setattr__(self, 'shift', _readonly(np.array(self.shift, dtype=np.float64).reshape(3)))
        object.__setattr__(self, 'scale', float(self.scale))


def observation_shift(coords, mask=None, observation_len=None, root_joint=CFG.ROOT_JOINT) -> np.ndarray:
    """
    Root position at the last observation frame where the root is visible.
    Falls back to the mean of visible observation coordinates, then to zero.
    """
    coords = np.asarray(coords, dtype=np.float64)
    O = observation_len if observation_len is not None else coords.shape[0]
    if mask is None:
        return coords[O - 1, root_joint].copy()
    visible = np.asarray(mask.joint_bits[:O], dtype=bool)
    root_frames = np.nonzero(visible[:, root_joint])[0]
    if root_frames.size:
        return coords[root_frames[-1], root_joint].copy()
    if visible.any():
        logger.debug("Root joint never visible; shifting by mean of visible joints")
        return coords[:O][visible].mean(axis=0)
    return np.zeros(3)


def fit_scale(sequences, observation_len, root_joint=CFG.ROOT_JOINT) -> float:
    """Corpus-level std of root-centered coordinates (training split)."""
    centered = [np.asarray(s.coords) - s.coords[observation_len - 1, root_joint] for s in sequences]
    if not centered:
        raise ParameterError("Cannot fit normalization on an empty corpus")
    scale = float(np.concatenate([c.reshape(-1) for c in centered]).std())
    if not scale > 0:
        raise ParameterError("Corpus has zero coordinate spread; cannot normalize")
    return scale


def normalize(X, state: NormalizationState):
    """Root-centers and rescales a PoseSequence, or a coordinate array with any leading batch axes."""
    if isinstance(X, PoseSequence):
        return X.with_coords(normalize(X.coords, state))
    return (np.asarray(X, dtype=np.float64) - state.shift) / state.scale


def denormalize(X, state: NormalizationState):
    if isinstance(X, PoseSequence):
        return X.with_coords(denormalize(X.coords, state))
    return np.asarray(X, dtype=np.float64) * state.scale + state.shift


# ==========================================
# --- SYNTHETIC GAIT CORPUS ---
# ==========================================

@dataclass(frozen=True)
class GaitParams:
    frequency: float                              # Hz
    amplitude: dict = field(default_factory=dict)  # limb group -> radians
    phase: dict = field(default_factory=dict)      # limb group -> radians
    forward_speed: float = 0.0                     # mm / s


def sample_gait_params(seed, static=False) -> GaitParams:
    """Random walking-like gait; legs and arms in anti-phase."""
    rng = make_rng(seed)
    if static:
        return GaitParams(frequency=1.0, amplitude={g: 0.0 for g in _GROUP_AXES}, forward_speed=0.0)
    leg = rng.uniform(*CFG.GAIT_LEG_AMPLITUDE_RAD)
    arm = rng.uniform(*CFG.GAIT_ARM_AMPLITUDE_RAD)
    base_phase = rng.uniform(0.0, 2 * math.pi)
    return GaitParams(
        frequency=float(rng.uniform(*CFG.GAIT_FREQUENCY_HZ)),
        amplitude={
            "right_leg": leg, "left_leg": leg,
            "left_arm": arm, "right_arm": arm,
            "torso": float(rng.uniform(*CFG.GAIT_TORSO_AMPLITUDE_RAD)),
        },
        phase={
            "right_leg": base_phase, "left_leg": base_phase + math.pi,
            "left_arm": base_phase, "right_arm": base_phase + math.pi,
            "torso": base_phase,
        },
        forward_speed=float(rng.uniform(*CFG.GAIT_SPEED_MM_S)),
    )


def joint_angle_trajectories(skeleton: SkeletonSpec, gait: GaitParams, frames: int, fps: float) -> np.ndarray:
    """frames x J local joint angles: a * sin(2 pi f k / fps + phase) per limb group."""
    k = np.arange(frames, dtype=np.float64)
    angles = np.zeros((frames, skeleton.num_joints))
    for group, joints in skeleton.limb_groups.items():
        a = float(gait.amplitude.get(group, 0.0))
        if a < 0:
            raise ParameterError(f"Amplitude for '{group}' must be >= 0, got {a}")
        phi = float(gait.phase.get(group, 0.0))
        angles[:, list(joints)] = (a * np.sin(2 * math.pi * gait.frequency * k / fps + phi))[:, None]
    return angles


def _axis_rotations(axis, angles):
    c, s = np.cos(angles), np.sin(angles)
    one, zero = np.ones_like(angles), np.zeros_like(angles)
    if axis == "x":
        rows = [[one, zero, zero], [zero, c, -s], [zero, s, c]]
    elif axis == "y":
        rows = [[c, zero, s], [zero, one, zero], [-s, zero, c]]
    else:
        rows = [[c, -s, zero], [s, c, zero], [zero, zero, one]]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def generate_synthetic_motion(skeleton: SkeletonSpec, gait: GaitParams, frames: int, fps: float,
                              seed, observation_len=None) -> PoseSequence:
    """
    Forward kinematics of sinusoidal joint angles around the kinematic chain.
    The seed only draws the heading and the start position, so bone lengths stay
    exact and the angle trajectories are closed-form.
    """
    if frames < 2:
        raise ParameterError(f"frames must be >= 2, got {frames}")
    if skeleton.rest_offsets is None:
        raise StructuralError("Skeleton has no rest offsets; cannot synthesize motion")

    rng = make_rng(seed)
    heading = rng.uniform(0.0, 2 * math.pi)
    start = np.array([rng.uniform(-500.0, 500.0), rng.uniform(-500.0, 500.0), CFG.PELVIS_HEIGHT_MM])

    angles = joint_angle_trajectories(skeleton, gait, frames, fps)
    axis_of = {}
    for group, joints in skeleton.limb_groups.items():
        for j in joints:
            axis_of[j] = _GROUP_AXES.get(group, "x")

    yaw = _axis_rotations("z", np.full(frames, heading))
    forward = yaw[0] @ np.array([0.0, 1.0, 0.0])
    t = np.arange(frames, dtype=np.float64) / fps

    positions = np.zeros((frames, skeleton.num_joints, 3))
    global_rot = np.zeros((frames, skeleton.num_joints, 3, 3))
    for j in skeleton.topological_order():
        local = _axis_rotations(axis_of.get(j, "x"), angles[:, j])
        parent = skeleton.parent_index[j]
        if parent < 0:
            positions[:, j] = start + np.outer(t * gait.forward_speed, forward)
            global_rot[:, j] = yaw @ local
        else:
            positions[:, j] = positions[:, parent] + np.einsum('fab,b->fa', global_rot[:, parent],
                                                               skeleton.rest_offsets[j])
            global_rot[:, j] = global_rot[:, parent] @ local

    return PoseSequence(positions, fps=fps, role_tag=ROLE_FULL, observation_len=observation_len, skeleton=skeleton)


# ==========================================
# --- OCCLUSION PATTERNS ---
# ==========================================

PATTERN_KINDS = ("full", "future_only", "random_limb", "random_joint", "structured", "missing_frames", "noisy")


@dataclass(frozen=True)
class OcclusionPattern:
    kind: str = "full"
    prob: float = CFG.OCCLUSION_PROB
    groups: tuple = ()
    joints: tuple = ()
    consecutive_frac: float = CFG.STRUCTURED_FRAC
    frac: float = CFG.MISSING_FRAMES_FRAC
    consecutive: bool = True
    noise_std: float = 0.0     # raw units (mm); applied by apply_mask callers

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ParameterError(f"Unknown occlusion pattern '{self.kind}' (known: {PATTERN_KINDS})")
        object.__setattr__(self, 'kind', CFG.PATTERN_ALIASES.get(self.kind, self.kind))
        for name in ("prob", "consecutive_frac", "frac"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ParameterError(f"Occlusion {name} must lie in [0, 1], got {value}")
        if self.noise_std < 0:
            raise ParameterError(f"noise_std must be >= 0, got {self.noise_std}")

    @classmethod
    def preset(cls, kind, **overrides) -> "OcclusionPattern":
        """Standard occlusion regimes: 40% limbs, 40% right leg over consecutive frames, 20% frames, noisy legs."""
        defaults = {
            "random_limb": {"groups": ("left_arm", "right_arm", "left_leg", "right_leg")},
            "structured": {"groups": ("right_leg",)},
            "noisy": {"groups": ("left_leg", "right_leg"), "prob": CFG.NOISY_LEG_PROB,
                      "noise_std": CFG.NOISY_SIGMAS_MM[0]},
        }.get(kind, {})
        defaults.update({k: v for k, v in overrides.items() if v is not None})
        return cls(kind=kind, **defaults)


def _run_length(frac, O):
    return int(math.floor(frac * O + 0.5))


def make_mask(pattern: OcclusionPattern, O: int, P: int, skeleton: SkeletonSpec, seed) -> AvailabilityMask:
    """(O+P) x J x 3 mask; occlusions only inside the O observation frames."""
    if O < 0 or P < 0:
        raise ParameterError(f"O and P must be >= 0, got O={O}, P={P}")
    rng = make_rng(seed)
    J = skeleton.num_joints
    observed = np.ones((O, J), dtype=np.uint8)

    if pattern.kind in ("random_limb", "noisy"):
        joints = skeleton.group_joints(pattern.groups)
        if joints:
            drop = rng.random((O, len(joints))) < pattern.prob
            observed[:, joints] = np.where(drop, 0, 1)
    elif pattern.kind == "random_joint":
        observed[rng.random((O, J)) < pattern.prob] = 0
    elif pattern.kind == "structured":
        joints = sorted(set(pattern.joints) | set(skeleton.group_joints(pattern.groups)))
        if not joints:
            raise ParameterError("Structured occlusion needs a non-empty joint set")
        if any(not 0 <= j < J for j in joints):
            raise ParameterError(f"Structured joint set {joints} outside 0..{J - 1}")
        run = _run_length(pattern.consecutive_frac, O)
        if run:
            start = int(rng.integers(0, O - run + 1))
            observed[start:start + run][:, joints] = 0
    elif pattern.kind == "missing_frames":
        run = _run_length(pattern.frac, O)
        if run:
            if pattern.consecutive:
                start = int(rng.integers(0, O - run + 1))
                observed[start:start + run] = 0
            else:
                observed[rng.choice(O, size=run, replace=False)] = 0

    joint_bits = np.concatenate([observed, np.zeros((P, J), dtype=np.uint8)])
    return AvailabilityMask.from_joint_bits(joint_bits, O)


def apply_mask(X: PoseSequence, M: AvailabilityMask, noise_std=0.0, seed=0) -> PoseSequence:
    """M * (X + sigma * noise) + (1 - M) * eps, eps ~ N(0, I)."""
    if X.coords.shape != M.bits.shape:
        raise StructuralError(f"Sequence shape {X.coords.shape} does not match mask shape {M.bits.shape}")
    if noise_std < 0:
        raise ParameterError(f"noise_std must be >= 0, got {noise_std}")
    rng = make_rng(seed)
    fill = rng.standard_normal(X.coords.shape)
    observed = X.coords
    if noise_std > 0:
        observed = observed + noise_std * rng.standard_normal(X.coords.shape)
    return X.with_coords(np.where(M.as_bool(), observed, fill))
