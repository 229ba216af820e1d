from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Any, Optional, List, Tuple
from pathlib import Path
from enum import Enum
import hashlib

from src.core.config import settings

class Variant(str, Enum):
    V = 'V'
    VP = 'VP'
    VH = 'VH'
    VHP = 'VHP'
    VHP_C = 'VHP-C'

class Modality(str, Enum):
    IMAGE = 'image'
    PROPRIO = 'proprio'
    HAPTIC = 'haptic'

class FloatMode(str, Enum):
    F64 = 'f64'
    F32 = 'f32'

class Profile(str, Enum):
    DESK = 'desk'
    PAPER = 'paper'

class RegressorKind(str, Enum):
    OLS = 'OLS'
    MLP = 'MLP-50'

class RegressionMode(str, Enum):
    FILTERED = 'filtered'
    PREDICTED = 'predicted'

PROPRIO_DIM = 4
HAPTIC_DIM = 3
CONTROL_DIM = 2
LABEL_DIM = 3

VARIANT_MODALITIES = {
    Variant.V: [Modality.IMAGE],
    Variant.VP: [Modality.IMAGE, Modality.PROPRIO],
    Variant.VH: [Modality.IMAGE, Modality.HAPTIC],
    Variant.VHP: [Modality.IMAGE, Modality.PROPRIO, Modality.HAPTIC],
    Variant.VHP_C: [Modality.IMAGE, Modality.PROPRIO, Modality.HAPTIC],
}

PROFILE_DEFAULTS = {
    Profile.DESK: {'image_size': 32, 'substeps': 8, 'num_trajectories': 500},
    Profile.PAPER: {'image_size': 64, 'substeps': 32, 'num_trajectories': 4800},
}

def derive_seed(seed: int, component: str) -> int:
    """Derive a component seed from the run seed"""
    digest = hashlib.sha256(f'{seed}:{component}'.encode()).digest()
    return int.from_bytes(digest[:4], 'little')

# Simulator section
class SimConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    image_size: int = 32
    seq_len: int = 16
    substeps: int = 8
    num_trajectories: int = 500
    eval_fraction: float = 0.1

    # Arena spans [-world_extent/2, world_extent/2] on both axes
    world_extent: float = 2.0
    block_half_side: float = 0.25
    pusher_radius: float = 0.1
    contact_stiffness: float = 50.0
    translational_mobility: float = 1.0
    rotational_mobility: float = 20.0
    sensor_noise_std: float = 0.01
    frame_dt: float = 0.1

    # Fixed Gaussian action distribution
    start_radius: float = 0.6
    action_speed: float = 0.4
    action_heading_std: float = 0.25
    action_std: float = 0.1

    seed: int = 0

    @field_validator('world_extent', 'block_half_side', 'pusher_radius', 'contact_stiffness',
                     'translational_mobility', 'rotational_mobility', 'frame_dt',
                     'start_radius', 'action_speed')
    @classmethod
    def _positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError('physical constants must be > 0')
        return value

    @field_validator('sensor_noise_std', 'action_heading_std', 'action_std')
    @classmethod
    def _non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError('standard deviations must be >= 0')
        return value

    @field_validator('substeps', 'num_trajectories', 'image_size')
    @classmethod
    def _at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError('must be >= 1')
        return value

    @model_validator(mode='after')
    def _check_geometry(self) -> 'SimConfig':
        if self.seq_len < 2:
            raise ValueError('seq_len must be >= 2')
        if not 0.0 < self.eval_fraction < 1.0:
            raise ValueError('eval_fraction must be in (0, 1)')
        clearance = self.block_half_side * 2 ** 0.5 + self.pusher_radius
        if self.start_radius <= clearance:
            raise ValueError(f'start_radius must exceed {clearance:.3f} so the pusher starts outside the block')
        if self.start_radius + self.pusher_radius > self.world_extent / 2:
            raise ValueError('start circle must lie inside the arena')
        return self

    @property
    def frame_substep_dt(self) -> float:
        return self.frame_dt / self.substeps

# Model section
class ModelConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    variant: Variant = Variant.VHP
    latent_dim: int = 16
    control_dim: int = CONTROL_DIM
    image_shape: Tuple[int, int] = (32, 32)
    proprio_window: Tuple[int, int] = (8, PROPRIO_DIM)
    haptic_window: Tuple[int, int] = (8, HAPTIC_DIM)
    include_image: bool = True

    image_channels: Tuple[int, int, int, int] = (32, 64, 128, 256)
    lowdim_channels: Tuple[int, int] = (32, 64)
    transition_hidden: int = 256

    learning_rate: float = 3e-4
    clip_norm: Optional[float] = 0.5
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    float_mode: FloatMode = FloatMode.F32
    initial_prior_var: float = 1.0

    @field_validator('latent_dim', 'control_dim', 'transition_hidden', 'batch_size')
    @classmethod
    def _positive_int(cls, value: int) -> int:
        if value < 1:
            raise ValueError('must be >= 1')
        return value

    @field_validator('epochs')
    @classmethod
    def _non_negative_int(cls, value: int) -> int:
        if value < 0:
            raise ValueError('epochs must be >= 0')
        return value

    @field_validator('learning_rate', 'initial_prior_var')
    @classmethod
    def _positive_float(cls, value: float) -> float:
        if value <= 0:
            raise ValueError('must be > 0')
        return value

    @model_validator(mode='after')
    def _check_shapes(self) -> 'ModelConfig':
        height, width = self.image_shape
        if self.include_image and (height % 16 or width % 16 or height < 16 or width < 16):
            raise ValueError('image_shape must be multiples of 16 (four stride-2 layers)')
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError('clip_norm must be > 0 when set')
        if self.proprio_window[0] < 1 or self.haptic_window[0] < 1:
            raise ValueError('measurement windows need at least one sample')
        return self

    @property
    def modalities(self) -> List[Modality]:
        """Active modalities in fusion order"""
        active = list(VARIANT_MODALITIES[self.variant])
        if not self.include_image:
            active.remove(Modality.IMAGE)
        if not active:
            raise ValueError(f'variant {self.variant.value} without images has no modality')
        return active

    @property
    def concat_fusion(self) -> bool:
        return self.variant == Variant.VHP_C

    def window_for(self, modality: Modality) -> Tuple[int, int]:
        if modality == Modality.PROPRIO:
            return self.proprio_window
        if modality == Modality.HAPTIC:
            return self.haptic_window
        raise ValueError(f'{modality.value} has no measurement window')

# Evaluation section
class EvalConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    context_steps: int = 4
    horizon: int = 11
    regressor: RegressorKind = RegressorKind.OLS
    split: str = 'eval'
    regression_train_fraction: float = 0.8
    batch_size: int = 64
    mlp_hidden: int = 50
    mlp_max_epochs: int = 3000
    mlp_patience: int = 200
    mlp_learning_rate: float = 1e-3
    plots: bool = True

    @field_validator('split')
    @classmethod
    def _known_split(cls, value: str) -> str:
        if value not in ('train', 'eval'):
            raise ValueError("split must be 'train' or 'eval'")
        return value

    @model_validator(mode='after')
    def _check_protocol(self) -> 'EvalConfig':
        if self.context_steps < 1 or self.horizon < 1:
            raise ValueError('context_steps and horizon must be >= 1')
        if not 0.0 < self.regression_train_fraction < 1.0:
            raise ValueError('regression_train_fraction must be in (0, 1)')
        return self

# Output locations
class IOConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    dataset_path: Path = Field(default_factory=lambda: settings.DATA_PATH)
    checkpoint_path: Path = Field(default_factory=lambda: settings.CHECKPOINT_PATH)
    report_dir: Path = Field(default_factory=lambda: settings.REPORT_PATH)

class RunConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    sim: SimConfig = Field(default_factory=SimConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    io: IOConfig = Field(default_factory=IOConfig)
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED)
    profile: Profile = Profile.DESK

    @model_validator(mode='before')
    @classmethod
    def _profile_defaults(cls, data: Any) -> Any:
        """A profile named in the input fills the simulator fields the input leaves unset"""
        if not isinstance(data, dict) or data.get('profile') is None:
            return data
        defaults = PROFILE_DEFAULTS[Profile(data['profile'])]
        sim = data.get('sim') or {}
        if isinstance(sim, SimConfig):
            sim = sim.model_copy(update={k: v for k, v in defaults.items() if k not in sim.model_fields_set})
        elif isinstance(sim, dict):
            sim = {**defaults, **sim}
        return {**data, 'sim': sim}

    def with_profile(self, profile: Profile) -> 'RunConfig':
        """Return a copy whose simulator section follows the profile defaults"""
        sim = self.sim.model_copy(update=PROFILE_DEFAULTS[profile])
        return self.model_copy(update={'sim': sim, 'profile': profile})

    def resolved(self) -> 'RunConfig':
        """Derive component seeds and align model shapes with the simulator"""
        sim = self.sim.model_copy(update={'seed': derive_seed(self.seed, 'sim')})
        model = self.model.model_copy(update={
            'seed': derive_seed(self.seed, 'model'),
            'image_shape': (sim.image_size, sim.image_size),
            'proprio_window': (sim.substeps, PROPRIO_DIM),
            'haptic_window': (sim.substeps, HAPTIC_DIM),
        })
        # Round-trip through validation so derived values are checked too
        return RunConfig.model_validate(
            self.model_copy(update={'sim': sim, 'model': model}).model_dump(mode='json')
        )

    def component_seed(self, component: str) -> int:
        return derive_seed(self.seed, component)
