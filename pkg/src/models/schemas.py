from pydantic import BaseModel, ConfigDict, field_validator
from typing import Optional, List, Dict, Any

from src.models.pydantic_models import (
    FloatMode,
    ModelConfig,
    RegressionMode,
    RegressorKind,
    SimConfig,
    Variant,
)

# Dataset manifest
class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra='forbid')

    version: int
    num_trajectories: int
    seq_len: int
    image_shape: List[int]
    substeps: int
    modality_dims: Dict[str, int]
    dtype: str = 'f32le'
    seed: int
    sim_config: SimConfig
    train_indices: List[int]
    eval_indices: List[int]
    contact_rate: float
    files: Dict[str, List[int]]

    @field_validator('dtype')
    @classmethod
    def _known_dtype(cls, value: str) -> str:
        if value != 'f32le':
            raise ValueError(f'unsupported dtype tag {value}')
        return value

# Checkpoint manifest
class ParameterRecord(BaseModel):
    name: str
    shape: List[int]
    group: str
    weight_norm: bool

class CheckpointManifest(BaseModel):
    model_config = ConfigDict(extra='forbid')

    version: int
    config: ModelConfig
    parameters: List[ParameterRecord]
    float_mode: FloatMode
    dtype: str
    seed: int
    training_step: int
    payload_bytes: int

# Prediction metrics
class StepMetrics(BaseModel):
    step: int
    se_mean: float
    se_std: float
    pixel_rmse_mean: float
    pixel_rmse_std: float
    ssim_mean: float
    ssim_std: float
    psnr_mean: Optional[float] = None
    psnr_std: Optional[float] = None
    psnr_perfect_count: int = 0

class HorizonAggregate(BaseModel):
    se: float
    pixel_rmse: float
    ssim: float
    ssim_std: float
    psnr: Optional[float] = None
    psnr_std: Optional[float] = None
    psnr_perfect_count: int = 0

class ReportMetadata(BaseModel):
    kind: str = 'prediction'
    variant: Variant
    context_steps: int
    horizon: int
    seed: int
    dataset_id: str
    num_trajectories: int

class MetricReport(BaseModel):
    metadata: ReportMetadata
    per_step: List[StepMetrics]
    aggregate: HorizonAggregate

# Regression
class RegressionReport(BaseModel):
    regressor: RegressorKind
    mode: RegressionMode
    variant: Variant
    context_steps: int
    horizon: int
    num_train_pairs: int
    num_test_pairs: int
    mean_abs_error_x: float
    mean_abs_error_y: float
    mean_abs_translation_error: float
    error_mean: List[float]
    error_covariance: List[List[float]]
    ellipse_axes: List[float]
    ellipse_angle: float
    position_rmse: float
    ridge_used: bool = False
    diverged: bool = False

# Validation oracles
class OracleResult(BaseModel):
    name: str
    statistic: float
    threshold: float
    passed: bool
    details: Dict[str, Any] = {}
