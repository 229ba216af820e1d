from .pydantic_models import (
    CONTROL_DIM,
    HAPTIC_DIM,
    LABEL_DIM,
    PROPRIO_DIM,
    EvalConfig,
    FloatMode,
    IOConfig,
    Modality,
    ModelConfig,
    Profile,
    RegressionMode,
    RegressorKind,
    RunConfig,
    SimConfig,
    Variant,
    derive_seed,
)
from .schemas import (
    CheckpointManifest,
    DatasetManifest,
    HorizonAggregate,
    MetricReport,
    OracleResult,
    ParameterRecord,
    RegressionReport,
    ReportMetadata,
    StepMetrics,
)

__all__ = [
    'CONTROL_DIM', 'HAPTIC_DIM', 'LABEL_DIM', 'PROPRIO_DIM',
    'EvalConfig', 'FloatMode', 'IOConfig', 'Modality', 'ModelConfig', 'Profile',
    'RegressionMode', 'RegressorKind', 'RunConfig', 'SimConfig', 'Variant', 'derive_seed',
    'CheckpointManifest', 'DatasetManifest', 'HorizonAggregate', 'MetricReport',
    'OracleResult', 'ParameterRecord', 'RegressionReport', 'ReportMetadata', 'StepMetrics',
]
