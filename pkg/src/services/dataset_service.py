from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence
from pathlib import Path
import shutil
import tempfile
import numpy as np
import torch

from src.core.config import settings
from src.core.exceptions import DatasetFormatException, ShapeMismatchException
from src.core.logging_config import get_logger
from src.models.pydantic_models import Modality, ModelConfig
from src.models.schemas import DatasetManifest

logger = get_logger(__name__)

MANIFEST_FILE = 'manifest.json'
ARRAY_FILES = ('images', 'proprio', 'haptic', 'controls', 'labels')
FILE_DTYPE = np.dtype('<f4')

@dataclass
class TrajectoryBatch:
    """Aligned multimodal sequences, batch-first"""
    proprio: torch.Tensor
    haptic: Optional[torch.Tensor]
    controls: torch.Tensor
    images: Optional[torch.Tensor] = None
    labels: Optional[torch.Tensor] = None

    @property
    def batch_size(self) -> int:
        return self.proprio.shape[0]

    @property
    def seq_len(self) -> int:
        return self.proprio.shape[1]

    def observation(self, modality: Modality) -> Optional[torch.Tensor]:
        return {
            Modality.IMAGE: self.images,
            Modality.PROPRIO: self.proprio,
            Modality.HAPTIC: self.haptic,
        }[modality]

    def context(self, steps: int) -> 'TrajectoryBatch':
        """First `steps` observations and the controls consumed while filtering them"""
        return TrajectoryBatch(
            proprio=self.proprio[:, :steps],
            haptic=None if self.haptic is None else self.haptic[:, :steps],
            controls=self.controls[:, :steps - 1],
            images=None if self.images is None else self.images[:, :steps],
            labels=None if self.labels is None else self.labels[:, :steps],
        )

    def future_controls(self, context_steps: int, horizon: int) -> torch.Tensor:
        """u_k .. u_{k+h-1} (1-based), the controls that drive the rollout"""
        return self.controls[:, context_steps - 1:context_steps - 1 + horizon]

    def repeat(self, copies: int) -> 'TrajectoryBatch':
        def tile(tensor):
            if tensor is None:
                return None
            return tensor.repeat_interleave(copies, dim=0)
        return TrajectoryBatch(tile(self.proprio), tile(self.haptic), tile(self.controls),
                               tile(self.images), tile(self.labels))

    def to(self, dtype: torch.dtype) -> 'TrajectoryBatch':
        def cast(tensor):
            return None if tensor is None else tensor.to(dtype)
        return TrajectoryBatch(cast(self.proprio), cast(self.haptic), cast(self.controls),
                               cast(self.images), cast(self.labels))

@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray
    proprio: np.ndarray
    haptic: np.ndarray
    controls: np.ndarray
    labels: np.ndarray

    @property
    def num_trajectories(self) -> int:
        return self.manifest.num_trajectories

    @property
    def dataset_id(self) -> str:
        return f"sim-{self.manifest.seed}-n{self.manifest.num_trajectories}"

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ARRAY_FILES}

    def split(self, name: str) -> List[int]:
        if name == 'train':
            return list(self.manifest.train_indices)
        if name == 'eval':
            return list(self.manifest.eval_indices)
        raise ValueError(f"unknown split {name}")

    def batch(self, indices: Sequence[int], dtype: torch.dtype = torch.float32,
              with_images: bool = True) -> TrajectoryBatch:
        index = np.asarray(indices, dtype=np.int64)

        def tensor(array):
            return torch.from_numpy(np.ascontiguousarray(array[index])).to(dtype)

        return TrajectoryBatch(
            proprio=tensor(self.proprio),
            haptic=tensor(self.haptic),
            controls=tensor(self.controls),
            images=tensor(self.images) if with_images else None,
            labels=tensor(self.labels),
        )

def expected_shapes(manifest: DatasetManifest) -> Dict[str, List[int]]:
    n, t, w = manifest.num_trajectories, manifest.seq_len, manifest.substeps
    dims = manifest.modality_dims
    return {
        'images': [n, t, *manifest.image_shape],
        'proprio': [n, t, w, dims['proprio']],
        'haptic': [n, t, w, dims['haptic']],
        'controls': [n, t - 1, dims['controls']],
        'labels': [n, t, dims['labels']],
    }

def _write_directory(dataset: Dataset, directory: Path) -> None:
    (directory / MANIFEST_FILE).write_text(dataset.manifest.model_dump_json(indent=2))
    for name, array in dataset.arrays().items():
        (directory / f'{name}.bin').write_bytes(np.ascontiguousarray(array, dtype=FILE_DTYPE).tobytes(order='C'))

def save_dataset(dataset: Dataset, path: Path) -> Path:
    """Write the dataset directory atomically; no partial directory survives a failure"""
    path = Path(path)
    shapes = expected_shapes(dataset.manifest)
    for name, array in dataset.arrays().items():
        if list(array.shape) != shapes[name]:
            raise DatasetFormatException(
                f"{name}: array shape {list(array.shape)} does not match manifest {shapes[name]}",
                error_code="SHAPE_MISMATCH",
            )
    path.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f'.{path.name}-', dir=path.parent))
    try:
        _write_directory(dataset, staging)
        if path.exists():
            shutil.rmtree(path)
        staging.rename(path)
    except OSError as e:
        shutil.rmtree(staging, ignore_errors=True)
        logger.error("dataset_write_failed", path=str(path), error=str(e))
        raise DatasetFormatException(f"Failed to write dataset to {path}: {str(e)}",
                                     error_code="WRITE_FAILED") from e
    logger.info("dataset_saved", path=str(path), trajectories=dataset.num_trajectories)
    return path

def load_dataset(path: Path) -> Dataset:
    """Read and validate a dataset directory"""
    path = Path(path)
    manifest_path = path / MANIFEST_FILE
    if not manifest_path.is_file():
        raise DatasetFormatException(f"{manifest_path}: manifest not found", error_code="MISSING_MANIFEST")
    try:
        manifest = DatasetManifest.model_validate_json(manifest_path.read_text())
    except ValueError as e:
        raise DatasetFormatException(f"{manifest_path}: invalid manifest: {str(e)}",
                                     error_code="BAD_MANIFEST") from e
    if manifest.version != settings.DATASET_FORMAT_VERSION:
        raise DatasetFormatException(
            f"{manifest_path}: format version {manifest.version} is not supported "
            f"(expected {settings.DATASET_FORMAT_VERSION})",
            error_code="VERSION",
        )

    arrays = {}
    for name, shape in expected_shapes(manifest).items():
        file_path = path / f'{name}.bin'
        if manifest.files.get(name) != shape:
            raise DatasetFormatException(
                f"{file_path}: manifest lists shape {manifest.files.get(name)}, expected {shape}",
                error_code="SHAPE_MISMATCH",
            )
        expected_bytes = int(np.prod(shape)) * FILE_DTYPE.itemsize
        if not file_path.is_file():
            raise DatasetFormatException(f"{file_path}: missing (expected {expected_bytes} bytes)",
                                         error_code="MISSING_FILE")
        actual_bytes = file_path.stat().st_size
        if actual_bytes != expected_bytes:
            raise DatasetFormatException(
                f"{file_path}: expected {expected_bytes} bytes, found {actual_bytes}",
                error_code="BYTE_COUNT",
                details={"file": str(file_path), "expected": expected_bytes, "actual": actual_bytes},
            )
        arrays[name] = np.fromfile(file_path, dtype=FILE_DTYPE).reshape(shape)

    logger.info("dataset_loaded", path=str(path), trajectories=manifest.num_trajectories)
    return Dataset(manifest=manifest, **arrays)

def check_compatible(manifest: DatasetManifest, config: ModelConfig) -> None:
    """Raise ShapeMismatchException when a ModelConfig cannot consume this dataset"""
    dims = manifest.modality_dims
    expected = {
        'image': list(manifest.image_shape),
        'proprio': [manifest.substeps, dims['proprio']],
        'haptic': [manifest.substeps, dims['haptic']],
        'controls': [dims['controls']],
    }
    actual = {
        'image': list(config.image_shape),
        'proprio': list(config.proprio_window),
        'haptic': list(config.haptic_window),
        'controls': [config.control_dim],
    }
    for modality in [m.value for m in config.modalities] + ['controls']:
        if expected[modality] != actual[modality]:
            raise ShapeMismatchException(f'dataset[{modality}]', expected[modality], actual[modality])
