from typing import Tuple
from pathlib import Path
import shutil
import tempfile

from src.core.config import settings
from src.core.exceptions import CheckpointException
from src.core.logging_config import get_logger
from src.models.schemas import CheckpointManifest, ParameterRecord
from src.services.diffcore import dtype_for, payload_dtype_for
from src.services.fusion_model import MultimodalLatentModel

logger = get_logger(__name__)

MANIFEST_FILE = 'manifest.json'
PAYLOAD_FILE = 'params.bin'

def _dtype_tag(float_mode) -> str:
    return 'f8le' if payload_dtype_for(float_mode) == '<f8' else 'f4le'

def build_manifest(model: MultimodalLatentModel, seed: int, training_step: int) -> CheckpointManifest:
    store = model.parameter_store()
    mode = model.config.float_mode
    return CheckpointManifest(
        version=settings.CHECKPOINT_FORMAT_VERSION,
        config=model.config,
        parameters=[
            ParameterRecord(name=e.name, shape=list(e.tensor.shape), group=e.group, weight_norm=e.weight_norm)
            for e in store
        ],
        float_mode=mode,
        dtype=_dtype_tag(mode),
        seed=seed,
        training_step=training_step,
        payload_bytes=store.payload_size(mode),
    )

def save_checkpoint(model: MultimodalLatentModel, path: Path, seed: int, training_step: int) -> Path:
    """Write manifest.json + params.bin atomically"""
    path = Path(path)
    manifest = build_manifest(model, seed, training_step)
    payload = model.parameter_store().to_payload(manifest.float_mode)
    path.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f'.{path.name}-', dir=path.parent))
    try:
        (staging / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2))
        (staging / PAYLOAD_FILE).write_bytes(payload)
        if path.exists():
            shutil.rmtree(path)
        staging.rename(path)
    except OSError as e:
        shutil.rmtree(staging, ignore_errors=True)
        logger.error("checkpoint_write_failed", path=str(path), error=str(e))
        raise CheckpointException(f"Failed to write checkpoint {path}: {str(e)}", error_code="WRITE_FAILED") from e
    logger.info("checkpoint_saved", path=str(path), training_step=training_step, bytes=len(payload))
    return path

def load_checkpoint(path: Path) -> Tuple[MultimodalLatentModel, CheckpointManifest]:
    """Rebuild the model described by the manifest and load its parameters"""
    path = Path(path)
    manifest_path = path / MANIFEST_FILE
    payload_path = path / PAYLOAD_FILE
    if not manifest_path.is_file():
        raise CheckpointException(f"{manifest_path}: checkpoint manifest not found", error_code="MISSING_MANIFEST")
    try:
        manifest = CheckpointManifest.model_validate_json(manifest_path.read_text())
    except ValueError as e:
        raise CheckpointException(f"{manifest_path}: invalid manifest: {str(e)}", error_code="BAD_MANIFEST") from e
    if manifest.version != settings.CHECKPOINT_FORMAT_VERSION:
        raise CheckpointException(f"{manifest_path}: unsupported version {manifest.version}", error_code="VERSION")

    model = MultimodalLatentModel(manifest.config)
    model = model.to(dtype_for(manifest.float_mode))
    store = model.parameter_store()

    expected = {e.name: list(e.tensor.shape) for e in store}
    recorded = {p.name: p.shape for p in manifest.parameters}
    if list(expected) != list(recorded) or expected != recorded:
        missing = sorted(set(expected) - set(recorded))
        unexpected = sorted(set(recorded) - set(expected))
        mismatched = sorted(n for n in set(expected) & set(recorded) if expected[n] != recorded[n])
        raise CheckpointException(
            f"{manifest_path}: parameter names/shapes do not match the configured model",
            error_code="PARAMETER_MISMATCH",
            details={"missing": missing, "unexpected": unexpected, "shape_mismatch": mismatched},
        )

    if not payload_path.is_file():
        raise CheckpointException(f"{payload_path}: parameter payload not found", error_code="MISSING_PAYLOAD")
    payload = payload_path.read_bytes()
    if len(payload) != manifest.payload_bytes or len(payload) != store.payload_size(manifest.float_mode):
        raise CheckpointException(
            f"{payload_path}: expected {manifest.payload_bytes} bytes, found {len(payload)}",
            error_code="BYTE_COUNT",
            details={"file": str(payload_path), "expected": manifest.payload_bytes, "actual": len(payload)},
        )
    store.load_payload(payload, manifest.float_mode)
    model.eval()
    logger.info("checkpoint_loaded", path=str(path), training_step=manifest.training_step)
    return model, manifest
