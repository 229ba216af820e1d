from dataclasses import dataclass, field
from typing import List, Optional, Sequence
from pathlib import Path
import numpy as np
import pandas as pd
import torch

from src.core.exceptions import ConfigurationException, NumericException, TrainingDivergedException
from src.core.logging_config import get_logger
from src.models.pydantic_models import Modality
from src.services.dataset_service import Dataset, check_compatible
from src.services.diffcore import AdamState, adam_step, backward
from src.services.fusion_model import TRANSITION_GRU_GROUP, MultimodalLatentModel

logger = get_logger(__name__)

TRACE_COLUMNS = ['step', 'epoch', 'loss', 'elbo', 'kl', 'gru_grad_norm']

@dataclass
class TrainingResult:
    model: MultimodalLatentModel
    loss_trace: pd.DataFrame
    steps: int
    epoch_elbo: List[float] = field(default_factory=list)

class TrainingService:
    """Service for fitting a model by maximizing the batch-mean ELBO"""

    def steps_per_epoch(self, num_sequences: int, batch_size: int) -> int:
        return num_sequences // batch_size

    def train(self,
              model: MultimodalLatentModel,
              dataset: Dataset,
              seed: int,
              indices: Optional[Sequence[int]] = None,
              epochs: Optional[int] = None) -> TrainingResult:
        """
        Run epochs x floor(N / batch_size) Adam steps over the training split.

        Mini-batches come from a seeded permutation per epoch; gradient
        clipping applies to the transition GRU only. On a non-finite loss or
        update the parameters are restored to the last good step and
        TrainingDivergedException is raised with the partial trace attached.
        """
        config = model.config
        epochs = config.epochs if epochs is None else epochs
        check_compatible(dataset.manifest, config)
        indices = np.asarray(dataset.split('train') if indices is None else indices, dtype=np.int64)
        steps_per_epoch = self.steps_per_epoch(len(indices), config.batch_size)
        if epochs > 0 and steps_per_epoch == 0:
            raise ConfigurationException(
                f"batch_size {config.batch_size} exceeds the {len(indices)} training sequences",
                error_code="EMPTY_EPOCH",
            )

        generator = torch.Generator().manual_seed(seed)
        store = model.parameter_store()
        state = AdamState.for_store(store, config.learning_rate)
        with_images = Modality.IMAGE in model.modalities
        reconstruction_columns = [f'reconstruction_{m.value}' for m in model.modalities]
        rows, epoch_elbo = [], []
        step = 0
        last_good, last_good_step = store.snapshot(), 0

        model.train()
        for epoch in range(epochs):
            order = indices[torch.randperm(len(indices), generator=generator).numpy()]
            for position in range(steps_per_epoch):
                chunk = order[position * config.batch_size:(position + 1) * config.batch_size]
                batch = dataset.batch(chunk, dtype=model.dtype, with_images=with_images)
                try:
                    breakdown = model.elbo(batch, generator=generator)
                    loss = -breakdown.mean()
                    if not bool(torch.isfinite(loss)):
                        raise NumericException("train: non-finite loss", error_code="NON_FINITE",
                                               details={"step": step + 1})
                except NumericException as e:
                    store.restore(last_good)
                    self._diverged(rows, reconstruction_columns, last_good_step, e)

                # parameters that produced a finite loss
                last_good, last_good_step = store.snapshot(), step
                backward(loss)
                grad_norm = adam_step(store, state, config.learning_rate,
                                      clip_norm=config.clip_norm, group=TRANSITION_GRU_GROUP)
                if not all(bool(torch.isfinite(e.tensor).all()) for e in store):
                    store.restore(last_good)
                    self._diverged(rows, reconstruction_columns, step,
                                   NumericException("train: non-finite parameters after update",
                                                    error_code="NON_FINITE", details={"step": step + 1}))

                step += 1
                row = {
                    'step': step,
                    'epoch': epoch + 1,
                    'loss': float(loss.detach()),
                    'elbo': float(breakdown.mean().detach()),
                    'kl': float(breakdown.kl.sum(dim=1).mean().detach()),
                    'gru_grad_norm': np.nan if grad_norm is None else grad_norm,
                }
                for modality, value in breakdown.reconstruction.items():
                    row[f'reconstruction_{modality.value}'] = float(value.sum(dim=1).mean().detach())
                rows.append(row)

            mean_elbo = float(np.mean([r['elbo'] for r in rows[-steps_per_epoch:]]))
            epoch_elbo.append(mean_elbo)
            logger.info("epoch_completed", epoch=epoch + 1, steps=step, mean_elbo=mean_elbo,
                        variant=config.variant.value)

        model.eval()
        return TrainingResult(model=model, loss_trace=self._trace(rows, reconstruction_columns),
                              steps=step, epoch_elbo=epoch_elbo)

    def _trace(self, rows: List[dict], reconstruction_columns: List[str]) -> pd.DataFrame:
        return pd.DataFrame(rows, columns=TRACE_COLUMNS + reconstruction_columns)

    def _diverged(self, rows, reconstruction_columns, step: int, cause: NumericException):
        logger.error("training_diverged", last_good_step=step, cause=cause.message, details=cause.details)
        exc = TrainingDivergedException(
            f"training diverged after step {step}: {cause.message}",
            last_good_step=step,
            details={"cause": cause.message, **cause.details},
        )
        exc.loss_trace = self._trace(rows, reconstruction_columns)
        raise exc from cause

    def write_loss_trace(self, trace: pd.DataFrame, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        trace.to_csv(path, index=False)
        return path

training_service = TrainingService()
