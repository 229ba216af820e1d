"""
Position regression on frozen latent representations.

Latent means (filtered or rolled out) are mapped to object positions with
either ordinary least squares or a one-hidden-layer MLP. The latent model
is only read, never updated.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple
import math
import numpy as np
import pandas as pd
import torch
from torch import nn

from src.core.exceptions import RegressionException
from src.core.logging_config import get_logger
from src.models.pydantic_models import EvalConfig, Modality, RegressionMode, RegressorKind
from src.models.schemas import RegressionReport
from src.services.dataset_service import Dataset, check_compatible
from src.services.fusion_model import MultimodalLatentModel

logger = get_logger(__name__)

RIDGE_LAMBDA = 1e-8
POSITION_AXES = 2

@dataclass
class LinearRegressor:
    weights: np.ndarray
    intercept: np.ndarray
    ridge_used: bool = False

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.intercept

@dataclass
class MLPRegressor:
    network: nn.Module
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    target_mean: np.ndarray
    target_scale: np.ndarray
    best_epoch: int
    best_val_rmse: float
    diverged: bool = False
    ridge_used: bool = False

    @torch.no_grad()
    def predict(self, features: np.ndarray) -> np.ndarray:
        x = (np.asarray(features, dtype=np.float64) - self.feature_mean) / self.feature_scale
        y = self.network(torch.from_numpy(x)).numpy()
        return y * self.target_scale + self.target_mean

def _validate(features: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if features.ndim != 2 or targets.ndim != 2 or features.shape[0] != targets.shape[0]:
        raise RegressionException(
            f"features {features.shape} and targets {targets.shape} must be 2-D with equal rows",
            error_code="SHAPE_MISMATCH",
        )
    if features.shape[0] < features.shape[1] + 1:
        raise RegressionException(
            f"need at least {features.shape[1] + 1} samples for {features.shape[1]} features, "
            f"got {features.shape[0]}",
            error_code="TOO_FEW_SAMPLES",
        )
    if not (np.isfinite(features).all() and np.isfinite(targets).all()):
        raise RegressionException("features and targets must be finite", error_code="NON_FINITE")
    return features, targets

def fit_ols(features: np.ndarray, targets: np.ndarray) -> LinearRegressor:
    """Least squares through centered normal equations; ridge fallback when the Gram matrix is rank deficient"""
    features, targets = _validate(features, targets)
    feature_mean, target_mean = features.mean(axis=0), targets.mean(axis=0)
    centered = features - feature_mean
    gram = centered.T @ centered
    moment = centered.T @ (targets - target_mean)

    ridge_used = np.linalg.matrix_rank(gram) < gram.shape[0]
    if ridge_used:
        logger.warning("ols_rank_deficient", features=gram.shape[0], rank=int(np.linalg.matrix_rank(gram)))
        gram = gram + RIDGE_LAMBDA * np.eye(gram.shape[0])
    weights = np.linalg.solve(gram, moment)
    return LinearRegressor(weights=weights, intercept=target_mean - feature_mean @ weights,
                           ridge_used=bool(ridge_used))

def _scale(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    scale = values.std(axis=0)
    return mean, np.where(scale > 0, scale, 1.0)

def fit_mlp_regressor(features: np.ndarray,
                      targets: np.ndarray,
                      seed: int,
                      hidden: int = 50,
                      learning_rate: float = 1e-3,
                      max_epochs: int = 3000,
                      patience: int = 200,
                      val_fraction: float = 0.2) -> MLPRegressor:
    """
    Full-batch Adam on a hidden-50 ReLU network with early stopping on a
    held-out part of the regression data. A non-finite loss stops training
    and the best weights seen so far are kept.
    """
    features, targets = _validate(features, targets)
    rng = np.random.default_rng(seed)
    order = rng.permutation(features.shape[0])
    num_val = max(1, int(round(val_fraction * len(order))))
    val_idx, fit_idx = order[:num_val], order[num_val:]
    if len(fit_idx) == 0:
        raise RegressionException("not enough samples to hold out a validation split", error_code="TOO_FEW_SAMPLES")

    feature_mean, feature_scale = _scale(features[fit_idx])
    target_mean, target_scale = _scale(targets[fit_idx])
    x = torch.from_numpy((features - feature_mean) / feature_scale)
    y = torch.from_numpy((targets - target_mean) / target_scale)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        network = nn.Sequential(
            nn.Linear(features.shape[1], hidden),
            nn.ReLU(),
            nn.Linear(hidden, targets.shape[1]),
        ).double()
    optimizer = torch.optim.Adam(network.parameters(), lr=learning_rate)

    best_state = {k: v.clone() for k, v in network.state_dict().items()}
    best_val, best_epoch, stale, diverged = math.inf, 0, 0, False
    for epoch in range(1, max_epochs + 1):
        optimizer.zero_grad()
        loss = ((network(x[fit_idx]) - y[fit_idx]) ** 2).mean()
        if not bool(torch.isfinite(loss)):
            diverged = True
            logger.warning("mlp_regressor_diverged", epoch=epoch, best_epoch=best_epoch)
            break
        loss.backward()
        optimizer.step()

        with torch.no_grad():
            val_loss = float(((network(x[val_idx]) - y[val_idx]) ** 2).mean())
        if not math.isfinite(val_loss):
            diverged = True
            logger.warning("mlp_regressor_diverged", epoch=epoch, best_epoch=best_epoch)
            break
        if val_loss < best_val:
            best_val, best_epoch, stale = val_loss, epoch, 0
            best_state = {k: v.clone() for k, v in network.state_dict().items()}
        else:
            stale += 1
            if stale >= patience:
                break

    network.load_state_dict(best_state)
    network.eval()
    regressor = MLPRegressor(network=network, feature_mean=feature_mean, feature_scale=feature_scale,
                             target_mean=target_mean, target_scale=target_scale,
                             best_epoch=best_epoch, best_val_rmse=math.nan, diverged=diverged)
    residual = regressor.predict(features[val_idx]) - targets[val_idx]
    regressor.best_val_rmse = float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))
    logger.debug("mlp_regressor_fitted", best_epoch=best_epoch, val_rmse=regressor.best_val_rmse)
    return regressor

def error_statistics(errors: np.ndarray) -> dict:
    """Per-axis and Euclidean errors plus the one-standard-deviation error ellipse"""
    errors = np.asarray(errors, dtype=np.float64)
    covariance = np.atleast_2d(np.cov(errors.T, ddof=0))
    covariance = (covariance + covariance.T) / 2
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues, eigenvectors = np.clip(eigenvalues[order], 0.0, None), eigenvectors[:, order]
    return {
        'mean_abs_error_x': float(np.mean(np.abs(errors[:, 0]))),
        'mean_abs_error_y': float(np.mean(np.abs(errors[:, 1]))),
        'mean_abs_translation_error': float(np.mean(np.linalg.norm(errors, axis=1))),
        'error_mean': errors.mean(axis=0).tolist(),
        'error_covariance': covariance.tolist(),
        'ellipse_axes': np.sqrt(eigenvalues).tolist(),
        'ellipse_angle': float(np.degrees(np.arctan2(eigenvectors[1, 0], eigenvectors[0, 0]))),
        'position_rmse': float(np.sqrt(np.mean(np.sum(errors ** 2, axis=1)))),
    }

def held_out_errors(pairs: pd.DataFrame) -> np.ndarray:
    """(prediction - target) x, y errors of the test rows of a regress_eval pairs frame"""
    test = pairs[pairs['split'] == 'test']
    return np.stack([test['pred_x'] - test['target_x'], test['pred_y'] - test['target_y']], axis=1).astype(float)

class RegressionService:
    """Service for measuring what frozen latents know about the object position"""

    @torch.no_grad()
    def latent_pairs(self,
                     model: MultimodalLatentModel,
                     dataset: Dataset,
                     indices: Sequence[int],
                     context_steps: int,
                     horizon: int,
                     mode: RegressionMode,
                     batch_size: int = 64) -> pd.DataFrame:
        """
        One row per (trajectory, target step k+1..k+h): latent features and
        the object x, y. Predicted mode uses rolled-out prior means; filtered
        mode uses posterior means at the same steps.
        """
        if len(indices) == 0:
            raise RegressionException("regression split is empty", error_code="EMPTY_SPLIT")
        if context_steps < 1 or horizon < 1 or context_steps + horizon > dataset.manifest.seq_len:
            raise RegressionException(
                f"need 1 <= k, 1 <= h and k + h <= T; got k={context_steps}, h={horizon}",
                error_code="BAD_PROTOCOL",
            )
        check_compatible(dataset.manifest, model.config)
        with_images = Modality.IMAGE in model.modalities
        end = context_steps + horizon
        frames = []
        for start in range(0, len(indices), batch_size):
            chunk = [int(i) for i in indices[start:start + batch_size]]
            batch = dataset.batch(chunk, dtype=model.dtype, with_images=with_images)
            if mode == RegressionMode.PREDICTED:
                prediction = model.predict(batch.context(context_steps),
                                           batch.future_controls(context_steps, horizon), horizon)
                latents = prediction.latents
            else:
                window = batch.context(end)
                zeros = torch.zeros(len(chunk), end, model.config.latent_dim, dtype=model.dtype)
                latents = model.filter_posterior(window, noise=zeros).posteriors.mean[:, context_steps:end]
            latents = latents.double().numpy()
            positions = batch.labels[:, context_steps:end, :POSITION_AXES].double().numpy()
            for row, trajectory in enumerate(chunk):
                for j in range(horizon):
                    record = {'trajectory': trajectory, 'step': context_steps + j + 1,
                              'target_x': positions[row, j, 0], 'target_y': positions[row, j, 1]}
                    record.update({f'z{d}': latents[row, j, d] for d in range(latents.shape[-1])})
                    frames.append(record)
        return pd.DataFrame(frames)

    def regress_eval(self,
                     model: MultimodalLatentModel,
                     dataset: Dataset,
                     indices: Sequence[int],
                     eval_config: EvalConfig,
                     mode: RegressionMode,
                     seed: int,
                     kind: Optional[RegressorKind] = None) -> Tuple[RegressionReport, pd.DataFrame]:
        """Fit the regressor on a seeded share of the pairs and report errors on the rest"""
        kind = kind or eval_config.regressor
        k, h = eval_config.context_steps, eval_config.horizon
        pairs = self.latent_pairs(model, dataset, indices, k, h, mode, batch_size=eval_config.batch_size)

        rng = np.random.default_rng(seed)
        order = rng.permutation(len(pairs))
        num_train = int(round(eval_config.regression_train_fraction * len(pairs)))
        if num_train == 0 or num_train == len(pairs):
            raise RegressionException(f"cannot split {len(pairs)} pairs into train and test",
                                      error_code="TOO_FEW_SAMPLES")
        split = np.full(len(pairs), 'test', dtype=object)
        split[order[:num_train]] = 'train'
        pairs['split'] = split

        feature_columns = [c for c in pairs.columns if c.startswith('z')]
        features = pairs[feature_columns].to_numpy()
        targets = pairs[['target_x', 'target_y']].to_numpy()
        train, test = split == 'train', split == 'test'

        try:
            if kind == RegressorKind.OLS:
                regressor = fit_ols(features[train], targets[train])
            else:
                regressor = fit_mlp_regressor(features[train], targets[train], seed=seed,
                                              hidden=eval_config.mlp_hidden,
                                              learning_rate=eval_config.mlp_learning_rate,
                                              max_epochs=eval_config.mlp_max_epochs,
                                              patience=eval_config.mlp_patience)
        except np.linalg.LinAlgError as e:
            logger.error("regression_fit_failed", error=str(e))
            raise RegressionException(f"regression fit failed: {str(e)}", error_code="FIT_FAILED") from e

        predicted = regressor.predict(features)
        pairs['pred_x'], pairs['pred_y'] = predicted[:, 0], predicted[:, 1]
        stats = error_statistics(predicted[test] - targets[test])
        report = RegressionReport(
            regressor=kind,
            mode=mode,
            variant=model.config.variant,
            context_steps=k,
            horizon=h,
            num_train_pairs=int(train.sum()),
            num_test_pairs=int(test.sum()),
            ridge_used=regressor.ridge_used,
            diverged=getattr(regressor, 'diverged', False),
            **stats,
        )
        logger.info("regression_evaluated",
                    regressor=kind.value,
                    mode=mode.value,
                    variant=model.config.variant.value,
                    position_rmse=report.position_rmse,
                    mean_abs_translation_error=report.mean_abs_translation_error)
        return report, pairs

regression_service = RegressionService()
