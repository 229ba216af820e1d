from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple
from pathlib import Path
import math
import numpy as np
import pandas as pd
import torch

from src.core.config import settings
from src.core.exceptions import EvaluationException
from src.core.logging_config import get_logger
from src.models.pydantic_models import Modality
from src.models.schemas import HorizonAggregate, MetricReport, RegressionReport, ReportMetadata, StepMetrics
from src.services.dataset_service import Dataset, check_compatible
from src.services.fusion_model import MultimodalLatentModel
from src.services import metrics

logger = get_logger(__name__)

ROW_COLUMNS = ['trajectory', 'step', 'se', 'pixel_rmse', 'ssim', 'psnr']

def _score_trajectory(args) -> List[dict]:
    trajectory, predicted, target = args
    rows = []
    for step in range(predicted.shape[0]):
        rows.append({
            'trajectory': trajectory,
            'step': step + 1,
            'se': metrics.se(predicted[step], target[step]),
            'pixel_rmse': metrics.pixel_rmse(predicted[step], target[step]),
            'ssim': metrics.ssim(predicted[step], target[step]),
            'psnr': metrics.psnr(predicted[step], target[step]),
        })
    return rows

def _finite_stats(values: pd.Series) -> Tuple[Optional[float], Optional[float], int]:
    """(mean, std) over finite PSNR values and the count of perfect-prediction sentinels"""
    finite = values[np.isfinite(values)]
    perfect = int((values == metrics.PSNR_PERFECT).sum())
    if finite.empty:
        return None, None, perfect
    return float(finite.mean()), float(finite.std(ddof=0)), perfect

def aggregate_rows(rows: pd.DataFrame) -> Tuple[List[StepMetrics], HorizonAggregate]:
    """Per-step and full-horizon statistics, computed from the emitted rows alone"""
    per_step = []
    for step, group in rows.groupby('step', sort=True):
        psnr_mean, psnr_std, perfect = _finite_stats(group['psnr'])
        per_step.append(StepMetrics(
            step=int(step),
            se_mean=float(group['se'].mean()),
            se_std=float(group['se'].std(ddof=0)),
            pixel_rmse_mean=float(group['pixel_rmse'].mean()),
            pixel_rmse_std=float(group['pixel_rmse'].std(ddof=0)),
            ssim_mean=float(group['ssim'].mean()),
            ssim_std=float(group['ssim'].std(ddof=0)),
            psnr_mean=psnr_mean,
            psnr_std=psnr_std,
            psnr_perfect_count=perfect,
        ))
    psnr_mean, psnr_std, perfect = _finite_stats(rows['psnr'])
    aggregate = HorizonAggregate(
        se=float(rows['se'].mean()),
        pixel_rmse=float(rows['pixel_rmse'].mean()),
        ssim=float(rows['ssim'].mean()),
        ssim_std=float(rows['ssim'].std(ddof=0)),
        psnr=psnr_mean,
        psnr_std=psnr_std,
        psnr_perfect_count=perfect,
    )
    return per_step, aggregate

def _check_protocol(dataset: Dataset, context_steps: int, horizon: int) -> None:
    if context_steps < 1 or horizon < 1 or context_steps + horizon > dataset.manifest.seq_len:
        raise EvaluationException(
            f"need 1 <= k, 1 <= h and k + h <= T; got k={context_steps}, h={horizon}, "
            f"T={dataset.manifest.seq_len}",
            error_code="BAD_PROTOCOL",
        )

class EvaluationService:
    """Service for scoring image predictions and reconstructions of a trained model"""

    def __init__(self, workers: Optional[int] = None):
        self.workers = workers

    def _check(self, model: MultimodalLatentModel, dataset: Dataset, indices: Sequence[int]) -> None:
        if len(indices) == 0:
            raise EvaluationException("evaluation split is empty", error_code="EMPTY_SPLIT")
        if Modality.IMAGE not in model.modalities:
            raise EvaluationException("image metrics need a model that decodes images", error_code="NO_IMAGES")
        check_compatible(dataset.manifest, model.config)

    def _score(self, trajectories: Sequence[int], predicted: np.ndarray, target: np.ndarray) -> List[dict]:
        jobs = list(zip(trajectories, predicted, target))
        workers = max(1, min(self.workers or settings.LF_THREADS, len(jobs)))
        if workers == 1:
            scored = [_score_trajectory(job) for job in jobs]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                scored = list(pool.map(_score_trajectory, jobs))
        return [row for rows in scored for row in rows]

    def _batches(self, indices: Sequence[int], batch_size: int):
        for start in range(0, len(indices), batch_size):
            yield [int(i) for i in indices[start:start + batch_size]]

    @torch.no_grad()
    def eval_prediction(self,
                        model: MultimodalLatentModel,
                        dataset: Dataset,
                        indices: Sequence[int],
                        context_steps: int,
                        horizon: int,
                        seed: int,
                        batch_size: int = 64) -> Tuple[MetricReport, pd.DataFrame]:
        """Predict h frames from k context frames for every trajectory and score them"""
        self._check(model, dataset, indices)
        _check_protocol(dataset, context_steps, horizon)
        rows = []
        for chunk in self._batches(list(indices), batch_size):
            batch = dataset.batch(chunk, dtype=model.dtype)
            prediction = model.predict(batch.context(context_steps),
                                       batch.future_controls(context_steps, horizon), horizon)
            predicted = prediction.decoded[Modality.IMAGE].cpu().double().numpy()
            target = batch.images[:, context_steps:context_steps + horizon].cpu().double().numpy()
            rows.extend(self._score(chunk, predicted, target))

        frame = pd.DataFrame(rows, columns=ROW_COLUMNS)
        report = self._report(frame, model, dataset, 'prediction', context_steps, horizon, seed)
        logger.info("prediction_evaluated",
                    variant=model.config.variant.value,
                    trajectories=len(indices),
                    pixel_rmse=report.aggregate.pixel_rmse,
                    ssim=report.aggregate.ssim,
                    psnr=report.aggregate.psnr)
        return report, frame

    @torch.no_grad()
    def eval_reconstruction(self,
                            model: MultimodalLatentModel,
                            dataset: Dataset,
                            indices: Sequence[int],
                            context_steps: int,
                            seed: int,
                            batch_size: int = 64) -> Tuple[MetricReport, pd.DataFrame]:
        """Score decoded filtered posterior means against the context frames themselves"""
        self._check(model, dataset, indices)
        if not 1 <= context_steps <= dataset.manifest.seq_len:
            raise EvaluationException(f"context_steps must be in [1, T], got {context_steps}",
                                      error_code="BAD_PROTOCOL")
        rows = []
        for chunk in self._batches(list(indices), batch_size):
            context = dataset.batch(chunk, dtype=model.dtype).context(context_steps)
            zeros = torch.zeros(len(chunk), context_steps, model.config.latent_dim, dtype=model.dtype)
            trace = model.filter_posterior(context, noise=zeros)
            predicted = model.decode(trace.posteriors.mean)[Modality.IMAGE].cpu().double().numpy()
            rows.extend(self._score(chunk, predicted, context.images.cpu().double().numpy()))

        frame = pd.DataFrame(rows, columns=ROW_COLUMNS)
        report = self._report(frame, model, dataset, 'reconstruction', context_steps, 0, seed)
        logger.info("reconstruction_evaluated", variant=model.config.variant.value,
                    ssim=report.aggregate.ssim, pixel_rmse=report.aggregate.pixel_rmse)
        return report, frame

    def _report(self, frame: pd.DataFrame, model: MultimodalLatentModel, dataset: Dataset, kind: str,
                context_steps: int, horizon: int, seed: int) -> MetricReport:
        per_step, aggregate = aggregate_rows(frame)
        metadata = ReportMetadata(
            kind=kind,
            variant=model.config.variant,
            context_steps=context_steps,
            horizon=horizon,
            seed=seed,
            dataset_id=dataset.dataset_id,
            num_trajectories=int(frame['trajectory'].nunique()),
        )
        return MetricReport(metadata=metadata, per_step=per_step, aggregate=aggregate)

    @torch.no_grad()
    def filmstrip(self,
                  model: MultimodalLatentModel,
                  dataset: Dataset,
                  trajectory: int,
                  context_steps: int,
                  horizon: int,
                  path: Path) -> Path:
        """Plot one trajectory's context, future frames and the model's h-step prediction"""
        self._check(model, dataset, [trajectory])
        _check_protocol(dataset, context_steps, horizon)
        batch = dataset.batch([int(trajectory)], dtype=model.dtype)
        prediction = model.predict(batch.context(context_steps),
                                   batch.future_controls(context_steps, horizon), horizon)
        images = batch.images[0].cpu().double().numpy()
        path = plot_filmstrip(images[:context_steps], images[context_steps:context_steps + horizon],
                              prediction.decoded[Modality.IMAGE][0].cpu().double().numpy(), path,
                              title=f'{model.config.variant.value}, trajectory {trajectory}')
        logger.info("filmstrip_written", path=str(path), trajectory=int(trajectory))
        return path

    def compare_reports(self, reports: Sequence[MetricReport]) -> pd.DataFrame:
        """Cross-variant table: full-horizon metrics averaged over the runs of each variant"""
        if not reports:
            raise EvaluationException("no reports to compare", error_code="EMPTY")
        records = [{
            'variant': r.metadata.variant.value,
            'seed': r.metadata.seed,
            'pixel_rmse': r.aggregate.pixel_rmse,
            'ssim': r.aggregate.ssim,
            'psnr': np.nan if r.aggregate.psnr is None else r.aggregate.psnr,
            'se': r.aggregate.se,
        } for r in reports]
        table = (pd.DataFrame(records)
                 .groupby('variant', sort=True)
                 .agg(runs=('seed', 'count'),
                      pixel_rmse=('pixel_rmse', 'mean'),
                      pixel_rmse_std=('pixel_rmse', lambda s: s.std(ddof=0)),
                      ssim=('ssim', 'mean'),
                      psnr=('psnr', 'mean'),
                      se=('se', 'mean'))
                 .reset_index())
        return table

    def write_report(self, report: MetricReport, frame: pd.DataFrame, out_dir: Path, stem: str,
                     plots: bool = True) -> List[Path]:
        """JSON report, per-trajectory CSV and (optionally) SVG per-step curves"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / f'{stem}.json'
        csv_path = out_dir / f'{stem}.csv'
        json_path.write_text(report.model_dump_json(indent=2))
        frame.to_csv(csv_path, index=False)
        written = [json_path, csv_path]
        if plots and report.per_step:
            written.append(plot_curves(report, out_dir / f'{stem}.svg'))
        logger.info("report_written", path=str(json_path), files=len(written))
        return written

def _pyplot():
    import matplotlib
    if settings.PLOT_BACKEND:
        matplotlib.use(settings.PLOT_BACKEND)
    import matplotlib.pyplot as plt
    # fixed element ids so equal figures give equal bytes
    matplotlib.rcParams['svg.hashsalt'] = 'latent-fusion'
    return plt

def _save_svg(plt, fig, path: Path) -> Path:
    path = Path(path)
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
    return path

def plot_curves(report: MetricReport, path: Path) -> Path:
    """Per-step mean curves with one-standard-deviation bands"""
    plt = _pyplot()

    steps = [s.step for s in report.per_step]
    panels = [
        ('SE', [s.se_mean for s in report.per_step], [s.se_std for s in report.per_step]),
        ('pixel RMSE', [s.pixel_rmse_mean for s in report.per_step], [s.pixel_rmse_std for s in report.per_step]),
        ('SSIM', [s.ssim_mean for s in report.per_step], [s.ssim_std for s in report.per_step]),
        ('PSNR [dB]', [math.nan if s.psnr_mean is None else s.psnr_mean for s in report.per_step],
         [math.nan if s.psnr_std is None else s.psnr_std for s in report.per_step]),
    ]
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3.2))
    for ax, (label, mean, std) in zip(axes, panels):
        mean, std = np.asarray(mean, dtype=float), np.asarray(std, dtype=float)
        ax.plot(steps, mean, marker='o', linewidth=1.5)
        ax.fill_between(steps, mean - std, mean + std, alpha=0.25)
        ax.set_xlabel('prediction step' if report.metadata.kind == 'prediction' else 'context step')
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    fig.suptitle(f'{report.metadata.variant.value} (k={report.metadata.context_steps}, '
                 f'h={report.metadata.horizon})')
    fig.tight_layout()
    return _save_svg(plt, fig, path)

def plot_filmstrip(context: np.ndarray, truth: np.ndarray, predicted: np.ndarray, path: Path,
                   title: str = '') -> Path:
    """
    Two-row filmstrip: observed frames (k context, then h future) on top,
    the model's h predicted frames underneath the future columns.
    """
    if truth.shape != predicted.shape:
        raise EvaluationException(f"filmstrip needs matching truth and prediction, got {truth.shape} "
                                  f"and {predicted.shape}", error_code="BAD_FILMSTRIP")
    plt = _pyplot()
    k, h = len(context), len(truth)
    fig, axes = plt.subplots(2, k + h, figsize=(1.2 * (k + h), 2.8), squeeze=False)
    observed = list(context) + list(truth)
    for column in range(k + h):
        for row, frame in ((0, observed[column]), (1, predicted[column - k] if column >= k else None)):
            ax = axes[row, column]
            ax.set_xticks([])
            ax.set_yticks([])
            if frame is None:
                ax.axis('off')
                continue
            ax.imshow(frame, cmap='gray', vmin=0.0, vmax=1.0, interpolation='nearest')
        axes[0, column].set_title(f't={column + 1}', fontsize=8)
    axes[0, 0].set_ylabel('observed', fontsize=8)
    axes[1, k].set_ylabel('predicted', fontsize=8)
    if title:
        fig.suptitle(title, fontsize=9)
    return _save_svg(plt, fig, path)

def plot_error_ellipses(entries: Sequence[Tuple[str, RegressionReport, np.ndarray]], path: Path) -> Path:
    """Held-out (x, y) position errors per entry with their one-standard-deviation ellipse"""
    from matplotlib.patches import Ellipse

    if not entries:
        raise EvaluationException("no regression errors to plot", error_code="EMPTY")
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    colors = plt.rcParams['axes.prop_cycle'].by_key()['color']
    for index, (label, report, errors) in enumerate(entries):
        color = colors[index % len(colors)]
        errors = np.asarray(errors, dtype=float)
        ax.scatter(errors[:, 0], errors[:, 1], s=6, alpha=0.35, color=color, label=label)
        major, minor = report.ellipse_axes
        ax.add_patch(Ellipse(xy=tuple(report.error_mean), width=2 * major, height=2 * minor,
                             angle=report.ellipse_angle, fill=False, linewidth=1.5, edgecolor=color))
    ax.axhline(0.0, color='0.6', linewidth=0.5)
    ax.axvline(0.0, color='0.6', linewidth=0.5)
    ax.set_aspect('equal', adjustable='datalim')
    ax.set_xlabel('x error')
    ax.set_ylabel('y error')
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save_svg(plt, fig, path)

evaluation_service = EvaluationService()
