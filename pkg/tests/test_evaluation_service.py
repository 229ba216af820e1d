import math
import numpy as np
import pandas as pd
import pytest

from src.core.exceptions import EvaluationException
from src.models.pydantic_models import RegressionMode, RegressorKind, Variant
from src.models.schemas import MetricReport, RegressionReport
from src.services.evaluation_service import (
    ROW_COLUMNS,
    EvaluationService,
    aggregate_rows,
    plot_error_ellipses,
    plot_filmstrip,
)
from src.services.regression_service import error_statistics
from src.services.fusion_model import build_model
from src.services.simulation_service import generate_dataset
from src.services.training_service import TrainingService

@pytest.fixture
def service():
    return EvaluationService(workers=1)

def test_prediction_report_layout(service, tiny_model, tiny_dataset):
    indices = tiny_dataset.split('eval')
    report, rows = service.eval_prediction(tiny_model, tiny_dataset, indices, context_steps=2, horizon=3, seed=4)
    assert list(rows.columns) == ROW_COLUMNS
    assert len(rows) == len(indices) * 3
    assert [s.step for s in report.per_step] == [1, 2, 3]
    assert report.metadata.kind == 'prediction'
    assert report.metadata.variant == Variant.VHP
    assert report.metadata.num_trajectories == len(indices)
    assert report.metadata.dataset_id == tiny_dataset.dataset_id
    assert (rows['ssim'] <= 1.0).all() and (rows['pixel_rmse'] >= 0).all()

def test_aggregates_recompute_from_written_rows(service, tiny_model, tiny_dataset, tmp_path):
    report, rows = service.eval_prediction(tiny_model, tiny_dataset, tiny_dataset.split('eval'),
                                           context_steps=3, horizon=3, seed=0, batch_size=2)
    written = service.write_report(report, rows, tmp_path, 'prediction_VHP', plots=True)
    assert [p.suffix for p in written] == ['.json', '.csv', '.svg']

    per_step, aggregate = aggregate_rows(pd.read_csv(tmp_path / 'prediction_VHP.csv'))
    stored = MetricReport.model_validate_json((tmp_path / 'prediction_VHP.json').read_text())
    assert aggregate.pixel_rmse == pytest.approx(stored.aggregate.pixel_rmse, abs=1e-9)
    assert aggregate.ssim == pytest.approx(stored.aggregate.ssim, abs=1e-9)
    for recomputed, original in zip(per_step, stored.per_step):
        assert recomputed.se_mean == pytest.approx(original.se_mean, rel=1e-9)
        assert recomputed.ssim_std == pytest.approx(original.ssim_std, abs=1e-9)

def test_batching_does_not_change_scores(service, tiny_model, tiny_dataset):
    indices = tiny_dataset.split('train')
    _, whole = service.eval_prediction(tiny_model, tiny_dataset, indices, 2, 2, seed=0, batch_size=64)
    _, chunked = service.eval_prediction(tiny_model, tiny_dataset, indices, 2, 2, seed=0, batch_size=2)
    pd.testing.assert_frame_equal(whole, chunked, check_exact=False, rtol=1e-12)

def test_threaded_scoring_matches_serial(tiny_model, tiny_dataset):
    indices = tiny_dataset.split('train')
    _, serial = EvaluationService(workers=1).eval_prediction(tiny_model, tiny_dataset, indices, 2, 3, seed=0)
    _, threaded = EvaluationService(workers=3).eval_prediction(tiny_model, tiny_dataset, indices, 2, 3, seed=0)
    pd.testing.assert_frame_equal(serial, threaded)

def test_protocol_errors(service, tiny_model, tiny_dataset):
    with pytest.raises(EvaluationException) as exc_info:
        service.eval_prediction(tiny_model, tiny_dataset, [], 2, 3, seed=0)
    assert exc_info.value.error_code == 'EMPTY_SPLIT'
    with pytest.raises(EvaluationException) as exc_info:
        service.eval_prediction(tiny_model, tiny_dataset, [0], 4, 3, seed=0)
    assert exc_info.value.error_code == 'BAD_PROTOCOL'

def test_models_without_images_cannot_be_scored(service, make_config, tiny_dataset):
    model = build_model(make_config(Variant.VHP, include_image=False))
    with pytest.raises(EvaluationException) as exc_info:
        service.eval_prediction(model, tiny_dataset, [0], 2, 2, seed=0)
    assert exc_info.value.error_code == 'NO_IMAGES'

def test_reconstruction_report(service, tiny_model, tiny_dataset):
    report, rows = service.eval_reconstruction(tiny_model, tiny_dataset, [0, 1], context_steps=4, seed=0)
    assert report.metadata.kind == 'reconstruction'
    assert report.metadata.horizon == 0
    assert sorted(rows['step'].unique()) == [1, 2, 3, 4]

def test_perfect_predictions_are_counted_not_averaged():
    rows = pd.DataFrame([
        {'trajectory': 0, 'step': 1, 'se': 0.0, 'pixel_rmse': 0.0, 'ssim': 1.0, 'psnr': math.inf},
        {'trajectory': 1, 'step': 1, 'se': 2.56, 'pixel_rmse': 0.1, 'ssim': 0.5, 'psnr': 20.0},
        {'trajectory': 0, 'step': 2, 'se': 0.0, 'pixel_rmse': 0.0, 'ssim': 1.0, 'psnr': math.inf},
    ])
    per_step, aggregate = aggregate_rows(rows)
    assert per_step[0].psnr_mean == pytest.approx(20.0)
    assert per_step[0].psnr_perfect_count == 1
    assert per_step[1].psnr_mean is None and per_step[1].psnr_perfect_count == 1
    assert aggregate.psnr == pytest.approx(20.0) and aggregate.psnr_perfect_count == 2
    assert per_step[0].pixel_rmse_std == pytest.approx(0.05)

def test_compare_reports_groups_by_variant(service, make_config, tiny_dataset):
    reports = []
    for variant, seed in [(Variant.V, 0), (Variant.V, 1), (Variant.VP, 0)]:
        model = build_model(make_config(variant, seed=seed))
        reports.append(service.eval_prediction(model, tiny_dataset, [0, 1], 2, 2, seed=seed)[0])
    table = service.compare_reports(reports)
    assert table['variant'].tolist() == ['V', 'VP']
    assert table['runs'].tolist() == [2, 1]
    expected = (reports[0].aggregate.pixel_rmse + reports[1].aggregate.pixel_rmse) / 2
    assert table.loc[0, 'pixel_rmse'] == pytest.approx(expected)
    with pytest.raises(EvaluationException):
        service.compare_reports([])

def test_svg_output_is_reproducible(service, tiny_model, tiny_dataset, tmp_path):
    report, rows = service.eval_prediction(tiny_model, tiny_dataset, [0, 1], 2, 2, seed=0)
    service.write_report(report, rows, tmp_path / 'a', 'p')
    service.write_report(report, rows, tmp_path / 'b', 'p')
    assert (tmp_path / 'a' / 'p.svg').read_bytes() == (tmp_path / 'b' / 'p.svg').read_bytes()

def test_filmstrip_is_reproducible(service, tiny_model, tiny_dataset, tmp_path):
    first = service.filmstrip(tiny_model, tiny_dataset, 0, context_steps=2, horizon=3, path=tmp_path / 'a.svg')
    second = service.filmstrip(tiny_model, tiny_dataset, 0, context_steps=2, horizon=3, path=tmp_path / 'b.svg')
    content = first.read_bytes()
    assert content == second.read_bytes()
    # 2 + 3 observed frames and 3 predicted frames
    assert content.count(b'<image') == 8

def test_filmstrip_protocol_errors(service, tiny_model, tiny_dataset, tmp_path):
    with pytest.raises(EvaluationException):
        service.filmstrip(tiny_model, tiny_dataset, 0, context_steps=4, horizon=3, path=tmp_path / 'x.svg')
    frames = np.zeros((3, 16, 16))
    with pytest.raises(EvaluationException):
        plot_filmstrip(frames[:2], frames, frames[:2], tmp_path / 'y.svg')

def ellipse_entry(seed, mode):
    rng = np.random.default_rng(seed)
    errors = rng.normal(size=(200, 2)) @ np.array([[2.0, 0.0], [0.5, 1.0]])
    report = RegressionReport(regressor=RegressorKind.OLS, mode=mode, variant=Variant.VHP, context_steps=2,
                              horizon=3, num_train_pairs=800, num_test_pairs=200, **error_statistics(errors))
    return mode.value, report, errors

def test_error_ellipse_plot_is_reproducible(tmp_path):
    entries = [ellipse_entry(0, RegressionMode.FILTERED), ellipse_entry(1, RegressionMode.PREDICTED)]
    first = plot_error_ellipses(entries, tmp_path / 'a.svg')
    second = plot_error_ellipses(entries, tmp_path / 'b.svg')
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes() != plot_error_ellipses(entries[:1], tmp_path / 'c.svg').read_bytes()
    with pytest.raises(EvaluationException):
        plot_error_ellipses([], tmp_path / 'd.svg')


@pytest.mark.slow
def test_training_improves_reconstruction(service, make_config, tiny_sim_config):
    dataset = generate_dataset(tiny_sim_config.model_copy(update={'num_trajectories': 60}), workers=1)
    indices = dataset.split('eval')
    untrained = build_model(make_config(Variant.V, epochs=20, batch_size=8, learning_rate=3e-3))
    before, _ = service.eval_reconstruction(untrained, dataset, indices, context_steps=4, seed=0)
    TrainingService().train(untrained, dataset, seed=0)
    after, _ = service.eval_reconstruction(untrained, dataset, indices, context_steps=4, seed=0)
    assert after.aggregate.pixel_rmse < before.aggregate.pixel_rmse
    assert after.aggregate.ssim > before.aggregate.ssim
