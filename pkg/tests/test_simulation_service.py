import numpy as np
import pytest

from src.core.exceptions import ConfigurationException
from src.models.pydantic_models import SimConfig
from src.services.dataset_service import save_dataset
from src.services.simulation_service import (
    BLOCK_INTENSITY,
    PushState,
    find_contact,
    generate_dataset,
    render,
    simulate_step,
    simulate_trajectory,
    split_indices,
)

CONFIG = SimConfig(sensor_noise_std=0.0)
DT = CONFIG.frame_substep_dt

@pytest.mark.parametrize('seed', range(20))
def test_block_rests_without_contact(seed):
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0, 2 * np.pi)
    state = PushState(block_theta=rng.uniform(-1, 1), pusher_x=0.8 * np.cos(angle), pusher_y=0.8 * np.sin(angle))
    # moving tangentially keeps the pusher well clear of the block
    u = 0.3 * np.array([-np.sin(angle), np.cos(angle)])
    noisy = CONFIG.model_copy(update={'sensor_noise_std': 0.05})
    moved, haptic, proprio = simulate_step(state, u, DT, noisy, rng)
    assert (moved.block_x, moved.block_y, moved.block_theta) == (state.block_x, state.block_y, state.block_theta)
    assert np.array_equal(haptic, np.zeros(3))
    assert not np.array_equal(proprio[:2], [moved.pusher_x, moved.pusher_y])

def test_central_push_translates_without_rotation():
    state = PushState(pusher_x=0.0, pusher_y=-0.34)
    moved, haptic, _ = simulate_step(state, np.array([0.0, 0.4]), DT, CONFIG)
    assert moved.block_y > 0.0
    assert moved.block_x == pytest.approx(0.0, abs=1e-12)
    assert moved.block_theta == pytest.approx(0.0, abs=1e-12)
    assert haptic[1] > 0 and haptic[2] == pytest.approx(0.0, abs=1e-12)

@pytest.mark.parametrize('seed', range(20))
def test_rotation_follows_the_torque_sign(seed):
    rng = np.random.default_rng(seed)
    offset = rng.uniform(0.05, 0.2) * rng.choice([-1.0, 1.0])
    state = PushState(pusher_x=offset, pusher_y=-0.34)
    moved, haptic, _ = simulate_step(state, np.array([0.0, 0.4]), DT, CONFIG)
    # contact point on the bottom face, relative to the block center
    cross = offset * haptic[1] - (-0.25) * haptic[0]
    assert np.sign(haptic[2]) == np.sign(cross)
    assert np.sign(moved.block_theta) == np.sign(haptic[2])
    # pushing the bottom face right of center turns the block counter-clockwise (y-up frame)
    assert np.sign(moved.block_theta) == np.sign(offset)

def test_contact_normal_points_into_the_block():
    contact = find_contact(PushState(pusher_x=-0.3, pusher_y=0.0), CONFIG)
    assert contact is not None
    np.testing.assert_allclose(contact.normal, [1.0, 0.0])
    assert contact.depth == pytest.approx(0.05)
    assert find_contact(PushState(pusher_x=-0.5, pusher_y=0.0), CONFIG) is None

def test_pusher_inside_block_is_pushed_out_through_the_nearest_face():
    contact = find_contact(PushState(pusher_x=0.2, pusher_y=0.05), CONFIG)
    np.testing.assert_allclose(contact.normal, [-1.0, 0.0])
    assert contact.depth == pytest.approx(0.1 + 0.05)

def test_pusher_stays_in_the_arena():
    state = PushState(pusher_x=0.85, pusher_y=0.0)
    moved, _, proprio = simulate_step(state, np.array([10.0, 0.0]), DT, CONFIG)
    assert moved.pusher_x == pytest.approx(0.9)
    assert proprio[2] == pytest.approx(0.05 / DT)

def test_non_positive_dt_is_rejected():
    with pytest.raises(ConfigurationException):
        simulate_step(PushState(), np.zeros(2), 0.0, CONFIG)

def test_empty_arena_renders_black():
    assert not render(PushState(), CONFIG, draw_block=False, draw_pusher=False).any()

def test_block_area_matches_its_size():
    image = render(PushState(pusher_x=0.9, pusher_y=0.9), CONFIG, draw_pusher=False)
    # half side 0.25 on a 2-unit arena at 32 px covers 8 x 8 pixels
    assert int((image == BLOCK_INTENSITY).sum()) == 64

def test_centered_block_is_mirror_symmetric():
    image = render(PushState(), CONFIG, draw_pusher=False)
    assert np.array_equal(image, image[:, ::-1])
    assert np.array_equal(image, image[::-1, :])

def test_mirrored_state_renders_mirrored_image():
    state = PushState(block_x=0.2, block_y=-0.1, block_theta=0.3, pusher_x=0.5, pusher_y=0.4)
    mirrored = PushState(block_x=-0.2, block_y=-0.1, block_theta=-0.3, pusher_x=-0.5, pusher_y=0.4)
    assert np.array_equal(render(state, CONFIG)[:, ::-1], render(mirrored, CONFIG))

def test_y_up_image_orientation():
    image = render(PushState(block_y=0.5), CONFIG, draw_pusher=False)
    rows = np.nonzero(image.any(axis=1))[0]
    assert rows.max() < CONFIG.image_size // 2

def test_trajectory_shapes_and_ranges(tiny_sim_config):
    trajectory = simulate_trajectory(tiny_sim_config, 0)
    t, w = tiny_sim_config.seq_len, tiny_sim_config.substeps
    assert trajectory['images'].shape == (t, 16, 16)
    assert trajectory['proprio'].shape == (t, w, 4)
    assert trajectory['haptic'].shape == (t, w, 3)
    assert trajectory['controls'].shape == (t - 1, 2)
    assert trajectory['labels'].shape == (t, 3)
    assert trajectory['images'].min() >= 0.0 and trajectory['images'].max() <= 1.0

def test_first_frame_is_stationary(tiny_sim_config):
    trajectory = simulate_trajectory(tiny_sim_config.model_copy(update={'sensor_noise_std': 0.0}), 4)
    assert np.array_equal(trajectory['proprio'][0, :, 2:], np.zeros((tiny_sim_config.substeps, 2)))
    assert np.array_equal(trajectory['haptic'][0], np.zeros((tiny_sim_config.substeps, 3)))

@pytest.mark.parametrize('index', range(20))
def test_block_moves_only_under_force(index):
    config = SimConfig(image_size=16, substeps=4, sensor_noise_std=0.0, seed=index)
    trajectory = simulate_trajectory(config, index)
    labels, haptic = trajectory['labels'], trajectory['haptic']
    for t in range(1, config.seq_len):
        if not haptic[t].any():
            assert np.array_equal(labels[t], labels[t - 1])

def test_trajectories_are_reproducible(tiny_sim_config):
    first = simulate_trajectory(tiny_sim_config, 3)
    second = simulate_trajectory(tiny_sim_config, 3)
    other = simulate_trajectory(tiny_sim_config, 4)
    for name in ('images', 'proprio', 'haptic', 'controls', 'labels'):
        assert np.array_equal(first[name], second[name])
    assert not np.array_equal(first['controls'], other['controls'])

def test_split_is_a_seeded_partition():
    train, evaluation = split_indices(50, 0.2, seed=8)
    assert len(evaluation) == 10
    assert sorted(train + evaluation) == list(range(50))
    assert split_indices(50, 0.2, seed=8) == (train, evaluation)
    assert split_indices(50, 0.2, seed=9) != (train, evaluation)

def test_generated_dataset_is_byte_reproducible(tiny_sim_config, tmp_path):
    config = tiny_sim_config.model_copy(update={'num_trajectories': 6})
    first = generate_dataset(config, tmp_path / 'a', workers=1)
    generate_dataset(config, tmp_path / 'b', workers=2)
    for name in ['manifest.json'] + [f'{array}.bin' for array in first.arrays()]:
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()

def test_dataset_manifest(tiny_dataset, tiny_sim_config):
    manifest = tiny_dataset.manifest
    assert manifest.num_trajectories == 12
    assert manifest.seq_len == tiny_sim_config.seq_len
    assert manifest.image_shape == [16, 16]
    assert len(manifest.eval_indices) == 3
    assert tiny_dataset.images.dtype == np.float32

def test_default_physics_makes_contact():
    config = SimConfig(image_size=16, substeps=4, num_trajectories=50, seed=1)
    dataset = generate_dataset(config, workers=1)
    assert dataset.manifest.contact_rate >= 0.8

def test_rejects_empty_dataset(tiny_sim_config):
    with pytest.raises(ConfigurationException):
        generate_dataset(tiny_sim_config, num_trajectories=0)

def test_save_after_generation_round_trips(tiny_dataset, tmp_path):
    save_dataset(tiny_dataset, tmp_path / 'copy')
    assert (tmp_path / 'copy' / 'images.bin').stat().st_size == tiny_dataset.images.nbytes
