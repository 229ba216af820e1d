"""
Quasi-static planar pushing.

A disc pusher moves at the commanded velocity; when it penetrates the
square block, a spring force along the contact normal translates and
rotates the block in proportion to force and torque. The world frame is
y-up and the arena spans [-world_extent/2, world_extent/2] on both axes.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Tuple
from pathlib import Path
import numpy as np

from src.core.config import settings
from src.core.exceptions import ConfigurationException
from src.core.logging_config import get_logger
from src.models.pydantic_models import CONTROL_DIM, HAPTIC_DIM, LABEL_DIM, PROPRIO_DIM, SimConfig
from src.models.schemas import DatasetManifest
from src.services.dataset_service import Dataset, expected_shapes, save_dataset

logger = get_logger(__name__)

BLOCK_INTENSITY = 0.8
PUSHER_INTENSITY = 0.4

# Stream id for the train/eval split, outside the trajectory index range
SPLIT_STREAM = 2 ** 31 - 1

@dataclass(frozen=True)
class PushState:
    block_x: float = 0.0
    block_y: float = 0.0
    block_theta: float = 0.0
    pusher_x: float = 0.0
    pusher_y: float = 0.0

    @property
    def label(self) -> np.ndarray:
        return np.array([self.block_x, self.block_y, self.block_theta])

@dataclass(frozen=True)
class Contact:
    depth: float
    normal: np.ndarray  # unit vector pointing into the block
    offset: np.ndarray  # contact point relative to the block center

def _rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])

def find_contact(state: PushState, config: SimConfig) -> Optional[Contact]:
    """Penetration of the pusher disc into the block, None when they do not touch"""
    half, radius = config.block_half_side, config.pusher_radius
    rotation = _rotation(state.block_theta)
    center = np.array([state.block_x, state.block_y])
    local = rotation.T @ (np.array([state.pusher_x, state.pusher_y]) - center)

    closest = np.clip(local, -half, half)
    gap = local - closest
    distance = float(np.linalg.norm(gap))
    if distance > 0.0:
        if distance >= radius:
            return None
        depth = radius - distance
        outward = gap / distance
    else:
        # pusher center inside the block: push out through the nearest face
        axis = int(np.argmin(half - np.abs(local)))
        outward = np.zeros(2)
        outward[axis] = 1.0 if local[axis] >= 0 else -1.0
        closest = local.copy()
        closest[axis] = half * outward[axis]
        depth = radius + (half - abs(local[axis]))
    return Contact(depth=depth, normal=-(rotation @ outward), offset=rotation @ closest)

def simulate_step(state: PushState,
                  u: np.ndarray,
                  dt: float,
                  config: SimConfig,
                  rng: Optional[np.random.Generator] = None) -> Tuple[PushState, np.ndarray, np.ndarray]:
    """
    Advance one substep. Returns (next state, haptic [fx, fy, tau], proprio [px, py, vx, vy]).

    Haptic readings are exactly zero out of contact; with contact they carry
    Gaussian sensor noise. Proprioception is always noisy. The block moves
    only under a nonzero contact force.
    """
    if dt <= 0:
        raise ConfigurationException(f"simulate_step: dt must be > 0, got {dt}", error_code="BAD_DT")
    u = np.asarray(u, dtype=np.float64)
    limit_pusher = config.world_extent / 2 - config.pusher_radius
    limit_block = config.world_extent / 2 - config.block_half_side

    pusher_x = float(np.clip(state.pusher_x + u[0] * dt, -limit_pusher, limit_pusher))
    pusher_y = float(np.clip(state.pusher_y + u[1] * dt, -limit_pusher, limit_pusher))
    velocity = np.array([pusher_x - state.pusher_x, pusher_y - state.pusher_y]) / dt
    moved = replace(state, pusher_x=pusher_x, pusher_y=pusher_y)

    haptic = np.zeros(HAPTIC_DIM)
    contact = find_contact(moved, config)
    if contact is not None:
        force = config.contact_stiffness * contact.depth * contact.normal
        torque = float(contact.offset[0] * force[1] - contact.offset[1] * force[0])
        moved = replace(
            moved,
            block_x=float(np.clip(moved.block_x + config.translational_mobility * force[0] * dt,
                                  -limit_block, limit_block)),
            block_y=float(np.clip(moved.block_y + config.translational_mobility * force[1] * dt,
                                  -limit_block, limit_block)),
            block_theta=moved.block_theta + config.rotational_mobility * torque * dt,
        )
        haptic = np.array([force[0], force[1], torque])
        if rng is not None and config.sensor_noise_std > 0:
            haptic = haptic + rng.normal(0.0, config.sensor_noise_std, size=HAPTIC_DIM)

    proprio = np.array([pusher_x, pusher_y, velocity[0], velocity[1]])
    if rng is not None and config.sensor_noise_std > 0:
        proprio = proprio + rng.normal(0.0, config.sensor_noise_std, size=PROPRIO_DIM)
    return moved, haptic, proprio

def _pixel_centers(config: SimConfig) -> Tuple[np.ndarray, np.ndarray]:
    size = config.image_size
    # symmetric about zero so mirrored configurations rasterize identically
    coords = (np.arange(size) + 0.5 - size / 2) * (config.world_extent / size)
    xs, ys = np.meshgrid(coords, -coords)  # row 0 is the top of the arena
    return xs, ys

def render(state: PushState, config: SimConfig, draw_block: bool = True, draw_pusher: bool = True) -> np.ndarray:
    """Grayscale image: block 0.8 and pusher 0.4 on a zero background"""
    xs, ys = _pixel_centers(config)
    image = np.zeros((config.image_size, config.image_size))
    if draw_block:
        c, s = np.cos(state.block_theta), np.sin(state.block_theta)
        dx, dy = xs - state.block_x, ys - state.block_y
        local_x = c * dx + s * dy
        local_y = -s * dx + c * dy
        half = config.block_half_side
        image[(np.abs(local_x) <= half) & (np.abs(local_y) <= half)] = BLOCK_INTENSITY
    if draw_pusher:
        inside = (xs - state.pusher_x) ** 2 + (ys - state.pusher_y) ** 2 <= config.pusher_radius ** 2
        image[inside] = PUSHER_INTENSITY
    return image

def initial_state(config: SimConfig, rng: np.random.Generator) -> PushState:
    """Block at the arena center, pusher at a random point on the start circle"""
    angle = rng.uniform(0.0, 2 * np.pi)
    return PushState(pusher_x=config.start_radius * np.cos(angle),
                     pusher_y=config.start_radius * np.sin(angle))

def action_mean(state: PushState, config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Commanded velocity pointing from the pusher toward the block, heading perturbed"""
    heading = np.arctan2(state.block_y - state.pusher_y, state.block_x - state.pusher_x)
    heading += rng.normal(0.0, config.action_heading_std)
    return config.action_speed * np.array([np.cos(heading), np.sin(heading)])

def simulate_trajectory(config: SimConfig, index: int) -> dict:
    """One trajectory with its own RNG stream derived from (seed, index)"""
    rng = np.random.default_rng([config.seed, index])
    steps, substeps = config.seq_len, config.substeps
    dt = config.frame_substep_dt

    images = np.zeros((steps, config.image_size, config.image_size))
    proprio = np.zeros((steps, substeps, PROPRIO_DIM))
    haptic = np.zeros((steps, substeps, HAPTIC_DIM))
    controls = np.zeros((steps - 1, CONTROL_DIM))
    labels = np.zeros((steps, LABEL_DIM))

    state = initial_state(config, rng)
    mean = action_mean(state, config, rng)
    contact = False
    for t in range(steps):
        # frame 0 is a stationary window; u_t drives the substeps leading to frame t + 1
        u = np.zeros(CONTROL_DIM)
        if t > 0:
            u = mean + rng.normal(0.0, config.action_std, size=CONTROL_DIM)
            controls[t - 1] = u
        for w in range(substeps):
            state, haptic[t, w], proprio[t, w] = simulate_step(state, u, dt, config, rng)
        contact = contact or bool(np.any(haptic[t, :, :2] != 0))
        images[t] = render(state, config)
        labels[t] = state.label

    return {
        'images': images,
        'proprio': proprio,
        'haptic': haptic,
        'controls': controls,
        'labels': labels,
        'contact': contact,
    }

def _simulate_indexed(args) -> dict:
    config, index = args
    return simulate_trajectory(config, index)

def split_indices(num_trajectories: int, eval_fraction: float, seed: int):
    """Seeded train/eval split; both index lists sorted"""
    rng = np.random.default_rng([seed, SPLIT_STREAM])
    order = rng.permutation(num_trajectories)
    num_eval = min(num_trajectories - 1, max(1, int(round(num_trajectories * eval_fraction))))
    return sorted(int(i) for i in order[num_eval:]), sorted(int(i) for i in order[:num_eval])

def generate_dataset(config: SimConfig,
                     path: Optional[Path] = None,
                     num_trajectories: Optional[int] = None,
                     workers: Optional[int] = None) -> Dataset:
    """
    Simulate N trajectories and (when path is given) write them atomically.

    Trajectories run in a process pool capped by LF_THREADS; results are
    ordered by index whatever the completion order.
    """
    count = config.num_trajectories if num_trajectories is None else num_trajectories
    if count < 1:
        raise ConfigurationException(f"generate_dataset: N must be >= 1, got {count}", error_code="BAD_N")
    config = config.model_copy(update={'num_trajectories': count})
    workers = max(1, min(settings.LF_THREADS if workers is None else workers, count))

    jobs = [(config, index) for index in range(count)]
    if workers == 1:
        results = [_simulate_indexed(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_indexed, jobs, chunksize=max(1, count // (4 * workers))))

    arrays = {name: np.stack([r[name] for r in results]).astype(np.float32)
              for name in ('images', 'proprio', 'haptic', 'controls', 'labels')}
    contact_rate = float(np.mean([r['contact'] for r in results]))
    train_indices, eval_indices = split_indices(count, config.eval_fraction, config.seed)

    manifest = DatasetManifest(
        version=settings.DATASET_FORMAT_VERSION,
        num_trajectories=count,
        seq_len=config.seq_len,
        image_shape=[config.image_size, config.image_size],
        substeps=config.substeps,
        modality_dims={'proprio': PROPRIO_DIM, 'haptic': HAPTIC_DIM, 'controls': CONTROL_DIM, 'labels': LABEL_DIM},
        seed=config.seed,
        sim_config=config,
        train_indices=train_indices,
        eval_indices=eval_indices,
        contact_rate=contact_rate,
        files={},
    )
    manifest.files = expected_shapes(manifest)
    dataset = Dataset(manifest=manifest, **arrays)
    logger.info("dataset_generated",
                trajectories=count,
                seq_len=config.seq_len,
                image_size=config.image_size,
                substeps=config.substeps,
                contact_rate=contact_rate,
                workers=workers)
    if contact_rate < 0.8:
        logger.warning("low_contact_rate", contact_rate=contact_rate)
    if path is not None:
        save_dataset(dataset, path)
    return dataset
