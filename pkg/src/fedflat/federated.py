"""Server and device state machines for the three federated algorithms.

``fedavg`` runs plain local SGD and averages the returned models. ``fedsam``
evaluates each descent gradient at an adversarially perturbed point
theta + rho * g / ||g|| built from the same batch. ``fedvssam`` additionally
anchors both the perturbation direction and the update direction to a
server-maintained adjusted direction h:

    local search direction   d = (1 - gamma_l) * h + gamma_l * g
    perturbed point          theta~ = theta + rho * d / ||d||
    update direction         u = (1 - gamma_l) * h + gamma_l * g~
    local step               theta <- theta - eta_l * u

after which the server rescales the average local displacement into a
pseudo-gradient g+ = (theta - mean_i theta_i) / (eta_l * K), folds it into h
by exponential moving average h <- (1 - gamma_g) * h + gamma_g * g+, and
steps theta <- theta - eta_g * h. Devices upload exactly one parameter
vector; no auxiliary state travels uplink.

Setting gamma_l = gamma_g = 1 with eta_g = eta_l * K makes fedvssam reproduce
fedsam trajectories; fedsam with rho = 0 reproduces fedavg. Both hold
numerically under shared RNG streams and are pinned by tests.

Within a round the per-device computations are mutually independent given the
broadcast (theta, h); aggregation sums in device-id order, so any worker count
yields bit-identical results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, DeviceShard, Partition
from .errors import NumericError
from .models import Batch, ModelSpec, forward_loss, gradient, init_params
from .rng import stream

__all__ = [
    "ALGORITHMS",
    "AlgoConfig",
    "ServerState",
    "DeviceUpdate",
    "LocalTrace",
    "RoundTranscript",
    "sample_devices",
    "sam_perturb",
    "mix_direction",
    "local_round_fedavg",
    "local_round_fedsam",
    "local_round_vssam",
    "aggregate_avg",
    "aggregate_vssam",
    "global_update_vssam",
    "run_training",
]

ALGORITHMS = ("fedavg", "fedsam", "fedvssam")

# Below this norm the linearized inner maximization is undefined; a
# stationary point needs no adversarial probe, so the point is kept as is.
NORM_FLOOR = 1e-12


@dataclass
class AlgoConfig:
    """All hyperparameters of one training run."""

    algorithm: str = "fedvssam"
    rounds: int = 100  # T
    local_steps: int = 10  # K
    n_devices: int = 20  # N
    devices_per_round: int = 4  # S
    rho: float = 0.05
    local_lr: float = 0.05
    global_lr: float = 1.0
    gamma_l: float = 0.4
    gamma_g: float = 0.6
    batch_size: int = 32
    master_seed: int = 0
    local_steps_as_epochs: bool = False
    sampling_with_replacement: bool = False

    def validate(self) -> "AlgoConfig":
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if not 1 <= self.devices_per_round <= self.n_devices:
            raise ValueError(
                f"devices_per_round must be in [1, {self.n_devices}], got {self.devices_per_round}"
            )
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.local_lr <= 0 or self.global_lr <= 0:
            raise ValueError("learning rates must be positive")
        for name, g in (("gamma_l", self.gamma_l), ("gamma_g", self.gamma_g)):
            if not 0.0 < g <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {g}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return self


@dataclass
class ServerState:
    theta: np.ndarray
    h: np.ndarray
    round: int = 0

    def __post_init__(self):
        if self.theta.shape != self.h.shape:
            raise ValueError("theta and h must share a dimension")


@dataclass
class DeviceUpdate:
    """The complete device uplink: one parameter vector, nothing else."""

    device_id: int
    theta_end: np.ndarray


@dataclass
class LocalTrace:
    """Server-side observability of one device round (never uplinked)."""

    losses: List[float] = field(default_factory=list)
    directions: Optional[List[np.ndarray]] = None


@dataclass
class RoundTranscript:
    round: int
    selected: np.ndarray
    agg_direction: Optional[np.ndarray]
    h_after: Optional[np.ndarray]
    local_losses: Dict[int, List[float]]
    update_directions: Optional[Dict[int, List[np.ndarray]]] = None


def sample_devices(n_devices: int, n_selected: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform without-replacement subset via partial Fisher-Yates, sorted."""
    if not 1 <= n_selected <= n_devices:
        raise ValueError(f"need 1 <= n_selected <= {n_devices}, got {n_selected}")
    ids = np.arange(n_devices)
    for j in range(n_selected):
        k = int(rng.integers(j, n_devices))
        ids[j], ids[k] = ids[k], ids[j]
    return np.sort(ids[:n_selected])


def sam_perturb(params: np.ndarray, direction: np.ndarray, rho: float) -> np.ndarray:
    """params + rho * direction / ||direction||, or params when degenerate."""
    if params.shape != direction.shape:
        raise ValueError("params and direction must share a dimension")
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    if not np.all(np.isfinite(direction)):
        raise NumericError("perturbation direction contains non-finite entries")
    norm = float(np.linalg.norm(direction))
    if rho == 0.0 or norm < NORM_FLOOR:
        return params.copy()
    return params + (rho / norm) * direction


def mix_direction(h: np.ndarray, g: np.ndarray, gamma_l: float) -> np.ndarray:
    """Convex combination (1 - gamma_l) * h + gamma_l * g."""
    if h.shape != g.shape:
        raise ValueError("h and g must share a dimension")
    if not 0.0 < gamma_l <= 1.0:
        raise ValueError(f"gamma_l must be in (0, 1], got {gamma_l}")
    return (1.0 - gamma_l) * h + gamma_l * g


def _local_iterations(config: AlgoConfig, shard: DeviceShard) -> int:
    if not config.local_steps_as_epochs:
        return config.local_steps
    return config.local_steps * max(1, -(-shard.n // config.batch_size))


def _uniform_iterations(config: AlgoConfig, partition: Partition) -> int:
    # The pseudo-gradient rescaling divides by one shared iteration count, so
    # epochs mode applies a single multiplier from the mean shard size.
    if not config.local_steps_as_epochs:
        return config.local_steps
    mean_n = float(np.mean(partition.device_sizes()))
    return config.local_steps * max(1, int(np.ceil(mean_n / config.batch_size)))


def vssam_step_direction(
    spec: ModelSpec,
    params: np.ndarray,
    h: np.ndarray,
    batch: Batch,
    gamma_l: float,
    rho: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One device step's (g, g~, u) triple at a fixed (params, h, batch).

    Both gradients are evaluated on the same batch: the batch that builds the
    search direction also scores the perturbed point.
    """
    g = gradient(spec, params, batch)
    search = mix_direction(h, g, gamma_l)
    perturbed = sam_perturb(params, search, rho)
    g_tilde = gradient(spec, perturbed, batch)
    u = mix_direction(h, g_tilde, gamma_l)
    return g, g_tilde, u


def local_round_vssam(
    spec: ModelSpec,
    shard: DeviceShard,
    theta: np.ndarray,
    h: np.ndarray,
    config: AlgoConfig,
    record_directions: bool = False,
    n_steps: Optional[int] = None,
) -> Tuple[DeviceUpdate, LocalTrace]:
    trace = LocalTrace(directions=[] if record_directions else None)
    params = theta.copy()
    try:
        for k in range(n_steps if n_steps is not None else _local_iterations(config, shard)):
            batch = shard.next_batch(config.batch_size)
            trace.losses.append(forward_loss(spec, params, batch))
            _, _, u = vssam_step_direction(spec, params, h, batch, config.gamma_l, config.rho)
            if record_directions:
                trace.directions.append(u)
            params = params - config.local_lr * u
    except (NumericError, FloatingPointError) as exc:
        raise NumericError(f"device {shard.device_id}, local step {k}: {exc}") from exc
    return DeviceUpdate(shard.device_id, params), trace


def local_round_fedsam(
    spec: ModelSpec,
    shard: DeviceShard,
    theta: np.ndarray,
    config: AlgoConfig,
    n_steps: Optional[int] = None,
) -> Tuple[DeviceUpdate, LocalTrace]:
    trace = LocalTrace()
    params = theta.copy()
    try:
        for k in range(n_steps if n_steps is not None else _local_iterations(config, shard)):
            batch = shard.next_batch(config.batch_size)
            trace.losses.append(forward_loss(spec, params, batch))
            g = gradient(spec, params, batch)
            perturbed = sam_perturb(params, g, config.rho)
            g_tilde = gradient(spec, perturbed, batch)
            params = params - config.local_lr * g_tilde
    except (NumericError, FloatingPointError) as exc:
        raise NumericError(f"device {shard.device_id}, local step {k}: {exc}") from exc
    return DeviceUpdate(shard.device_id, params), trace


def local_round_fedavg(
    spec: ModelSpec,
    shard: DeviceShard,
    theta: np.ndarray,
    config: AlgoConfig,
    n_steps: Optional[int] = None,
) -> Tuple[DeviceUpdate, LocalTrace]:
    trace = LocalTrace()
    params = theta.copy()
    try:
        for k in range(n_steps if n_steps is not None else _local_iterations(config, shard)):
            batch = shard.next_batch(config.batch_size)
            trace.losses.append(forward_loss(spec, params, batch))
            params = params - config.local_lr * gradient(spec, params, batch)
    except (NumericError, FloatingPointError) as exc:
        raise NumericError(f"device {shard.device_id}, local step {k}: {exc}") from exc
    return DeviceUpdate(shard.device_id, params), trace


def _sorted_updates(updates: Sequence[DeviceUpdate]) -> List[DeviceUpdate]:
    if not updates:
        raise ValueError("no device updates to aggregate")
    return sorted(updates, key=lambda u: u.device_id)


def aggregate_avg(updates: Sequence[DeviceUpdate]) -> np.ndarray:
    """Plain mean of returned models, summed in device-id order."""
    ordered = _sorted_updates(updates)
    total = ordered[0].theta_end.copy()
    for upd in ordered[1:]:
        total += upd.theta_end
    return total / len(ordered)


def aggregate_vssam(
    theta: np.ndarray,
    updates: Sequence[DeviceUpdate],
    local_lr: float,
    local_steps: int,
) -> np.ndarray:
    """(theta - mean_i theta_i) / (eta_l * K).

    By telescoping the local recursion this equals the mean of all local
    update directions u over the selected devices and steps.
    """
    return (theta - aggregate_avg(updates)) / (local_lr * local_steps)


def global_update_vssam(
    server: ServerState, agg_direction: np.ndarray, gamma_g: float, global_lr: float
) -> ServerState:
    """EMA the adjusted direction first, then descend along it."""
    if agg_direction.shape != server.h.shape:
        raise ValueError("aggregated direction has the wrong dimension")
    h_next = (1.0 - gamma_g) * server.h + gamma_g * agg_direction
    theta_next = server.theta - global_lr * h_next
    return ServerState(theta=theta_next, h=h_next, round=server.round + 1)


def run_training(
    spec: ModelSpec,
    dataset: Dataset,
    partition: Partition,
    config: AlgoConfig,
    max_workers: int = 1,
    record_directions: bool = False,
    round_hook: Optional[Callable[[ServerState, RoundTranscript], None]] = None,
) -> Tuple[ServerState, List[RoundTranscript]]:
    """Run T rounds of the configured algorithm; deterministic per master_seed.

    The initial model and every batch/sampling draw come from streams keyed
    only by (master_seed, purpose, device, round), so two algorithms given the
    same master_seed see the same device subsets and batch sequences.
    """
    config.validate()
    if partition.n_devices != config.n_devices:
        raise ValueError(
            f"partition has {partition.n_devices} devices, config expects {config.n_devices}"
        )
    theta0 = init_params(spec, stream(config.master_seed, "init"))
    state = ServerState(theta=theta0, h=np.zeros_like(theta0), round=0)
    transcripts: List[RoundTranscript] = []
    k_eff = _uniform_iterations(config, partition)

    def device_job(device_id: int, round_: int, theta: np.ndarray, h_broadcast: np.ndarray):
        shard = DeviceShard(
            dataset,
            device_id,
            partition.assignments[device_id],
            stream(config.master_seed, "batch", device_id, round_),
            with_replacement=config.sampling_with_replacement,
        )
        try:
            if config.algorithm == "fedvssam":
                return local_round_vssam(
                    spec, shard, theta, h_broadcast, config,
                    record_directions=record_directions, n_steps=k_eff,
                )
            if config.algorithm == "fedsam":
                return local_round_fedsam(spec, shard, theta, config, n_steps=k_eff)
            return local_round_fedavg(spec, shard, theta, config, n_steps=k_eff)
        except Exception as exc:
            raise RuntimeError(f"round {round_}, device {device_id}: {exc}") from exc

    for t in range(config.rounds):
        selected = sample_devices(
            config.n_devices, config.devices_per_round, stream(config.master_seed, "sample", round_=t)
        )
        h_broadcast = state.h.view()
        h_broadcast.flags.writeable = False  # devices read h, never write it
        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                results = list(
                    pool.map(lambda i: device_job(int(i), t, state.theta, h_broadcast), selected)
                )
        else:
            results = [device_job(int(i), t, state.theta, h_broadcast) for i in selected]

        updates = [upd for upd, _ in results]
        losses = {upd.device_id: trace.losses for upd, trace in results}
        directions = (
            {upd.device_id: trace.directions for upd, trace in results}
            if record_directions and config.algorithm == "fedvssam"
            else None
        )

        if config.algorithm == "fedvssam":
            agg = aggregate_vssam(state.theta, updates, config.local_lr, k_eff)
            state = global_update_vssam(state, agg, config.gamma_g, config.global_lr)
            transcript = RoundTranscript(t, selected, agg, state.h.copy(), losses, directions)
        else:
            theta_next = aggregate_avg(updates)
            state = ServerState(theta=theta_next, h=state.h, round=t + 1)
            transcript = RoundTranscript(t, selected, None, None, losses, None)

        transcripts.append(transcript)
        if round_hook is not None:
            round_hook(state, transcript)
    return state, transcripts
