"""Diagnostics for how compatible device-local flat regions are.

The central quantity is the per-device flatness proxy

    s_i(theta, rho) = F_i(theta + rho * d_i / ||d_i||) - F_i(theta)

where F_i is evaluated on the device's full shard while the probe direction
d_i may be stochastic. The dispersion of the proxies across devices,
(1/N) * sum_i (s_i - mean)^2, measures how much the devices disagree about
which nearby region is flat; zero means they all see the same local geometry.

Two error sources feed that dispersion and are measured here exactly by
enumerating single-sample batches:

* the gradient bias delta_i = grad F_i - grad F (data heterogeneity), and
* the batch deviation zeta_i = g_i - grad F_i (batch-to-batch gradient noise).

Under uniform single-sample draws the two are orthogonal in expectation and
E||g_i - grad F||^2 splits exactly into E||delta_i||^2 + E||zeta_i||^2; the
expected dispersion is bounded by
(3 rho^2 / N) * sum_i (||delta_i||^2 + 4 E||zeta_i||^2) + 0.75 L^2 rho^4.

Per-device objectives are (spec, shard data) pairs. Passing a sequence of
specs gives each device its own objective (used by quadratic instances with
distinct centers); a single spec is shared by all devices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from .data import Dataset, DeviceShard, Partition
from .federated import sam_perturb
from .models import Batch, ModelSpec, forward_loss, gradient
from .rng import stream

__all__ = [
    "FlatnessReport",
    "DeviationReport",
    "DispersionEstimate",
    "FriendlyAdversaryReport",
    "RULES",
    "flatness_proxy",
    "flatness_incompatibility",
    "decompose_deviation",
    "dispersion_bound",
    "expected_dispersion",
    "tracking_error",
    "friendly_adversary_rate",
]

RULES = ("stochastic", "full-gradient", "mixed")

SpecLike = Union[ModelSpec, Sequence[ModelSpec]]


def _device_spec(specs: SpecLike, device: int) -> ModelSpec:
    if isinstance(specs, ModelSpec):
        return specs
    return specs[device]


def _device_batches(dataset: Dataset, partition: Partition) -> List[Batch]:
    return [dataset.batch(idx) for idx in partition.assignments]


@dataclass
class FlatnessReport:
    proxies: List[float]
    mean: float
    dispersion: float
    rule: str

    def recomputed_dispersion(self) -> float:
        s = np.asarray(self.proxies)
        return float(np.mean((s - np.mean(s)) ** 2))

    def to_json(self) -> str:
        return json.dumps(
            {
                "rule": self.rule,
                "proxies": self.proxies,
                "mean": self.mean,
                "dispersion": self.dispersion,
            }
        )


@dataclass
class DeviationReport:
    """Per-device deviation statistics from full single-sample enumeration."""

    delta_sq: np.ndarray  # ||grad F_i - grad F||^2
    zeta_sq: np.ndarray  # E||g_i - grad F_i||^2 over enumerated samples
    cross: np.ndarray  # E<delta_i, zeta_i>
    total_sq: np.ndarray  # E||g_i - grad F||^2
    sigma_l_sq: float  # max_i zeta_sq, empirical batch-variance bound
    sigma_g_sq: float  # max_i delta_sq, empirical heterogeneity bound

    def pythagoras_residuals(self) -> np.ndarray:
        return np.abs(self.total_sq - self.delta_sq - self.zeta_sq)

    def to_json(self) -> str:
        return json.dumps(
            {
                "delta_sq": self.delta_sq.tolist(),
                "zeta_sq": self.zeta_sq.tolist(),
                "cross": self.cross.tolist(),
                "total_sq": self.total_sq.tolist(),
                "sigma_l_sq": self.sigma_l_sq,
                "sigma_g_sq": self.sigma_g_sq,
            }
        )


@dataclass
class DispersionEstimate:
    value: float
    stderr: float  # 0 for the exact method
    method: str


@dataclass
class FriendlyAdversaryReport:
    friendly_fraction: float  # perturbation failed to increase the other batch's loss
    misaligned_fraction: float  # <g', g> <= 0, the first-order predictor
    pairs: int


def flatness_proxy(
    spec: ModelSpec,
    shard_batch: Optional[Batch],
    theta: np.ndarray,
    rho: float,
    direction: np.ndarray,
) -> float:
    """Loss increase along the normalized direction at radius rho.

    The loss is the device's full-shard objective even when the direction came
    from a single batch.
    """
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    perturbed = sam_perturb(theta, direction, rho)
    return forward_loss(spec, perturbed, shard_batch) - forward_loss(spec, theta, shard_batch)


def _probe_direction(
    spec: ModelSpec,
    full: Batch,
    theta: np.ndarray,
    rule: str,
    rng: Optional[np.random.Generator],
    batch_size: int,
    gamma_l: Optional[float],
    h: Optional[np.ndarray],
) -> np.ndarray:
    if rule == "full-gradient":
        return gradient(spec, theta, full)
    take = min(batch_size, full.size)
    pick = rng.choice(full.size, size=take, replace=False)
    g = gradient(spec, theta, Batch(full.features[pick], full.labels[pick]))
    if rule == "stochastic":
        return g
    if h is None or gamma_l is None:
        raise ValueError("the mixed rule requires gamma_l and h")
    return (1.0 - gamma_l) * h + gamma_l * g


def flatness_incompatibility(
    specs: SpecLike,
    dataset: Dataset,
    partition: Partition,
    theta: np.ndarray,
    rho: float,
    rule: str = "stochastic",
    gamma_l: Optional[float] = None,
    h: Optional[np.ndarray] = None,
    master_seed: int = 0,
    round_: int = 0,
    batch_size: int = 32,
) -> FlatnessReport:
    """Per-device proxies under the chosen direction rule, plus dispersion.

    Rules: ``stochastic`` draws one batch per device from its (device, round)
    keyed stream; ``full-gradient`` uses the exact shard gradient; ``mixed``
    blends the adjusted direction h with the same stochastic draw, so at
    gamma_l = 1 it coincides with ``stochastic`` on the same stream.
    """
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}; expected one of {RULES}")
    if partition.n_devices == 0:
        raise ValueError("partition has no devices")
    proxies = []
    for i, full in enumerate(_device_batches(dataset, partition)):
        spec = _device_spec(specs, i)
        rng = stream(master_seed, "dfi", i, round_) if rule != "full-gradient" else None
        direction = _probe_direction(spec, full, theta, rule, rng, batch_size, gamma_l, h)
        proxies.append(flatness_proxy(spec, full, theta, rho, direction))
    s = np.asarray(proxies)
    mean = float(np.mean(s))
    dispersion = float(np.mean((s - mean) ** 2))
    return FlatnessReport(proxies=[float(v) for v in proxies], mean=mean, dispersion=dispersion, rule=rule)


def _global_gradient(specs: SpecLike, device_batches: List[Batch], theta: np.ndarray) -> np.ndarray:
    grads = [gradient(_device_spec(specs, i), theta, b) for i, b in enumerate(device_batches)]
    total = grads[0].copy()
    for g in grads[1:]:
        total += g
    return total / len(grads)


def decompose_deviation(
    specs: SpecLike, dataset: Dataset, partition: Partition, theta: np.ndarray
) -> DeviationReport:
    """Exact bias/noise decomposition by enumerating single-sample batches."""
    device_batches = _device_batches(dataset, partition)
    grad_global = _global_gradient(specs, device_batches, theta)
    n_dev = len(device_batches)
    delta_sq = np.empty(n_dev)
    zeta_sq = np.empty(n_dev)
    cross = np.empty(n_dev)
    total_sq = np.empty(n_dev)
    for i, full in enumerate(device_batches):
        spec = _device_spec(specs, i)
        grad_local = gradient(spec, theta, full)
        delta = grad_local - grad_global
        delta_sq[i] = float(delta @ delta)
        z_acc = 0.0
        c_acc = 0.0
        t_acc = 0.0
        for s in range(full.size):
            g = gradient(spec, theta, Batch(full.features[s : s + 1], full.labels[s : s + 1]))
            zeta = g - grad_local
            z_acc += float(zeta @ zeta)
            c_acc += float(delta @ zeta)
            diff = g - grad_global
            t_acc += float(diff @ diff)
        zeta_sq[i] = z_acc / full.size
        cross[i] = c_acc / full.size
        total_sq[i] = t_acc / full.size
    return DeviationReport(
        delta_sq=delta_sq,
        zeta_sq=zeta_sq,
        cross=cross,
        total_sq=total_sq,
        sigma_l_sq=float(zeta_sq.max()),
        sigma_g_sq=float(delta_sq.max()),
    )


def dispersion_bound(rho: float, lipschitz: float, report: DeviationReport) -> float:
    """Upper bound on the expected proxy dispersion from the measured terms."""
    n_dev = report.delta_sq.shape[0]
    lead = (3.0 * rho**2 / n_dev) * float(np.sum(report.delta_sq + 4.0 * report.zeta_sq))
    return lead + 0.75 * lipschitz**2 * rho**4


def _per_device_proxy_moments(
    spec: ModelSpec, full: Batch, theta: np.ndarray, rho: float
):
    # Proxy value for each possible single-sample direction draw.
    values = np.empty(full.size)
    for s in range(full.size):
        g = gradient(spec, theta, Batch(full.features[s : s + 1], full.labels[s : s + 1]))
        values[s] = flatness_proxy(spec, full, theta, rho, g)
    mean = float(np.mean(values))
    var = float(np.mean((values - mean) ** 2))
    return values, mean, var


def expected_dispersion(
    specs: SpecLike,
    dataset: Dataset,
    partition: Partition,
    theta: np.ndarray,
    rho: float,
    method: str = "exact",
    n_draws: int = 10_000,
    master_seed: int = 0,
) -> DispersionEstimate:
    """E over single-sample draws of the proxy dispersion.

    The exact method enumerates each device's per-sample proxies; because the
    devices draw independently, the product-space expectation collapses to

        ((N - 1) / N^2) * sum_i Var(s_i) + population-variance of E[s_i].

    Monte Carlo samples joint draws instead and reports a standard error.
    """
    device_batches = _device_batches(dataset, partition)
    n_dev = len(device_batches)
    per_device = [
        _per_device_proxy_moments(_device_spec(specs, i), b, theta, rho)
        for i, b in enumerate(device_batches)
    ]
    if method == "exact":
        means = np.array([m for _, m, _ in per_device])
        variances = np.array([v for _, _, v in per_device])
        value = (n_dev - 1) / n_dev**2 * float(np.sum(variances)) + float(
            np.mean((means - means.mean()) ** 2)
        )
        return DispersionEstimate(value=value, stderr=0.0, method="exact")
    if method != "monte-carlo":
        raise ValueError(f"unknown method {method!r}")
    rng = stream(master_seed, "dfi-mc")
    draws = np.empty(n_draws)
    values = [v for v, _, _ in per_device]
    for b in range(n_draws):
        s = np.array([values[i][rng.integers(0, values[i].shape[0])] for i in range(n_dev)])
        draws[b] = np.mean((s - s.mean()) ** 2)
    return DispersionEstimate(
        value=float(draws.mean()),
        stderr=float(draws.std(ddof=1) / np.sqrt(n_draws)),
        method="monte-carlo",
    )


def tracking_error(
    h: np.ndarray,
    specs: SpecLike,
    dataset: Dataset,
    partition: Partition,
    theta: np.ndarray,
    reference_batches: Optional[int] = None,
    reference_batch_size: int = 512,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """||h - grad F(theta)||^2 against the exact device-average gradient.

    With ``reference_batches`` set, the reference gradient is instead averaged
    over that many uniformly sampled batches from the whole dataset, mirroring
    a sampled reference on tasks where the exact average is unaffordable.
    """
    if reference_batches is None:
        ref = _global_gradient(specs, _device_batches(dataset, partition), theta)
    else:
        if rng is None:
            raise ValueError("sampled reference requires an rng")
        spec = _device_spec(specs, 0)
        acc = np.zeros_like(theta)
        for _ in range(reference_batches):
            pick = rng.integers(0, dataset.n, size=min(reference_batch_size, dataset.n))
            acc += gradient(spec, theta, dataset.batch(pick))
        ref = acc / reference_batches
    diff = h - ref
    return float(diff @ diff)


def friendly_adversary_rate(
    spec: ModelSpec,
    shard: DeviceShard,
    theta: np.ndarray,
    rho: float,
    rng: np.random.Generator,
    pairs: int,
    batch_size: int = 1,
    disjoint: bool = True,
) -> FriendlyAdversaryReport:
    """Fraction of batch pairs whose cross-batch loss does not increase.

    For each pair (phi, phi') the perturbation is built from phi's gradient
    and scored on phi': friendly means F(theta + eps; phi') - F(theta; phi')
    <= 0. The misaligned fraction <g', g> <= 0 is the first-order predictor of
    the same event. ``disjoint=False`` scores the perturbation on its own
    batch instead.
    """
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    if disjoint and shard.n < 2 * batch_size:
        raise ValueError(
            f"shard of size {shard.n} cannot supply two disjoint batches of {batch_size}"
        )
    friendly = 0
    misaligned = 0
    for _ in range(pairs):
        if disjoint:
            pick = rng.choice(shard.n, size=2 * batch_size, replace=False)
            first = shard.dataset.batch(shard.indices[pick[:batch_size]])
            second = shard.dataset.batch(shard.indices[pick[batch_size:]])
        else:
            pick = rng.choice(shard.n, size=batch_size, replace=False)
            first = shard.dataset.batch(shard.indices[pick])
            second = first
        g = gradient(spec, theta, first)
        g_other = gradient(spec, theta, second)
        perturbed = sam_perturb(theta, g, rho)
        change = forward_loss(spec, perturbed, second) - forward_loss(spec, theta, second)
        if change <= 0.0:
            friendly += 1
        if float(g_other @ g) <= 0.0:
            misaligned += 1
    return FriendlyAdversaryReport(
        friendly_fraction=friendly / pairs,
        misaligned_fraction=misaligned / pairs,
        pairs=pairs,
    )
