"""Desk-scale simulator for federated training with flat-minima search.

Implements plain federated averaging, its sharpness-aware variant, and a
variance-suppressed variant that reuses one server-adjusted direction for
local flatness search, local updates and the global update, together with the
diagnostics needed to probe why the adjusted direction helps under non-IID
data: per-device flatness proxies and their dispersion, gradient bias and
batch-deviation decompositions, and the adjusted direction's tracking error.
"""

from .data import (
    Dataset,
    DeviceShard,
    Partition,
    dirichlet_partition,
    generate_synthetic,
    holdout_split,
    pathological_partition,
)
from .diagnostics import (
    DeviationReport,
    DispersionEstimate,
    FlatnessReport,
    FriendlyAdversaryReport,
    decompose_deviation,
    dispersion_bound,
    expected_dispersion,
    flatness_incompatibility,
    flatness_proxy,
    friendly_adversary_rate,
    tracking_error,
)
from .errors import ConfigError, NumericError
from .estimator import FederatedClassifier
from .experiment import (
    ExperimentConfig,
    MetricRecord,
    RunSummary,
    compare_table,
    load_config,
    parse_config,
    rounds_to_target,
    run_experiment,
)
from .federated import (
    AlgoConfig,
    DeviceUpdate,
    RoundTranscript,
    ServerState,
    aggregate_avg,
    aggregate_vssam,
    global_update_vssam,
    local_round_fedavg,
    local_round_fedsam,
    local_round_vssam,
    mix_direction,
    run_training,
    sam_perturb,
    sample_devices,
)
from .models import (
    Batch,
    ModelSpec,
    finite_diff_gradient,
    forward_loss,
    gradient,
    init_params,
    param_dim,
    predict_labels,
    predict_proba,
    smoothness_constant,
)
from .rng import stream

__version__ = "0.1.0"
