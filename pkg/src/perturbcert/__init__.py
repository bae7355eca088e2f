"""perturbcert: certifiable weight-perturbation analysis for dense networks.

Library surface:
  linalg     - SVD, pseudoinverses, truncation, norms
  network    - feedforward networks, layer decomposition, inversion
  margin     - logit margins and the margin-Lipschitz bound
  minperturb - exact and empirical minimal weight perturbations
  lipschitz  - finite-difference power iteration and the dense oracle
  compress   - pruning / quantization / low-rank operators and diagnostics
  backdoor   - training harness, attack metrics, certification workflow
  cli        - command-line front end
"""

__version__ = "0.1.0"

from .backdoor import (
    AttackReport,
    CertificationTable,
    DatasetSpec,
    SyntheticDataset,
    TrainConfig,
    TriggerSpec,
    certify_threshold,
    evaluate,
    generate_dataset,
    loss_backdoor,
    loss_control,
    poison,
    train,
)
from .compress import (
    CompressionOp,
    EnergySplit,
    Identity,
    LowRank,
    LowRankMarginAnalysis,
    Prune,
    Quantize,
    apply_low_rank,
    apply_op,
    energy_split,
    low_rank_margin_analysis,
    parse_compression_op,
    prune,
    quantize,
)
from .errors import (
    NonFiniteLossError,
    PerturbCertError,
    RankDeficientDownstreamError,
    ReluBranchError,
    SvdConvergenceError,
    TanhRangeError,
    TrainingDivergedError,
    ZeroGradientError,
)
from .linalg import (
    SvdResult,
    TruncatedPinv,
    frobenius_norm,
    low_rank_approx,
    pinv,
    pinv_truncated,
    spectral_norm,
    svd,
    vec_pnorm,
)
from .lipschitz import (
    LipschitzEstimate,
    ParamSubset,
    estimate_lipschitz,
    jacobian_oracle,
)
from .margin import (
    BoundCheck,
    MarginReport,
    lipschitz_closed_form_single_layer,
    margin,
    margin_lipschitz_check,
    preimage_difference,
)
from .minperturb import (
    FlipTarget,
    MonotonicityReport,
    PerturbationResult,
    make_flip_target,
    minimal_perturbation_empirical,
    minimal_perturbation_exact,
    minimal_perturbation_rank_k,
    monotonicity_audit,
)
from .network import (
    Activation,
    Batch,
    Network,
    downstream,
    downstream_inverse,
    forward,
    upstream,
)
