"""Correlation-aware sparse signal recovery for MMV and block-sparse models."""

from .errors import (
    CorrSparseError,
    DegenerateReference,
    InvalidSchedule,
    NoActiveRows,
    NoConvergence,
    NonPositiveB,
    SingularSystem,
)
from .model import (
    BlockSparseView,
    Hyperparams,
    MMVProblem,
    SolutionEstimate,
    block_view,
    devectorize,
    extract_support,
    kron_dictionary,
    nmse,
    posterior_mean_cov,
    trial_failure,
    true_support,
    vectorize,
)
from .reweighted import (
    GroupLassoResult,
    ReweightOptions,
    WeightState,
    dual_refresh,
    g_tc_penalty,
    group_lasso_md,
    group_lasso_solve,
    rw_l1_candes_solve,
    rw_l1_sbl_solve,
    rw_l2_solve,
)
from .sbl import (
    SblOptions,
    ml_cost,
    msbl_solve,
    tsbl_solve,
    update_b,
    update_gamma,
    update_lambda,
)
from .synth import (
    GroundTruth,
    MmvGenSpec,
    ScheduleSpec,
    add_noise_snr,
    export_instance,
    gen_correlated_rows,
    gen_dictionary,
    gen_mmv_instance,
    gen_timevarying_instance,
    import_instance,
    noise_variance_for_snr,
)
from .windows import WindowPlan, per_column_nmse, solve_windows, window_split

__version__ = "0.1.0"
