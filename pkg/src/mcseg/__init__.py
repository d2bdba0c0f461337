"""mcseg: MC-dropout ensemble segmentation with an uncertainty-evaluation toolkit.

A desk-scale pipeline: synthetic vessel phantoms, a mini encoder-decoder
network with Monte Carlo dropout and a learned-variance head, bagged
ensembling with decorrelation-based member selection and a stacked combiner,
and nonparametric statistics (k-NN Renyi divergence, permutation testing,
M-out-of-N bootstrap, KDE) to compare uncertainty quality across models.
"""

from .ensemble import (
    BagPlan,
    SelectionReport,
    brier_matrix,
    build_combiner_inputs,
    correlation_matrix,
    make_bag_plan,
    plural_correlation,
    select_members,
    train_candidates,
    train_combiner,
)
from .estimators import McDropoutSegmenter, StagedEnsembleSegmenter
from .imageio import read_image, write_image, write_pfm, write_pgm
from .nn import (
    McOutput,
    MiniSegNet,
    MiniSegNetConfig,
    ModelWeights,
    TrainConfig,
    TrainResult,
    attenuated_bce_loss,
    build_model,
    load_weights,
    mc_predict,
    predict_proba,
    save_weights,
    train,
)
from .phantom import (
    DatasetManifest,
    PhantomConfig,
    Sample,
    generate_dataset,
    generate_sample,
    load_manifest,
    load_roi,
    load_split,
    make_roi,
)
from .runconfig import EnsembleConfig, RunConfig, load_config
from .segmetrics import (
    ConfusionCounts,
    MetricSet,
    PrCurve,
    confusion,
    mean_over_test,
    metric_set,
    pr_curve,
    split_uncertainty,
)
from .uqstats import (
    DivergenceConfig,
    DivergenceReport,
    SamplePool,
    b_coefficient,
    delta_mu,
    divergence_report,
    kde,
    knn_distance,
    moon_bootstrap,
    moon_sizes,
    percentile_ci,
    permutation_test,
    renyi_divergence,
)

__version__ = "0.1.0"
