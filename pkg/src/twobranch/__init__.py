"""Two-branch image anomaly detection toolkit.

A reconstruction branch scores picturable anomalies from anomaly-map maxima;
a feature branch scores unpicturable anomalies (wrong object counts and other
anomalies without a unique spatial locus) by Mahalanobis distance over pooled
feature vectors. The branches are fused after validation-based z-scoring.
"""

from .artifacts import StatisticsArtifact, calibrate_pipeline
from .config import PipelineConfig, load_config
from .data import (
    AnomalyFamily,
    DatasetBundle,
    ImageSample,
    Label,
    Split,
    SynthConfig,
    export_loco_layout,
    generate_synthetic,
    iterate_batches,
    load_loco_layout,
)
from .features import (
    FeatureSourceConfig,
    GaussianModel,
    fit_gaussian,
    gap,
    mahalanobis,
    unpicturable_score,
)
from .maps import (
    MapNormalizer,
    calibrate_map_normalizer,
    combined_map,
    global_map,
    local_map,
    picturable_score,
)
from .networks import (
    ArchSpec,
    NetworkBundle,
    RawOutputs,
    TrainHParams,
    forward,
    forward_batch,
    init_networks,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .scoring import (
    CalibrationSet,
    ScoreNormalizer,
    ScoreReport,
    auroc,
    bench_stages,
    calibrate_score_normalizer,
    evaluate,
    fuse,
    normalize,
    score_image,
)

__version__ = "0.1.0"
