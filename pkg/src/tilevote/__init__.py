"""Tile-based classification of microscopy-style grayscale images.

Grid tiling, a compact residual CNN trained from scratch in numpy, dense and
kNN tile evaluation over learned embeddings, vote-based image-level
aggregation, and class-evidence (CAM) maps, with leakage-safe dataset
management throughout.
"""

__version__ = "0.1.0"

from .aggregate import (
    ImagePrediction,
    MetricsReport,
    TileScores,
    compute_metrics,
    majority_vote,
    metrics_from_labels,
    probability_vote,
)
from .config import ExperimentConfig, load_config, parse_config_text, write_config
from .datasets import (
    CLASS_NAMES,
    NUM_CLASSES,
    FoldAssignment,
    SplitManifest,
    SynthConfig,
    TileArrays,
    build_tile_arrays,
    generate_synthetic,
    load_tile_split,
    make_folds,
    scan_dataset,
    stratified_split,
    synth_image,
    tile_dataset,
    write_synthetic_dataset,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    FoldError,
    GridError,
    MissingArtifactError,
    QuotaError,
    ShapeError,
    StateError,
    TileVoteError,
)
from .knn import EmbeddingIndex, KnnResult, build_index, classify
from .model import (
    ActivationTape,
    Checkpoint,
    ModelConfig,
    TileNet,
    grad_wrt_activation,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import SWEEP_GRIDS, SweepRow, run_grid, run_sweep
from .saliency import SaliencyMap, cam_stats, grad_cam, render_overlay, score_cam
from .tiling import (
    GridSpec,
    TileRecord,
    TileRect,
    compute_grid,
    decode_tile_id,
    encode_tile_id,
    resize_bilinear,
    stitch_tiles,
    tile_image,
)
from .trainer import (
    EarlyStopTracker,
    EpochLog,
    FoldResult,
    TrainConfig,
    TrainResult,
    best_epoch_index,
    run_cv,
    train,
)
