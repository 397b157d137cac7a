"""luskit: self-supervised pretraining and hierarchical multi-task inference
for B-mode lung ultrasound classification."""

from .augment import AugmentationPolicy, apply, make_pair
from .data import (
    IMAGE_SIZE,
    TASKS,
    DataError,
    Dataset,
    ImageRecord,
    ManifestError,
    SplitSpec,
    export_dataset,
    load_manifest,
    preprocess,
    split_by_patient,
    subsample_labels,
)
from .evaluation import (
    EvalReport,
    auc,
    build_report,
    evaluate_bundles,
    export_features,
    geometric_mean,
    project_2d,
    score_task,
    threshold_metrics,
)
from .inference import BenchmarkResult, TreeOutcome, TreePipeline, TreeSpec, benchmark, infer_batch, infer_tree
from .nnet import (
    ArchitectureConfig,
    CheckpointError,
    FeatureExtractor,
    FlopCount,
    Head,
    ModelBundle,
    Projector,
    count_flops,
    forward_features,
    forward_head,
    init_bundle,
    load_checkpoint,
    save_checkpoint,
)
from .selfsup import METHODS, PretrainHistory, SSLConfig, barlow_twins, nt_xent, pretrain, vicreg
from .supervised import (
    PROTOCOLS,
    ProtocolConfig,
    TrainRun,
    bce,
    lr_at,
    run_label_efficiency_sweep,
    select_best_epoch,
    train_protocol,
)
from .synthetic import SyntheticConfig, generate_synthetic, synthesize

__version__ = "0.1.0"
