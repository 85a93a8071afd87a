"""weakray: weakly supervised chest radiograph classification and
lesion localization, built on a small numpy autodiff core.

The pieces, roughly bottom up: :mod:`weakray.tensor` (autodiff engine),
:mod:`weakray.ops` (conv/pool/norm operators), :mod:`weakray.densenet`
(the dense backbone), :mod:`weakray.wsl` (bridging, two-stage pooling,
weighted BCE), :mod:`weakray.localization` and :mod:`weakray.metrics`
(scoring), :mod:`weakray.data` (datasets), :mod:`weakray.training`
(trainer, checkpoints, sweeps) and :mod:`weakray.cli`.
"""

from .tensor import Tensor, finite_diff_check, no_grad, set_debug_checks
from .ops import (
    BatchNormSpec,
    Conv2dSpec,
    avg_pool2d,
    batch_norm,
    concat_channels,
    conv2d,
    dropout,
    max_pool2d,
)
from .densenet import (
    DenseBackbone,
    DenseNetConfig,
    build_backbone,
    full_config,
    receptive_field_report,
    toy_config,
)
from .wsl import (
    BridgingLayer,
    ClassScores,
    HeadConfig,
    Heatmap,
    class_weights_from_labels,
    class_wise_pool,
    spatial_pool_test,
    spatial_pool_train,
    weighted_bce,
)
from .localization import (
    BBox,
    LocalizationReport,
    heatmap_to_boxes,
    iou,
    normalize_heatmap,
    score_localization,
)
from .metrics import auroc, auroc_bruteforce_oracle, classification_report
from .data import (
    CHEST14_CLASSES,
    PreprocessConfig,
    Sample,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    parse_bbox_csv,
    parse_label_csv,
    preprocess,
    split,
)
from .training import (
    Checkpoint,
    TrainConfig,
    WslModel,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    sweep,
    train,
)

__version__ = "0.1.0"
