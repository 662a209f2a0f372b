"""Multi-view unsupervised domain adaptation.

A labeled source domain and an unlabeled target domain are bridged by
consistency training: predictions on weakly augmented query images act as
fixed references for predictions on augmented views of the same container,
mined by lowest normalized mutual information (the most dissimilar views
carry the most complementary evidence).
"""

from .errors import DataError, ManifestError, NumericError
from .evaluation import EvalReport, evaluate, write_report
from .imaging import (
    AugPolicy,
    IMAGENET_MEAN,
    IMAGENET_STD,
    bilinear_resize,
    load_image,
    resize_normalize,
    save_image,
    strong_augment,
    to_grayscale,
    weak_augment,
)
from .losses import (
    LossBreakdown,
    LossConfig,
    PseudoLabel,
    RolePredictions,
    consistency_loss,
    cross_entropy,
    make_pseudo_label,
    supervised_loss,
    total_loss,
    total_loss_logit_grads,
)
from .manifest import (
    DatasetManifest,
    ImageRecord,
    SplitSpec,
    auto_holdout,
    load_manifest,
    manifest_sha256,
    save_manifest,
    split_by_container,
    strip_labels,
    view_candidates,
)
from .model import (
    ModelParams,
    composite_loss,
    composite_loss_and_grads,
    forward,
    grad_check,
    init_params,
    load_checkpoint,
    save_checkpoint,
    softmax,
)
from .synthetic import SynthConfig, generate_synthetic
from .trainer import (
    PRESETS,
    RunReport,
    TrainConfig,
    TrainData,
    load_images,
    lr_schedule,
    sgd_step,
    train,
)
from .viewmining import (
    NmiCache,
    ViewSet,
    load_view_sets,
    mine_view_sets,
    nmi,
    random_select,
    save_view_sets,
    sgvm_select,
)

__version__ = "0.1.0"
