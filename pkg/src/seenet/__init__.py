"""Self-erasing attention networks at desk scale.

A small reverse-mode tensor engine drives a three-branch classifier whose
erased and background branches consume masks thresholded from the base
branch's attention map. The package also generates proxy segmentation
labels by fusing attention with saliency, evaluates them by mIoU, and ships
a deterministic synthetic dataset so every piece is verifiable end to end.
"""

from .ablation import AblationConfig, run_ablation
from .errors import (
    ConfigError,
    ContractError,
    DataIOError,
    GradCheckError,
    SeenetError,
    TrainingDiverged,
    UndefinedMetricError,
)
from .gradcheck import gradient_check_suite
from .masks import (
    AttentionMap,
    TernaryMask,
    background_branch_mask,
    erase_branch_mask,
    flip_fuse,
    fuse_attention,
    normalize_map,
    ternary_mask,
)
from .metrics import (
    ConfusionMatrix,
    attention_localization_score,
    background_leakage,
    confusion_accumulate,
    miou,
)
from .model import (
    BranchOutputs,
    ModelConfig,
    SeeNet,
    compute_attention,
    infer_attention,
    infer_attention_maps,
    label_vector,
    load_checkpoint,
    save_checkpoint,
    total_loss,
)
from .proxy import ProxyLabelMap, generate_proxy_gt, harmonic_mean, load_saliency
from .synth import SaliencyMap, SampleRecord, SynthDataset, gen_dataset, synthetic_saliency
from .tensor import (
    SGD,
    Tensor,
    bce_multilabel_loss,
    c_relu,
    c_relu_backward,
    c_relu_forward,
    conv2d,
    finite_diff_check,
    global_avg_pool,
    load_tensor,
    relu,
    save_tensor,
    sgd_step,
    tsum,
)
from .train import TrainConfig, train

__version__ = "0.1.0"
