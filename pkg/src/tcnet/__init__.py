"""tcnet: teacher-class knowledge distillation.

One teacher, n students: the teacher's dense feature vector is split into
contiguous sub-spaces, each reconstructed by an independent student (plain MSE
or adversarial training), merged back and fed through the teacher's output
head. Includes a from-scratch float32 network engine, a master/worker
inference cluster, and IDX/synthetic dataset loaders.
"""

from .nn import (
    LayerSpec,
    Network,
    Tensor,
    TrainConfig,
    cross_entropy_loss,
    dense,
    load_network,
    mse_loss,
    relu,
    save_network,
    softmax,
    softmax_temperature,
)
from .distill import (
    DistillReport,
    StudentEnsemble,
    SubspacePartition,
    evaluate,
    extract_dense,
    fine_tune_head,
    make_partition,
    merge_subspaces,
    predict_ensemble,
    train_student,
)
from .gan import GanConfig, GanReport, train_student_gan

__version__ = "0.1.0"
