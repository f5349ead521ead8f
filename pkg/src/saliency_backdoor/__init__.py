"""Backdoor attacks on saliency-based interpretation of classifiers.

Training-time attacks that alter (or, inverted, only reveal) a model's
saliency maps on triggered inputs while leaving its predictions intact,
plus the evaluation harness and the three standard defenses they are
measured against.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ArchitectureError,
    ArchitectureMismatchError,
    CheckpointError,
    ConfigError,
    CorruptCheckpointError,
    DataError,
    SaliencyBackdoorError,
    ShapeMismatchError,
    VersionMismatchError,
)
from .models import (  # noqa: F401
    ArchitectureInfo,
    ForwardCapture,
    ModelAdapter,
    TabularMLP,
    TinyConvNet,
    build_model,
    clone_reference,
    forward_with_features,
)
from .checkpoint import Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint  # noqa: F401
from .triggers import TriggerPattern, apply_trigger, generate_moire_overlay, nashville_preset  # noqa: F401
from .data import (  # noqa: F401
    ImageDataset,
    generate_shapes_dataset,
    generate_tabular_dataset,
    load_image_folder,
    save_image_folder,
    split_dataset,
)
from .poisoning import PoisonedDataset, build_poisoned_dataset, load_poisoned_dataset, save_poisoned_dataset  # noqa: F401
from .saliency import (  # noqa: F401
    InterpreterSpec,
    SaliencyMap,
    grad_cam,
    interpret,
    simple_grad,
    visual_backprop,
    working_maps,
)
from .losses import (  # noqa: F401
    TargetMap,
    TopKIndexSet,
    classification_loss,
    clean_loss,
    joint_alteration_loss,
    make_target_map,
    nontargeted_alteration_loss,
    poisoned_loss,
    saliency_preservation_loss,
    targeted_alteration_loss,
    topk_reference_set,
)
from .metrics import (  # noqa: F401
    EvaluationReport,
    auroc,
    fooling_success_rate,
    correct_rate,
    mean_one_vs_rest_auroc,
    read_report_csv,
    select_threshold,
    topk_accuracy,
    write_report_csv,
)
from .training import (  # noqa: F401
    AttackConfig,
    OptimizerConfig,
    TrainingLog,
    pretrain_classifier,
    read_training_log,
    train_backdoor,
)
from .evaluation import AttackEvaluation, deployment_spec, evaluate_attack, triggered_copy  # noqa: F401
from .defenses import (  # noqa: F401
    ClusteringOutcome,
    PruningCurve,
    activation_clustering,
    cluster_activations,
    fine_prune_curve,
    total_variation,
    tv_denoise,
    tv_denoise_batch,
)
from .config import ExperimentConfig, from_document, load_config, save_config  # noqa: F401
from .experiment import (  # noqa: F401
    DefenseArtifacts,
    RunArtifacts,
    run_attack_experiment,
    run_defense_suite,
)
from .gallery import dump_saliency_gallery, render_gallery  # noqa: F401
