"""Texture-transfer augmentation for CT segmentation.

Per-style encoder-decoder generators, trained with segment-wise Gram and
content losses, repaint annotated label maps with the texture of unannotated
images; a U-Net trained on the expanded set is compared with a baseline.
"""

from .augment import AugmentationPlan, StyleBank, augment_dataset, expanded_size
from .data import (
    AnnotatedSample,
    DatasetManifest,
    IntensityGrid,
    LabelSchema,
    SegMap,
    apply_window,
    load_manifest,
    write_dataset,
)
from .generator import GeneratorConfig, GeneratorModel, generate, train_style_generator
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    compare_reports,
    confusion,
    dice,
    evaluate_model,
    pixel_accuracy,
    render_montage,
)
from .perceptual import (
    LossSpec,
    SegmentLoss,
    content_loss,
    finite_diff_check,
    gram,
    masked_gram,
    small_backbone,
    style_loss,
    total_loss,
    vgg19,
)
from .phantom import PhantomSpec, generate_phantom, generate_phantom_dataset
from .pipeline import ExperimentConfig, desk_config, run_experiment
from .unet import TrainConfig, UNetConfig, UNetModel, predict, train_unet

__version__ = "0.1.0"
