"""alforge: active-learning image forge.

Synthesizes informative training images by perturbing segmentation masks
through a conditional GAN, scores candidates with MC-dropout predictive
uncertainty, and grows a labeled pool until performance plateaus.
"""

from .alloop import (
    ALRunner,
    ALState,
    SelectionResult,
    al_round,
    compare_acquisitions,
    full_data_performance,
    prepare_experiment,
    rank_candidates,
    run_al,
    select_balanced,
    should_stop,
)
from .cgan import (
    ConditionalGan,
    GanLossConfig,
    MaskAutoencoder,
    adversarial_loss,
    content_loss,
    encode_mask,
    generator_objective,
    l1_loss,
    synthesize,
    train_autoencoder,
    train_cgan,
)
from .core import (
    DatasetManifest,
    ExperimentConfig,
    ImageSample,
    load_manifest,
    load_samples,
    make_toy_dataset,
    save_sample,
    split_initial,
)
from .errors import (
    AlforgeError,
    ConfigError,
    DataError,
    DivergenceError,
    PoolExhaustedError,
    TrainError,
)
from .maskops import (
    BoundaryContour,
    PerturbationSpec,
    apply_perturbation,
    displace_boundary,
    extract_boundary,
    fill_exposed_region,
    generate_perturbations,
    remap_intensity,
    standard_augment,
)
from .metrics import (
    EvalReport,
    FeatureExtractor,
    annotation_savings,
    dice,
    feature_distance,
    hausdorff,
    mse,
    nmi,
    sens_spec_auc,
)
from .models import (
    DropoutClassifier,
    MCSampleSet,
    UncertaintyScore,
    UNetSegmenter,
    finetune_classifier,
    image_uncertainty,
    mc_forward,
    predictive_uncertainty,
    train_segmenter,
)
from .rng import RngStream

__version__ = "0.1.0"
