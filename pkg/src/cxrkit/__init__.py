"""cxrkit: pseudo-pair synthesis, residual attention, and detection scoring
for chest radiographs."""

from .attention import AttentionMap, FeatureRaster, apply_attention, residual_map, to_attention
from .blending import BlendRequest, laplacian, poisson_blend, replace_region
from .errors import ConvergenceError, FormatError, ScheduleError
from .evaluation import (
    Detection,
    EvalReport,
    MatchResult,
    ThresholdSet,
    dataset_map,
    image_ap,
    match_detections,
)
from .fileio import AnnotationRecord, AnnotationSet, load_annotations, load_image, save_annotations, save_image
from .image import Affine2D, BBox, Image, apply_affine, iou, l1_mean, resize_area
from .losses import DiscriminatorScores, abn2nor_loss, adversarial_term, realistic_loss
from .phantom import PhantomSpec, generate_phantom_pool, synth_phantom
from .registration import AlignmentResult, AlignOptions, align, alignment_loss, pyramid_features
from .retrieval import ThumbIndex, build_index, load_index, nearest, save_index
from .schedule import Phase, ScheduleSpec, parse_schedule, phase_for_epoch, run_schedule
from .synthesis import (
    ImagePool,
    PoolEntry,
    PseudoPair,
    SynthesisManifest,
    SynthesisOptions,
    Synthesizer,
    augment_dataset,
    synth_pseudo_abnormal,
    synth_pseudo_normal,
)

__version__ = "0.1.0"
