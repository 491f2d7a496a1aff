"""Open-set supervised anomaly detection with disentangled abnormality heads."""

from .evaluation import RunReport, ScoredExample, aggregate_runs, auc, score_dataset
from .featurenet import BackboneConfig, build_backbone, extract_features, pyramid_views
from .heads import (AblationMask, HeadScores, ReferenceSet, composite_score, compute_reference_map,
                    patch_scores, residual_map, residual_score, topk_mil_pool)
from .losses import PriorScoreSet, bce_loss, deviation, deviation_loss, focal_loss, route_and_total
from .model import DRAModel
from .protocols import (DatasetCatalog, SplitResult, SynthSpec, ingest_directory, nest_one_from_ten,
                        sample_general, sample_hard, split_normals, synth_generate)
from .pseudogen import PseudoSource, cutmix, cutpaste_scar, random_rect_mask
from .trainer import TrainConfig, checkpoint_load, checkpoint_save, fit, make_batch, train_step

__version__ = "0.1.0"
