"""gradleak: desk-scale federated-learning gradient-leakage toolkit.

Simulates the single-round FL exchange, trains vanilla and PGD-adversarial
victim models, and runs the two-step leakage attack: restore per-sample
penultimate features from the linear head's averaged weight gradients, then
reconstruct images by inverting the restored features.
"""

from .attack import (AttackResult, AttackSettings, BaselineSettings, ReconstructionTask,
                     RestoredFeature, analytic_head_gradient, attack_packet,
                     baseline_gradient_matching, invert_feature, recover_labels,
                     restore_features, run_attack)
from .data import BatchSpec, Dataset, generate_synthetic, load_cifar_binary, load_idx, sample_batch
from .flsim import (ClientRoundRecord, GradientPacket, client_local_step, deserialize_packet,
                    serialize_packet, server_aggregate)
from .metrics import cosine_similarity, psnr, ssim
from .models import (ForwardTrace, Model, ModelSpec, build_model, forward_trace, load_checkpoint,
                     save_checkpoint)
from .optim import Adam, SGDMomentum
from .report import AnchorMetrics, RunResults, emit_report, read_ppm, write_ppm
from .tensor import Graph, Tensor, finite_diff_check
from .training import ATConfig, TrainConfig, evaluate, pgd_attack, train

__version__ = "0.1.0"
