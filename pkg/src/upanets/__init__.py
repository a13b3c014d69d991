"""UPANets: channel/spatial pixel attention image classifier with its own
numpy autodiff core, training loop, loss-landscape sampling, and CLI."""

from .arch import (AblationSpec, CpaLayer, ExConnect, SpaLayer, UpaBlock, UpaBlockConfig,
                   UpaLayer, UpaLayerPlan, UpaNets, UpaNetsConfig, build_upanets,
                   channel_shuffle, cpa_forward, exconnect_forward, gap, plan_layer,
                   spa_forward, upa_block_forward, upa_layer_forward)
from .checkpoint import Checkpoint, load_checkpoint, load_into_model, save_checkpoint, save_model
from .data import (AugmentSpec, Dataset, LabeledImage, augment, load_cifar10, load_cifar100,
                   load_cifar_record, synth_blobs, synth_dataset)
from .landscape import (Direction, LandscapeGrid, find_visualizable_range, grid_to_csv,
                        make_directions, minmax_scale, sample_grid)
from .tensor import (GradReport, Tensor, avgpool2d, batchnorm2d, concat_channels, conv2d,
                     debug_finite, grad_check, layernorm, matmul, no_grad, relu,
                     softmax_crossentropy)
from .train import (EfficiencyReport, TrainConfig, TrainResult, cosine_lr, efficiency,
                    evaluate, sgd_step, top1_accuracy, train)

__version__ = "0.1.0"
