"""Small explicit-backprop neural network runtime on numpy."""
from .core import (Identity, Module, Parameter, Sequential, log_softmax, residual_add,
                   softmax, softmax_backward)
from .layers import (AvgPool2d, BatchNorm2d, Conv2d, Dropout, Embedding, LayerNorm, Linear,
                     ReLU, Tanh)
from .attention import (FeedForward, MultiHeadAttention, TransformerLayer, causal_mask,
                        sinusoidal_pe)
from .losses import cross_entropy, mse
from .optim import (Adam, AdamW, GradAccumulator, ReduceLROnPlateau, WarmupSchedule,
                    grad_clip_by_norm)
from .gradcheck import GradCheckResult, finite_diff_check
from .checkpoint import (Checkpoint, CheckpointError, checkpoint_load, checkpoint_save,
                         param_hash, read_checkpoint, write_checkpoint)
