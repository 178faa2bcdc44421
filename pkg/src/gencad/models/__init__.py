"""CSR autoencoder, CCIP contrastive encoder, latent diffusion prior and generation."""
from .config import (CcipConfig, CdpConfig, CsrConfig, DataConfig, EvalConfig, GenCadConfig,
                     PriorConfig, dump_config, load_config, parse_config)
from .csr import (CsrModel, csr_loss, decoder_targets, encode_corpus, greedy_matrices,
                  matrices_to_sequences, train_csr)
from .ccip import CcipModel, ResNetEncoder, nt_xent, nt_xent_lower_bound, train_ccip
from .cdp import CdpModel, DeterministicPrior, NoiseSchedule, train_cdp, train_prior
from .generate import GenerationResult, check_program, decode_latents, generate, generate_many
