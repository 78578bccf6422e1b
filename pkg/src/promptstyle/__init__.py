"""Diverse style transfer with a prompt bank and a content control adapter on a denoising diffusion backbone."""

__version__ = "0.1.0"

from .bank import (BankStats, DspaTrainConfig, MeanPoolEncoder, PromptBank, bank_stats, dspa_training_step,
                   generate_style_samples, init_prompt_bank, ortho_loss, sample_prompt, train_dspa)
from .control import (ContentEncoder, ControlAdapter, FileCaptionProvider, KcfpTrainConfig, NullCaptionProvider,
                      control_residuals, encode_content, init_control_adapter, train_kcfp)
from .diffusion import (NoiseSchedule, ToyDenoiser, build_noise_schedule, denoise_sample, forward_diffuse, freeze,
                        ldm_denoising_loss, parameter_hash, toy_schedule)
from .metrics import (EvalReport, GaussianStats, MomentFeatures, diversity_score, evaluate_style_run,
                      fit_feature_gaussian, frechet_distance, perceptual_distance)
from .pipeline import StylizeRequest, StylizeResult, diversity_sweep, stylize
