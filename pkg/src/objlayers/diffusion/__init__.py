from .codec import decode, decode_stack, encode_image, encode_stack
from .denoisers import Conditioning, Denoiser, GaussianMixtureDenoiser
from .network import ArchConfig, CoupledDenoiser
from .schedule import NoiseSchedule, add_noise, ddim_estimate_z0, ddim_sample, ddim_step, make_schedule

__all__ = [
    "ArchConfig",
    "Conditioning",
    "CoupledDenoiser",
    "Denoiser",
    "GaussianMixtureDenoiser",
    "NoiseSchedule",
    "add_noise",
    "ddim_estimate_z0",
    "ddim_sample",
    "ddim_step",
    "decode",
    "decode_stack",
    "encode_image",
    "encode_stack",
    "make_schedule",
]
