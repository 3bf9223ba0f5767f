"""Metrics, baselines, experiment drivers and the command-line interface."""

from .metrics import median_filter, psnr, ssim
