"""Slice-consistent Brownian bridge diffusion for non-contrast to contrast CT translation."""

from bridgesynth.volume import Volume, SubVolume, load_volume, save_volume, extract_subvolume, apply_window
from bridgesynth.schedule import ScheduleTable, build_schedule, forward_sample, posterior_step, transition_params
from bridgesynth.stylekey import StyleKey, compute_style_key, average_style_keys

__version__ = "0.1.0"

__all__ = [
    "Volume",
    "SubVolume",
    "load_volume",
    "save_volume",
    "extract_subvolume",
    "apply_window",
    "ScheduleTable",
    "build_schedule",
    "forward_sample",
    "posterior_step",
    "transition_params",
    "StyleKey",
    "compute_style_key",
    "average_style_keys",
]
