"""Episodes: containers, ingestion, storage and the synthetic generator."""
from .data import (BEHAVIOR_LABELS, DIFFICULTY_LABELS, ENV_LABELS, STEP_SECONDS, T_FUTURE, T_PAST,
                   Episode, WindowBatch, WindowSample, extract_windows, labels_to_mask, mask_bits,
                   mask_to_labels, stack_windows, window_count, windows_from_episodes)
from .ingest import (GazeImuTable, episode_from_recordings, latlon_to_local, parse_gaze_imu_tsv,
                     parse_gpx, parse_joystick_csv, resample_10hz, savgol_smooth)
from .storage import (decode_feature_cache, encode_feature_cache, read_dataset, read_dataset_manifest,
                      read_episode, read_feature_cache, write_dataset, write_episode,
                      write_feature_cache)
from .synth import Node, WorldConfig, four_way_junction, random_world, straight_corridor, synth_generate

__all__ = [
    "BEHAVIOR_LABELS",
    "DIFFICULTY_LABELS",
    "ENV_LABELS",
    "STEP_SECONDS",
    "T_FUTURE",
    "T_PAST",
    "Episode",
    "WindowBatch",
    "WindowSample",
    "extract_windows",
    "labels_to_mask",
    "mask_bits",
    "mask_to_labels",
    "stack_windows",
    "window_count",
    "windows_from_episodes",
    "GazeImuTable",
    "episode_from_recordings",
    "latlon_to_local",
    "parse_gaze_imu_tsv",
    "parse_gpx",
    "parse_joystick_csv",
    "resample_10hz",
    "savgol_smooth",
    "decode_feature_cache",
    "encode_feature_cache",
    "read_dataset",
    "read_dataset_manifest",
    "read_episode",
    "read_feature_cache",
    "write_dataset",
    "write_episode",
    "write_feature_cache",
    "Node",
    "WorldConfig",
    "four_way_junction",
    "random_world",
    "straight_corridor",
    "synth_generate",
]
