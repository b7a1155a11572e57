"""Depth from the gap between seeing and hearing a collision."""

from .audio_event import (AudioOnset, HighlightedClip, OnsetParams, build_highlighted_clip,
                          locate_onset)
from .av_correspondence import (AudioImpactWindow, AVEventPair, Correspondence, CorrespondenceParams,
                                MotionEventWindow, detect_audio_impacts, detect_motion_events,
                                pair_events)
from .depth import (CalibrationModel, DepthEstimate, PropagationConstants, calibrate,
                    depth_from_delay, estimate_depth)
from .errors import FlashbangError
from .harness import (DatasetSpec, MetricsReport, PipelineConfig, fps_consistency_report,
                      generate_dataset, run_pipeline)
from .optical_flow import FlowField, FlowParams, compute_anchor_flows, compute_flow, moving_mask
from .scene_sim import (AudioClip, FrameSequence, ImpactModel, NoiseSpec, SceneConfig, Trajectory,
                        render_frames, simulate_scene, simulate_trajectory, synthesize_audio)
from .video_event import (CentroidTrack, CollisionSplit, CollisionTimeEstimate, PixelTrajectoryFit,
                          coarse_split, estimate_collision_time, fit_pixel_trajectories,
                          track_centroid)

__version__ = "0.1.0"
