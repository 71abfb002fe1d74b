"""Multi-view drag-style scene editing at desk scale.

Edit one reference view by dragging handle points, align all views into a
shared frame, carry the edited diffusion latents on a 3D point cloud, and
re-optimize every other view's latent against the rendered cloud.
"""

from .alignment import (
    AlignConfig,
    AlignmentState,
    PairwisePrediction,
    PointmapProvider,
    SyntheticProvider,
    global_align,
    regression_loss,
    synthetic_provider,
)
from .config import RunConfig, SceneConfig, load_run_config, run_config_from_dict
from .diffusion import (
    Decoder,
    Denoiser,
    IdentityDecoder,
    LinearDecoder,
    ScalarLinearDenoiser,
    Schedule,
    SmoothingDenoiser,
    ZeroDenoiser,
    ddim_denoise,
    ddim_invert,
    denoise_one_step,
    eta_to_step,
    make_decoder,
    make_denoiser,
    make_schedule,
)
from .drag import DragConfig, DragResult, EditSpec, drag_edit, reinvert_edited
from .errors import (
    ConfigurationError,
    ContractError,
    DragSceneError,
    EmptySceneError,
    FormatError,
    InvalidInputError,
    NumericalFailureError,
    OptimizationFailureError,
    StageFailure,
)
from .geometry import (
    CameraView,
    MaskGrid,
    Pointmap,
    lift_pixels,
    project,
    relative_transform,
    splat_nearest,
    transform_pointmap,
    warp_mask,
)
from .latent_field import (
    AttributedPointCloud,
    LatentGrid,
    RenderedMaps,
    build_attributed_cloud,
    render_latent_map,
)
from .metrics import ConsistencyReport, consistency_metrics, masked_latent_variance, psnr
from .mvopt import MVOptConfig, ViewEditResult, edit_view, optimize_view_latent
from .pipeline import (
    EditedScene,
    FusedCloud,
    PipelineConfig,
    baseline_per_view_drag,
    eta_sweep,
    load_edited_scene,
    noop_edit_spec,
    reconstruct_scene,
    run_pipeline,
    scene_edit_spec,
)
from .scene import SceneManifest, generate_synthetic_scene
from .tensorio import read_header, read_tensor, write_tensor

__version__ = "0.1.0"
